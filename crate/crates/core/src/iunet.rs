//! The invertible 3-D U-Net noise predictor.
//!
//! Layout of the node chain:
//!
//! ```text
//! head | level 0 couplings, down 0 | ... | bottleneck couplings | up L-1, couplings | ... | up 0, couplings | tail
//! ```
//!
//! The head and tail are ordinary conv stacks. Everything between them, the
//! trunk, is a bijection for a fixed timestep. At each down level the
//! feature map is split along channels: the first part stays on the stack as
//! the skip tensor, the rest is resampled to half resolution with eight times
//! the channels. Each up level resamples back and rejoins the skip, through
//! an attention coupling on the chosen levels and a plain concat elsewhere.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::binio::{self, Reader};
use crate::diffusion::{cosine_schedule, COSINE_S};
use crate::error::{Error, Result};
use crate::invblocks::{AdditiveCoupling, AttentionCoupling, EmbedCache, OrthoResample, TimeEmbedding, BLOCK};
use crate::invblocks::coupling::{init_conv, silu, silu_grad};
use crate::revgraph::{Ctx, Direction, Graph, LocalGrads, MemoryRecorder, Mode, Node, NodeKind, ParamId, ParamSet};
use crate::tensor::{conv3d, conv3d_backward, meter, DType, Prng, Scalar, Tensor};

/// Width of the sinusoidal timestep features.
pub const TEMB_FEATURES: usize = 16;
/// Hidden and output width of the timestep MLP.
pub const TEMB_DIM: usize = 32;

const CKPT_MAGIC: &[u8; 8] = b"IDMCKPT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IUNetConfig {
    pub base_channels: usize,
    /// Number of downsampling steps, equal to the number of skip levels.
    pub levels: usize,
    pub blocks_per_level: usize,
    pub attn_levels: BTreeSet<usize>,
    /// Channels at each level, from full resolution downwards.
    pub channel_schedule: Vec<usize>,
    pub volume_edge: usize,
    pub dtype: DType,
    /// Largest timestep the embedding accepts.
    pub timesteps: usize,
    /// Predict `√(1−ᾱ_t)·x_t + √ᾱ_t·N(x_t, t)` instead of `N(x_t, t)`, with
    /// ᾱ from the cosine schedule over `timesteps`.
    pub output_skip: bool,
}

impl Default for IUNetConfig {
    fn default() -> Self {
        IUNetConfig {
            base_channels: 8,
            levels: 3,
            blocks_per_level: 2,
            attn_levels: [1, 2].into_iter().collect(),
            channel_schedule: vec![8, 16, 32],
            volume_edge: 16,
            dtype: DType::F32,
            timesteps: 2000,
            output_skip: true,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: `{s}` is not a non-negative integer")))
        })
        .collect()
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a non-negative integer")))
}

impl IUNetConfig {
    /// The setting used by most tests: E=8 with two levels, attention on both.
    pub fn small() -> Self {
        IUNetConfig {
            base_channels: 8,
            levels: 2,
            blocks_per_level: 2,
            attn_levels: [0, 1].into_iter().collect(),
            channel_schedule: vec![8, 16],
            volume_edge: 8,
            dtype: DType::F64,
            timesteps: 2000,
            output_skip: true,
        }
    }

    /// Channels at level `i`; `i == levels` is the bottleneck.
    pub fn channels(&self, i: usize) -> usize {
        if i < self.levels {
            self.channel_schedule[i]
        } else {
            2 * self.channel_schedule[self.levels - 1]
        }
    }

    /// Channels sent down (and later resampled back) at level `i`.
    pub fn down_channels(&self, i: usize) -> usize {
        self.channels(i + 1) / BLOCK
    }

    /// Channels kept as the skip tensor at level `i`.
    pub fn skip_channels(&self, i: usize) -> usize {
        self.channels(i) - self.down_channels(i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.channel_schedule.len() != self.levels {
            return bad(format!(
                "channel_schedule has {} entries but levels = {}",
                self.channel_schedule.len(),
                self.levels
            ));
        }
        if self.base_channels != self.channel_schedule[0] {
            return bad(format!(
                "base_channels = {} must equal the first channel_schedule entry {}",
                self.base_channels, self.channel_schedule[0]
            ));
        }
        if self.blocks_per_level == 0 {
            return bad("blocks_per_level must be at least 1".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        let factor = 1usize.checked_shl(self.levels as u32).unwrap_or(0);
        if self.volume_edge == 0 || factor == 0 || self.volume_edge % factor != 0 {
            return bad(format!(
                "volume_edge = {} must be a positive multiple of 2^levels = 2^{}",
                self.volume_edge, self.levels
            ));
        }
        for i in 0..=self.levels {
            let c = self.channels(i);
            if c < 2 || c % 2 != 0 {
                return bad(format!("level {i} has {c} channels; couplings need an even count"));
            }
        }
        for i in 0..self.levels {
            let next = self.channels(i + 1);
            if next % BLOCK != 0 || next / BLOCK >= self.channels(i) || next / BLOCK == 0 {
                return bad(format!(
                    "level {} needs {} channels: a multiple of 8 below 8 x {}",
                    i + 1,
                    next,
                    self.channels(i)
                ));
            }
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.levels) {
            return bad(format!("attention level {l} outside 0..{}", self.levels));
        }
        Ok(())
    }

    /// Canonical `key=value` lines sorted by key.
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "attn_levels={}", join(&mut self.attn_levels.iter().copied()));
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "blocks_per_level={}", self.blocks_per_level);
        let _ = writeln!(s, "channel_schedule={}", join(&mut self.channel_schedule.iter().copied()));
        let _ = writeln!(s, "dtype={}", self.dtype.name());
        let _ = writeln!(s, "levels={}", self.levels);
        let _ = writeln!(s, "output_skip={}", self.output_skip);
        let _ = writeln!(s, "timesteps={}", self.timesteps);
        let _ = writeln!(s, "volume_edge={}", self.volume_edge);
        s
    }

    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "attn_levels" => self.attn_levels = parse_list(key, value)?.into_iter().collect(),
            "base_channels" => self.base_channels = parse_usize(key, value)?,
            "blocks_per_level" => self.blocks_per_level = parse_usize(key, value)?,
            "channel_schedule" => self.channel_schedule = parse_list(key, value)?,
            "dtype" => self.dtype = value.trim().parse()?,
            "levels" => self.levels = parse_usize(key, value)?,
            "output_skip" => {
                self.output_skip = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("`{key}` expects true or false, got `{}`", value.trim())))?
            }
            "timesteps" => self.timesteps = parse_usize(key, value)?,
            "volume_edge" => self.volume_edge = parse_usize(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = IUNetConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown model key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Total scalar parameter count of the model this config builds.
    pub fn param_count(&self) -> usize {
        let c0 = self.channels(0);
        let conv = |cin: usize, cout: usize| cout * cin * 27 + cout;
        let head = conv(1, c0) + conv(c0, c0);
        let tail = conv(c0, c0) + conv(c0, 1);
        let temb = TimeEmbedding::count_params(TEMB_FEATURES, TEMB_DIM, TEMB_DIM);
        let coupling = |c: usize| AdditiveCoupling::count_params(c, c, TEMB_DIM);
        let mut total = head + tail + temb;
        for i in 0..self.levels {
            total += 2 * self.blocks_per_level * coupling(self.channels(i));
            total += 2 * BLOCK * BLOCK;
            if self.attn_levels.contains(&i) {
                total += AttentionCoupling::count_params(self.skip_channels(i));
            }
        }
        total + self.blocks_per_level * coupling(self.channels(self.levels))
    }
}

/// conv3 -> SiLU -> conv3; a non-invertible stage whose input is always kept.
struct ConvPair {
    label: String,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ConvPair {
    fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        prng: &mut Prng,
        label: &str,
        (cin, mid, cout): (usize, usize, usize),
        out_gain: f64,
    ) -> Self {
        let w1 = params.register(format!("{label}.w1"), init_conv(prng, mid, cin, 3));
        let b1 = params.register(format!("{label}.b1"), Tensor::zeros(&[mid]).expect("bias"));
        let w2 = params.register(format!("{label}.w2"), init_conv::<T>(prng, cout, mid, 3).scale(T::from_f64(out_gain)));
        let b2 = params.register(format!("{label}.b2"), Tensor::zeros(&[cout]).expect("bias"));
        ConvPair {
            label: label.to_string(),
            w1,
            b1,
            w2,
            b2,
        }
    }
}

impl<T: Scalar> Node<T> for ConvPair {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn kind(&self) -> NodeKind {
        NodeKind::Stored
    }

    fn arity(&self) -> (usize, usize) {
        (1, 1)
    }

    fn forward(&self, params: &ParamSet<T>, _: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let pre = conv3d(&inputs[0], params.value(self.w1), Some(params.value(self.b1).data()), 1, 1)?;
        let act = pre.map(silu);
        meter::add_flops(4 * pre.len() as u64);
        drop(pre);
        Ok(vec![conv3d(&act, params.value(self.w2), Some(params.value(self.b2).data()), 1, 1)?])
    }

    fn backward(
        &self,
        params: &ParamSet<T>,
        _: &Ctx<T>,
        inputs: &[Tensor<T>],
        grad_out: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        let x = &inputs[0];
        let pre = conv3d(x, params.value(self.w1), Some(params.value(self.b1).data()), 1, 1)?;
        let act = pre.map(silu);
        let g2 = conv3d_backward(&act, params.value(self.w2), &grad_out[0], 1, 1)?;
        drop(act);
        let mut g_pre = g2.input;
        for (g, &p) in g_pre.data_mut().iter_mut().zip(pre.data()) {
            *g *= silu_grad(p);
        }
        meter::add_flops(10 * pre.len() as u64);
        drop(pre);
        let g1 = conv3d_backward(x, params.value(self.w1), &g_pre, 1, 1)?;
        let (n1, n2) = (g1.bias.len(), g2.bias.len());
        Ok(LocalGrads {
            inputs: vec![g1.input],
            params: vec![
                (self.w1, g1.kernel),
                (self.b1, Tensor::new(&[n1], g1.bias)?.untracked()),
                (self.w2, g2.kernel),
                (self.b2, Tensor::new(&[n2], g2.bias)?.untracked()),
            ],
            emb: None,
        })
    }
}

/// Splits off the skip tensor and resamples the rest to half resolution.
struct SplitDown {
    label: String,
    skip: usize,
    resample: OrthoResample,
}

impl<T: Scalar> Node<T> for SplitDown {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn kind(&self) -> NodeKind {
        NodeKind::Invertible
    }

    fn arity(&self) -> (usize, usize) {
        (1, 2)
    }

    fn forward(&self, params: &ParamSet<T>, _: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (skip, part) = inputs[0].split_channels(self.skip)?;
        let down = self.resample.down(params, &part)?;
        Ok(vec![skip, down])
    }

    fn inverse(&self, params: &ParamSet<T>, _: &Ctx<T>, outputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if outputs[0].channels() != self.skip {
            return Err(Error::shape(
                "split_down",
                format!("`{}`: skip has {} channels, expected {}", self.label, outputs[0].channels(), self.skip),
            ));
        }
        let part = self.resample.up(params, &outputs[1])?;
        Ok(vec![Tensor::concat_channels(&outputs[0], &part)?])
    }

    fn backward(
        &self,
        params: &ParamSet<T>,
        _: &Ctx<T>,
        inputs: &[Tensor<T>],
        grad_out: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        let part = inputs[0].narrow_channels(self.skip, inputs[0].channels() - self.skip)?;
        let (g_part, g_a) = self.resample.down_backward(params, &part, &grad_out[1])?;
        Ok(LocalGrads {
            inputs: vec![Tensor::concat_channels(&grad_out[0], &g_part)?],
            params: vec![(self.resample.params, g_a)],
            emb: None,
        })
    }

    fn inverse_backward(
        &self,
        params: &ParamSet<T>,
        _: &Ctx<T>,
        outputs: &[Tensor<T>],
        grad_in: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        // x = concat(skip, up(down))
        let (g_skip, g_part) = grad_in[0].split_channels(self.skip)?;
        let (g_down, g_a) = self.resample.up_backward(params, &outputs[1], &g_part)?;
        Ok(LocalGrads {
            inputs: vec![g_skip, g_down],
            params: vec![(self.resample.params, g_a)],
            emb: None,
        })
    }
}

/// Resamples the deeper tensor back up and rejoins it with the skip tensor.
struct MergeUp {
    label: String,
    skip: usize,
    deeper: usize,
    resample: OrthoResample,
    attn: Option<AttentionCoupling>,
}

impl MergeUp {
    fn check<T: Scalar>(&self, skip: &Tensor<T>, deeper: &Tensor<T>) -> Result<()> {
        if skip.channels() != self.skip || deeper.channels() != self.deeper {
            return Err(Error::shape(
                "merge_up",
                format!(
                    "`{}` expects skip {} and deeper {} channels, got {} and {}",
                    self.label,
                    self.skip,
                    self.deeper,
                    skip.channels(),
                    deeper.channels()
                ),
            ));
        }
        Ok(())
    }

    fn split<T: Scalar>(&self, params: &ParamSet<T>, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        match &self.attn {
            Some(a) => a.attn_invert(params, y),
            None => y.split_channels(self.skip),
        }
    }
}

impl<T: Scalar> Node<T> for MergeUp {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn kind(&self) -> NodeKind {
        NodeKind::Invertible
    }

    fn arity(&self) -> (usize, usize) {
        (2, 1)
    }

    fn forward(&self, params: &ParamSet<T>, _: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (skip, deeper) = (&inputs[0], &inputs[1]);
        self.check(skip, deeper)?;
        let c_up = self.resample.up(params, deeper)?;
        let out = match &self.attn {
            Some(a) => a.attn_apply(params, skip, &c_up)?,
            None => Tensor::concat_channels(skip, &c_up)?,
        };
        Ok(vec![out])
    }

    fn inverse(&self, params: &ParamSet<T>, _: &Ctx<T>, outputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let (skip, c_up) = self.split(params, &outputs[0])?;
        let deeper = self.resample.down(params, &c_up)?;
        Ok(vec![skip, deeper])
    }

    fn backward(
        &self,
        params: &ParamSet<T>,
        _: &Ctx<T>,
        inputs: &[Tensor<T>],
        grad_out: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        let (skip, deeper) = (&inputs[0], &inputs[1]);
        self.check(skip, deeper)?;
        let (g_skip, g_cup, mut grads) = match &self.attn {
            Some(a) => a.apply_backward(params, skip, &grad_out[0])?,
            None => {
                let (gs, gc) = grad_out[0].split_channels(self.skip)?;
                (gs, gc, Vec::new())
            }
        };
        let (g_deeper, g_a) = self.resample.up_backward(params, deeper, &g_cup)?;
        grads.push((self.resample.params, g_a));
        Ok(LocalGrads {
            inputs: vec![g_skip, g_deeper],
            params: grads,
            emb: None,
        })
    }

    fn inverse_backward(
        &self,
        params: &ParamSet<T>,
        _: &Ctx<T>,
        outputs: &[Tensor<T>],
        grad_in: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        let y = &outputs[0];
        let (_, c_up) = self.split(params, y)?;
        let (g_cup, g_a) = self.resample.down_backward(params, &c_up, &grad_in[1])?;
        drop(c_up);
        let (g_y, mut grads) = match &self.attn {
            Some(a) => a.invert_backward(params, y, &grad_in[0], &g_cup)?,
            None => (Tensor::concat_channels(&grad_in[0], &g_cup)?, Vec::new()),
        };
        grads.push((self.resample.params, g_a));
        Ok(LocalGrads {
            inputs: vec![g_y],
            params: grads,
            emb: None,
        })
    }
}

/// Conditioning for the trunk inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeCond {
    Same(usize),
    Null,
}

pub struct IUNet<T: Scalar> {
    pub config: IUNetConfig,
    pub params: ParamSet<T>,
    graph: Graph<T>,
    temb: TimeEmbedding,
    resamplers: Vec<ParamId>,
}

impl<T: Scalar> IUNet<T> {
    pub fn new(config: IUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config asks for {} but the model is built in {}",
                config.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let mut prng = Prng::new(seed);
        let mut params = ParamSet::new();
        let mut graph: Graph<T> = Graph::new();
        let mut resamplers = Vec::new();
        let c0 = config.channels(0);
        let temb = TimeEmbedding::new(&mut params, &mut prng, TEMB_FEATURES, TEMB_DIM, TEMB_DIM, config.timesteps)?;
        graph.push(Box::new(ConvPair::new(&mut params, &mut prng, "head", (1, c0, c0), 1.0)));

        let coupling = |params: &mut ParamSet<T>, prng: &mut Prng, graph: &mut Graph<T>, label: String, c: usize| {
            AdditiveCoupling::new(params, prng, label, c, c, TEMB_DIM).map(|b| graph.push(Box::new(b)))
        };
        for i in 0..config.levels {
            for b in 0..config.blocks_per_level {
                coupling(&mut params, &mut prng, &mut graph, format!("down{i}.c{b}"), config.channels(i))?;
            }
            let resample = OrthoResample::register(&mut params, &format!("down{i}.q"));
            resamplers.push(resample.params);
            graph.push(Box::new(SplitDown {
                label: format!("down{i}"),
                skip: config.skip_channels(i),
                resample,
            }));
        }
        for b in 0..config.blocks_per_level {
            coupling(&mut params, &mut prng, &mut graph, format!("mid.c{b}"), config.channels(config.levels))?;
        }
        for i in (0..config.levels).rev() {
            let resample = OrthoResample::register(&mut params, &format!("up{i}.q"));
            resamplers.push(resample.params);
            let attn = config
                .attn_levels
                .contains(&i)
                .then(|| AttentionCoupling::new(&mut params, &mut prng, format!("up{i}.attn"), config.skip_channels(i)));
            graph.push(Box::new(MergeUp {
                label: format!("up{i}"),
                skip: config.skip_channels(i),
                deeper: config.channels(i + 1),
                resample,
                attn,
            }));
            for b in 0..config.blocks_per_level {
                coupling(&mut params, &mut prng, &mut graph, format!("up{i}.c{b}"), config.channels(i))?;
            }
        }
        graph.push(Box::new(ConvPair::new(&mut params, &mut prng, "tail", (c0, c0, 1), 0.1)));
        Ok(IUNet {
            config,
            params,
            graph,
            temb,
            resamplers,
        })
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn head_range(&self) -> Range<usize> {
        0..1
    }

    pub fn trunk_range(&self) -> Range<usize> {
        1..self.graph.len() - 1
    }

    pub fn tail_range(&self) -> Range<usize> {
        self.graph.len() - 1..self.graph.len()
    }

    pub fn time_embedding(&self) -> &TimeEmbedding {
        &self.temb
    }

    /// Parameter ids of every orthogonal resampler.
    pub fn resampler_ids(&self) -> &[ParamId] {
        &self.resamplers
    }

    /// Worst `max|QᵀQ − I|` over all resamplers.
    pub fn orthogonality_error(&self) -> f64 {
        self.resamplers
            .iter()
            .map(|&id| OrthoResample { params: id }.cayley(&self.params).orthogonality_error())
            .fold(0.0, f64::max)
    }

    /// Conditioning for timestep `t`, with the cache needed to backpropagate
    /// into the embedding MLP.
    pub fn conditioning(&self, t: usize) -> Result<(Ctx<T>, EmbedCache<T>)> {
        let (emb, cache) = self.temb.forward(&self.params, t)?;
        Ok((Ctx::with_emb(emb.untracked()), cache))
    }

    /// Accumulates the embedding MLP gradients for `dL/d(emb)`.
    pub fn backprop_embedding(&mut self, cache: &EmbedCache<T>, grad: &Tensor<T>) -> Result<()> {
        for (id, g) in self.temb.backward(&self.params, cache, grad)? {
            self.params.accumulate(id, &g)?;
        }
        Ok(())
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let e = self.config.volume_edge;
        if x.rank() != 5 || x.shape()[1] != 1 || x.shape()[2..] != [e, e, e] {
            return Err(Error::shape(
                "unet_forward",
                format!("expected [B, 1, {e}, {e}, {e}], got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.config.timesteps {
            return Err(Error::Domain(format!("timestep {t} outside [0, {}]", self.config.timesteps)));
        }
        Ok(())
    }

    fn run(&self, ctx: &Ctx<T>, range: Range<usize>, direction: Direction, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut rec = MemoryRecorder::new();
        let (mut out, _) = self
            .graph
            .run(&self.params, ctx, range, direction, Mode::InvertibleRecompute, false, vec![x], &mut rec)?;
        debug_assert_eq!(out.len(), 1);
        Ok(out.pop().expect("single output"))
    }

    /// Noise prediction `U(x_t, t)`. `mode` only changes what a training
    /// pass would keep; the arithmetic is identical.
    pub fn forward(&self, x: &Tensor<T>, t: usize, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.check_t(t)?;
        let (ctx, _) = self.conditioning(t)?;
        let mut rec = MemoryRecorder::new();
        let (mut out, _) = self
            .graph
            .run(&self.params, &ctx, 0..self.graph.len(), Direction::Forward, mode, false, vec![x.clone()], &mut rec)?;
        let n = out.pop().expect("single output");
        match self.output_mix(t)? {
            Some((cs, co)) => x.scale(T::from_f64(cs)).add(&n.scale(T::from_f64(co))),
            None => Ok(n),
        }
    }

    /// `(c_skip, c_out)` of the output skip at `t`, or None when it is off.
    pub fn output_mix(&self, t: usize) -> Result<Option<(f64, f64)>> {
        if !self.config.output_skip {
            return Ok(None);
        }
        let ab = cosine_schedule(self.config.timesteps, COSINE_S)?.alpha_bar(t);
        Ok(Some(((1.0 - ab).sqrt(), ab.sqrt())))
    }

    pub fn head(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run(&Ctx::null(), self.head_range(), Direction::Forward, x.clone())
    }

    pub fn tail(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(&Ctx::null(), self.tail_range(), Direction::Forward, v.clone())
    }

    pub fn trunk_forward(&self, h: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let (ctx, _) = self.conditioning(t)?;
        self.run(&ctx, self.trunk_range(), Direction::Forward, h.clone())
    }

    pub fn trunk_inverse(&self, v: &Tensor<T>, cond: TimeCond) -> Result<Tensor<T>> {
        let ctx = match cond {
            TimeCond::Same(t) => {
                self.check_t(t)?;
                self.conditioning(t)?.0
            }
            TimeCond::Null => Ctx::null(),
        };
        let c0 = self.config.channels(0);
        if v.rank() != 5 || v.channels() != c0 {
            return Err(Error::shape("unet_inverse", format!("expected {c0} channels, got {:?}", v.shape())));
        }
        self.run(&ctx, self.trunk_range(), Direction::Inverse, v.clone())
    }

    /// Fills every all-zero parameter tensor (zero-initialized output layers,
    /// resampler generators, biases) with small random values, so the trunk
    /// is no longer the identity.
    pub fn randomize_identity_params(&mut self, seed: u64, gain: f64) {
        let mut prng = Prng::new(seed);
        for p in self.params.iter_mut() {
            if p.value.data().iter().any(|v| *v != T::zero()) {
                continue;
            }
            let fan_in: usize = p.value.shape()[1..].iter().product();
            let std = gain / (fan_in.max(1) as f64).sqrt();
            for v in p.value.data_mut() {
                *v = T::from_f64(std * prng.normal_pair().0);
            }
        }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let path = Path::new("<memory>");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        let text = self.config.to_text();
        binio::put_u32(&mut out, binio::dim_u32(path, text.len())?);
        out.extend_from_slice(text.as_bytes());
        out.push(T::DTYPE.code());
        binio::put_u32(&mut out, binio::dim_u32(path, self.params.len())?);
        for p in self.params.iter() {
            binio::put_u32(&mut out, binio::dim_u32(path, p.id)?);
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                binio::put_u32(&mut out, binio::dim_u32(path, d)?);
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn checkpoint_save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.checkpoint_bytes()?)
    }

    pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (config, mut r) = read_header(bytes, path)?;
        if config.dtype != T::DTYPE {
            return Err(r.fail(format!(
                "checkpoint holds {} parameters, requested {}",
                config.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let mut model = IUNet::<T>::new(config, 0).map_err(|e| r.fail(format!("invalid stored config: {e}")))?;
        let count = r.u32("parameter count")? as usize;
        if count != model.params.len() {
            return Err(r.fail(format!("{count} parameters stored, model has {}", model.params.len())));
        }
        for expected in 0..count {
            let id = r.u32("parameter id")? as usize;
            if id != expected {
                return Err(r.fail(format!("parameter id {id} out of order, expected {expected}")));
            }
            let rank = r.u8("parameter rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("parameter shape")? as usize);
            }
            if shape != model.params.value(id).shape() {
                return Err(r.fail(format!(
                    "parameter `{}` stored as {shape:?}, model expects {:?}",
                    model.params.get(id).name,
                    model.params.value(id).shape()
                )));
            }
            let data = r.floats::<T>(shape.iter().product(), "parameter data")?;
            *model.params.value_mut(id) = Tensor::new(&shape, data)?.untracked();
        }
        r.finish()?;
        Ok(model)
    }

    pub fn checkpoint_load(path: &Path) -> Result<Self> {
        Self::checkpoint_from_bytes(&binio::read_file(path)?, path)
    }
}

fn read_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(IUNetConfig, Reader<'a>)> {
    let mut r = Reader::new(bytes, path);
    if r.take(CKPT_MAGIC.len(), "magic")? != CKPT_MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?).map_err(|_| r.fail("config text is not UTF-8"))?;
    let config = IUNetConfig::from_text(text).map_err(|e| r.fail(format!("bad stored config: {e}")))?;
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| r.fail(format!("unknown dtype code {code}")))?;
    if dtype != config.dtype {
        return Err(r.fail("dtype byte disagrees with the stored config"));
    }
    Ok((config, r))
}

/// Reads only the configuration of a checkpoint, e.g. to pick the dtype.
pub fn checkpoint_config(path: &Path) -> Result<IUNetConfig> {
    let bytes = binio::read_file(path)?;
    Ok(read_header(&bytes, path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> IUNet<f64> {
        IUNet::new(IUNetConfig::small(), seed).unwrap()
    }

    #[test]
    fn desk_config_is_valid() {
        let cfg = IUNetConfig::default();
        cfg.validate().unwrap();
        assert_eq!((0..3).map(|i| cfg.skip_channels(i)).collect::<Vec<_>>(), vec![6, 12, 24]);
        assert_eq!(cfg.channels(3), 64);
    }

    #[test]
    fn large_config_validates() {
        let cfg = IUNetConfig {
            base_channels: 64,
            levels: 6,
            blocks_per_level: 2,
            attn_levels: [4, 5].into_iter().collect(),
            channel_schedule: vec![64, 128, 256, 512, 1024, 2048],
            volume_edge: 64,
            dtype: DType::F32,
            timesteps: 2000,
            output_skip: true,
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = IUNetConfig::default();
        let cases: Vec<Box<dyn Fn(&mut IUNetConfig)>> = vec![
            Box::new(|c| c.volume_edge = 12),
            Box::new(|c| c.channel_schedule = vec![8, 16]),
            Box::new(|c| c.attn_levels.insert(3).then_some(()).unwrap()),
            Box::new(|c| c.base_channels = 4),
            Box::new(|c| c.channel_schedule = vec![8, 12, 32]),
            Box::new(|c| c.channel_schedule = vec![8, 64, 32]),
            Box::new(|c| c.levels = 0),
            Box::new(|c| c.blocks_per_level = 0),
        ];
        for (i, f) in cases.iter().enumerate() {
            let mut c = base.clone();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "case {i}");
        }
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = IUNetConfig::default();
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(IUNetConfig::from_text(&text).unwrap(), cfg);
        assert!(IUNetConfig::from_text("bogus=1").is_err());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = IUNetConfig {
            base_channels: 4,
            levels: 2,
            blocks_per_level: 1,
            attn_levels: [1].into_iter().collect(),
            channel_schedule: vec![4, 8],
            volume_edge: 8,
            dtype: DType::F64,
            timesteps: 10,
            output_skip: true,
        };
        // head 1->4->4, tail 4->4->1
        let head = (4 * 27 + 4) + (4 * 4 * 27 + 4);
        let tail = (4 * 4 * 27 + 4) + (4 * 27 + 1);
        let temb = (32 * 16 + 32) + (32 * 32 + 32);
        // coupling on c channels, hidden c: conv c/2->c, bias, 32 -> c, conv c->c/2, bias
        let coup = |c: usize| c * (c / 2) * 27 + c + c * 32 + (c / 2) * c * 27 + c / 2;
        let couplings = 2 * coup(4) + 2 * coup(8) + coup(16);
        let resamplers = 4 * 64;
        // skip at level 1: 8 - 16/8 = 6 channels
        let attn = 4 * 36 + 6;
        let manual = head + tail + temb + couplings + resamplers + attn;
        assert_eq!(cfg.param_count(), manual);
        let model: IUNet<f64> = IUNet::new(cfg.clone(), 1).unwrap();
        assert_eq!(model.params.scalar_count(), manual);
        let desk = IUNetConfig { dtype: DType::F64, ..IUNetConfig::default() };
        assert_eq!(IUNet::<f64>::new(desk.clone(), 0).unwrap().params.scalar_count(), desk.param_count());
    }

    #[test]
    fn output_shape_matches_input() {
        for (edge, levels, sched) in [(8, 2, vec![8, 16]), (16, 2, vec![8, 16]), (8, 3, vec![8, 16, 32]), (16, 3, vec![8, 16, 32])] {
            let cfg = IUNetConfig {
                levels,
                volume_edge: edge,
                channel_schedule: sched,
                attn_levels: [levels - 2, levels - 1].into_iter().collect(),
                dtype: DType::F32,
                blocks_per_level: 1,
                ..IUNetConfig::default()
            };
            let model: IUNet<f32> = IUNet::new(cfg, 3).unwrap();
            let x: Tensor<f32> = Prng::new(4).randn(&[2, 1, edge, edge, edge]).unwrap();
            assert_eq!(model.forward(&x, 10, Mode::StoreAll).unwrap().shape(), x.shape());
        }
    }

    #[test]
    fn fresh_trunk_is_identity() {
        let plain: IUNet<f64> = IUNet::new(IUNetConfig { output_skip: false, ..IUNetConfig::small() }, 5).unwrap();
        let x: Tensor<f64> = Prng::new(6).randn(&[1, 1, 8, 8, 8]).unwrap();
        let y = plain.forward(&x, 100, Mode::InvertibleRecompute).unwrap();
        let direct = plain.tail(&plain.head(&x).unwrap()).unwrap();
        assert!(y.bit_eq(&direct));

        // With the skip on: √(1−ᾱ)·x + √ᾱ·tail(head(x)), ᾱ from the cosine formula.
        let model = small_model(5);
        let f = |t: f64| (((t / 2000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let ab = f(100.0) / f(0.0);
        let y = model.forward(&x, 100, Mode::InvertibleRecompute).unwrap();
        for ((a, b), v) in y.data().iter().zip(direct.data()).zip(x.data()) {
            let want = (1.0 - ab).sqrt() * v + ab.sqrt() * b;
            assert!((a - want).abs() <= 1e-12, "{a} vs {want}");
        }
    }

    #[test]
    fn modes_give_identical_outputs() {
        let mut model = small_model(7);
        model.randomize_identity_params(8, 0.5);
        let x: Tensor<f64> = Prng::new(9).randn(&[2, 1, 8, 8, 8]).unwrap();
        let a = model.forward(&x, 40, Mode::StoreAll).unwrap();
        let b = model.forward(&x, 40, Mode::InvertibleRecompute).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn trunk_roundtrip_and_null_conditioning() {
        let mut model = small_model(10);
        model.randomize_identity_params(11, 0.5);
        let h: Tensor<f64> = Prng::new(12).randn(&[1, 8, 8, 8, 8]).unwrap();
        let v = model.trunk_forward(&h, 300).unwrap();
        assert!(v.max_rel_diff(&h) > 1e-3);
        let back = model.trunk_inverse(&v, TimeCond::Same(300)).unwrap();
        assert!(back.max_rel_diff(&h) <= 1e-10);
        let null = model.trunk_inverse(&v, TimeCond::Null).unwrap();
        assert!(null.max_rel_diff(&h) > 1e-3);
    }

    #[test]
    fn trunk_roundtrip_f32() {
        let cfg = IUNetConfig { dtype: DType::F32, ..IUNetConfig::small() };
        let mut model: IUNet<f32> = IUNet::new(cfg, 13).unwrap();
        model.randomize_identity_params(14, 0.5);
        let h: Tensor<f32> = Prng::new(15).randn(&[1, 8, 8, 8, 8]).unwrap();
        let v = model.trunk_forward(&h, 1000).unwrap();
        assert!(model.trunk_inverse(&v, TimeCond::Same(1000)).unwrap().max_rel_diff(&h) <= 1e-4);
    }

    #[test]
    fn bad_inputs_rejected() {
        let model = small_model(16);
        let x: Tensor<f64> = Tensor::zeros(&[1, 1, 4, 4, 4]).unwrap();
        assert!(matches!(model.forward(&x, 1, Mode::StoreAll), Err(Error::Shape { .. })));
        let x: Tensor<f64> = Tensor::zeros(&[1, 1, 8, 8, 8]).unwrap();
        assert!(matches!(model.forward(&x, 2001, Mode::StoreAll), Err(Error::Domain(_))));
        let v: Tensor<f64> = Tensor::zeros(&[1, 5, 8, 8, 8]).unwrap();
        assert!(model.trunk_inverse(&v, TimeCond::Null).is_err());
        assert!(IUNet::<f32>::new(IUNetConfig::small(), 0).is_err(), "dtype mismatch");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut model = small_model(17);
        model.randomize_identity_params(18, 0.3);
        let bytes = model.checkpoint_bytes().unwrap();
        let loaded = IUNet::<f64>::checkpoint_from_bytes(&bytes, Path::new("m")).unwrap();
        assert_eq!(loaded.checkpoint_bytes().unwrap(), bytes);
        let x: Tensor<f64> = Prng::new(19).randn(&[1, 1, 8, 8, 8]).unwrap();
        let a = model.forward(&x, 7, Mode::StoreAll).unwrap();
        let b = loaded.forward(&x, 7, Mode::StoreAll).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let model = small_model(20);
        let bytes = model.checkpoint_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(IUNet::<f64>::checkpoint_from_bytes(&bad, Path::new("m")), Err(Error::Format { .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(IUNet::<f64>::checkpoint_from_bytes(cut, Path::new("m")), Err(Error::Format { .. })));
        assert!(matches!(IUNet::<f32>::checkpoint_from_bytes(&bytes, Path::new("m")), Err(Error::Format { .. })));
    }

    #[test]
    fn resamplers_start_orthogonal() {
        let model = small_model(21);
        assert_eq!(model.resampler_ids().len(), 4);
        assert!(model.orthogonality_error() < 1e-15);
    }
}
