//! DDPM training and sampling around an [`IUNet`].

use crate::error::{Error, Result};
use crate::iunet::IUNet;
use crate::revgraph::{Ctx, Direction, MemoryRecorder, MemoryReport, Mode, ParamSet, Phase};
use crate::tensor::{meter, Prng, Scalar, Tensor};

/// Cosine-schedule offset.
pub const COSINE_S: f64 = 0.008;
const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

/// Noise levels indexed by timestep `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaSchedule {
    pub timesteps: usize,
    /// `betas[t - 1]` is β_t.
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `alpha_bars[t]` is ᾱ_t, with `alpha_bars[0] == 1`.
    pub alpha_bars: Vec<f64>,
}

impl BetaSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Domain(format!("timestep {t} outside [1, {}]", self.timesteps)));
        }
        Ok(())
    }
}

/// Cosine schedule: ᾱ follows `cos²(((t/T + s)/(1 + s))·π/2)` normalized at
/// `t = 0`, with each β clipped to `[1e-8, 0.999]` and ᾱ rebuilt as the
/// running product of `1 − β`.
pub fn cosine_schedule(timesteps: usize, s: f64) -> Result<BetaSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("the schedule needs at least one timestep".into()));
    }
    let f = |t: usize| {
        let x = ((t as f64 / timesteps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let raw: Vec<f64> = (0..=timesteps).map(|t| f(t) / f0).collect();
    let betas: Vec<f64> = (1..=timesteps)
        .map(|t| (1.0 - raw[t] / raw[t - 1]).clamp(BETA_MIN, BETA_MAX))
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().expect("non-empty");
        alpha_bars.push(prev * a);
    }
    Ok(BetaSchedule {
        timesteps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &BetaSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One forward-process step `x_t = √(1 − β_t)·x_{t−1} + √β_t·ε`.
pub fn q_step<T: Scalar>(x_prev: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &BetaSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    combine(x_prev, (1.0 - b).sqrt(), eps, b.sqrt())
}

fn combine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("combine", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ca, cb) = (T::from_f64(ca), T::from_f64(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    meter::add_flops(3 * a.len() as u64);
    Tensor::new(a.shape(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda_r: f64,
    pub lambda_l2: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            lambda_r: 0.0,
            lambda_l2: 1e-4,
            batch: 2,
            steps: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lambda_r) {
            return bad(format!("lambda_r must lie in [0, 1], got {}", self.lambda_r));
        }
        if !(self.lambda_l2 >= 0.0) {
            return bad(format!("lambda_l2 must be non-negative, got {}", self.lambda_l2));
        }
        if self.batch == 0 || self.steps == 0 {
            return bad("batch and steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("AdamW moments need beta1, beta2 in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// Cosine-annealed rate at step `k`, falling from `lr` to zero at `steps`.
    pub fn lr_at(&self, k: usize) -> f64 {
        let frac = k.min(self.steps) as f64 / self.steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

/// AdamW with decoupled weight decay; moments are kept in f64.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamSet<T>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.lambda_l2,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update<T: Scalar>(&mut self, params: &mut ParamSet<T>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let wf = w.as_f64();
                *w = T::from_f64(wf - lr * (step + self.weight_decay * wf));
            }
        }
    }
}

/// Terms of the composite objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean squared noise-prediction error.
    pub noise: f64,
    /// Mean squared trunk reconstruction error under null conditioning; 0 when unused.
    pub recon: f64,
    /// `‖W‖₂` over all parameters.
    pub weight_norm: f64,
    /// `noise + λ_R·recon + λ_L2·weight_norm`.
    pub total: f64,
}

fn mse_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let mse = diff.norm_sq() / n;
    let grad = diff.scale(T::from_f64(2.0 / n));
    meter::add_flops(3 * pred.len() as u64);
    Ok((mse, grad))
}

/// Composite loss at `(x_t, t)` with target noise `eps`; parameter
/// gradients are left in `model.params`.
///
/// The reconstruction term is differentiated through the null-conditioned
/// inverse of the trunk and is skipped entirely when `lambda_r == 0`.
pub fn loss_and_grads<T: Scalar>(
    model: &mut IUNet<T>,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    lambda_r: f64,
    lambda_l2: f64,
    mode: Mode,
) -> Result<(LossParts, MemoryReport)> {
    model.check_input(x_t)?;
    if eps.shape() != x_t.shape() {
        return Err(Error::shape("loss", format!("noise {:?} vs input {:?}", eps.shape(), x_t.shape())));
    }
    model.params.zero_grads();
    let mut rec = MemoryRecorder::with_live(x_t.bytes() + eps.bytes());
    rec.mark(Phase::Other, "input");
    let (ctx, emb_cache) = model.conditioning(t)?;
    let mut params = std::mem::take(&mut model.params);
    let result = composite_pass(model, &mut params, &ctx, x_t, eps, t, lambda_r, mode, &mut rec);
    model.params = params;
    let (noise, recon, g_emb) = result?;
    if let Some(g) = g_emb {
        model.backprop_embedding(&emb_cache, &g)?;
    }
    rec.mark(Phase::Other, "done");

    let weight_norm = model.params.l2_norm();
    let total = noise + lambda_r * recon + lambda_l2 * weight_norm;
    Ok((
        LossParts {
            noise,
            recon,
            weight_norm,
            total,
        },
        rec.report(mode),
    ))
}

/// Forward and backward over head, trunk and tail. Returns the noise MSE,
/// the reconstruction MSE and the gradient for the timestep embedding.
#[allow(clippy::too_many_arguments)]
fn composite_pass<T: Scalar>(
    model: &IUNet<T>,
    params: &mut ParamSet<T>,
    ctx: &Ctx<T>,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    lambda_r: f64,
    mode: Mode,
    rec: &mut MemoryRecorder,
) -> Result<(f64, f64, Option<Tensor<T>>)> {
    let graph = model.graph();
    let fwd = Direction::Forward;
    let (s_head, tape_head) = graph.run(params, ctx, model.head_range(), fwd, mode, false, vec![x_t.clone()], rec)?;
    let h_keep = (lambda_r > 0.0).then(|| s_head[0].clone());
    let (s_trunk, tape_trunk) = graph.run(params, ctx, model.trunk_range(), fwd, mode, false, s_head, rec)?;

    let mut recon = 0.0;
    let mut g_v_extra = None;
    let mut g_h_extra = None;
    if let Some(h) = &h_keep {
        let null = Ctx::null();
        let v = vec![s_trunk[0].clone()];
        let (s_inv, tape_inv) = graph.run(params, &null, model.trunk_range(), Direction::Inverse, mode, false, v, rec)?;
        let (r, g_rec) = mse_grad(&s_inv[0], h)?;
        recon = r;
        g_h_extra = Some(g_rec.scale(T::from_f64(-lambda_r)));
        let g_rec = g_rec.scale(T::from_f64(lambda_r));
        let bp = graph.backprop(params, &null, tape_inv, s_inv, vec![g_rec], rec)?;
        g_v_extra = bp.input_grads.into_iter().next();
    }

    let (s_tail, tape_tail) = graph.run(params, ctx, model.tail_range(), fwd, mode, false, s_trunk, rec)?;
    let (noise, g_out) = match model.output_mix(t)? {
        Some((cs, co)) => {
            let out = x_t.scale(T::from_f64(cs)).add(&s_tail[0].scale(T::from_f64(co)))?;
            let (n, g) = mse_grad(&out, eps)?;
            (n, g.scale(T::from_f64(co)))
        }
        None => mse_grad(&s_tail[0], eps)?,
    };
    if !noise.is_finite() {
        return Err(Error::NumericDomain {
            op: "loss",
            detail: format!("noise loss is {noise}"),
        });
    }
    let bp = graph.backprop(params, ctx, tape_tail, s_tail, vec![g_out], rec)?;
    let mut g_v = bp.input_grads;
    if let Some(extra) = g_v_extra {
        g_v[0].add_assign(&extra)?;
    }
    let bp_t = graph.backprop(params, ctx, tape_trunk, bp.inputs, g_v, rec)?;
    let mut g_h = bp_t.input_grads;
    if let Some(extra) = g_h_extra {
        g_h[0].add_assign(&extra)?;
    }
    drop(h_keep);
    let bp_h = graph.backprop(params, ctx, tape_head, bp_t.inputs, g_h, rec)?;
    drop(bp_h);
    Ok((noise, recon, bp_t.emb_grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub t: usize,
    pub loss: LossParts,
    pub lr: f64,
    pub peak_bytes: usize,
    pub flops: u64,
}

/// Draws `t` and `ε`, evaluates the loss and applies one AdamW update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut IUNet<T>,
    opt: &mut AdamW,
    x0: &Tensor<T>,
    prng: &mut Prng,
    cfg: &TrainConfig,
    sched: &BetaSchedule,
    mode: Mode,
    step: usize,
) -> Result<StepReport> {
    let t = 1 + prng.below(sched.timesteps);
    let eps: Tensor<T> = prng.randn(x0.shape())?;
    let x_t = q_sample(x0, t, &eps, sched)?;
    let (res, flops) = meter::count_flops(|| loss_and_grads(model, &x_t, &eps, t, cfg.lambda_r, cfg.lambda_l2, mode));
    let (loss, report) = match res {
        Err(Error::NumericDomain { .. }) => {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            })
        }
        other => other?,
    };
    if !loss.total.is_finite() {
        return Err(Error::Divergence { step, loss: loss.total });
    }
    let lr = cfg.lr_at(step);
    opt.update(&mut model.params, lr);
    Ok(StepReport {
        step,
        t,
        loss,
        lr,
        peak_bytes: report.peak_bytes,
        flops,
    })
}

/// Runs `cfg.steps` training steps on batches drawn with replacement from
/// `data` (each `[1, E, E, E]`). `on_step` sees every report as it is made.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    model: &mut IUNet<T>,
    opt: &mut AdamW,
    data: &[Tensor<T>],
    cfg: &TrainConfig,
    sched: &BetaSchedule,
    mode: Mode,
    mut on_step: impl FnMut(&IUNet<T>, &StepReport) -> Result<()>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training needs at least one volume".into()));
    }
    let mut prng = Prng::new(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&Tensor<T>> = (0..cfg.batch).map(|_| &data[prng.below(data.len())]).collect();
        let x0 = crate::data::stack(&picks)?;
        let report = train_step(model, opt, &x0, &mut prng, cfg, sched, mode, step)?;
        on_step(model, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> Denoiser<T> for IUNet<T> {
    fn predict(&self, x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.forward(x, t, Mode::InvertibleRecompute)
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `t = 1`, with no noise
/// added at the last step. The result is clamped to `[0, 1]`.
pub fn p_sample_loop<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    shape: &[usize],
    prng: &mut Prng,
    sched: &BetaSchedule,
) -> Result<Tensor<T>> {
    let mut x: Tensor<T> = prng.randn(shape)?;
    for t in (1..=sched.timesteps).rev() {
        let eps_hat = model.predict(&x, t)?;
        let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
        let coef = T::from_f64(beta / (1.0 - ab).sqrt());
        let inv = T::from_f64(1.0 / alpha.sqrt());
        let sigma = T::from_f64(beta.sqrt());
        let mut noise = if t > 1 { Some(prng.randn::<T>(shape)?) } else { None };
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let mut next = (*v - coef * eps_hat.data()[i]) * inv;
            if let Some(z) = noise.as_mut() {
                next += sigma * z.data()[i];
            }
            *v = next;
        }
        meter::add_flops(5 * x.len() as u64);
        if !x.all_finite() {
            return Err(Error::SamplerDivergence { t });
        }
    }
    x.map_inplace(|v| v.max(T::zero()).min(T::one()));
    Ok(x)
}
