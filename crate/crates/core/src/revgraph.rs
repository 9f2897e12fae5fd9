//! Reverse-mode differentiation over a chain of nodes with two backward
//! strategies, plus exact activation-memory accounting.
//!
//! A graph is an ordered list of nodes acting on a stack of tensors. Each node
//! pops its inputs from the top of the stack and pushes its outputs, which is
//! enough to express U-Net skip connections without any tensor being copied.
//!
//! * [`Mode::StoreAll`] keeps every node's inputs alive until its backward step.
//! * [`Mode::InvertibleRecompute`] keeps only the inputs of [`NodeKind::Stored`]
//!   nodes. Inputs of invertible nodes are rebuilt from their outputs with the
//!   node's inverse, one node at a time, during the backward sweep.
//!
//! In both modes a node's internal intermediates are recomputed from its
//! inputs inside its backward step, so the two modes run the same local
//! gradient code and differ only in where the inputs come from.

use crate::error::{Error, Result};
use crate::tensor::{meter, Scalar, Tensor};
use std::ops::Range;

pub type ParamId = usize;

/// A trainable tensor and its accumulated gradient. Neither buffer counts
/// towards activation memory.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owner of every parameter of a model; ids are indices into this set.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = self.params.len();
        let value = value.untracked();
        let grad = Tensor::zeros_like(&value).untracked();
        self.params.push(Param {
            id,
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].grad
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if p.grad.shape() != g.shape() {
            return Err(Error::shape(
                "accumulate",
                format!("param `{}` {:?} vs grad {:?}", p.name, p.grad.shape(), g.shape()),
            ));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }

    /// L2 norm of all parameter values together.
    pub fn l2_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.norm_sq()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// Non-invertible; inputs are kept alive for backward in every mode.
    Stored,
    /// Has an exact inverse; inputs can be reconstructed from outputs.
    Invertible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    StoreAll,
    InvertibleRecompute,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::StoreAll => "store",
            Mode::InvertibleRecompute => "invertible",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "store" | "store-all" => Ok(Mode::StoreAll),
            "invertible" | "invertible-recompute" => Ok(Mode::InvertibleRecompute),
            other => Err(Error::Config(format!("unknown backprop mode `{other}`"))),
        }
    }
}

/// Which way a node range is traversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Conditioning visible to every node of one pass. `None` is the null
/// conditioning used by the unconditioned inverse.
#[derive(Debug, Clone, Default)]
pub struct Ctx<T: Scalar> {
    pub emb: Option<Tensor<T>>,
}

impl<T: Scalar> Ctx<T> {
    pub fn with_emb(emb: Tensor<T>) -> Self {
        Ctx { emb: Some(emb) }
    }

    pub fn null() -> Self {
        Ctx { emb: None }
    }
}

/// Result of one node's vector-Jacobian product.
#[derive(Debug)]
pub struct LocalGrads<T: Scalar> {
    /// Gradients for the tensors the node consumed, in stack order.
    pub inputs: Vec<Tensor<T>>,
    pub params: Vec<(ParamId, Tensor<T>)>,
    /// Gradient with respect to the conditioning embedding, if used.
    pub emb: Option<Tensor<T>>,
}

/// A differentiable operation on the top of the tensor stack.
pub trait Node<T: Scalar>: Send + Sync {
    fn label(&self) -> String;

    fn kind(&self) -> NodeKind;

    /// `(consumed, produced)` stack entries in the forward direction.
    fn arity(&self) -> (usize, usize);

    fn forward(&self, params: &ParamSet<T>, ctx: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>;

    /// Vector-Jacobian product of `forward` at `inputs`.
    fn backward(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        inputs: &[Tensor<T>],
        grad_out: &[Tensor<T>],
    ) -> Result<LocalGrads<T>>;

    /// Exact inverse of `forward` for the same parameters and conditioning.
    fn inverse(&self, _params: &ParamSet<T>, _ctx: &Ctx<T>, _outputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Err(Error::Domain(format!("node `{}` is not invertible", self.label())))
    }

    /// Vector-Jacobian product of `inverse` at `outputs`; `grad_in` is the
    /// gradient with respect to the reconstructed inputs.
    fn inverse_backward(
        &self,
        _params: &ParamSet<T>,
        _ctx: &Ctx<T>,
        _outputs: &[Tensor<T>],
        _grad_in: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        Err(Error::Domain(format!("node `{}` is not invertible", self.label())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimelineEntry {
    pub op: usize,
    pub phase: Phase,
    pub label: String,
    /// Live activation bytes when the step finished.
    pub live_bytes: usize,
    /// Highest live activation bytes reached during the step.
    pub peak_bytes: usize,
}

/// Peak and time series of live activation bytes for one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryReport {
    pub mode: Mode,
    pub peak_bytes: usize,
    pub timeline: Vec<TimelineEntry>,
}

impl MemoryReport {
    pub fn final_live_bytes(&self) -> usize {
        self.timeline.last().map_or(0, |e| e.live_bytes)
    }

    /// CSV with header `op,phase,label,live_bytes,peak_bytes`.
    pub fn timeline_csv(&self) -> String {
        let mut s = String::from("op,phase,label,live_bytes,peak_bytes\n");
        for e in &self.timeline {
            let phase = match e.phase {
                Phase::Forward => "forward",
                Phase::Backward => "backward",
                Phase::Other => "other",
            };
            s.push_str(&format!("{},{},{},{},{}\n", e.op, phase, e.label, e.live_bytes, e.peak_bytes));
        }
        s
    }
}

/// Samples the thread-local meter at step boundaries.
///
/// Every entry's peak covers everything allocated since the previous entry,
/// so no transient escapes the report.
#[derive(Debug)]
pub struct MemoryRecorder {
    baseline: usize,
    next_op: usize,
    timeline: Vec<TimelineEntry>,
}

impl Default for MemoryRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryRecorder {
    /// Starts recording; bytes live now are the zero point.
    pub fn new() -> Self {
        meter::reset_high_water();
        MemoryRecorder {
            baseline: meter::live_bytes(),
            next_op: 0,
            timeline: Vec::new(),
        }
    }

    /// Starts recording with `already_live` bytes of existing buffers counted.
    pub fn with_live(already_live: usize) -> Self {
        meter::reset_high_water();
        MemoryRecorder {
            baseline: meter::live_bytes().saturating_sub(already_live),
            next_op: 0,
            timeline: Vec::new(),
        }
    }

    pub fn live_bytes(&self) -> usize {
        meter::live_bytes().saturating_sub(self.baseline)
    }

    pub fn mark(&mut self, phase: Phase, label: impl Into<String>) {
        let entry = TimelineEntry {
            op: self.next_op,
            phase,
            label: label.into(),
            live_bytes: meter::live_bytes().saturating_sub(self.baseline),
            peak_bytes: meter::high_water().saturating_sub(self.baseline),
        };
        self.next_op += 1;
        self.timeline.push(entry);
        meter::reset_high_water();
    }

    pub fn report(&self, mode: Mode) -> MemoryReport {
        MemoryReport {
            mode,
            peak_bytes: self.timeline.iter().map(|e| e.peak_bytes).max().unwrap_or(0),
            timeline: self.timeline.clone(),
        }
    }
}

/// Per-pass record needed by [`Graph::backprop`].
pub struct Tape<T: Scalar> {
    mode: Mode,
    direction: Direction,
    range: Range<usize>,
    saved: Vec<Option<Vec<Tensor<T>>>>,
    stash: Vec<Option<Vec<Tensor<T>>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Bytes of tensors retained for the backward pass.
    pub fn retained_bytes(&self) -> usize {
        self.saved
            .iter()
            .flatten()
            .flat_map(|v| v.iter())
            .map(Tensor::bytes)
            .sum()
    }
}

/// Gradients returned by [`Graph::backprop`].
pub struct Backprop<T: Scalar> {
    /// Inputs of the traversed range, rebuilt or taken from the tape.
    pub inputs: Vec<Tensor<T>>,
    pub input_grads: Vec<Tensor<T>>,
    pub emb_grad: Option<Tensor<T>>,
}

fn tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::tensor::DType::F32 => 1e-3,
        crate::tensor::DType::F64 => 1e-6,
    }
}

fn split_top<T: Scalar>(stack: &mut Vec<Tensor<T>>, n: usize, what: &str) -> Result<Vec<Tensor<T>>> {
    if stack.len() < n {
        return Err(Error::shape(
            "graph",
            format!("{what}: need {n} stack entries, have {}", stack.len()),
        ));
    }
    let at = stack.len() - n;
    Ok(stack.split_off(at))
}

/// An ordered chain of nodes.
#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Box<dyn Node<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn push(&mut self, node: Box<dyn Node<T>>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &dyn Node<T> {
        self.nodes[i].as_ref()
    }

    /// Runs `range` forward (or its inverse in reverse order) on `state`.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        range: Range<usize>,
        direction: Direction,
        mode: Mode,
        verify: bool,
        mut state: Vec<Tensor<T>>,
        rec: &mut MemoryRecorder,
    ) -> Result<(Vec<Tensor<T>>, Tape<T>)> {
        let n = range.len();
        let mut tape = Tape {
            mode,
            direction,
            range: range.clone(),
            saved: (0..n).map(|_| None).collect(),
            stash: (0..n).map(|_| None).collect(),
        };
        let order: Vec<usize> = match direction {
            Direction::Forward => range.clone().collect(),
            Direction::Inverse => range.clone().rev().collect(),
        };
        for i in order {
            let node = &self.nodes[i];
            let (n_in, n_out) = match direction {
                Direction::Forward => node.arity(),
                Direction::Inverse => {
                    let (a, b) = node.arity();
                    (b, a)
                }
            };
            let inputs = split_top(&mut state, n_in, &node.label())?;
            let outputs = match direction {
                Direction::Forward => node.forward(params, ctx, &inputs)?,
                Direction::Inverse => {
                    if node.kind() == NodeKind::Stored {
                        return Err(Error::Domain(format!("node `{}` is not invertible", node.label())));
                    }
                    node.inverse(params, ctx, &inputs)?
                }
            };
            debug_assert_eq!(outputs.len(), n_out);
            let keep = mode == Mode::StoreAll || node.kind() == NodeKind::Stored;
            let slot = i - range.start;
            if verify && !keep {
                tape.stash[slot] = Some(inputs.clone());
            }
            if keep {
                tape.saved[slot] = Some(inputs);
            } else {
                drop(inputs);
            }
            state.extend(outputs);
            rec.mark(Phase::Forward, node.label());
        }
        Ok((state, tape))
    }

    /// Backward sweep over the range recorded in `tape`.
    ///
    /// `state` holds the outputs of the pass and `grads` their gradients, in
    /// stack order. Parameter gradients are accumulated into `params`.
    pub fn backprop(
        &self,
        params: &mut ParamSet<T>,
        ctx: &Ctx<T>,
        mut tape: Tape<T>,
        mut state: Vec<Tensor<T>>,
        mut grads: Vec<Tensor<T>>,
        rec: &mut MemoryRecorder,
    ) -> Result<Backprop<T>> {
        if state.len() != grads.len() {
            return Err(Error::shape(
                "backprop",
                format!("{} outputs but {} gradients", state.len(), grads.len()),
            ));
        }
        let range = tape.range.clone();
        let order: Vec<usize> = match tape.direction {
            Direction::Forward => range.clone().rev().collect(),
            Direction::Inverse => range.clone().collect(),
        };
        let mut emb_grad: Option<Tensor<T>> = None;
        for i in order {
            let node = &self.nodes[i];
            let label = node.label();
            let n_out = match tape.direction {
                Direction::Forward => node.arity().1,
                Direction::Inverse => node.arity().0,
            };
            let outs = split_top(&mut state, n_out, &label)?;
            let g_outs = split_top(&mut grads, n_out, &label)?;
            let slot = i - range.start;
            let inputs = match tape.saved[slot].take() {
                Some(saved) => {
                    drop(outs);
                    saved
                }
                None => {
                    let rebuilt = match tape.direction {
                        Direction::Forward => node.inverse(params, ctx, &outs)?,
                        Direction::Inverse => node.forward(params, ctx, &outs)?,
                    };
                    drop(outs);
                    if let Some(reference) = tape.stash[slot].take() {
                        let limit = 10.0 * tolerance::<T>();
                        for (r, x) in rebuilt.iter().zip(&reference) {
                            let drift = r.max_rel_diff(x);
                            if !(drift <= limit) {
                                return Err(Error::Reconstruction { node: label, drift, limit });
                            }
                        }
                    }
                    rebuilt
                }
            };
            let local = match tape.direction {
                Direction::Forward => node.backward(params, ctx, &inputs, &g_outs)?,
                Direction::Inverse => node.inverse_backward(params, ctx, &inputs, &g_outs)?,
            };
            drop(g_outs);
            for (id, g) in &local.params {
                params.accumulate(*id, g)?;
            }
            if let Some(ge) = local.emb {
                match &mut emb_grad {
                    Some(acc) => acc.add_assign(&ge)?,
                    None => emb_grad = Some(ge),
                }
            }
            state.extend(inputs);
            grads.extend(local.inputs);
            rec.mark(Phase::Backward, label);
        }
        Ok(Backprop {
            inputs: state,
            input_grads: grads,
            emb_grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    /// y = x * exp(w) per channel-free scalar weight; invertible.
    struct ScaleNode {
        w: ParamId,
    }

    impl Node<f64> for ScaleNode {
        fn label(&self) -> String {
            "scale".into()
        }
        fn kind(&self) -> NodeKind {
            NodeKind::Invertible
        }
        fn arity(&self) -> (usize, usize) {
            (1, 1)
        }
        fn forward(&self, p: &ParamSet<f64>, _: &Ctx<f64>, x: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            let s = p.value(self.w).data()[0].exp();
            Ok(vec![x[0].scale(s)])
        }
        fn inverse(&self, p: &ParamSet<f64>, _: &Ctx<f64>, y: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
            let s = p.value(self.w).data()[0].exp();
            Ok(vec![y[0].scale(1.0 / s)])
        }
        fn backward(
            &self,
            p: &ParamSet<f64>,
            _: &Ctx<f64>,
            x: &[Tensor<f64>],
            g: &[Tensor<f64>],
        ) -> Result<LocalGrads<f64>> {
            let s = p.value(self.w).data()[0].exp();
            let gw: f64 = x[0].data().iter().zip(g[0].data()).map(|(a, b)| a * b * s).sum();
            Ok(LocalGrads {
                inputs: vec![g[0].scale(s)],
                params: vec![(self.w, Tensor::new(&[1], vec![gw]).unwrap())],
                emb: None,
            })
        }
    }

    fn chain(n: usize) -> (Graph<f64>, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut g = Graph::new();
        for i in 0..n {
            let w = params.register(format!("w{i}"), Tensor::new(&[1], vec![0.1 * i as f64 - 0.2]).unwrap());
            g.push(Box::new(ScaleNode { w }));
        }
        (g, params)
    }

    fn run_both(n: usize, mode: Mode) -> (MemoryReport, Vec<f64>, usize) {
        let (g, mut params) = chain(n);
        let ctx = Ctx::null();
        let mut rec = MemoryRecorder::new();
        let x: Tensor<f64> = Prng::new(1).randn(&[64]).unwrap();
        let x_bytes = x.bytes();
        let (out, tape) = g.run(&params, &ctx, 0..n, Direction::Forward, mode, false, vec![x], &mut rec).unwrap();
        let after_forward = rec.live_bytes();
        let gy = vec![Tensor::ones_like(&out[0])];
        let bp = g.backprop(&mut params, &ctx, tape, out, gy, &mut rec).unwrap();
        drop(bp);
        rec.mark(Phase::Other, "done");
        let grads = params.iter().map(|p| p.grad.data()[0]).collect();
        let _ = x_bytes;
        (rec.report(mode), grads, after_forward)
    }

    #[test]
    fn modes_agree_and_memory_differs() {
        let (rep_s, g_s, live_s) = run_both(8, Mode::StoreAll);
        let (rep_i, g_i, live_i) = run_both(8, Mode::InvertibleRecompute);
        for (a, b) in g_s.iter().zip(&g_i) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let bytes = 64 * 8;
        assert_eq!(live_i, bytes);
        assert_eq!(live_s, 9 * bytes);
        assert!(rep_i.peak_bytes < rep_s.peak_bytes);
        assert_eq!(rep_s.final_live_bytes(), 0);
        assert_eq!(rep_i.final_live_bytes(), 0);
        assert_eq!(rep_s.peak_bytes, rep_s.timeline.iter().map(|e| e.peak_bytes).max().unwrap());
    }

    #[test]
    fn verified_backprop_passes_for_exact_inverses() {
        let (g, mut params) = chain(6);
        let ctx = Ctx::null();
        let mut rec = MemoryRecorder::new();
        let x: Tensor<f64> = Prng::new(3).randn(&[32]).unwrap();
        let (out, tape) = g
            .run(&params, &ctx, 0..6, Direction::Forward, Mode::InvertibleRecompute, true, vec![x], &mut rec)
            .unwrap();
        let gy = vec![Tensor::ones_like(&out[0])];
        assert!(g.backprop(&mut params, &ctx, tape, out, gy, &mut rec).is_ok());
    }

    #[test]
    fn empty_graph_peak_is_input() {
        let g: Graph<f64> = Graph::new();
        let params = ParamSet::new();
        let mut rec = MemoryRecorder::new();
        let x = Tensor::<f64>::zeros(&[10]).unwrap();
        rec.mark(Phase::Forward, "input");
        let (out, _tape) = g
            .run(&params, &Ctx::null(), 0..0, Direction::Forward, Mode::InvertibleRecompute, false, vec![x], &mut rec)
            .unwrap();
        assert_eq!(rec.report(Mode::InvertibleRecompute).peak_bytes, out[0].bytes());
    }

    #[test]
    fn inverse_direction_roundtrip() {
        let (g, params) = chain(5);
        let ctx = Ctx::null();
        let mut rec = MemoryRecorder::new();
        let x: Tensor<f64> = Prng::new(2).randn(&[16]).unwrap();
        let (y, _) = g
            .run(&params, &ctx, 0..5, Direction::Forward, Mode::InvertibleRecompute, false, vec![x.clone()], &mut rec)
            .unwrap();
        let (back, _) = g
            .run(&params, &ctx, 0..5, Direction::Inverse, Mode::InvertibleRecompute, false, y, &mut rec)
            .unwrap();
        assert!(back[0].max_rel_diff(&x) < 1e-14);
    }

    #[test]
    fn param_set_bookkeeping() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let live = meter::live_bytes();
        let a = ps.register("a", Tensor::ones(&[2, 3]).unwrap());
        let b = ps.register("b", Tensor::ones(&[4]).unwrap());
        assert_eq!(meter::live_bytes(), live, "parameters are not activations");
        assert_eq!((a, b), (0, 1));
        assert_eq!(ps.scalar_count(), 10);
        ps.accumulate(a, &Tensor::full(&[2, 3], 2.0).unwrap()).unwrap();
        assert!(ps.accumulate(b, &Tensor::full(&[3], 2.0).unwrap()).is_err());
        assert_eq!(ps.grad(a).sum(), 12.0);
        ps.zero_grads();
        assert_eq!(ps.grad(a).sum(), 0.0);
    }
}
