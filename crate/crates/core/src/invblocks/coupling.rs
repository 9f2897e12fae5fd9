use crate::error::{Error, Result};
use crate::revgraph::{Ctx, LocalGrads, Node, NodeKind, ParamId, ParamSet};
use crate::tensor::{conv3d, conv3d_backward, meter, Prng, Scalar, Tensor};

pub(crate) fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

pub(crate) fn silu_grad<T: Scalar>(v: T) -> T {
    let s = T::one() / (T::one() + (-v).exp());
    s * (T::one() + v * (T::one() - s))
}

/// Conv weight with fan-in scaled normal entries.
pub(crate) fn init_conv<T: Scalar>(prng: &mut Prng, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
    let std = 1.0 / ((c_in * k * k * k) as f64).sqrt();
    let mut t = Tensor::zeros(&[c_out, c_in, k, k, k]).expect("valid conv shape");
    for v in t.data_mut() {
        *v = T::from_f64(std * prng.normal_pair().0);
    }
    t
}

pub(crate) fn init_matrix<T: Scalar>(prng: &mut Prng, rows: usize, cols: usize) -> Tensor<T> {
    let std = 1.0 / (cols as f64).sqrt();
    let mut t = Tensor::zeros(&[rows, cols]).expect("valid matrix shape");
    for v in t.data_mut() {
        *v = T::from_f64(std * prng.normal_pair().0);
    }
    t
}

/// Additive coupling `(x1, x2) -> (x1, x2 + g(x1, t))` on a channel split.
///
/// The conditioner is conv3 -> bias + timestep projection -> SiLU -> conv3.
/// Its last conv starts at zero, so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct AdditiveCoupling {
    pub label: String,
    pub channels: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    w1: ParamId,
    b1: ParamId,
    wt: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct CondCache<T: Scalar> {
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl AdditiveCoupling {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        prng: &mut Prng,
        label: impl Into<String>,
        channels: usize,
        hidden: usize,
        emb_dim: usize,
    ) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::shape("coupling", format!("channel count must be even, got {channels}")));
        }
        let label = label.into();
        let half = channels / 2;
        let w1 = params.register(format!("{label}.w1"), init_conv(prng, hidden, half, 3));
        let b1 = params.register(format!("{label}.b1"), Tensor::zeros(&[hidden])?);
        let wt = params.register(format!("{label}.wt"), init_matrix(prng, hidden, emb_dim));
        let w2 = params.register(format!("{label}.w2"), Tensor::zeros(&[half, hidden, 3, 3, 3])?);
        let b2 = params.register(format!("{label}.b2"), Tensor::zeros(&[half])?);
        Ok(AdditiveCoupling {
            label,
            channels,
            hidden,
            emb_dim,
            w1,
            b1,
            wt,
            w2,
            b2,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.w1, self.b1, self.wt, self.w2, self.b2]
    }

    /// Scalar parameter count for given sizes.
    pub fn count_params(channels: usize, hidden: usize, emb_dim: usize) -> usize {
        let half = channels / 2;
        hidden * half * 27 + hidden + hidden * emb_dim + half * hidden * 27 + half
    }

    fn check<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 5 || x.channels() != self.channels {
            return Err(Error::shape(
                "coupling",
                format!("`{}` expects {} channels, got {:?}", self.label, self.channels, x.shape()),
            ));
        }
        Ok(())
    }

    /// Per-hidden-channel bias from the timestep embedding (zeros for null conditioning).
    fn time_bias<T: Scalar>(&self, params: &ParamSet<T>, ctx: &Ctx<T>) -> Result<Vec<T>> {
        let mut bias: Vec<T> = params.value(self.b1).data().to_vec();
        if let Some(emb) = &ctx.emb {
            if emb.len() != self.emb_dim {
                return Err(Error::shape("coupling", format!("embedding length {} != {}", emb.len(), self.emb_dim)));
            }
            let wt = params.value(self.wt).data();
            for (h, b) in bias.iter_mut().enumerate() {
                *b += wt[h * self.emb_dim..(h + 1) * self.emb_dim]
                    .iter()
                    .zip(emb.data())
                    .map(|(&w, &e)| w * e)
                    .sum();
            }
            meter::add_flops(2 * (self.hidden * self.emb_dim) as u64);
        }
        Ok(bias)
    }

    fn conditioner<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        x1: &Tensor<T>,
    ) -> Result<(Tensor<T>, CondCache<T>)> {
        let bias = self.time_bias(params, ctx)?;
        let pre = conv3d(x1, params.value(self.w1), Some(&bias), 1, 1)?;
        let act = pre.map(silu);
        meter::add_flops(4 * pre.len() as u64);
        let out = conv3d(&act, params.value(self.w2), Some(params.value(self.b2).data()), 1, 1)?;
        Ok((out, CondCache { pre, act }))
    }

    /// VJP of the conditioner at `x1` for upstream gradient `g`.
    fn conditioner_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        x1: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(ParamId, Tensor<T>)>, Option<Tensor<T>>)> {
        let (_, cache) = self.conditioner(params, ctx, x1)?;
        let CondCache { pre, act } = cache;
        let g2 = conv3d_backward(&act, params.value(self.w2), g, 1, 1)?;
        drop(act);
        let mut g_pre = g2.input;
        for (gp, &p) in g_pre.data_mut().iter_mut().zip(pre.data()) {
            *gp *= silu_grad(p);
        }
        meter::add_flops(6 * pre.len() as u64);
        drop(pre);
        let g1 = conv3d_backward(x1, params.value(self.w1), &g_pre, 1, 1)?;
        let g_b1 = g1.bias;

        let mut grads = vec![
            (self.w1, g1.kernel),
            (self.b1, Tensor::new(&[self.hidden], g_b1.clone())?.untracked()),
            (self.w2, g2.kernel),
            (self.b2, Tensor::new(&[self.channels / 2], g2.bias)?.untracked()),
        ];
        let g_emb = match &ctx.emb {
            Some(emb) => {
                let wt = params.value(self.wt).data();
                let mut g_wt = vec![T::zero(); self.hidden * self.emb_dim];
                let mut g_emb = vec![T::zero(); self.emb_dim];
                for h in 0..self.hidden {
                    for j in 0..self.emb_dim {
                        g_wt[h * self.emb_dim + j] = g_b1[h] * emb.data()[j];
                        g_emb[j] += g_b1[h] * wt[h * self.emb_dim + j];
                    }
                }
                meter::add_flops(4 * (self.hidden * self.emb_dim) as u64);
                grads.push((self.wt, Tensor::new(&[self.hidden, self.emb_dim], g_wt)?.untracked()));
                Some(Tensor::new(&[self.emb_dim], g_emb)?)
            }
            None => None,
        };
        Ok((g1.input, grads, g_emb))
    }

    pub fn coupling_forward<T: Scalar>(&self, params: &ParamSet<T>, ctx: &Ctx<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (x1, x2) = x.split_channels(self.channels / 2)?;
        let (g, _) = self.conditioner(params, ctx, &x1)?;
        let y2 = x2.add(&g)?;
        Tensor::concat_channels(&x1, &y2)
    }

    pub fn coupling_inverse<T: Scalar>(&self, params: &ParamSet<T>, ctx: &Ctx<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(y)?;
        let (y1, y2) = y.split_channels(self.channels / 2)?;
        let (g, _) = self.conditioner(params, ctx, &y1)?;
        let x2 = y2.sub(&g)?;
        Tensor::concat_channels(&y1, &x2)
    }
}

impl<T: Scalar> Node<T> for AdditiveCoupling {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn kind(&self) -> NodeKind {
        NodeKind::Invertible
    }

    fn arity(&self) -> (usize, usize) {
        (1, 1)
    }

    fn forward(&self, params: &ParamSet<T>, ctx: &Ctx<T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(vec![self.coupling_forward(params, ctx, &inputs[0])?])
    }

    fn inverse(&self, params: &ParamSet<T>, ctx: &Ctx<T>, outputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(vec![self.coupling_inverse(params, ctx, &outputs[0])?])
    }

    fn backward(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        inputs: &[Tensor<T>],
        grad_out: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        let x = &inputs[0];
        self.check(x)?;
        let half = self.channels / 2;
        let x1 = x.narrow_channels(0, half)?;
        let (gy1, gy2) = grad_out[0].split_channels(half)?;
        let (gx1_cond, params_g, emb) = self.conditioner_backward(params, ctx, &x1, &gy2)?;
        drop(x1);
        let gx1 = gy1.add(&gx1_cond)?;
        drop(gx1_cond);
        Ok(LocalGrads {
            inputs: vec![Tensor::concat_channels(&gx1, &gy2)?],
            params: params_g,
            emb,
        })
    }

    fn inverse_backward(
        &self,
        params: &ParamSet<T>,
        ctx: &Ctx<T>,
        outputs: &[Tensor<T>],
        grad_in: &[Tensor<T>],
    ) -> Result<LocalGrads<T>> {
        // x = (y1, y2 - g(y1))
        let y = &outputs[0];
        self.check(y)?;
        let half = self.channels / 2;
        let y1 = y.narrow_channels(0, half)?;
        let (gx1, gx2) = grad_in[0].split_channels(half)?;
        let neg = gx2.scale(-T::one());
        let (gy1_cond, params_g, emb) = self.conditioner_backward(params, ctx, &y1, &neg)?;
        drop(neg);
        let gy1 = gx1.add(&gy1_cond)?;
        Ok(LocalGrads {
            inputs: vec![Tensor::concat_channels(&gy1, &gx2)?],
            params: params_g,
            emb,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invblocks::testutil::{check_params, check_tensor, dot, randomize};

    fn setup(seed: u64) -> (ParamSet<f64>, AdditiveCoupling, Prng) {
        let mut prng = Prng::new(seed);
        let mut params = ParamSet::new();
        let block = AdditiveCoupling::new(&mut params, &mut prng, "c", 4, 6, 5).unwrap();
        (params, block, prng)
    }

    #[test]
    fn fresh_block_is_identity() {
        let (params, block, mut prng) = setup(1);
        let x: Tensor<f64> = prng.randn(&[1, 4, 4, 4, 4]).unwrap();
        let y = block.coupling_forward(&params, &Ctx::null(), &x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn odd_channels_rejected() {
        let mut params: ParamSet<f32> = ParamSet::new();
        assert!(AdditiveCoupling::new(&mut params, &mut Prng::new(0), "c", 3, 4, 2).is_err());
    }

    #[test]
    fn count_matches_registry() {
        let (params, _, _) = setup(2);
        assert_eq!(params.scalar_count(), AdditiveCoupling::count_params(4, 6, 5));
    }

    #[test]
    fn inverse_undoes_forward() {
        let (mut params, block, mut prng) = setup(3);
        randomize(&mut params, &mut prng, 0.3);
        let ctx = Ctx::with_emb(prng.randn(&[5]).unwrap());
        let x: Tensor<f64> = prng.randn(&[2, 4, 4, 3, 4]).unwrap();
        let y = block.coupling_forward(&params, &ctx, &x).unwrap();
        assert!(y.max_rel_diff(&x) > 1e-3);
        let back = block.coupling_inverse(&params, &ctx, &y).unwrap();
        assert!(back.max_rel_diff(&x) < 1e-13);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut params, block, mut prng) = setup(4);
        randomize(&mut params, &mut prng, 0.3);
        let emb: Tensor<f64> = prng.randn(&[5]).unwrap();
        let x: Tensor<f64> = prng.randn(&[1, 4, 3, 4, 2]).unwrap();
        let r: Tensor<f64> = prng.randn(x.shape()).unwrap();
        let ctx = Ctx::with_emb(emb.clone());
        let lg = block.backward(&params, &ctx, &[x.clone()], &[r.clone()]).unwrap();
        let loss = |p: &ParamSet<f64>, x: &Tensor<f64>, e: &Tensor<f64>| {
            dot(&block.coupling_forward(p, &Ctx::with_emb(e.clone()), x).unwrap(), &r)
        };
        check_tensor("x", &x, &lg.inputs[0], &mut prng, |v| loss(&params, v, &emb));
        check_tensor("emb", &emb, lg.emb.as_ref().unwrap(), &mut prng, |v| loss(&params, &x, v));
        check_params(&params, &lg.params, &mut prng, |p| loss(p, &x, &emb));
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let (mut params, block, mut prng) = setup(5);
        randomize(&mut params, &mut prng, 0.3);
        let emb: Tensor<f64> = prng.randn(&[5]).unwrap();
        let y: Tensor<f64> = prng.randn(&[1, 4, 2, 3, 4]).unwrap();
        let r: Tensor<f64> = prng.randn(y.shape()).unwrap();
        let ctx = Ctx::with_emb(emb.clone());
        let lg = block.inverse_backward(&params, &ctx, &[y.clone()], &[r.clone()]).unwrap();
        let loss = |p: &ParamSet<f64>, y: &Tensor<f64>, e: &Tensor<f64>| {
            dot(&block.coupling_inverse(p, &Ctx::with_emb(e.clone()), y).unwrap(), &r)
        };
        check_tensor("y", &y, &lg.inputs[0], &mut prng, |v| loss(&params, v, &emb));
        check_tensor("emb", &emb, lg.emb.as_ref().unwrap(), &mut prng, |v| loss(&params, &y, v));
        check_params(&params, &lg.params, &mut prng, |p| loss(p, &y, &emb));
    }
}
