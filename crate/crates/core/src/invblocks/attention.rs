//! Invertible checkerboard attention coupling for 3-D feature maps.
//!
//! Voxels are split by the parity of `z + y + x`. Even voxels (`y1`) pass
//! through unchanged and, read as a token sequence, drive a single-head
//! attention whose output sets a bounded multiplicative scale
//! `f(y1) = exp(γ·tanh(s)) ∈ [e^-γ, e^γ]` for the odd voxels (`y2`):
//! `a = y2 ⊙ f(y1)`. The scaled map is concatenated with the upsampled
//! tensor along channels. Inversion splits the channels back off, recomputes
//! `f(y1)` and divides.

use crate::error::{Error, Result};
use crate::revgraph::{ParamId, ParamSet};
use crate::tensor::{matmul, matmul_nt, matmul_tn, meter, softmax, Prng, Scalar, Tensor, DIV_FLOOR};

use super::coupling::init_matrix;

/// Scale bound exponent γ.
pub const GAMMA: f64 = 1.0;

/// Flat voxel indices of even and odd coordinate-sum parity.
pub fn parity_indices(spatial: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (d, h, w) = match spatial {
        [d, h, w] => (*d, *h, *w),
        _ => return Err(Error::shape("parity", format!("expected 3 spatial dims, got {spatial:?}"))),
    };
    let mut even = Vec::with_capacity(d * h * w / 2 + 1);
    let mut odd = Vec::with_capacity(d * h * w / 2 + 1);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if (z + y + x) % 2 == 0 {
                    even.push(i);
                } else {
                    odd.push(i);
                }
            }
        }
    }
    if even.len() != odd.len() {
        return Err(Error::shape(
            "parity",
            format!("checkerboard halves differ in size for {spatial:?}; one extent must be even"),
        ));
    }
    Ok((even, odd))
}

struct ScaleCache<T: Scalar> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    p: Tensor<T>,
    h: Tensor<T>,
    tanh_s: Tensor<T>,
    f: Tensor<T>,
}

/// Attention-scaled coupling of a skip tensor, fused with the channel concat.
#[derive(Debug, Clone)]
pub struct AttentionCoupling {
    pub label: String,
    pub channels: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttentionCoupling {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, prng: &mut Prng, label: impl Into<String>, channels: usize) -> Self {
        let label = label.into();
        let wq = params.register(format!("{label}.wq"), init_matrix(prng, channels, channels));
        let wk = params.register(format!("{label}.wk"), init_matrix(prng, channels, channels));
        let wv = params.register(format!("{label}.wv"), init_matrix(prng, channels, channels));
        let wo = params.register(format!("{label}.wo"), Tensor::zeros(&[channels, channels]).expect("square"));
        let bo = params.register(format!("{label}.bo"), Tensor::zeros(&[channels]).expect("vector"));
        AttentionCoupling {
            label,
            channels,
            wq,
            wk,
            wv,
            wo,
            bo,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.wq, self.wk, self.wv, self.wo, self.bo]
    }

    pub fn count_params(channels: usize) -> usize {
        4 * channels * channels + channels
    }

    fn gather<T: Scalar>(&self, y: &Tensor<T>, b: usize, idx: &[usize]) -> Tensor<T> {
        let c = self.channels;
        let s = y.spatial_len();
        let base = b * c * s;
        let yd = y.data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            for ch in 0..c {
                data.push(yd[base + ch * s + i]);
            }
        }
        Tensor::new(&[idx.len(), c], data).expect("token matrix")
    }

    /// `f(x)` for a token matrix `x[n, C]`, with intermediates for backward.
    fn scale<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<ScaleCache<T>> {
        let c = self.channels;
        let q = matmul_nt(x, params.value(self.wq))?;
        let k = matmul_nt(x, params.value(self.wk))?;
        let v = matmul_nt(x, params.value(self.wv))?;
        let logits = matmul_nt(&q, &k)?.scale(T::from_f64(1.0 / (c as f64).sqrt()));
        let p = softmax(&logits, 1)?;
        drop(logits);
        let h = matmul(&p, &v)?;
        let s = matmul_nt(&h, params.value(self.wo))?.add(params.value(self.bo))?;
        let tanh_s = s.tanh();
        drop(s);
        let gamma = T::from_f64(GAMMA);
        let f = tanh_s.map(|t| (gamma * t).exp());
        meter::add_flops(2 * f.len() as u64);
        Ok(ScaleCache { q, k, v, p, h, tanh_s, f })
    }

    /// Pulls `dL/df` back to the token matrix and the attention parameters.
    fn scale_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        cache: ScaleCache<T>,
        g_f: &Tensor<T>,
        grads: &mut [Tensor<T>; 5],
    ) -> Result<Tensor<T>> {
        let c = self.channels;
        let gamma = T::from_f64(GAMMA);
        let ScaleCache { q, k, v, p, h, tanh_s, f } = cache;
        let mut g_s = g_f.mul(&f)?;
        for (g, &t) in g_s.data_mut().iter_mut().zip(tanh_s.data()) {
            *g *= gamma * (T::one() - t * t);
        }
        meter::add_flops(4 * g_s.len() as u64);
        drop((f, tanh_s));
        let g_wo = matmul_tn(&g_s, &h)?;
        drop(h);
        let g_bo: Vec<T> = (0..c).map(|j| (0..g_s.shape()[0]).map(|i| g_s.data()[i * c + j]).sum()).collect();
        let g_h = matmul(&g_s, params.value(self.wo))?;
        drop(g_s);
        let g_p = matmul_nt(&g_h, &v)?;
        let g_v = matmul_tn(&p, &g_h)?;
        drop(g_h);
        // softmax backward, row-wise
        let n = p.shape()[0];
        let inv_sqrt = T::from_f64(1.0 / (c as f64).sqrt());
        let mut g_logits = g_p;
        for (grow, prow) in g_logits.data_mut().chunks_mut(n).zip(p.data().chunks(n)) {
            let dot: T = grow.iter().zip(prow).map(|(&g, &pp)| g * pp).sum();
            for (g, &pp) in grow.iter_mut().zip(prow) {
                *g = pp * (*g - dot) * inv_sqrt;
            }
        }
        meter::add_flops(5 * p.len() as u64);
        drop(p);
        let g_q = matmul(&g_logits, &k)?;
        let g_k = matmul_tn(&g_logits, &q)?;
        drop((g_logits, q, k, v));
        let g_wq = matmul_tn(&g_q, x)?;
        let g_wk = matmul_tn(&g_k, x)?;
        let g_wv = matmul_tn(&g_v, x)?;
        let mut g_x = matmul(&g_q, params.value(self.wq))?;
        g_x.add_assign(&matmul(&g_k, params.value(self.wk))?)?;
        g_x.add_assign(&matmul(&g_v, params.value(self.wv))?)?;
        for (acc, g) in grads.iter_mut().zip([g_wq, g_wk, g_wv, g_wo]) {
            acc.add_assign(&g)?;
        }
        for (a, b) in grads[4].data_mut().iter_mut().zip(g_bo) {
            *a += b;
        }
        Ok(g_x)
    }

    fn zero_grads<T: Scalar>(&self) -> [Tensor<T>; 5] {
        let c = self.channels;
        let sq = || Tensor::zeros(&[c, c]).expect("square").untracked();
        [sq(), sq(), sq(), sq(), Tensor::zeros(&[c]).expect("vector").untracked()]
    }

    fn wrap_grads<T: Scalar>(&self, g: [Tensor<T>; 5]) -> Vec<(ParamId, Tensor<T>)> {
        self.param_ids().into_iter().zip(g).collect()
    }

    fn check_y<T: Scalar>(&self, y: &Tensor<T>) -> Result<()> {
        if y.rank() != 5 || y.channels() != self.channels {
            return Err(Error::shape(
                "attention",
                format!("`{}` expects {} channels, got {:?}", self.label, self.channels, y.shape()),
            ));
        }
        Ok(())
    }

    /// The bounded scale `f(y1)` for every batch element, `[B, n, C]` flattened.
    pub fn scale_of<T: Scalar>(&self, params: &ParamSet<T>, y: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_y(y)?;
        let (even, _) = parity_indices(&y.shape()[2..])?;
        (0..y.shape()[0])
            .map(|b| Ok(self.scale(params, &self.gather(y, b, &even))?.f))
            .collect()
    }

    /// Scales odd voxels of `y` by `f(y1)` and concatenates `c_up`.
    pub fn attn_apply<T: Scalar>(&self, params: &ParamSet<T>, y: &Tensor<T>, c_up: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_y(y)?;
        if c_up.rank() != 5 || c_up.shape()[0] != y.shape()[0] || c_up.shape()[2..] != y.shape()[2..] {
            return Err(Error::shape(
                "attn_apply",
                format!("skip {:?} and upsampled {:?} must share batch and spatial shape", y.shape(), c_up.shape()),
            ));
        }
        let (even, odd) = parity_indices(&y.shape()[2..])?;
        let (c, s) = (self.channels, y.spatial_len());
        let mut out = y.clone();
        for b in 0..y.shape()[0] {
            let f = self.scale(params, &self.gather(y, b, &even))?.f;
            let od = out.data_mut();
            for (t, &i) in odd.iter().enumerate() {
                for ch in 0..c {
                    od[(b * c + ch) * s + i] *= f.data()[t * c + ch];
                }
            }
        }
        meter::add_flops((y.len() / 2) as u64);
        Tensor::concat_channels(&out, c_up)
    }

    /// Splits `y_u` into the skip and upsampled parts and undoes the scaling.
    pub fn attn_invert<T: Scalar>(&self, params: &ParamSet<T>, y_u: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if y_u.rank() != 5 || y_u.channels() <= self.channels {
            return Err(Error::shape(
                "attn_invert",
                format!("`{}` expects more than {} channels, got {:?}", self.label, self.channels, y_u.shape()),
            ));
        }
        let (mut y, c_up) = y_u.split_channels(self.channels)?;
        let (even, odd) = parity_indices(&y.shape()[2..])?;
        let (c, s) = (self.channels, y.spatial_len());
        let floor = T::from_f64(DIV_FLOOR);
        for b in 0..y.shape()[0] {
            let f = self.scale(params, &self.gather(&y, b, &even))?.f;
            if let Some(bad) = f.data().iter().find(|v| !(v.abs() >= floor)) {
                return Err(Error::NumericDomain {
                    op: "attn_invert",
                    detail: format!("scale entry {bad} below {DIV_FLOOR:e} in `{}`", self.label),
                });
            }
            let yd = y.data_mut();
            for (t, &i) in odd.iter().enumerate() {
                for ch in 0..c {
                    yd[(b * c + ch) * s + i] = yd[(b * c + ch) * s + i] / f.data()[t * c + ch];
                }
            }
        }
        meter::add_flops((y.len() / 2) as u64);
        Ok((y, c_up))
    }

    /// VJP of [`Self::attn_apply`]; returns `(dL/dy, dL/dc_up, param grads)`.
    pub fn apply_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        y: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Vec<(ParamId, Tensor<T>)>)> {
        self.check_y(y)?;
        let (mut g_y, g_c) = grad_out.split_channels(self.channels)?;
        let (even, odd) = parity_indices(&y.shape()[2..])?;
        let (c, s) = (self.channels, y.spatial_len());
        let mut grads = self.zero_grads();
        for b in 0..y.shape()[0] {
            let x = self.gather(y, b, &even);
            let cache = self.scale(params, &x)?;
            let mut g_f = Tensor::zeros(&[odd.len(), c])?;
            {
                let (gd, yd, fd, gfd) = (g_y.data_mut(), y.data(), cache.f.data(), g_f.data_mut());
                for (t, &i) in odd.iter().enumerate() {
                    for ch in 0..c {
                        let at = (b * c + ch) * s + i;
                        gfd[t * c + ch] = gd[at] * yd[at];
                        gd[at] *= fd[t * c + ch];
                    }
                }
            }
            let g_x = self.scale_backward(params, &x, cache, &g_f, &mut grads)?;
            let gd = g_y.data_mut();
            for (t, &i) in even.iter().enumerate() {
                for ch in 0..c {
                    gd[(b * c + ch) * s + i] += g_x.data()[t * c + ch];
                }
            }
        }
        Ok((g_y, g_c, self.wrap_grads(grads)))
    }

    /// VJP of [`Self::attn_invert`] at `y_u`; `g_y`, `g_c` are gradients with
    /// respect to the recovered skip and upsampled tensors.
    pub fn invert_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        y_u: &Tensor<T>,
        g_y: &Tensor<T>,
        g_c: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<(ParamId, Tensor<T>)>)> {
        let yt = y_u.narrow_channels(0, self.channels)?;
        let (even, odd) = parity_indices(&yt.shape()[2..])?;
        let (c, s) = (self.channels, yt.spatial_len());
        let mut g_yt = g_y.clone();
        let mut grads = self.zero_grads();
        for b in 0..yt.shape()[0] {
            let x = self.gather(&yt, b, &even);
            let cache = self.scale(params, &x)?;
            let mut g_f = Tensor::zeros(&[odd.len(), c])?;
            {
                let (gd, ad, fd, gfd) = (g_yt.data_mut(), yt.data(), cache.f.data(), g_f.data_mut());
                for (t, &i) in odd.iter().enumerate() {
                    for ch in 0..c {
                        let at = (b * c + ch) * s + i;
                        let fv = fd[t * c + ch];
                        // y2 = a / f
                        let gy2 = gd[at];
                        gfd[t * c + ch] = -gy2 * ad[at] / (fv * fv);
                        gd[at] = gy2 / fv;
                    }
                }
            }
            let g_x = self.scale_backward(params, &x, cache, &g_f, &mut grads)?;
            let gd = g_yt.data_mut();
            for (t, &i) in even.iter().enumerate() {
                for ch in 0..c {
                    gd[(b * c + ch) * s + i] += g_x.data()[t * c + ch];
                }
            }
        }
        Ok((Tensor::concat_channels(&g_yt, g_c)?, self.wrap_grads(grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invblocks::testutil::{check_params, check_tensor, dot, randomize};

    fn setup(seed: u64, c: usize) -> (ParamSet<f64>, AttentionCoupling, Prng) {
        let mut prng = Prng::new(seed);
        let mut params = ParamSet::new();
        let block = AttentionCoupling::new(&mut params, &mut prng, "a", c);
        randomize(&mut params, &mut prng, 0.8);
        (params, block, prng)
    }

    #[test]
    fn parity_split_is_checkerboard() {
        let (even, odd) = parity_indices(&[2, 2, 2]).unwrap();
        assert_eq!(even, vec![0, 3, 5, 6]);
        assert_eq!(odd, vec![1, 2, 4, 7]);
        assert!(parity_indices(&[3, 3, 3]).is_err());
        assert!(parity_indices(&[3, 3, 2]).is_ok());
    }

    #[test]
    fn scale_stays_within_bounds() {
        let (mut params, block, mut prng) = setup(1, 3);
        // large weights push tanh into saturation
        for p in params.iter_mut() {
            p.value.map_inplace(|v| v * 50.0);
        }
        let y: Tensor<f64> = prng.randn(&[2, 3, 4, 4, 4]).unwrap().scale(10.0);
        let (lo, hi) = ((-GAMMA).exp(), GAMMA.exp());
        for f in block.scale_of(&params, &y).unwrap() {
            assert!(f.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }

    #[test]
    fn invert_undoes_apply() {
        let (params, block, mut prng) = setup(2, 3);
        let y: Tensor<f64> = prng.randn(&[2, 3, 4, 2, 4]).unwrap();
        let c: Tensor<f64> = prng.randn(&[2, 2, 4, 2, 4]).unwrap();
        let out = block.attn_apply(&params, &y, &c).unwrap();
        assert_eq!(out.shape(), &[2, 5, 4, 2, 4]);
        let (y2, c2) = block.attn_invert(&params, &out).unwrap();
        assert!(y2.max_rel_diff(&y) < 1e-14);
        assert!(c2.bit_eq(&c));
    }

    #[test]
    fn fresh_block_is_identity() {
        let mut prng = Prng::new(9);
        let mut params: ParamSet<f32> = ParamSet::new();
        let block = AttentionCoupling::new(&mut params, &mut prng, "a", 2);
        let y: Tensor<f32> = prng.randn(&[1, 2, 2, 2, 2]).unwrap();
        let c: Tensor<f32> = prng.randn(&[1, 1, 2, 2, 2]).unwrap();
        let out = block.attn_apply(&params, &y, &c).unwrap();
        assert!(out.narrow_channels(0, 2).unwrap().bit_eq(&y));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (params, block, mut prng) = setup(3, 3);
        let y: Tensor<f64> = prng.randn(&[1, 3, 4, 4, 4]).unwrap();
        let c: Tensor<f64> = prng.randn(&[1, 2, 2, 4, 4]).unwrap();
        assert!(block.attn_apply(&params, &y, &c).is_err());
        let y_bad: Tensor<f64> = prng.randn(&[1, 2, 4, 4, 4]).unwrap();
        assert!(block.attn_apply(&params, &y_bad, &y).is_err());
    }

    #[test]
    fn apply_backward_matches_finite_differences() {
        let (params, block, mut prng) = setup(4, 3);
        let y: Tensor<f64> = prng.randn(&[2, 3, 2, 2, 4]).unwrap();
        let c: Tensor<f64> = prng.randn(&[2, 2, 2, 2, 4]).unwrap();
        let r: Tensor<f64> = prng.randn(&[2, 5, 2, 2, 4]).unwrap();
        let (gy, gc, gp) = block.apply_backward(&params, &y, &r).unwrap();
        let loss = |p: &ParamSet<f64>, y: &Tensor<f64>, c: &Tensor<f64>| dot(&block.attn_apply(p, y, c).unwrap(), &r);
        check_tensor("y", &y, &gy, &mut prng, |v| loss(&params, v, &c));
        check_tensor("c", &c, &gc, &mut prng, |v| loss(&params, &y, v));
        check_params(&params, &gp, &mut prng, |p| loss(p, &y, &c));
    }

    #[test]
    fn invert_backward_matches_finite_differences() {
        let (params, block, mut prng) = setup(5, 3);
        let yu: Tensor<f64> = prng.randn(&[2, 5, 2, 4, 2]).unwrap();
        let ry: Tensor<f64> = prng.randn(&[2, 3, 2, 4, 2]).unwrap();
        let rc: Tensor<f64> = prng.randn(&[2, 2, 2, 4, 2]).unwrap();
        let (g, gp) = block.invert_backward(&params, &yu, &ry, &rc).unwrap();
        let loss = |p: &ParamSet<f64>, yu: &Tensor<f64>| {
            let (y, c) = block.attn_invert(p, yu).unwrap();
            dot(&y, &ry) + dot(&c, &rc)
        };
        check_tensor("y_u", &yu, &g, &mut prng, |v| loss(&params, v));
        check_params(&params, &gp, &mut prng, |p| loss(p, &yu));
    }
}
