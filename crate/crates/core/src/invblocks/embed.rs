use crate::error::{Error, Result};
use crate::revgraph::{ParamId, ParamSet};
use crate::tensor::{meter, Prng, Scalar, Tensor};

use super::coupling::{init_matrix, silu, silu_grad};

/// `[sin(t·ω_0..), cos(t·ω_0..)]` with `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[i] = (t as f64 * omega).sin();
        out[half + i] = (t as f64 * omega).cos();
    }
    out
}

/// Sinusoidal features of the timestep passed through a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub max_t: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Values kept from [`TimeEmbedding::forward`] for its backward pass.
pub struct EmbedCache<T: Scalar> {
    features: Vec<T>,
    pre: Vec<T>,
}

impl TimeEmbedding {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        prng: &mut Prng,
        dim: usize,
        hidden: usize,
        out_dim: usize,
        max_t: usize,
    ) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!("embedding dim must be even and >= 2, got {dim}")));
        }
        Ok(TimeEmbedding {
            dim,
            hidden,
            out_dim,
            max_t,
            w1: params.register("temb.w1", init_matrix(prng, hidden, dim)),
            b1: params.register("temb.b1", Tensor::zeros(&[hidden])?),
            w2: params.register("temb.w2", init_matrix(prng, out_dim, hidden)),
            b2: params.register("temb.b2", Tensor::zeros(&[out_dim])?),
        })
    }

    pub fn count_params(dim: usize, hidden: usize, out_dim: usize) -> usize {
        hidden * dim + hidden + out_dim * hidden + out_dim
    }

    pub fn features(&self, t: usize) -> Result<Vec<f64>> {
        if t > self.max_t {
            return Err(Error::Domain(format!("timestep {t} outside [0, {}]", self.max_t)));
        }
        Ok(sinusoidal(t, self.dim))
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, t: usize) -> Result<(Tensor<T>, EmbedCache<T>)> {
        let features: Vec<T> = self.features(t)?.into_iter().map(T::from_f64).collect();
        let w1 = params.value(self.w1).data();
        let b1 = params.value(self.b1).data();
        let pre: Vec<T> = (0..self.hidden)
            .map(|h| b1[h] + w1[h * self.dim..(h + 1) * self.dim].iter().zip(&features).map(|(&w, &f)| w * f).sum())
            .collect();
        let w2 = params.value(self.w2).data();
        let b2 = params.value(self.b2).data();
        let out: Vec<T> = (0..self.out_dim)
            .map(|o| {
                b2[o]
                    + w2[o * self.hidden..(o + 1) * self.hidden]
                        .iter()
                        .zip(&pre)
                        .map(|(&w, &p)| w * silu(p))
                        .sum()
            })
            .collect();
        meter::add_flops(2 * (self.hidden * self.dim + self.out_dim * self.hidden) as u64);
        Ok((Tensor::new(&[self.out_dim], out)?, EmbedCache { features, pre }))
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        cache: &EmbedCache<T>,
        g_out: &Tensor<T>,
    ) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let w2 = params.value(self.w2).data();
        let g = g_out.data();
        let mut g_w2 = vec![T::zero(); self.out_dim * self.hidden];
        let mut g_pre = vec![T::zero(); self.hidden];
        for o in 0..self.out_dim {
            for h in 0..self.hidden {
                g_w2[o * self.hidden + h] = g[o] * silu(cache.pre[h]);
                g_pre[h] += g[o] * w2[o * self.hidden + h];
            }
        }
        for (gp, &p) in g_pre.iter_mut().zip(&cache.pre) {
            *gp *= silu_grad(p);
        }
        let mut g_w1 = vec![T::zero(); self.hidden * self.dim];
        for h in 0..self.hidden {
            for d in 0..self.dim {
                g_w1[h * self.dim + d] = g_pre[h] * cache.features[d];
            }
        }
        meter::add_flops(4 * (self.hidden * self.dim + self.out_dim * self.hidden) as u64);
        Ok(vec![
            (self.w1, Tensor::new(&[self.hidden, self.dim], g_w1)?.untracked()),
            (self.b1, Tensor::new(&[self.hidden], g_pre)?.untracked()),
            (self.w2, Tensor::new(&[self.out_dim, self.hidden], g_w2)?.untracked()),
            (self.b2, Tensor::new(&[self.out_dim], g.to_vec())?.untracked()),
        ])
    }
}
