//! Invertible building blocks: orthogonal resampling, additive coupling,
//! attention coupling and the timestep embedding.

pub mod attention;
pub mod coupling;
pub mod embed;
pub mod ortho;

pub use attention::{parity_indices, AttentionCoupling, GAMMA};
pub use coupling::AdditiveCoupling;
pub use embed::{sinusoidal, EmbedCache, TimeEmbedding};
pub use ortho::{ortho_down, ortho_up, orthogonality_error, Cayley, OrthoResample, BLOCK};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::revgraph::ParamSet;
    use crate::tensor::{Prng, Tensor};

    pub fn randomize(params: &mut ParamSet<f64>, prng: &mut Prng, std: f64) {
        for p in params.iter_mut() {
            for v in p.value.data_mut() {
                *v = std * prng.normal_pair().0;
            }
        }
    }

    pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Central differences of `loss` on sampled entries of `x`, compared with `grad`.
    pub fn check_tensor(
        name: &str,
        x: &Tensor<f64>,
        grad: &Tensor<f64>,
        prng: &mut Prng,
        mut loss: impl FnMut(&Tensor<f64>) -> f64,
    ) {
        let h = 1e-6;
        for _ in 0..12 {
            let i = prng.below(x.len());
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let err = rel_err(grad.data()[i], num);
            assert!(err < 1e-5, "{name}[{i}]: analytic {} numeric {num} err {err}", grad.data()[i]);
        }
    }

    /// Same as [`check_tensor`] for every parameter in the set.
    pub fn check_params(
        params: &ParamSet<f64>,
        grads: &[(usize, Tensor<f64>)],
        prng: &mut Prng,
        mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    ) {
        for (id, g) in grads {
            let name = params.get(*id).name.clone();
            let base = params.value(*id).clone();
            check_tensor(&name, &base, g, prng, |v| {
                let mut p = params.clone();
                *p.value_mut(*id) = v.clone();
                loss(&p)
            });
        }
    }
}
