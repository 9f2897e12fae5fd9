//! Learnable orthogonal 2×2×2 resampling.
//!
//! Downsampling rearranges every 2×2×2 block of a channel into 8 channels
//! and mixes those 8 values with an orthogonal matrix `Q`. `Q` is the Cayley
//! transform `(I - S)(I + S)^-1` of the skew-symmetric `S = A - Aᵀ`, where
//! `A` is an unconstrained 8×8 parameter, so `Q` stays orthogonal under any
//! gradient update.

use crate::error::{Error, Result};
use crate::revgraph::{ParamId, ParamSet};
use crate::tensor::{meter, Scalar, Tensor};

/// Sub-voxels per 2×2×2 block.
pub const BLOCK: usize = 8;

pub type Mat8 = [[f64; BLOCK]; BLOCK];

fn identity() -> Mat8 {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

fn mat_mul(a: &Mat8, b: &Mat8) -> Mat8 {
    let mut out = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for k in 0..BLOCK {
            let aik = a[i][k];
            for j in 0..BLOCK {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &Mat8) -> Mat8 {
    let mut out = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[j][i] = a[i][j];
        }
    }
    out
}

/// Gauss–Jordan inverse with partial pivoting.
fn invert(m: &Mat8) -> Option<Mat8> {
    let mut a = *m;
    let mut inv = identity();
    for col in 0..BLOCK {
        let pivot = (col..BLOCK).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..BLOCK {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..BLOCK {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for j in 0..BLOCK {
                        a[r][j] -= f * a[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Cayley map of an unconstrained parameter matrix, with the pieces needed
/// for its derivative.
#[derive(Debug, Clone)]
pub struct Cayley {
    pub q: Mat8,
    /// `(I + S)^-1`
    m: Mat8,
}

impl Cayley {
    pub fn new(raw: &[f64]) -> Self {
        assert_eq!(raw.len(), BLOCK * BLOCK);
        let mut s = [[0.0; BLOCK]; BLOCK];
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                s[i][j] = raw[i * BLOCK + j] - raw[j * BLOCK + i];
            }
        }
        let mut i_plus = identity();
        let mut i_minus = identity();
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                i_plus[i][j] += s[i][j];
                i_minus[i][j] -= s[i][j];
            }
        }
        // I + S has eigenvalues 1 + iλ, never singular for real skew S.
        let m = invert(&i_plus).expect("I + S is invertible for skew-symmetric S");
        Cayley {
            q: mat_mul(&i_minus, &m),
            m,
        }
    }

    /// Pulls `dL/dQ` back to the unconstrained parameters.
    pub fn backward(&self, grad_q: &Mat8) -> Vec<f64> {
        let mut i_plus_q = self.q;
        for (i, row) in i_plus_q.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        // dL/dS = -(I + Q)ᵀ G Mᵀ
        let gs = mat_mul(&mat_mul(&transpose(&i_plus_q), grad_q), &transpose(&self.m));
        let mut out = vec![0.0; BLOCK * BLOCK];
        for i in 0..BLOCK {
            for j in 0..BLOCK {
                out[i * BLOCK + j] = -(gs[i][j] - gs[j][i]);
            }
        }
        out
    }

    /// `max |QᵀQ - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.q)
    }
}

pub fn orthogonality_error(q: &Mat8) -> f64 {
    let qtq = mat_mul(&transpose(q), q);
    let mut worst: f64 = 0.0;
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((qtq[i][j] - target).abs());
        }
    }
    worst
}

fn check_even<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.rank() != 5 {
        return Err(Error::shape(op, format!("expected [B,C,D,H,W], got {:?}", x.shape())));
    }
    if x.shape()[2..].iter().any(|&e| e % 2 != 0) {
        return Err(Error::shape(op, format!("spatial extents must be even, got {:?}", x.shape())));
    }
    Ok(())
}

/// Flat offsets of the 8 sub-voxels of the block at low-res `(z, y, x)`.
#[inline]
fn block_offsets(z: usize, y: usize, x: usize, h: usize, w: usize) -> [usize; BLOCK] {
    let mut o = [0; BLOCK];
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                o[(dz * 2 + dy) * 2 + dx] = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
            }
        }
    }
    o
}

fn to_t<T: Scalar>(q: &Mat8) -> [[T; BLOCK]; BLOCK] {
    let mut out = [[T::zero(); BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i][j] = T::from_f64(q[i][j]);
        }
    }
    out
}

/// Space-to-channel rearrangement followed by `Q` on every block.
/// `[B,C,D,H,W] -> [B,8C,D/2,H/2,W/2]`.
pub fn ortho_down<T: Scalar>(x: &Tensor<T>, q: &Mat8) -> Result<Tensor<T>> {
    check_even("ortho_down", x)?;
    let s = x.shape();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (ld, lh, lw) = (d / 2, h / 2, w / 2);
    let lv = ld * lh * lw;
    let hv = d * h * w;
    let qt = to_t::<T>(q);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for bc in 0..b * c {
        let src = &xd[bc * hv..(bc + 1) * hv];
        let dst = &mut out[bc * BLOCK * lv..(bc + 1) * BLOCK * lv];
        for z in 0..ld {
            for y in 0..lh {
                for xx in 0..lw {
                    let offs = block_offsets(z, y, xx, h, w);
                    let v: [T; BLOCK] = std::array::from_fn(|k| src[offs[k]]);
                    let li = (z * lh + y) * lw + xx;
                    for (i, row) in qt.iter().enumerate() {
                        dst[i * lv + li] = row.iter().zip(&v).map(|(&a, &b)| a * b).sum();
                    }
                }
            }
        }
    }
    meter::add_flops(2 * BLOCK as u64 * x.len() as u64);
    Ok(Tensor::from_shape_vec(vec![b, BLOCK * c, ld, lh, lw], out))
}

/// Exact inverse of [`ortho_down`]: `Qᵀ` on every block, then channel-to-space.
pub fn ortho_up<T: Scalar>(y: &Tensor<T>, q: &Mat8) -> Result<Tensor<T>> {
    if y.rank() != 5 || y.shape()[1] % BLOCK != 0 {
        return Err(Error::shape(
            "ortho_up",
            format!("channels must be a multiple of {BLOCK}, got {:?}", y.shape()),
        ));
    }
    let s = y.shape();
    let (b, c8, ld, lh, lw) = (s[0], s[1], s[2], s[3], s[4]);
    let c = c8 / BLOCK;
    let (d, h, w) = (2 * ld, 2 * lh, 2 * lw);
    let lv = ld * lh * lw;
    let hv = d * h * w;
    let qt = to_t::<T>(q);
    let yd = y.data();
    let mut out = vec![T::zero(); y.len()];
    for bc in 0..b * c {
        let src = &yd[bc * BLOCK * lv..(bc + 1) * BLOCK * lv];
        let dst = &mut out[bc * hv..(bc + 1) * hv];
        for z in 0..ld {
            for yy in 0..lh {
                for xx in 0..lw {
                    let li = (z * lh + yy) * lw + xx;
                    let v: [T; BLOCK] = std::array::from_fn(|k| src[k * lv + li]);
                    let offs = block_offsets(z, yy, xx, h, w);
                    for j in 0..BLOCK {
                        let mut acc = T::zero();
                        for i in 0..BLOCK {
                            acc += qt[i][j] * v[i];
                        }
                        dst[offs[j]] = acc;
                    }
                }
            }
        }
    }
    meter::add_flops(2 * BLOCK as u64 * y.len() as u64);
    Ok(Tensor::from_shape_vec(vec![b, c, d, h, w], out))
}

/// `Σ_blocks a_blk ⊗ b_blk` where `a` is in low-res channel layout and `b`
/// in high-res spatial layout: the `dL/dQ` contraction shared by both
/// resampling directions.
fn block_outer<T: Scalar>(low: &Tensor<T>, high: &Tensor<T>) -> Mat8 {
    let s = high.shape();
    let (b, c, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (ld, lh, lw) = (d / 2, h / 2, w / 2);
    let lv = ld * lh * lw;
    let hv = d * h * w;
    let mut acc = [[0.0f64; BLOCK]; BLOCK];
    for bc in 0..b * c {
        let lo = &low.data()[bc * BLOCK * lv..(bc + 1) * BLOCK * lv];
        let hi = &high.data()[bc * hv..(bc + 1) * hv];
        for z in 0..ld {
            for y in 0..lh {
                for x in 0..lw {
                    let li = (z * lh + y) * lw + x;
                    let offs = block_offsets(z, y, x, h, w);
                    for (i, row) in acc.iter_mut().enumerate() {
                        let a = lo[i * lv + li].as_f64();
                        for (j, cell) in row.iter_mut().enumerate() {
                            *cell += a * hi[offs[j]].as_f64();
                        }
                    }
                }
            }
        }
    }
    meter::add_flops(2 * (BLOCK * high.len()) as u64);
    acc
}

/// One learnable resampler; the direction is decided by the caller.
#[derive(Debug, Clone)]
pub struct OrthoResample {
    pub params: ParamId,
}

impl OrthoResample {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, name: &str) -> Self {
        let id = params.register(name, Tensor::zeros(&[BLOCK, BLOCK]).expect("8x8"));
        OrthoResample { params: id }
    }

    pub fn cayley<T: Scalar>(&self, params: &ParamSet<T>) -> Cayley {
        let raw: Vec<f64> = params.value(self.params).data().iter().map(|v| v.as_f64()).collect();
        Cayley::new(&raw)
    }

    pub fn down<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ortho_down(x, &self.cayley(params).q)
    }

    pub fn up<T: Scalar>(&self, params: &ParamSet<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        ortho_up(y, &self.cayley(params).q)
    }

    /// VJP of [`Self::down`] at `x`: returns `(dL/dx, dL/dA)`.
    pub fn down_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        grad_y: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let cay = self.cayley(params);
        // y = Q u  =>  du = Qᵀ dy, dQ = Σ dy uᵀ
        let gx = ortho_up(grad_y, &cay.q)?;
        let gq = block_outer(grad_y, x);
        Ok((gx, self.raw_grad(&cay, &gq)?))
    }

    /// VJP of [`Self::up`] at `y`: returns `(dL/dy, dL/dA)`.
    pub fn up_backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        y: &Tensor<T>,
        grad_x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let cay = self.cayley(params);
        // x = Qᵀ w  =>  dw = Q dx, dQ = Σ w dxᵀ
        let gy = ortho_down(grad_x, &cay.q)?;
        let gq = block_outer(y, grad_x);
        Ok((gy, self.raw_grad(&cay, &gq)?))
    }

    fn raw_grad<T: Scalar>(&self, cay: &Cayley, gq: &Mat8) -> Result<Tensor<T>> {
        let g = cay.backward(gq);
        Ok(Tensor::new(&[BLOCK, BLOCK], g.into_iter().map(T::from_f64).collect())?.untracked())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    fn random_raw(seed: u64, scale: f64) -> Vec<f64> {
        let mut p = Prng::new(seed);
        (0..64).map(|_| scale * p.normal_pair().0).collect()
    }

    #[test]
    fn zero_params_give_identity_and_pure_unshuffle() {
        let cay = Cayley::new(&[0.0; 64]);
        assert_eq!(cay.q, identity());
        let x: Tensor<f32> = Prng::new(1).randn(&[2, 3, 4, 2, 6]).unwrap();
        let y = ortho_down(&x, &cay.q).unwrap();
        assert_eq!(y.shape(), &[2, 24, 2, 1, 3]);
        // channel c*8 + k holds sub-voxel k of each block
        let v = x.data()[((0 * 3 + 1) * 4 + 2) * 2 * 6 + 1 * 6 + 3]; // b0 c1 z2 y1 x3
        let k = (0 * 2 + 1) * 2 + 1; // dz0 dy1 dx1
        assert_eq!(y.data()[(8 + k) * 6 + (1 * 1 + 0) * 3 + 1], v);
        assert!(ortho_up(&y, &cay.q).unwrap().bit_eq(&x));
    }

    #[test]
    fn random_roundtrip_and_isometry() {
        let cay = Cayley::new(&random_raw(3, 0.7));
        assert!(cay.orthogonality_error() <= 1e-12);
        let x: Tensor<f32> = Prng::new(2).randn(&[1, 2, 4, 4, 4]).unwrap();
        let y = ortho_down(&x, &cay.q).unwrap();
        let back = ortho_up(&y, &cay.q).unwrap();
        let err = back.data().iter().zip(x.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-5, "{err}");
        let (nx, ny) = (x.norm_sq().sqrt(), y.norm_sq().sqrt());
        assert!((nx - ny).abs() <= 1e-5 * nx);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 3, 4]).unwrap();
        assert!(matches!(ortho_down(&x, &identity()), Err(Error::Shape { .. })));
    }

    #[test]
    fn cayley_gradient_matches_finite_differences() {
        let raw = random_raw(5, 0.4);
        let mut p = Prng::new(6);
        let g: Vec<f64> = (0..64).map(|_| p.normal_pair().0).collect();
        let loss = |r: &[f64]| -> f64 {
            let q = Cayley::new(r).q;
            (0..64).map(|k| q[k / 8][k % 8] * g[k]).sum()
        };
        let mut gq = [[0.0; 8]; 8];
        for k in 0..64 {
            gq[k / 8][k % 8] = g[k];
        }
        let analytic = Cayley::new(&raw).backward(&gq);
        let h = 1e-6;
        for k in 0..64 {
            let (mut a, mut b) = (raw.clone(), raw.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7, "k={k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn resample_gradients_match_finite_differences() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let r = OrthoResample::register(&mut params, "r");
        let raw = random_raw(9, 0.3);
        params.value_mut(r.params).data_mut().copy_from_slice(&raw);
        let mut p = Prng::new(10);
        let x: Tensor<f64> = p.randn(&[1, 2, 2, 4, 2]).unwrap();
        let gy: Tensor<f64> = p.randn(&[1, 16, 1, 2, 1]).unwrap();
        let (gx, ga) = r.down_backward(&params, &x, &gy).unwrap();
        let lossd = |ps: &ParamSet<f64>, x: &Tensor<f64>| -> f64 {
            let y = r.down(ps, x).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for k in 0..x.len() {
            let (mut a, mut b) = (x.clone(), x.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (lossd(&params, &a) - lossd(&params, &b)) / (2.0 * h);
            assert!((fd - gx.data()[k]).abs() < 1e-8);
        }
        for k in 0..64 {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.value_mut(r.params).data_mut()[k] += h;
            b.value_mut(r.params).data_mut()[k] -= h;
            let fd = (lossd(&a, &x) - lossd(&b, &x)) / (2.0 * h);
            assert!((fd - ga.data()[k]).abs() < 1e-7, "down A[{k}]");
        }

        let y: Tensor<f64> = p.randn(&[1, 16, 1, 2, 1]).unwrap();
        let gx_up: Tensor<f64> = p.randn(&[1, 2, 2, 4, 2]).unwrap();
        let (gy_up, ga_up) = r.up_backward(&params, &y, &gx_up).unwrap();
        let lossu = |ps: &ParamSet<f64>, y: &Tensor<f64>| -> f64 {
            let x = r.up(ps, y).unwrap();
            x.data().iter().zip(gx_up.data()).map(|(a, b)| a * b).sum()
        };
        for k in 0..y.len() {
            let (mut a, mut b) = (y.clone(), y.clone());
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (lossu(&params, &a) - lossu(&params, &b)) / (2.0 * h);
            assert!((fd - gy_up.data()[k]).abs() < 1e-8);
        }
        for k in 0..64 {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.value_mut(r.params).data_mut()[k] += h;
            b.value_mut(r.params).data_mut()[k] -= h;
            let fd = (lossu(&a, &y) - lossu(&b, &y)) / (2.0 * h);
            assert!((fd - ga_up.data()[k]).abs() < 1e-7, "up A[{k}]");
        }
    }
}
