//! PSNR, SSIM and MAE for volumes with data range 1.

use crate::error::{Error, Result};
use crate::revgraph::MemoryReport;
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1 / MSE)`, capped at 100 dB.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Index and PSNR of the target closest to `x` in PSNR.
pub fn nearest_psnr<T: Scalar>(x: &Tensor<T>, targets: &[Tensor<T>]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let p = psnr(x, t)?;
        if best.map_or(true, |(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.ok_or_else(|| Error::DegenerateInput("no targets to compare against".into()))
}

pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mae", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(s / a.len() as f64)
}

/// Splits a tensor's shape into (number of volumes, [D, H, W]).
fn volumes_of(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() < 3 {
        return Err(Error::shape("ssim3d", format!("need at least 3 dims, got {shape:?}")));
    }
    let k = shape.len() - 3;
    Ok((shape[..k].iter().product(), [shape[k], shape[k + 1], shape[k + 2]]))
}

/// Summed-volume table with a zero border: `s[(z+1, y+1, x+1)] = Σ v[..=z, ..=y, ..=x]`.
fn integral(v: &[f64], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let (hh, ww) = (h + 1, w + 1);
    let mut s = vec![0.0; (d + 1) * hh * ww];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = |a: usize, b: usize, c: usize| (a * hh + b) * ww + c;
                s[i(z + 1, y + 1, x + 1)] = v[(z * h + y) * w + x] + s[i(z, y + 1, x + 1)] + s[i(z + 1, y, x + 1)]
                    + s[i(z + 1, y + 1, x)]
                    - s[i(z, y, x + 1)]
                    - s[i(z, y + 1, x)]
                    - s[i(z + 1, y, x)]
                    + s[i(z, y, x)];
            }
        }
    }
    s
}

fn box_sum(s: &[f64], [_, h, w]: [usize; 3], (z, y, x): (usize, usize, usize), k: usize) -> f64 {
    let (hh, ww) = (h + 1, w + 1);
    let i = |a: usize, b: usize, c: usize| (a * hh + b) * ww + c;
    let (z1, y1, x1) = (z + k, y + k, x + k);
    s[i(z1, y1, x1)] - s[i(z, y1, x1)] - s[i(z1, y, x1)] - s[i(z1, y1, x)] + s[i(z, y, x1)] + s[i(z, y1, x)]
        + s[i(z1, y, x)]
        - s[i(z, y, x)]
}

/// SSIM for one window from its moments (population statistics).
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over all fully contained `window³` cubes, uniform weights.
/// Leading dimensions are treated as separate volumes.
pub fn ssim3d<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, window: usize, c1: f64, c2: f64) -> Result<f64> {
    same_shape("ssim3d", a, b)?;
    let (count, dims) = volumes_of(a.shape())?;
    if window == 0 || dims.iter().any(|&e| e < window) {
        return Err(Error::shape("ssim3d", format!("volume {dims:?} smaller than window {window}")));
    }
    let n = dims.iter().product::<usize>();
    let inv = 1.0 / (window * window * window) as f64;
    let (mut total, mut windows) = (0.0, 0usize);
    for v in 0..count {
        let xa: Vec<f64> = a.data()[v * n..(v + 1) * n].iter().map(|x| x.as_f64()).collect();
        let xb: Vec<f64> = b.data()[v * n..(v + 1) * n].iter().map(|x| x.as_f64()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let tables = [
            integral(&xa, dims),
            integral(&xb, dims),
            integral(&prod(&xa, &xa), dims),
            integral(&prod(&xb, &xb), dims),
            integral(&prod(&xa, &xb), dims),
        ];
        for z in 0..=dims[0] - window {
            for y in 0..=dims[1] - window {
                for x in 0..=dims[2] - window {
                    let m: Vec<f64> = tables.iter().map(|s| box_sum(s, dims, (z, y, x), window) * inv).collect();
                    let (mu_a, mu_b) = (m[0], m[1]);
                    total += ssim_from_moments(mu_a, mu_b, m[2] - mu_a * mu_a, m[3] - mu_b * mu_b, m[4] - mu_a * mu_b, c1, c2);
                    windows += 1;
                }
            }
        }
    }
    Ok(total / windows as f64)
}

/// [`ssim3d`] with the default window and constants.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim3d(a, b, SSIM_WINDOW, SSIM_C1, SSIM_C2)
}

pub fn evaluate<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(a, b)?,
        ssim: ssim(a, b)?,
        mae: mae(a, b)?,
    })
}

/// Arithmetic mean of each metric.
pub fn mean_report(rows: &[MetricReport]) -> Option<MetricReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(MetricReport {
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / n,
    })
}

/// One-line comparison of two peak-memory reports.
pub fn format_memory_comparison(store: &MemoryReport, invertible: &MemoryReport) -> String {
    let ratio = invertible.peak_bytes as f64 / store.peak_bytes.max(1) as f64;
    format!(
        "peak activation bytes: {} {} vs {} {} ({:.3}x)",
        store.mode.name(),
        store.peak_bytes,
        invertible.mode.name(),
        invertible.peak_bytes,
        ratio
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Prng;

    fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>, k: usize) -> f64 {
        let e = a.shape()[a.rank() - 1];
        let at = |t: &Tensor<f64>, z: usize, y: usize, x: usize| t.data()[(z * e + y) * e + x];
        let (mut total, mut count) = (0.0, 0);
        for z in 0..=e - k {
            for y in 0..=e - k {
                for x in 0..=e - k {
                    let mut va = Vec::new();
                    let mut vb = Vec::new();
                    for dz in 0..k {
                        for dy in 0..k {
                            for dx in 0..k {
                                va.push(at(a, z + dz, y + dy, x + dx));
                                vb.push(at(b, z + dz, y + dy, x + dx));
                            }
                        }
                    }
                    let n = va.len() as f64;
                    let ma = va.iter().sum::<f64>() / n;
                    let mb = vb.iter().sum::<f64>() / n;
                    let sa = va.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                    let sb = vb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                    let cab = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                    total += ((2.0 * ma * mb + 1e-4) * (2.0 * cab + 9e-4)) / ((ma * ma + mb * mb + 1e-4) * (sa + sb + 9e-4));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn rand_vol(seed: u64, e: usize) -> Tensor<f64> {
        let mut p = Prng::new(seed);
        Tensor::from_fn(&[1, e, e, e], |_| p.uniform()).unwrap()
    }

    #[test]
    fn nearest_target_wins() {
        let x = Tensor::<f64>::full(&[8], 0.5).unwrap();
        let targets: Vec<_> = [0.0, 0.45, 0.9].iter().map(|&v| Tensor::full(&[8], v).unwrap()).collect();
        let (i, p) = nearest_psnr(&x, &targets).unwrap();
        assert_eq!(i, 1);
        assert!((p - 10.0 * (1.0f64 / 0.0025).log10()).abs() < 1e-9);
        assert!(nearest_psnr(&x, &[]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = rand_vol(1, 8);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let zeros = Tensor::<f64>::zeros(&[1, 8, 8, 8]).unwrap();
        let offset = Tensor::<f64>::full(&[1, 8, 8, 8], 0.1).unwrap();
        assert!((psnr(&zeros, &offset).unwrap() - 20.0).abs() < 1e-9);
        let shifted = a.map(|v| v + 0.1);
        assert!((psnr(&a, &shifted).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &rand_vol(1, 4)).is_err());
    }

    #[test]
    fn ssim_matches_naive_reference() {
        let a = rand_vol(2, 8);
        let b = a.map(|v| 0.6 * v + 0.2 * (v * 7.0).sin().abs());
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - naive_ssim(&a, &b, 7)).abs() <= 1e-9);
        let c = rand_vol(3, 8);
        assert!((ssim(&a, &c).unwrap() - naive_ssim(&a, &c, 7)).abs() <= 1e-9);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = rand_vol(4, 9);
        let b = rand_vol(5, 9);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-9);
        assert!(ssim(&rand_vol(6, 6), &rand_vol(7, 6)).is_err());
    }

    #[test]
    fn mae_examples() {
        let zeros = Tensor::<f64>::zeros(&[1, 4, 4, 4]).unwrap();
        let ones = Tensor::<f64>::ones(&[1, 4, 4, 4]).unwrap();
        assert_eq!(mae(&zeros, &ones).unwrap(), 1.0);
        let a = rand_vol(8, 4);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        for s in 0..20 {
            let (a, b, c) = (rand_vol(3 * s, 4), rand_vol(3 * s + 1, 4), rand_vol(3 * s + 2, 4));
            assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-15);
        }
    }

    #[test]
    fn mean_of_rows() {
        let r = |p, s, m| MetricReport { psnr_db: p, ssim: s, mae: m };
        let mean = mean_report(&[r(10.0, 0.5, 0.1), r(20.0, 1.0, 0.3)]).unwrap();
        assert_eq!(mean, r(15.0, 0.75, 0.2));
        assert!(mean_report(&[]).is_none());
    }
}
