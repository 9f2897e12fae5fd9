//! Synthetic phantom volumes and the IDMV volume file format.
//!
//! IDMV layout, all little-endian:
//!
//! ```text
//! "IDMV" | u32 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 ndim | ndim × u32 extent | raw floats
//! ```

use std::path::{Path, PathBuf};

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::{DType, Prng, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"IDMV";
const VERSION: u32 = 1;

/// Header bytes of an IDMV file with `ndim` extents.
pub fn header_len(ndim: usize) -> usize {
    4 + 4 + 1 + 1 + 4 * ndim
}

/// One axis-aligned soft ellipsoid, in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub edge: usize,
    pub n_ellipsoids: usize,
    pub intensity: (f64, f64),
    /// Width of the Gaussian falloff outside each ellipsoid, in voxels.
    pub sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(edge: usize, seed: u64) -> Self {
        PhantomSpec {
            edge,
            n_ellipsoids: 3,
            intensity: (0.3, 1.0),
            sigma: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge < 2 {
            return Err(Error::Config(format!("phantom edge must be at least 2, got {}", self.edge)));
        }
        if !(1..=4).contains(&self.n_ellipsoids) {
            return Err(Error::Config(format!("n_ellipsoids must be 1 to 4, got {}", self.n_ellipsoids)));
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad intensity range ({lo}, {hi})")));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Scalar> {
    /// `[1, E, E, E]`, values in `[0, 1]`.
    pub tensor: Tensor<T>,
    pub source: String,
    pub seed: Option<u64>,
}

/// Raw sum of soft ellipsoids on an `edge³` grid, shape `[1, E, E, E]`.
pub fn render_ellipsoids(edge: usize, shapes: &[Ellipsoid], sigma: f64) -> Result<Tensor<f64>> {
    let mut t = Tensor::zeros(&[1, edge, edge, edge])?;
    let data = t.data_mut();
    for z in 0..edge {
        for y in 0..edge {
            for x in 0..edge {
                let p = [z as f64, y as f64, x as f64];
                let mut v = 0.0;
                for e in shapes {
                    let r = (0..3).map(|k| ((p[k] - e.center[k]) / e.radii[k]).powi(2)).sum::<f64>().sqrt();
                    if r <= 1.0 {
                        v += e.intensity;
                    } else {
                        // approximate distance outside the surface, in voxels
                        let mean_radius = (e.radii[0] + e.radii[1] + e.radii[2]) / 3.0;
                        let d = (r - 1.0) * mean_radius;
                        v += e.intensity * (-d * d / (2.0 * sigma * sigma)).exp();
                    }
                }
                data[(z * edge + y) * edge + x] = v;
            }
        }
    }
    Ok(t)
}

/// Random soft-ellipsoid phantom rescaled to `[0, 1]`; deterministic per seed.
pub fn gen_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<Volume<T>> {
    spec.validate()?;
    let mut prng = Prng::new(spec.seed);
    let e = spec.edge as f64;
    let shapes: Vec<Ellipsoid> = (0..spec.n_ellipsoids)
        .map(|_| Ellipsoid {
            center: [0; 3].map(|_| prng.uniform_in(0.3 * e, 0.7 * e)),
            radii: [0; 3].map(|_| prng.uniform_in(0.12 * e, 0.3 * e)),
            intensity: prng.uniform_in(spec.intensity.0, spec.intensity.1),
        })
        .collect();
    let raw = render_ellipsoids(spec.edge, &shapes, spec.sigma)?;
    let spread = raw.max_abs() - raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 0.1 {
        return Err(Error::DegenerateInput(format!("phantom with seed {} is nearly constant", spec.seed)));
    }
    Ok(Volume {
        tensor: normalize(&raw)?.cast(),
        source: format!("phantom:{}", spec.seed),
        seed: Some(spec.seed),
    })
}

/// `(t − min) / (max − min)`.
pub fn normalize<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(Error::DegenerateInput(format!("cannot normalize: min {lo}, max {hi}")));
    }
    let span = hi - lo;
    Ok(t.map(|v| (v - lo) / span))
}

/// `n` phantoms of edge `edge`; volume `i` uses the `i`-th seed drawn from `seed`.
pub fn gen_dataset<T: Scalar>(seed: u64, n: usize, edge: usize) -> Result<Vec<Volume<T>>> {
    let mut master = Prng::new(seed);
    (0..n)
        .map(|_| {
            let vol_seed = master.next_u64();
            let mut spec = PhantomSpec::new(edge, vol_seed);
            spec.n_ellipsoids = 1 + Prng::new(vol_seed ^ 0x5EED).below(4);
            gen_phantom(&spec)
        })
        .collect()
}

/// File name of dataset entry `i`.
pub fn volume_file_name(i: usize) -> String {
    format!("vol_{i:05}.idmv")
}

fn check_unit_range<T: Scalar>(t: &Tensor<T>) -> bool {
    t.data().iter().all(|&v| v >= T::zero() && v <= T::one())
}

pub fn volume_bytes<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<Vec<u8>> {
    let spatial = match t.shape() {
        [1, d, h, w] | [d, h, w] => [*d, *h, *w],
        other => return Err(Error::shape("volume_write", format!("expected [1, D, H, W], got {other:?}"))),
    };
    if !check_unit_range(t) {
        return Err(Error::Domain(format!("{}: volume values must lie in [0, 1]", path.display())));
    }
    let mut out = Vec::with_capacity(header_len(3) + t.bytes());
    out.extend_from_slice(MAGIC);
    binio::put_u32(&mut out, VERSION);
    out.push(T::DTYPE.code());
    out.push(3);
    for d in spatial {
        binio::put_u32(&mut out, binio::dim_u32(path, d)?);
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn volume_write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    binio::write_file(path, &volume_bytes(t, path)?)
}

/// Parses an IDMV buffer into `[1, D, H, W]`, converting to `T` if the
/// stored dtype differs.
pub fn volume_from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut r = Reader::new(bytes, path);
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail("not an IDMV volume (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported IDMV version {version}")));
    }
    let code = r.u8("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| r.fail(format!("unknown dtype code {code}")))?;
    let ndim = r.u8("ndim")? as usize;
    if ndim != 3 {
        return Err(r.fail(format!("expected 3 spatial dims, found {ndim}")));
    }
    let mut shape = vec![1usize];
    for _ in 0..ndim {
        let d = r.u32("extent")? as usize;
        if d == 0 {
            return Err(r.fail("zero extent"));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let t: Tensor<T> = match dtype {
        DType::F32 => Tensor::new(&shape, r.floats::<f32>(n, "voxels")?)?.cast(),
        DType::F64 => Tensor::new(&shape, r.floats::<f64>(n, "voxels")?)?.cast(),
    };
    r.finish()?;
    if !check_unit_range(&t) {
        return Err(r.fail("voxel values outside [0, 1]"));
    }
    Ok(t)
}

pub fn volume_read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    volume_from_bytes(&binio::read_file(path)?, path)
}

/// Sorted `*.idmv` files directly inside `dir`.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "idmv") && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Stacks volumes `[1, E, E, E]` into a batch `[B, 1, E, E, E]`.
pub fn stack<T: Scalar>(vols: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = vols.first().ok_or_else(|| Error::shape("stack", "no volumes"))?;
    let mut shape = vec![vols.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * vols.len());
    for v in vols {
        if v.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", v.shape(), first.shape())));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(&shape, data)
}

/// Item `i` of a batch `[B, ...]` as `[...]`.
pub fn unstack<T: Scalar>(batch: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let n = batch.len() / batch.shape()[0];
    Tensor::new(&batch.shape()[1..], batch.data()[i * n..(i + 1) * n].to_vec())
}
