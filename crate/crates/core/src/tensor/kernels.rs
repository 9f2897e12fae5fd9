use super::{debug_check_finite, meter, Scalar, Tensor};
use crate::error::{Error, Result};

struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if x.rank() != 5 || kernel.rank() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("expected rank-5 input and kernel, got {:?} and {:?}", x.shape(), kernel.shape()),
            ));
        }
        let ks = kernel.shape();
        let k = ks[2];
        if ks[3] != k || ks[4] != k || k % 2 == 0 {
            return Err(Error::shape("conv3d", format!("kernel must be odd and cubic, got {ks:?}")));
        }
        if ks[1] != x.shape()[1] {
            return Err(Error::shape(
                "conv3d",
                format!("kernel expects {} input channels, input has {}", ks[1], x.shape()[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv3d", "stride must be positive"));
        }
        let xs = x.shape();
        let mut out = [0; 3];
        for a in 0..3 {
            let span = xs[2 + a] + 2 * padding;
            if span < k {
                return Err(Error::shape(
                    "conv3d",
                    format!("padded extent {span} smaller than kernel {k}"),
                ));
            }
            out[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            k,
            stride,
            pad: padding,
            inp: [xs[2], xs[3], xs[4]],
            out,
        })
    }

    fn in_vol(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out.iter().product()
    }

    fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.out_vol() * self.c_in * self.k.pow(3)) as u64
    }

    /// Output index range along axis `a` whose input tap `o*stride + kk - pad` is in bounds.
    fn valid(&self, a: usize, kk: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        let n_in = self.inp[a] as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= n_in - 1
        let hi_incl = (n_in - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, self.out[a] as isize);
        let lo = lo.clamp(0, hi);
        (lo as usize, hi as usize)
    }

    /// Visits every (output row, input row, weight) triple for one
    /// (b, co, ci) pair: `f(out_row_start, in_row_start, n, weight_index)`
    /// where the rows cover `n` contiguous output positions along W
    /// (stride 1) or `n` strided positions (general stride).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let k = self.k;
        let [_, ih_n, iw_n] = self.inp;
        let [_, oh_n, ow_n] = self.out;
        let s = self.stride;
        for kd in 0..k {
            let (d0, d1) = self.valid(0, kd);
            for kh in 0..k {
                let (h0, h1) = self.valid(1, kh);
                for kw in 0..k {
                    let (w0, w1) = self.valid(2, kw);
                    if w1 <= w0 {
                        continue;
                    }
                    let widx = (kd * k + kh) * k + kw;
                    for od in d0..d1 {
                        let id = od * s + kd - self.pad;
                        for oh in h0..h1 {
                            let ih = oh * s + kh - self.pad;
                            let out_start = (od * oh_n + oh) * ow_n + w0;
                            let in_start = (id * ih_n + ih) * iw_n + w0 * s + kw - self.pad;
                            f(out_start, in_start, w1 - w0, widx, s);
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolutions run on a zero-padded copy of the input. On
/// that grid every kernel tap is a fixed index offset, so each (channel
/// pair, tap) becomes one long contiguous multiply-add; outputs landing on
/// the padding ring are computed and discarded.
struct PaddedGrid {
    dims: [usize; 3],
    pad: usize,
    /// `[Dp, Hp, Wp]`
    padded: [usize; 3],
    /// First interior index on the padded grid.
    start: usize,
    /// Span from the first to the last interior index, inclusive.
    span: usize,
    /// Signed index offset of each tap, shifted by `start` so it is non-negative.
    taps: Vec<usize>,
}

impl PaddedGrid {
    fn new(dims: [usize; 3], k: usize) -> Self {
        let pad = (k - 1) / 2;
        let padded = dims.map(|d| d + 2 * pad);
        let [_, hp, wp] = padded;
        let idx = |d: usize, h: usize, w: usize| (d * hp + h) * wp + w;
        let start = idx(pad, pad, pad);
        let end = idx(dims[0] - 1 + pad, dims[1] - 1 + pad, dims[2] - 1 + pad);
        let mut taps = Vec::with_capacity(k * k * k);
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    // start + (kd - pad, kh - pad, kw - pad) offset
                    taps.push(idx(kd, kh, kw));
                }
            }
        }
        PaddedGrid {
            dims,
            pad,
            padded,
            start,
            span: end - start + 1,
            taps,
        }
    }

    fn len(&self) -> usize {
        self.padded.iter().product()
    }

    fn scatter<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, hp, wp] = self.padded;
        let p = self.pad;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + p) * hp + y + p) * wp + p;
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }

    /// Copies interior values of a span buffer (indexed from `start`) into `dst`.
    fn gather_span<T: Scalar>(&self, span: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, hp, wp] = self.padded;
        let p = self.pad;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + p) * hp + y + p) * wp + p - self.start;
                dst[(z * h + y) * w..][..w].copy_from_slice(&span[o..o + w]);
            }
        }
    }

    /// Inverse of [`Self::gather_span`]; positions on the ring stay zero.
    fn scatter_span<T: Scalar>(&self, src: &[T], span: &mut [T]) {
        let [d, h, w] = self.dims;
        let [_, hp, wp] = self.padded;
        let p = self.pad;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + p) * hp + y + p) * wp + p - self.start;
                span[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four partial sums so the loop vectorizes
    let mut s = [T::zero(); 4];
    let n = a.len().min(b.len());
    let chunks = n / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

fn is_same_conv(g: &ConvGeom) -> bool {
    g.stride == 1 && g.pad == (g.k - 1) / 2
}

fn conv3d_same<T: Scalar>(g: &ConvGeom, xd: &[T], wd: &[T], bias: Option<&[T]>) -> Vec<T> {
    let grid = PaddedGrid::new(g.inp, g.k);
    let (iv, k3, plen, span) = (g.in_vol(), g.k.pow(3), grid.len(), grid.span);
    let mut out = vec![T::zero(); g.batch * g.c_out * iv];
    let mut padded = vec![T::zero(); g.c_in * plen];
    let mut acc = vec![T::zero(); span];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            grid.scatter(&xd[(b * g.c_in + ci) * iv..][..iv], &mut padded[ci * plen..][..plen]);
        }
        for co in 0..g.c_out {
            acc.fill(bias.map_or(T::zero(), |bb| bb[co]));
            for ci in 0..g.c_in {
                let src = &padded[ci * plen..][..plen];
                let w = &wd[(co * g.c_in + ci) * k3..][..k3];
                for (&wv, &off) in w.iter().zip(&grid.taps) {
                    axpy(&mut acc, wv, &src[off..off + span]);
                }
            }
            grid.gather_span(&acc, &mut out[(b * g.c_out + co) * iv..][..iv]);
        }
    }
    out
}

fn conv3d_same_backward<T: Scalar>(g: &ConvGeom, xd: &[T], wd: &[T], gd: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let grid = PaddedGrid::new(g.inp, g.k);
    let (iv, k3, plen, span) = (g.in_vol(), g.k.pow(3), grid.len(), grid.span);
    let mut gx = vec![T::zero(); g.batch * g.c_in * iv];
    let mut gw = vec![T::zero(); g.c_out * g.c_in * k3];
    let mut gb = vec![T::zero(); g.c_out];
    let mut padded = vec![T::zero(); g.c_in * plen];
    let mut gpad = vec![T::zero(); g.c_in * plen];
    let mut gspan = vec![T::zero(); span];
    let mut gx_span = vec![T::zero(); span];
    for b in 0..g.batch {
        for ci in 0..g.c_in {
            grid.scatter(&xd[(b * g.c_in + ci) * iv..][..iv], &mut padded[ci * plen..][..plen]);
        }
        gpad.fill(T::zero());
        for co in 0..g.c_out {
            let gplane = &gd[(b * g.c_out + co) * iv..][..iv];
            gb[co] += gplane.iter().copied().sum();
            gspan.fill(T::zero());
            grid.scatter_span(gplane, &mut gspan);
            for ci in 0..g.c_in {
                let src = &padded[ci * plen..][..plen];
                let dst = &mut gpad[ci * plen..][..plen];
                let w = &wd[(co * g.c_in + ci) * k3..][..k3];
                let gwk = &mut gw[(co * g.c_in + ci) * k3..][..k3];
                for ((&wv, &off), gwv) in w.iter().zip(&grid.taps).zip(gwk.iter_mut()) {
                    axpy(&mut dst[off..off + span], wv, &gspan);
                    *gwv += dot(&gspan, &src[off..off + span]);
                }
            }
        }
        for ci in 0..g.c_in {
            gx_span.copy_from_slice(&gpad[ci * plen + grid.start..][..span]);
            grid.gather_span(&gx_span, &mut gx[(b * g.c_in + ci) * iv..][..iv]);
        }
    }
    (gx, gw, gb)
}

/// 3-D cross-correlation of `x[B,C,D,H,W]` with `kernel[C',C,k,k,k]`.
/// Output extent per axis is `floor((n + 2p - k) / stride) + 1`.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape("conv3d", format!("bias length {} != {}", b.len(), g.c_out)));
        }
    }
    let xd = x.data();
    let wd = kernel.data();
    let shape = vec![g.batch, g.c_out, g.out[0], g.out[1], g.out[2]];
    if is_same_conv(&g) {
        let out = conv3d_same(&g, xd, wd, bias);
        meter::add_flops(2 * g.macs());
        debug_check_finite("conv3d", &[xd, wd], &out);
        return Ok(Tensor::from_shape_vec(shape, out));
    }
    let (iv, ov, k3) = (g.in_vol(), g.out_vol(), g.k.pow(3));
    let mut out = vec![T::zero(); g.batch * g.c_out * ov];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let plane = &mut out[(b * g.c_out + co) * ov..][..ov];
            if let Some(bias) = bias {
                plane.fill(bias[co]);
            }
            for ci in 0..g.c_in {
                let inp = &xd[(b * g.c_in + ci) * iv..][..iv];
                let w = &wd[(co * g.c_in + ci) * k3..][..k3];
                g.for_each_tap(|o0, i0, n, widx, s| {
                    let wv = w[widx];
                    if s == 1 {
                        for (o, &v) in plane[o0..o0 + n].iter_mut().zip(&inp[i0..i0 + n]) {
                            *o += wv * v;
                        }
                    } else {
                        for j in 0..n {
                            plane[o0 + j] += wv * inp[i0 + j * s];
                        }
                    }
                });
            }
        }
    }
    meter::add_flops(2 * g.macs());
    debug_check_finite("conv3d", &[xd, wd], &out);
    Ok(Tensor::from_shape_vec(shape, out))
}

/// Gradients of [`conv3d`] with respect to its input, kernel and bias.
pub struct Conv3dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv3dGrads<T>> {
    let g = ConvGeom::new(x, kernel, stride, padding)?;
    let expect = [g.batch, g.c_out, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expect {
        return Err(Error::shape(
            "conv3d_backward",
            format!("grad {:?} != output {:?}", grad_out.shape(), expect),
        ));
    }
    let xd = x.data();
    let wd = kernel.data();
    let gd = grad_out.data();
    if is_same_conv(&g) {
        let (gx, gw, gb) = conv3d_same_backward(&g, xd, wd, gd);
        meter::add_flops(4 * g.macs() + grad_out.len() as u64);
        return Ok(Conv3dGrads {
            input: Tensor::from_shape_vec(x.shape().to_vec(), gx),
            kernel: Tensor::from_shape_vec(kernel.shape().to_vec(), gw).untracked(),
            bias: gb,
        });
    }
    let (iv, ov, k3) = (g.in_vol(), g.out_vol(), g.k.pow(3));
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let gplane = &gd[(b * g.c_out + co) * ov..][..ov];
            gb[co] += gplane.iter().copied().sum();
            for ci in 0..g.c_in {
                let inp = &xd[(b * g.c_in + ci) * iv..][..iv];
                let gin = &mut gx[(b * g.c_in + ci) * iv..][..iv];
                let w = &wd[(co * g.c_in + ci) * k3..][..k3];
                let gwk = &mut gw[(co * g.c_in + ci) * k3..][..k3];
                g.for_each_tap(|o0, i0, n, widx, s| {
                    let wv = w[widx];
                    let mut acc = T::zero();
                    if s == 1 {
                        let go = &gplane[o0..o0 + n];
                        for ((gi, &xi), &gv) in gin[i0..i0 + n].iter_mut().zip(&inp[i0..i0 + n]).zip(go) {
                            *gi += wv * gv;
                            acc += gv * xi;
                        }
                    } else {
                        for j in 0..n {
                            let gv = gplane[o0 + j];
                            gin[i0 + j * s] += wv * gv;
                            acc += gv * inp[i0 + j * s];
                        }
                    }
                    gwk[widx] += acc;
                });
            }
        }
    }
    meter::add_flops(4 * g.macs() + grad_out.len() as u64);
    Ok(Conv3dGrads {
        input: Tensor::from_shape_vec(x.shape().to_vec(), gx),
        kernel: Tensor::from_shape_vec(kernel.shape().to_vec(), gw).untracked(),
        bias: gb,
    })
}

fn check_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a[m,k] · b[k,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_matrix("matmul", a)?;
    let (k2, n) = check_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    meter::add_flops(2 * (m * n * k) as u64);
    debug_check_finite("matmul", &[ad, bd], &out);
    Ok(Tensor::from_shape_vec(vec![m, n], out))
}

/// `a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_matrix("matmul_nt", a)?;
    let (n, k2) = check_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    }
    meter::add_flops(2 * (m * n * k) as u64);
    debug_check_finite("matmul_nt", &[ad, bd], &out);
    Ok(Tensor::from_shape_vec(vec![m, n], out))
}

/// `a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = check_matrix("matmul_tn", a)?;
    let (k2, n) = check_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("inner dims {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    meter::add_flops(2 * (m * n * k) as u64);
    debug_check_finite("matmul_tn", &[ad, bd], &out);
    Ok(Tensor::from_shape_vec(vec![m, n], out))
}

/// Softmax along `axis`, stabilized by subtracting the running maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mx = (0..len).fold(T::neg_infinity(), |m, j| m.max(xd[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - mx).exp();
                out[at(j)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    meter::add_flops(4 * x.len() as u64);
    debug_check_finite("softmax", &[xd], &out);
    Ok(Tensor::from_shape_vec(shape.to_vec(), out))
}
