//! Raw numeric kernels shared by the tape and by the non-differentiable
//! raster code. Everything here works on flat row-major slices.

use super::Real;
use crate::error::{Error, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed over the dimensions of `out`, zero where
/// `shape` is broadcast.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching flat indices of both
/// broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_acc_bt<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                s = s + x * y;
            }
            da[i * k + p] = da[i * k + p] + s;
        }
    }
}

/// `db[k,n] += a[m,k]ᵀ · dc[m,n]`
pub(crate) fn matmul_acc_at<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (o, &g) in dbrow.iter_mut().zip(drow) {
                *o = *o + av * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // ox*s + kx >= pad
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // ox*s + kx - pad <= w - 1
        let lim = self.w + self.pad;
        let hi = if lim > kx { ((lim - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.stride + ky;
        if y < self.pad || y - self.pad >= self.h {
            None
        } else {
            Some(y - self.pad)
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.f * g.ho * g.wo];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.ho * g.wo;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let orow = &mut out[obase + oy * g.wo..obase + (oy + 1) * g.wo];
                            let xrow = &x[xbase + iy * g.w..xbase + (iy + 1) * g.w];
                            if g.stride == 1 {
                                let off = lo + kx - g.pad;
                                for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[off..off + hi - lo]) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    orow[ox] = orow[ox] + wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); wt.len()]);
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.ho * g.wo;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((f * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (lo, hi) = g.col_range(kx);
                        let mut wacc = T::zero();
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &dout[obase + oy * g.wo..obase + (oy + 1) * g.wo];
                            let xoff = xbase + iy * g.w;
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = grow[ox];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xoff + ix] = dx[xoff + ix] + wv * gv;
                                }
                                if want_dw {
                                    wacc = wacc + x[xoff + ix] * gv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] = dw[widx] + wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Gauss–Jordan inverse with partial pivoting, computed in `f64`.
///
/// Returns the inverse and the 1-norm condition estimate `‖A‖₁‖A⁻¹‖₁`.
pub(crate) fn invert(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let norm1 = |x: &[f64]| {
        (0..n).map(|j| (0..n).map(|i| x[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max)
    };
    let anorm = norm1(a);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        let pv = m[piv * n + col];
        if pv == 0.0 || !pv.is_finite() {
            return Err(Error::Numeric {
                msg: format!("singular {n}x{n} matrix (zero pivot in column {col})"),
                condition: f64::INFINITY,
            });
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let r = 1.0 / pv;
        for j in 0..n {
            m[col * n + j] *= r;
            inv[col * n + j] *= r;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let fct = m[i * n + col];
            if fct == 0.0 {
                continue;
            }
            for j in 0..n {
                m[i * n + j] -= fct * m[col * n + j];
                inv[i * n + j] -= fct * inv[col * n + j];
            }
        }
    }
    let cond = anorm * norm1(&inv);
    Ok((inv, cond))
}

/// A linear map acting along one axis of a tensor: `out[i] = Σ_j w[i][j] · in[j]`.
///
/// Rows are stored as a dense window `[start, start + weights.len())` of the
/// input axis. Blur, decimation and interpolation are all expressed this way.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    in_len: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl AxisMap {
    /// Builds from a dense `out_len × in_len` row-major matrix.
    pub fn from_dense(out_len: usize, in_len: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), out_len * in_len);
        let rows = (0..out_len)
            .map(|i| {
                let row = &dense[i * in_len..(i + 1) * in_len];
                let first = row.iter().position(|&v| v != 0.0);
                match first {
                    None => (0, Vec::new()),
                    Some(s) => {
                        let e = row.iter().rposition(|&v| v != 0.0).unwrap();
                        (s, row[s..=e].to_vec())
                    }
                }
            })
            .collect();
        AxisMap { in_len, rows }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.out_len() * self.in_len];
        for (i, (s, w)) in self.rows.iter().enumerate() {
            for (j, &v) in w.iter().enumerate() {
                d[i * self.in_len + s + j] = v;
            }
        }
        d
    }

    /// Composition `self ∘ inner` (apply `inner` first).
    pub fn compose(&self, inner: &AxisMap) -> AxisMap {
        assert_eq!(self.in_len, inner.out_len(), "axis map composition size mismatch");
        let a = self.to_dense();
        let b = inner.to_dense();
        let (m, k, n) = (self.out_len(), self.in_len, inner.in_len);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        AxisMap::from_dense(m, n, &c)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Applies `map` along `axis` with `f64` accumulation.
pub fn apply_axis_map<T: Real>(data: &[T], shape: &[usize], axis: usize, map: &AxisMap) -> Result<Vec<T>> {
    if axis >= shape.len() || shape[axis] != map.in_len {
        return Err(Error::dim(format!(
            "axis map expects length {} on axis {axis} of {shape:?}",
            map.in_len
        )));
    }
    let (outer, n, inner) = split_axis(shape, axis);
    let m = map.out_len();
    let mut out = Vec::with_capacity(outer * m * inner);
    let mut acc = vec![0.0f64; inner];
    for o in 0..outer {
        let base = o * n * inner;
        for (s, w) in &map.rows {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (j, &wv) in w.iter().enumerate() {
                let src = &data[base + (s + j) * inner..base + (s + j + 1) * inner];
                for (a, &x) in acc.iter_mut().zip(src) {
                    *a += wv * x.as_f64();
                }
            }
            out.extend(acc.iter().map(|&v| T::lit(v)));
        }
    }
    Ok(out)
}

/// Transpose application used by the backward pass.
pub(crate) fn apply_axis_map_t<T: Real>(dout: &[T], in_shape: &[usize], axis: usize, map: &AxisMap) -> Vec<T> {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let m = map.out_len();
    let mut acc = vec![0.0f64; outer * n * inner];
    for o in 0..outer {
        for (i, (s, w)) in map.rows.iter().enumerate() {
            let g = &dout[(o * m + i) * inner..(o * m + i + 1) * inner];
            for (j, &wv) in w.iter().enumerate() {
                let dst = &mut acc[(o * n + s + j) * inner..(o * n + s + j + 1) * inner];
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d += wv * gv.as_f64();
                }
            }
        }
    }
    acc.into_iter().map(T::lit).collect()
}
