//! Grouped 2-D cross-correlation kernels.
//!
//! Work is split per sample. Samples may run on the rayon pool, but every
//! cross-sample reduction (kernel and bias gradients) is summed sequentially
//! in sample order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{gemm, shape_err, MatRef, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(shape_err("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let [o, cg, kh, kw] = *kernel else {
            return Err(shape_err("conv2d", format!("kernel must be OIHW, got {kernel:?}")));
        };
        if stride == 0 || groups == 0 {
            return Err(shape_err("conv2d", "stride and groups must be positive"));
        }
        if c % groups != 0 || o % groups != 0 || c / groups != cg {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, kernel {kernel:?} with {groups} group(s)"),
            ));
        }
        let oh = out_extent(h, kh, stride, pad);
        let ow = out_extent(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err(
                "conv2d",
                format!(
                    "output extent ({h}+2*{pad}-{kh})/{stride}+1 x ({w}+2*{pad}-{kw})/{stride}+1 is not a positive integer"
                ),
            ));
        };
        Ok(Self { n, c, h, w, o, kh, kw, stride, pad, groups, oh, ow })
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c && self.o == self.c && self.groups > 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

/// Source pixel for output position `o` and kernel tap `k`, if inside the image.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let p = (o * stride + k) as isize - pad as isize;
    (p >= 0 && (p as usize) < len).then_some(p as usize)
}

/// Output positions `ox` whose tap `k` lands inside `0..len`, i.e. the
/// range where `ox * stride + k - pad` is a valid index.
#[inline]
fn valid_range(out: usize, k: usize, stride: usize, pad: usize, len: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

/// Lays out one group's receptive fields as `[cg*kh*kw, oh*ow]`.
fn im2col<F: Real>(g: &ConvGeom, x: &[F], col: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.cg() {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let xs = valid_range(g.ow, kj, g.stride, g.pad, g.w);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = src(oy, ki, g.stride, g.pad, g.h) else {
                        line.fill(F::ZERO);
                        continue;
                    };
                    line[..xs.start].fill(F::ZERO);
                    line[xs.end..].fill(F::ZERO);
                    let base = iy * g.w + xs.start * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[xs.clone()].copy_from_slice(&xc[base..base + xs.len()]);
                    } else {
                        for (j, v) in line[xs.clone()].iter_mut().enumerate() {
                            *v = xc[base + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[cg*kh*kw, oh*ow]` column gradient back into image layout.
fn col2im<F: Real>(g: &ConvGeom, col: &[F], dx: &mut [F]) {
    let plane = g.out_plane();
    for ci in 0..g.cg() {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let srcrow = &col[row * plane..(row + 1) * plane];
                let xs = valid_range(g.ow, kj, g.stride, g.pad, g.w);
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ki, g.stride, g.pad, g.h) else { continue };
                    let base = iy * g.w + xs.start * g.stride + kj - g.pad;
                    let line = &srcrow[oy * g.ow + xs.start..oy * g.ow + xs.end];
                    if g.stride == 1 {
                        for (d, v) in dxc[base..base + line.len()].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dxc[base + j * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<F: Real>(g: &ConvGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.o * g.out_plane();
    let mut out = vec![F::ZERO; g.n * out_sample];
    out.par_chunks_mut(out_sample).enumerate().for_each(|(s, y)| {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        if g.is_depthwise() {
            depthwise_forward(g, xs, k, y);
        } else {
            forward_sample(g, xs, k, y);
        }
        if let Some(b) = bias {
            for (oc, plane) in y.chunks_mut(g.out_plane()).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    out
}

fn forward_sample<F: Real>(g: &ConvGeom, xs: &[F], k: &[F], y: &mut [F]) {
    let (cg, og, rows, plane) = (g.cg(), g.og(), g.col_rows(), g.out_plane());
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::ZERO; rows * plane] };
    for gi in 0..g.groups {
        let xg = &xs[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
        let colref = if g.is_pointwise() {
            xg
        } else {
            im2col(g, xg, &mut col);
            &col
        };
        let kg = &k[gi * og * rows..(gi + 1) * og * rows];
        gemm(
            MatRef::new(kg, og, rows),
            MatRef::new(colref, rows, plane),
            F::ZERO,
            &mut y[gi * og * plane..(gi + 1) * og * plane],
        );
    }
}

fn depthwise_forward<F: Real>(g: &ConvGeom, xs: &[F], k: &[F], y: &mut [F]) {
    let taps = g.kh * g.kw;
    for ch in 0..g.c {
        let xc = &xs[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let kc = &k[ch * taps..(ch + 1) * taps];
        let yc = &mut y[ch * g.out_plane()..(ch + 1) * g.out_plane()];
        yc.iter_mut().for_each(|v| *v = F::ZERO);
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let wv = kc[ki * g.kw + kj];
                let xs = valid_range(g.ow, kj, g.stride, g.pad, g.w);
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ki, g.stride, g.pad, g.h) else { continue };
                    let base = iy * g.w + xs.start * g.stride + kj - g.pad;
                    let line = &mut yc[oy * g.ow + xs.start..oy * g.ow + xs.end];
                    for (j, v) in line.iter_mut().enumerate() {
                        *v += wv * xc[base + j * g.stride];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dk: Option<Vec<F>>,
    pub db: Option<Vec<F>>,
}

pub(crate) fn backward<F: Real>(g: &ConvGeom, x: &[F], k: &[F], dy: &[F], need: (bool, bool, bool)) -> ConvGrads<F> {
    let (need_dx, need_dk, need_db) = need;
    let in_sample = g.c * g.h * g.w;
    let out_sample = g.o * g.out_plane();
    let klen = k.len();

    // Per-sample results: (dx slice, dk partial).
    let per_sample: Vec<(Vec<F>, Vec<F>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * in_sample..(s + 1) * in_sample];
            let dys = &dy[s * out_sample..(s + 1) * out_sample];
            let mut dxs = if need_dx { vec![F::ZERO; in_sample] } else { Vec::new() };
            let mut dks = if need_dk { vec![F::ZERO; klen] } else { Vec::new() };
            if g.is_depthwise() {
                depthwise_backward(g, xs, k, dys, need_dx.then_some(&mut dxs[..]), need_dk.then_some(&mut dks[..]));
            } else {
                backward_sample(g, xs, k, dys, need_dx.then_some(&mut dxs[..]), need_dk.then_some(&mut dks[..]));
            }
            (dxs, dks)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.n * in_sample);
        for (dxs, _) in &per_sample {
            dx.extend_from_slice(dxs);
        }
        dx
    });
    let dk = need_dk.then(|| {
        let mut dk = vec![F::ZERO; klen];
        for (_, dks) in &per_sample {
            for (a, b) in dk.iter_mut().zip(dks) {
                *a += *b;
            }
        }
        dk
    });
    let db = need_db.then(|| {
        let mut db = vec![F::ZERO; g.o];
        for s in 0..g.n {
            for (oc, plane) in dy[s * out_sample..(s + 1) * out_sample].chunks(g.out_plane()).enumerate() {
                db[oc] += plane.iter().copied().sum::<F>();
            }
        }
        db
    });
    ConvGrads { dx, dk, db }
}

fn backward_sample<F: Real>(
    g: &ConvGeom,
    xs: &[F],
    k: &[F],
    dys: &[F],
    mut dxs: Option<&mut [F]>,
    mut dks: Option<&mut [F]>,
) {
    let (cg, og, rows, plane) = (g.cg(), g.og(), g.col_rows(), g.out_plane());
    let mut col = vec![F::ZERO; rows * plane];
    for gi in 0..g.groups {
        let xg = &xs[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
        let kg = &k[gi * og * rows..(gi + 1) * og * rows];
        let dyg = &dys[gi * og * plane..(gi + 1) * og * plane];
        if let Some(dk) = dks.as_deref_mut() {
            let colref = if g.is_pointwise() {
                xg
            } else {
                im2col(g, xg, &mut col);
                &col
            };
            // dK_g += dY_g [og, plane] * colᵀ [plane, rows]
            gemm(
                MatRef::new(dyg, og, plane),
                MatRef::new(colref, rows, plane).t(),
                F::ONE,
                &mut dk[gi * og * rows..(gi + 1) * og * rows],
            );
        }
        if let Some(dx) = dxs.as_deref_mut() {
            let dxg = &mut dx[gi * cg * g.h * g.w..(gi + 1) * cg * g.h * g.w];
            if g.is_pointwise() {
                gemm(MatRef::new(kg, og, rows).t(), MatRef::new(dyg, og, plane), F::ONE, dxg);
            } else {
                gemm(MatRef::new(kg, og, rows).t(), MatRef::new(dyg, og, plane), F::ZERO, &mut col);
                col2im(g, &col, dxg);
            }
        }
    }
}

fn depthwise_backward<F: Real>(
    g: &ConvGeom,
    xs: &[F],
    k: &[F],
    dys: &[F],
    mut dxs: Option<&mut [F]>,
    mut dks: Option<&mut [F]>,
) {
    let taps = g.kh * g.kw;
    let hw = g.h * g.w;
    for ch in 0..g.c {
        let xc = &xs[ch * hw..(ch + 1) * hw];
        let dyc = &dys[ch * g.out_plane()..(ch + 1) * g.out_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let tap = ch * taps + ki * g.kw + kj;
                let wv = k[tap];
                let mut acc = F::ZERO;
                let xs = valid_range(g.ow, kj, g.stride, g.pad, g.w);
                for oy in 0..g.oh {
                    let Some(iy) = src(oy, ki, g.stride, g.pad, g.h) else { continue };
                    let base = iy * g.w + xs.start * g.stride + kj - g.pad;
                    let line = &dyc[oy * g.ow + xs.start..oy * g.ow + xs.end];
                    for (j, &d) in line.iter().enumerate() {
                        acc += d * xc[base + j * g.stride];
                    }
                    if let Some(dx) = dxs.as_deref_mut() {
                        let dxc = &mut dx[ch * hw..(ch + 1) * hw];
                        for (j, &d) in line.iter().enumerate() {
                            dxc[base + j * g.stride] += wv * d;
                        }
                    }
                }
                if let Some(dk) = dks.as_deref_mut() {
                    dk[tap] += acc;
                }
            }
        }
    }
}
