use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::{Array, Tape, Var};

/// Stride and zero-padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec { stride, padding }
    }

    /// `3×3`, stride 1, padding 1: resolution preserving.
    pub const SAME3: Conv2dSpec = Conv2dSpec::new(1, 1);

    /// `4×4`, stride 2, padding 1: exact halving.
    pub const DOWN4: Conv2dSpec = Conv2dSpec::new(2, 1);

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        assert!(
            input + 2 * self.padding >= kernel,
            "conv: input {input} too small for kernel {kernel}"
        );
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox·s + kx − p` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let kx = kx as isize;
        let lo = ((p - kx).max(0) + s - 1) / s;
        let hi = ((self.w as isize + p - kx + s - 1) / s).clamp(0, self.wo as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

/// Target size of one column tile, in elements; keeps the unfolded input of a
/// tile resident in cache.
const TILE_ELEMS: usize = 1 << 16;

impl Geometry {
    /// Output rows per tile.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.c * self.k * self.k * self.wo).max(1)).clamp(1, self.ho)
    }
}

/// Unfolds output rows `[oy0, oy1)` of one item into `cols`, laid out as
/// `(C·K·K, (oy1 − oy0)·W_out)`.
fn im2col(x: &[f64], g: &Geometry, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let n = (oy1 - oy0) * g.wo;
    let (s, p) = (g.spec.stride, g.spec.padding as isize);
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let (lo, hi) = g.valid_cols(kx);
                for oy in oy0..oy1 {
                    let dst = &mut cols[row + (oy - oy0) * g.wo..][..g.wo];
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let ix0 = (lo * s + kx) as isize - p;
                    if s == 1 {
                        let ix0 = ix0 as usize;
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (o, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[ix0 as usize + o * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the tile's columns back into `x`.
fn col2im(cols: &[f64], g: &Geometry, oy0: usize, oy1: usize, x: &mut [f64]) {
    let n = (oy1 - oy0) * g.wo;
    let (s, p) = (g.spec.stride, g.spec.padding as isize);
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * n;
                let (lo, hi) = g.valid_cols(kx);
                for oy in oy0..oy1 {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + (oy - oy0) * g.wo..][..g.wo];
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    let ix0 = ((lo * s + kx) as isize - p) as usize;
                    if s == 1 {
                        for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (o, &v) in src[lo..hi].iter().enumerate() {
                            dst[ix0 + o * s] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 2-D cross-correlation. `weight` is `(C_out, C_in, K, K)`, `bias` is
    /// `(1, C_out, 1, 1)`.
    pub fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, spec: Conv2dSpec) -> Var {
        let [b, c, h, w] = x.shape();
        let [co, wc, k, k2] = weight.shape();
        assert_eq!(k, k2, "conv2d: square kernels only");
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), [1, co, 1, 1], "conv2d: bias shape");
        }
        let geo = Geometry {
            c,
            h,
            w,
            k,
            ho: spec.output_size(h, k),
            wo: spec.output_size(w, k),
            spec,
        };
        let xs = x.rc();
        let ws = weight.rc();
        let out = conv_forward(&xs, &ws, bias.map(|b| b.value()), &geo, b, co);

        let mut inputs = vec![x, weight];
        if let Some(bias) = bias {
            inputs.push(bias);
        }
        self.record(out, &inputs, move |g, need| {
            let (gx, gw, gb) = conv_backward(g, &xs, &ws, &geo, need);
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(gb);
            }
            res
        })
    }

    /// `2×2` max pooling with stride 2.
    pub fn max_pool2(&self, x: &Var) -> Var {
        let [b, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd input {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let xv = x.value().as_standard_layout();
        let xs = xv.as_slice().unwrap();
        let mut out = Array::zeros((b, c, ho, wo));
        let mut arg = vec![0usize; b * c * ho * wo];
        {
            let os = out.as_slice_mut().unwrap();
            for plane in 0..b * c {
                let src = &xs[plane * h * w..][..h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let base = 2 * oy * w + 2 * ox;
                        let mut best = base;
                        for idx in [base + 1, base + w, base + w + 1] {
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = plane * ho * wo + oy * wo + ox;
                        os[o] = src[best];
                        arg[o] = plane * h * w + best;
                    }
                }
            }
        }
        self.record(out, &[x], move |g, _| {
            let gv = g.as_standard_layout();
            let mut gx = Array::zeros((b, c, h, w));
            let gxs = gx.as_slice_mut().unwrap();
            for (&src, &v) in arg.iter().zip(gv.as_slice().unwrap()) {
                gxs[src] += v;
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour `2×` upsampling.
    pub fn upsample_nearest2(&self, x: &Var) -> Var {
        let [b, c, h, w] = x.shape();
        let mut out = Array::zeros((b, c, 2 * h, 2 * w));
        for ((bi, ci, y, xx), v) in out.indexed_iter_mut() {
            *v = x.value()[[bi, ci, y / 2, xx / 2]];
        }
        self.record(out, &[x], move |g, _| {
            let mut gx = Array::zeros((b, c, h, w));
            for ((bi, ci, y, xx), &v) in g.indexed_iter() {
                gx[[bi, ci, y / 2, xx / 2]] += v;
            }
            vec![Some(gx)]
        })
    }
}

/// Column range `[oy0·W_out, oy1·W_out)` of a `(C, H_out·W_out)` plane.
fn tile_view(plane: &[f64], rows: usize, stride: usize, n0: usize, n: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, n).strides((stride, 1)), &plane[n0..n0 + (rows - 1) * stride + n]).unwrap()
}

fn tile_view_mut(plane: &mut [f64], rows: usize, stride: usize, n0: usize, n: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, n).strides((stride, 1)), &mut plane[n0..n0 + (rows - 1) * stride + n]).unwrap()
}

fn conv_forward(x: &Array, w: &Array, bias: Option<&Array>, geo: &Geometry, b: usize, co: usize) -> Array {
    let xv = x.as_standard_layout();
    let xs = xv.as_slice().unwrap();
    let wv = w.as_standard_layout();
    let rows = geo.c * geo.k * geo.k;
    let plane = geo.ho * geo.wo;
    let in_len = geo.c * geo.h * geo.w;
    let wmat = ArrayView2::from_shape((co, rows), wv.as_slice().unwrap()).unwrap();
    let tile = geo.tile_rows();

    let mut out = Array::zeros((b, co, geo.ho, geo.wo));
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * tile * geo.wo] };
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        let xb = &xs[bi * in_len..][..in_len];
        let ob = &mut os[bi * co * plane..][..co * plane];
        if geo.is_pointwise() {
            let colv = ArrayView2::from_shape((rows, plane), xb).unwrap();
            let mut omat = ArrayViewMut2::from_shape((co, plane), &mut *ob).unwrap();
            general_mat_mul(1.0, &wmat, &colv, 0.0, &mut omat);
        } else {
            for oy0 in (0..geo.ho).step_by(tile) {
                let oy1 = (oy0 + tile).min(geo.ho);
                let n = (oy1 - oy0) * geo.wo;
                im2col(xb, geo, oy0, oy1, &mut cols);
                let colv = ArrayView2::from_shape((rows, n), &cols[..rows * n]).unwrap();
                let mut omat = tile_view_mut(ob, co, plane, oy0 * geo.wo, n);
                general_mat_mul(1.0, &wmat, &colv, 0.0, &mut omat);
            }
        }
        if let Some(bias) = bias {
            for (o, row) in ob.chunks_exact_mut(plane).enumerate() {
                let bv = bias[[0, o, 0, 0]];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

fn conv_backward(
    g: &Array,
    x: &Array,
    w: &Array,
    geo: &Geometry,
    need: &[bool],
) -> (Option<Array>, Option<Array>, Option<Array>) {
    let [b, co] = [g.shape()[0], g.shape()[1]];
    let gv = g.as_standard_layout();
    let gs = gv.as_slice().unwrap();
    let xv = x.as_standard_layout();
    let xs = xv.as_slice().unwrap();
    let wv = w.as_standard_layout();
    let rows = geo.c * geo.k * geo.k;
    let plane = geo.ho * geo.wo;
    let wmat = ArrayView2::from_shape((co, rows), wv.as_slice().unwrap()).unwrap();
    let (need_x, need_w) = (need[0], need[1]);
    let need_b = need.get(2).copied().unwrap_or(false);

    let mut gx = need_x.then(|| Array::zeros((b, geo.c, geo.h, geo.w)));
    let mut gw = need_w.then(|| ndarray::Array2::<f64>::zeros((co, rows)));
    let mut gb = need_b.then(|| Array::zeros((1, co, 1, 1)));
    let in_len = geo.c * geo.h * geo.w;
    let tile = if geo.is_pointwise() { geo.ho } else { geo.tile_rows() };
    let mut cols = vec![0.0; rows * tile * geo.wo];

    for bi in 0..b {
        let gb_plane = &gs[bi * co * plane..][..co * plane];
        if let Some(gb) = gb.as_mut() {
            for (o, row) in gb_plane.chunks_exact(plane).enumerate() {
                gb[[0, o, 0, 0]] += row.iter().sum::<f64>();
            }
        }
        let xb = &xs[bi * in_len..][..in_len];
        let mut gxb = gx.as_mut().map(|gx| &mut gx.as_slice_mut().unwrap()[bi * in_len..][..in_len]);
        if geo.is_pointwise() {
            let gmat = ArrayView2::from_shape((co, plane), gb_plane).unwrap();
            if let Some(gw) = gw.as_mut() {
                let colv = ArrayView2::from_shape((rows, plane), xb).unwrap();
                general_mat_mul(1.0, &gmat, &colv.t(), 1.0, gw);
            }
            if let Some(gxs) = gxb {
                let mut gxm = ArrayViewMut2::from_shape((rows, plane), gxs).unwrap();
                general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut gxm);
            }
            continue;
        }
        for oy0 in (0..geo.ho).step_by(tile) {
            let oy1 = (oy0 + tile).min(geo.ho);
            let n = (oy1 - oy0) * geo.wo;
            let gmat = tile_view(gb_plane, co, plane, oy0 * geo.wo, n);
            if let Some(gw) = gw.as_mut() {
                im2col(xb, geo, oy0, oy1, &mut cols);
                let colv = ArrayView2::from_shape((rows, n), &cols[..rows * n]).unwrap();
                general_mat_mul(1.0, &gmat, &colv.t(), 1.0, gw);
            }
            if let Some(gxs) = gxb.as_deref_mut() {
                let mut cm = ArrayViewMut2::from_shape((rows, n), &mut cols[..rows * n]).unwrap();
                general_mat_mul(1.0, &wmat.t(), &gmat, 0.0, &mut cm);
                col2im(&cols, geo, oy0, oy1, gxs);
            }
        }
    }
    let gw = gw.map(|m| m.into_shape_with_order(w.raw_dim()).expect("weight grad reshape"));
    (gx, gw, gb)
}
