//! Differentiable transforms over `NCHW` batches. Each transform is linear,
//! so its backward pass is the adjoint map.

use super::{half_width, FullPlan, HalfPlan};
use crate::tensor::{Array, Tape, Var};

fn planes(a: &Array) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.as_standard_layout().as_slice().unwrap().to_vec()),
    }
}

/// `(B, C, H, W)` real → `(B, 2C, H, ⌊W/2⌋+1)` packed half spectrum.
fn rfft2_batch(x: &Array, plan: &HalfPlan<f64>) -> Array {
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let wf = plan.wf;
    let xs = planes(x);
    let mut out = Array::zeros((b, 2 * c, h, wf));
    let os = out.as_slice_mut().unwrap();
    let plane_out = h * wf;
    for bi in 0..b {
        for ci in 0..c {
            let src = &xs[(bi * c + ci) * h * w..][..h * w];
            let re_off = (bi * 2 * c + ci) * plane_out;
            let im_off = (bi * 2 * c + c + ci) * plane_out;
            let (lo, hi) = os.split_at_mut(im_off);
            plan.forward(src, &mut lo[re_off..re_off + plane_out], &mut hi[..plane_out]);
        }
    }
    out
}

/// Synthesis from a packed `(B, 2C, H, Wf)` spectrum into `(B, C, H, W)`.
fn synthesize_batch(spec: &Array, plan: &HalfPlan<f64>, weights: &[f64], scale: f64) -> Array {
    let [b, c2, h, wf] = [spec.shape()[0], spec.shape()[1], spec.shape()[2], spec.shape()[3]];
    let c = c2 / 2;
    let w = plan.w;
    let ss = planes(spec);
    let mut out = Array::zeros((b, c, h, w));
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ci in 0..c {
            let re = &ss[(bi * c2 + ci) * h * wf..][..h * wf];
            let im = &ss[(bi * c2 + c + ci) * h * wf..][..h * wf];
            plan.synthesize(re, im, weights, scale, &mut os[(bi * c + ci) * h * w..][..h * w]);
        }
    }
    out
}

impl Tape {
    /// Real 2-D FFT of every channel, real parts then imaginary parts along
    /// the channel axis: `(B, C, H, W)` → `(B, 2C, H, ⌊W/2⌋+1)`.
    pub fn rfft2_packed(&self, x: &Var) -> Var {
        let [_, _, h, w] = x.shape();
        let plan = HalfPlan::<f64>::new(h, w);
        let out = rfft2_batch(x.value(), &plan);
        self.record(out, &[x], move |g, _| {
            let ones = vec![1.0; plan.wf];
            vec![Some(synthesize_batch(g, &plan, &ones, 1.0))]
        })
    }

    /// Inverse of [`Tape::rfft2_packed`] back to spatial width `width`.
    pub fn irfft2_packed(&self, x: &Var, width: usize) -> Var {
        let [_, c2, h, wf] = x.shape();
        assert!(c2 % 2 == 0, "irfft2_packed: odd channel count {c2}");
        assert_eq!(wf, half_width(width), "irfft2_packed: width {width} vs {wf} columns");
        let plan = HalfPlan::<f64>::new(h, width);
        let weights = plan.hermitian_weights();
        let scale = 1.0 / (h * width) as f64;
        let out = synthesize_batch(x.value(), &plan, &weights, scale);
        self.record(out, &[x], move |g, _| {
            let mut spec = rfft2_batch(g, &plan);
            for mut row in spec.rows_mut() {
                for (v, &wt) in row.iter_mut().zip(&weights) {
                    *v *= wt * scale;
                }
            }
            vec![Some(spec)]
        })
    }

    /// Full 2-D FFT of every channel (positive and negative frequencies),
    /// packed: `(B, C, H, W)` → `(B, 2C, H, W)`.
    pub fn fft2_full_packed(&self, x: &Var) -> Var {
        let [b, c, h, w] = x.shape();
        let plan = FullPlan::<f64>::new(h, w);
        let plane = h * w;
        let xs = planes(x.value()).into_owned();
        let mut out = Array::zeros((b, 2 * c, h, w));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let src = &xs[(bi * c + ci) * plane..][..plane];
                    let re_off = (bi * 2 * c + ci) * plane;
                    let im_off = (bi * 2 * c + c + ci) * plane;
                    let (lo, hi) = os.split_at_mut(im_off);
                    plan.forward(src, &mut lo[re_off..re_off + plane], &mut hi[..plane]);
                }
            }
        }
        self.record(out, &[x], move |g, _| {
            let gs = planes(g);
            let mut gx = Array::zeros((b, c, h, w));
            let gxs = gx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let re = &gs[(bi * 2 * c + ci) * plane..][..plane];
                    let im = &gs[(bi * 2 * c + c + ci) * plane..][..plane];
                    plan.forward_adjoint(re, im, &mut gxs[(bi * c + ci) * plane..][..plane]);
                }
            }
            vec![Some(gx)]
        })
    }
}
