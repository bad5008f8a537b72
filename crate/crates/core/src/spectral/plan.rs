//! Plane-level 2-D transforms over row-major buffers.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Real;

/// Real-input transform of an `h × w` plane onto its `h × (⌊w/2⌋ + 1)`
/// half spectrum, plus the synthesis direction.
pub(crate) struct HalfPlan<T: Real> {
    pub h: usize,
    pub w: usize,
    pub wf: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> HalfPlan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        HalfPlan {
            h,
            w,
            wf: w / 2 + 1,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Unnormalized forward transform; `re`/`im` are `h × wf`.
    pub fn forward(&self, x: &[T], re: &mut [T], im: &mut [T]) {
        let (h, w, wf) = (self.h, self.w, self.wf);
        let mut rows: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.row_fwd.process(&mut rows);
        let mut cols = vec![Complex::new(T::zero(), T::zero()); wf * h];
        for m in 0..h {
            for l in 0..wf {
                cols[l * h + m] = rows[m * w + l];
            }
        }
        self.col_fwd.process(&mut cols);
        for k in 0..h {
            for l in 0..wf {
                let v = cols[l * h + k];
                re[k * wf + l] = v.re;
                im[k * wf + l] = v.im;
            }
        }
    }

    /// `out[m, n] = scale · Re Σ_k Σ_{l < wf} weight[l] · X[k, l] · e^{+2πi(km/h + ln/w)}`.
    pub fn synthesize(&self, re: &[T], im: &[T], weights: &[T], scale: T, out: &mut [T]) {
        let (h, w, wf) = (self.h, self.w, self.wf);
        let mut cols = vec![Complex::new(T::zero(), T::zero()); wf * h];
        for k in 0..h {
            for l in 0..wf {
                cols[l * h + k] = Complex::new(re[k * wf + l], im[k * wf + l]) * weights[l];
            }
        }
        self.col_inv.process(&mut cols);
        let mut rows = vec![Complex::new(T::zero(), T::zero()); h * w];
        for m in 0..h {
            for l in 0..wf {
                rows[m * w + l] = cols[l * h + m];
            }
        }
        self.row_inv.process(&mut rows);
        for (o, v) in out.iter_mut().zip(&rows) {
            *o = v.re * scale;
        }
    }

    /// Hermitian weights: interior bins stand for two conjugate bins.
    pub fn hermitian_weights(&self) -> Vec<T> {
        let two = T::one() + T::one();
        (0..self.wf)
            .map(|l| {
                if l == 0 || (self.w % 2 == 0 && l == self.w / 2) {
                    T::one()
                } else {
                    two
                }
            })
            .collect()
    }

    /// Exact inverse of [`HalfPlan::forward`].
    pub fn inverse(&self, re: &[T], im: &[T], out: &mut [T]) {
        let scale = T::one() / T::from(self.h * self.w).unwrap();
        self.synthesize(re, im, &self.hermitian_weights(), scale, out);
    }
}

/// Full complex 2-D transform of a real `h × w` plane.
pub(crate) struct FullPlan<T: Real> {
    pub h: usize,
    pub w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> FullPlan<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        FullPlan {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut cols = vec![Complex::new(T::zero(), T::zero()); h * w];
        for m in 0..h {
            for n in 0..w {
                cols[n * h + m] = buf[m * w + n];
            }
        }
        col.process(&mut cols);
        for m in 0..h {
            for n in 0..w {
                buf[m * w + n] = cols[n * h + m];
            }
        }
    }

    /// Unnormalized forward transform of a real plane.
    pub fn forward_complex(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform(&mut buf, false);
        buf
    }

    pub fn forward(&self, x: &[T], re: &mut [T], im: &mut [T]) {
        for ((v, r), i) in self.forward_complex(x).iter().zip(re).zip(im) {
            *r = v.re;
            *i = v.im;
        }
    }

    /// Adjoint of [`FullPlan::forward`]: `Re` of the unnormalized inverse.
    pub fn forward_adjoint(&self, g_re: &[T], g_im: &[T], out: &mut [T]) {
        let mut buf: Vec<Complex<T>> = g_re.iter().zip(g_im).map(|(&r, &i)| Complex::new(r, i)).collect();
        self.transform(&mut buf, true);
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re;
        }
    }
}
