//! Fourier-domain primitives shared by the generator, the discriminator and
//! the frequency-map visualization.
//!
//! Conventions:
//!
//! * Feature maps are `(h, w, c)` arrays; each channel is transformed
//!   independently.
//! * The forward transform is unnormalized and the inverse carries the
//!   `1/(h·w)` factor.
//! * Real transforms keep `⌊w/2⌋ + 1` columns, which includes the Nyquist
//!   column for even widths, so the original width must travel with the
//!   spectrum for the inverse to be exact.

mod autodiff;
mod naive;
mod plan;

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use num_traits::Float;

use crate::error::{shape_err, Error, Result};
use crate::imaging::ImageTensor;

pub use naive::{naive_dft2, naive_dft2_full, NAIVE_DFT_MAX_SIDE};
pub(crate) use plan::{FullPlan, HalfPlan};

/// Floating-point types the transforms are available for.
pub trait Real: rustfft::FftNum + Float {}

impl<T: rustfft::FftNum + Float> Real for T {}

/// Additive stabilizer inside the logarithm of [`log_magnitude_map`].
pub const LOG_EPSILON: f64 = 1e-8;

/// Number of non-redundant columns of a real signal of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Complex half spectrum of a real `(h, w, c)` feature map, stored as
/// separate real and imaginary `(h, ⌊w/2⌋ + 1, c)` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpectrum<T = f64> {
    real: Array3<T>,
    imag: Array3<T>,
    original_width: usize,
}

impl<T: Real> HalfSpectrum<T> {
    pub fn new(real: Array3<T>, imag: Array3<T>, original_width: usize) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(shape_err!(
                "real part {:?} and imaginary part {:?} differ",
                real.shape(),
                imag.shape()
            ));
        }
        if original_width == 0 || real.shape()[1] != half_width(original_width) {
            return Err(shape_err!(
                "spectrum has {} columns but original width {original_width} implies {}",
                real.shape()[1],
                half_width(original_width)
            ));
        }
        Ok(HalfSpectrum {
            real,
            imag,
            original_width,
        })
    }

    pub fn real(&self) -> &Array3<T> {
        &self.real
    }

    pub fn imag(&self) -> &Array3<T> {
        &self.imag
    }

    pub fn original_width(&self) -> usize {
        self.original_width
    }

    /// `(h, ⌊w/2⌋ + 1, c)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.real.dim()
    }

    /// `|X|` at `(row, column, channel)`.
    pub fn magnitude(&self, k: usize, l: usize, c: usize) -> T {
        self.real[[k, l, c]].hypot(self.imag[[k, l, c]])
    }
}

/// Half spectrum with real and imaginary parts stacked along channels:
/// the first `c` channels are real parts, the last `c` imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSpectrum<T = f64> {
    data: Array3<T>,
    original_width: usize,
}

impl<T: Real> PackedSpectrum<T> {
    pub fn new(data: Array3<T>, original_width: usize) -> Result<Self> {
        if data.shape()[2] % 2 != 0 {
            return Err(shape_err!(
                "packed spectrum needs an even channel count, got {}",
                data.shape()[2]
            ));
        }
        if original_width == 0 || data.shape()[1] != half_width(original_width) {
            return Err(shape_err!(
                "packed spectrum has {} columns but original width {original_width} implies {}",
                data.shape()[1],
                half_width(original_width)
            ));
        }
        Ok(PackedSpectrum { data, original_width })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn original_width(&self) -> usize {
        self.original_width
    }
}

/// Stacks real and imaginary parts channel-wise.
pub fn pack<T: Real>(spectrum: &HalfSpectrum<T>) -> PackedSpectrum<T> {
    let data = ndarray::concatenate(Axis(2), &[spectrum.real.view(), spectrum.imag.view()])
        .expect("real and imaginary parts share a shape");
    PackedSpectrum {
        data,
        original_width: spectrum.original_width,
    }
}

/// Splits a packed spectrum back into its complex parts.
pub fn unpack<T: Real>(packed: &PackedSpectrum<T>) -> Result<HalfSpectrum<T>> {
    let c2 = packed.data.shape()[2];
    if c2 % 2 != 0 {
        return Err(shape_err!("cannot unpack an odd channel count ({c2})"));
    }
    let c = c2 / 2;
    HalfSpectrum::new(
        packed.data.slice(s![.., .., ..c]).to_owned(),
        packed.data.slice(s![.., .., c..]).to_owned(),
        packed.original_width,
    )
}

fn check_feature<T: Real>(feature: &ArrayView3<T>) -> Result<()> {
    let (h, w, c) = feature.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(shape_err!("empty feature map {h}x{w}x{c}"));
    }
    if let Some(pos) = feature.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(p, _)| p) {
        return Err(Error::NonFinite(format!("feature map entry {pos:?} is not finite")));
    }
    Ok(())
}

fn channel_plane<T: Real>(feature: &ArrayView3<T>, c: usize) -> Vec<T> {
    feature.index_axis(Axis(2), c).iter().copied().collect()
}

/// Real 2-D DFT of each channel, keeping the non-redundant half along width.
pub fn rfft2<T: Real>(feature: &Array3<T>) -> Result<HalfSpectrum<T>> {
    let view = feature.view();
    check_feature(&view)?;
    let (h, w, c) = feature.dim();
    let plan = HalfPlan::<T>::new(h, w);
    let wf = plan.wf;
    let mut real = Array3::zeros((h, wf, c));
    let mut imag = Array3::zeros((h, wf, c));
    let mut re = vec![T::zero(); h * wf];
    let mut im = vec![T::zero(); h * wf];
    for ch in 0..c {
        plan.forward(&channel_plane(&view, ch), &mut re, &mut im);
        real.index_axis_mut(Axis(2), ch)
            .assign(&Array2::from_shape_vec((h, wf), re.clone()).unwrap());
        imag.index_axis_mut(Axis(2), ch)
            .assign(&Array2::from_shape_vec((h, wf), im.clone()).unwrap());
    }
    HalfSpectrum::new(real, imag, w)
}

/// Inverse of [`rfft2`]; the output width is the spectrum's original width.
pub fn irfft2<T: Real>(spectrum: &HalfSpectrum<T>) -> Result<Array3<T>> {
    let (h, wf, c) = spectrum.dim();
    let w = spectrum.original_width;
    if wf != half_width(w) {
        return Err(shape_err!("spectrum width {wf} inconsistent with original width {w}"));
    }
    let plan = HalfPlan::<T>::new(h, w);
    let mut out = Array3::zeros((h, w, c));
    let mut plane = vec![T::zero(); h * w];
    for ch in 0..c {
        let re = channel_plane(&spectrum.real.view(), ch);
        let im = channel_plane(&spectrum.imag.view(), ch);
        plan.inverse(&re, &im, &mut plane);
        out.index_axis_mut(Axis(2), ch)
            .assign(&Array2::from_shape_vec((h, w), plane.clone()).unwrap());
    }
    Ok(out)
}

/// Full (both positive and negative frequencies) 2-D DFT of a square
/// `(p, p, c)` patch, real parts then imaginary parts: `(p, p, 2c)`.
pub fn full_fft2_packed<T: Real>(feature: &Array3<T>) -> Result<Array3<T>> {
    let view = feature.view();
    check_feature(&view)?;
    let (h, w, c) = feature.dim();
    if h != w {
        return Err(shape_err!("full_fft2_packed expects a square patch, got {h}x{w}"));
    }
    let plan = FullPlan::<T>::new(h, w);
    let mut out = Array3::zeros((h, w, 2 * c));
    let mut re = vec![T::zero(); h * w];
    let mut im = vec![T::zero(); h * w];
    for ch in 0..c {
        plan.forward(&channel_plane(&view, ch), &mut re, &mut im);
        out.index_axis_mut(Axis(2), ch)
            .assign(&Array2::from_shape_vec((h, w), re.clone()).unwrap());
        out.index_axis_mut(Axis(2), c + ch)
            .assign(&Array2::from_shape_vec((h, w), im.clone()).unwrap());
    }
    Ok(out)
}

/// Centered log-magnitude spectrum of an image's luminance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMap {
    data: Array2<f64>,
}

impl FrequencyMap {
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Row/column of the zero frequency after centering.
    pub fn center(&self) -> (usize, usize) {
        let (h, w) = self.data.dim();
        (h / 2, w / 2)
    }

    /// Min-max normalized to `[0, 1]`; a flat map normalizes to zeros.
    pub fn normalized(&self) -> Array2<f64> {
        let lo = self.data.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = self.data.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let span = hi - lo;
        if span <= 0.0 {
            return Array2::zeros(self.data.raw_dim());
        }
        self.data.mapv(|v| (v - lo) / span)
    }

    /// 8-bit grayscale rendering of [`FrequencyMap::normalized`].
    pub fn to_gray8(&self) -> image::GrayImage {
        let (h, w) = self.data.dim();
        let norm = self.normalized();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([(norm[[y as usize, x as usize]] * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Rec. 601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `log(ε + |FFT(luma)|)` with the zero frequency shifted to the center.
pub fn log_magnitude_map(image: &ImageTensor) -> FrequencyMap {
    let (h, w) = (image.height(), image.width());
    let luma: Vec<f64> = image
        .data()
        .outer_iter()
        .flat_map(|row| {
            row.outer_iter()
                .map(|px| px[0] * LUMA_WEIGHTS[0] + px[1] * LUMA_WEIGHTS[1] + px[2] * LUMA_WEIGHTS[2])
                .collect::<Vec<_>>()
        })
        .collect();
    let spectrum = FullPlan::<f64>::new(h, w).forward_complex(&luma);
    let mut data = Array2::zeros((h, w));
    for k in 0..h {
        for l in 0..w {
            let v = spectrum[k * w + l];
            data[[(k + h / 2) % h, (l + w / 2) % w]] = (LOG_EPSILON + v.norm()).ln();
        }
    }
    FrequencyMap { data }
}
