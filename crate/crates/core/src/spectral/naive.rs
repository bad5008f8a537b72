//! Direct-summation DFT, the reference the fast transforms are checked against.

use ndarray::Array3;

use super::{half_width, HalfSpectrum, Real};
use crate::error::{shape_err, Result};

/// Largest side accepted by the `O(h²w²)` reference transforms.
pub const NAIVE_DFT_MAX_SIDE: usize = 32;

fn guard(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h > NAIVE_DFT_MAX_SIDE || w > NAIVE_DFT_MAX_SIDE {
        return Err(shape_err!(
            "naive DFT limited to 1..={NAIVE_DFT_MAX_SIDE} per side, got {h}x{w}"
        ));
    }
    Ok(())
}

/// `(re, im)` of `Σ_{m,n} x[m,n]·e^{−2πi(km/h + ln/w)}` for columns `0..cols`.
fn direct<T: Real>(feature: &Array3<T>, cols: usize) -> (Array3<T>, Array3<T>) {
    let (h, w, c) = feature.dim();
    let tau = T::from(std::f64::consts::TAU).unwrap();
    let mut re = Array3::zeros((h, cols, c));
    let mut im = Array3::zeros((h, cols, c));
    for ch in 0..c {
        for k in 0..h {
            for l in 0..cols {
                let (mut sr, mut si) = (T::zero(), T::zero());
                for m in 0..h {
                    for n in 0..w {
                        // Reduce the phase modulo one turn before scaling.
                        let turns = T::from((k * m) % h).unwrap() / T::from(h).unwrap()
                            + T::from((l * n) % w).unwrap() / T::from(w).unwrap();
                        let theta = tau * turns;
                        let x = feature[[m, n, ch]];
                        sr = sr + x * theta.cos();
                        si = si - x * theta.sin();
                    }
                }
                re[[k, l, ch]] = sr;
                im[[k, l, ch]] = si;
            }
        }
    }
    (re, im)
}

/// Half spectrum by direct summation.
pub fn naive_dft2<T: Real>(feature: &Array3<T>) -> Result<HalfSpectrum<T>> {
    let (h, w, _) = feature.dim();
    guard(h, w)?;
    let (re, im) = direct(feature, half_width(w));
    HalfSpectrum::new(re, im, w)
}

/// Full spectrum by direct summation, packed as `(h, w, 2c)` like
/// [`super::full_fft2_packed`].
pub fn naive_dft2_full<T: Real>(feature: &Array3<T>) -> Result<Array3<T>> {
    let (h, w, _) = feature.dim();
    guard(h, w)?;
    let (re, im) = direct(feature, w);
    Ok(ndarray::concatenate(ndarray::Axis(2), &[re.view(), im.view()]).expect("same shapes"))
}
