//! Composite training samples: cut-and-paste construction, mask utilities,
//! manifests and seeded batch iteration.

mod build;
mod dataset;
mod manifest;
pub mod synth;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::imaging::{check_binary, resize_mask, ImageTensor, MASK_THRESHOLD};
use crate::tensor::Array;

pub use build::{build_manifest, BuildOptions, BuildSummary};
pub use dataset::{Batch, Dataset, EpochSampler, RngState, SamplerState};
pub use manifest::{Manifest, ManifestRecord, Split};

/// Accepted foreground ratio range for built samples.
pub const RATIO_RANGE: (f64, f64) = (0.05, 0.3);

/// Largest linear rescale applied to an object to bring its ratio into range.
/// Objects needing more are rejected.
pub const MAX_RESCALE: f64 = 1.5;

/// Rescaling aims this far inside the violated bound so that resampling does
/// not push the ratio back out.
const RESCALE_MARGIN: f64 = 0.02;

/// Fraction of foreground pixels.
pub fn foreground_ratio(mask: &Array2<f64>) -> Result<f64> {
    check_binary(mask)?;
    if mask.is_empty() {
        return Err(invalid!("empty mask"));
    }
    Ok(mask.sum() / mask.len() as f64)
}

/// Where and how the object was pasted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteGeometry {
    pub seed: u64,
    /// Linear scale applied to the object crop.
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: f64,
}

/// Composite image, background painting and binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub composite: ImageTensor,
    pub background: ImageTensor,
    pub mask: Array2<f64>,
    pub geometry: PasteGeometry,
}

impl CompositeSample {
    /// Resizes all three parts to `size × size`; the mask is re-binarized.
    pub fn resized(&self, size: usize) -> CompositeSample {
        CompositeSample {
            composite: self.composite.resize(size, size),
            background: self.background.resize(size, size),
            mask: resize_mask(&self.mask, size, size),
            geometry: self.geometry.clone(),
        }
    }
}

fn bounding_box(mask: &Array2<f64>) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v > 0.5 {
            bb = Some(match bb {
                None => (y, x, y, x),
                Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
            });
        }
    }
    bb
}

/// Cuts the object selected by `instance_mask` out of `photo` and pastes it
/// at a uniformly random position on `painting`.
///
/// The object is first scaled so that it covers the same fraction of the
/// painting as of the photo. If that fraction lies outside [`RATIO_RANGE`],
/// the object is rescaled toward the nearest bound by at most
/// [`MAX_RESCALE`] (or its reciprocal).
pub fn build_composite(
    photo: &ImageTensor,
    instance_mask: &Array2<f64>,
    painting: &ImageTensor,
    seed: u64,
) -> Result<CompositeSample> {
    let (ph, pw) = (photo.height(), photo.width());
    if instance_mask.dim() != (ph, pw) {
        return Err(shape_err!(
            "mask is {}x{} but photo is {ph}x{pw}",
            instance_mask.nrows(),
            instance_mask.ncols()
        ));
    }
    let raw_ratio = foreground_ratio(instance_mask)?;
    let (y0, x0, y1, x1) =
        bounding_box(instance_mask).ok_or_else(|| Error::Rejected("instance mask is empty".into()))?;
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    let (h, w) = (painting.height(), painting.width());

    let base = ((h * w) as f64 / (ph * pw) as f64).sqrt();
    let (lo, hi) = RATIO_RANGE;
    let adjust = if raw_ratio < lo {
        (lo * (1.0 + RESCALE_MARGIN) / raw_ratio).sqrt()
    } else if raw_ratio > hi {
        (hi * (1.0 - RESCALE_MARGIN) / raw_ratio).sqrt()
    } else {
        1.0
    };
    if !(1.0 / MAX_RESCALE..=MAX_RESCALE).contains(&adjust) {
        return Err(Error::Rejected(format!(
            "foreground ratio {raw_ratio:.4} needs a {adjust:.3}x rescale to reach [{lo}, {hi}]; limit is {MAX_RESCALE}x"
        )));
    }
    let scale = base * adjust;
    let oh = ((bh as f64 * scale).round() as usize).max(1);
    let ow = ((bw as f64 * scale).round() as usize).max(1);
    if oh > h || ow > w {
        return Err(Error::Rejected(format!(
            "scaled object {oh}x{ow} does not fit the {h}x{w} painting"
        )));
    }

    let crop_img = ImageTensor::new(photo.data().slice(s![y0..=y1, x0..=x1, ..]).to_owned())?;
    let crop_mask = instance_mask.slice(s![y0..=y1, x0..=x1]).to_owned();
    let obj = crop_img.resize(oh, ow);
    let obj_mask = resize_mask(&crop_mask, oh, ow);

    let ratio = obj_mask.sum() / (h * w) as f64;
    if !(lo..=hi).contains(&ratio) {
        return Err(Error::Rejected(format!(
            "foreground ratio {ratio:.4} after resampling is outside [{lo}, {hi}]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - oh);
    let left = rng.random_range(0..=w - ow);

    let mut composite = painting.data().clone();
    let mut mask = Array2::zeros((h, w));
    for ((y, x), &m) in obj_mask.indexed_iter() {
        if m >= MASK_THRESHOLD {
            mask[[top + y, left + x]] = 1.0;
            for c in 0..3 {
                composite[[top + y, left + x, c]] = obj.data()[[y, x, c]];
            }
        }
    }
    Ok(CompositeSample {
        composite: ImageTensor::new(composite)?,
        background: painting.clone(),
        mask,
        geometry: PasteGeometry {
            seed,
            scale,
            top,
            left,
            height: oh,
            width: ow,
            ratio,
        },
    })
}

/// Average-pools by `factor` in each direction, then thresholds at
/// [`MASK_THRESHOLD`].
pub fn pool_mask(mask: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid!("mask {h}x{w} is not divisible by pooling factor {factor}"));
    }
    let area = (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        let cell = mask.slice(s![y * factor..(y + 1) * factor, x * factor..(x + 1) * factor]);
        if cell.sum() / area >= MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    }))
}

/// Mask at encoder level `level` ∈ 1..=4, i.e. pooled by `2^(level−1)`.
pub fn downsample_mask(mask: &Array2<f64>, level: usize) -> Result<Array2<f64>> {
    if !(1..=4).contains(&level) {
        return Err(invalid!("mask level must be 1..=4, got {level}"));
    }
    pool_mask(mask, 1 << (level - 1))
}

/// [`pool_mask`] applied to every item of a `(B, 1, H, W)` batch.
pub fn pool_mask_batch(masks: &Array, factor: usize) -> Result<Array> {
    let [b, c, h, w] = [masks.shape()[0], masks.shape()[1], masks.shape()[2], masks.shape()[3]];
    if c != 1 {
        return Err(shape_err!("mask batch must have one channel, got {c}"));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(invalid!("mask {h}x{w} is not divisible by pooling factor {factor}"));
    }
    let mut out = Array::zeros((b, 1, h / factor, w / factor));
    for bi in 0..b {
        let pooled = pool_mask(&masks.slice(s![bi, 0, .., ..]).to_owned(), factor)?;
        out.slice_mut(s![bi, 0, .., ..]).assign(&pooled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_mask(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            if (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn ratio_of_simple_masks() {
        assert_eq!(foreground_ratio(&Array2::ones((16, 16))).unwrap(), 1.0);
        assert_eq!(foreground_ratio(&Array2::zeros((16, 16))).unwrap(), 0.0);
        assert_eq!(foreground_ratio(&block_mask(32, 32, 3, 5, 8, 8)).unwrap(), 0.0625);
        assert!(foreground_ratio(&Array2::from_elem((2, 2), 0.3)).is_err());
    }

    #[test]
    fn paste_preserves_background_and_is_deterministic() {
        let photo = ImageTensor::from_fn(64, 64, |(y, x, c)| ((y + x + c) % 7) as f64 / 7.0);
        let painting = ImageTensor::from_fn(64, 64, |(y, _, c)| ((y / 4 + c) % 2) as f64);
        // 10% object
        let mask = block_mask(64, 64, 10, 10, 16, 25);
        let a = build_composite(&photo, &mask, &painting, 7).unwrap();
        let b = build_composite(&photo, &mask, &painting, 7).unwrap();
        assert_eq!(a, b);
        for ((y, x), &m) in a.mask.indexed_iter() {
            if m == 0.0 {
                for c in 0..3 {
                    assert_eq!(a.composite.data()[[y, x, c]], painting.data()[[y, x, c]]);
                }
            }
        }
        assert!((a.geometry.ratio - 400.0 / 4096.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_object_is_rejected() {
        let photo = ImageTensor::filled(100, 100, [0.5; 3]);
        let painting = ImageTensor::filled(100, 100, [0.1; 3]);
        let mask = block_mask(100, 100, 40, 40, 10, 20);
        assert!(matches!(
            build_composite(&photo, &mask, &painting, 0),
            Err(Error::Rejected(_))
        ));
    }

    #[test]
    fn oversized_object_is_shrunk_into_range() {
        let photo = ImageTensor::filled(64, 64, [0.5; 3]);
        let painting = ImageTensor::filled(64, 64, [0.1; 3]);
        let mask = block_mask(64, 64, 0, 0, 40, 40);
        let s = build_composite(&photo, &mask, &painting, 3).unwrap();
        assert!(s.geometry.ratio <= RATIO_RANGE.1);
        assert!(s.geometry.scale < 1.0);
    }

    #[test]
    fn pooling_levels() {
        let full = Array2::ones((256, 256));
        assert!(downsample_mask(&full, 4).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(downsample_mask(&full, 4).unwrap().dim(), (32, 32));

        let left = Array2::from_shape_fn((256, 256), |(_, x)| if x < 128 { 1.0 } else { 0.0 });
        let l2 = downsample_mask(&left, 2).unwrap();
        assert_eq!(l2, Array2::from_shape_fn((128, 128), |(_, x)| if x < 64 { 1.0 } else { 0.0 }));

        let checker = Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 2) as f64);
        for level in 2..=4 {
            assert!(downsample_mask(&checker, level).unwrap().iter().all(|&v| v == 1.0));
        }
        assert!(downsample_mask(&Array2::ones((6, 6)), 3).is_err());
    }

    #[test]
    fn pooling_is_idempotent_at_target_resolution() {
        let m = block_mask(8, 8, 1, 2, 3, 4);
        assert_eq!(downsample_mask(&m, 1).unwrap(), m);
    }
}
