//! Procedural stand-in corpus: periodic-texture "paintings" and photos of
//! smoothly shaded shapes with their instance masks.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{save_mask_png, ImageTensor};

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Two superimposed oriented gratings with a hard-edged stripe component,
/// so the spectrum has a few strong off-center peaks.
pub fn painting(size: usize, rng: &mut impl Rng) -> ImageTensor {
    let a = random_color(rng);
    let b = random_color(rng);
    let period1 = rng.random_range(6.0..20.0);
    let period2 = rng.random_range(10.0..40.0);
    let theta1: f64 = rng.random_range(0.0..PI);
    let theta2: f64 = rng.random_range(0.0..PI);
    let square = rng.random_bool(0.5);
    ImageTensor::from_fn(size, size, |(y, x, c)| {
        let (y, x) = (y as f64, x as f64);
        let p1 = (2.0 * PI * (x * theta1.cos() + y * theta1.sin()) / period1).sin();
        let p1 = if square { p1.signum() } else { p1 };
        let p2 = (2.0 * PI * (x * theta2.cos() + y * theta2.sin()) / period2).sin();
        let t = (0.5 + 0.35 * p1 + 0.15 * p2).clamp(0.0, 1.0);
        a[c] * t + b[c] * (1.0 - t)
    })
}

/// A shaded ellipse, rectangle or triangle on a gradient backdrop. The
/// object's area is drawn from `[0.1, 0.25]` of the frame.
pub fn photo(size: usize, rng: &mut impl Rng) -> (ImageTensor, Array2<f64>) {
    let bg0 = random_color(rng);
    let bg1 = random_color(rng);
    let fg0 = random_color(rng);
    let fg1 = random_color(rng);
    let s = size as f64;
    let area = rng.random_range(0.1..0.25) * s * s;
    let aspect: f64 = rng.random_range(0.6..1.6);
    let cy = rng.random_range(0.35..0.65) * s;
    let cx = rng.random_range(0.35..0.65) * s;
    let kind = rng.random_range(0..3);
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        0 => {
            let ry = (area / PI * aspect).sqrt();
            let rx = area / PI / ry;
            Box::new(move |y, x| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0)
        }
        1 => {
            let hh = (area * aspect).sqrt() / 2.0;
            let hw = area / (4.0 * hh);
            Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
        }
        _ => {
            // isosceles triangle with apex up
            let h = (2.0 * area * aspect).sqrt();
            let half_base = area / h;
            let top = cy - h / 2.0;
            Box::new(move |y, x| {
                let t = (y - top) / h;
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * half_base
            })
        }
    };
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        if inside(y as f64 + 0.5, x as f64 + 0.5) {
            1.0
        } else {
            0.0
        }
    });
    let img = ImageTensor::from_fn(size, size, |(y, x, c)| {
        let (u, v) = (y as f64 / s, x as f64 / s);
        if mask[[y, x]] > 0.5 {
            fg0[c] * (1.0 - v) + fg1[c] * v
        } else {
            bg0[c] * (1.0 - u) + bg1[c] * u
        }
    });
    (img, mask)
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusLayout {
    pub photos: PathBuf,
    pub paintings: PathBuf,
}

/// Writes `photos/photo_NNN.png` with `photo_NNN.mask.png` and
/// `paintings/painting_NNN.png` under `dir`.
pub fn write_corpus(dir: &Path, photos: usize, paintings: usize, size: usize, seed: u64) -> Result<CorpusLayout> {
    let layout = CorpusLayout {
        photos: dir.join("photos"),
        paintings: dir.join("paintings"),
    };
    for d in [&layout.photos, &layout.paintings] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..photos {
        let (img, mask) = photo(size, &mut rng);
        img.save_png(layout.photos.join(format!("photo_{i:03}.png")))?;
        save_mask_png(&mask, layout.photos.join(format!("photo_{i:03}.mask.png")))?;
    }
    for i in 0..paintings {
        painting(size, &mut rng).save_png(layout.paintings.join(format!("painting_{i:03}.png")))?;
    }
    Ok(layout)
}
