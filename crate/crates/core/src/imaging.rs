//! Image and mask containers, PNG I/O and resampling.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{s, Array2, Array3, Array4};

use crate::error::{invalid, shape_err, Error, Result};

/// `H × W × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(shape_err!("image must be HxWx3 and non-empty, got {h}x{w}x{c}"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image contains non-finite pixels".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        ImageTensor {
            data: Array3::from_shape_fn((height, width, 3), f),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |(_, _, c)| rgb[c])
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn clamped(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// `(1, 3, H, W)` copy.
    pub fn to_nchw(&self) -> Array4<f64> {
        self.data
            .view()
            .permuted_axes([2, 0, 1])
            .insert_axis(ndarray::Axis(0))
            .as_standard_layout()
            .into_owned()
    }

    /// Item `index` of a `(B, 3, H, W)` batch.
    pub fn from_nchw(batch: &Array4<f64>, index: usize) -> Result<Self> {
        if batch.shape()[1] != 3 {
            return Err(shape_err!("expected 3 channels, got {}", batch.shape()[1]));
        }
        Self::new(batch.slice(s![index, .., .., ..]).permuted_axes([1, 2, 0]).to_owned())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(ImageTensor {
            data: Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            }),
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let px = |c| (self.data[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Bilinear (triangle-filter) resampling.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width() as u32, self.height() as u32, |x, y| {
                let p = |c| self.data[[y as usize, x as usize, c]] as f32;
                Rgb([p(0), p(1), p(2)])
            });
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        ImageTensor {
            data: Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
                out.get_pixel(x as u32, y as u32)[c] as f64
            }),
        }
    }

    /// Reflection padding on the bottom and right edges.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<ImageTensor> {
        let padded = pad_reflect_hw(&self.data.view(), bottom, right)?;
        Ok(ImageTensor { data: padded })
    }

    pub fn crop(&self, height: usize, width: usize) -> ImageTensor {
        ImageTensor {
            data: self.data.slice(s![..height, ..width, ..]).to_owned(),
        }
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    // Mirror without repeating the edge sample: n=4 → 0 1 2 3 2 1 0 1 ...
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn pad_reflect_hw(data: &ndarray::ArrayView3<f64>, bottom: usize, right: usize) -> Result<Array3<f64>> {
    let (h, w, c) = data.dim();
    if h == 0 || w == 0 {
        return Err(invalid!("cannot pad an empty image"));
    }
    Ok(Array3::from_shape_fn((h + bottom, w + right, c), |(y, x, ch)| {
        data[[reflect_index(y, h), reflect_index(x, w), ch]]
    }))
}

/// Masks with values outside `{0, 1}` are rejected.
pub fn check_binary(mask: &Array2<f64>) -> Result<()> {
    if let Some(((y, x), v)) = mask.indexed_iter().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(invalid!("mask is not binary: value {v} at ({y}, {x})"));
    }
    Ok(())
}

/// Binarization rule shared by every mask resampling step.
pub const MASK_THRESHOLD: f64 = 0.5;

pub fn binarize(mask: &Array2<f64>) -> Array2<f64> {
    mask.mapv(|v| if v >= MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Loads an 8-bit mask PNG, mapping intensities ≥ 128 to 1.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] >= 128 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Writes a mask as 8-bit PNG, `0`/`255` for binary masks.
pub fn save_mask_png(mask: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(mask[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
    .save_with_format(path, image::ImageFormat::Png)
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resampling followed by re-binarization.
pub fn resize_mask(mask: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    if (h, w) == (height, width) {
        return binarize(mask);
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]] as f32]));
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    binarize(&Array2::from_shape_fn((height, width), |(y, x)| {
        out.get_pixel(x as u32, y as u32)[0] as f64
    }))
}

/// Reflection-pads a mask on the bottom and right edges.
pub fn pad_mask_reflect(mask: &Array2<f64>, bottom: usize, right: usize) -> Result<Array2<f64>> {
    let v = mask.view().insert_axis(ndarray::Axis(2));
    Ok(pad_reflect_hw(&v, bottom, right)?.remove_axis(ndarray::Axis(2)))
}

/// `(1, 1, H, W)` copy of a mask.
pub fn mask_to_nchw(mask: &Array2<f64>) -> Array4<f64> {
    mask.clone().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0))
}
