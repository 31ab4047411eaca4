//! Image ingestion, color conversion, bicubic resampling, and training patch
//! sampling.

mod geom;
mod io;
mod patch;
mod resize;

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Scalar, Shape, Tensor};

pub use geom::{dihedral_tensor, Dihedral};
pub use io::{load_png, save_png, save_png16};
pub use patch::{sample_patch_pair, Dataset, PatchPair, Provenance};
pub use resize::{bicubic_resize, cubic_kernel, resize_plane, resize_plane_unclamped, KEYS_A};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        source: ::image::ImageError,
    },
    #[error("{path}: unsupported sample format {format}")]
    UnsupportedDepth { path: PathBuf, format: String },
    #[error("invalid image dimensions: {0}")]
    Dimensions(String),
    #[error("expected {expected} image, got {got}")]
    ColorSpace { expected: ColorSpace, got: ColorSpace },
    #[error("image {h}x{w} smaller than required {need}x{need}")]
    TooSmall { h: usize, w: usize, need: usize },
    #[error("no PNG images in {0}")]
    EmptyDir(PathBuf),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    /// Luminance only.
    Y,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Y => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::YCbCr => "YCbCr",
            ColorSpace::Y => "Y",
        })
    }
}

/// Channel-planar floating-point image with samples in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    space: ColorSpace,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PlanarImage {
    pub fn new(space: ColorSpace, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImageError::Dimensions(format!("{height}x{width}")));
        }
        if data.len() != space.channels() * height * width {
            return Err(ImageError::Dimensions(format!(
                "{} samples for {space} {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            space,
            height,
            width,
            data,
        })
    }

    /// Builds an image from `f(channel, y, x)`.
    pub fn from_fn(
        space: ColorSpace,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(space.channels() * height * width);
        for c in 0..space.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(space, height, width, data)
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }
    pub fn channels(&self) -> usize {
        self.space.channels()
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Top-left aligned window.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || y0 + height > self.height || x0 + width > self.width {
            return Err(ImageError::Dimensions(format!(
                "crop {height}x{width}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(self.space, height, width, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    /// Crops both extents down to multiples of `m` (benchmark "modcrop").
    pub fn mod_crop(&self, m: usize) -> Result<Self> {
        let (h, w) = (self.height - self.height % m, self.width - self.width % m);
        self.crop(0, 0, h, w)
    }

    /// (1, C, H, W) tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            Shape::new(1, self.channels(), self.height, self.width),
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("consistent dimensions")
    }

    /// Reads batch item `n` of a tensor as an image in `space`, clamping to
    /// [0, 1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize, space: ColorSpace) -> Result<Self> {
        let s = t.shape();
        if s.c() != space.channels() || n >= s.n() {
            return Err(ImageError::Dimensions(format!(
                "tensor {s} item {n} is not a {space} image"
            )));
        }
        let per = s.c() * s.plane();
        let data = t.data()[n * per..(n + 1) * per]
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0))
            .collect();
        Self::new(space, s.h(), s.w(), data)
    }
}

/// An HR image cropped to a multiple of the scale, its bicubic LR
/// counterpart, and the LR image upsampled back to HR size.
#[derive(Debug, Clone)]
pub struct Degraded {
    pub hr: PlanarImage,
    pub lr: PlanarImage,
    pub lr_up: PlanarImage,
}

/// Bicubic degradation by `scale` followed by bicubic pre-upsampling.
pub fn degrade(hr: &PlanarImage, scale: usize) -> Result<Degraded> {
    if scale == 0 || hr.height() < scale || hr.width() < scale {
        return Err(ImageError::TooSmall {
            h: hr.height(),
            w: hr.width(),
            need: scale.max(1),
        });
    }
    let hr = hr.mod_crop(scale)?;
    let lr = bicubic_resize(&hr, hr.height() / scale, hr.width() / scale, true)?;
    let lr_up = upsample(&lr, scale)?;
    Ok(Degraded { hr, lr, lr_up })
}

/// Bicubic pre-upsampling of an LR image by `scale`.
pub fn upsample(lr: &PlanarImage, scale: usize) -> Result<PlanarImage> {
    bicubic_resize(lr, lr.height() * scale, lr.width() * scale, true)
}

/// Studio-range BT.601 luminance, in [16/255, 235/255] for inputs in [0, 1].
pub fn luma_bt601(r: f64, g: f64, b: f64) -> f64 {
    (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
}

/// Luminance plane of an RGB image.
pub fn rgb_to_ycbcr_y(img: &PlanarImage) -> Result<PlanarImage> {
    match img.space {
        ColorSpace::Rgb => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let data = (0..r.len()).map(|i| luma_bt601(r[i], g[i], b[i])).collect();
            PlanarImage::new(ColorSpace::Y, img.height, img.width, data)
        }
        ColorSpace::YCbCr => PlanarImage::new(ColorSpace::Y, img.height, img.width, img.plane(0).to_vec()),
        ColorSpace::Y => Ok(img.clone()),
    }
}

/// Full studio-range BT.601 conversion.
pub fn rgb_to_ycbcr(img: &PlanarImage) -> Result<PlanarImage> {
    if img.space != ColorSpace::Rgb {
        return Err(ImageError::ColorSpace {
            expected: ColorSpace::Rgb,
            got: img.space,
        });
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let n = r.len();
    let mut data = Vec::with_capacity(3 * n);
    data.extend((0..n).map(|i| luma_bt601(r[i], g[i], b[i])));
    data.extend((0..n).map(|i| (-37.797 * r[i] - 74.203 * g[i] + 112.0 * b[i] + 128.0) / 255.0));
    data.extend((0..n).map(|i| (112.0 * r[i] - 93.786 * g[i] - 18.214 * b[i] + 128.0) / 255.0));
    PlanarImage::new(ColorSpace::YCbCr, img.height, img.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> PlanarImage {
        PlanarImage::from_fn(ColorSpace::Rgb, 2, 2, |_, _, _| v).unwrap()
    }

    #[test]
    fn luminance_reference_points() {
        let y = |v| rgb_to_ycbcr_y(&flat(v)).unwrap().data()[0];
        assert!((y(0.0) - 16.0 / 255.0).abs() < 1e-12);
        assert!((y(1.0) - 235.0 / 255.0).abs() < 1e-12);
        assert!((y(0.5) - 125.5 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn luminance_of_y_is_identity_and_ycbcr_needs_rgb() {
        let g = rgb_to_ycbcr_y(&flat(0.3)).unwrap();
        assert_eq!(rgb_to_ycbcr_y(&g).unwrap(), g);
        assert!(matches!(rgb_to_ycbcr(&g), Err(ImageError::ColorSpace { .. })));
        let ycc = rgb_to_ycbcr(&flat(0.5)).unwrap();
        assert!((ycc.get(1, 0, 0) - 0.5 * 256.0 / 255.0).abs() < 1e-3);
    }

    #[test]
    fn tensor_round_trip() {
        let img = PlanarImage::from_fn(ColorSpace::Rgb, 3, 5, |c, y, x| (c + y * 5 + x) as f64 / 30.0).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape(), Shape::new(1, 3, 3, 5));
        assert_eq!(PlanarImage::from_tensor(&t, 0, ColorSpace::Rgb).unwrap(), img);
    }

    #[test]
    fn mod_crop_trims_to_multiple() {
        let img = PlanarImage::from_fn(ColorSpace::Y, 10, 7, |_, y, x| (y * 7 + x) as f64 / 70.0).unwrap();
        let c = img.mod_crop(4).unwrap();
        assert_eq!((c.height(), c.width()), (8, 4));
        assert_eq!(c.get(0, 1, 1), img.get(0, 1, 1));
    }
}
