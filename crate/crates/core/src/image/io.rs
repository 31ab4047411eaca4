use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageReader};

use super::{ColorSpace, ImageError, PlanarImage, Result};

fn planar_from_interleaved<S: Copy>(raw: &[S], h: usize, w: usize, scale: f64, to_f64: impl Fn(S) -> f64) -> Result<PlanarImage> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = to_f64(px[c]) / scale;
        }
    }
    PlanarImage::new(ColorSpace::Rgb, h, w, data)
}

/// Loads an 8- or 16-bit PNG (gray, gray+alpha, RGB or RGBA) as RGB in
/// [0, 1]. Alpha is dropped; gray is replicated.
pub fn load_png(path: impl AsRef<Path>) -> Result<PlanarImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let img = reader.decode().map_err(|source| ImageError::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            planar_from_interleaved(img.into_rgb8().as_raw(), h, w, 255.0, f64::from)
        }
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            planar_from_interleaved(img.into_rgb16().as_raw(), h, w, 65535.0, f64::from)
        }
        other => Err(ImageError::UnsupportedDepth {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

fn interleave<S>(img: &PlanarImage, max: f64, cast: impl Fn(f64) -> S) -> Vec<S> {
    let plane = img.height() * img.width();
    let c = img.channels();
    let mut out = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push(cast((img.data()[ch * plane + i].clamp(0.0, 1.0) * max).round()));
        }
    }
    out
}

fn save(path: &Path, bytes: &[u8], img: &PlanarImage, color: ExtendedColorType) -> Result<()> {
    image::save_buffer_with_format(
        path,
        bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImageError::Codec {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes an 8-bit PNG. Y images are written as grayscale; YCbCr samples
/// are written as-is.
pub fn save_png(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes = interleave(img, 255.0, |v| v as u8);
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    save(path.as_ref(), &bytes, img, color)
}

/// Writes a 16-bit PNG.
pub fn save_png16(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    let samples = interleave(img, 65535.0, |v| v as u16);
    // PNG stores 16-bit samples big-endian; the encoder expects native order.
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_ne_bytes()).collect();
    let color = if img.channels() == 1 {
        ExtendedColorType::L16
    } else {
        ExtendedColorType::Rgb16
    };
    save(path.as_ref(), &bytes, img, color)
}
