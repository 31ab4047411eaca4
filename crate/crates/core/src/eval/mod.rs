//! Luminance PSNR/SSIM, benchmark-directory evaluation, and dihedral
//! self-ensembling.

mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::arch::{ArchError, Msfin};
use crate::image::{
    degrade, dihedral_tensor, rgb_to_ycbcr_y, save_png, ColorSpace, Dihedral, ImageError, PlanarImage,
};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, TensorError};

pub use report::{ImageScore, MetricReport};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("shave {shave} leaves nothing of a {h}x{w} image")]
    Shave { shave: usize, h: usize, w: usize },
    #[error("{h}x{w} plane smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    WindowTooLarge { h: usize, w: usize },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Shaved luminance planes of both images.
fn luma_pair(sr: &PlanarImage, hr: &PlanarImage, shave: usize) -> Result<(PlanarImage, PlanarImage)> {
    if (sr.height(), sr.width()) != (hr.height(), hr.width()) {
        return Err(EvalError::SizeMismatch(sr.height(), sr.width(), hr.height(), hr.width()));
    }
    let (h, w) = (hr.height(), hr.width());
    if 2 * shave >= h || 2 * shave >= w {
        return Err(EvalError::Shave { shave, h, w });
    }
    let cut = |img: &PlanarImage| -> Result<PlanarImage> {
        Ok(rgb_to_ycbcr_y(img)?.crop(shave, shave, h - 2 * shave, w - 2 * shave)?)
    };
    Ok((cut(sr)?, cut(hr)?))
}

/// PSNR in dB of the Y channel after shaving `shave` border pixels, for a
/// peak value of 1. Identical images give `f64::INFINITY`.
pub fn psnr_y(sr: &PlanarImage, hr: &PlanarImage, shave: usize) -> Result<f64> {
    let (a, b) = luma_pair(sr, hr, shave)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1-D Gaussian; the 2-D SSIM window is its outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering with the Gaussian window.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the Y channel over all valid 11x11 Gaussian windows, after
/// shaving `shave` border pixels.
pub fn ssim_y(sr: &PlanarImage, hr: &PlanarImage, shave: usize) -> Result<f64> {
    let (a, b) = luma_pair(sr, hr, shave)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::WindowTooLarge { h, w });
    }
    let g = gaussian_window();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..x.len()).map(f).collect() };
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let mxx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &g);
    let myy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &g);
    let mxy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &g);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Averages `f` over the eight dihedral transforms of `input`, undoing each
/// transform on the corresponding output.
pub fn self_ensemble<T, E, F>(input: &Tensor<T>, mut f: F) -> Result<Tensor<T>, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>, E>,
{
    let mut acc: Vec<f64> = Vec::new();
    let mut shape = None;
    for d in Dihedral::all() {
        let out = dihedral_tensor(&f(&dihedral_tensor(input, d))?, d.inverse());
        match shape {
            None => {
                shape = Some(out.shape());
                acc = out.data().iter().map(|v| v.as_f64()).collect();
            }
            Some(s) if s == out.shape() => acc.iter_mut().zip(out.data()).for_each(|(a, v)| *a += v.as_f64()),
            Some(s) => {
                return Err(TensorError::ShapeMismatch {
                    op: "self_ensemble",
                    a: s,
                    b: out.shape(),
                }
                .into())
            }
        }
    }
    let shape = shape.expect("eight transforms");
    Ok(Tensor::new(shape, acc.into_iter().map(|v| T::from_f64(v / 8.0)).collect())?)
}

/// Network output for a pre-upsampled batch, optionally self-ensembled.
pub fn super_resolve<T: Scalar>(
    net: &Msfin,
    store: &ParamStore<T>,
    lr_up: &Tensor<T>,
    ensemble: bool,
) -> Result<Tensor<T>, ArchError> {
    let tape = Tape::inference();
    if ensemble {
        self_ensemble(lr_up, |x| net.forward(&tape, store, x))
    } else {
        net.forward(&tape, store, lr_up)
    }
}

/// Super-resolves a pre-upsampled image and clamps the result.
pub fn super_resolve_image<T: Scalar>(
    net: &Msfin,
    store: &ParamStore<T>,
    lr_up: &PlanarImage,
    ensemble: bool,
) -> Result<PlanarImage> {
    let out = super_resolve(net, store, &lr_up.to_tensor::<T>(), ensemble)?;
    Ok(PlanarImage::from_tensor(&out, 0, ColorSpace::Rgb)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub scale: usize,
    pub shave: usize,
    pub ensemble: bool,
    /// Directory for SR PNGs, named after their HR source.
    pub save_sr: Option<PathBuf>,
}

impl EvalOptions {
    /// Shave equal to the scale, no ensemble, nothing saved.
    pub fn new(scale: usize) -> Self {
        Self {
            scale,
            shave: scale,
            ensemble: false,
            save_sr: None,
        }
    }
}

/// Degrades each HR image, restores it with `restore` (which receives the
/// pre-upsampled LR image), and scores the clamped result.
pub fn evaluate_with(
    names: &[String],
    images: &[PlanarImage],
    opts: &EvalOptions,
    mut restore: impl FnMut(&PlanarImage) -> Result<PlanarImage>,
) -> Result<MetricReport> {
    if let Some(dir) = &opts.save_sr {
        std::fs::create_dir_all(dir).map_err(|source| ImageError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut entries = Vec::with_capacity(images.len());
    for (name, img) in names.iter().zip(images) {
        let d = degrade(img, opts.scale)?;
        let sr = restore(&d.lr_up)?.clamped();
        if let Some(dir) = &opts.save_sr {
            save_png(&sr, dir.join(name))?;
        }
        entries.push(ImageScore {
            name: name.clone(),
            psnr: psnr_y(&sr, &d.hr, opts.shave)?,
            ssim: ssim_y(&sr, &d.hr, opts.shave)?,
        });
    }
    Ok(MetricReport::new(entries, opts))
}

/// Bicubic baseline: the pre-upsampled LR image itself.
pub fn evaluate_bicubic(names: &[String], images: &[PlanarImage], opts: &EvalOptions) -> Result<MetricReport> {
    evaluate_with(names, images, opts, |lr_up| Ok(lr_up.clone()))
}

/// Evaluates a network on in-memory HR images.
pub fn evaluate_images<T: Scalar>(
    net: &Msfin,
    store: &ParamStore<T>,
    names: &[String],
    images: &[PlanarImage],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    evaluate_with(names, images, opts, |lr_up| {
        super_resolve_image(net, store, lr_up, opts.ensemble)
    })
}

/// Evaluates a network on every PNG in `hr_dir`.
pub fn evaluate_dir<T: Scalar>(
    net: &Msfin,
    store: &ParamStore<T>,
    hr_dir: impl AsRef<Path>,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let ds = crate::image::Dataset::load(hr_dir)?;
    evaluate_images(net, store, &ds.names, &ds.hr, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl Fn(usize, usize, usize) -> f64) -> PlanarImage {
        PlanarImage::from_fn(ColorSpace::Rgb, 16, 16, f).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(|_, y, x| 0.2 + 0.01 * ((y + x) % 5) as f64);
        assert_eq!(psnr_y(&a, &a, 0).unwrap(), f64::INFINITY);
        // A uniform RGB offset d moves Y by d * 219/255.
        let d = 0.1 * 255.0 / 219.0;
        let b = img(|c, y, x| a.get(c, y, x) + d);
        assert!((psnr_y(&a, &b, 2).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let a = img(|_, y, x| ((y / 2 + x / 3) % 2) as f64);
        assert!((ssim_y(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
        let b = img(|c, y, x| 1.0 - a.get(c, y, x));
        assert!(ssim_y(&a, &b, 0).unwrap() < -0.5);
    }

    #[test]
    fn window_and_shave_errors() {
        let a = img(|_, _, _| 0.5);
        assert!(matches!(ssim_y(&a, &a, 3), Err(EvalError::WindowTooLarge { .. })));
        assert!(matches!(psnr_y(&a, &a, 8), Err(EvalError::Shave { .. })));
        let small = PlanarImage::from_fn(ColorSpace::Rgb, 8, 16, |_, _, _| 0.5).unwrap();
        assert!(matches!(psnr_y(&a, &small, 0), Err(EvalError::SizeMismatch(..))));
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn ensemble_of_identity_is_identity() {
        let t = Tensor::from_fn(crate::tensor::Shape::new(1, 2, 3, 5), |_, c, y, x| (c * 15 + y * 5 + x) as f64);
        let out = self_ensemble::<f64, TensorError, _>(&t, |x| Ok(x.clone())).unwrap();
        assert_eq!(out, t);
    }
}
