use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bicubic_resize, load_png, Dihedral, ImageError, PlanarImage, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Where a training patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub image: usize,
    /// Top-left corner in the HR image, a multiple of the scale.
    pub y: usize,
    pub x: usize,
    pub transform: Dihedral,
}

/// A bicubic-upsampled LR patch and its HR target, both
/// `scale * lr_patch` pixels square.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub lr_up: PlanarImage,
    pub hr: PlanarImage,
    pub provenance: Provenance,
}

impl PatchPair {
    /// Stacks patches into `(input, target)` batches.
    pub fn batch<T: Scalar>(pairs: &[PatchPair]) -> (Tensor<T>, Tensor<T>) {
        let inputs: Vec<_> = pairs.iter().map(|p| p.lr_up.to_tensor()).collect();
        let targets: Vec<_> = pairs.iter().map(|p| p.hr.to_tensor()).collect();
        (
            Tensor::stack(&inputs).expect("equal patch sizes"),
            Tensor::stack(&targets).expect("equal patch sizes"),
        )
    }
}

/// Crops a scale-aligned HR window, derives its LR counterpart (bicubic
/// downsampling unless `lr` is given), applies one random dihedral transform
/// to both, and upsamples the LR patch back to HR size.
pub fn sample_patch_pair(
    hr: &PlanarImage,
    lr: Option<&PlanarImage>,
    image: usize,
    scale: usize,
    lr_patch: usize,
    rng: &mut impl Rng,
) -> Result<PatchPair> {
    let size = scale * lr_patch;
    if hr.height() < size || hr.width() < size {
        return Err(ImageError::TooSmall {
            h: hr.height(),
            w: hr.width(),
            need: size,
        });
    }
    let y = rng.random_range(0..=(hr.height() - size) / scale) * scale;
    let x = rng.random_range(0..=(hr.width() - size) / scale) * scale;
    let transform = Dihedral::new(rng.random_range(0..8));
    let hr_crop = hr.crop(y, x, size, size)?;
    let lr_crop = match lr {
        Some(l) => l.crop(y / scale, x / scale, lr_patch, lr_patch)?,
        None => bicubic_resize(&hr_crop, lr_patch, lr_patch, true)?,
    };
    let lr_up = bicubic_resize(&lr_crop.dihedral(transform), size, size, true)?;
    Ok(PatchPair {
        lr_up,
        hr: hr_crop.dihedral(transform),
        provenance: Provenance {
            image,
            y,
            x,
            transform,
        },
    })
}

/// HR training images, optionally paired with pre-made LR images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub hr: Vec<PlanarImage>,
    pub lr: Option<Vec<PlanarImage>>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ImageError::EmptyDir(dir.to_path_buf()));
    }
    Ok(files)
}

impl Dataset {
    pub fn from_images(hr: Vec<PlanarImage>) -> Self {
        let names = (0..hr.len()).map(|i| format!("image{i}")).collect();
        Self { names, hr, lr: None }
    }

    /// Loads every PNG in `dir`, sorted by file name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let files = png_files(dir.as_ref())?;
        let hr = files.iter().map(load_png).collect::<Result<Vec<_>>>()?;
        let names = files
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect();
        Ok(Self { names, hr, lr: None })
    }

    /// Pairs each HR image with the same-named file in `lr_dir`, which must
    /// be exactly `scale` times smaller.
    pub fn with_lr_dir(mut self, lr_dir: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let dir = lr_dir.as_ref();
        let mut lr = Vec::with_capacity(self.hr.len());
        for (name, hr) in self.names.iter().zip(&self.hr) {
            let img = load_png(dir.join(name))?;
            if img.height() * scale != hr.height() || img.width() * scale != hr.width() {
                return Err(ImageError::Dimensions(format!(
                    "{name}: LR {}x{} is not HR {}x{} / {scale}",
                    img.height(),
                    img.width(),
                    hr.height(),
                    hr.width()
                )));
            }
            lr.push(img);
        }
        self.lr = Some(lr);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    /// Samples `batch` patch pairs. Each pair draws from its own generator
    /// seeded from `rng`, so the result does not depend on thread count.
    pub fn sample_batch(
        &self,
        batch: usize,
        scale: usize,
        lr_patch: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<PatchPair>> {
        let seeds: Vec<(usize, u64)> = (0..batch)
            .map(|_| (rng.random_range(0..self.hr.len()), rng.random()))
            .collect();
        par::map_indices(batch, |i| {
            let (image, seed) = seeds[i];
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let lr = self.lr.as_ref().map(|l| &l[image]);
            sample_patch_pair(&self.hr[image], lr, image, scale, lr_patch, &mut r)
        })
        .into_iter()
        .collect()
    }
}
