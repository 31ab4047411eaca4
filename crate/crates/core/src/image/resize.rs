//! Separable bicubic resampling with antialiasing on downscale.

use super::{ImageError, PlanarImage, Result};

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let t = x.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * a
    } else {
        0.0
    }
}

/// Taps and normalized weights of one output coordinate. `reference` is the
/// tap with the largest weight.
struct Taps {
    index: Vec<usize>,
    weight: Vec<f64>,
    reference: usize,
}

fn contributions(in_len: usize, out_len: usize, antialias: bool) -> Vec<Taps> {
    let scale = out_len as f64 / in_len as f64;
    let (stretch, width) = if antialias && scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let count = width.ceil() as i64 + 2;
    (0..out_len)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let left = (u - width / 2.0).floor() as i64;
            let mut index = Vec::with_capacity(count as usize);
            let mut weight = Vec::with_capacity(count as usize);
            for i in left..left + count {
                let w = stretch * cubic_kernel(stretch * (u - i as f64));
                if w != 0.0 {
                    index.push(i.clamp(0, in_len as i64 - 1) as usize);
                    weight.push(w);
                }
            }
            let total: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= total);
            let reference = (0..weight.len())
                .max_by(|&a, &b| weight[a].total_cmp(&weight[b]))
                .unwrap_or(0);
            Taps {
                index,
                weight,
                reference,
            }
        })
        .collect()
}

/// Resamples `lines` lines of `in_len` samples each. Strides are in
/// elements, between samples of a line and between line starts.
#[allow(clippy::too_many_arguments)]
fn resample_axis(
    src: &[f64],
    lines: usize,
    in_len: usize,
    sample_stride_in: usize,
    line_stride_in: usize,
    taps: &[Taps],
    out: &mut [f64],
    sample_stride_out: usize,
    line_stride_out: usize,
) {
    for l in 0..lines {
        let s = &src[l * line_stride_in..];
        for (o, t) in taps.iter().enumerate() {
            debug_assert!(t.index.iter().all(|&i| i < in_len));
            let anchor = s[t.index[t.reference] * sample_stride_in];
            let delta: f64 = t
                .index
                .iter()
                .zip(&t.weight)
                .map(|(&i, &w)| w * (s[i * sample_stride_in] - anchor))
                .sum();
            out[l * line_stride_out + o * sample_stride_out] = anchor + delta;
        }
    }
}

/// Linear bicubic resize of one row-major plane, without clamping.
/// Rows are resampled first, then columns.
pub fn resize_plane_unclamped(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    antialias: bool,
) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "plane size");
    let vt = contributions(h, out_h, antialias);
    let mut mid = vec![0.0; out_h * w];
    resample_axis(src, w, h, w, 1, &vt, &mut mid, w, 1);
    let ht = contributions(w, out_w, antialias);
    let mut out = vec![0.0; out_h * out_w];
    resample_axis(&mid, out_h, w, 1, w, &ht, &mut out, 1, out_w);
    out
}

/// Bicubic resize of one plane, clamped to [0, 1].
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, antialias: bool) -> Vec<f64> {
    let mut v = resize_plane_unclamped(src, h, w, out_h, out_w, antialias);
    v.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    v
}

/// Bicubic resize of every channel, clamped to [0, 1].
pub fn bicubic_resize(img: &PlanarImage, out_h: usize, out_w: usize, antialias: bool) -> Result<PlanarImage> {
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::Dimensions(format!("resize target {out_h}x{out_w}")));
    }
    let mut data = Vec::with_capacity(img.channels() * out_h * out_w);
    for c in 0..img.channels() {
        data.extend(resize_plane(img.plane(c), img.height(), img.width(), out_h, out_w, antialias));
    }
    PlanarImage::new(img.space(), out_h, out_w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn identity_is_exact() {
        let src: Vec<f64> = (0..35).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        assert_eq!(resize_plane(&src, 5, 7, 5, 7, true), src);
    }

    #[test]
    fn constant_is_preserved() {
        let src = vec![0.3; 64];
        for &(oh, ow) in &[(2, 2), (4, 8), (16, 32), (3, 5)] {
            assert!(resize_plane(&src, 8, 8, oh, ow, true).iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn upscale_midpoint_of_ramp() {
        // Interior samples of a linear ramp stay on the ramp.
        let src: Vec<f64> = (0..8).map(|x| x as f64 / 8.0).collect();
        let out = resize_plane_unclamped(&src, 1, 8, 1, 16, false);
        for (o, v) in out.iter().enumerate().skip(4).take(8) {
            let u = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((v - u / 8.0).abs() < 1e-12, "{o}: {v}");
        }
    }
}
