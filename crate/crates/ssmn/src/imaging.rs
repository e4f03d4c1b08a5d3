//! Raster preprocessing: binarization, exact Euclidean distance transform,
//! and canonical patch extraction around annotated part points.

use crate::error::{Result, SsmnError};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in [0,1].
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> GrayImage {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<GrayImage> {
        if pixels.len() != width * height {
            return Err(SsmnError::Shape(format!(
                "image {width}x{height} wants {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SsmnError::Invalid("pixel intensity outside [0,1]".into()));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// ITU-R 601 luminance for natural-image (non-DT) mode.
    pub fn from_rgb(width: usize, height: usize, rgb: &[(f64, f64, f64)]) -> Result<GrayImage> {
        let pixels = rgb
            .iter()
            .map(|(r, g, b)| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
            .collect();
        GrayImage::from_pixels(width, height, pixels)
    }
}

/// Ink mask: true where intensity is below the ink threshold.
pub fn binarize(img: &GrayImage, ink_threshold: f64) -> Result<Vec<bool>> {
    if !(ink_threshold > 0.0 && ink_threshold < 1.0) {
        return Err(SsmnError::Invalid(format!(
            "ink threshold {ink_threshold} not in (0,1)"
        )));
    }
    Ok(img.pixels.iter().map(|p| *p < ink_threshold).collect())
}

/// Exact Euclidean distance to the nearest ink pixel, computed with the
/// two-pass separable lower-envelope algorithm, then clipped at
/// 0.2 * max(width, height) and scaled to [0,1].
pub fn distance_transform(mask: &[bool], width: usize, height: usize) -> Result<GrayImage> {
    let raw = raw_distance_transform(mask, width, height)?;
    let d_max = 0.2 * width.max(height) as f64;
    let pixels = raw.iter().map(|d| (d.min(d_max)) / d_max).collect();
    GrayImage::from_pixels(width, height, pixels)
}

/// Unclipped exact distances; exposed for the brute-force oracle tests.
pub fn raw_distance_transform(mask: &[bool], width: usize, height: usize) -> Result<Vec<f64>> {
    if mask.len() != width * height {
        return Err(SsmnError::Shape(format!(
            "mask length {} vs {width}x{height}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(SsmnError::Invalid(
            "distance transform of an empty mask is undefined".into(),
        ));
    }
    // Pass 1: squared distance along each column to nearest ink in that column.
    let inf = f64::INFINITY;
    let mut colsq = vec![inf; width * height];
    for x in 0..width {
        let f: Vec<f64> = (0..height)
            .map(|y| if mask[y * width + x] { 0.0 } else { inf })
            .collect();
        let d = dt_1d(&f);
        for y in 0..height {
            colsq[y * width + x] = d[y];
        }
    }
    // Pass 2: lower envelope along each row over the column results.
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let f: Vec<f64> = (0..width).map(|x| colsq[y * width + x]).collect();
        let d = dt_1d(&f);
        for x in 0..width {
            out[y * width + x] = d[x].sqrt();
        }
    }
    Ok(out)
}

/// Felzenszwalb-Huttenlocher 1-D squared distance transform of a sampled
/// function: d[q] = min_p (q - p)^2 + f[p].
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n]; // parabola centers
    let mut z = vec![0.0f64; n + 1]; // envelope boundaries
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p].is_infinite() {
                f64::NEG_INFINITY
            } else {
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k2 = 0usize;
    for q in 0..n {
        while z[k2 + 1] < q as f64 {
            k2 += 1;
        }
        let p = v[k2];
        d[q] = if f[p].is_infinite() {
            f64::INFINITY
        } else {
            ((q as isize - p as isize) * (q as isize - p as isize)) as f64 + f[p]
        };
    }
    d
}

/// Square crop of side `crop_fraction * max(width, height)` centered at a
/// normalized point, edge-clamped, bilinearly resampled to out_size^2.
pub fn extract_patch(
    img: &GrayImage,
    center_x: f64,
    center_y: f64,
    crop_fraction: f64,
    out_size: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&center_x) || !(0.0..=1.0).contains(&center_y) {
        return Err(SsmnError::Invalid(format!(
            "patch center ({center_x}, {center_y}) outside [0,1]^2"
        )));
    }
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(SsmnError::Invalid(format!(
            "crop fraction {crop_fraction} not in (0,1]"
        )));
    }
    if out_size < 2 {
        return Err(SsmnError::Invalid("patch out_size must be >= 2".into()));
    }
    let side = crop_fraction * img.width.max(img.height) as f64;
    let cx = center_x * (img.width - 1) as f64;
    let cy = center_y * (img.height - 1) as f64;
    let x0 = cx - (side - 1.0) / 2.0;
    let y0 = cy - (side - 1.0) / 2.0;
    let step = (side - 1.0) / (out_size - 1) as f64;
    let mut out = Vec::with_capacity(out_size * out_size);
    for j in 0..out_size {
        for i in 0..out_size {
            out.push(sample_bilinear_clamped(
                img,
                x0 + i as f64 * step,
                y0 + j as f64 * step,
            ));
        }
    }
    Ok(out)
}

fn sample_bilinear_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x1 = xc.floor() as usize;
    let y1 = yc.floor() as usize;
    let x2 = (x1 + 1).min(img.width - 1);
    let y2 = (y1 + 1).min(img.height - 1);
    let fx = xc - x1 as f64;
    let fy = yc - y1 as f64;
    let a = img.get(x1, y1);
    let b = img.get(x2, y1);
    let c = img.get(x1, y2);
    let d = img.get(x2, y2);
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white(w: usize, h: usize) -> GrayImage {
        GrayImage::from_pixels(w, h, vec![1.0; w * h]).unwrap()
    }

    #[test]
    fn binarize_all_white_is_empty() {
        let mask = binarize(&white(8, 8), 0.98).unwrap();
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn binarize_all_black_is_full() {
        let img = GrayImage::new(8, 8);
        let mask = binarize(&img, 0.98).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn binarize_single_pixel() {
        let mut img = white(8, 8);
        img.set(3, 3, 0.0);
        let mask = binarize(&img, 0.98).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[3 * 8 + 3]);
    }

    #[test]
    fn binarize_bad_threshold_rejected() {
        assert!(binarize(&white(2, 2), 0.0).is_err());
        assert!(binarize(&white(2, 2), 1.0).is_err());
    }

    #[test]
    fn dt_ink_everywhere_is_zero() {
        let mask = vec![true; 16];
        let img = distance_transform(&mask, 4, 4).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn dt_345_triangle() {
        let mut mask = vec![false; 8 * 8];
        mask[0] = true;
        let raw = raw_distance_transform(&mask, 8, 8).unwrap();
        assert!((raw[4 * 8 + 3] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn dt_empty_mask_is_an_error() {
        assert!(distance_transform(&vec![false; 16], 4, 4).is_err());
    }

    fn brute_force_dt(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
        let ink: Vec<(isize, isize)> = (0..w * h)
            .filter(|&i| mask[i])
            .map(|i| ((i % w) as isize, (i / w) as isize))
            .collect();
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                ink.iter()
                    .map(|&(ix, iy)| (((x - ix).pow(2) + (y - iy).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn dt_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (w, h) = (64, 64);
            let mut mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.02)).collect();
            if !mask.iter().any(|&m| m) {
                mask[rng.gen_range(0..w * h)] = true;
            }
            let fast = raw_distance_transform(&mask, w, h).unwrap();
            let slow = brute_force_dt(&mask, w, h);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() <= 1e-9, "{f} vs {s}");
            }
        }
    }

    #[test]
    fn patch_whole_image_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 32;
        let pixels: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = GrayImage::from_pixels(n, n, pixels.clone()).unwrap();
        let patch = extract_patch(&img, 0.5, 0.5, 1.0, n).unwrap();
        for (p, q) in patch.iter().zip(&pixels) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_of_constant_image_is_constant() {
        let img = GrayImage::from_pixels(40, 40, vec![0.37; 1600]).unwrap();
        let patch = extract_patch(&img, 0.2, 0.8, 0.3, 32).unwrap();
        assert!(patch.iter().all(|&p| (p - 0.37).abs() < 1e-12));
    }

    #[test]
    fn corner_patch_clamps_against_hand_computed_case() {
        // 4x4 image, center at (0,0), crop the whole extent, 4x4 output.
        // Sample grid starts at -1.5; clamping replicates border content.
        let pixels: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let img = GrayImage::from_pixels(4, 4, pixels).unwrap();
        let patch = extract_patch(&img, 0.0, 0.0, 1.0, 4).unwrap();
        // independent bilinear oracle with clamped coords
        let clamp = |v: f64| v.clamp(0.0, 3.0);
        let px = |x: usize, y: usize| (y * 4 + x) as f64 / 15.0;
        for j in 0..4 {
            for i in 0..4 {
                let sx = clamp(-1.5 + i as f64);
                let sy = clamp(-1.5 + j as f64);
                let (x1, y1) = (sx.floor() as usize, sy.floor() as usize);
                let (x2, y2) = ((x1 + 1).min(3), (y1 + 1).min(3));
                let (fx, fy) = (sx - x1 as f64, sy - y1 as f64);
                let expect = px(x1, y1) * (1.0 - fx) * (1.0 - fy)
                    + px(x2, y1) * fx * (1.0 - fy)
                    + px(x1, y2) * (1.0 - fx) * fy
                    + px(x2, y2) * fx * fy;
                assert!((patch[j * 4 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_translation_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 64;
        let pixels: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = GrayImage::from_pixels(n, n, pixels.clone()).unwrap();
        // shift image content by (5, 3)
        let mut shifted = GrayImage::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let sx = (x + n - 5) % n;
                let sy = (y + n - 3) % n;
                shifted.set(x, y, img.get(sx, sy));
            }
        }
        let c = 30.0 / (n - 1) as f64;
        let a = extract_patch(&img, c, c, 0.15, 16).unwrap();
        let cx2 = 35.0 / (n - 1) as f64;
        let cy2 = 33.0 / (n - 1) as f64;
        let b = extract_patch(&shifted, cx2, cy2, 0.15, 16).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_bad_center_rejected() {
        let img = white(8, 8);
        assert!(extract_patch(&img, 1.2, 0.5, 0.2, 8).is_err());
        assert!(extract_patch(&img, 0.5, 0.5, 0.0, 8).is_err());
    }
}
