//! Image augmentation: horizontal flip, then either pad-and-crop or a small
//! rotation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tnnsim_core::tnn::InputSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Zero padding added on each side before the random crop.
    pub pad: usize,
    /// Rotation angles are uniform in `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: false, pad: 4, max_rotation_deg: 15.0 }
    }
}

pub fn hflip(img: &[u8], s: InputSpec) -> Vec<u8> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(s.width) {
        row.reverse();
    }
    out
}

/// Crop of the zero-padded image whose top-left corner sits at `(dy, dx)`
/// in padded coordinates.
pub fn pad_crop(img: &[u8], s: InputSpec, pad: usize, dy: usize, dx: usize) -> Vec<u8> {
    let mut out = vec![0u8; img.len()];
    for c in 0..s.channels {
        for y in 0..s.height {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= s.height as isize {
                continue;
            }
            for x in 0..s.width {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < s.width as isize {
                    out[(c * s.height + y) * s.width + x] = img[(c * s.height + sy as usize) * s.width + sx as usize];
                }
            }
        }
    }
    out
}

/// Bilinear rotation about the image center, zero fill outside.
pub fn rotate(img: &[u8], s: InputSpec, degrees: f64) -> Vec<u8> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((s.height as f64 - 1.0) / 2.0, (s.width as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; img.len()];
    let px = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= s.height as isize || x >= s.width as isize {
            0.0
        } else {
            img[(c * s.height + y as usize) * s.width + x as usize] as f64
        }
    };
    for y in 0..s.height {
        for x in 0..s.width {
            // inverse map output pixel to source coordinates
            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
            let sy = cos * ry - sin * rx + cy;
            let sx = sin * ry + cos * rx + cx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            for c in 0..s.channels {
                let v = px(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + px(c, y0, x0 + 1) * (1.0 - fy) * fx
                    + px(c, y0 + 1, x0) * fy * (1.0 - fx)
                    + px(c, y0 + 1, x0 + 1) * fy * fx;
                out[(c * s.height + y) * s.width + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Random augmentation of one CHW image. Disabled configs return the image
/// unchanged and draw nothing.
pub fn augment<R: Rng + ?Sized>(img: &[u8], s: InputSpec, rng: &mut R, cfg: &AugmentConfig) -> Vec<u8> {
    if !cfg.enabled {
        return img.to_vec();
    }
    let mut out = if rng.random_bool(0.5) { hflip(img, s) } else { img.to_vec() };
    if rng.random_bool(0.5) {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out = pad_crop(&out, s, cfg.pad, dy, dx);
    } else {
        let a = cfg.max_rotation_deg;
        let deg = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        out = rotate(&out, s, deg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tnnsim_core::rng::seeded;

    const S: InputSpec = InputSpec { channels: 3, height: 8, width: 8 };

    fn image(seed: u8) -> Vec<u8> {
        (0..S.len()).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect()
    }

    #[test]
    fn disabled_is_identity() {
        let img = image(1);
        let mut rng = seeded(0);
        assert_eq!(augment(&img, S, &mut rng, &AugmentConfig::default()), img);
    }

    #[test]
    fn flip_is_an_involution_and_preserves_histogram() {
        let img = image(2);
        let f = hflip(&img, S);
        assert_ne!(f, img);
        assert_eq!(hflip(&f, S), img);
        let hist = |v: &[u8]| {
            let mut h = [0usize; 256];
            v.iter().for_each(|&p| h[p as usize] += 1);
            h
        };
        assert_eq!(hist(&f), hist(&img));
        assert_eq!(f[0], img[7]);
    }

    #[test]
    fn centered_crop_and_zero_rotation_are_identity() {
        let img = image(3);
        assert_eq!(pad_crop(&img, S, 4, 4, 4), img);
        assert_eq!(rotate(&img, S, 0.0), img);
        // shifting by one pixel moves content and zero-fills the edge
        let shifted = pad_crop(&img, S, 4, 4, 5);
        assert_eq!(shifted[0], img[1]);
        assert_eq!(shifted[7], 0);
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let s = InputSpec { channels: 1, height: 3, width: 3 };
        let img: Vec<u8> = (1..=9).collect();
        let r = rotate(&img, s, 90.0);
        let mut sorted = r.clone();
        sorted.sort();
        assert_eq!(sorted, img);
        assert_eq!(r[4], 5);
    }

    #[test]
    fn enabled_augmentation_is_seed_deterministic() {
        let img = image(4);
        let cfg = AugmentConfig { enabled: true, ..Default::default() };
        let a: Vec<Vec<u8>> = (0..5).scan(seeded(9), |r, _| Some(augment(&img, S, r, &cfg))).collect();
        let b: Vec<Vec<u8>> = (0..5).scan(seeded(9), |r, _| Some(augment(&img, S, r, &cfg))).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|x| x != &img));
    }
}
