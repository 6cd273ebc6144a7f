//! Seeded augmentation: rotation, flips, and brightness variation.
//!
//! [`augment_sample`] is a pure function of (image, config, rng state). The
//! draw order is part of the contract: angle, horizontal-flip decision,
//! vertical-flip decision, brightness delta, in that order, one draw each,
//! whether or not the transform ends up applying. Keeping disabled transforms
//! in the stream means toggling one knob never shifts the draws of another.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Augmentation magnitudes. The transforms come from the training recipe;
/// the magnitudes are configurable with these defaults.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    /// Rotation angle drawn uniformly from `[-rotation_max_deg, +rotation_max_deg]`.
    pub rotation_max_deg: f64,
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    /// Brightness delta drawn uniformly from `[-brightness_max_delta, +brightness_max_delta]`.
    pub brightness_max_delta: u8,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_deg: 30.0,
            p_flip_h: 0.5,
            p_flip_v: 0.0,
            brightness_max_delta: 40,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// The all-zero configuration, under which [`augment_sample`] is the
    /// identity for every seed.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_max_deg: 0.0,
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            brightness_max_delta: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_flip_h) || !(0.0..=1.0).contains(&self.p_flip_v) {
            return Err(Error::invalid(format!(
                "augment: flip probabilities must be in [0, 1], got {} / {}",
                self.p_flip_h, self.p_flip_v
            )));
        }
        if !(self.rotation_max_deg >= 0.0) || !self.rotation_max_deg.is_finite() {
            return Err(Error::invalid(format!(
                "augment: rotation_max_deg must be a finite value >= 0, got {}",
                self.rotation_max_deg
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Rotates about the image center `((w−1)/2, (h−1)/2)` by inverse mapping with
/// bilinear sampling. Source positions that fall outside the image are filled
/// with the per-channel mean. Source coordinates within 1e-9 of a pixel grid
/// point are snapped, so multiples of 90° on square images are exact
/// permutations. Output dimensions equal input dimensions.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let fill: Vec<u8> = img.channel_means().iter().map(|&m| m.round().clamp(0.0, 255.0) as u8).collect();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };

    let mut pixels = vec![0u8; w * h * ch];
    for dy in 0..h {
        for dx in 0..w {
            // Inverse map: rotate the destination by -angle about the center.
            let rx = dx as f64 - cx;
            let ry = dy as f64 - cy;
            let sx = snap(cx + cos_t * rx + sin_t * ry);
            let sy = snap(cy - sin_t * rx + cos_t * ry);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            for c in 0..ch {
                let tap = |x: f64, y: f64| -> f64 {
                    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                        fill[c] as f64
                    } else {
                        img.get(x as usize, y as usize, c) as f64
                    }
                };
                let p00 = tap(x0, y0);
                let p01 = tap(x0 + 1.0, y0);
                let p10 = tap(x0, y0 + 1.0);
                let p11 = tap(x0 + 1.0, y0 + 1.0);
                let top = p00 + fx * (p01 - p00);
                let bot = p10 + fx * (p11 - p10);
                let v = top + fy * (bot - top);
                pixels[(dy * w + dx) * ch + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(w, h, ch, pixels).expect("same dims")
}

/// Mirrors across the named axis: horizontal swaps left/right, vertical swaps
/// top/bottom.
pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut pixels = vec![0u8; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (w - 1 - x, y),
                FlipAxis::Vertical => (x, h - 1 - y),
            };
            for c in 0..ch {
                pixels[(y * w + x) * ch + c] = img.get(sx, sy, c);
            }
        }
    }
    Image::new(w, h, ch, pixels).expect("same dims")
}

/// Adds `delta` to every pixel value, saturating at 0 and 255. Not invertible
/// where clamping occurred.
pub fn adjust_brightness(img: &Image, delta: i32) -> Image {
    if delta == 0 {
        return img.clone();
    }
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| (p as i32 + delta).clamp(0, 255) as u8)
        .collect();
    Image::new(img.width(), img.height(), img.channels(), pixels).expect("same dims")
}

/// Applies one random augmentation: draws angle, flip decisions, and
/// brightness delta in fixed order from `rng`, then composes
/// rotate → horizontal flip → vertical flip → brightness.
pub fn augment_sample(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate()?;
    let angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
    let do_h = rng.bernoulli(cfg.p_flip_h);
    let do_v = rng.bernoulli(cfg.p_flip_v);
    let delta = rng.uniform_int(-(cfg.brightness_max_delta as i64), cfg.brightness_max_delta as i64) as i32;

    let mut out = rotate(img, angle);
    if do_h {
        out = flip(&out, FlipAxis::Horizontal);
    }
    if do_v {
        out = flip(&out, FlipAxis::Vertical);
    }
    Ok(adjust_brightness(&out, delta))
}
