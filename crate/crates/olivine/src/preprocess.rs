//! Preprocessing pipeline: resize, denoise, Otsu segmentation, contour-based
//! cropping, optional depth-assisted masking, and normalization into a tensor.
//!
//! The stage order is fixed: blur → Otsu → foreground selection → (optional
//! depth AND) → largest component → crop+mask → resize → normalize.
//! Segmentation runs before the final resize so object boundaries are decided
//! at full resolution.

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::tensor::Tensor;

/// Default crop margin added around the detected bounding box, per side, as a
/// fraction of the box extent.
pub const DEFAULT_CROP_MARGIN: f64 = 0.05;

/// 256-bin intensity histogram with the integer aggregates Otsu's criterion
/// needs. Counts and intensity sums are kept as exact integers; the
/// between-class variance is the only floating-point quantity.
#[derive(Clone, Debug)]
pub struct Histogram {
    counts: [u64; 256],
    total: u64,
    /// Sum of `level * count` over all bins.
    weighted_sum: u64,
}

impl Histogram {
    pub fn from_gray(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::invalid("histogram: expected a single-channel image"));
        }
        let mut counts = [0u64; 256];
        for &p in img.pixels() {
            counts[p as usize] += 1;
        }
        let total = img.pixels().len() as u64;
        let weighted_sum = counts.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
        Ok(Histogram { counts, total, weighted_sum })
    }

    pub fn counts(&self) -> &[u64; 256] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Pixel count and intensity sum of the class `level <= t`.
    pub fn class0(&self, t: u8) -> (u64, u64) {
        let mut n0 = 0;
        let mut s0 = 0;
        for v in 0..=t as usize {
            n0 += self.counts[v];
            s0 += v as u64 * self.counts[v];
        }
        (n0, s0)
    }

    /// Between-class variance σ_b²(t) = ω0·ω1·(μ0 − μ1)² for the split at
    /// `t` (class 0 is `level <= t`).
    pub fn between_class_variance(&self, t: u8) -> f64 {
        let (n0, s0) = self.class0(t);
        between_class_variance_from_parts(n0, s0, self.total, self.weighted_sum)
    }
}

/// σ_b² from the class-0 aggregates of a split. Shared by the incremental
/// scan and by test oracles so that identical integer inputs give identical
/// floats.
pub fn between_class_variance_from_parts(n0: u64, s0: u64, total: u64, weighted_sum: u64) -> f64 {
    let n1 = total - n0;
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let s1 = weighted_sum - s0;
    let w0 = n0 as f64 / total as f64;
    let w1 = n1 as f64 / total as f64;
    let mu0 = s0 as f64 / n0 as f64;
    let mu1 = s1 as f64 / n1 as f64;
    w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
}

/// One boolean per pixel; `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::invalid(format!(
                "mask bits length {} does not match {width}x{height}",
                bits.len()
            )));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask { width, height, bits: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Inclusive pixel bounds of a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::invalid(format!("bbox corners out of order: ({x0},{y0})..({x1},{y1})")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Luma conversion: gray = round(0.299·R + 0.587·G + 0.114·B). Single-channel
/// images pass through unchanged.
pub fn rgb_to_gray(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels()
        .chunks_exact(3)
        .map(|px| {
            let v = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(img.width(), img.height(), 1, pixels).expect("same dims")
}

/// Bilinear resize with half-pixel-center mapping: source coordinate
/// `s = (d + 0.5)·(in/out) − 0.5`, clamped to the image, result rounded
/// half-away-from-zero to 8 bits.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("resize: output dimensions must be >= 1"));
    }
    let (in_w, in_h, ch) = (img.width(), img.height(), img.channels());
    let scale_x = in_w as f64 / out_w as f64;
    let scale_y = in_h as f64 / out_h as f64;
    let mut pixels = vec![0u8; out_w * out_h * ch];
    for dy in 0..out_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for dx in 0..out_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            for c in 0..ch {
                let p00 = img.get(x0, y0, c) as f64;
                let p01 = img.get(x1, y0, c) as f64;
                let p10 = img.get(x0, y1, c) as f64;
                let p11 = img.get(x1, y1, c) as f64;
                let top = p00 + fx * (p01 - p00);
                let bot = p10 + fx * (p11 - p10);
                let v = top + fy * (bot - top);
                pixels[(dy * out_w + dx) * ch + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(out_w, out_h, ch, pixels)
}

/// Normalized 1-D Gaussian taps for radius `r = ceil(3σ)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Symmetric edge reflection: -1 → 0, n → n-1, repeated for far overshoots.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur. Kernel taps `∝ exp(−i²/2σ²)` over `[−r, r]` with
/// `r = ceil(3σ)`, normalized to sum 1; borders reflect; both passes stay in
/// floating point and round once at the end.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("gaussian_blur: sigma must be > 0, got {sigma}")));
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as i64;
    let (w, h, ch) = (img.width(), img.height(), img.channels());

    // Horizontal pass.
    let mut tmp = vec![0f64; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ti, &t) in taps.iter().enumerate() {
                    let sx = reflect(x as i64 + ti as i64 - r, w);
                    acc += t * img.get(sx, y, c) as f64;
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    // Vertical pass, rounding once.
    let mut pixels = vec![0u8; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (ti, &t) in taps.iter().enumerate() {
                    let sy = reflect(y as i64 + ti as i64 - r, h);
                    acc += t * tmp[(sy * w + x) * ch + c];
                }
                pixels[(y * w + x) * ch + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image::new(w, h, ch, pixels)
}

/// Otsu's threshold: the `t` maximizing σ_b²(t), class 0 being `level <= t`,
/// ties broken toward the smallest `t`. Errors on a single-level image, where
/// the criterion is identically zero.
pub fn otsu_threshold(gray: &Image) -> Result<u8> {
    let hist = Histogram::from_gray(gray)?;
    if hist.counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let mut best_t = 0u8;
    let mut best_v = f64::NEG_INFINITY;
    let mut n0 = 0u64;
    let mut s0 = 0u64;
    for t in 0..=255u8 {
        n0 += hist.counts[t as usize];
        s0 += t as u64 * hist.counts[t as usize];
        let v = between_class_variance_from_parts(n0, s0, hist.total, hist.weighted_sum);
        if v > best_v {
            best_v = v;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Binarizes at `t` and picks as foreground the class with fewer pixels on the
/// one-pixel border frame; ties go to the `> t` class. Works for dark objects
/// on light backgrounds and vice versa, since a plain background touches the
/// frame.
pub fn foreground_mask(gray: &Image, t: u8) -> Result<Mask> {
    if gray.channels() != 1 {
        return Err(Error::invalid("foreground_mask: expected a single-channel image"));
    }
    let (w, h) = (gray.width(), gray.height());
    let above = |x: usize, y: usize| gray.get(x, y, 0) > t;
    let mut border_above = 0u64;
    let mut border_total = 0u64;
    for x in 0..w {
        for y in [0, h - 1] {
            border_total += 1;
            border_above += above(x, y) as u64;
        }
    }
    if h > 2 {
        for y in 1..h - 1 {
            for x in [0, w - 1] {
                border_total += 1;
                border_above += above(x, y) as u64;
            }
        }
    }
    let border_below = border_total - border_above;
    let fg_is_above = border_above <= border_below;
    let bits = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            above(x, y) == fg_is_above
        })
        .collect();
    Mask::new(w, h, bits)
}

/// Bounding box of the largest 4-connected foreground component. Ties break
/// to the component discovered first in row-major order (the one containing
/// the smallest `(y, x)`).
pub fn largest_component_bbox(mask: &Mask) -> Result<BBox> {
    let (w, h) = (mask.width(), mask.height());
    let mut visited = vec![false; w * h];
    let mut best: Option<(usize, BBox)> = None;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        let mut size = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut try_push = |j: usize| {
                if mask.bits[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                try_push(i - 1);
            }
            if x + 1 < w {
                try_push(i + 1);
            }
            if y > 0 {
                try_push(i - w);
            }
            if y + 1 < h {
                try_push(i + w);
            }
        }
        let keep = match &best {
            None => true,
            Some((bs, _)) => size > *bs,
        };
        if keep {
            best = Some((size, BBox { x0, y0, x1, y1 }));
        }
    }
    best.map(|(_, b)| b).ok_or(Error::NoForeground)
}

/// Foreground where `near_mm <= depth <= far_mm` and the reading exists
/// (depth ≠ 0).
pub fn depth_foreground_mask(depth: &DepthMap, near_mm: u16, far_mm: u16) -> Result<Mask> {
    if near_mm >= far_mm {
        return Err(Error::invalid(format!(
            "depth mask: near {near_mm} must be < far {far_mm}"
        )));
    }
    let bits = depth
        .depths()
        .iter()
        .map(|&d| d != 0 && d >= near_mm && d <= far_mm)
        .collect();
    Mask::new(depth.width(), depth.height(), bits)
}

/// Per-pixel AND of two masks of identical dimensions.
pub fn combine_masks(a: &Mask, b: &Mask) -> Result<Mask> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(format!(
            "combine_masks: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let bits = a.bits.iter().zip(&b.bits).map(|(&x, &y)| x && y).collect();
    Mask::new(a.width, a.height, bits)
}

/// Zeroes background pixels, crops to `bbox` expanded by [`DEFAULT_CROP_MARGIN`]
/// per side (clamped to the image), and resizes to `out_size`².
pub fn segment_and_crop(img: &Image, mask: &Mask, bbox: BBox, out_size: usize) -> Result<Image> {
    segment_and_crop_with_margin(img, mask, bbox, out_size, DEFAULT_CROP_MARGIN)
}

/// [`segment_and_crop`] with an explicit margin fraction.
pub fn segment_and_crop_with_margin(
    img: &Image,
    mask: &Mask,
    bbox: BBox,
    out_size: usize,
    margin: f64,
) -> Result<Image> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    if mask.width() != w || mask.height() != h {
        return Err(Error::shape(format!(
            "segment_and_crop: mask {}x{} vs image {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    if bbox.x1 >= w || bbox.y1 >= h {
        return Err(Error::shape(format!("segment_and_crop: bbox {bbox:?} exceeds image {w}x{h}")));
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(Error::invalid(format!("segment_and_crop: margin {margin} out of range")));
    }
    let mx = (margin * bbox.width() as f64).round() as usize;
    let my = (margin * bbox.height() as f64).round() as usize;
    let cx0 = bbox.x0.saturating_sub(mx);
    let cy0 = bbox.y0.saturating_sub(my);
    let cx1 = (bbox.x1 + mx).min(w - 1);
    let cy1 = (bbox.y1 + my).min(h - 1);

    let (cw, chh) = (cx1 - cx0 + 1, cy1 - cy0 + 1);
    let mut pixels = vec![0u8; cw * chh * ch];
    for y in cy0..=cy1 {
        for x in cx0..=cx1 {
            if mask.get(x, y) {
                for c in 0..ch {
                    pixels[((y - cy0) * cw + (x - cx0)) * ch + c] = img.get(x, y, c);
                }
            }
        }
    }
    let cropped = Image::new(cw, chh, ch, pixels)?;
    resize_bilinear(&cropped, out_size, out_size)
}

/// Maps 8-bit pixels to `[−1, 1]` (`(p/255 − 0.5) / 0.5`) and converts the
/// layout HWC → CHW.
pub fn normalize_to_tensor(img: &Image) -> Tensor {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut data = vec![0f32; ch * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = img.get(x, y, c) as f32 / 255.0;
                data[(c * h + y) * w + x] = (v - 0.5) / 0.5;
            }
        }
    }
    Tensor::new(vec![ch, h, w], data).expect("dims from a valid image")
}

/// Which plane Otsu thresholding runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtsuSource {
    /// Luma conversion of the RGB image (default).
    Gray,
    /// A single color channel.
    Channel(usize),
}

/// Knobs for the composed pipeline, mirroring the `data.*` config keys.
#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub sigma: f64,
    pub out_size: usize,
    pub crop_margin: f64,
    pub use_depth: bool,
    pub depth_near_mm: u16,
    pub depth_far_mm: u16,
    pub otsu_source: OtsuSource,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            sigma: 1.0,
            out_size: 224,
            crop_margin: DEFAULT_CROP_MARGIN,
            use_depth: false,
            depth_near_mm: 200,
            depth_far_mm: 1500,
            otsu_source: OtsuSource::Gray,
        }
    }
}

/// Full pipeline for one image. Returns the processed image and whether
/// segmentation actually applied; a degenerate histogram or an empty combined
/// mask falls back to a plain resize of the blurred image, and the caller
/// decides whether to warn.
pub fn preprocess_image(img: &Image, depth: Option<&DepthMap>, opts: &PreprocessOptions) -> Result<(Image, bool)> {
    let blurred = gaussian_blur(img, opts.sigma)?;
    let plane = match opts.otsu_source {
        OtsuSource::Gray => rgb_to_gray(&blurred),
        OtsuSource::Channel(c) => {
            if c >= blurred.channels() {
                return Err(Error::invalid(format!(
                    "preprocess: channel {c} out of range for {}-channel image",
                    blurred.channels()
                )));
            }
            let pixels = blurred
                .pixels()
                .chunks_exact(blurred.channels())
                .map(|px| px[c])
                .collect();
            Image::new(blurred.width(), blurred.height(), 1, pixels)?
        }
    };

    let segmented = (|| -> Result<Image> {
        let t = otsu_threshold(&plane)?;
        let mut mask = foreground_mask(&plane, t)?;
        if opts.use_depth {
            let depth = depth.ok_or_else(|| Error::data("preprocess: depth map required but missing"))?;
            if depth.width() != img.width() || depth.height() != img.height() {
                return Err(Error::shape(format!(
                    "preprocess: depth {}x{} does not match image {}x{}",
                    depth.width(),
                    depth.height(),
                    img.width(),
                    img.height()
                )));
            }
            let dmask = depth_foreground_mask(depth, opts.depth_near_mm, opts.depth_far_mm)?;
            mask = combine_masks(&mask, &dmask)?;
        }
        let bbox = largest_component_bbox(&mask)?;
        segment_and_crop_with_margin(&blurred, &mask, bbox, opts.out_size, opts.crop_margin)
    })();

    match segmented {
        Ok(out) => Ok((out, true)),
        Err(Error::DegenerateHistogram) | Err(Error::NoForeground) => {
            let out = resize_bilinear(&blurred, opts.out_size, opts.out_size)?;
            Ok((out, false))
        }
        Err(e) => Err(e),
    }
}
