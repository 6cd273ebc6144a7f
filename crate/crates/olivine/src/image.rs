//! 8-bit rasters, 16-bit depth maps, and their portable anymap encoding.
//!
//! PNM is the toolkit's canonical on-disk format because it is bit-exactly
//! specifiable: P5 (grayscale) and P6 (RGB) with maxval 255 for images, and
//! P5 with maxval 65535 (big-endian body, per the PNM standard) for depth.
//! Writers emit the canonical header `P5\n<w> <h>\n255\n` so output is
//! byte-deterministic; the reader tolerates arbitrary header whitespace and
//! `#` comments.

use crate::error::{Error, Result};

/// Interleaved 8-bit raster, row-major, HWC. `channels` is 1 (gray) or 3 (RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive: {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("image channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "pixel buffer length {} does not match {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Image { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Image::new(width, height, channels, vec![value; width * height * channels])
            .expect("valid constant image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Sample one channel of one pixel.
    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-channel arithmetic mean, as floats.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0u64; self.channels];
        for px in self.pixels.chunks_exact(self.channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as u64;
            }
        }
        let n = (self.width * self.height) as f64;
        sums.into_iter().map(|s| s as f64 / n).collect()
    }
}

/// Per-pixel distance from the camera plane in millimeters; 0 = no reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depths: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depths: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("depth dimensions must be positive: {width}x{height}")));
        }
        if depths.len() != width * height {
            return Err(Error::invalid(format!(
                "depth buffer length {} does not match {width}x{height}",
                depths.len()
            )));
        }
        Ok(DepthMap { width, height, depths })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depths(&self) -> &[u16] {
        &self.depths
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.depths[y * self.width + x]
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderCursor { bytes, pos: 0 }
    }

    /// Skips whitespace and `#`-to-end-of-line comments.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<u64> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::format(format!("pnm: expected {what} in header")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<u64>()
            .map_err(|_| Error::format(format!("pnm: {what} out of range")))
    }

    /// Consumes the single whitespace byte that separates header from body.
    fn finish_header(&mut self) -> Result<usize> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::format("pnm: missing whitespace after maxval"));
        }
        Ok(self.pos + 1)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(&'static str, usize, usize, u64, usize)> {
    if bytes.len() < 2 {
        return Err(Error::format("pnm: truncated header"));
    }
    let magic = match &bytes[..2] {
        b"P5" => "P5",
        b"P6" => "P6",
        other => {
            let shown = String::from_utf8_lossy(other);
            return Err(Error::format(format!("pnm: unsupported magic \"{shown}\"")));
        }
    };
    let mut cur = HeaderCursor::new(&bytes[2..]);
    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(format!("pnm: dimensions must be positive, got {width}x{height}")));
    }
    let body = cur.finish_header()? + 2;
    Ok((magic, width as usize, height as usize, maxval, body))
}

/// Decodes a binary P5 (grayscale) or P6 (RGB) file with maxval 255.
pub fn read_pnm(bytes: &[u8]) -> Result<Image> {
    let (magic, width, height, maxval, body) = parse_header(bytes)?;
    if maxval != 255 {
        return Err(Error::format(format!("pnm: expected maxval 255, got {maxval}")));
    }
    let channels = if magic == "P5" { 1 } else { 3 };
    let need = width * height * channels;
    let rest = &bytes[body..];
    if rest.len() < need {
        return Err(Error::format(format!(
            "pnm: truncated body, expected {need} bytes, got {}",
            rest.len()
        )));
    }
    Image::new(width, height, channels, rest[..need].to_vec())
}

/// Encodes an [`Image`] with the canonical header; byte-deterministic.
pub fn write_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let header = format!("{magic}\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.pixels());
    out
}

/// Decodes a 16-bit P5 file (maxval 65535, big-endian body) as a depth map.
pub fn read_depth(bytes: &[u8]) -> Result<DepthMap> {
    let (magic, width, height, maxval, body) = parse_header(bytes)?;
    if magic != "P5" {
        return Err(Error::format("pnm depth: expected P5 magic"));
    }
    if maxval != 65535 {
        return Err(Error::format(format!(
            "pnm depth: expected 16-bit depth (maxval 65535), got maxval {maxval}"
        )));
    }
    let need = width * height * 2;
    let rest = &bytes[body..];
    if rest.len() < need {
        return Err(Error::format(format!(
            "pnm depth: truncated body, expected {need} bytes, got {}",
            rest.len()
        )));
    }
    let depths = rest[..need]
        .chunks_exact(2)
        .map(|px| u16::from_be_bytes([px[0], px[1]]))
        .collect();
    DepthMap::new(width, height, depths)
}

/// Encodes a [`DepthMap`] as 16-bit big-endian P5; byte-deterministic.
pub fn write_depth(depth: &DepthMap) -> Vec<u8> {
    let header = format!("P5\n{} {}\n65535\n", depth.width(), depth.height());
    let mut out = Vec::with_capacity(header.len() + depth.depths().len() * 2);
    out.extend_from_slice(header.as_bytes());
    for &d in depth.depths() {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_legal_p5() {
        let img = read_pnm(b"P5 1 1 255 \x00").unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (1, 1, 1));
        assert_eq!(img.pixels(), &[0]);
    }

    #[test]
    fn canonical_single_pixel_bytes() {
        let img = Image::new(1, 1, 1, vec![255]).unwrap();
        assert_eq!(write_pnm(&img), b"P5\n1 1\n255\n\xff");
    }

    #[test]
    fn rgb_body_order_is_hwc() {
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = write_pnm(&img);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn round_trip_identity() {
        let img = Image::new(3, 2, 3, (0u8..18).collect()).unwrap();
        assert_eq!(read_pnm(&write_pnm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments_tolerated() {
        let img = read_pnm(b"P5\n# a comment\n 2 # inline\n1\n255\n\x01\x02").unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[1, 2]);
    }

    #[test]
    fn unsupported_magic() {
        let err = read_pnm(b"P7\n1 1\n255\n\x00").unwrap_err();
        assert!(err.to_string().contains("unsupported magic"), "{err}");
    }

    #[test]
    fn wrong_maxval_rejected() {
        assert!(read_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        let err = read_depth(b"P5\n1 1\n255\n\x00").unwrap_err();
        assert!(err.to_string().contains("expected 16-bit depth"), "{err}");
    }

    #[test]
    fn truncated_body_rejected() {
        let err = read_pnm(b"P6\n2 2\n255\n\x00\x01").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(read_pnm(b"P5\n0 1\n255\n").is_err());
    }

    #[test]
    fn depth_big_endian_decode() {
        let d = read_depth(b"P5\n1 1\n65535\n\x01\x2c").unwrap();
        assert_eq!(d.get(0, 0), 300);
        let zero = read_depth(b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert_eq!(zero.get(0, 0), 0);
    }

    #[test]
    fn depth_round_trip() {
        let d = DepthMap::new(2, 2, vec![0, 300, 65535, 1]).unwrap();
        assert_eq!(read_depth(&write_depth(&d)).unwrap(), d);
    }
}
