//! Pixel-level primitives: RGB face images, binary region masks, hard
//! compositing, masked absolute differences, bilinear resizing and PNG I/O.
//!
//! All differences are measured on the 0-255 integer channel scale and
//! averaged over channels and included pixels.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::instructions::AttributeKind;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    InvalidDimensions(u32, u32),
    #[error("buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("cannot union an empty list of masks")]
    EmptyList,
    #[error("unsupported PNG format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed PNG: {0}")]
    Decode(String),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(ImagingError::InvalidDimensions(width, height));
    }
    Ok(())
}

fn same_dims(left: (u32, u32), right: (u32, u32)) -> Result<()> {
    if left != right {
        return Err(ImagingError::DimensionMismatch { left, right });
    }
    Ok(())
}

/// Row-major RGB8 image identified by a digest of its dimensions and pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct FaceImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    content_id: String,
}

impl fmt::Debug for FaceImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FaceImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("content_id", &self.content_id)
            .finish()
    }
}

impl FaceImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        let content_id = content_digest(width, height, &pixels);
        Ok(Self {
            width,
            height,
            pixels,
            content_id,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Hex digest of the dimensions and pixel bytes.
    pub fn content_id(&self) -> &str {
        &self.content_id
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.pixels)
    }

    /// Decodes an 8-bit RGB or RGBA PNG. Alpha is dropped; grayscale is
    /// replicated across the three channels.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = decode_png(bytes)?;
        let pixels = match decoded.color {
            png::ColorType::Rgb => decoded.data,
            png::ColorType::Rgba => {
                log::warn!("dropping alpha channel of RGBA PNG");
                decoded.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            }
            png::ColorType::Grayscale => decoded.data.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => {
                log::warn!("dropping alpha channel of grayscale PNG");
                decoded.data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            other => return Err(ImagingError::UnsupportedFormat(format!("color type {other:?}"))),
        };
        Self::new(decoded.width, decoded.height, pixels)
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<FaceImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    FaceImage::from_png_bytes(&bytes)
}

pub fn save_png(img: &FaceImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, img.to_png_bytes()?).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn content_digest(width: u32, height: u32, pixels: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"rgb8");
    hasher.update(width.to_le_bytes());
    hasher.update(height.to_le_bytes());
    hasher.update(pixels);
    hex::encode(&hasher.finalize()[..16])
}

/// Binary per-pixel mask; `true` marks the target region.
#[derive(Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    attribute: Option<AttributeKind>,
}

impl fmt::Debug for RegionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegionMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("selected", &self.count_selected())
            .field("attribute", &self.attribute)
            .finish()
    }
}

impl RegionMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height)?;
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(ImagingError::BufferLength {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
            attribute: None,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Result<Self> {
        check_dims(width, height)?;
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Result<Self> {
        check_dims(width, height)?;
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    /// Mask selecting the half-open rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn with_attribute(mut self, kind: AttributeKind) -> Self {
        self.attribute = Some(kind);
        self
    }

    pub fn attribute(&self) -> Option<AttributeKind> {
        self.attribute
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count_selected(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Grayscale 8-bit PNG with selected pixels at 255.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let data: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &data)
    }

    /// Any nonzero (non-alpha) sample marks the pixel as selected.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = decode_png(bytes)?;
        let (stride, channels) = match decoded.color {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            other => return Err(ImagingError::UnsupportedFormat(format!("mask color type {other:?}"))),
        };
        let bits = decoded
            .data
            .chunks_exact(stride)
            .map(|p| p[..channels].iter().any(|&v| v != 0))
            .collect();
        Self::new(decoded.width, decoded.height, bits)
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RegionMask::from_png_bytes(&bytes)
}

pub fn save_mask(mask: &RegionMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mask.to_png_bytes()?).map_err(|source| ImagingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Takes `edited` where the mask is set and `base` elsewhere. Hard
/// selection, no blending.
pub fn composite(base: &FaceImage, edited: &FaceImage, mask: &RegionMask) -> Result<FaceImage> {
    same_dims(base.dims(), edited.dims())?;
    same_dims(base.dims(), mask.dims())?;
    let mut pixels = base.pixels.clone();
    for (i, &selected) in mask.bits.iter().enumerate() {
        if selected {
            pixels[i * 3..i * 3 + 3].copy_from_slice(&edited.pixels[i * 3..i * 3 + 3]);
        }
    }
    FaceImage::new(base.width, base.height, pixels)
}

/// Result of [`masked_mean_abs_diff`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedDiff {
    /// Mean absolute channel difference on the 0-255 scale.
    pub value: f64,
    pub included_pixels: usize,
    /// Set when every pixel was excluded; `value` is then 0.
    pub empty_region: bool,
}

/// Mean of `|a - b|` over all channels of the pixels not selected by
/// `exclude` (all pixels when `exclude` is `None`).
pub fn masked_mean_abs_diff(a: &FaceImage, b: &FaceImage, exclude: Option<&RegionMask>) -> Result<MaskedDiff> {
    same_dims(a.dims(), b.dims())?;
    if let Some(mask) = exclude {
        same_dims(a.dims(), mask.dims())?;
    }
    let mut total: u64 = 0;
    let mut included = 0usize;
    for (i, (pa, pb)) in a.pixels.chunks_exact(3).zip(b.pixels.chunks_exact(3)).enumerate() {
        if exclude.is_some_and(|m| m.bits[i]) {
            continue;
        }
        included += 1;
        total += pa.iter().zip(pb).map(|(&x, &y)| x.abs_diff(y) as u64).sum::<u64>();
    }
    if included == 0 {
        return Ok(MaskedDiff {
            value: 0.0,
            included_pixels: 0,
            empty_region: true,
        });
    }
    Ok(MaskedDiff {
        value: total as f64 / (included * 3) as f64,
        included_pixels: included,
        empty_region: false,
    })
}

/// Per-pixel OR of the masks. The attribute label is cleared.
pub fn union_masks(masks: &[RegionMask]) -> Result<RegionMask> {
    let (first, rest) = masks.split_first().ok_or(ImagingError::EmptyList)?;
    let mut bits = first.bits.clone();
    for mask in rest {
        same_dims(first.dims(), mask.dims())?;
        for (acc, &b) in bits.iter_mut().zip(&mask.bits) {
            *acc |= b;
        }
    }
    RegionMask::new(first.width, first.height, bits)
}

/// Bilinear resize with pixel-center alignment. Same-size requests return a
/// bit-exact copy.
pub fn resize(img: &FaceImage, width: u32, height: u32) -> Result<FaceImage> {
    check_dims(width, height)?;
    if img.dims() == (width, height) {
        return Ok(img.clone());
    }
    let xs = sample_positions(img.width, width);
    let ys = sample_positions(img.height, height);
    let src_w = img.width as usize;
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| img.pixels[(y * src_w + x) * 3 + c] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    FaceImage::new(width, height, pixels)
}

fn sample_positions(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = s.floor();
            let hi = (lo + 1.0).min(last);
            (lo as usize, hi as usize, s - lo)
        })
        .collect()
}

struct DecodedPng {
    width: u32,
    height: u32,
    color: png::ColorType,
    data: Vec<u8>,
}

fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    // Palette and sub-byte grayscale are expanded to 8 bits per sample.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| ImagingError::Decode(e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImagingError::UnsupportedFormat("16-bit samples".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImagingError::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImagingError::UnsupportedFormat(format!(
            "bit depth {:?}",
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width,
        height: info.height,
        color: info.color_type,
        data: buf,
    })
}

fn encode_png(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
    }
    Ok(out)
}
