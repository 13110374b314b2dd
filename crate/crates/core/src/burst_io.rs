//! Raw burst types and their on-disk representation.
//!
//! A burst directory holds `frame_<k>.pgm` files (binary 16-bit big-endian
//! PGM) and a `burst.json` sidecar. Samples are never rescaled at I/O time;
//! black-level subtraction and normalization happen downstream.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METADATA_FILE: &str = "burst.json";

/// Bayer color filter array layout, named by the top-left 2x2 cell read row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// One of the four mosaic sites. `G1` shares rows with red, `G2` with blue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneId {
    R,
    G1,
    G2,
    B,
}

impl PlaneId {
    pub const ALL: [PlaneId; 4] = [PlaneId::R, PlaneId::G1, PlaneId::G2, PlaneId::B];

    /// Index into `wb_gains` (R, G1, G2, B).
    pub fn index(self) -> usize {
        match self {
            PlaneId::R => 0,
            PlaneId::G1 => 1,
            PlaneId::G2 => 2,
            PlaneId::B => 3,
        }
    }

    /// RGB channel index (0 = red, 1 = green, 2 = blue).
    pub fn channel(self) -> usize {
        match self {
            PlaneId::R => 0,
            PlaneId::G1 | PlaneId::G2 => 1,
            PlaneId::B => 2,
        }
    }
}

impl Cfa {
    /// Site at mosaic column `x`, row `y`.
    pub fn site(self, x: usize, y: usize) -> PlaneId {
        use PlaneId::*;
        let cell = match self {
            Cfa::Rggb => [[R, G1], [G2, B]],
            Cfa::Bggr => [[B, G2], [G1, R]],
            Cfa::Grbg => [[G1, R], [B, G2]],
            Cfa::Gbrg => [[G2, B], [R, G1]],
        };
        cell[y & 1][x & 1]
    }

    /// Offset `(dx, dy)` of `plane` inside the 2x2 cell.
    pub fn offset_of(self, plane: PlaneId) -> (usize, usize) {
        for dy in 0..2 {
            for dx in 0..2 {
                if self.site(dx, dy) == plane {
                    return (dx, dy);
                }
            }
        }
        unreachable!("every CFA contains all four sites")
    }

    pub fn name(self) -> &'static str {
        match self {
            Cfa::Rggb => "RGGB",
            Cfa::Bggr => "BGGR",
            Cfa::Grbg => "GRBG",
            Cfa::Gbrg => "GBRG",
        }
    }
}

impl std::str::FromStr for Cfa {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Cfa::Rggb),
            "BGGR" => Ok(Cfa::Bggr),
            "GRBG" => Ok(Cfa::Grbg),
            "GBRG" => Ok(Cfa::Gbrg),
            other => Err(format!("unknown CFA layout {other:?}")),
        }
    }
}

/// A single mosaiced raw frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BayerFrame {
    width: usize,
    height: usize,
    cfa: Cfa,
    samples: Vec<u16>,
}

impl BayerFrame {
    pub fn new(width: usize, height: usize, cfa: Cfa, samples: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(Error::InvalidFrame(format!(
                "dimensions {width}x{height} must be nonzero and even"
            )));
        }
        if samples.len() != width * height {
            return Err(Error::InvalidFrame(format!(
                "expected {} samples for {width}x{height}, got {}",
                width * height,
                samples.len()
            )));
        }
        Ok(BayerFrame {
            width,
            height,
            cfa,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cfa(&self) -> Cfa {
        self.cfa
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.samples[y * self.width + x]
    }

    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }
}

/// Shot/read noise curve: variance = lambda_s * signal + lambda_r, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl NoiseParams {
    /// Baseline curve at ISO 100 used when a burst carries no profile.
    pub const DEFAULT_BASELINE: NoiseParams = NoiseParams {
        lambda_s: 1e-4,
        lambda_r: 1e-6,
    };

    pub fn new(lambda_s: f64, lambda_r: f64) -> Result<Self> {
        let np = NoiseParams { lambda_s, lambda_r };
        np.validate()?;
        Ok(np)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_s.is_finite()
            && self.lambda_r.is_finite()
            && self.lambda_s >= 0.0
            && self.lambda_r >= 0.0
            && (self.lambda_s > 0.0 || self.lambda_r > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise parameters must be nonnegative and not both zero, got ({}, {})",
                self.lambda_s, self.lambda_r
            )))
        }
    }

    /// Variance predicted for signal level `x`.
    #[inline]
    pub fn variance(&self, x: f64) -> f64 {
        self.lambda_s * x + self.lambda_r
    }
}

fn default_ref_index() -> usize {
    0
}

/// Capture metadata shared by every frame of a burst.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstMetadata {
    pub cfa: Cfa,
    pub black_level: u32,
    pub white_level: u32,
    pub iso: f64,
    pub wb_gains: [f64; 4],
    pub color_matrix: [f64; 9],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_profile: Option<NoiseParams>,
    #[serde(default = "default_ref_index")]
    pub ref_index: usize,
}

impl BurstMetadata {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.black_level >= self.white_level || self.white_level > 65535 {
            return Err(format!(
                "need 0 <= black_level < white_level <= 65535, got black={} white={}",
                self.black_level, self.white_level
            ));
        }
        if self.wb_gains.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(format!("wb_gains must be positive, got {:?}", self.wb_gains));
        }
        if self.color_matrix.iter().any(|m| !m.is_finite()) {
            return Err("color_matrix entries must be finite".into());
        }
        match self.noise_profile {
            Some(np) => np.validate().map_err(|e| e.to_string())?,
            None => {
                if !(self.iso.is_finite() && self.iso >= 100.0) {
                    return Err(format!(
                        "iso must be >= 100 when no noise_profile is given, got {}",
                        self.iso
                    ));
                }
            }
        }
        Ok(())
    }

    /// Full-scale range `white - black` in raw counts.
    pub fn range(&self) -> f64 {
        f64::from(self.white_level - self.black_level)
    }

    /// Black-subtracted sample scaled so that white maps to 1. Not clamped.
    #[inline]
    pub fn normalize(&self, raw: u16) -> f64 {
        (f64::from(raw) - f64::from(self.black_level)) / self.range()
    }

    /// Inverse of [`normalize`](Self::normalize), clamped to `[black, white]` and rounded.
    #[inline]
    pub fn denormalize(&self, v: f64) -> u16 {
        let raw = v * self.range() + f64::from(self.black_level);
        raw.round()
            .clamp(f64::from(self.black_level), f64::from(self.white_level)) as u16
    }
}

/// Reference frame plus alternates, all sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBurst {
    frames: Vec<BayerFrame>,
    meta: BurstMetadata,
}

impl RawBurst {
    pub fn new(frames: Vec<BayerFrame>, meta: BurstMetadata) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidBurst(format!(
                "burst too short: {} frame(s), need at least 2",
                frames.len()
            )));
        }
        let first = &frames[0];
        for (k, f) in frames.iter().enumerate().skip(1) {
            if f.width != first.width || f.height != first.height || f.cfa != first.cfa {
                return Err(Error::InvalidBurst(format!(
                    "frame {k} is {}x{} {} but frame 0 is {}x{} {}",
                    f.width,
                    f.height,
                    f.cfa.name(),
                    first.width,
                    first.height,
                    first.cfa.name()
                )));
            }
        }
        if first.cfa != meta.cfa {
            return Err(Error::InvalidBurst(format!(
                "frames are {} but metadata declares {}",
                first.cfa.name(),
                meta.cfa.name()
            )));
        }
        meta.validate().map_err(Error::InvalidBurst)?;
        if meta.ref_index >= frames.len() {
            return Err(Error::InvalidBurst(format!(
                "ref_index {} out of range for {} frames",
                meta.ref_index,
                frames.len()
            )));
        }
        Ok(RawBurst { frames, meta })
    }

    pub fn frames(&self) -> &[BayerFrame] {
        &self.frames
    }

    pub fn meta(&self) -> &BurstMetadata {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference(&self) -> &BayerFrame {
        &self.frames[self.meta.ref_index]
    }

    /// Frame indices with the reference first, alternates in burst order.
    pub fn processing_order(&self) -> Vec<usize> {
        let r = self.meta.ref_index;
        std::iter::once(r)
            .chain((0..self.frames.len()).filter(|&k| k != r))
            .collect()
    }

    pub fn with_ref_index(mut self, ref_index: usize) -> Result<Self> {
        if ref_index >= self.frames.len() {
            return Err(Error::InvalidBurst(format!(
                "ref_index {ref_index} out of range for {} frames",
                self.frames.len()
            )));
        }
        self.meta.ref_index = ref_index;
        Ok(self)
    }

    pub fn into_parts(self) -> (Vec<BayerFrame>, BurstMetadata) {
        (self.frames, self.meta)
    }
}

/// Noise curve for this burst: the stored profile if any, otherwise the
/// ISO-100 baseline scaled by `a = iso / 100` as `(a * lambda_s, a^2 * lambda_r)`.
pub fn derive_noise_params(meta: &BurstMetadata, baseline: NoiseParams) -> NoiseParams {
    if let Some(profile) = meta.noise_profile {
        return profile;
    }
    let alpha = meta.iso / 100.0;
    NoiseParams {
        lambda_s: alpha * baseline.lambda_s,
        lambda_r: alpha * alpha * baseline.lambda_r,
    }
}

fn frame_index(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("frame_")?.strip_suffix(".pgm")?.parse().ok()
}

/// Load `frame_<k>.pgm` files (ordered by `k`) and `burst.json` from `dir`.
pub fn load_burst(dir: impl AsRef<Path>) -> Result<RawBurst> {
    let dir = dir.as_ref();
    let meta_path = dir.join(METADATA_FILE);
    if !meta_path.is_file() {
        return Err(Error::MissingMetadata(meta_path));
    }
    let meta = read_metadata(&meta_path)?;

    let mut indexed = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(k) = frame_index(&path) {
            indexed.push((k, path));
        }
    }
    indexed.sort();
    if indexed.len() < 2 {
        return Err(Error::BurstTooShort {
            dir: dir.to_path_buf(),
            found: indexed.len(),
        });
    }

    let mut frames: Vec<BayerFrame> = Vec::with_capacity(indexed.len());
    let first_path = indexed[0].1.clone();
    for (_, path) in &indexed {
        let frame = read_raw16(path, meta.cfa)?;
        if let Some(first) = frames.first() {
            if (frame.width, frame.height) != (first.width, first.height) {
                return Err(Error::FrameMismatch {
                    first: first_path,
                    first_dims: (first.width, first.height),
                    second: path.clone(),
                    second_dims: (frame.width, frame.height),
                });
            }
        }
        frames.push(frame);
    }
    if meta.ref_index >= frames.len() {
        return Err(Error::Metadata {
            path: meta_path,
            reason: format!("ref_index {} out of range for {} frames", meta.ref_index, frames.len()),
        });
    }
    RawBurst::new(frames, meta)
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<BurstMetadata> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: BurstMetadata = serde_json::from_str(&text).map_err(|e| Error::Metadata {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    meta.validate().map_err(|reason| Error::Metadata {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(meta)
}

pub fn write_metadata(meta: &BurstMetadata, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Write a burst in the directory layout accepted by [`load_burst`].
pub fn save_burst(burst: &RawBurst, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, frame) in burst.frames().iter().enumerate() {
        write_raw16(frame, dir.join(format!("frame_{k}.pgm")))?;
    }
    write_metadata(burst.meta(), dir.join(METADATA_FILE))
}

fn pgm_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pgm_header(bytes: &[u8], path: &Path) -> Result<PgmHeader> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(pgm_err(path, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // whitespace and comments between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err(path, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_err(path, "missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(pgm_err(path, format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(PgmHeader {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos + 1,
    })
}

/// Read a binary PGM into a frame with the given CFA. 8-bit files are widened, never rescaled.
pub fn read_raw16(path: impl AsRef<Path>, cfa: Cfa) -> Result<BayerFrame> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let header = parse_pgm_header(&bytes, path)?;
    let count = header.width * header.height;
    let data = &bytes[header.data_offset..];
    let samples: Vec<u16> = if header.maxval > 255 {
        if data.len() < 2 * count {
            return Err(pgm_err(path, "truncated pixel data"));
        }
        data.chunks_exact(2)
            .take(count)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        if data.len() < count {
            return Err(pgm_err(path, "truncated pixel data"));
        }
        data[..count].iter().map(|&b| u16::from(b)).collect()
    };
    BayerFrame::new(header.width, header.height, cfa, samples).map_err(|e| match e {
        Error::InvalidFrame(reason) => pgm_err(path, reason),
        other => other,
    })
}

fn write_pgm16(width: usize, height: usize, samples: &[u16], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        body.extend_from_slice(&s.to_be_bytes());
    }
    write!(w, "P5\n{width} {height}\n65535\n")
        .and_then(|_| w.write_all(&body))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Write a frame as 16-bit big-endian binary PGM (maxval 65535).
pub fn write_raw16(frame: &BayerFrame, path: impl AsRef<Path>) -> Result<()> {
    write_pgm16(frame.width, frame.height, &frame.samples, path.as_ref())
}

/// Debug helper: write a real-valued image in `[0, 1]` as a 16-bit PGM.
pub fn write_gray16(width: usize, height: usize, values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let samples: Vec<u16> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    write_pgm16(width, height, &samples, path.as_ref())
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3, "RGB buffer size");
        Rgb8Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Write an 8-bit RGB PNG.
pub fn write_rgb8(image: &Rgb8Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&image.data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Read an 8-bit RGB PNG written by [`write_rgb8`].
pub fn read_rgb8(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit RGB, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(Rgb8Image::new(info.width as usize, info.height as usize, buf))
}
