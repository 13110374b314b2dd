//! Simplified finishing: raw mosaic to display-ready 8-bit sRGB.
//!
//! normalize -> white balance -> demosaic -> color matrix -> tone map ->
//! S-curve -> sRGB encode -> sharpen -> quantize. The minimal variant stops
//! short of tone mapping, contrast and sharpening.

use rayon::prelude::*;

use crate::burst_io::{BayerFrame, BurstMetadata, Cfa, PlaneId, Rgb8Image};
use crate::error::{Error, Result};
use crate::pyramid::{convolve_separable, gaussian_kernel, reflect_index, GrayImage};

/// Three-channel real image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height, "pixel count must match dimensions");
        RgbImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage::new(self.width, self.height, self.data.iter().map(|p| p[c]).collect())
    }

    fn from_channels(ch: [GrayImage; 3]) -> Self {
        let (w, h) = (ch[0].width(), ch[0].height());
        let data = (0..w * h)
            .map(|i| [ch[0].data()[i], ch[1].data()[i], ch[2].data()[i]])
            .collect();
        RgbImage::new(w, h, data)
    }

    fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        RgbImage::new(self.width, self.height, self.data.par_iter().map(|&p| f(p)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpenPass {
    pub alpha: f64,
    pub sigma: f64,
    /// Minimum `|I - blur|` for the pass to act on a pixel.
    pub threshold: f64,
}

pub const DEFAULT_SHARPEN: [SharpenPass; 3] = [
    SharpenPass {
        alpha: 1.0,
        sigma: 1.0,
        threshold: 0.02,
    },
    SharpenPass {
        alpha: 0.5,
        sigma: 2.0,
        threshold: 0.04,
    },
    SharpenPass {
        alpha: 0.5,
        sigma: 4.0,
        threshold: 0.06,
    },
];

/// Largest S-curve strength that keeps the curve monotone on `[0, 1]`.
pub const MAX_CONTRAST_ALPHA: f64 = 1.0 / std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinishConfig {
    /// Exposure multiplier of the synthetic long exposure.
    pub gain: f64,
    pub contrast_alpha: f64,
    pub sharpen: [SharpenPass; 3],
    /// Skip tone mapping, contrast and sharpening.
    pub minimal: bool,
}

impl Default for FinishConfig {
    fn default() -> Self {
        FinishConfig {
            gain: 8.0,
            contrast_alpha: 0.08,
            sharpen: DEFAULT_SHARPEN,
            minimal: false,
        }
    }
}

impl FinishConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 1.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("gain must be >= 1, got {}", self.gain)));
        }
        if !(self.contrast_alpha >= 0.0 && self.contrast_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "contrast alpha must be >= 0, got {}",
                self.contrast_alpha
            )));
        }
        for p in &self.sharpen {
            if !(p.sigma > 0.0 && p.alpha.is_finite() && p.threshold >= 0.0) {
                return Err(Error::Config(format!("invalid sharpening pass {p:?}")));
            }
        }
        Ok(())
    }
}

/// Black-subtracted, white-normalized mosaic clamped to `[0, 1]`.
pub fn normalize_black_white(frame: &BayerFrame, meta: &BurstMetadata) -> GrayImage {
    let data = frame
        .samples()
        .iter()
        .map(|&s| meta.normalize(s).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(frame.width(), frame.height(), data)
}

/// Multiply every site by its channel gain (`[R, G1, G2, B]`) and clamp.
pub fn white_balance(mosaic: &GrayImage, cfa: Cfa, gains: [f64; 4]) -> GrayImage {
    GrayImage::from_fn(mosaic.width(), mosaic.height(), |x, y| {
        (mosaic.get(x, y) * gains[cfa.site(x, y).index()]).clamp(0.0, 1.0)
    })
}

// Gradient-corrected 5x5 kernels, in eighths, indexed [dy + 2][dx + 2].
const GREEN_AT_CHROMA: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, 2.0, 0.0, 0.0],
    [-1.0, 2.0, 4.0, 2.0, -1.0],
    [0.0, 0.0, 2.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0, 0.0],
];
/// Chroma at a green site whose same-colored neighbors sit left and right.
const CHROMA_ROW: [[f64; 5]; 5] = [
    [0.0, 0.0, 0.5, 0.0, 0.0],
    [0.0, -1.0, 0.0, -1.0, 0.0],
    [-1.0, 4.0, 5.0, 4.0, -1.0],
    [0.0, -1.0, 0.0, -1.0, 0.0],
    [0.0, 0.0, 0.5, 0.0, 0.0],
];
const CHROMA_COL: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.0, 0.0, 0.0],
    [0.0, -1.0, 4.0, -1.0, 0.0],
    [0.5, 0.0, 5.0, 0.0, 0.5],
    [0.0, -1.0, 4.0, -1.0, 0.0],
    [0.0, 0.0, -1.0, 0.0, 0.0],
];
const CHROMA_AT_CHROMA: [[f64; 5]; 5] = [
    [0.0, 0.0, -1.5, 0.0, 0.0],
    [0.0, 2.0, 0.0, 2.0, 0.0],
    [-1.5, 0.0, 6.0, 0.0, -1.5],
    [0.0, 2.0, 0.0, 2.0, 0.0],
    [0.0, 0.0, -1.5, 0.0, 0.0],
];

#[inline]
fn apply_kernel(m: &GrayImage, x: usize, y: usize, k: &[[f64; 5]; 5]) -> f64 {
    let (w, h) = (m.width(), m.height());
    let mut acc = 0.0;
    for (dy, row) in k.iter().enumerate() {
        let yy = reflect_index(y as isize + dy as isize - 2, h);
        for (dx, &c) in row.iter().enumerate() {
            if c != 0.0 {
                acc += c * m.get(reflect_index(x as isize + dx as isize - 2, w), yy);
            }
        }
    }
    acc / 8.0
}

/// Gradient-corrected bilinear demosaic with reflect-101 borders (which keep the CFA phase).
pub fn demosaic(mosaic: &GrayImage, cfa: Cfa) -> RgbImage {
    let (w, h) = (mosaic.width(), mosaic.height());
    let data: Vec<[f64; 3]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let c = mosaic.get(x, y);
                let px = match cfa.site(x, y) {
                    PlaneId::R => [
                        c,
                        apply_kernel(mosaic, x, y, &GREEN_AT_CHROMA),
                        apply_kernel(mosaic, x, y, &CHROMA_AT_CHROMA),
                    ],
                    PlaneId::B => [
                        apply_kernel(mosaic, x, y, &CHROMA_AT_CHROMA),
                        apply_kernel(mosaic, x, y, &GREEN_AT_CHROMA),
                        c,
                    ],
                    PlaneId::G1 => [
                        apply_kernel(mosaic, x, y, &CHROMA_ROW),
                        c,
                        apply_kernel(mosaic, x, y, &CHROMA_COL),
                    ],
                    PlaneId::G2 => [
                        apply_kernel(mosaic, x, y, &CHROMA_COL),
                        c,
                        apply_kernel(mosaic, x, y, &CHROMA_ROW),
                    ],
                };
                px.map(|v| v.clamp(0.0, 1.0))
            })
        })
        .collect();
    RgbImage::new(w, h, data)
}

/// Row-major 3x3 matrix applied per pixel, then clamped.
pub fn color_correct(img: &RgbImage, m: &[f64; 9]) -> RgbImage {
    img.map(|p| std::array::from_fn(|r| (m[3 * r] * p[0] + m[3 * r + 1] * p[1] + m[3 * r + 2] * p[2]).clamp(0.0, 1.0)))
}

pub fn srgb_encode_value(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.0031308 {
        12.92 * x
    } else {
        // 1.055 p - 0.055, arranged so that 1 maps to exactly 1
        1.055f64.mul_add(x.powf(1.0 / 2.4) - 1.0, 1.0)
    }
}

pub fn srgb_decode_value(y: f64) -> f64 {
    let y = y.clamp(0.0, 1.0);
    if y <= 0.04045 {
        y / 12.92
    } else {
        ((y + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_encode(img: &RgbImage) -> RgbImage {
    img.map(|p| p.map(srgb_encode_value))
}

pub fn srgb_decode(img: &RgbImage) -> RgbImage {
    img.map(|p| p.map(srgb_decode_value))
}

/// `max(0, min(x - alpha sin(2 pi x), 1))` with alpha clamped to `[0, 1/(2 pi)]`.
pub fn s_curve_value(x: f64, alpha: f64) -> f64 {
    let a = alpha.clamp(0.0, MAX_CONTRAST_ALPHA);
    (x - a * (std::f64::consts::TAU * x).sin()).clamp(0.0, 1.0)
}

pub fn s_curve_contrast(img: &RgbImage, alpha: f64) -> RgbImage {
    img.map(|p| p.map(|v| s_curve_value(v, alpha)))
}

const FUSION_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn pyr_down(img: &GrayImage) -> GrayImage {
    let blurred = convolve_separable(img, &FUSION_KERNEL);
    GrayImage::from_fn(img.width().div_ceil(2), img.height().div_ceil(2), |x, y| {
        blurred.get(2 * x, 2 * y)
    })
}

/// Zero-insertion upsampling to `w x h` followed by the doubled fusion kernel.
fn pyr_up(img: &GrayImage, w: usize, h: usize) -> GrayImage {
    let sparse = GrayImage::from_fn(w, h, |x, y| {
        if x % 2 == 0 && y % 2 == 0 {
            4.0 * img.get(x / 2, y / 2)
        } else {
            0.0
        }
    });
    convolve_separable(&sparse, &FUSION_KERNEL)
}

fn zip_with(a: &GrayImage, b: &GrayImage, f: impl Fn(f64, f64) -> f64) -> GrayImage {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    GrayImage::new(a.width(), a.height(), data)
}

fn gaussian_stack(img: &GrayImage, depth: usize) -> Vec<GrayImage> {
    let mut levels = vec![img.clone()];
    for _ in 1..depth {
        let next = pyr_down(levels.last().expect("nonempty"));
        levels.push(next);
    }
    levels
}

fn laplacian_stack(img: &GrayImage, depth: usize) -> Vec<GrayImage> {
    let g = gaussian_stack(img, depth);
    let mut out: Vec<GrayImage> = g
        .windows(2)
        .map(|p| zip_with(&p[0], &pyr_up(&p[1], p[0].width(), p[0].height()), |a, b| a - b))
        .collect();
    out.push(g[depth - 1].clone());
    out
}

fn well_exposedness(v: f64) -> f64 {
    (-(v - 0.5).powi(2) / (2.0 * 0.2 * 0.2)).exp()
}

/// Number of fusion pyramid levels for an image: `floor(log2(min dim)) - 1`, at least 1.
pub fn fusion_depth(width: usize, height: usize) -> usize {
    let m = width.min(height).max(1);
    ((usize::BITS - 1 - m.leading_zeros()) as usize)
        .saturating_sub(1)
        .max(1)
}

/// Multi-scale exposure fusion of gamma-encoded grayscale exposures using
/// well-exposedness weights only.
pub fn exposure_fusion(exposures: &[GrayImage]) -> GrayImage {
    let (w, h) = (exposures[0].width(), exposures[0].height());
    let depth = fusion_depth(w, h);
    let raw: Vec<GrayImage> = exposures
        .iter()
        .map(|e| GrayImage::new(w, h, e.data().iter().map(|&v| well_exposedness(v)).collect()))
        .collect();
    let total: Vec<f64> = (0..w * h).map(|i| raw.iter().map(|r| r.data()[i]).sum()).collect();

    let mut fused: Option<Vec<GrayImage>> = None;
    for (e, r) in exposures.iter().zip(&raw) {
        let weight = GrayImage::new(w, h, r.data().iter().zip(&total).map(|(a, t)| a / t).collect());
        let gw = gaussian_stack(&weight, depth);
        let le = laplacian_stack(e, depth);
        let contrib: Vec<GrayImage> = gw.iter().zip(&le).map(|(a, b)| zip_with(a, b, |x, y| x * y)).collect();
        fused = Some(match fused {
            None => contrib,
            Some(acc) => acc
                .iter()
                .zip(&contrib)
                .map(|(a, b)| zip_with(a, b, |x, y| x + y))
                .collect(),
        });
    }
    let levels = fused.expect("at least one exposure");
    let mut img = levels[depth - 1].clone();
    for lap in levels[..depth - 1].iter().rev() {
        img = zip_with(lap, &pyr_up(&img, lap.width(), lap.height()), |a, b| a + b);
    }
    GrayImage::new(w, h, img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Pixels darker than this keep their value through tone mapping.
const TONE_MAP_FLOOR: f64 = 1e-6;

/// Fuse a short and a `gain`-times brighter synthetic exposure of the luminance,
/// then rescale each pixel's channels by the same factor.
pub fn tone_map(img: &RgbImage, gain: f64) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let gray: Vec<f64> = img.data().iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let short = GrayImage::new(w, h, gray.iter().map(|&g| srgb_encode_value(g)).collect());
    let long = GrayImage::new(
        w,
        h,
        gray.iter().map(|&g| srgb_encode_value((gain * g).min(1.0))).collect(),
    );
    let fused = exposure_fusion(&[short, long]);
    let data = img
        .data()
        .iter()
        .zip(&gray)
        .zip(fused.data())
        .map(|((p, &g), &f)| {
            let scale = if g < TONE_MAP_FLOOR {
                1.0
            } else {
                srgb_decode_value(f) / g
            };
            p.map(|v| (v * scale).clamp(0.0, 1.0))
        })
        .collect();
    RgbImage::new(w, h, data)
}

/// Mean of three thresholded unsharp masks. Pixels no pass acts on are returned unchanged.
pub fn sharpen(img: &RgbImage, passes: &[SharpenPass]) -> RgbImage {
    let n = passes.len() as f64;
    let channels: [GrayImage; 3] = std::array::from_fn(|c| {
        let plane = img.channel(c);
        let blurs: Vec<GrayImage> = passes
            .iter()
            .map(|p| convolve_separable(&plane, &gaussian_kernel(p.sigma)))
            .collect();
        let data = plane
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut delta = 0.0;
                let mut acted = false;
                for (p, b) in passes.iter().zip(&blurs) {
                    let d = v - b.data()[i];
                    if d.abs() > p.threshold {
                        delta += p.alpha * d;
                        acted = true;
                    }
                }
                if acted {
                    (v + delta / n).clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        GrayImage::new(plane.width(), plane.height(), data)
    });
    RgbImage::from_channels(channels)
}

/// `floor(255 x + 0.5)` clamped to `[0, 255]`.
pub fn quantize8(img: &RgbImage) -> Rgb8Image {
    let data = img
        .data()
        .iter()
        .flat_map(|p| p.map(|v| (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8))
        .collect();
    Rgb8Image::new(img.width(), img.height(), data)
}

/// Linear sensor RGB after normalization, white balance, demosaic and color matrix.
pub fn develop_linear(frame: &BayerFrame, meta: &BurstMetadata) -> RgbImage {
    let mosaic = normalize_black_white(frame, meta);
    let balanced = white_balance(&mosaic, frame.cfa(), meta.wb_gains);
    color_correct(&demosaic(&balanced, frame.cfa()), &meta.color_matrix)
}

/// Full finishing of a mosaic, before quantization.
pub fn finish_rgb(frame: &BayerFrame, meta: &BurstMetadata, cfg: &FinishConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let linear = develop_linear(frame, meta);
    if cfg.minimal {
        return Ok(srgb_encode(&linear));
    }
    let toned = tone_map(&linear, cfg.gain);
    let contrasted = s_curve_contrast(&toned, cfg.contrast_alpha);
    Ok(sharpen(&srgb_encode(&contrasted), &cfg.sharpen))
}

pub fn finish_pipeline(frame: &BayerFrame, meta: &BurstMetadata, cfg: &FinishConfig) -> Result<Rgb8Image> {
    finish_rgb(frame, meta, cfg).map(|img| quantize8(&img))
}
