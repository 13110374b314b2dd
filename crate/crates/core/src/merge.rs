//! Fourier-domain merging of aligned tiles, one Bayer plane at a time.
//!
//! Each plane is cut into half-overlapped `n x n` tiles on the same grid
//! geometry the aligner uses at its finest level. For every tile the
//! reference and its aligned alternates are transformed with an unnormalized
//! 2D DFT, merged pairwise with a Wiener-like shrinkage, shrunk once more
//! against a frequency-shaped noise floor, transformed back, windowed with a
//! raised cosine and accumulated.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::align::{MotionField, TileGrid};
use crate::burst_io::{BayerFrame, BurstMetadata, Cfa, NoiseParams, PlaneId, RawBurst};
use crate::error::{Error, Result};
use crate::fft2::{Fft2, Fft2Scratch};
use crate::pyramid::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    pub tile_size: usize,
    /// Temporal denoising strength.
    pub tau: f64,
    /// Spatial denoising strength.
    pub spatial_strength: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            tile_size: 16,
            tau: 75.0,
            spatial_strength: 0.1,
        }
    }
}

impl MergeConfig {
    /// Spectral scale factor `n^2 * (1/4^2) * 2`.
    pub fn k(&self) -> f64 {
        let n = self.tile_size as f64;
        n * n / 16.0 * 2.0
    }

    /// Temporal constant `c = k * tau`.
    pub fn c(&self) -> f64 {
        self.k() * self.tau
    }

    /// Slope of the spatial noise-shaping ramp, `gamma = (k / 2) * s`.
    pub fn gamma(&self) -> f64 {
        self.k() / 2.0 * self.spatial_strength
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 2 || !self.tile_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "merge tile size {} must be even and >= 2",
                self.tile_size
            )));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.spatial_strength.is_nan() || self.spatial_strength < 0.0 {
            return Err(Error::Config(format!(
                "spatial strength must be >= 0, got {}",
                self.spatial_strength
            )));
        }
        Ok(())
    }
}

/// One of the four half-resolution Bayer planes, black-subtracted and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPlane {
    pub id: PlaneId,
    pub image: GrayImage,
}

/// Split a mosaic into its R, G1, G2, B planes (in that order).
pub fn split_planes(frame: &BayerFrame, meta: &BurstMetadata) -> [ColorPlane; 4] {
    PlaneId::ALL.map(|id| {
        let (dx, dy) = frame.cfa().offset_of(id);
        let image = GrayImage::from_fn(frame.width() / 2, frame.height() / 2, |x, y| {
            meta.normalize(frame.get(2 * x + dx, 2 * y + dy))
        });
        ColorPlane { id, image }
    })
}

/// Reassemble planes into a mosaic, restoring raw levels and clamping to `[black, white]`.
pub fn interleave_planes(planes: &[ColorPlane; 4], cfa: Cfa, meta: &BurstMetadata) -> Result<BayerFrame> {
    let (pw, ph) = (planes[0].image.width(), planes[0].image.height());
    let (w, h) = (2 * pw, 2 * ph);
    let mut samples = vec![0u16; w * h];
    for plane in planes {
        let (dx, dy) = cfa.offset_of(plane.id);
        for y in 0..ph {
            for x in 0..pw {
                samples[(2 * y + dy) * w + 2 * x + dx] = meta.denormalize(plane.image.get(x, y));
            }
        }
    }
    BayerFrame::new(w, h, cfa, samples)
}

/// Reference tile plus its aligned alternates for one plane, all `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileStack {
    pub n: usize,
    pub tiles: Vec<Vec<f64>>,
    pub position: (usize, usize),
}

impl TileStack {
    pub fn new(n: usize, tiles: Vec<Vec<f64>>, position: (usize, usize)) -> Self {
        assert!(!tiles.is_empty(), "stack needs the reference tile");
        assert!(tiles.iter().all(|t| t.len() == n * n), "tiles must be n x n");
        TileStack { n, tiles, position }
    }

    pub fn reference(&self) -> &[f64] {
        &self.tiles[0]
    }
}

/// Root mean square of a tile.
pub fn tile_rms(tile: &[f64]) -> f64 {
    (tile.iter().map(|v| v * v).sum::<f64>() / tile.len() as f64).sqrt()
}

/// Noise variance assigned to a reference tile: `lambda_s * rms + lambda_r`.
pub fn tile_noise_variance(reference: &[f64], np: &NoiseParams) -> f64 {
    np.variance(tile_rms(reference))
}

/// Shrinkage weight `|D|^2 / (|D|^2 + c sigma^2)`, defined as 0 when both terms vanish.
#[inline]
pub fn wiener_weight(d2: f64, noise: f64) -> f64 {
    let denom = d2 + noise;
    if denom > 0.0 {
        d2 / denom
    } else {
        0.0
    }
}

/// Average of the pairwise merges of every spectrum with `spectra[0]`.
///
/// Evaluated as `T0 - (1/N) sum (1 - A_z) D_z`, which is the same average but
/// returns the reference bit-exactly whenever every `D_z` vanishes.
fn temporal_merge_spectra(spectra: &[Vec<Complex64>], noise: f64, out: &mut [Complex64]) {
    let t0 = &spectra[0];
    out.iter_mut().for_each(|o| *o = Complex64::default());
    for tz in &spectra[1..] {
        for ((o, &r), &a) in out.iter_mut().zip(t0).zip(tz) {
            let d = r - a;
            *o += d * (1.0 - wiener_weight(d.norm_sqr(), noise));
        }
    }
    let inv = 1.0 / spectra.len() as f64;
    for (o, &r) in out.iter_mut().zip(t0) {
        *o = r - *o * inv;
    }
}

/// Temporally merged spectrum of the reference tile.
pub fn temporal_merge_stack(stack: &TileStack, sigma2: f64, cfg: &MergeConfig) -> Vec<Complex64> {
    let fft = Fft2::square(stack.n);
    let mut scratch = fft.make_scratch();
    let spectra: Vec<Vec<Complex64>> = stack.tiles.iter().map(|t| forward(&fft, &mut scratch, t)).collect();
    let mut out = vec![Complex64::default(); stack.n * stack.n];
    temporal_merge_spectra(&spectra, cfg.c() * sigma2, &mut out);
    out
}

/// Euclidean norm of the wrapped frequency index of bin `(x, y)`.
#[inline]
fn frequency_radius(x: usize, y: usize, n: usize) -> f64 {
    let fx = x.min(n - x) as f64;
    let fy = y.min(n - y) as f64;
    fx.hypot(fy)
}

/// Per-bin shrinkage `|T|^2 / (|T|^2 + gamma |w| sigma^2 / N) * T`.
pub fn spatial_denoise_spectrum(spectrum: &mut [Complex64], n: usize, sigma2: f64, frames: usize, cfg: &MergeConfig) {
    let gamma = cfg.gamma();
    if gamma == 0.0 {
        return;
    }
    let noise = sigma2 / frames as f64;
    for y in 0..n {
        for x in 0..n {
            let shaped = gamma * frequency_radius(x, y, n) * noise;
            let t = &mut spectrum[y * n + x];
            *t *= wiener_weight(t.norm_sqr(), shaped);
        }
    }
}

/// One-dimensional raised cosine `1/2 - 1/2 cos(2 pi (x + 1/2) / n)`, mirrored so it is exactly symmetric.
pub fn raised_cosine_1d(n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|x| 0.5 - 0.5 * (std::f64::consts::TAU * (x as f64 + 0.5) / n as f64).cos())
        .collect();
    for x in 0..n / 2 {
        w[n - 1 - x] = w[x];
    }
    w
}

/// Separable 2D window, row-major `n x n`.
pub fn raised_cosine_window(n: usize) -> Vec<f64> {
    assert!(n >= 2 && n.is_multiple_of(2), "window size must be even");
    let w = raised_cosine_1d(n);
    let mut out = Vec::with_capacity(n * n);
    for wy in &w {
        for wx in &w {
            out.push(wy * wx);
        }
    }
    out
}

fn forward(fft: &Fft2, scratch: &mut Fft2Scratch, tile: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = tile.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf, scratch);
    buf
}

/// Worker-local buffers for the merge of one tile stack.
struct TileMerger {
    n: usize,
    fft: Fft2,
    scratch: Fft2Scratch,
    spectra: Vec<Vec<Complex64>>,
    merged: Vec<Complex64>,
    tile: Vec<f64>,
}

impl TileMerger {
    fn new(n: usize, frames: usize) -> Self {
        let fft = Fft2::square(n);
        let scratch = fft.make_scratch();
        TileMerger {
            n,
            fft,
            scratch,
            spectra: vec![vec![Complex64::default(); n * n]; frames],
            merged: vec![Complex64::default(); n * n],
            tile: vec![0.0; n * n],
        }
    }

    /// Loads tile `z` of the stack from `plane` at `origin` and transforms it.
    fn load(&mut self, z: usize, plane: &GrayImage, origin: (isize, isize)) -> Option<f64> {
        let n = self.n;
        plane.copy_window(origin.0, origin.1, n, n, &mut self.tile);
        let rms = (z == 0).then(|| tile_rms(&self.tile));
        for (c, &v) in self.spectra[z].iter_mut().zip(&self.tile) {
            *c = Complex64::new(v, 0.0);
        }
        self.fft.forward(&mut self.spectra[z], &mut self.scratch);
        rms
    }

    /// Temporal + spatial denoising and inverse transform of the loaded stack.
    fn finish(&mut self, frames: usize, sigma2: f64, cfg: &MergeConfig) -> Vec<f64> {
        temporal_merge_spectra(&self.spectra[..frames], cfg.c() * sigma2, &mut self.merged);
        spatial_denoise_spectrum(&mut self.merged, self.n, sigma2, frames, cfg);
        self.fft.inverse(&mut self.merged, &mut self.scratch);
        self.merged.iter().map(|c| c.re).collect()
    }
}

/// Full per-tile merge (temporal then spatial, back in the spatial domain, unwindowed).
pub fn merge_tile_stack(stack: &TileStack, np: &NoiseParams, cfg: &MergeConfig) -> Vec<f64> {
    let n = stack.n;
    let mut m = TileMerger::new(n, stack.tiles.len());
    for (z, tile) in stack.tiles.iter().enumerate() {
        for (c, &v) in m.spectra[z].iter_mut().zip(tile) {
            *c = Complex64::new(v, 0.0);
        }
        m.fft.forward(&mut m.spectra[z], &mut m.scratch);
    }
    let sigma2 = tile_noise_variance(stack.reference(), np);
    m.finish(stack.tiles.len(), sigma2, cfg)
}

/// Vector of the alignment tile whose central cell contains `center`.
fn lookup(field: &MotionField, center: (usize, usize)) -> (isize, isize) {
    let g = field.grid();
    let tx = ((center.0 + g.stride / 2) / g.stride).min(g.tiles_x - 1);
    let ty = ((center.1 + g.stride / 2) / g.stride).min(g.tiles_y - 1);
    field.get(tx, ty).rounded()
}

/// Merge one plane. `planes[0]` is the reference; `fields[z - 1]` aligns `planes[z]`.
pub fn merge_plane(planes: &[&GrayImage], fields: &[&MotionField], np: &NoiseParams, cfg: &MergeConfig) -> GrayImage {
    let reference = planes[0];
    let (w, h) = (reference.width(), reference.height());
    let n = cfg.tile_size;
    let frames = planes.len();
    let grid = TileGrid::covering(w, h, n, 0);
    let window = raised_cosine_window(n);
    let mut acc = vec![0.0; w * h];
    let mut weight = vec![0.0; w * h];

    for ty in 0..grid.tiles_y {
        let row: Vec<Vec<f64>> = (0..grid.tiles_x)
            .into_par_iter()
            .map_init(
                || TileMerger::new(n, frames),
                |m, tx| {
                    let origin = grid.origin(tx, ty);
                    let rms = m.load(0, reference, origin).expect("reference rms");
                    let center = grid.center(tx, ty);
                    for z in 1..frames {
                        let (du, dv) = lookup(fields[z - 1], center);
                        m.load(z, planes[z], (origin.0 + du, origin.1 + dv));
                    }
                    let sigma2 = np.variance(rms);
                    let mut out = m.finish(frames, sigma2, cfg);
                    out.iter_mut().zip(&window).for_each(|(o, w)| *o *= w);
                    out
                },
            )
            .collect();

        // fixed row-major accumulation order
        for (tx, tile) in row.iter().enumerate() {
            let (ox, oy) = grid.origin(tx, ty);
            for i in 0..n {
                let y = oy + i as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..n {
                    let x = ox + j as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let p = y as usize * w + x as usize;
                    acc[p] += tile[i * n + j];
                    weight[p] += window[i * n + j];
                }
            }
        }
    }
    let data = acc.iter().zip(&weight).map(|(a, w)| a / w).collect();
    GrayImage::new(w, h, data)
}

fn check_fields(burst: &RawBurst, fields: &[MotionField]) -> Result<()> {
    if fields.len() + 1 != burst.len() {
        return Err(Error::InvalidBurst(format!(
            "{} motion fields for a burst of {} frames",
            fields.len(),
            burst.len()
        )));
    }
    Ok(())
}

/// Merge every plane and return them normalized and unclamped.
pub fn merge_planes(
    burst: &RawBurst,
    fields: &[MotionField],
    np: &NoiseParams,
    cfg: &MergeConfig,
) -> Result<[ColorPlane; 4]> {
    cfg.validate()?;
    np.validate()?;
    check_fields(burst, fields)?;
    let meta = burst.meta();
    let order = burst.processing_order();
    let split: Vec<[ColorPlane; 4]> = order.iter().map(|&k| split_planes(&burst.frames()[k], meta)).collect();
    let field_refs: Vec<&MotionField> = fields.iter().collect();
    Ok(PlaneId::ALL.map(|id| {
        let p = id.index();
        let planes: Vec<&GrayImage> = split.iter().map(|s| &s[p].image).collect();
        ColorPlane {
            id,
            image: merge_plane(&planes, &field_refs, np, cfg),
        }
    }))
}

/// Align-then-merge output: a mosaic with the input's levels and CFA.
///
/// `fields` are finest-level fields, one per alternate in
/// [`RawBurst::processing_order`] (reference excluded).
pub fn merge_burst(
    burst: &RawBurst,
    fields: &[MotionField],
    np: &NoiseParams,
    cfg: &MergeConfig,
) -> Result<BayerFrame> {
    let planes = merge_planes(burst, fields, np, cfg)?;
    interleave_planes(&planes, burst.reference().cfa(), burst.meta())
}
