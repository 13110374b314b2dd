//! Synthetic bursts with known ground truth, and the metrics to score a merge against it.
//!
//! Frames are a procedural scene sampled at shifted coordinates, with
//! Gaussian noise of variance `lambda_s * x + lambda_r` and integer
//! quantization. Even shifts keep the CFA phase, so the true motion is an
//! exact integer vector in the half-resolution grayscale domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::align::{AlignmentConfig, MotionField};
use crate::burst_io::{derive_noise_params, BayerFrame, BurstMetadata, Cfa, NoiseParams, RawBurst};
use crate::error::{Error, Result};
use crate::merge::MergeConfig;
use crate::pipeline::align_and_merge;
use crate::pyramid::GrayImage;

pub const SCENE_MIN: f64 = 0.05;
pub const SCENE_MAX: f64 = 0.95;

/// Default synthetic noise: ISO 400 on the default baseline.
pub const DEFAULT_NOISE: NoiseParams = NoiseParams {
    lambda_s: 4e-4,
    lambda_r: 1.6e-5,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    /// Gradients, a checkerboard, glyph-like strokes and fine value-noise texture.
    Textured,
    Constant(f64),
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: i64, b: i64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ a as u64) ^ b as u64)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Triangle wave with period 2, range [0, 1].
fn tri(t: f64) -> f64 {
    let f = t.rem_euclid(2.0);
    if f < 1.0 {
        f
    } else {
        2.0 - f
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear lattice noise in [0, 1] with lattice spacing `cell`.
fn value_noise(seed: u64, x: i64, y: i64, cell: i64) -> f64 {
    let (cx, cy) = (x.div_euclid(cell), y.div_euclid(cell));
    let fx = smooth(x.rem_euclid(cell) as f64 / cell as f64);
    let fy = smooth(y.rem_euclid(cell) as f64 / cell as f64);
    let v = |i, j| unit(hash3(seed, cx + i, cy + j));
    let top = v(0, 0) * (1.0 - fx) + v(1, 0) * fx;
    let bottom = v(0, 1) * (1.0 - fx) + v(1, 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

const GLYPH_CELL: (i64, i64) = (32, 40);
const GLYPH_DOT: i64 = 4;

fn glyph_ink(seed: u64, x: i64, y: i64) -> bool {
    let (cx, cy) = (x.div_euclid(GLYPH_CELL.0), y.div_euclid(GLYPH_CELL.1));
    if unit(hash3(seed ^ 0x5157, cx, cy)) > 0.35 {
        return false;
    }
    let gx = (x.rem_euclid(GLYPH_CELL.0) - 6).div_euclid(GLYPH_DOT);
    let gy = (y.rem_euclid(GLYPH_CELL.1) - 6).div_euclid(GLYPH_DOT);
    if !(0..5).contains(&gx) || !(0..7).contains(&gy) {
        return false;
    }
    let bits = hash3(seed ^ 0x6c79, cx, cy);
    bits >> (gy * 5 + gx) & 1 == 1
}

/// Clean normalized mosaic value at any (possibly negative) coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Scene {
    seed: u64,
    kind: SceneKind,
    cfa: Cfa,
    phase: (f64, f64),
}

impl Scene {
    pub fn new(kind: SceneKind, cfa: Cfa, seed: u64) -> Self {
        let phase = ((splitmix(seed) % 4096) as f64, (splitmix(seed ^ 1) % 4096) as f64);
        Scene { seed, kind, cfa, phase }
    }

    fn luma(&self, x: i64, y: i64) -> f64 {
        let s = self.seed;
        let gradient =
            0.55 * tri((x as f64 + self.phase.0) / 1400.0) * (0.6 + 0.4 * tri((y as f64 + self.phase.1) / 900.0));
        let checker = if (x.div_euclid(96) + y.div_euclid(96)) & 1 == 0 {
            0.2
        } else {
            0.0
        };
        let amplitude = 0.06 + 0.12 * unit(hash3(s ^ 0xa3, x.div_euclid(160), y.div_euclid(160)));
        let texture = amplitude * (value_noise(s ^ 0x7e, x, y, 4) - 0.5)
            + 0.5 * amplitude * (value_noise(s ^ 0x7f, x, y, 2) - 0.5);
        let v = 0.1 + gradient + checker + texture;
        if glyph_ink(s, x, y) {
            0.3 * v + 0.03
        } else {
            v
        }
    }

    pub fn value(&self, x: i64, y: i64) -> f64 {
        let v = match self.kind {
            SceneKind::Constant(c) => c,
            SceneKind::Textured => {
                let (rx, ry) = (x.div_euclid(256), y.div_euclid(256));
                let tint = match self.cfa.site(x.rem_euclid(2) as usize, y.rem_euclid(2) as usize) {
                    crate::PlaneId::R => 0.75 + 0.3 * unit(hash3(self.seed ^ 0x52, rx, ry)),
                    crate::PlaneId::B => 0.75 + 0.3 * unit(hash3(self.seed ^ 0x42, rx, ry)),
                    _ => 1.0,
                };
                self.luma(x, y) * tint
            }
        };
        v.clamp(SCENE_MIN, SCENE_MAX)
    }

    /// `width x height` window whose top-left sample is scene point `(x0, y0)`.
    pub fn render(&self, width: usize, height: usize, x0: i64, y0: i64) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| self.value(x0 + x as i64, y0 + y as i64))
    }
}

fn render_parallel(scene: &Scene, width: usize, height: usize, x0: i64, y0: i64) -> GrayImage {
    let data = (0..height)
        .into_par_iter()
        .flat_map_iter(|y| (0..width).map(move |x| scene.value(x0 + x as i64, y0 + y as i64)))
        .collect();
    GrayImage::new(width, height, data)
}

/// Clean textured mosaic (RGGB phase) for `seed`.
pub fn generate_clean_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    Scene::new(SceneKind::Textured, Cfa::Rggb, seed).render(width, height, 0, 0)
}

/// Even per-frame shifts in `[-max, max]`, first frame static.
pub fn random_even_shifts(frames: usize, max: i64, seed: u64) -> Vec<(i64, i64)> {
    let half = max / 2;
    (0..frames)
        .map(|z| {
            if z == 0 {
                return (0, 0);
            }
            let h = hash3(seed ^ 0x5348, z as i64, 0);
            let pick = |bits: u64| 2 * ((bits % (2 * half as u64 + 1)) as i64 - half);
            (pick(h), pick(h >> 32))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// True displacement of each frame's content in mosaic pixels.
    pub shifts: Vec<(i64, i64)>,
    pub noise: NoiseParams,
    pub seed: u64,
    pub scene: SceneKind,
    pub cfa: Cfa,
    pub black_level: u32,
    pub white_level: u32,
}

pub const DEFAULT_MAX_SHIFT: i64 = 8;

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 1024,
            height: 768,
            frames: 8,
            shifts: random_even_shifts(8, DEFAULT_MAX_SHIFT, 1),
            noise: DEFAULT_NOISE,
            seed: 1,
            scene: SceneKind::Textured,
            cfa: Cfa::Rggb,
            black_level: 512,
            white_level: 16383,
        }
    }
}

impl SynthSpec {
    /// Same spec with `frames` frames and fresh random even shifts.
    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self.shifts = random_even_shifts(frames, DEFAULT_MAX_SHIFT, self.seed);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.shifts = random_even_shifts(self.frames, DEFAULT_MAX_SHIFT, seed);
        self
    }

    pub fn static_scene(mut self) -> Self {
        self.shifts = vec![(0, 0); self.frames];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 {
            return bad(format!("a burst needs at least 2 frames, got {}", self.frames));
        }
        if self.shifts.len() != self.frames {
            return bad(format!("{} shifts for {} frames", self.shifts.len(), self.frames));
        }
        if self.shifts[0] != (0, 0) {
            return bad("the first frame must be unshifted".into());
        }
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) {
            return bad(format!(
                "dimensions {}x{} must be even and nonzero",
                self.width, self.height
            ));
        }
        if self.black_level >= self.white_level {
            return bad("black level must be below white level".into());
        }
        if let SceneKind::Constant(c) = self.scene {
            if !(SCENE_MIN..=SCENE_MAX).contains(&c) {
                return bad(format!("constant scene value {c} outside [{SCENE_MIN}, {SCENE_MAX}]"));
            }
        }
        let n = self.noise;
        if !(n.lambda_s >= 0.0 && n.lambda_r >= 0.0) {
            return bad("noise parameters must be nonnegative".into());
        }
        Ok(())
    }

    pub fn metadata(&self) -> BurstMetadata {
        BurstMetadata {
            cfa: self.cfa,
            black_level: self.black_level,
            white_level: self.white_level,
            iso: 400.0,
            wb_gains: [1.0; 4],
            color_matrix: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            noise_profile: (self.noise.validate().is_ok()).then_some(self.noise),
            ref_index: 0,
        }
    }
}

pub struct SyntheticBurst {
    pub burst: RawBurst,
    /// Noise-free mosaic of the reference frame, normalized.
    pub clean: GrayImage,
}

/// Render, shift, add noise and quantize every frame.
pub fn synthesize_burst(spec: &SynthSpec) -> Result<SyntheticBurst> {
    spec.validate()?;
    let scene = Scene::new(spec.scene, spec.cfa, spec.seed);
    let meta = spec.metadata();
    let range = meta.range();
    // one canvas covering every shifted frame; frame z reads scene(x - shift_z)
    let max_x = spec.shifts.iter().map(|s| s.0).max().unwrap_or(0);
    let min_x = spec.shifts.iter().map(|s| s.0).min().unwrap_or(0);
    let max_y = spec.shifts.iter().map(|s| s.1).max().unwrap_or(0);
    let min_y = spec.shifts.iter().map(|s| s.1).min().unwrap_or(0);
    let canvas_w = spec.width + (max_x - min_x) as usize;
    let canvas_h = spec.height + (max_y - min_y) as usize;
    let canvas = render_parallel(&scene, canvas_w, canvas_h, -max_x, -max_y);
    let crop = |sx: i64, sy: i64| {
        let (ox, oy) = ((max_x - sx) as usize, (max_y - sy) as usize);
        GrayImage::from_fn(spec.width, spec.height, |x, y| canvas.get(x + ox, y + oy))
    };
    let frames: Vec<BayerFrame> = spec
        .shifts
        .par_iter()
        .enumerate()
        .map(|(z, &(sx, sy))| {
            let clean = crop(sx, sy);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(z as u64 + 1);
            let samples = clean
                .data()
                .iter()
                .map(|&x| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let v = x + n * spec.noise.variance(x).sqrt();
                    let raw = (spec.black_level as f64 + v * range).round();
                    raw.clamp(spec.black_level as f64, spec.white_level as f64) as u16
                })
                .collect();
            BayerFrame::new(spec.width, spec.height, spec.cfa, samples)
        })
        .collect::<Result<_>>()?;
    let clean = crop(0, 0);
    Ok(SyntheticBurst {
        burst: RawBurst::new(frames, meta)?,
        clean,
    })
}

/// `10 log10(peak^2 / MSE)`; infinite for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs equally sized images");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR of a raw mosaic against a normalized clean mosaic, peak 1.
pub fn mosaic_psnr(frame: &BayerFrame, meta: &BurstMetadata, clean: &GrayImage) -> f64 {
    let normalized: Vec<f64> = frame.samples().iter().map(|&s| meta.normalize(s)).collect();
    psnr(&normalized, clean.data(), 1.0)
}

/// Fraction of interior finest-level tiles whose vector is exactly the true
/// grayscale displacement. Frames with odd shifts are skipped; NaN if none remain.
///
/// `fields[i]` aligns frame `i + 1` to frame 0.
pub fn alignment_accuracy(fields: &[MotionField], shifts: &[(i64, i64)], gray_width: usize, gray_height: usize) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (field, &(sx, sy)) in fields.iter().zip(&shifts[1..]) {
        if sx % 2 != 0 || sy % 2 != 0 {
            continue;
        }
        let (eu, ev) = (sx / 2, sy / 2);
        let g = *field.grid();
        let n = g.tile_size as i64;
        let inside = |o: i64, len: usize| o >= 0 && o + n <= len as i64;
        for ty in 0..g.tiles_y {
            for tx in 0..g.tiles_x {
                let (ox, oy) = g.origin(tx, ty);
                let (ox, oy) = (ox as i64, oy as i64);
                if !(inside(ox, gray_width) && inside(oy, gray_height)) {
                    continue;
                }
                if !(inside(ox + eu, gray_width) && inside(oy + ev, gray_height)) {
                    continue;
                }
                let d = field.get(tx, ty);
                total += 1;
                if d.u == eu as f64 && d.v == ev as f64 {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthReport {
    pub frames: usize,
    pub psnr_ref: f64,
    pub psnr_merged: f64,
    pub gain_db: f64,
    pub alignment_accuracy: f64,
}

impl SynthReport {
    /// One `key=value` line per field.
    pub fn to_key_value(&self) -> String {
        format!(
            "frames={}\npsnr_ref={:.6}\npsnr_merged={:.6}\ngain_db={:.6}\nalignment_accuracy={:.6}\n",
            self.frames, self.psnr_ref, self.psnr_merged, self.gain_db, self.alignment_accuracy
        )
    }
}

fn gain(psnr_ref: f64, psnr_merged: f64) -> f64 {
    if psnr_ref == psnr_merged {
        0.0
    } else {
        psnr_merged - psnr_ref
    }
}

/// Synthesize, align and merge, then score the result against ground truth.
pub fn evaluate_pipeline(
    spec: &SynthSpec,
    align_cfg: &AlignmentConfig,
    merge_cfg: &MergeConfig,
) -> Result<SynthReport> {
    let synth = synthesize_burst(spec)?;
    let meta = synth.burst.meta();
    let np = derive_noise_params(meta, NoiseParams::DEFAULT_BASELINE);
    let out = align_and_merge(&synth.burst, align_cfg, merge_cfg, &np)?;
    let psnr_ref = mosaic_psnr(synth.burst.reference(), meta, &synth.clean);
    let psnr_merged = mosaic_psnr(&out.merged, meta, &synth.clean);
    let accuracy = alignment_accuracy(&out.finest_fields(), &spec.shifts, spec.width / 2, spec.height / 2);
    Ok(SynthReport {
        frames: spec.frames,
        psnr_ref,
        psnr_merged,
        gain_db: gain(psnr_ref, psnr_merged),
        alignment_accuracy: accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(w: usize, h: usize, frames: usize) -> SynthSpec {
        SynthSpec {
            width: w,
            height: h,
            ..SynthSpec::default()
        }
        .with_frames(frames)
    }

    #[test]
    fn scene_is_deterministic_and_seeded() {
        let a = generate_clean_scene(256, 192, 7);
        assert_eq!(a, generate_clean_scene(256, 192, 7));
        let b = generate_clean_scene(256, 192, 8);
        let differ = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 > 0.95 * a.data().len() as f64, "{differ}");
        assert!(a.data().iter().all(|v| (SCENE_MIN..=SCENE_MAX).contains(v)));
    }

    #[test]
    fn scene_histogram_is_broad() {
        let s = generate_clean_scene(1024, 768, 1);
        let bins = 90;
        let mut hist = vec![0usize; bins];
        for &v in s.data() {
            let b = (((v - SCENE_MIN) / (SCENE_MAX - SCENE_MIN)) * bins as f64) as usize;
            hist[b.min(bins - 1)] += 1;
        }
        let occupied = hist.iter().filter(|&&c| c > 0).count();
        assert!(occupied * 2 >= bins, "{occupied}/{bins}");
    }

    #[test]
    fn shifts_are_even_and_bounded() {
        let s = random_even_shifts(16, 8, 3);
        assert_eq!(s[0], (0, 0));
        assert!(s
            .iter()
            .all(|&(x, y)| x % 2 == 0 && y % 2 == 0 && x.abs() <= 8 && y.abs() <= 8));
        assert!(s[1..].iter().any(|&d| d != (0, 0)));
    }

    #[test]
    fn noiseless_frames_are_shifted_scene() {
        let spec = SynthSpec {
            noise: NoiseParams {
                lambda_s: 0.0,
                lambda_r: 0.0,
            },
            ..small(64, 48, 3)
        };
        let synth = synthesize_burst(&spec).unwrap();
        let meta = synth.burst.meta();
        let scene = Scene::new(SceneKind::Textured, Cfa::Rggb, spec.seed);
        for (f, &(sx, sy)) in synth.burst.frames().iter().zip(&spec.shifts) {
            for y in 0..48 {
                for x in 0..64 {
                    let want = (512.0 + scene.value(x as i64 - sx, y as i64 - sy) * meta.range()).round() as u16;
                    assert_eq!(f.get(x, y), want);
                }
            }
        }
        let quiet = synthesize_burst(&spec.clone().static_scene()).unwrap();
        let frames = quiet.burst.frames();
        assert!(frames.iter().all(|f| f == &frames[0]));
    }

    #[test]
    fn noise_variance_matches_model() {
        let spec = SynthSpec {
            width: 1000,
            height: 1000,
            scene: SceneKind::Constant(0.5),
            ..SynthSpec::default()
        }
        .with_frames(2)
        .static_scene();
        let synth = synthesize_burst(&spec).unwrap();
        let meta = synth.burst.meta();
        let xs: Vec<f64> = synth.burst.frames()[1]
            .samples()
            .iter()
            .map(|&s| meta.normalize(s))
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let want = DEFAULT_NOISE.variance(0.5);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 100];
        assert_eq!(psnr(&a, &a, 1.0), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0) - 20.0).abs() < 1e-9);
        let base = generate_clean_scene(256, 256, 2);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = base
                .data()
                .iter()
                .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!((psnr(base.data(), &noisy, 1.0) - 20.0).abs() < 0.1);
        }
    }

    #[test]
    fn static_noiseless_report() {
        let spec = SynthSpec {
            noise: NoiseParams {
                lambda_s: 0.0,
                lambda_r: 0.0,
            },
            ..small(256, 192, 4)
        }
        .static_scene();
        // spatial shrinkage follows the noise model, not the actual noise
        let cfg = MergeConfig {
            spatial_strength: 0.0,
            ..Default::default()
        };
        let r = evaluate_pipeline(&spec, &AlignmentConfig::default(), &cfg).unwrap();
        assert_eq!(r.gain_db, 0.0);
        assert_eq!(r.alignment_accuracy, 1.0);
    }

    #[test]
    fn small_burst_gains_and_aligns() {
        let spec = small(512, 384, 4);
        let r = evaluate_pipeline(&spec, &AlignmentConfig::default(), &MergeConfig::default()).unwrap();
        assert_eq!(r.alignment_accuracy, 1.0, "{r:?}");
        assert!(r.gain_db > 2.0, "{r:?}");
        assert!(r.to_key_value().contains("gain_db="));
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let mut s = SynthSpec::default();
        s.shifts[0] = (2, 0);
        assert!(s.validate().is_err());
        assert!(SynthSpec {
            frames: 1,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            width: 101,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
    }
}
