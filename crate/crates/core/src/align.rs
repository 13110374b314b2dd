//! Coarse-to-fine tile-based motion estimation.
//!
//! Every pyramid level is covered by square tiles of size `n` overlapping by
//! half (`stride = n / 2`). The grid starts one stride before the image origin
//! so every image pixel lies under exactly two tiles per axis; tile `k` spans
//! `[(k - 1) * stride, (k + 1) * stride)` and is centered on `k * stride`.
//! Pixels outside the image are read with reflect padding.
//!
//! A vector `(u, v)` maps the reference tile at `(x, y)` to the alternate tile
//! at `(x + u, y + v)`; `u` is horizontal, `v` vertical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::burst_io::Rgb8Image;
use crate::error::{Error, Result};
use crate::fft2::{Fft2, Fft2Scratch};
use crate::pyramid::{GrayImage, Pyramid};

/// Power used in the tile distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_power(p: u32) -> Option<Norm> {
        match p {
            1 => Some(Norm::L1),
            2 => Some(Norm::L2),
            _ => None,
        }
    }

    pub fn power(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub level: usize,
}

impl TileGrid {
    /// Half-overlapped grid covering a `width x height` image.
    pub fn covering(width: usize, height: usize, tile_size: usize, level: usize) -> TileGrid {
        assert!(tile_size >= 2 && tile_size.is_multiple_of(2), "tile size must be even");
        let stride = tile_size / 2;
        TileGrid {
            tile_size,
            stride,
            tiles_x: width.div_ceil(stride) + 1,
            tiles_y: height.div_ceil(stride) + 1,
            level,
        }
    }

    pub fn len(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel of tile `(tx, ty)`.
    #[inline]
    pub fn origin(&self, tx: usize, ty: usize) -> (isize, isize) {
        let s = self.stride as isize;
        ((tx as isize - 1) * s, (ty as isize - 1) * s)
    }

    /// Tile center, `(tx * stride, ty * stride)`.
    #[inline]
    pub fn center(&self, tx: usize, ty: usize) -> (usize, usize) {
        (tx * self.stride, ty * self.stride)
    }

    /// Index of the tile whose central `stride x stride` cell contains the
    /// point `p` given in units of this grid's pixels times `scale`.
    fn owner(&self, p: usize, scale: usize, count: usize) -> usize {
        let cell = self.stride * scale;
        ((p + cell / 2) / cell).min(count - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Displacement {
    pub u: f64,
    pub v: f64,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { u: 0.0, v: 0.0 };

    pub fn new(u: f64, v: f64) -> Self {
        Displacement { u, v }
    }

    pub fn scaled(self, s: f64) -> Self {
        Displacement::new(self.u * s, self.v * s)
    }

    /// Integer pixel offset used to place a search window.
    pub fn rounded(self) -> (isize, isize) {
        (self.u.round() as isize, self.v.round() as isize)
    }

    pub fn norm(self) -> f64 {
        self.u.hypot(self.v)
    }
}

/// Per-tile displacement vectors on one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    grid: TileGrid,
    vectors: Vec<Displacement>,
}

impl MotionField {
    pub fn zeros(grid: TileGrid) -> Self {
        Self::uniform(grid, Displacement::ZERO)
    }

    pub fn uniform(grid: TileGrid, d: Displacement) -> Self {
        MotionField {
            grid,
            vectors: vec![d; grid.len()],
        }
    }

    pub fn from_vectors(grid: TileGrid, vectors: Vec<Displacement>) -> Self {
        assert_eq!(vectors.len(), grid.len(), "one vector per tile");
        MotionField { grid, vectors }
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn vectors(&self) -> &[Displacement] {
        &self.vectors
    }

    #[inline]
    pub fn get(&self, tx: usize, ty: usize) -> Displacement {
        self.vectors[ty * self.grid.tiles_x + tx]
    }

    pub fn set(&mut self, tx: usize, ty: usize, d: Displacement) {
        self.vectors[ty * self.grid.tiles_x + tx] = d;
    }

    /// `tile_x,tile_y,u,v` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tile_x,tile_y,u,v\n");
        for ty in 0..self.grid.tiles_y {
            for tx in 0..self.grid.tiles_x {
                let d = self.get(tx, ty);
                writeln!(out, "{tx},{ty},{},{}", d.u, d.v).unwrap();
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One pixel per tile; hue encodes direction, saturation magnitude
    /// (relative to the largest vector), value is 1.
    pub fn to_hsv_image(&self) -> Rgb8Image {
        let max = self.vectors.iter().map(|d| d.norm()).fold(0.0f64, f64::max);
        let mut data = Vec::with_capacity(self.vectors.len() * 3);
        for d in &self.vectors {
            let hue = (d.v.atan2(d.u).to_degrees() + 360.0) % 360.0;
            let sat = if max > 0.0 { d.norm() / max } else { 0.0 };
            data.extend_from_slice(&hsv_to_rgb8(hue, sat, 1.0));
        }
        Rgb8Image::new(self.grid.tiles_x, self.grid.tiles_y, data)
    }
}

fn hsv_to_rgb8(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Per-level alignment parameters, coarsest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub tile_sizes: Vec<usize>,
    pub search_radii: Vec<usize>,
    pub norms: Vec<Norm>,
    pub subpixel: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tile_sizes: vec![8, 16, 16, 16],
            search_radii: vec![4; 4],
            norms: vec![Norm::L2, Norm::L2, Norm::L2, Norm::L1],
            subpixel: true,
        }
    }
}

impl AlignmentConfig {
    pub fn num_levels(&self) -> usize {
        self.tile_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tile_sizes.len();
        if n == 0 || self.search_radii.len() != n || self.norms.len() != n {
            return Err(Error::Config(format!(
                "alignment needs one tile size, radius and norm per level (got {}, {}, {})",
                n,
                self.search_radii.len(),
                self.norms.len()
            )));
        }
        if let Some(t) = self.tile_sizes.iter().find(|&&t| t < 2 || t % 2 != 0) {
            return Err(Error::Config(format!("tile size {t} must be even and >= 2")));
        }
        if self.search_radii.contains(&0) {
            return Err(Error::Config("search radii must be >= 1".into()));
        }
        Ok(())
    }
}

/// `sum |T(i, j) - I(i + v, j + u)|^p` for the `n x n` tile against the
/// candidate whose top-left corner is `(u, v)` inside the search area.
pub fn tile_distance(tile: &[f64], n: usize, area: &[f64], area_width: usize, u: usize, v: usize, norm: Norm) -> f64 {
    debug_assert_eq!(tile.len(), n * n);
    assert!(
        u + n <= area_width && (v + n) * area_width <= area.len(),
        "candidate tile outside the search area"
    );
    let mut acc = 0.0;
    for i in 0..n {
        let t_row = &tile[i * n..(i + 1) * n];
        let a_row = &area[(v + i) * area_width + u..(v + i) * area_width + u + n];
        match norm {
            Norm::L1 => {
                for (t, a) in t_row.iter().zip(a_row) {
                    acc += (t - a).abs();
                }
            }
            Norm::L2 => {
                for (t, a) in t_row.iter().zip(a_row) {
                    let d = t - a;
                    acc += d * d;
                }
            }
        }
    }
    acc
}

/// Brute-force distance map over all `(2r+1)^2` candidates, row-major in `v`.
pub fn direct_distance_map(tile: &[f64], n: usize, area: &[f64], r: usize, norm: Norm) -> Vec<f64> {
    let m = n + 2 * r;
    assert_eq!(area.len(), m * m, "search area must be (n + 2r)^2");
    let side = 2 * r + 1;
    let mut out = Vec::with_capacity(side * side);
    for v in 0..side {
        for u in 0..side {
            out.push(tile_distance(tile, n, area, m, u, v, norm));
        }
    }
    out
}

/// Reusable L2 distance-map evaluator for one `(n, r)` geometry.
///
/// Expands the squared distance into `sum T^2 + box(I^2) - 2 corr(T, I)`;
/// the correlation is computed with a DFT the size of the search area, which
/// is large enough that no candidate wraps around.
pub struct L2Mapper {
    n: usize,
    r: usize,
    fft: Fft2,
    scratch: Fft2Scratch,
    area_spec: Vec<Complex64>,
    tile_spec: Vec<Complex64>,
    sq_integral: Vec<f64>,
}

impl L2Mapper {
    pub fn new(n: usize, r: usize) -> Self {
        let m = n + 2 * r;
        let fft = Fft2::square(m);
        let scratch = fft.make_scratch();
        L2Mapper {
            n,
            r,
            fft,
            scratch,
            area_spec: vec![Complex64::default(); m * m],
            tile_spec: vec![Complex64::default(); m * m],
            sq_integral: vec![0.0; (m + 1) * (m + 1)],
        }
    }

    pub fn map(&mut self, tile: &[f64], area: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; (2 * self.r + 1).pow(2)];
        self.map_into(tile, area, &mut out);
        out
    }

    pub fn map_into(&mut self, tile: &[f64], area: &[f64], out: &mut [f64]) {
        let (n, r) = (self.n, self.r);
        let m = n + 2 * r;
        let side = 2 * r + 1;
        assert_eq!(tile.len(), n * n, "tile must be n x n");
        assert_eq!(area.len(), m * m, "search area must be (n + 2r)^2");
        assert_eq!(out.len(), side * side);

        let tile_energy: f64 = tile.iter().map(|t| t * t).sum();

        // integral image of I^2
        let iw = m + 1;
        for y in 0..m {
            let mut row_sum = 0.0;
            for x in 0..m {
                let a = area[y * m + x];
                row_sum += a * a;
                self.sq_integral[(y + 1) * iw + x + 1] = self.sq_integral[y * iw + x + 1] + row_sum;
            }
        }

        for (dst, &a) in self.area_spec.iter_mut().zip(area) {
            *dst = Complex64::new(a, 0.0);
        }
        self.tile_spec.iter_mut().for_each(|c| *c = Complex64::default());
        for i in 0..n {
            for j in 0..n {
                self.tile_spec[i * m + j] = Complex64::new(tile[i * n + j], 0.0);
            }
        }
        self.fft.forward(&mut self.area_spec, &mut self.scratch);
        self.fft.forward(&mut self.tile_spec, &mut self.scratch);
        for (a, t) in self.area_spec.iter_mut().zip(&self.tile_spec) {
            *a *= t.conj();
        }
        self.fft.inverse(&mut self.area_spec, &mut self.scratch);

        for v in 0..side {
            for u in 0..side {
                let s = &self.sq_integral;
                let box_sum = s[(v + n) * iw + u + n] - s[v * iw + u + n] - s[(v + n) * iw + u] + s[v * iw + u];
                let corr = self.area_spec[v * m + u].re;
                out[v * side + u] = (tile_energy + box_sum - 2.0 * corr).max(0.0);
            }
        }
    }
}

/// L2 distance map for every candidate offset, computed through the DFT.
pub fn l2_distance_map(tile: &[f64], n: usize, area: &[f64], r: usize) -> Vec<f64> {
    L2Mapper::new(n, r).map(tile, area)
}

/// Index of the smallest entry; ties go to the earliest (smallest `v`, then smallest `u`).
pub fn argmin(map: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in map.iter().enumerate().skip(1) {
        if d < map[best] {
            best = i;
        }
    }
    best
}

/// Fit `D(u, v) ~ 1/2 [u v] A [u v]^T + b . [u v] + c` by unweighted least
/// squares to a 3x3 window (`window[dv + 1][du + 1]`) and return the minimum
/// `-A^-1 b`. Rejects non positive definite fits and offsets of a pixel or more.
pub fn subpixel_refine(window: &[[f64; 3]; 3]) -> Option<Displacement> {
    let col = |du: usize| window[0][du] + window[1][du] + window[2][du];
    let row = |dv: usize| window[dv].iter().sum::<f64>();
    let b1 = (col(2) - col(0)) / 6.0;
    let b2 = (row(2) - row(0)) / 6.0;
    let a11 = (col(2) + col(0) - 2.0 * col(1)) / 3.0;
    let a22 = (row(2) + row(0) - 2.0 * row(1)) / 3.0;
    let a12 = (window[2][2] - window[0][2] - window[2][0] + window[0][0]) / 4.0;

    let det = a11 * a22 - a12 * a12;
    // relative floor: a singular fit can round to a tiny positive determinant
    let scale = (a11 + a22) * (a11 + a22);
    if !(a11 > 0.0 && det > 1e-10 * scale) || !det.is_finite() {
        return None;
    }
    let mu = Displacement::new(-(a22 * b1 - a12 * b2) / det, -(a11 * b2 - a12 * b1) / det);
    (mu.norm() < 1.0).then_some(mu)
}

struct LevelParams {
    n: usize,
    r: usize,
    norm: Norm,
    subpixel: bool,
}

/// Tile-local workspace, one per worker.
struct TileWork {
    mapper: L2Mapper,
    tile: Vec<f64>,
    area: Vec<f64>,
    map: Vec<f64>,
}

impl TileWork {
    fn new(n: usize, r: usize) -> Self {
        TileWork {
            mapper: L2Mapper::new(n, r),
            tile: vec![0.0; n * n],
            area: vec![0.0; (n + 2 * r).pow(2)],
            map: vec![0.0; (2 * r + 1).pow(2)],
        }
    }
}

fn align_tile(
    work: &mut TileWork,
    ref_level: &GrayImage,
    alt_level: &GrayImage,
    origin: (isize, isize),
    init: Displacement,
    p: &LevelParams,
) -> Displacement {
    let (n, r) = (p.n, p.r);
    let m = n + 2 * r;
    let side = 2 * r + 1;
    let (u0, v0) = init.rounded();
    ref_level.copy_window(origin.0, origin.1, n, n, &mut work.tile);
    alt_level.copy_window(
        origin.0 + u0 - r as isize,
        origin.1 + v0 - r as isize,
        m,
        m,
        &mut work.area,
    );
    match p.norm {
        Norm::L2 => work.mapper.map_into(&work.tile, &work.area, &mut work.map),
        Norm::L1 => {
            for v in 0..side {
                for u in 0..side {
                    work.map[v * side + u] = tile_distance(&work.tile, n, &work.area, m, u, v, Norm::L1);
                }
            }
        }
    }
    let best = argmin(&work.map);
    let (bu, bv) = (best % side, best / side);
    let mut d = Displacement::new(
        (u0 + bu as isize - r as isize) as f64,
        (v0 + bv as isize - r as isize) as f64,
    );

    // interior minima only; an exact match needs no refinement
    if p.subpixel && bu > 0 && bv > 0 && bu + 1 < side && bv + 1 < side {
        let mut window = [[0.0; 3]; 3];
        for (dv, row) in window.iter_mut().enumerate() {
            for (du, w) in row.iter_mut().enumerate() {
                *w = tile_distance(&work.tile, n, &work.area, m, bu + du - 1, bv + dv - 1, Norm::L2);
            }
        }
        if window[1][1] == 0.0 {
            return d;
        }
        if let Some(mu) = subpixel_refine(&window) {
            d.u += mu.u;
            d.v += mu.v;
        }
    }
    d
}

/// Refine `init` on one level: each tile searches `(2r+1)^2` integer offsets
/// around its rounded initial guess, optionally followed by subpixel fitting.
pub fn align_level(
    ref_level: &GrayImage,
    alt_level: &GrayImage,
    init: &MotionField,
    radius: usize,
    norm: Norm,
    subpixel: bool,
) -> MotionField {
    let grid = *init.grid();
    let params = LevelParams {
        n: grid.tile_size,
        r: radius,
        norm,
        subpixel,
    };
    let vectors: Vec<Displacement> = (0..grid.len())
        .into_par_iter()
        .map_init(
            || TileWork::new(params.n, params.r),
            |work, idx| {
                let (tx, ty) = (idx % grid.tiles_x, idx / grid.tiles_x);
                align_tile(
                    work,
                    ref_level,
                    alt_level,
                    grid.origin(tx, ty),
                    init.get(tx, ty),
                    &params,
                )
            },
        )
        .collect();
    MotionField::from_vectors(grid, vectors)
}

/// Scale every coarse vector by `scale` and copy it to the fine tiles whose
/// centers fall inside the coarse tile's central cell.
pub fn upsample_motion_field(coarse: &MotionField, scale: usize, fine_grid: TileGrid) -> MotionField {
    let cg = coarse.grid();
    let mut fine = MotionField::zeros(fine_grid);
    for ty in 0..fine_grid.tiles_y {
        for tx in 0..fine_grid.tiles_x {
            let (cx, cy) = fine_grid.center(tx, ty);
            let jx = cg.owner(cx, scale, cg.tiles_x);
            let jy = cg.owner(cy, scale, cg.tiles_y);
            fine.set(tx, ty, coarse.get(jx, jy).scaled(scale as f64));
        }
    }
    fine
}

fn l1_at(ref_tile: &[f64], alt: &GrayImage, origin: (isize, isize), d: Displacement, n: usize, buf: &mut [f64]) -> f64 {
    let (du, dv) = d.rounded();
    alt.copy_window(origin.0 + du, origin.1 + dv, n, n, buf);
    ref_tile.iter().zip(buf.iter()).map(|(a, b)| (a - b).abs()).sum()
}

/// Initial guess for fine tile `(tx, ty)`: the scaled vector of the owning
/// coarse tile or of its nearest horizontal or vertical neighbor, whichever
/// gives the smallest L1 distance at the fine level. Ties keep the earlier
/// candidate (owner, horizontal, vertical).
pub fn select_candidate_guess(
    tile: (usize, usize),
    fine_grid: &TileGrid,
    coarse: &MotionField,
    scale: usize,
    ref_level: &GrayImage,
    alt_level: &GrayImage,
) -> Displacement {
    let n = fine_grid.tile_size;
    let mut ref_tile = vec![0.0; n * n];
    let mut buf = vec![0.0; n * n];
    let origin = fine_grid.origin(tile.0, tile.1);
    ref_level.copy_window(origin.0, origin.1, n, n, &mut ref_tile);
    candidate_guess(tile, fine_grid, coarse, scale, alt_level, &ref_tile, &mut buf)
}

fn candidate_guess(
    tile: (usize, usize),
    fine_grid: &TileGrid,
    coarse: &MotionField,
    scale: usize,
    alt_level: &GrayImage,
    ref_tile: &[f64],
    buf: &mut [f64],
) -> Displacement {
    let cg = coarse.grid();
    let (cx, cy) = fine_grid.center(tile.0, tile.1);
    let jx = cg.owner(cx, scale, cg.tiles_x);
    let jy = cg.owner(cy, scale, cg.tiles_y);
    let cell = cg.stride * scale;
    let side_x = if cx < jx * cell {
        jx.checked_sub(1)
    } else {
        Some(jx + 1)
    };
    let side_y = if cy < jy * cell {
        jy.checked_sub(1)
    } else {
        Some(jy + 1)
    };

    let mut candidates = vec![(jx, jy)];
    if let Some(nx) = side_x.filter(|&x| x < cg.tiles_x) {
        candidates.push((nx, jy));
    }
    if let Some(ny) = side_y.filter(|&y| y < cg.tiles_y) {
        candidates.push((jx, ny));
    }
    let origin = fine_grid.origin(tile.0, tile.1);
    let n = fine_grid.tile_size;
    let mut best = coarse.get(jx, jy).scaled(scale as f64);
    let mut best_cost = f64::INFINITY;
    for (ix, iy) in candidates {
        let d = coarse.get(ix, iy).scaled(scale as f64);
        let cost = l1_at(ref_tile, alt_level, origin, d, n, buf);
        if cost < best_cost {
            best_cost = cost;
            best = d;
        }
    }
    best
}

fn propagate(
    coarse: &MotionField,
    scale: usize,
    fine_grid: TileGrid,
    ref_level: &GrayImage,
    alt_level: &GrayImage,
) -> MotionField {
    let n = fine_grid.tile_size;
    let vectors: Vec<Displacement> = (0..fine_grid.len())
        .into_par_iter()
        .map_init(
            || (vec![0.0; n * n], vec![0.0; n * n]),
            |(ref_tile, buf), idx| {
                let tile = (idx % fine_grid.tiles_x, idx / fine_grid.tiles_x);
                let origin = fine_grid.origin(tile.0, tile.1);
                ref_level.copy_window(origin.0, origin.1, n, n, ref_tile);
                candidate_guess(tile, &fine_grid, coarse, scale, alt_level, ref_tile, buf)
            },
        )
        .collect();
    MotionField::from_vectors(fine_grid, vectors)
}

/// Keep finest-level tiles inside the alternate frame (tiles that already
/// hang over the border may stay where they are but not move further out).
fn clamp_to_frame(field: &mut MotionField, width: usize, height: usize) {
    let grid = *field.grid();
    let n = grid.tile_size as isize;
    for ty in 0..grid.tiles_y {
        for tx in 0..grid.tiles_x {
            let (x, y) = grid.origin(tx, ty);
            let d = field.get(tx, ty);
            let lo_x = x.min(0);
            let hi_x = x.max(width as isize - n);
            let lo_y = y.min(0);
            let hi_y = y.max(height as isize - n);
            let nx = (x as f64 + d.u).clamp(lo_x as f64, hi_x as f64) - x as f64;
            let ny = (y as f64 + d.v).clamp(lo_y as f64, hi_y as f64) - y as f64;
            field.set(tx, ty, Displacement::new(nx, ny));
        }
    }
}

fn check_pyramids(pyramids: &[Pyramid], cfg: &AlignmentConfig) -> Result<()> {
    cfg.validate()?;
    let first = pyramids
        .first()
        .ok_or_else(|| Error::InvalidBurst("no frames to align".into()))?;
    if first.num_levels() != cfg.num_levels() {
        return Err(Error::Config(format!(
            "alignment configured for {} levels but pyramids have {}",
            cfg.num_levels(),
            first.num_levels()
        )));
    }
    for p in pyramids {
        let same = p.factors() == first.factors()
            && p.levels()
                .iter()
                .zip(first.levels())
                .all(|(a, b)| a.width() == b.width() && a.height() == b.height());
        if !same {
            return Err(Error::InvalidBurst("pyramids differ in structure".into()));
        }
    }
    Ok(())
}

/// Search radius actually used on a `w x h` level. Reflect padding repeats a
/// level with period `2 (len - 1)`, so larger offsets on tiny levels would
/// find exact copies of the tile and win ties against the true match.
fn effective_radius(r: usize, w: usize, h: usize) -> usize {
    r.min((2 * w.min(h)).saturating_sub(3)).max(1)
}

/// Motion fields for every level (coarsest first) of one alternate frame.
pub fn align_pair(reference: &Pyramid, alternate: &Pyramid, cfg: &AlignmentConfig) -> Vec<MotionField> {
    let levels = reference.num_levels();
    let mut fields: Vec<MotionField> = Vec::with_capacity(levels);
    for l in 0..levels {
        let (ref_l, alt_l) = (reference.level(l), alternate.level(l));
        let grid = TileGrid::covering(ref_l.width(), ref_l.height(), cfg.tile_sizes[l], l);
        let init = match fields.last() {
            None => MotionField::zeros(grid),
            Some(coarse) => propagate(coarse, reference.scale_into(l), grid, ref_l, alt_l),
        };
        let finest = l + 1 == levels;
        let mut field = align_level(
            ref_l,
            alt_l,
            &init,
            effective_radius(cfg.search_radii[l], ref_l.width(), ref_l.height()),
            cfg.norms[l],
            cfg.subpixel && !finest,
        );
        if finest {
            clamp_to_frame(&mut field, ref_l.width(), ref_l.height());
        }
        fields.push(field);
    }
    fields
}

/// All levels for every alternate; `pyramids[0]` is the reference.
pub fn align_burst_levels(pyramids: &[Pyramid], cfg: &AlignmentConfig) -> Result<Vec<Vec<MotionField>>> {
    check_pyramids(pyramids, cfg)?;
    if pyramids.len() < 2 {
        return Err(Error::InvalidBurst(
            "need a reference and at least one alternate".into(),
        ));
    }
    Ok(pyramids[1..]
        .iter()
        .map(|alt| align_pair(&pyramids[0], alt, cfg))
        .collect())
}

/// Finest-level motion field for each alternate (`pyramids[0]` is the reference).
/// Vectors are integers in grayscale pixels, i.e. color-plane pixels; they
/// correspond to twice that displacement on the full mosaic.
pub fn align_burst(pyramids: &[Pyramid], cfg: &AlignmentConfig) -> Result<Vec<MotionField>> {
    Ok(align_burst_levels(pyramids, cfg)?
        .into_iter()
        .map(|mut levels| levels.pop().expect("at least one level"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::build_pyramid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = GrayImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect());
        // mild smoothing keeps the texture trackable at coarse levels
        crate::pyramid::convolve_separable(&raw, &[0.25, 0.5, 0.25])
    }

    fn shifted(img: &GrayImage, a: isize, b: isize) -> GrayImage {
        // content moves by (a, b): alt(x) = ref(x - a)
        GrayImage::from_fn(img.width(), img.height(), |x, y| {
            img.get_reflect(x as isize - a, y as isize - b)
        })
    }

    #[test]
    fn grid_geometry() {
        let g = TileGrid::covering(100, 40, 16, 0);
        assert_eq!((g.stride, g.tiles_x, g.tiles_y), (8, 14, 6));
        assert_eq!(g.origin(0, 0), (-8, -8));
        assert_eq!(g.center(3, 2), (24, 16));
        // last tile still reaches the far edge
        let (x, _) = g.origin(g.tiles_x - 1, 0);
        assert!(x + 16 >= 100);
    }

    #[test]
    fn distance_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let c = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(tile_distance(&t, 2, &t, 2, 0, 0, Norm::L1), 0.0);
        assert_eq!(tile_distance(&t, 2, &c, 2, 0, 0, Norm::L1), 1.0);
        assert_eq!(tile_distance(&t, 2, &c, 2, 0, 0, Norm::L2), 1.0);
        let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        let c2: Vec<f64> = [1.0, 0.0, 3.0, 7.0].iter().map(|v| 2.0 * v).collect();
        let c1 = [1.0, 0.0, 3.0, 7.0];
        assert_eq!(
            tile_distance(&t2, 2, &c2, 2, 0, 0, Norm::L2),
            4.0 * tile_distance(&t, 2, &c1, 2, 0, 0, Norm::L2)
        );
        assert_eq!(
            tile_distance(&t2, 2, &c2, 2, 0, 0, Norm::L1),
            2.0 * tile_distance(&t, 2, &c1, 2, 0, 0, Norm::L1)
        );
    }

    #[test]
    fn fft_map_planted_match() {
        let (n, r) = (16, 4);
        let m = n + 2 * r;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let area: Vec<f64> = (0..m * m).map(|_| rng.random()).collect();
        // copy of the candidate at displacement (2, -1)
        let (u, v) = ((2 + r as isize) as usize, (-1 + r as isize) as usize);
        let tile: Vec<f64> = (0..n * n).map(|k| area[(v + k / n) * m + u + k % n]).collect();
        let map = l2_distance_map(&tile, n, &area, r);
        let best = argmin(&map);
        let side = 2 * r + 1;
        assert_eq!((best % side, best / side), (u, v));
        assert!(map[best].abs() < 1e-9);
    }

    #[test]
    fn fft_map_zero_tile_is_box_filter() {
        let (n, r) = (8, 3);
        let m = n + 2 * r;
        let area: Vec<f64> = (0..m * m).map(|k| ((k * 31) % 17) as f64 / 17.0).collect();
        let map = l2_distance_map(&vec![0.0; n * n], n, &area, r);
        let side = 2 * r + 1;
        for v in 0..side {
            for u in 0..side {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += area[(v + i) * m + u + j].powi(2);
                    }
                }
                assert!((map[v * side + u] - s).abs() < 1e-9 * s.max(1.0));
            }
        }
    }

    #[test]
    fn argmin_ties_prefer_smallest_v_then_u() {
        assert_eq!(argmin(&[3.0, 1.0, 1.0, 0.5, 0.5]), 3);
        assert_eq!(argmin(&[2.0, 2.0, 2.0]), 0);
    }

    fn quad_window(f: impl Fn(f64, f64) -> f64) -> [[f64; 3]; 3] {
        let mut w = [[0.0; 3]; 3];
        for (dv, row) in w.iter_mut().enumerate() {
            for (du, x) in row.iter_mut().enumerate() {
                *x = f(du as f64 - 1.0, dv as f64 - 1.0);
            }
        }
        w
    }

    #[test]
    fn subpixel_examples() {
        let w = quad_window(|u, v| (u - 0.3).powi(2) + (v + 0.2).powi(2));
        let mu = subpixel_refine(&w).unwrap();
        assert!((mu.u - 0.3).abs() < 1e-9 && (mu.v + 0.2).abs() < 1e-9);
        assert!(subpixel_refine(&[[5.0; 3]; 3]).is_none());
        let far = quad_window(|u, v| (u - 1.4).powi(2) + v * v);
        assert!(subpixel_refine(&far).is_none());
        // saddle
        let saddle = quad_window(|u, v| u * u - v * v);
        assert!(subpixel_refine(&saddle).is_none());
        // rank-one Hessian: rounding must not sneak a determinant past zero
        for (a, b) in [(0.1, 0.2), (0.45, -0.1), (-0.3, 0.4)] {
            let valley = quad_window(|u, v| 0.5 * (u - a + v - b).powi(2));
            assert!(subpixel_refine(&valley).is_none(), "({a}, {b})");
        }
    }

    #[test]
    fn upsample_sixteen_tile_example() {
        // 16x16 tiles on both levels, factor 4: one coarse tile -> 4x4 fine tiles
        let coarse_grid = TileGrid::covering(64, 64, 16, 0);
        let mut coarse = MotionField::zeros(coarse_grid);
        coarse.set(3, 3, Displacement::new(2.0, 1.0));
        let fine_grid = TileGrid::covering(256, 256, 16, 1);
        let fine = upsample_motion_field(&coarse, 4, fine_grid);
        let hits = fine
            .vectors()
            .iter()
            .filter(|d| **d == Displacement::new(8.0, 4.0))
            .count();
        assert_eq!(hits, 16);
        assert!(fine
            .vectors()
            .iter()
            .all(|d| *d == Displacement::ZERO || *d == Displacement::new(8.0, 4.0)));
    }

    #[test]
    fn upsample_by_two_covers_four_tiles() {
        let coarse_grid = TileGrid::covering(64, 64, 16, 0);
        let mut coarse = MotionField::zeros(coarse_grid);
        coarse.set(2, 4, Displacement::new(-1.5, 3.0));
        let fine = upsample_motion_field(&coarse, 2, TileGrid::covering(128, 128, 16, 1));
        let hits = fine
            .vectors()
            .iter()
            .filter(|d| **d == Displacement::new(-3.0, 6.0))
            .count();
        assert_eq!(hits, 4);
        assert_eq!(
            upsample_motion_field(&MotionField::zeros(coarse_grid), 2, TileGrid::covering(128, 128, 16, 1))
                .vectors()
                .iter()
                .filter(|d| **d != Displacement::ZERO)
                .count(),
            0
        );
    }

    #[test]
    fn candidate_prefers_neighbor_across_motion_boundary() {
        // content right of x = 64 moved by +4 px, left part static
        let base = textured(128, 64, 7);
        let alt = GrayImage::from_fn(128, 64, |x, y| {
            if x >= 64 {
                base.get_reflect(x as isize - 4, y as isize)
            } else {
                base.get(x, y)
            }
        });
        // coarse level at half resolution; coarse tile 4 spans fine [48, 80)
        // and straddles the boundary but carries the moving vector
        let coarse_grid = TileGrid::covering(64, 32, 16, 0);
        let mut coarse = MotionField::zeros(coarse_grid);
        for ty in 0..coarse_grid.tiles_y {
            for tx in 4..coarse_grid.tiles_x {
                coarse.set(tx, ty, Displacement::new(2.0, 0.0));
            }
        }
        let fine_grid = TileGrid::covering(128, 64, 16, 1);
        // fine tile 7 spans [48, 64): static background, owned by coarse tile 4
        let tile = (7, 4);
        assert_eq!(coarse_grid.owner(fine_grid.center(7, 4).0, 2, coarse_grid.tiles_x), 4);
        let guess = select_candidate_guess(tile, &fine_grid, &coarse, 2, &base, &alt);

        // exhaustive evaluation of owner, left neighbor, lower neighbor
        let n = 16;
        let origin = fine_grid.origin(tile.0, tile.1);
        let mut rt = vec![0.0; n * n];
        let mut buf = vec![0.0; n * n];
        base.copy_window(origin.0, origin.1, n, n, &mut rt);
        let jy = coarse_grid.owner(fine_grid.center(7, 4).1, 2, coarse_grid.tiles_y);
        let costs: Vec<(f64, Displacement)> = [(4, jy), (3, jy), (4, jy + 1)]
            .iter()
            .map(|&(x, y)| {
                let d = coarse.get(x, y).scaled(2.0);
                (l1_at(&rt, &alt, origin, d, n, &mut buf), d)
            })
            .collect();
        let best = costs.iter().fold(costs[0], |acc, c| if c.0 < acc.0 { *c } else { acc });
        assert_eq!(guess, best.1);
        assert_eq!(guess, Displacement::ZERO);
    }

    #[test]
    fn candidate_unanimous_and_static() {
        let img = textured(64, 64, 1);
        let fine_grid = TileGrid::covering(64, 64, 16, 1);
        let coarse = MotionField::uniform(TileGrid::covering(32, 32, 16, 0), Displacement::new(1.0, -2.0));
        let g = select_candidate_guess((3, 3), &fine_grid, &coarse, 2, &img, &img);
        assert_eq!(g, Displacement::new(2.0, -4.0));
        let zero = MotionField::zeros(TileGrid::covering(32, 32, 16, 0));
        assert_eq!(
            select_candidate_guess((3, 3), &fine_grid, &zero, 2, &img, &img),
            Displacement::ZERO
        );
    }

    #[test]
    fn align_level_self_and_shift() {
        let img = textured(128, 128, 11);
        let grid = TileGrid::covering(128, 128, 16, 0);
        let f = align_level(&img, &img, &MotionField::zeros(grid), 4, Norm::L2, false);
        assert!(f.vectors().iter().all(|d| *d == Displacement::ZERO));

        let alt = shifted(&img, 3, -2);
        for norm in [Norm::L1, Norm::L2] {
            let f = align_level(&img, &alt, &MotionField::zeros(grid), 4, norm, false);
            // tiles away from the reflected border are exact
            for ty in 1..grid.tiles_y - 2 {
                for tx in 1..grid.tiles_x - 2 {
                    assert_eq!(f.get(tx, ty), Displacement::new(3.0, -2.0), "{tx},{ty}");
                }
            }
        }

        let far = shifted(&img, 10, 0);
        let init = MotionField::uniform(grid, Displacement::new(10.0, 0.0));
        let f = align_level(&img, &far, &init, 4, Norm::L1, false);
        assert_eq!(f.get(4, 4), Displacement::new(10.0, 0.0));
    }

    #[test]
    fn burst_of_identical_frames_has_zero_fields() {
        // 128x96 has a 4x3 coarsest level, where reflected copies of a tile
        // sit within the nominal search radius
        for (w, h) in [(256, 192), (128, 96), (96, 64)] {
            let img = textured(w, h, 5);
            let p = build_pyramid(&img, &[2, 4, 4]).unwrap();
            let pyramids = vec![p.clone(), p.clone(), p];
            let levels = align_burst_levels(&pyramids, &AlignmentConfig::default()).unwrap();
            assert_eq!(levels.len(), 2);
            for per_alt in &levels {
                assert_eq!(per_alt.len(), 4);
                for field in per_alt {
                    assert!(field.vectors().iter().all(|d| *d == Displacement::ZERO), "{w}x{h}");
                }
            }
        }
    }

    #[test]
    fn radius_shrinks_only_on_tiny_levels() {
        assert_eq!(effective_radius(4, 16, 12), 4);
        assert_eq!(effective_radius(4, 4, 3), 3);
        assert_eq!(effective_radius(4, 2, 2), 1);
        assert_eq!(effective_radius(4, 1, 1), 1);
    }

    #[test]
    fn global_shift_recovered() {
        let img = textured(512, 384, 9);
        let alt = shifted(&img, 6, -2);
        let pyramids = vec![
            build_pyramid(&img, &[2, 4, 4]).unwrap(),
            build_pyramid(&alt, &[2, 4, 4]).unwrap(),
        ];
        let fields = align_burst(&pyramids, &AlignmentConfig::default()).unwrap();
        assert_eq!(fields.len(), 1);
        let f = &fields[0];
        let g = f.grid();
        let mut good = 0;
        let mut total = 0;
        for ty in 2..g.tiles_y - 2 {
            for tx in 2..g.tiles_x - 2 {
                total += 1;
                if f.get(tx, ty) == Displacement::new(6.0, -2.0) {
                    good += 1;
                }
            }
        }
        assert_eq!(good, total);
        assert!(f.vectors().iter().all(|d| d.u.fract() == 0.0 && d.v.fract() == 0.0));
    }

    #[test]
    fn csv_and_hsv_dumps() {
        let grid = TileGrid::covering(16, 8, 8, 2);
        let mut f = MotionField::zeros(grid);
        f.set(1, 0, Displacement::new(1.0, 0.0));
        let csv = f.to_csv();
        assert!(csv.starts_with("tile_x,tile_y,u,v\n0,0,0,0\n1,0,1,0\n"));
        let img = f.to_hsv_image();
        assert_eq!(img.pixel(0, 0), [255, 255, 255]);
        assert_eq!(img.pixel(1, 0), [255, 0, 0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subpixel_recovers_any_pd_quadratic(
            a in 0.1f64..10.0, c in 0.1f64..10.0, t in -0.95f64..0.95,
            r in 0.0f64..0.99, theta in 0.0f64..std::f64::consts::TAU, k in -5.0f64..5.0,
        ) {
            let a12 = t * (a * c).sqrt();
            let (mu_u, mu_v) = (r * theta.cos(), r * theta.sin());
            let w = quad_window(|u, v| {
                let (x, y) = (u - mu_u, v - mu_v);
                0.5 * (a * x * x + 2.0 * a12 * x * y + c * y * y) + k
            });
            let mu = subpixel_refine(&w).unwrap();
            prop_assert!((mu.u - mu_u).abs() < 1e-9 && (mu.v - mu_v).abs() < 1e-9);
        }

        #[test]
        fn fft_map_matches_brute_force(seed in any::<u64>(), r in 1usize..6) {
            let n = 16;
            let m = n + 2 * r;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tile: Vec<f64> = (0..n * n).map(|_| rng.random()).collect();
            let area: Vec<f64> = (0..m * m).map(|_| rng.random()).collect();
            let fast = l2_distance_map(&tile, n, &area, r);
            let slow = direct_distance_map(&tile, n, &area, r, Norm::L2);
            for (f, s) in fast.iter().zip(&slow) {
                prop_assert!((f - s).abs() <= 1e-6 * s.abs());
            }
        }
    }
}
