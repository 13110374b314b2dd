//! Grayscale conversion of Bayer mosaics and the Gaussian pyramids used for alignment.

use crate::burst_io::{BayerFrame, BurstMetadata};
use crate::error::{Error, Result};

/// Default fine-to-coarse downsampling factors.
pub const DEFAULT_FACTORS: [usize; 3] = [2, 4, 4];

/// Real-valued single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `len -> len - 2`).
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        assert_eq!(data.len(), width * height, "buffer size");
        GrayImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with reflect padding for out-of-range coordinates.
    #[inline]
    pub fn get_reflect(&self, x: isize, y: isize) -> f64 {
        self.get(reflect_index(x, self.width), reflect_index(y, self.height))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copy the `w x h` window whose top-left corner is `(x0, y0)` into `out`,
    /// reflecting coordinates that fall outside the image.
    pub fn copy_window(&self, x0: isize, y0: isize, w: usize, h: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), w * h);
        let inside = x0 >= 0 && y0 >= 0 && x0 as usize + w <= self.width && y0 as usize + h <= self.height;
        if inside {
            let (x0, y0) = (x0 as usize, y0 as usize);
            for (row, dst) in out.chunks_exact_mut(w).enumerate() {
                let start = (y0 + row) * self.width + x0;
                dst.copy_from_slice(&self.data[start..start + w]);
            }
        } else {
            for (row, dst) in out.chunks_exact_mut(w).enumerate() {
                let yy = reflect_index(y0 + row as isize, self.height);
                for (col, d) in dst.iter_mut().enumerate() {
                    *d = self.get(reflect_index(x0 + col as isize, self.width), yy);
                }
            }
        }
    }
}

/// Half-resolution grayscale: mean of each 2x2 CFA cell after black subtraction
/// and normalization by `white - black`.
pub fn bayer_to_gray(frame: &BayerFrame, meta: &BurstMetadata) -> GrayImage {
    let (w, h) = (frame.width() / 2, frame.height() / 2);
    let black = f64::from(meta.black_level);
    let scale = 0.25 / meta.range();
    GrayImage::from_fn(w, h, |x, y| {
        let (mx, my) = (2 * x, 2 * y);
        let sum = f64::from(frame.get(mx, my))
            + f64::from(frame.get(mx + 1, my))
            + f64::from(frame.get(mx, my + 1))
            + f64::from(frame.get(mx + 1, my + 1));
        (sum - 4.0 * black) * scale
    })
}

/// Normalized truncated Gaussian, `radius = round(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (2.0 * sigma).round().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with a symmetric odd-length kernel, reflect borders.
pub fn convolve_separable(img: &GrayImage, kernel: &[f64]) -> GrayImage {
    let r = (kernel.len() / 2) as isize;
    convolve_offset(img, kernel, -r)
}

/// `out[i] = sum_t kernel[t] * in[i + first_tap + t]` along both axes, reflect borders.
fn convolve_offset(img: &GrayImage, kernel: &[f64], first_tap: isize) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                acc += k * row[reflect_index(x as isize + first_tap + t as isize, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (t, k) in kernel.iter().enumerate() {
            let src = reflect_index(y as isize + first_tap + t as isize, h);
            let src_row = &tmp[src * w..(src + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += k * s;
            }
        }
    }
    GrayImage::new(w, h, out)
}

/// Anti-aliasing taps for decimation by `factor`: a Gaussian with
/// `sigma = factor / 2`, truncated at `2 sigma`, centered on the middle of the
/// `factor`-wide block that starts at tap offset 0. Returns `(first_tap, weights)`.
pub fn decimation_kernel(factor: usize) -> (isize, Vec<f64>) {
    let sigma = factor as f64 / 2.0;
    let center = (factor as f64 - 1.0) / 2.0;
    let radius = 2.0 * sigma;
    let first = (center - radius).ceil() as isize;
    let last = (center + radius).floor() as isize;
    let mut k: Vec<f64> = (first..=last)
        .map(|t| {
            let d = t as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (first, k)
}

/// Full-resolution low-pass whose samples at multiples of `factor` form the
/// downsampled image.
pub fn antialias_blur(img: &GrayImage, factor: usize) -> GrayImage {
    let (first, k) = decimation_kernel(factor);
    convolve_offset(img, &k, first)
}

/// Low-pass then decimate by `factor`; output is `ceil(dims / factor)` and
/// output pixel `(x, y)` sits at the center of input block `[x*f, (x+1)*f)`.
pub fn gaussian_downsample(img: &GrayImage, factor: usize) -> GrayImage {
    assert!(factor >= 1, "downsampling factor must be positive");
    if factor == 1 {
        return img.clone();
    }
    let (first, k) = decimation_kernel(factor);
    let (w, h) = (img.width, img.height);
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for ox in 0..ow {
            let base = (ox * factor) as isize + first;
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[reflect_index(base + t as isize, w)];
            }
            tmp[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        let base = (oy * factor) as isize + first;
        let dst = &mut out[oy * ow..(oy + 1) * ow];
        for (t, kv) in k.iter().enumerate() {
            let src = reflect_index(base + t as isize, h);
            for (d, s) in dst.iter_mut().zip(&tmp[src * ow..(src + 1) * ow]) {
                *d += kv * s;
            }
        }
    }
    GrayImage::new(ow, oh, out)
}

/// Gaussian pyramid, coarsest level first; the last level is the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: Vec<GrayImage>,
    factors: Vec<usize>,
}

impl Pyramid {
    pub fn levels(&self) -> &[GrayImage] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &GrayImage {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &GrayImage {
        self.levels.last().expect("pyramid has at least one level")
    }

    /// Fine-to-coarse factors this pyramid was built with.
    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    /// Upsampling factor from level `l - 1` to level `l` (coarsest is level 0).
    pub fn scale_into(&self, l: usize) -> usize {
        assert!(l >= 1 && l < self.levels.len());
        self.factors[self.levels.len() - 1 - l]
    }
}

/// Build a pyramid with fine-to-coarse `factors` (default `[2, 4, 4]`).
pub fn build_pyramid(img: &GrayImage, factors: &[usize]) -> Result<Pyramid> {
    if factors.is_empty() || factors.contains(&0) {
        return Err(Error::Config(format!(
            "pyramid factors must be nonempty and positive, got {factors:?}"
        )));
    }
    let total: usize = factors.iter().product();
    if img.width < total || img.height < total {
        return Err(Error::ImageTooSmall {
            width: img.width,
            height: img.height,
            factor: total,
        });
    }
    let mut levels = Vec::with_capacity(factors.len() + 1);
    levels.push(img.clone());
    for &f in factors {
        let next = gaussian_downsample(levels.last().unwrap(), f);
        levels.push(next);
    }
    levels.reverse();
    Ok(Pyramid {
        levels,
        factors: factors.to_vec(),
    })
}
