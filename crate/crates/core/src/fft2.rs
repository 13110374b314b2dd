//! Small 2D DFT wrapper over `rustfft` for square and rectangular tiles.
//!
//! Forward transforms are unnormalized; [`Fft2::inverse`] applies the `1/(w*h)` factor.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fft2 {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Per-call working memory, kept separate so one plan can be shared across threads.
pub struct Fft2Scratch {
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn square(n: usize) -> Self {
        Self::new(n, n)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn make_scratch(&self) -> Fft2Scratch {
        let scratch_len = [&self.row_fwd, &self.row_inv, &self.col_fwd, &self.col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Fft2Scratch {
            transposed: vec![Complex64::default(); self.len()],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    fn run(&self, data: &mut [Complex64], s: &mut Fft2Scratch, row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
        assert_eq!(data.len(), self.len());
        let (w, h) = (self.width, self.height);
        row.process_with_scratch(data, &mut s.scratch);
        for y in 0..h {
            for x in 0..w {
                s.transposed[x * h + y] = data[y * w + x];
            }
        }
        col.process_with_scratch(&mut s.transposed, &mut s.scratch);
        for x in 0..w {
            for y in 0..h {
                data[y * w + x] = s.transposed[x * h + y];
            }
        }
    }

    pub fn forward(&self, data: &mut [Complex64], scratch: &mut Fft2Scratch) {
        self.run(data, scratch, &*self.row_fwd, &*self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64], scratch: &mut Fft2Scratch) {
        self.run(data, scratch, &*self.row_inv, &*self.col_inv);
        let norm = 1.0 / self.len() as f64;
        for v in data.iter_mut() {
            *v *= norm;
        }
    }
}
