//! Unitary 2-D DFT on power-of-two grids.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Planned forward/inverse transforms for one grid size, scaled by
/// `1 / sqrt(H * W)` in both directions.
#[derive(Clone)]
pub struct Dft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Dft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Dft2({}x{})", self.height, self.width)
    }
}

impl Dft2 {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if !height.is_power_of_two() || !width.is_power_of_two() {
            return Err(Error::invalid(format!(
                "dft2 needs power-of-two sizes, got {height}x{width}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Dft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    fn run(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w);
        rows.process(data);
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = data[i * w + j];
            }
            cols.process(&mut col);
            for i in 0..h {
                data[i * w + j] = col[i];
            }
        }
        let s = 1.0 / ((h * w) as f64).sqrt();
        data.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inv, &self.col_inv);
    }
}

/// Forward unitary DFT of planes `(re, im)`, row-major `H x W`.
pub fn dft2(re: &[f64], im: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    transform(re, im, height, width, true)
}

pub fn idft2(re: &[f64], im: &[f64], height: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    transform(re, im, height, width, false)
}

fn transform(re: &[f64], im: &[f64], h: usize, w: usize, forward: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if re.len() != h * w || im.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "dft2",
            lhs: vec![h, w],
            rhs: vec![re.len(), im.len()],
        });
    }
    let plan = Dft2::new(h, w)?;
    let mut buf: Vec<Complex64> = re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect();
    if forward {
        plan.forward(&mut buf);
    } else {
        plan.inverse(&mut buf);
    }
    Ok(buf.iter().map(|z| (z.re, z.im)).unzip())
}
