//! Histogram normalized mutual information and the temperature it drives.

use crate::error::{Error, Result};

/// Bin index of each pixel on `bins` equal-width bins over `[0, 1]`;
/// out-of-range values land in the edge bins.
pub fn quantize(p: &[f64], bins: usize) -> Vec<u16> {
    p.iter()
        .map(|&v| ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1) as u16)
        .collect()
}

fn entropy_of_counts(counts: impl Iterator<Item = u32>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// A patch reduced to what NMI needs: bin indices and marginal entropy.
#[derive(Clone, Debug)]
pub struct Quantized {
    bins: usize,
    idx: Vec<u16>,
    entropy: f64,
}

impl Quantized {
    pub fn new(p: &[f64], bins: usize) -> Self {
        let idx = quantize(p, bins);
        let mut counts = vec![0u32; bins];
        idx.iter().for_each(|&b| counts[b as usize] += 1);
        let entropy = entropy_of_counts(counts.into_iter(), idx.len() as f64);
        Quantized { bins, idx, entropy }
    }
}

/// Reusable joint-histogram buffer.
pub struct JointHistogram {
    counts: Vec<u32>,
    touched: Vec<usize>,
}

impl JointHistogram {
    pub fn new(bins: usize) -> Self {
        JointHistogram {
            counts: vec![0; bins * bins],
            touched: Vec::new(),
        }
    }

    /// `2 I(A; B) / (H(A) + H(B))`, clamped to `[0, 1]`. Two constant
    /// patches score 1 when they fall in the same bin and 0 otherwise.
    pub fn nmi(&mut self, a: &Quantized, b: &Quantized) -> f64 {
        debug_assert_eq!(a.idx.len(), b.idx.len());
        let hsum = a.entropy + b.entropy;
        if hsum == 0.0 {
            return if a.idx[0] == b.idx[0] { 1.0 } else { 0.0 };
        }
        let bins = a.bins;
        for (&x, &y) in a.idx.iter().zip(&b.idx) {
            let cell = x as usize * bins + y as usize;
            if self.counts[cell] == 0 {
                self.touched.push(cell);
            }
            self.counts[cell] += 1;
        }
        let n = a.idx.len() as f64;
        let joint = entropy_of_counts(self.touched.iter().map(|&c| self.counts[c]), n);
        for &c in &self.touched {
            self.counts[c] = 0;
        }
        self.touched.clear();
        (2.0 * (hsum - joint) / hsum).clamp(0.0, 1.0)
    }
}

/// NMI of two equally sized patches on `bins x bins` histograms over `[0, 1]^2`.
pub fn nmi(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "nmi",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if bins < 2 || bins > u16::MAX as usize {
        return Err(Error::invalid(format!("nmi: bins must be in 2..=65535, got {bins}")));
    }
    let mut h = JointHistogram::new(bins);
    Ok(h.nmi(&Quantized::new(a, bins), &Quantized::new(b, bins)))
}

/// `tau_min + (tau_max - tau_min) (1 - nmi)`.
pub fn adaptive_tau(nmi: f64, tau_min: f64, tau_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&nmi) || !(tau_min > 0.0 && tau_min <= tau_max) {
        return Err(Error::invalid(format!(
            "adaptive_tau: need nmi in [0, 1] and 0 < tau_min <= tau_max, got {nmi}, {tau_min}, {tau_max}"
        )));
    }
    Ok(tau_min + (tau_max - tau_min) * (1.0 - nmi))
}

/// `out[i][k] = f(a_i, b_k)` over quantized patches, row-major `B x B`.
pub fn nmi_matrix(a: &[Quantized], b: &[Quantized]) -> Vec<f64> {
    let bins = a.first().map_or(2, |q| q.bins);
    let row = |i: usize| {
        let mut h = JointHistogram::new(bins);
        b.iter().map(|bk| h.nmi(&a[i], bk)).collect::<Vec<f64>>()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..a.len()).into_par_iter().map(row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..a.len()).map(row).collect();
    rows.concat()
}
