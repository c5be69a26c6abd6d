//! Cartesian column masks for k-space subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Modality};

/// Signed frequency of DFT bin `j` on a grid of size `n`.
pub fn frequency_index(j: usize, n: usize) -> isize {
    if j < n.div_ceil(2) {
        j as isize
    } else {
        j as isize - n as isize
    }
}

/// Column mask in unshifted DFT layout (DC at column 0). The
/// `ceil(center_fraction * W)` lowest-|frequency| columns are always kept;
/// every other column is kept independently with the probability that makes
/// the expected kept fraction `1 / acceleration`.
pub fn make_mask(height: usize, width: usize, acceleration: f64, center_fraction: f64, seed: u64) -> Result<Image> {
    if !(acceleration >= 1.0) {
        return Err(Error::invalid(format!("acceleration must be >= 1, got {acceleration}")));
    }
    if !(0.0..=1.0).contains(&center_fraction) || center_fraction > 1.0 / acceleration {
        return Err(Error::invalid(format!(
            "center_fraction {center_fraction} exceeds the 1/{acceleration} sampling budget"
        )));
    }
    let n_center = ((center_fraction * width as f64).ceil() as usize).min(width);
    let mut order: Vec<usize> = (0..width).collect();
    // Stable: ties at +f / -f keep the positive bin first.
    order.sort_by_key(|&j| frequency_index(j, width).unsigned_abs());
    let mut keep = vec![false; width];
    for &j in &order[..n_center] {
        keep[j] = true;
    }
    let rest = width - n_center;
    let p = if rest == 0 {
        0.0
    } else {
        ((width as f64 / acceleration - n_center as f64) / rest as f64).clamp(0.0, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &j in &order[n_center..] {
        // Draw for every column so the stream does not depend on p.
        let u: f64 = rng.random();
        keep[j] = u < p;
    }
    let mut data = vec![0.0; height * width];
    for row in data.chunks_mut(width) {
        for (v, &k) in row.iter_mut().zip(&keep) {
            *v = if k { 1.0 } else { 0.0 };
        }
    }
    Image::new(height, width, data, Modality::Mask)
}
