//! Paired two-contrast ellipse phantoms with exact lesion ground truth.
//!
//! Both renderings share every ellipse's support; only the per-ellipse
//! intensities differ between the target and auxiliary contrast. Ellipses
//! are layered, the last one drawn wins.
//!
//! Tissue ellipses are anti-aliased with 2x2 supersampling. Lesion ellipses
//! are rasterized at pixel centres, so the lesion mask and the lesion
//! intensity band line up pixel for pixel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Modality};

/// Target-contrast intensities of healthy tissue.
pub const TARGET_TISSUE: (f64, f64) = (0.10, 0.60);
/// Auxiliary-contrast intensities of all tissue, including lesions.
pub const AUX_TISSUE: (f64, f64) = (0.62, 1.00);
/// Target-contrast intensities reserved for lesions.
pub const LESION_BAND: (f64, f64) = (0.85, 1.00);
/// Threshold band that separates lesions from tissue in the target contrast.
pub const LESION_SEGMENT_BAND: (f64, f64) = (0.72, 1.0);

const SUBSAMPLE: [f64; 2] = [0.25, 0.75];

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    /// `(x, y)` in unit canvas coordinates.
    pub center: (f64, f64),
    /// Semi-axes `(a, b)` as fractions of the canvas, before rotation.
    pub axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub intensity_target: f64,
    pub intensity_aux: f64,
    pub is_lesion: bool,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub ellipses: Vec<Ellipse>,
    /// `(target, aux)` intensity outside every ellipse.
    pub background: (f64, f64),
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub target: Image,
    pub aux: Image,
    pub lesion_mask: Image,
}

impl ImagePair {
    pub fn has_lesion(&self) -> bool {
        self.lesion_mask.data().iter().any(|&v| v > 0.5)
    }
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::invalid(format!(
            "phantom canvas must be at least 16x16, got {}x{}",
            spec.height, spec.width
        )));
    }
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    for (i, e) in spec.ellipses.iter().enumerate() {
        if !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
            return Err(Error::invalid(format!("ellipse {i} has zero area (axes {:?})", e.axes)));
        }
        if !(unit(e.center.0) && unit(e.center.1) && e.axes.0 <= 1.0 && e.axes.1 <= 1.0) {
            return Err(Error::invalid(format!("ellipse {i} geometry outside unit canvas")));
        }
        if !(unit(e.intensity_target) && unit(e.intensity_aux)) {
            return Err(Error::invalid(format!("ellipse {i} intensity outside [0, 1]")));
        }
    }
    Ok(())
}

/// Rasterizes both contrasts and the lesion mask. Deterministic in `spec`.
pub fn render(spec: &PhantomSpec) -> Result<ImagePair> {
    validate(spec)?;
    let (h, w) = (spec.height, spec.width);
    let mut target = vec![0.0; h * w];
    let mut aux = vec![0.0; h * w];
    let mut mask = vec![0.0; h * w];

    let topmost = |x: f64, y: f64, with_lesions: bool| {
        spec.ellipses
            .iter()
            .rev()
            .find(|e| (with_lesions || !e.is_lesion) && e.contains(x, y))
    };

    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let k = i * w + j;
            if let Some(e) = topmost(cx, cy, true).filter(|e| e.is_lesion) {
                target[k] = e.intensity_target;
                aux[k] = e.intensity_aux;
                mask[k] = 1.0;
                continue;
            }
            let (mut st, mut sa) = (0.0, 0.0);
            for oy in SUBSAMPLE {
                for ox in SUBSAMPLE {
                    let (x, y) = ((j as f64 + ox) / w as f64, (i as f64 + oy) / h as f64);
                    let (t, a) = topmost(x, y, false)
                        .map_or(spec.background, |e| (e.intensity_target, e.intensity_aux));
                    st += t;
                    sa += a;
                }
            }
            target[k] = (st / 4.0).clamp(0.0, 1.0);
            aux[k] = (sa / 4.0).clamp(0.0, 1.0);
        }
    }
    Ok(ImagePair {
        target: Image::new(h, w, target, Modality::Target)?,
        aux: Image::new(h, w, aux, Modality::Aux)?,
        lesion_mask: Image::new(h, w, mask, Modality::Mask)?,
    })
}

fn contrasting<R: Rng>(rng: &mut R, range: (f64, f64), avoid: f64, min_gap: f64) -> f64 {
    for _ in 0..64 {
        let v = rng.random_range(range.0..=range.1);
        if (v - avoid).abs() >= min_gap {
            return v;
        }
    }
    // The ranges used here are always wide enough; fall back to the far end.
    if avoid - range.0 > range.1 - avoid {
        range.0
    } else {
        range.1
    }
}

fn point_in_disc<R: Rng>(rng: &mut R, c: (f64, f64), r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    (c.0 + rho * phi.cos(), c.1 + rho * phi.sin())
}

/// A randomized head-like phantom: one outline ellipse, 2-7 interior
/// ellipses, and with probability `lesion_prob` the last interior ellipse
/// is a lesion.
pub fn random_spec<R: Rng>(height: usize, width: usize, lesion_prob: f64, seed: u64, rng: &mut R) -> PhantomSpec {
    const MIN_GAP: f64 = 0.1;
    let head_c = (0.5 + rng.random_range(-0.03..0.03), 0.5 + rng.random_range(-0.03..0.03));
    let head_t = rng.random_range(TARGET_TISSUE.0..=0.35);
    let head_a = rng.random_range(AUX_TISSUE.0..=0.8);
    let mut ellipses = vec![Ellipse {
        center: head_c,
        axes: (rng.random_range(0.36..0.43), rng.random_range(0.40..0.46)),
        rotation: rng.random_range(-0.3..0.3),
        intensity_target: head_t,
        intensity_aux: head_a,
        is_lesion: false,
    }];
    let total = rng.random_range(3..=8usize);
    let lesion = rng.random::<f64>() < lesion_prob;
    for k in 1..total {
        let last = k + 1 == total;
        if last && lesion {
            let (l0, l1) = (rng.random_range(0.09..0.15), rng.random_range(0.09..0.15));
            ellipses.push(Ellipse {
                center: point_in_disc(rng, head_c, 0.2),
                axes: (l0, l1),
                rotation: rng.random_range(0.0..PI),
                intensity_target: rng.random_range(LESION_BAND.0..=LESION_BAND.1),
                intensity_aux: contrasting(rng, AUX_TISSUE, head_a, MIN_GAP),
                is_lesion: true,
            });
        } else {
            ellipses.push(Ellipse {
                center: point_in_disc(rng, head_c, 0.22),
                axes: (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2)),
                rotation: rng.random_range(0.0..PI),
                intensity_target: contrasting(rng, TARGET_TISSUE, head_t, MIN_GAP),
                intensity_aux: contrasting(rng, AUX_TISSUE, head_a, MIN_GAP),
                is_lesion: false,
            });
        }
    }
    PhantomSpec {
        height,
        width,
        ellipses,
        background: (0.0, 0.0),
        seed,
    }
}

/// `n` rendered pairs. Pair `i` depends only on `(seed, i)`.
pub fn sample_dataset(n: usize, height: usize, width: usize, lesion_prob: f64, seed: u64) -> Result<Vec<ImagePair>> {
    if n == 0 {
        return Err(Error::invalid("sample_dataset: n must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let item_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
            render(&random_spec(height, width, lesion_prob, item_seed, &mut rng))
        })
        .collect()
}
