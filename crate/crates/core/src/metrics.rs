//! Image-quality and hallucination metrics.
//!
//! The second argument of every two-image metric is the reference.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, Modality};
use crate::pamri::Encoder;
use crate::sampler::tiles;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_SIGMA: f64 = 1.5;
pub const FEAT_BETA: f64 = 4.0;

fn same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        let (ah, aw) = a.shape();
        let (bh, bw) = b.shape();
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![ah, aw],
            rhs: vec![bh, bw],
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)` on unit dynamic range, capped at 100 dB.
pub fn psnr(x: &Image, reference: &Image) -> Result<f64> {
    same_shape("psnr", x, reference)?;
    let mse = x.sq_dist(reference) / x.data().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Single-scale SSIM averaged over every 8x8 window (stride 1, Gaussian
/// weights with sigma 1.5).
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    same_shape("ssim", x, reference)?;
    let (h, w) = x.shape();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::invalid(format!("ssim needs at least {k}x{k} images")));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = gaussian_window();
    let (a, b) = (x.data(), reference.data());
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = g[i * k + j];
                    let (p, q) = (a[(r + i) * w + c + j], b[(r + i) * w + c + j]);
                    ma += wt * p;
                    mb += wt * q;
                    aa += wt * p * p;
                    bb += wt * q * q;
                    ab += wt * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

fn check_binary(m: &Image) -> Result<()> {
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("dice: masks must contain only 0 and 1"));
    }
    Ok(())
}

/// `2 |A & B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Image, b: &Image) -> Result<f64> {
    same_shape("dice", a, b)?;
    check_binary(a)?;
    check_binary(b)?;
    let inter: f64 = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
    let size: f64 = a.data().iter().chain(b.data()).sum();
    if size == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / size)
}

const PLUS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// Erosion (`keep_all`) or dilation over the plus-shaped 3x3 element;
/// neighbours outside the canvas are ignored.
fn morph(m: &[bool], h: usize, w: usize, keep_all: bool) -> Vec<bool> {
    let mut out = vec![false; m.len()];
    for y in 0..h {
        for x in 0..w {
            let mut hits = PLUS.iter().filter_map(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| m[yy as usize * w + xx as usize])
            });
            out[y * w + x] = if keep_all { hits.all(|v| v) } else { hits.any(|v| v) };
        }
    }
    out
}

/// Pixels inside `[lo, hi]` before the opening.
pub fn band_mask(x: &Image, lo: f64, hi: f64) -> Vec<bool> {
    x.data().iter().map(|&v| v >= lo && v <= hi).collect()
}

/// Band threshold followed by a morphological opening that removes speckle.
pub fn threshold_segment(x: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("threshold_segment: need lo < hi, got {lo}, {hi}")));
    }
    let (h, w) = x.shape();
    let opened = morph(&morph(&band_mask(x, lo, hi), h, w, true), h, w, false);
    Image::new(h, w, opened.iter().map(|&b| f64::from(u8::from(b))).collect(), Modality::Mask)
}

/// Per-tile squared embedding distances between `x` and `reference`.
pub fn tile_feature_errors(phi: &Encoder, x: &Image, reference: &Image) -> Result<Vec<f64>> {
    same_shape("feature_hallucination_score", x, reference)?;
    let p = phi.shape.patch;
    let u = phi.embed_values(&tiles(&x.to_tensor(), p)?)?;
    let v = phi.embed_values(&tiles(&reference.to_tensor(), p)?)?;
    let d = u.shape()[1];
    Ok(u.data()
        .chunks(d)
        .zip(v.data().chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
        .collect())
}

/// Tile errors averaged with weights `exp(beta * error)`, so the worst tiles dominate.
pub fn weighted_tile_score(errors: &[f64], beta: f64) -> f64 {
    let top = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (num, den) = errors.iter().fold((0.0, 0.0), |(n, d), &e| {
        let wt = (beta * (e - top)).exp();
        (n + wt * e, d + wt)
    });
    num / den
}

/// Hallucination proxy: exponentially weighted mean tile distance in the
/// target encoder's feature space.
pub fn feature_hallucination_score(phi: &Encoder, x: &Image, reference: &Image) -> Result<f64> {
    Ok(weighted_tile_score(&tile_feature_errors(phi, x, reference)?, FEAT_BETA))
}

/// One image's metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub meas_loss: f64,
    pub dice: Option<f64>,
    pub feat_score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// Mean and sample standard deviation.
    pub fn of(xs: &[f64]) -> Aggregate {
        let n = xs.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Aggregate { mean, std, n }
    }
}

pub const METRIC_COLUMNS: [&str; 5] = ["psnr", "ssim", "meas_loss", "dice", "feat_score"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsReport {
    /// Values of one column over the rows that have it.
    pub fn column(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| match name {
                "psnr" => Some(r.psnr),
                "ssim" => Some(r.ssim),
                "meas_loss" => Some(r.meas_loss),
                "dice" => r.dice,
                "feat_score" => r.feat_score,
                _ => None,
            })
            .collect()
    }

    pub fn aggregates(&self) -> Vec<(&'static str, Aggregate)> {
        METRIC_COLUMNS.iter().map(|&c| (c, Aggregate::of(&self.column(c)))).collect()
    }

    /// Per-image CSV: `id,psnr,ssim,meas_loss,dice,feat_score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim,meas_loss,dice,feat_score\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.id, r.psnr, r.ssim, r.meas_loss, opt(r.dice), opt(r.feat_score));
        }
        s
    }

    /// Aggregate CSV: `metric,mean,std,n`.
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("metric,mean,std,n\n");
        for (name, a) in self.aggregates() {
            let _ = writeln!(s, "{name},{},{},{}", a.mean, a.std, a.n);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<MetricsReport> {
        let mut lines = text.lines();
        if lines.next() != Some("id,psnr,ssim,meas_loss,dice,feat_score") {
            return Err(Error::Format("metrics csv header".into()));
        }
        let num = |f: &str| f.parse::<f64>().map_err(|_| Error::Format(format!("metrics csv value {f:?}")));
        let optnum = |f: &str| if f.is_empty() { Ok(None) } else { num(f).map(Some) };
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(Error::Format(format!("metrics csv row {l:?}")));
                }
                Ok(MetricsRow {
                    id: f[0].to_string(),
                    psnr: num(f[1])?,
                    ssim: num(f[2])?,
                    meas_loss: num(f[3])?,
                    dice: optnum(f[4])?,
                    feat_score: optnum(f[5])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport { rows })
    }

    pub fn save(&self, per_image: impl AsRef<Path>, aggregate: impl AsRef<Path>) -> Result<()> {
        fs::write(per_image, self.to_csv())?;
        fs::write(aggregate, self.aggregate_csv())?;
        Ok(())
    }

    pub fn load(per_image: impl AsRef<Path>) -> Result<MetricsReport> {
        MetricsReport::from_csv(&fs::read_to_string(per_image)?)
    }
}
