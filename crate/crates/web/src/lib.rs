//! WebAssembly bindings for the browser demo: render a phantom pair,
//! degrade it, and compare guided sampling with its closed-form posterior.
//!
//! Images cross the boundary as row-major `Float64Array`s of `size * size`.

use mpflow::image::{Image, Modality};
use mpflow::operators::{add_noise, make_mask, ForwardOperator};
use mpflow::oracle::{analytic_posterior, AnalyticVelocity, GaussianPrior, LinearProblem};
use mpflow::phantoms::sample_dataset;
use mpflow::sampler::{reconstruct, AlphaMode, GuidanceConfig, GuidanceContext};
use mpflow::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Target, auxiliary and lesion mask of one phantom, concatenated.
pub fn phantom_planes(seed: u32, size: usize, lesion: bool) -> Result<Vec<f64>> {
    let pair = sample_dataset(1, size, size, if lesion { 1.0 } else { 0.0 }, seed.into())?.remove(0);
    Ok([pair.target.data(), pair.aux.data(), pair.lesion_mask.data()].concat())
}

fn operator(kind: &str, size: usize, level: f64, seed: u32) -> Result<ForwardOperator> {
    match kind {
        "sr" => ForwardOperator::downsample(size, size, level as usize),
        "blur" => ForwardOperator::gaussian_blur(size, size, level, (3.0 * level).ceil() as usize),
        "kspace" => ForwardOperator::kspace(make_mask(size, size, level, 0.08, seed.into())?),
        other => Err(mpflow::Error::InvalidArgument(format!("unknown degradation {other:?}"))),
    }
}

fn image(data: &[f64], size: usize) -> Result<Image> {
    Image::new(size, size, data.to_vec(), Modality::Target)
}

/// Baseline reconstruction of a noisy measurement of `target`.
pub fn degraded(target: &[f64], size: usize, kind: &str, level: f64, sigma: f64, seed: u32) -> Result<Vec<f64>> {
    let op = operator(kind, size, level, seed)?;
    let y = add_noise(&op.apply(&image(target, size)?)?, sigma, seed.into())?;
    Ok(op.baseline(&y)?.into_data())
}

/// Side of the Gaussian posterior demo.
pub const ORACLE_SIDE: usize = 8;

/// Image-like Gaussian on 8x8 canvases: a diagonal ramp mean and
/// exponentially correlated pixels.
pub fn oracle_prior() -> Result<GaussianPrior> {
    let n = ORACLE_SIDE;
    let d = n * n;
    let mean = (0..d).map(|i| 0.2 + 0.6 * (i / n + i % n) as f64 / (2 * n - 2) as f64).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let (dy, dx) = ((i / n) as f64 - (j / n) as f64, (i % n) as f64 - (j % n) as f64);
            cov[i * d + j] = 0.04 * (-dy.hypot(dx) / 1.5).exp();
        }
    }
    GaussianPrior::new(mean, cov)
}

/// 2x2 block averaging as a dense 16 x 64 operator, with its row-major matrix.
fn block_average() -> Result<(ForwardOperator, Vec<f64>)> {
    let n = ORACLE_SIDE;
    let m = (n / 2) * (n / 2);
    let mut a = vec![0.0; m * n * n];
    for p in 0..n * n {
        let row = (p / n / 2) * (n / 2) + (p % n) / 2;
        a[row * n * n + p] = 0.25;
    }
    Ok((ForwardOperator::matrix(n, n, Tensor::new(vec![m, n * n], a.clone())?)?, a))
}

/// Guided sampling against its closed form. Draws a truth from the
/// prior, measures 2x2 block averages with noise `sigma`, and returns five
/// 8x8 planes: truth, measurement baseline, closed-form posterior mean,
/// mean of `samples` guided endpoints and mean of as many unguided ones.
pub fn posterior(seed: u32, sigma: f64, alpha0: f64, steps: usize, samples: usize) -> Result<Vec<f64>> {
    let prior = oracle_prior()?;
    let (op, a) = block_average()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let truth = Image::new(ORACLE_SIDE, ORACLE_SIDE, prior.sample(&mut rng), Modality::Target)?;
    let y = add_noise(&op.apply(&truth)?, sigma, u64::from(seed) + 1)?;
    let problem = LinearProblem::new(y.data.len(), ORACLE_SIDE * ORACLE_SIDE, a, sigma.max(1e-3), y.data.clone())?;
    let (post, _) = analytic_posterior(&prior, &problem)?;
    let field = AnalyticVelocity { prior };
    let ctx = GuidanceContext::new(op.clone(), y.clone())?;
    let cfg = GuidanceConfig {
        steps,
        alpha0,
        alpha_mode: AlphaMode::Constant,
        lambda_p: 0.0,
        seeds: 1,
        t_noise_frac: 0.0,
        ..GuidanceConfig::default()
    };
    let mean_of = |cfg: &GuidanceConfig| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; ORACLE_SIDE * ORACLE_SIDE];
        for s in 0..samples {
            let c = GuidanceConfig { seed: s as u64, ..cfg.clone() };
            let x = reconstruct(&field, &ctx, &c)?.image;
            acc.iter_mut().zip(x.data()).for_each(|(a, v)| *a += v / samples as f64);
        }
        Ok(acc)
    };
    let guided = mean_of(&cfg)?;
    let plain = mean_of(&GuidanceConfig { alpha0: 0.0, ..cfg })?;
    Ok([truth.data(), op.baseline(&y)?.data(), &post, &guided, &plain].concat())
}

fn js(e: mpflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn render_phantom(seed: u32, size: usize, lesion: bool) -> std::result::Result<Vec<f64>, JsError> {
    phantom_planes(seed, size, lesion).map_err(js)
}

#[wasm_bindgen]
pub fn degrade(target: &[f64], size: usize, kind: &str, level: f64, sigma: f64, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    degraded(target, size, kind, level, sigma, seed).map_err(js)
}

#[wasm_bindgen]
pub fn posterior_demo(seed: u32, sigma: f64, alpha0: f64, steps: usize, samples: usize) -> std::result::Result<Vec<f64>, JsError> {
    posterior(seed, sigma, alpha0, steps, samples).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(v: &[f64], size: usize, k: usize) -> &[f64] {
        &v[k * size * size..(k + 1) * size * size]
    }

    #[test]
    fn phantom_planes_are_stacked() {
        let v = phantom_planes(3, 32, true).unwrap();
        assert_eq!(v.len(), 3 * 32 * 32);
        assert!(plane(&v, 32, 2).iter().any(|&m| m == 1.0));
        assert_eq!(v, phantom_planes(3, 32, true).unwrap());
    }

    #[test]
    fn noiseless_blocks_survive_downsampling() {
        let flat = vec![0.4; 32 * 32];
        let out = degraded(&flat, 32, "sr", 4.0, 0.0, 0).unwrap();
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(degraded(&flat, 32, "warp", 1.0, 0.0, 0).is_err());
        for (kind, level) in [("blur", 1.5), ("kspace", 4.0)] {
            assert_eq!(degraded(&flat, 32, kind, level, 0.01, 1).unwrap().len(), 32 * 32);
        }
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
    }

    #[test]
    fn guided_mean_approaches_the_posterior_mean() {
        let d = ORACLE_SIDE * ORACLE_SIDE;
        for seed in 0..3 {
            let v = posterior(seed, 0.05, 10.0, 50, 32).unwrap();
            assert_eq!(v.len(), 5 * d);
            let (post, guided, plain) = (&v[2 * d..3 * d], &v[3 * d..4 * d], &v[4 * d..]);
            assert!(dist(guided, post) < dist(plain, post), "seed {seed}");
            assert!(dist(guided, post) < 0.1, "seed {seed}: {}", dist(guided, post));
        }
    }
}
