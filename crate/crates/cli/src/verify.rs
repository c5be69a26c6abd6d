//! Self-checks against closed forms: operator adjoints, the FFT, exact
//! transport along straight lines, the Gaussian velocity and posterior.

use std::f64::consts::PI;

use anyhow::Result;
use mpflow::flow::{euler_sample, predict_clean, StraightLine};
use mpflow::image::{Image, Modality};
use mpflow::operators::{dft2, make_mask, ForwardOperator, Measurement};
use mpflow::oracle::{
    analytic_posterior, analytic_velocity, importance_posterior_mean, mc_velocity_estimate, AnalyticVelocity,
    GaussianPrior, LinearProblem,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Report {
    all_pass: bool,
}

impl Report {
    fn check(&mut self, name: &str, value: f64, limit: f64) {
        let pass = value < limit;
        self.all_pass &= pass;
        println!("{} {name}: {value:.3e} (limit {limit:.1e})", if pass { "PASS" } else { "FAIL" });
    }
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::new(h, w, data, Modality::Target).expect("shape matches")
}

fn adjoint_gap(op: &ForwardOperator, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = op.input_shape();
    let x = random_image(h, w, rng);
    let ax = op.apply(&x)?;
    let y = Measurement {
        data: (0..ax.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ..ax.clone()
    };
    let aty = op.adjoint(&y)?;
    let lhs = ax.dot(&y);
    let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
    Ok((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300))
}

fn naive_dft_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (8, 8);
    let re: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (fr, fi) = dft2(&re, &im, h, w)?;
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut worst = 0.0f64;
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (s, c) = ang.sin_cos();
                    let (a, b) = (re[y * w + x], im[y * w + x]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            let k = u * w + v;
            worst = worst.max((fr[k] - sr * norm).abs()).max((fi[k] - si * norm).abs());
        }
    }
    Ok(worst)
}

fn transport_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (z, x1) = (random_image(8, 8, rng), random_image(8, 8, rng));
    let field = StraightLine {
        z: z.to_tensor(),
        x1: x1.to_tensor(),
    };
    let mut worst = 0.0f64;
    for steps in [1, 10, 100] {
        let out = euler_sample(&field, &z, steps)?;
        worst = worst.max(out.data().iter().zip(x1.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

fn correlated_prior() -> Result<GaussianPrior> {
    Ok(GaussianPrior::new(vec![0.5, -0.3], vec![1.0, 0.4, 0.4, 0.6])?)
}

fn velocity_z(prior: &GaussianPrior, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..5 {
        let t = rng.random_range(0.1..0.9);
        let x1 = prior.sample(rng);
        let xt: Vec<f64> = x1
            .iter()
            .map(|v| (1.0 - t) * rng.sample::<f64, _>(StandardNormal) + t * v)
            .collect();
        let exact = analytic_velocity(prior, &xt, t)?;
        let mc = mc_velocity_estimate(prior, &xt, t, 1_000_000, 0.04, seed.wrapping_add(k))?;
        if mc.low_ess {
            return Ok(f64::INFINITY);
        }
        for j in 0..exact.len() {
            worst = worst.max((exact[j] - mc.mean[j]).abs() / mc.std_err[j]);
        }
    }
    Ok(worst)
}

fn clean_estimate_gap(prior: &GaussianPrior, rng: &mut ChaCha8Rng) -> Result<f64> {
    let field = AnalyticVelocity { prior: prior.clone() };
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let t = rng.random_range(0.05..0.95);
        let xt = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let img = Image::new(1, 2, xt.to_vec(), Modality::Target)?;
        let est = predict_clean(&field, &img, t)?;
        let exact = prior.conditional_mean(&xt, t)?;
        worst = worst.max(est.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

fn posterior_z(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let mut cov = vec![0.1; 64];
    (0..8).for_each(|i| cov[i * 9] = 1.0);
    let prior = GaussianPrior::new(vec![0.2; 8], cov)?;
    let a: Vec<f64> = (0..32).map(|_| rng.random_range(-0.5..0.5)).collect();
    let x = prior.sample(rng);
    let y: Vec<f64> = (0..4)
        .map(|i| (0..8).map(|j| a[i * 8 + j] * x[j]).sum::<f64>() + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let problem = LinearProblem::new(4, 8, a, 0.5, y)?;
    let (mean, _) = analytic_posterior(&prior, &problem)?;
    let mc = importance_posterior_mean(&prior, &problem, 200_000, seed)?;
    if mc.low_ess {
        return Ok(f64::INFINITY);
    }
    Ok((0..8).map(|j| (mean[j] - mc.mean[j]).abs() / mc.std_err[j]).fold(0.0, f64::max))
}

/// Runs every check, printing one PASS/FAIL line each.
pub fn run(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Report { all_pass: true };
    let ops = [
        ("downsample x4", ForwardOperator::downsample(32, 32, 4)?),
        ("gaussian blur", ForwardOperator::gaussian_blur(32, 32, 1.5, 4)?),
        ("k-space x4", ForwardOperator::kspace(make_mask(32, 32, 4.0, 0.08, seed)?)?),
    ];
    for (name, op) in &ops {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            worst = worst.max(adjoint_gap(op, &mut rng)?);
        }
        r.check(&format!("adjoint identity, {name}"), worst, 1e-10);
    }
    r.check("fft against direct summation", naive_dft_gap(&mut rng)?, 1e-10);
    r.check("straight-line transport at T = 1, 10, 100", transport_gap(&mut rng)?, 1e-12);
    let prior = correlated_prior()?;
    r.check(
        "gaussian velocity against Monte Carlo (max |z|)",
        velocity_z(&prior, &mut rng, seed)?,
        4.0,
    );
    r.check("clean estimate against conditional mean", clean_estimate_gap(&prior, &mut rng)?, 1e-8);
    r.check(
        "gaussian posterior against importance sampling (max |z|)",
        posterior_z(&mut rng, seed)?,
        4.0,
    );
    Ok(r.all_pass)
}
