//! Closed-form references: the exact rectified-flow velocity of a Gaussian
//! prior, the conjugate posterior of a linear-Gaussian problem, and Monte
//! Carlo estimators that check both.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::tensor::Tensor;

pub const MAX_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    factor: DMatrix<f64>,
}

impl GaussianPrior {
    /// `cov` is row-major `d x d`, symmetric within 1e-12 and positive definite.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || d > MAX_DIM || cov.len() != d * d {
            return Err(Error::invalid(format!("gaussian prior: dimension {d} outside 1..={MAX_DIM} or bad covariance size")));
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(Error::invalid("gaussian prior: covariance not symmetric"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("gaussian prior: covariance not positive definite"))?;
        Ok(GaussianPrior {
            mean: DVector::from_vec(mean),
            factor: chol.l(),
            cov,
        })
    }

    pub fn isotropic(d: usize) -> Result<Self> {
        GaussianPrior::new(vec![0.0; d], DMatrix::<f64>::identity(d, d).as_slice().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        (&self.mean + &self.factor * e).as_slice().to_vec()
    }

    /// `v(x_t, t) = b + B x_t`, returned as `(B, b)`.
    ///
    /// With `M = (1-t)^2 I + t^2 S`, `E[x1 | x_t] = m + t S M^-1 (x_t - t m)` and
    /// `E[z | x_t] = (1-t) M^-1 (x_t - t m)`; the velocity is their difference.
    pub fn velocity_affine(&self, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::invalid(format!("analytic velocity needs t in [0, 1), got {t}")));
        }
        let d = self.dim();
        let eye = DMatrix::<f64>::identity(d, d);
        let m = &eye * (1.0 - t).powi(2) + &self.cov * (t * t);
        let k = &self.cov * t - &eye * (1.0 - t);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid(format!("marginal covariance singular at t = {t}")))?;
        // K and M are both polynomials in S, so K M^-1 = M^-1 K.
        let b = chol.solve(&k);
        let offset = &self.mean - &b * &self.mean * t;
        Ok((b, offset))
    }

    /// `E[x1 | x_t]` in closed form.
    pub fn conditional_mean(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_len(x_t)?;
        let d = self.dim();
        let eye = DMatrix::<f64>::identity(d, d);
        let m = &eye * (1.0 - t).powi(2) + &self.cov * (t * t);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::invalid(format!("marginal covariance singular at t = {t}")))?;
        let r = DVector::from_column_slice(x_t) - &self.mean * t;
        let out = &self.mean + &self.cov * chol.solve(&r) * t;
        Ok(out.as_slice().to_vec())
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.dim() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "gaussian prior",
                lhs: vec![self.dim()],
                rhs: vec![x.len()],
            })
        }
    }
}

/// `E[x1 - z | x_t]` under `x_t = (1 - t) z + t x1`, `z ~ N(0, I)`, `x1 ~ prior`.
pub fn analytic_velocity(prior: &GaussianPrior, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    prior.check_len(x_t)?;
    let (b, off) = prior.velocity_affine(t)?;
    Ok((off + b * DVector::from_column_slice(x_t)).as_slice().to_vec())
}

/// The analytic velocity as a field on `[N, ...]` batches whose samples
/// flatten to the prior's dimension.
#[derive(Clone, Debug)]
pub struct AnalyticVelocity {
    pub prior: GaussianPrior,
}

impl AnalyticVelocity {
    fn affine_on(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let d = self.prior.dim();
        let n = tape.shape(x)[0];
        let (b, off) = self.prior.velocity_affine(t)?;
        // Rows of x times B^T; nalgebra stores column-major, so B's buffer is B^T row-major.
        let bt = tape.constant(Tensor::new(vec![d, d], b.as_slice().to_vec())?);
        let off = tape.constant(Tensor::from_vec(off.as_slice().to_vec()));
        let flat = tape.reshape(x, &[n, d])?;
        let y = tape.matmul(flat, bt)?;
        tape.add_bias(y, off)
    }
}

impl VelocityField for AnalyticVelocity {
    fn velocity(&self, tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n = shape[0];
        let d = self.prior.dim();
        if shape[1..].iter().product::<usize>() != d || t.len() != n {
            return Err(Error::ShapeMismatch {
                op: "analytic velocity",
                lhs: vec![n, d],
                rhs: shape,
            });
        }
        let v = if t.iter().all(|&ti| ti == t[0]) {
            self.affine_on(tape, x, t[0])?
        } else {
            let flat = tape.reshape(x, &[n, d])?;
            let mut rows = Vec::with_capacity(n);
            for (i, &ti) in t.iter().enumerate() {
                let xi = tape.slice(flat, 0, i, i + 1)?;
                rows.push(self.affine_on(tape, xi, ti)?);
            }
            tape.concat(&rows, 0)?
        };
        tape.reshape(v, &shape)
    }
}

/// `y = A x + N(0, sigma^2 I)` with `A: m x d` row-major.
#[derive(Clone, Debug)]
pub struct LinearProblem {
    pub a: DMatrix<f64>,
    pub sigma: f64,
    pub y: DVector<f64>,
}

impl LinearProblem {
    pub fn new(rows: usize, cols: usize, a: Vec<f64>, sigma: f64, y: Vec<f64>) -> Result<Self> {
        if a.len() != rows * cols || y.len() != rows || rows > cols || !(sigma >= 0.0) {
            return Err(Error::invalid("linear problem: need m <= d, A of size m*d, y of size m, sigma >= 0"));
        }
        Ok(LinearProblem {
            a: DMatrix::from_row_slice(rows, cols, &a),
            sigma,
            y: DVector::from_vec(y),
        })
    }

    /// Row-major copy of `A`.
    pub fn a_row_major(&self) -> Vec<f64> {
        self.a.transpose().as_slice().to_vec()
    }
}

/// Conjugate update. For `sigma = 0` the prior is conditioned on the affine
/// subspace `A x = y`, which must be consistent.
pub fn analytic_posterior(prior: &GaussianPrior, problem: &LinearProblem) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (a, y) = (&problem.a, &problem.y);
    if a.ncols() != prior.dim() {
        return Err(Error::ShapeMismatch {
            op: "analytic posterior",
            lhs: vec![a.nrows(), a.ncols()],
            rhs: vec![prior.dim()],
        });
    }
    let s = &prior.cov;
    if problem.sigma > 0.0 {
        let s2 = problem.sigma * problem.sigma;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("prior covariance not invertible"))?;
        let precision = &s_inv + a.transpose() * a / s2;
        let cov = precision
            .try_inverse()
            .ok_or_else(|| Error::invalid("posterior precision not invertible"))?;
        let mean = &cov * (&s_inv * &prior.mean + a.transpose() * y / s2);
        return Ok((mean.as_slice().to_vec(), cov));
    }
    let g = a * s * a.transpose();
    let g_pinv = g
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))?;
    let gain = s * a.transpose() * g_pinv;
    let mean = &prior.mean + &gain * (y - a * &prior.mean);
    let resid = (a * &mean - y).norm();
    if resid > 1e-8 * (1.0 + y.norm()) {
        return Err(Error::invalid(format!(
            "noiseless problem is inconsistent (residual {resid:.3e})"
        )));
    }
    let cov = s - &gain * a * s;
    Ok((mean.as_slice().to_vec(), cov))
}

/// Monte Carlo estimate with bootstrap standard errors.
#[derive(Clone, Debug)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Kish effective sample size of the weights.
    pub ess: f64,
    /// Set when `ess < 100`.
    pub low_ess: bool,
}

const BOOTSTRAP_REPS: usize = 200;
const CHUNK: usize = 8192;

/// Self-normalized weighted mean of `values` (row-major, `dim` per row) with
/// Poisson-bootstrap standard errors. Rows below `1e-18` of the largest
/// weight are dropped up front; together they cannot move any replicate by
/// more than rounding.
fn weighted_mean(weights: &[f64], values: &[f64], dim: usize, seed: u64) -> Result<McEstimate> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("monte carlo: every weight underflowed; widen the bandwidth"));
    }
    let floor = weights.iter().cloned().fold(0.0, f64::max) * 1e-18;
    let keep: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > floor).collect();
    let estimate = |counts: Option<&[f64]>| {
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for (k, &i) in keep.iter().enumerate() {
            let w = weights[i] * counts.map_or(1.0, |c| c[k]);
            den += w;
            for j in 0..dim {
                num[j] += w * values[i * dim + j];
            }
        }
        (num, den)
    };
    let (num, den) = estimate(None);
    let mean: Vec<f64> = num.iter().map(|v| v / den).collect();
    let sq: f64 = keep.iter().map(|&i| weights[i] * weights[i]).sum();
    let ess = total * total / sq;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007);
    let poisson = Poisson::new(1.0).expect("valid rate");
    let mut acc = vec![0.0; dim];
    let mut acc2 = vec![0.0; dim];
    let mut reps = 0usize;
    for _ in 0..BOOTSTRAP_REPS {
        let counts: Vec<f64> = keep.iter().map(|_| poisson.sample(&mut rng)).collect();
        let (n, d) = estimate(Some(&counts));
        if d <= 0.0 {
            continue;
        }
        reps += 1;
        for j in 0..dim {
            let m = n[j] / d;
            acc[j] += m;
            acc2[j] += m * m;
        }
    }
    let r = reps.max(2) as f64;
    let std_err = (0..dim)
        .map(|j| ((acc2[j] - acc[j] * acc[j] / r) / (r - 1.0)).max(0.0).sqrt())
        .collect();
    Ok(McEstimate {
        mean,
        std_err,
        ess,
        low_ess: ess < 100.0,
    })
}

/// Runs `f` over `n` draws split in fixed-size chunks, each with its own
/// stream, so the result is independent of how chunks are scheduled.
fn chunked<T: Send>(n: usize, seed: u64, f: impl Fn(usize, &mut ChaCha8Rng) -> T + Sync) -> Vec<T> {
    let chunks = n.div_ceil(CHUNK);
    let run = |c: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64 + 1);
        f(CHUNK.min(n - c * CHUNK), &mut rng)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..chunks).map(run).collect()
    }
}

/// Nadaraya-Watson estimate of `E[x1 - z | x_t]` from `n_samples` coupled
/// draws with a Gaussian kernel of width `bandwidth` in `x_t` space.
pub fn mc_velocity_estimate(
    prior: &GaussianPrior,
    x_t: &[f64],
    t: f64,
    n_samples: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<McEstimate> {
    prior.check_len(x_t)?;
    if n_samples < 10_000 || !(bandwidth > 0.0) || !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid("mc_velocity_estimate: need n_samples >= 1e4, bandwidth > 0, t in [0, 1]"));
    }
    let d = prior.dim();
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let parts = chunked(n_samples, seed, |len, rng| {
        let mut w = Vec::with_capacity(len);
        let mut v = Vec::with_capacity(len * d);
        for _ in 0..len {
            let x1 = prior.sample(rng);
            let mut dist2 = 0.0;
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                let xt = (1.0 - t) * z + t * x1[j];
                dist2 += (xt - x_t[j]).powi(2);
                v.push(x1[j] - z);
            }
            w.push((-dist2 * inv2h2).exp());
        }
        (w, v)
    });
    let (mut w, mut v) = (Vec::with_capacity(n_samples), Vec::with_capacity(n_samples * d));
    for (pw, pv) in parts {
        w.extend(pw);
        v.extend(pv);
    }
    weighted_mean(&w, &v, d, seed)
}

/// Self-normalized importance-sampling estimate of the posterior mean with
/// the prior as proposal. Needs `sigma > 0`.
pub fn importance_posterior_mean(prior: &GaussianPrior, problem: &LinearProblem, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if !(problem.sigma > 0.0) {
        return Err(Error::invalid("importance sampling needs sigma > 0"));
    }
    let d = prior.dim();
    let s2 = problem.sigma * problem.sigma;
    let parts = chunked(n_samples, seed, |len, rng| {
        let mut logw = Vec::with_capacity(len);
        let mut xs = Vec::with_capacity(len * d);
        for _ in 0..len {
            let x = prior.sample(rng);
            let r = &problem.a * DVector::from_column_slice(&x) - &problem.y;
            logw.push(-r.norm_squared() / (2.0 * s2));
            xs.extend(x);
        }
        (logw, xs)
    });
    let (mut logw, mut xs) = (Vec::new(), Vec::new());
    for (l, x) in parts {
        logw.extend(l);
        xs.extend(x);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    weighted_mean(&w, &xs, d, seed)
}
