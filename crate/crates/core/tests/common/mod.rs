//! Shared checks for the integration and acceptance suites: the gradient
//! catalog (every differentiable op and loss against fourth-order central
//! differences), operator adjoint tests and a brute-force DFT.

#![allow(dead_code)]

use std::sync::Arc;

use mpflow::autodiff::{LinearMap, Tape, Var};
use mpflow::flow::{fm_loss_with, Architecture, VelocityModel};
use mpflow::gradcheck::{check_gradient, GradCheck};
use mpflow::image::{Image, Modality};
use mpflow::operators::{make_mask, ForwardOperator, Measurement};
use mpflow::pamri::{nce_loss, rec_loss, EncoderPair, NceTerms, NetShape};
use mpflow::sampler::{dc_loss_var, pamri_loss_var, tiles, GuidanceContext};
use mpflow::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;

pub struct Case {
    pub name: &'static str,
    /// One random trial; returns the max per-coordinate relative error.
    pub trial: fn(&mut ChaCha8Rng) -> Result<f64>,
}

/// Worst relative error over `trials` seeded trials.
pub fn worst(case: &Case, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        worst = worst.max((case.trial)(&mut rng)?);
    }
    Ok(worst)
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values with magnitude in `[0.1, 1]` and random sign, clear of kinks at 0.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(w * y)` for a fixed random `w`, so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Checks `x -> sum(w * op(x))` at `x` with a random `w` matching the output.
fn check(x: &Tensor, rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let shape = {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = op(&mut tape, v)?;
        tape.shape(y).to_vec()
    };
    let w = randn(&shape, rng);
    let g = check_gradient(
        |tape, v| {
            let y = op(tape, v)?;
            probe(tape, y, &w)
        },
        x,
        EPS,
    )?;
    Ok(g.max_rel_error())
}

/// Checks a scalar-valued function directly.
fn check_scalar(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    Ok(check_gradient(f, x, EPS)?.max_rel_error())
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let s = dims(rng, 2, 1, 4);
    let (x, other) = (randn(&s, rng), randn(&s, rng));
    let left = rng.random_bool(0.5);
    check(&x, rng, move |t, v| {
        let c = t.constant(other.clone());
        if left { op(t, v, c) } else { op(t, c, v) }
    })
}

fn image_op(rng: &mut ChaCha8Rng) -> ForwardOperator {
    match rng.random_range(0..5) {
        0 => ForwardOperator::downsample(16, 16, 2),
        1 => ForwardOperator::downsample(16, 16, 4),
        2 => ForwardOperator::downsample(16, 16, 8),
        3 => ForwardOperator::gaussian_blur(16, 16, rng.random_range(0.5..2.0), 3),
        _ => ForwardOperator::kspace(make_mask(16, 16, 4.0, 0.125, rng.random()).unwrap()),
    }
    .unwrap()
}

fn fm_trial(rng: &mut ChaCha8Rng, arch: Architecture, side: usize) -> Result<f64> {
    Ok(fm_check(rng, arch, side)?.max_rel_error())
}

/// Flow-matching loss gradient with respect to one random parameter tensor.
pub fn fm_check(rng: &mut ChaCha8Rng, arch: Architecture, side: usize) -> Result<GradCheck> {
    let model = VelocityModel::new(arch, side, side, rng.random())?;
    let which = rng.random_range(0..model.params.len());
    let n = 2;
    let shape = [n, 1, side, side];
    let x1 = Tensor::uniform(&shape, 0.0, 1.0, rng);
    let z = randn(&shape, rng);
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let theta = model.params.iter().nth(which).unwrap().1.clone();
    check_gradient(
        |tape, v| {
            let mut p = model.params.bind(tape, false);
            p.replace(which, v);
            fm_loss_with(&|tape, x, t| model.forward(tape, &p, x, t), tape, &x1, &z, &t)
        },
        &theta,
        EPS,
    )
}

fn unit_rows(t: &mut Tape, v: Var) -> Result<Var> {
    t.l2_normalize(v)
}

pub fn catalog() -> Vec<Case> {
    vec![
        Case { name: "add", trial: |r| binary(r, Tape::add) },
        Case { name: "sub", trial: |r| binary(r, Tape::sub) },
        Case { name: "mul", trial: |r| binary(r, Tape::mul) },
        Case {
            name: "scale",
            trial: |r| {
                let (x, k) = (randn(&dims(r, 2, 1, 5), r), r.random_range(-2.0..2.0));
                check(&x, r, move |t, v| t.scale(v, k))
            },
        },
        Case {
            name: "add_scalar",
            trial: |r| {
                let (x, k) = (randn(&dims(r, 2, 1, 5), r), r.random_range(-2.0..2.0));
                check(&x, r, move |t, v| t.add_scalar(v, k))
            },
        },
        Case { name: "relu", trial: |r| { let x = off_zero(&dims(r, 2, 1, 5), r); check(&x, r, Tape::relu) } },
        Case {
            name: "leaky_relu",
            trial: |r| {
                let x = off_zero(&dims(r, 2, 1, 5), r);
                check(&x, r, |t, v| t.leaky_relu(v, 0.2))
            },
        },
        Case { name: "silu", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::silu) } },
        Case { name: "tanh", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::tanh) } },
        Case { name: "square", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::square) } },
        Case {
            name: "sqrt",
            trial: |r| {
                let x = Tensor::uniform(&dims(r, 2, 1, 5), 0.5, 2.0, r);
                check(&x, r, Tape::sqrt)
            },
        },
        Case { name: "abs", trial: |r| { let x = off_zero(&dims(r, 2, 1, 5), r); check(&x, r, Tape::abs) } },
        Case { name: "exp", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::exp) } },
        Case {
            name: "log",
            trial: |r| {
                let x = Tensor::uniform(&dims(r, 2, 1, 5), 0.5, 2.0, r);
                check(&x, r, Tape::log)
            },
        },
        Case { name: "sum", trial: |r| { let x = randn(&dims(r, 3, 1, 4), r); check(&x, r, Tape::sum) } },
        Case { name: "mean", trial: |r| { let x = randn(&dims(r, 3, 1, 4), r); check(&x, r, Tape::mean) } },
        Case { name: "sum_last", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::sum_last) } },
        Case {
            name: "logsumexp_last",
            trial: |r| {
                let s = dims(r, 2, 1, 6);
                let x = randn(&s, r);
                let masked = r.random_bool(0.5);
                let mut m = Tensor::full(&s, 1.0);
                if masked {
                    for row in m.data_mut().chunks_mut(s[1]) {
                        let keep = r.random_range(0..row.len());
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = if j == keep || r.random_bool(0.5) { 1.0 } else { 0.0 };
                        }
                    }
                }
                check(&x, r, move |t, v| t.logsumexp_last(v, masked.then_some(&m)))
            },
        },
        Case {
            name: "matmul",
            trial: |r| {
                let d = dims(r, 3, 1, 5);
                let left = r.random_bool(0.5);
                let (x, other) = if left {
                    (randn(&[d[0], d[1]], r), randn(&[d[1], d[2]], r))
                } else {
                    (randn(&[d[1], d[2]], r), randn(&[d[0], d[1]], r))
                };
                check(&x, r, move |t, v| {
                    let c = t.constant(other.clone());
                    if left { t.matmul(v, c) } else { t.matmul(c, v) }
                })
            },
        },
        Case { name: "transpose", trial: |r| { let x = randn(&dims(r, 2, 1, 5), r); check(&x, r, Tape::transpose) } },
        Case {
            name: "conv2d",
            trial: |r| {
                let (n, ci, co) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let k = [1, 3][r.random_range(0..2)];
                let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=k / 2));
                let side = r.random_range(k..=6);
                let x = randn(&[n, ci, side, side], r);
                let w = randn(&[co, ci, k, k], r);
                let b = randn(&[co], r);
                match r.random_range(0..3) {
                    0 => check(&x, r, move |t, v| {
                        let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
                        t.conv2d(v, wv, Some(bv), stride, pad)
                    }),
                    1 => check(&w, r, move |t, v| {
                        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                        t.conv2d(xv, v, Some(bv), stride, pad)
                    }),
                    _ => check(&b, r, move |t, v| {
                        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                        t.conv2d(xv, wv, Some(v), stride, pad)
                    }),
                }
            },
        },
        Case {
            name: "l2_normalize",
            trial: |r| {
                let x = randn(&dims(r, 2, 1, 5), r);
                check(&x, r, unit_rows)
            },
        },
        Case {
            name: "concat",
            trial: |r| {
                let mut s = dims(r, 3, 1, 4);
                let axis = r.random_range(0..3);
                let x = randn(&s, r);
                s[axis] = r.random_range(1..=3);
                let other = randn(&s, r);
                let first = r.random_bool(0.5);
                check(&x, r, move |t, v| {
                    let c = t.constant(other.clone());
                    if first { t.concat(&[v, c], axis) } else { t.concat(&[c, v, c], axis) }
                })
            },
        },
        Case {
            name: "slice",
            trial: |r| {
                let s = dims(r, 3, 2, 5);
                let axis = r.random_range(0..3);
                let start = r.random_range(0..s[axis]);
                let end = r.random_range(start + 1..=s[axis]);
                let x = randn(&s, r);
                check(&x, r, move |t, v| t.slice(v, axis, start, end))
            },
        },
        Case {
            name: "upsample_nearest",
            trial: |r| {
                let d = dims(r, 4, 1, 3);
                let f = r.random_range(1..=3);
                let x = randn(&d, r);
                check(&x, r, move |t, v| t.upsample_nearest(v, f))
            },
        },
        Case {
            name: "reshape",
            trial: |r| {
                let d = dims(r, 3, 1, 4);
                let x = randn(&d, r);
                check(&x, r, move |t, v| t.reshape(v, &[d[0] * d[1], d[2]]))
            },
        },
        Case {
            name: "add_bias",
            trial: |r| {
                let d = dims(r, 2, 1, 5);
                let (x, b) = (randn(&d, r), randn(&[d[1]], r));
                if r.random_bool(0.5) {
                    check(&x, r, move |t, v| {
                        let c = t.constant(b.clone());
                        t.add_bias(v, c)
                    })
                } else {
                    check(&b, r, move |t, v| {
                        let c = t.constant(x.clone());
                        t.add_bias(c, v)
                    })
                }
            },
        },
        Case {
            name: "global_avg_pool",
            trial: |r| {
                let x = randn(&dims(r, 4, 1, 4), r);
                check(&x, r, Tape::global_avg_pool)
            },
        },
        Case {
            name: "linear_map",
            trial: |r| {
                let op: Arc<dyn LinearMap> = Arc::new(image_op(r));
                let x = randn(&[r.random_range(1..=2), 1, 16, 16], r);
                check(&x, r, move |t, v| t.linear_map(v, op.clone()))
            },
        },
        Case { name: "fm_loss (mlp)", trial: |r| fm_trial(r, Architecture::Mlp { hidden: 6 }, 4) },
        Case {
            name: "nce_loss",
            trial: |r| {
                let (b, d) = (r.random_range(1..=5), r.random_range(2..=6));
                let other = randn(&[b, d], r);
                let x = randn(&[b, d], r);
                let tau_u = Tensor::uniform(&[b, b], 0.05, 0.5, r);
                let tau_w = Tensor::uniform(&[b, b], 0.05, 0.5, r);
                let terms = if r.random_bool(0.5) { NceTerms::Full } else { NceTerms::CrossOnly };
                let anchor = r.random_bool(0.5);
                check_scalar(&x, |t, v| {
                    let (u, o) = (t.l2_normalize(v)?, t.constant(other.clone()));
                    let w = t.l2_normalize(o)?;
                    if anchor {
                        nce_loss(t, u, w, &tau_u, &tau_w, terms)
                    } else {
                        nce_loss(t, w, u, &tau_u, &tau_w, terms)
                    }
                })
            },
        },
        Case {
            name: "rec_loss",
            trial: |r| {
                let s = [r.random_range(1..=3), 1, 4, 4];
                let p_tar = Tensor::uniform(&s, 0.0, 1.0, r);
                let p_aux = Tensor::uniform(&s, 0.0, 1.0, r);
                let rec_aux = Tensor::uniform(&s, 0.0, 1.0, r);
                let x = p_tar.axpy(1.0, &off_zero(&s, r))?;
                check_scalar(&x, |t, v| {
                    let (pt, pa, ra) = (t.constant(p_tar.clone()), t.constant(p_aux.clone()), t.constant(rec_aux.clone()));
                    rec_loss(t, v, pt, ra, pa)
                })
            },
        },
        Case {
            name: "dc_loss",
            trial: |r| {
                let op = image_op(r);
                let (p, h, w) = op.measurement_shape();
                let y = Measurement {
                    planes: p,
                    height: h,
                    width: w,
                    data: (0..p * h * w).map(|_| r.random_range(-1.0..1.0)).collect(),
                    noise_sigma: 0.0,
                };
                let ctx = GuidanceContext::new(op, y)?;
                let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, r);
                check_scalar(&x, |t, v| dc_loss_var(t, &ctx, v))
            },
        },
        Case {
            name: "pamri_loss",
            trial: |r| {
                let shape = NetShape {
                    patch: 8,
                    channels: 2,
                    embed_dim: 4,
                };
                let enc = EncoderPair::new(shape, r.random())?;
                let aux = Image::new(16, 16, (0..256).map(|_| r.random()).collect(), Modality::Aux)?;
                let emb = enc.psi.embed_values(&tiles(&aux.to_tensor(), 8)?)?;
                let x = Tensor::uniform(&[1, 1, 16, 16], 0.0, 1.0, r);
                check_scalar(&x, |t, v| pamri_loss_var(t, &enc, &emb, v))
            },
        },
    ]
}

/// Operator families of the adjoint suite, 32x32 canvases.
pub fn operator_families() -> Vec<(&'static str, fn(&mut ChaCha8Rng) -> ForwardOperator)> {
    vec![
        ("downsample x2", |_| ForwardOperator::downsample(32, 32, 2).unwrap()),
        ("downsample x4", |_| ForwardOperator::downsample(32, 32, 4).unwrap()),
        ("downsample x8", |_| ForwardOperator::downsample(32, 32, 8).unwrap()),
        ("blur", |r| ForwardOperator::gaussian_blur(32, 32, r.random_range(0.5..3.0), r.random_range(1..=6)).unwrap()),
        ("kspace", |r| {
            let acc = r.random_range(1.0..8.0);
            let cf = r.random_range(0.0..1.0 / acc);
            ForwardOperator::kspace(make_mask(32, 32, acc, cf, r.random()).unwrap()).unwrap()
        }),
    ]
}

/// `|<Ax, y> - <x, A^T y>| / max(|<Ax, y>|, |<x, A^T y>|)` for random `x`, `y`.
pub fn adjoint_gap(op: &ForwardOperator, rng: &mut ChaCha8Rng) -> f64 {
    let (h, w) = op.input_shape();
    let x = Image::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect(), Modality::Target).unwrap();
    let ax = op.apply(&x).unwrap();
    let y = Measurement {
        data: (0..ax.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ..ax.clone()
    };
    let aty = op.adjoint(&y).unwrap();
    let lhs = ax.dot(&y);
    let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

/// Unitary 2-D DFT by direct summation.
pub fn naive_dft(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    use std::f64::consts::PI;
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let (mut or, mut oi) = (vec![0.0; h * w], vec![0.0; h * w]);
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
            or[u * w + v] = sr * norm;
            oi[u * w + v] = si * norm;
        }
    }
    (or, oi)
}

/// A fixed 16-dimensional Gaussian with correlated coordinates.
pub fn toy_prior() -> mpflow::oracle::GaussianPrior {
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a05);
    let l: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum();
            cov[i * d + j] = 0.5 * dot / d as f64 + if i == j { 0.25 } else { 0.0 };
        }
    }
    let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    mpflow::oracle::GaussianPrior::new(mean, cov).unwrap()
}

/// Draws from `prior` as 4x4 images.
pub fn toy_images(prior: &mpflow::oracle::GaussianPrior, n: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Image::new(4, 4, prior.sample(&mut rng), Modality::Other).unwrap())
        .collect()
}

/// Mean squared error per coordinate between `field` and the closed-form
/// velocity on `x_t` drawn from the coupling at `t = 0.05, 0.15, ..., 0.95`.
pub fn velocity_mse(field: &dyn mpflow::flow::VelocityField, prior: &mpflow::oracle::GaussianPrior, per_t: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = prior.dim();
    let (mut acc, mut n) = (0.0, 0);
    for k in 0..10 {
        let t = 0.05 + 0.1 * k as f64;
        let mut xs = Vec::with_capacity(per_t * d);
        for _ in 0..per_t {
            let x1 = prior.sample(&mut rng);
            xs.extend(x1.iter().map(|v| (1.0 - t) * rng.sample::<f64, _>(rand_distr::StandardNormal) + t * v));
        }
        let v = field.eval(&Tensor::new(vec![per_t, 1, 4, 4], xs.clone()).unwrap(), t).unwrap();
        for i in 0..per_t {
            let exact = mpflow::oracle::analytic_velocity(prior, &xs[i * d..(i + 1) * d], t).unwrap();
            for j in 0..d {
                acc += (v.data()[i * d + j] - exact[j]).powi(2);
                n += 1;
            }
        }
    }
    acc / n as f64
}

/// MLP flow trained on [`toy_prior`] samples.
pub fn train_toy_flow(prior: &mpflow::oracle::GaussianPrior) -> Result<VelocityModel> {
    use mpflow::flow::{train_prior, TrainConfig};
    let data = toy_images(prior, 4096, 1);
    let mut model = VelocityModel::new(Architecture::Mlp { hidden: 128 }, 4, 4, 3)?;
    let cfg = TrainConfig {
        iterations: 10_000,
        batch_size: 64,
        learning_rate: 1e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    train_prior(&mut model, &data, &cfg)?;
    Ok(model)
}

/// Largest `|analytic - mc| / se` over `probes` random `(x_t, t)` probes of a
/// correlated 2-D prior.
pub fn mc_velocity_worst_z(probes: usize, seed: u64) -> Result<f64> {
    use mpflow::oracle::{analytic_velocity, mc_velocity_estimate, GaussianPrior};
    let prior = GaussianPrior::new(vec![0.5, -0.3], vec![1.0, 0.4, 0.4, 0.6])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..probes {
        let t = rng.random_range(0.1..0.9);
        let x1 = prior.sample(&mut rng);
        let xt: Vec<f64> = x1
            .iter()
            .map(|v| (1.0 - t) * rng.sample::<f64, _>(rand_distr::StandardNormal) + t * v)
            .collect();
        let exact = analytic_velocity(&prior, &xt, t)?;
        let mc = mc_velocity_estimate(&prior, &xt, t, 1_000_000, 0.04, seed + k as u64)?;
        assert!(!mc.low_ess, "probe {k}: ess {}", mc.ess);
        for j in 0..2 {
            worst = worst.max((exact[j] - mc.mean[j]).abs() / mc.std_err[j]);
        }
    }
    Ok(worst)
}

/// Image-like 4x4 Gaussian: a ramp mean in `[0.2, 0.8]`, pixel std 0.2 and
/// exponential spatial correlation with length 1.5 pixels.
pub fn image_prior() -> mpflow::oracle::GaussianPrior {
    let mean = (0..16).map(|i| 0.2 + 0.6 * ((i / 4 + i % 4) as f64 / 6.0)).collect();
    let mut cov = vec![0.0; 256];
    for i in 0..16 {
        for j in 0..16 {
            let (dy, dx) = ((i / 4) as f64 - (j / 4) as f64, (i % 4) as f64 - (j % 4) as f64);
            cov[i * 16 + j] = 0.04 * (-(dy.hypot(dx)) / 1.5).exp();
        }
    }
    mpflow::oracle::GaussianPrior::new(mean, cov).unwrap()
}

/// A noisy `m x 16` linear problem on a draw from `prior`, as an operator
/// context plus its closed-form twin.
pub fn toy_inverse_problem(
    prior: &mpflow::oracle::GaussianPrior,
    m: usize,
    sigma: f64,
    seed: u64,
) -> Result<(mpflow::sampler::GuidanceContext, mpflow::oracle::LinearProblem)> {
    use mpflow::sampler::GuidanceContext;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = prior.dim();
    let a: Vec<f64> = (0..m * d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) / (d as f64).sqrt()).collect();
    let x = prior.sample(&mut rng);
    let y: Vec<f64> = (0..m)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>() + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let op = ForwardOperator::matrix(4, 4, Tensor::new(vec![m, d], a.clone())?)?;
    let meas = Measurement {
        data: y.clone(),
        ..op.apply(&Image::filled(4, 4, 0.0, Modality::Other))?
    };
    let problem = mpflow::oracle::LinearProblem::new(m, d, a, sigma, y)?;
    Ok((GuidanceContext::new(op, meas)?, problem))
}

/// Mean of guided endpoints over `n` noise seeds.
pub fn endpoint_mean(
    field: &dyn mpflow::flow::VelocityField,
    ctx: &mpflow::sampler::GuidanceContext,
    cfg: &mpflow::sampler::GuidanceConfig,
    n: u64,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; 16];
    for s in 0..n {
        let r = mpflow::sampler::reconstruct(field, ctx, &mpflow::sampler::GuidanceConfig { seed: s, ..cfg.clone() })?;
        acc.iter_mut().zip(r.image.data()).for_each(|(a, v)| *a += v / n as f64);
    }
    Ok(acc)
}

pub fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
