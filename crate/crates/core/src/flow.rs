//! Rectified-flow prior.
//!
//! Noise `z ~ N(0, I)` and data `x1` are coupled by the straight line
//! `x_t = (1 - t) z + t x1`, whose velocity is `x1 - z`. A network learns that
//! velocity by regression; sampling integrates it from `t = 0` to `t = 1`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Image, Modality};
use crate::nn::{Adam, Bound, Conv, Dense, ParamSet};
use crate::tensor::Tensor;

/// A time-dependent vector field evaluated on a tape.
pub trait VelocityField: Send + Sync {
    /// `x` is a batch `[N, ...]`; `t[i]` is the time of sample `i`.
    fn velocity(&self, tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var>;

    /// Value-only evaluation at one shared time.
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let n = x.shape()[0];
        let v = self.velocity(&mut tape, xv, &vec![t; n])?;
        Ok(tape.value(v).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Three-level conv encoder/decoder with skip connections.
    UNet { width: usize },
    /// Fully connected net on the flattened state, two hidden layers.
    Mlp { hidden: usize },
}

#[derive(Clone, Debug)]
enum Layers {
    UNet([Conv; 8]),
    Mlp([Dense; 3]),
}

/// Learned velocity `v_theta(x_t, t)` on `[N, 1, H, W]` states.
#[derive(Clone, Debug)]
pub struct VelocityModel {
    pub arch: Architecture,
    pub height: usize,
    pub width: usize,
    pub params: ParamSet,
    layers: Layers,
}

const ARCH_KEY: &str = "arch";

impl VelocityModel {
    pub fn new(arch: Architecture, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers = match arch {
            Architecture::UNet { width: w } => {
                if height % 8 != 0 || width % 8 != 0 || w == 0 || w > 64 {
                    return Err(Error::invalid(format!(
                        "unet needs sides divisible by 8 and width in 1..=64, got {height}x{width}, width {w}"
                    )));
                }
                let p = &mut params;
                Layers::UNet([
                    Conv::new(p, "enc1", 2, w, 3, 1, &mut rng),
                    Conv::new(p, "enc2", w, 2 * w, 3, 2, &mut rng),
                    Conv::new(p, "enc3", 2 * w, 2 * w, 3, 2, &mut rng),
                    Conv::new(p, "mid", 2 * w, 2 * w, 3, 2, &mut rng),
                    Conv::new(p, "dec3", 4 * w, 2 * w, 3, 1, &mut rng),
                    Conv::new(p, "dec2", 4 * w, 2 * w, 3, 1, &mut rng),
                    Conv::new(p, "dec1", 3 * w, w, 3, 1, &mut rng),
                    Conv::new(p, "out", w, 1, 3, 1, &mut rng),
                ])
            }
            Architecture::Mlp { hidden } => {
                let d = height * width;
                if hidden == 0 {
                    return Err(Error::invalid("mlp hidden width must be positive"));
                }
                let p = &mut params;
                Layers::Mlp([
                    Dense::new(p, "fc1", d + 1, hidden, 1.0, &mut rng),
                    Dense::new(p, "fc2", hidden, hidden, 1.0, &mut rng),
                    Dense::new(p, "fc3", hidden, d, 1.0, &mut rng),
                ])
            }
        };
        Ok(VelocityModel {
            arch,
            height,
            width,
            params,
            layers,
        })
    }

    /// Forward pass with parameters already recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, t: &[f64]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n = shape[0];
        if t.len() != n || shape.iter().skip(1).product::<usize>() != self.height * self.width {
            return Err(Error::ShapeMismatch {
                op: "velocity model",
                lhs: vec![n, 1, self.height, self.width],
                rhs: shape,
            });
        }
        match &self.layers {
            Layers::UNet(c) => {
                let (h, w) = (self.height, self.width);
                let x = tape.reshape(x, &[n, 1, h, w])?;
                let tc = tape.constant(time_channel(t, h * w, &[n, 1, h, w]));
                let inp = tape.concat(&[x, tc], 1)?;
                let h1 = c[0].forward(tape, p, inp)?;
                let h1 = tape.silu(h1)?;
                let h2 = c[1].forward(tape, p, h1)?;
                let h2 = tape.silu(h2)?;
                let h3 = c[2].forward(tape, p, h2)?;
                let h3 = tape.silu(h3)?;
                let h4 = c[3].forward(tape, p, h3)?;
                let h4 = tape.silu(h4)?;
                let u3 = tape.upsample_nearest(h4, 2)?;
                let u3 = tape.concat(&[u3, h3], 1)?;
                let d3 = c[4].forward(tape, p, u3)?;
                let d3 = tape.silu(d3)?;
                let u2 = tape.upsample_nearest(d3, 2)?;
                let u2 = tape.concat(&[u2, h2], 1)?;
                let d2 = c[5].forward(tape, p, u2)?;
                let d2 = tape.silu(d2)?;
                let u1 = tape.upsample_nearest(d2, 2)?;
                let u1 = tape.concat(&[u1, h1], 1)?;
                let d1 = c[6].forward(tape, p, u1)?;
                let d1 = tape.silu(d1)?;
                let out = c[7].forward(tape, p, d1)?;
                tape.reshape(out, &shape)
            }
            Layers::Mlp(f) => {
                let d = self.height * self.width;
                let x = tape.reshape(x, &[n, d])?;
                let tc = tape.constant(time_channel(t, 1, &[n, 1]));
                let inp = tape.concat(&[x, tc], 1)?;
                let h = f[0].forward(tape, p, inp)?;
                let h = tape.silu(h)?;
                let h = f[1].forward(tape, p, h)?;
                let h = tape.silu(h)?;
                let out = f[2].forward(tape, p, h)?;
                tape.reshape(out, &shape)
            }
        }
    }

    fn arch_tensor(&self) -> Tensor {
        let (kind, size) = match self.arch {
            Architecture::UNet { width } => (0.0, width),
            Architecture::Mlp { hidden } => (1.0, hidden),
        };
        Tensor::from_vec(vec![kind, size as f64, self.height as f64, self.width as f64])
    }

    /// Weights plus an `arch` record `[kind, size, H, W]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let arch = self.arch_tensor();
        let entries = std::iter::once((ARCH_KEY, &arch)).chain(self.params.iter());
        crate::checkpoint::write_file(path, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut all = ParamSet::load(path)?;
        let arch = all
            .iter()
            .find(|(n, _)| *n == ARCH_KEY)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::Format("velocity checkpoint lacks an arch record".into()))?;
        if arch.len() != 4 {
            return Err(Error::Format("malformed arch record".into()));
        }
        let size = arch[1] as usize;
        let kind = match arch[0] as u32 {
            0 => Architecture::UNet { width: size },
            1 => Architecture::Mlp { hidden: size },
            k => return Err(Error::Format(format!("unknown velocity architecture {k}"))),
        };
        let mut model = VelocityModel::new(kind, arch[2] as usize, arch[3] as usize, 0)?;
        all = all.without(ARCH_KEY);
        model.params.assign_from(&all)?;
        Ok(model)
    }
}

fn time_channel(t: &[f64], per_sample: usize, shape: &[usize]) -> Tensor {
    let data = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, per_sample)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl VelocityField for VelocityModel {
    fn velocity(&self, tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.forward(tape, &p, x, t)
    }
}

/// The straight-line field of one fixed coupling: `v = x1 - z` everywhere.
#[derive(Clone, Debug)]
pub struct StraightLine {
    pub z: Tensor,
    pub x1: Tensor,
}

impl VelocityField for StraightLine {
    fn velocity(&self, tape: &mut Tape, x: Var, _t: &[f64]) -> Result<Var> {
        let d = self.x1.axpy(-1.0, &self.z)?;
        let n = tape.shape(x)[0];
        let data: Vec<f64> = (0..n).flat_map(|_| d.data().iter().copied()).collect();
        let v = tape.constant(Tensor::new(tape.shape(x).to_vec(), data)?);
        // Keep the state on the graph so callers can differentiate through it.
        let zero = tape.scale(x, 0.0)?;
        tape.add(v, zero)
    }
}

/// The exact conditional field of a one-point data distribution,
/// `v(x, t) = (x1 - x) / (1 - t)`.
#[derive(Clone, Debug)]
pub struct PointMass {
    pub x1: Tensor,
}

impl VelocityField for PointMass {
    fn velocity(&self, tape: &mut Tape, x: Var, t: &[f64]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let per: usize = shape[1..].iter().product();
        if self.x1.numel() != per {
            return Err(Error::ShapeMismatch {
                op: "point mass",
                lhs: self.x1.shape().to_vec(),
                rhs: shape,
            });
        }
        let target: Vec<f64> = t.iter().flat_map(|_| self.x1.data().iter().copied()).collect();
        let scale: Vec<f64> = t
            .iter()
            .flat_map(|&ti| std::iter::repeat_n(1.0 / (1.0 - ti).max(1e-12), per))
            .collect();
        let target = tape.constant(Tensor::from_parts(shape.clone(), target));
        let scale = tape.constant(Tensor::from_parts(shape, scale));
        let diff = tape.sub(target, x)?;
        tape.mul(diff, scale)
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("time {t} outside [0, 1]")))
    }
}

/// `x_t = (1 - t) z + t x1`.
pub fn interpolate(z: &Image, x1: &Image, t: f64) -> Result<Image> {
    check_t(t)?;
    if z.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: vec![z.height(), z.width()],
            rhs: vec![x1.height(), x1.width()],
        });
    }
    let data = z.data().iter().zip(x1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Image::new(z.height(), z.width(), data, x1.modality)
}

/// Flow-matching loss for given noise and times:
/// `mean_i || v(x_t_i, t_i) - (x1_i - z_i) ||^2`.
pub fn fm_loss_with(
    field: &dyn Fn(&mut Tape, Var, &[f64]) -> Result<Var>,
    tape: &mut Tape,
    x1: &Tensor,
    z: &Tensor,
    t: &[f64],
) -> Result<Var> {
    let n = x1.shape()[0];
    if n == 0 || t.len() != n || x1.shape() != z.shape() {
        return Err(Error::invalid("fm_loss: batch, noise and times must agree and be nonempty"));
    }
    let per = x1.numel() / n;
    let mut xt = vec![0.0; x1.numel()];
    let mut target = vec![0.0; x1.numel()];
    for i in 0..n {
        for j in i * per..(i + 1) * per {
            xt[j] = (1.0 - t[i]) * z.data()[j] + t[i] * x1.data()[j];
            target[j] = x1.data()[j] - z.data()[j];
        }
    }
    let xt = tape.constant(Tensor::from_parts(x1.shape().to_vec(), xt));
    let target = tape.constant(Tensor::from_parts(x1.shape().to_vec(), target));
    let v = field(tape, xt, t)?;
    let r = tape.sub(v, target)?;
    let sq = tape.square(r)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Draws `t ~ U[0, 1)` and `z ~ N(0, I)` per sample.
pub fn draw_coupling<R: Rng>(shape: &[usize], rng: &mut R) -> (Tensor, Vec<f64>) {
    let z = Tensor::randn(shape, 1.0, rng);
    let t = (0..shape[0]).map(|_| rng.random::<f64>()).collect();
    (z, t)
}

/// Flow-matching loss of `model` on `x1: [N, 1, H, W]`, parameters bound
/// trainable on `tape`.
pub fn fm_loss<R: Rng>(model: &VelocityModel, tape: &mut Tape, p: &Bound, x1: &Tensor, rng: &mut R) -> Result<Var> {
    let (z, t) = draw_coupling(x1.shape(), rng);
    fm_loss_with(&|tape, x, t| model.forward(tape, p, x, t), tape, x1, &z, &t)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// CSV with columns `iter,loss`.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("train config needs iterations >= 1, batch_size >= 1, learning_rate > 0"));
        }
        Ok(())
    }
}

/// Stacks images into one `[N, 1, H, W]` tensor.
pub fn stack(images: &[&Image]) -> Tensor {
    let (h, w) = images[0].shape();
    let data = images.iter().flat_map(|im| im.data().iter().copied()).collect();
    Tensor::from_parts(vec![images.len(), 1, h, w], data)
}

/// Trains `model` in place by Adam on the flow-matching loss and returns the
/// per-iteration losses.
pub fn train_prior(model: &mut VelocityModel, dataset: &[Image], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("train_prior: empty dataset"));
    }
    if dataset.iter().any(|im| im.shape() != (model.height, model.width)) {
        return Err(Error::invalid("train_prior: image size differs from the model canvas"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut log = match &cfg.log_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "iter,loss")?;
            Some(w)
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch: Vec<&Image> = (0..cfg.batch_size)
            .map(|_| &dataset[rng.random_range(0..dataset.len())])
            .collect();
        let x1 = stack(&batch);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let step = fm_loss(model, &mut tape, &p, &x1, &mut rng)
            .and_then(|loss| Ok((tape.value(loss).item(), tape.gradient(loss, p.vars())?)));
        let (loss, grads) = step.map_err(|e| diverged(iter, e))?;
        adam.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: "non-finite parameters after update".into(),
            });
        }
        if let Some(w) = log.as_mut() {
            writeln!(w, "{iter},{loss}")?;
        }
        losses.push(loss);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        model.save(p)?;
    }
    Ok(losses)
}

pub(crate) fn diverged(iteration: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::Diverged {
            iteration,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

/// Moving average with window `w` (shorter at the start).
pub fn smoothed(xs: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// `x_hat = x_t + (1 - t) v` on the tape. Returns `(v, x_hat)`.
pub fn predict_clean_var(tape: &mut Tape, field: &dyn VelocityField, x: Var, t: f64) -> Result<(Var, Var)> {
    check_t(t)?;
    let n = tape.shape(x)[0];
    let v = field.velocity(tape, x, &vec![t; n])?;
    if t == 1.0 {
        return Ok((v, x));
    }
    let step = tape.scale(v, 1.0 - t)?;
    let xhat = tape.add(x, step)?;
    Ok((v, xhat))
}

/// One-step clean-image estimate `x_t + (1 - t) v(x_t, t)`; `t = 1` returns `x_t`.
pub fn predict_clean(field: &dyn VelocityField, x_t: &Image, t: f64) -> Result<Image> {
    check_t(t)?;
    if t == 1.0 {
        return Ok(x_t.clone());
    }
    let v = field.eval(&x_t.to_tensor(), t)?;
    let data = x_t.data().iter().zip(v.data()).map(|(x, v)| x + (1.0 - t) * v).collect();
    Image::new(x_t.height(), x_t.width(), data, Modality::Target)
}

/// In-place Euler update `x += dt * v`.
pub fn euler_step(x: &mut Tensor, v: &Tensor, dt: f64) {
    for (x, v) in x.data_mut().iter_mut().zip(v.data()) {
        *x += dt * v;
    }
}

/// Integrates `dx/dt = v(x, t)` on the grid `t_k = k / T` from `x_0 = z`.
pub fn euler_sample(field: &dyn VelocityField, z: &Image, steps: usize) -> Result<Image> {
    if steps == 0 {
        return Err(Error::invalid("euler_sample: steps must be >= 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = z.to_tensor();
    for k in 0..steps {
        let v = field.eval(&x, k as f64 / steps as f64)?;
        euler_step(&mut x, &v, dt);
    }
    Image::from_tensor(&x, z.height(), z.width(), Modality::Target)
}

/// Standard normal image, deterministic in `seed`.
pub fn noise_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::randn(&[height * width], 1.0, &mut rng);
    Image::new(height, width, t.into_data(), Modality::Other).expect("finite noise")
}
