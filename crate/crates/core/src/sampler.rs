//! Guided Euler sampling with data-consistency and cross-modal feature
//! guidance, and multi-seed noise selection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{LinearMap, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{euler_step, noise_image, predict_clean_var, VelocityField};
use crate::image::{Image, Modality};
use crate::operators::{ForwardOperator, Measurement};
use crate::pamri::EncoderPair;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    Constant,
    /// `alpha0 / (|grad| + 1e-8)`.
    GradNorm,
}

/// Components that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoPamri,
    NoNoiseOpt,
    NoDc,
}

#[derive(Clone, Debug)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub alpha0: f64,
    pub alpha_mode: AlphaMode,
    pub lambda_p: f64,
    pub seeds: usize,
    pub t_noise_frac: f64,
    pub seed: u64,
    /// Weight of the data-consistency term (1 normally, 0 to ablate it).
    pub dc_weight: f64,
    /// Treat the clean-image estimate as `x_t` plus a constant when
    /// differentiating, instead of backpropagating through the prior.
    pub stop_grad_through_prior: bool,
    /// Use guided rather than plain prior velocity during the warm start.
    pub guided_warm_start: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            steps: 100,
            alpha0: 1.0,
            alpha_mode: AlphaMode::GradNorm,
            lambda_p: 0.1,
            seeds: 8,
            t_noise_frac: 0.2,
            seed: 0,
            dc_weight: 1.0,
            stop_grad_through_prior: false,
            guided_warm_start: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.seeds == 0 {
            return Err(Error::invalid("guidance needs steps >= 1 and seeds >= 1"));
        }
        if !(0.0..=1.0).contains(&self.t_noise_frac) {
            return Err(Error::invalid("guidance needs t_noise_frac in [0, 1]"));
        }
        if !(self.lambda_p >= 0.0) || !(self.alpha0 >= 0.0) || !(self.dc_weight >= 0.0) {
            return Err(Error::invalid("guidance needs lambda_p, alpha0 and dc_weight >= 0"));
        }
        Ok(())
    }

    pub fn ablate(&self, a: Ablation) -> GuidanceConfig {
        let mut c = self.clone();
        match a {
            Ablation::NoPamri => c.lambda_p = 0.0,
            Ablation::NoNoiseOpt => {
                c.seeds = 1;
                c.t_noise_frac = 0.0;
            }
            Ablation::NoDc => c.dc_weight = 0.0,
        }
        c
    }

    /// Number of warm-start steps before seed selection.
    pub fn warm_steps(&self) -> usize {
        ((self.t_noise_frac * self.steps as f64).floor() as usize).min(self.steps)
    }
}

/// What the guidance terms compare against.
#[derive(Clone)]
pub struct GuidanceContext {
    operator: Arc<ForwardOperator>,
    y: Measurement,
    y_tensor: Tensor,
    aux: Option<Image>,
    encoders: Option<EncoderPair>,
    aux_embedding: Option<Tensor>,
}

impl GuidanceContext {
    /// Data consistency only.
    pub fn new(operator: ForwardOperator, y: Measurement) -> Result<Self> {
        let (p, r, c) = operator.measurement_shape();
        if (y.planes, y.height, y.width) != (p, r, c) {
            return Err(Error::ShapeMismatch {
                op: "guidance context",
                lhs: vec![p, r, c],
                rhs: vec![y.planes, y.height, y.width],
            });
        }
        let y_tensor = Tensor::from_parts(vec![1, p, r, c], y.data.clone());
        Ok(GuidanceContext {
            operator: Arc::new(operator),
            y,
            y_tensor,
            aux: None,
            encoders: None,
            aux_embedding: None,
        })
    }

    /// Adds the auxiliary image and the encoders that compare against it.
    pub fn with_aux(mut self, aux: Image, encoders: EncoderPair) -> Result<Self> {
        if aux.shape() != self.operator.input_shape() {
            return Err(Error::invalid("auxiliary image must share the target canvas"));
        }
        let emb = encoders.psi.embed_values(&tiles(&aux.to_tensor(), encoders.shape().patch)?)?;
        self.aux_embedding = Some(emb);
        self.aux = Some(aux);
        self.encoders = Some(encoders);
        Ok(self)
    }

    pub fn operator(&self) -> &ForwardOperator {
        &self.operator
    }

    pub fn measurement(&self) -> &Measurement {
        &self.y
    }

    pub fn aux(&self) -> Option<&Image> {
        self.aux.as_ref()
    }

    pub fn encoders(&self) -> Option<&EncoderPair> {
        self.encoders.as_ref()
    }

    pub fn canvas(&self) -> (usize, usize) {
        self.operator.input_shape()
    }
}

/// Non-overlapping `p x p` tiles of a `[1, 1, H, W]` tensor as `[n, 1, p, p]`,
/// row-major over the grid.
pub fn tiles(x: &Tensor, p: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let t = tile_var(&mut tape, v, p)?;
    Ok(tape.value(t).clone())
}

/// Tiling on the tape.
pub fn tile_var(tape: &mut Tape, x: Var, p: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::invalid(format!("cannot tile a {s:?} image into {p}x{p} patches")));
    }
    if s[2] == p && s[3] == p {
        return Ok(x);
    }
    let mut parts = Vec::with_capacity(s[2] / p * s[3] / p);
    for r in (0..s[2]).step_by(p) {
        let band = tape.slice(x, 2, r, r + p)?;
        for c in (0..s[3]).step_by(p) {
            parts.push(tape.slice(band, 3, c, c + p)?);
        }
    }
    tape.concat(&parts, 0)
}

/// `|F(x) - y|^2` on the tape, `x: [1, 1, H, W]`.
pub fn dc_loss_var(tape: &mut Tape, ctx: &GuidanceContext, x: Var) -> Result<Var> {
    let op: Arc<dyn LinearMap> = ctx.operator.clone();
    let fx = tape.linear_map(x, op)?;
    let y = tape.constant(ctx.y_tensor.clone());
    let r = tape.sub(fx, y)?;
    let r2 = tape.square(r)?;
    tape.sum(r2)
}

/// Mean over tiles of `|phi(tile(x)) - psi(tile(aux))|^2` on the tape.
pub fn pamri_loss_var(tape: &mut Tape, enc: &EncoderPair, aux_embedding: &Tensor, x: Var) -> Result<Var> {
    let t = tile_var(tape, x, enc.shape().patch)?;
    let p = enc.phi.params.bind(tape, false);
    let u = enc.phi.embed(tape, &p, t)?;
    let w = tape.constant(aux_embedding.clone());
    let d = tape.sub(u, w)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2)?;
    tape.scale(s, 1.0 / aux_embedding.shape()[0] as f64)
}

/// Squared measurement residual of an image.
pub fn dc_loss(op: &ForwardOperator, x: &Image, y: &Measurement) -> Result<f64> {
    let fx = op.apply(x)?;
    if fx.data.len() != y.data.len() {
        return Err(Error::ShapeMismatch {
            op: "dc_loss",
            lhs: vec![fx.planes, fx.height, fx.width],
            rhs: vec![y.planes, y.height, y.width],
        });
    }
    Ok(fx.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Feature distance between `x` and `aux` over the encoder-sized tile grid.
pub fn pamri_loss(enc: &EncoderPair, x: &Image, aux: &Image) -> Result<f64> {
    if x.shape() != aux.shape() {
        return Err(Error::invalid("pamri_loss: images differ in size"));
    }
    let p = enc.shape().patch;
    let w = enc.psi.embed_values(&tiles(&aux.to_tensor(), p)?)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_tensor());
    let l = pamri_loss_var(&mut tape, enc, &w, xv)?;
    Ok(tape.value(l).item())
}

/// The two guidance terms at one image.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Objective {
    pub dc: f64,
    pub pamri: f64,
    pub total: f64,
}

fn pamri_active(ctx: &GuidanceContext, cfg: &GuidanceConfig) -> Result<bool> {
    if cfg.lambda_p > 0.0 && ctx.encoders.is_none() {
        return Err(Error::invalid("lambda_p > 0 needs encoders and an auxiliary image"));
    }
    Ok(cfg.lambda_p > 0.0)
}

/// Builds `dc_weight * dc + lambda_p * pamri` on the tape.
fn objective_var(tape: &mut Tape, ctx: &GuidanceContext, cfg: &GuidanceConfig, x: Var) -> Result<(Var, Objective)> {
    let dc = dc_loss_var(tape, ctx, x)?;
    let mut obj = Objective {
        dc: tape.value(dc).item(),
        ..Objective::default()
    };
    let mut total = tape.scale(dc, cfg.dc_weight)?;
    if pamri_active(ctx, cfg)? {
        let (enc, w) = (ctx.encoders.as_ref().unwrap(), ctx.aux_embedding.as_ref().unwrap());
        let pl = pamri_loss_var(tape, enc, w, x)?;
        obj.pamri = tape.value(pl).item();
        let weighted = tape.scale(pl, cfg.lambda_p)?;
        total = tape.add(total, weighted)?;
    }
    obj.total = tape.value(total).item();
    Ok((total, obj))
}

/// `Phi(x) = |F(x) - y|^2 + lambda_p L_P(x, aux)` (the data term scaled by
/// `dc_weight`).
pub fn composite_objective(x: &Image, ctx: &GuidanceContext, cfg: &GuidanceConfig) -> Result<Objective> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_tensor());
    Ok(objective_var(&mut tape, ctx, cfg, xv)?.1)
}

/// One guided velocity evaluation with what went into it.
#[derive(Clone, Debug)]
pub struct GuidedVelocity {
    pub velocity: Tensor,
    pub objective: Objective,
    pub grad_norm: f64,
    pub alpha: f64,
}

/// `v(x_t, t) - alpha_t grad_x [dc(x_hat) + lambda_p pamri(x_hat)]` with
/// `x_hat = x_t + (1 - t) v(x_t, t)`. With `alpha0 = 0` the prior velocity
/// is returned untouched.
pub fn guided_velocity(
    field: &dyn VelocityField,
    x_t: &Tensor,
    t: f64,
    ctx: &GuidanceContext,
    cfg: &GuidanceConfig,
) -> Result<GuidedVelocity> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::invalid(format!("guided_velocity: t = {t} outside [0, 1)")));
    }
    if cfg.alpha0 == 0.0 {
        let v = field.eval(x_t, t)?;
        let xhat = x_t.axpy(1.0 - t, &v)?;
        let mut tape = Tape::new();
        let xv = tape.constant(xhat);
        let objective = objective_var(&mut tape, ctx, cfg, xv)?.1;
        return Ok(GuidedVelocity {
            velocity: v,
            objective,
            grad_norm: 0.0,
            alpha: 0.0,
        });
    }
    let mut tape = Tape::new();
    let (v, wrt, xhat) = if cfg.stop_grad_through_prior {
        let v = field.eval(x_t, t)?;
        let xh = tape.leaf(x_t.axpy(1.0 - t, &v)?, true);
        (v, xh, xh)
    } else {
        let x = tape.leaf(x_t.clone(), true);
        let (v, xhat) = predict_clean_var(&mut tape, field, x, t)?;
        (tape.value(v).clone(), x, xhat)
    };
    let (total, objective) = objective_var(&mut tape, ctx, cfg, xhat)?;
    let grad = tape.gradient(total, &[wrt])?.remove(0);
    if !grad.is_finite() || !objective.total.is_finite() {
        return Err(Error::Diverged {
            iteration: (t * cfg.steps as f64).round() as usize,
            detail: format!("non-finite guidance gradient at t = {t}"),
        });
    }
    let grad_norm = grad.norm();
    let alpha = match cfg.alpha_mode {
        AlphaMode::Constant => cfg.alpha0,
        AlphaMode::GradNorm => cfg.alpha0 / (grad_norm + 1e-8),
    };
    let velocity = v.axpy(-alpha, &grad)?;
    Ok(GuidedVelocity {
        velocity,
        objective,
        grad_norm,
        alpha,
    })
}

/// One row of the per-step diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub dc_loss: f64,
    pub pamri_loss: f64,
    pub grad_norm: f64,
}

pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[StepDiagnostics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,dc_loss,pamri_loss,grad_norm")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.t, r.dc_loss, r.pamri_loss, r.grad_norm)?;
    }
    w.flush()?;
    Ok(())
}

/// Starting noise of candidate `s`.
pub fn candidate_noise(height: usize, width: usize, seed: u64, s: usize) -> Image {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(s as u64)
        .rotate_left(17);
    noise_image(height, width, mixed)
}

/// Integrates steps `from..to` of the `T`-step grid in place.
fn integrate(
    field: &dyn VelocityField,
    x: &mut Tensor,
    from: usize,
    to: usize,
    guided: bool,
    ctx: &GuidanceContext,
    cfg: &GuidanceConfig,
    diag: &mut Vec<StepDiagnostics>,
) -> Result<()> {
    let dt = 1.0 / cfg.steps as f64;
    for k in from..to {
        let t = k as f64 / cfg.steps as f64;
        let g = if guided {
            guided_velocity(field, x, t, ctx, cfg)?
        } else {
            guided_velocity(field, x, t, ctx, &GuidanceConfig { alpha0: 0.0, ..cfg.clone() })?
        };
        euler_step(x, &g.velocity, dt);
        diag.push(StepDiagnostics {
            t,
            dc_loss: g.objective.dc,
            pamri_loss: g.objective.pamri,
            grad_norm: g.grad_norm,
        });
    }
    Ok(())
}

/// One warm-started candidate trajectory.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub index: usize,
    pub state: Tensor,
    pub objective: Objective,
    pub diagnostics: Vec<StepDiagnostics>,
}

fn run_candidate(field: &dyn VelocityField, ctx: &GuidanceContext, cfg: &GuidanceConfig, s: usize) -> Result<Candidate> {
    let (h, w) = ctx.canvas();
    let mut x = candidate_noise(h, w, cfg.seed, s).to_tensor();
    let warm = cfg.warm_steps();
    let mut diagnostics = Vec::with_capacity(cfg.steps);
    integrate(field, &mut x, 0, warm, cfg.guided_warm_start, ctx, cfg, &mut diagnostics)?;
    let t = warm as f64 / cfg.steps as f64;
    let xhat = if warm == cfg.steps {
        x.clone()
    } else {
        x.axpy(1.0 - t, &field.eval(&x, t)?)?
    };
    let mut tape = Tape::new();
    let xv = tape.constant(xhat);
    let objective = objective_var(&mut tape, ctx, cfg, xv)?.1;
    Ok(Candidate {
        index: s,
        state: x,
        objective,
        diagnostics,
    })
}

/// Warm-starts `S` seeds and keeps the one whose clean estimate has the
/// lowest composite objective (ties go to the lower index). Also returns
/// every candidate's objective.
pub fn noise_select(field: &dyn VelocityField, ctx: &GuidanceContext, cfg: &GuidanceConfig) -> Result<(Candidate, Vec<f64>)> {
    cfg.validate()?;
    pamri_active(ctx, cfg)?;
    #[cfg(feature = "parallel")]
    let candidates: Vec<Result<Candidate>> = {
        use rayon::prelude::*;
        (0..cfg.seeds)
            .into_par_iter()
            .map(|s| run_candidate(field, ctx, cfg, s))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let candidates: Vec<Result<Candidate>> = (0..cfg.seeds).map(|s| run_candidate(field, ctx, cfg, s)).collect();
    let candidates = candidates.into_iter().collect::<Result<Vec<_>>>()?;
    let phis: Vec<f64> = candidates.iter().map(|c| c.objective.total).collect();
    let best = (1..phis.len()).fold(0, |b, s| if phis[s] < phis[b] { s } else { b });
    let winner = candidates.into_iter().nth(best).unwrap();
    Ok((winner, phis))
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub image: Image,
    pub seed_index: usize,
    pub candidate_objectives: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Noise selection followed by guided integration of the winner to `t = 1`.
pub fn reconstruct(field: &dyn VelocityField, ctx: &GuidanceContext, cfg: &GuidanceConfig) -> Result<Reconstruction> {
    let (winner, phis) = noise_select(field, ctx, cfg)?;
    let Candidate {
        index,
        mut state,
        mut diagnostics,
        ..
    } = winner;
    integrate(field, &mut state, cfg.warm_steps(), cfg.steps, true, ctx, cfg, &mut diagnostics)?;
    let (h, w) = ctx.canvas();
    Ok(Reconstruction {
        image: Image::from_tensor(&state, h, w, Modality::Target)?,
        seed_index: index,
        candidate_objectives: phis,
        diagnostics,
    })
}
