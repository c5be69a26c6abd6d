//! Contrastive alignment and patch reconstruction losses.
//!
//! For an anchor `z_i` the contrastive denominator runs over every
//! embedding of both modalities except the anchor itself. Dropping the
//! self term from the log-sum-exp is the same as adding and then
//! subtracting it, without the cancellation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NceTerms {
    /// Inter- and intra-modal negatives.
    Full,
    /// Inter-modal negatives only (standard bidirectional InfoNCE).
    CrossOnly,
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit(t: &Tensor, name: &str) -> Result<()> {
    let d = *t.shape().last().unwrap();
    for (i, row) in t.data().chunks(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!("nce_loss: row {i} of {name} has norm {n}")));
        }
    }
    Ok(())
}

fn check_tau(tau: &Tensor, b: usize) -> Result<()> {
    if tau.shape() != [b, b] {
        return Err(Error::ShapeMismatch {
            op: "nce_loss(tau)",
            lhs: vec![b, b],
            rhs: tau.shape().to_vec(),
        });
    }
    if tau.data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("nce_loss: temperatures must be positive"));
    }
    Ok(())
}

/// One direction: anchors `a`, partners `p` (positive at the same row),
/// per-pair temperatures `tau`. Returns the summed per-anchor losses.
fn direction(tape: &mut Tape, a: Var, p: Var, tau: &Tensor, terms: NceTerms) -> Result<Var> {
    let b = tape.shape(a)[0];
    let inv = tape.constant(tau.map(|v| 1.0 / v));
    let at = tape.transpose(a)?;
    let pt = tape.transpose(p)?;
    let intra = tape.matmul(a, at)?;
    let intra = tape.mul(intra, inv)?;
    let cross = tape.matmul(a, pt)?;
    let cross = tape.mul(cross, inv)?;
    let logits = tape.concat(&[intra, cross], 1)?;
    let mut mask = vec![1.0; b * 2 * b];
    for i in 0..b {
        for k in 0..b {
            if terms == NceTerms::CrossOnly || k == i {
                mask[i * 2 * b + k] = 0.0;
            }
        }
    }
    let lse = tape.logsumexp_last(logits, Some(&Tensor::from_parts(vec![b, 2 * b], mask)))?;
    let eye = tape.constant(Tensor::eye(b));
    let diag = tape.mul(cross, eye)?;
    let pos = tape.sum_last(diag)?;
    let per = tape.sub(lse, pos)?;
    tape.sum(per)
}

/// `(1 / 2B) sum_i [l(u_i, w_i) + l(w_i, u_i)]`.
///
/// `tau_u[i][k]` is the temperature between target patch `i` and auxiliary
/// patch `k`; `tau_w` is the same for auxiliary anchors (normally the
/// transpose). Rows of `u` and `w` must be unit vectors.
pub fn nce_loss(tape: &mut Tape, u: Var, w: Var, tau_u: &Tensor, tau_w: &Tensor, terms: NceTerms) -> Result<Var> {
    let (su, sw) = (tape.shape(u).to_vec(), tape.shape(w).to_vec());
    if su.len() != 2 || su != sw {
        return Err(Error::ShapeMismatch {
            op: "nce_loss",
            lhs: su,
            rhs: sw,
        });
    }
    let b = su[0];
    check_unit(tape.value(u), "u")?;
    check_unit(tape.value(w), "w")?;
    check_tau(tau_u, b)?;
    check_tau(tau_w, b)?;
    let lu = direction(tape, u, w, tau_u, terms)?;
    let lw = direction(tape, w, u, tau_w, terms)?;
    let total = tape.add(lu, lw)?;
    tape.scale(total, 1.0 / (2 * b) as f64)
}

/// Mean absolute error of decoded patches, averaged over both modalities.
pub fn rec_loss(tape: &mut Tape, rec_tar: Var, p_tar: Var, rec_aux: Var, p_aux: Var) -> Result<Var> {
    let dt = tape.sub(rec_tar, p_tar)?;
    let dt = tape.abs(dt)?;
    let lt = tape.mean(dt)?;
    let da = tape.sub(rec_aux, p_aux)?;
    let da = tape.abs(da)?;
    let la = tape.mean(da)?;
    let s = tape.add(lt, la)?;
    tape.scale(s, 0.5)
}

/// Literal double-loop evaluation of the contrastive loss, for checking.
pub fn nce_reference(u: &[Vec<f64>], w: &[Vec<f64>], tau_u: &[Vec<f64>], tau_w: &[Vec<f64>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b = u.len();
    let ell = |z: &[f64], pos: &[f64], i: usize, tau: &[Vec<f64>], mine: &[Vec<f64>], theirs: &[Vec<f64>]| {
        let mut den = 0.0;
        for k in 0..b {
            den += (dot(z, &theirs[k]) / tau[i][k]).exp();
            if k != i {
                den += (dot(z, &mine[k]) / tau[i][k]).exp();
            }
        }
        -((dot(z, pos) / tau[i][i]).exp() / den).ln()
    };
    let mut total = 0.0;
    for i in 0..b {
        total += ell(&u[i], &w[i], i, tau_u, u, w);
        total += ell(&w[i], &u[i], i, tau_w, w, u);
    }
    total / (2 * b) as f64
}

/// Standard bidirectional InfoNCE at one temperature, for checking.
pub fn info_nce_reference(u: &[Vec<f64>], w: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let b = u.len();
    let mut total = 0.0;
    for i in 0..b {
        let den_u: f64 = (0..b).map(|k| (dot(&u[i], &w[k]) / tau).exp()).sum();
        let den_w: f64 = (0..b).map(|k| (dot(&w[i], &u[k]) / tau).exp()).sum();
        let pos = (dot(&u[i], &w[i]) / tau).exp();
        total += -(pos / den_u).ln() - (pos / den_w).ln();
    }
    total / (2 * b) as f64
}
