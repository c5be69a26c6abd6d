//! Patch-level cross-modal pretraining.
//!
//! Twin encoders map co-located target and auxiliary patches into one
//! embedding space. Training minimizes a contrastive loss whose per-pair
//! temperature falls with the patches' mutual information, plus an L1
//! patch-reconstruction term through small decoders.

mod loss;
mod nets;
mod nmi;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use loss::{info_nce_reference, nce_loss, nce_reference, rec_loss, NceTerms};
pub use nets::{Decoder, DecoderPair, Encoder, EncoderPair, NetShape};
pub use nmi::{adaptive_tau, nmi, nmi_matrix, quantize, JointHistogram, Quantized};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::diverged;
use crate::image::Image;
use crate::nn::Adam;
use crate::phantoms::ImagePair;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SSLConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub lambda_rec: f64,
    pub nmi_bins: usize,
    /// Largest offset between the two crops of a positive pair, per axis.
    pub jitter: usize,
    pub flips: bool,
    pub scale_range: (f64, f64),
    pub terms: NceTerms,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub channels: usize,
    pub embed_dim: usize,
    /// Fraction of the dataset withheld for retrieval evaluation.
    pub holdout_fraction: f64,
    /// Retrieval accuracy is logged every this many iterations (and at the end).
    pub eval_every: usize,
    pub encoder_path: Option<PathBuf>,
    pub decoder_path: Option<PathBuf>,
    /// CSV with columns `iter,nce,rec,total,retrieval_acc`.
    pub log_path: Option<PathBuf>,
}

impl Default for SSLConfig {
    fn default() -> Self {
        SSLConfig {
            patch_size: 32,
            batch_size: 64,
            tau_min: 0.05,
            tau_max: 0.5,
            lambda_rec: 0.5,
            nmi_bins: 32,
            jitter: 4,
            flips: true,
            scale_range: (0.9, 1.1),
            terms: NceTerms::Full,
            iterations: 1000,
            learning_rate: 1e-3,
            seed: 0,
            channels: 16,
            embed_dim: 64,
            holdout_fraction: 0.1,
            eval_every: 50,
            encoder_path: None,
            decoder_path: None,
            log_path: None,
        }
    }
}

impl SSLConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(Error::invalid("ssl config needs 0 < tau_min <= tau_max"));
        }
        if !(self.lambda_rec >= 0.0) {
            return Err(Error::invalid("ssl config needs lambda_rec >= 0"));
        }
        if self.batch_size == 0 || self.nmi_bins < 2 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("ssl config needs batch_size >= 1, nmi_bins >= 2, learning_rate > 0"));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("ssl config needs 0 < scale_lo <= scale_hi"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("ssl config needs holdout_fraction in [0, 1)"));
        }
        Ok(())
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            patch: self.patch_size,
            channels: self.channels,
            embed_dim: self.embed_dim,
        }
    }

    /// The same sampling with every augmentation switched off.
    pub fn without_augmentation(&self) -> SSLConfig {
        SSLConfig {
            jitter: 0,
            flips: false,
            scale_range: (1.0, 1.0),
            ..self.clone()
        }
    }
}

/// Where one crop came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSite {
    pub image: usize,
    pub tar: (usize, usize),
    pub aux: (usize, usize),
}

/// `B` positive pairs as `[B, 1, P, P]` tensors; row `i` of each is a positive.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub tar: Tensor,
    pub aux: Tensor,
    pub sites: Vec<CropSite>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.tar.shape()[2]
    }

    /// Row `i` of either modality as a flat slice.
    pub fn row(t: &Tensor, i: usize) -> &[f64] {
        let n = t.shape()[2] * t.shape()[3];
        &t.data()[i * n..(i + 1) * n]
    }
}

/// Copies a `p x p` window with top-left `(y, x)` into `out`.
pub fn crop(img: &Image, y: usize, x: usize, p: usize, out: &mut Vec<f64>) {
    for r in y..y + p {
        out.extend_from_slice(&img.data()[r * img.width() + x..r * img.width() + x + p]);
    }
}

fn jittered(base: usize, half: usize, limit: usize, rng: &mut impl Rng) -> usize {
    let lo = base.saturating_sub(half);
    let hi = (base + half).min(limit);
    rng.random_range(lo..=hi)
}

fn augment(patch: &mut [f64], p: usize, flip_h: bool, flip_v: bool, scale: f64) {
    if flip_h {
        patch.chunks_mut(p).for_each(<[f64]>::reverse);
    }
    if flip_v {
        for r in 0..p / 2 {
            let (top, bottom) = patch.split_at_mut((p - 1 - r) * p);
            top[r * p..(r + 1) * p].swap_with_slice(&mut bottom[..p]);
        }
    }
    patch.iter_mut().for_each(|v| *v *= scale);
}

/// Samples `B` co-located crop pairs across the dataset, one per image
/// while the dataset has at least `B` images.
///
/// Both crops start from one shared corner; each is then moved by at most
/// `jitter / 2` pixels per axis, so the two never sit more than `jitter`
/// apart. Flips are drawn once per pair; intensity scales once per crop.
pub fn extract_patch_pairs(pairs: &[ImagePair], cfg: &SSLConfig, rng: &mut impl Rng) -> Result<PatchBatch> {
    let p = cfg.patch_size;
    let Some(first) = pairs.first() else {
        return Err(Error::invalid("extract_patch_pairs: empty dataset"));
    };
    let (h, w) = first.target.shape();
    if p > h.min(w) || pairs.iter().any(|q| q.target.shape() != (h, w) || q.aux.shape() != (h, w)) {
        return Err(Error::invalid(format!("extract_patch_pairs: patch {p} does not fit every {h}x{w} pair")));
    }
    let b = cfg.batch_size;
    let (mut tar, mut aux) = (Vec::with_capacity(b * p * p), Vec::with_capacity(b * p * p));
    let mut sites = Vec::with_capacity(b);
    let half = cfg.jitter / 2;
    let images: Vec<usize> = if pairs.len() >= b {
        rand::seq::index::sample(rng, pairs.len(), b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..pairs.len())).collect()
    };
    for image in images {
        let (y0, x0) = (rng.random_range(0..=h - p), rng.random_range(0..=w - p));
        let t = (jittered(y0, half, h - p, rng), jittered(x0, half, w - p, rng));
        let a = (jittered(y0, half, h - p, rng), jittered(x0, half, w - p, rng));
        let (flip_h, flip_v) = if cfg.flips { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
        let (lo, hi) = cfg.scale_range;
        let mut scale = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (st, sa) = (scale(), scale());
        let start = tar.len();
        crop(&pairs[image].target, t.0, t.1, p, &mut tar);
        augment(&mut tar[start..], p, flip_h, flip_v, st);
        crop(&pairs[image].aux, a.0, a.1, p, &mut aux);
        augment(&mut aux[start..], p, flip_h, flip_v, sa);
        sites.push(CropSite { image, tar: t, aux: a });
    }
    Ok(PatchBatch {
        tar: Tensor::from_parts(vec![b, 1, p, p], tar),
        aux: Tensor::from_parts(vec![b, 1, p, p], aux),
        sites,
    })
}

/// Per-pair temperatures for both directions: `tau_u[i][k]` comes from the
/// NMI of target patch `i` and auxiliary patch `k`; `tau_w` is its transpose.
pub fn tau_matrices(batch: &PatchBatch, cfg: &SSLConfig) -> Result<(Tensor, Tensor)> {
    let b = batch.len();
    let quant = |t: &Tensor| -> Vec<Quantized> {
        (0..b).map(|i| Quantized::new(PatchBatch::row(t, i), cfg.nmi_bins)).collect()
    };
    let m = nmi_matrix(&quant(&batch.tar), &quant(&batch.aux));
    let mut tu = vec![0.0; b * b];
    let mut tw = vec![0.0; b * b];
    for i in 0..b {
        for k in 0..b {
            let tau = adaptive_tau(m[i * b + k], cfg.tau_min, cfg.tau_max)?;
            tu[i * b + k] = tau;
            tw[k * b + i] = tau;
        }
    }
    Ok((Tensor::from_parts(vec![b, b], tu), Tensor::from_parts(vec![b, b], tw)))
}

/// Fraction of target patches whose own auxiliary patch has the highest
/// cosine similarity among all auxiliary patches of the batch.
pub fn retrieval_accuracy(enc: &EncoderPair, batch: &PatchBatch) -> Result<f64> {
    let u = enc.phi.embed_values(&batch.tar)?;
    let w = enc.psi.embed_values(&batch.aux)?;
    let (b, d) = (batch.len(), u.shape()[1]);
    let hits = (0..b)
        .filter(|&i| {
            let ui = &u.data()[i * d..(i + 1) * d];
            let sim = |k: usize| ui.iter().zip(&w.data()[k * d..(k + 1) * d]).map(|(a, c)| a * c).sum::<f64>();
            let own = sim(i);
            (0..b).all(|k| k == i || sim(k) < own)
        })
        .count();
    Ok(hits as f64 / b as f64)
}

/// One pretraining objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslLosses {
    pub nce: f64,
    pub rec: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslLogRow {
    pub iter: usize,
    pub losses: SslLosses,
    pub retrieval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PamriModel {
    pub encoders: EncoderPair,
    pub decoders: DecoderPair,
    pub log: Vec<SslLogRow>,
}

/// Splits off the held-out tail of the dataset.
pub fn holdout_split<'a>(dataset: &'a [ImagePair], fraction: f64) -> (&'a [ImagePair], &'a [ImagePair]) {
    let held = ((dataset.len() as f64 * fraction).round() as usize).min(dataset.len().saturating_sub(1));
    if held == 0 {
        return (dataset, dataset);
    }
    dataset.split_at(dataset.len() - held)
}

/// Fixed, unaugmented evaluation batch drawn from the held-out pairs.
pub fn eval_batch(heldout: &[ImagePair], cfg: &SSLConfig) -> Result<PatchBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    extract_patch_pairs(heldout, &cfg.without_augmentation(), &mut rng)
}

/// Learning-rate multiplier: cosine decay from 1 to 0.1 over the run.
pub fn cosine_factor(iter: usize, iterations: usize) -> f64 {
    let progress = iter as f64 / iterations.max(1) as f64;
    0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Trains encoders and decoders with `L_nce + lambda_rec L_rec`, holding
/// out the tail of `dataset` for retrieval evaluation.
pub fn pretrain_pamri(dataset: &[ImagePair], cfg: &SSLConfig) -> Result<PamriModel> {
    if dataset.is_empty() {
        return Err(Error::invalid("pretrain_pamri: empty dataset"));
    }
    let (train, heldout) = holdout_split(dataset, cfg.holdout_fraction);
    pretrain_pamri_with_eval(train, heldout, cfg)
}

/// As [`pretrain_pamri`] with an explicit evaluation set.
pub fn pretrain_pamri_with_eval(train: &[ImagePair], heldout: &[ImagePair], cfg: &SSLConfig) -> Result<PamriModel> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("pretrain_pamri: empty dataset"));
    }
    let shape = cfg.net_shape();
    let mut enc = EncoderPair::new(shape, cfg.seed)?;
    let mut dec = DecoderPair::new(shape, cfg.seed)?;
    let eval = eval_batch(heldout, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = cfg.learning_rate;
    let mut adams = [
        Adam::new(&enc.phi.params, lr),
        Adam::new(&enc.psi.params, lr),
        Adam::new(&dec.tar.params, lr),
        Adam::new(&dec.aux.params, lr),
    ];
    let mut log_file = match &cfg.log_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "iter,nce,rec,total,retrieval_acc")?;
            Some(w)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch = extract_patch_pairs(train, cfg, &mut rng)?;
        let (tau_u, tau_w) = tau_matrices(&batch, cfg)?;
        let mut tape = Tape::new();
        let bound = [
            enc.phi.params.bind(&mut tape, true),
            enc.psi.params.bind(&mut tape, true),
            dec.tar.params.bind(&mut tape, true),
            dec.aux.params.bind(&mut tape, true),
        ];
        let step = (|| {
            let pt = tape.constant(batch.tar.clone());
            let pa = tape.constant(batch.aux.clone());
            let ft = enc.phi.features(&mut tape, &bound[0], pt)?;
            let fa = enc.psi.features(&mut tape, &bound[1], pa)?;
            let u = tape.l2_normalize(ft)?;
            let w = tape.l2_normalize(fa)?;
            let nce = nce_loss(&mut tape, u, w, &tau_u, &tau_w, cfg.terms)?;
            let rt = dec.tar.decode(&mut tape, &bound[2], ft)?;
            let ra = dec.aux.decode(&mut tape, &bound[3], fa)?;
            let rec = rec_loss(&mut tape, rt, pt, ra, pa)?;
            let weighted = tape.scale(rec, cfg.lambda_rec)?;
            let total = tape.add(nce, weighted)?;
            let losses = SslLosses {
                nce: tape.value(nce).item(),
                rec: tape.value(rec).item(),
                total: tape.value(total).item(),
            };
            if !losses.total.is_finite() {
                return Err(Error::NonFinite { op: "ssl loss" });
            }
            let vars: Vec<_> = bound.iter().flat_map(|b| b.vars().iter().copied()).collect();
            Ok((losses, tape.gradient(total, &vars)?))
        })();
        let (losses, grads) = step.map_err(|e| diverged(iter, e))?;
        let mut rest = grads.as_slice();
        let rate = lr * cosine_factor(iter, cfg.iterations);
        let nets = [
            &mut enc.phi.params,
            &mut enc.psi.params,
            &mut dec.tar.params,
            &mut dec.aux.params,
        ];
        for (params, adam) in nets.into_iter().zip(adams.iter_mut()) {
            let (mine, tail) = rest.split_at(params.len());
            adam.lr = rate;
            adam.step(params, mine);
            if !params.all_finite() {
                return Err(Error::Diverged {
                    iteration: iter,
                    detail: "non-finite parameters after update".into(),
                });
            }
            rest = tail;
        }
        let last = iter + 1 == cfg.iterations;
        let retrieval_acc = if last || (cfg.eval_every > 0 && iter % cfg.eval_every == 0) {
            Some(retrieval_accuracy(&enc, &eval)?)
        } else {
            None
        };
        if let Some(w) = log_file.as_mut() {
            let acc = retrieval_acc.map_or(String::new(), |a| a.to_string());
            writeln!(w, "{iter},{},{},{},{acc}", losses.nce, losses.rec, losses.total)?;
        }
        log.push(SslLogRow {
            iter,
            losses,
            retrieval_acc,
        });
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    if let Some(p) = &cfg.encoder_path {
        enc.save(p)?;
    }
    if let Some(p) = &cfg.decoder_path {
        dec.save(p)?;
    }
    Ok(PamriModel {
        encoders: enc,
        decoders: dec,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::sample_dataset;

    fn small_cfg() -> SSLConfig {
        SSLConfig {
            patch_size: 16,
            batch_size: 8,
            channels: 4,
            embed_dim: 8,
            iterations: 3,
            ..SSLConfig::default()
        }
    }

    #[test]
    fn unaugmented_pairs_share_coordinates() {
        let data = sample_dataset(3, 32, 32, 0.5, 1).unwrap();
        let cfg = small_cfg().without_augmentation();
        let batch = extract_patch_pairs(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(batch.tar.shape(), &[8, 1, 16, 16]);
        for (i, s) in batch.sites.iter().enumerate() {
            assert_eq!(s.tar, s.aux);
            let mut expect = Vec::new();
            crop(&data[s.image].aux, s.aux.0, s.aux.1, 16, &mut expect);
            assert_eq!(PatchBatch::row(&batch.aux, i), &expect[..]);
        }
    }

    #[test]
    fn jitter_is_bounded() {
        let data = sample_dataset(2, 32, 32, 0.5, 1).unwrap();
        let cfg = SSLConfig {
            batch_size: 200,
            ..small_cfg()
        };
        let batch = extract_patch_pairs(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut saw_offset = false;
        for s in &batch.sites {
            let dy = s.tar.0.abs_diff(s.aux.0);
            let dx = s.tar.1.abs_diff(s.aux.1);
            assert!(dy <= 4 && dx <= 4);
            saw_offset |= dy > 0 || dx > 0;
        }
        assert!(saw_offset);
    }

    #[test]
    fn flip_twice_is_identity() {
        let orig: Vec<f64> = (0..16).map(f64::from).collect();
        let mut p = orig.clone();
        augment(&mut p, 4, true, true, 1.0);
        assert_eq!(p[0], 15.0);
        augment(&mut p, 4, true, true, 1.0);
        assert_eq!(p, orig);
    }

    #[test]
    fn oversized_patch_rejected() {
        let data = sample_dataset(1, 16, 16, 0.0, 1).unwrap();
        let cfg = SSLConfig {
            patch_size: 32,
            ..small_cfg()
        };
        assert!(extract_patch_pairs(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn tau_transpose_and_range() {
        let data = sample_dataset(4, 32, 32, 0.5, 7).unwrap();
        let cfg = small_cfg();
        let batch = extract_patch_pairs(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (tu, tw) = tau_matrices(&batch, &cfg).unwrap();
        for i in 0..8 {
            for k in 0..8 {
                let v = tu.data()[i * 8 + k];
                assert_eq!(v, tw.data()[k * 8 + i]);
                assert!((cfg.tau_min..=cfg.tau_max).contains(&v));
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let data = sample_dataset(6, 32, 32, 0.5, 3).unwrap();
        let cfg = small_cfg();
        let a = pretrain_pamri(&data, &cfg).unwrap();
        let b = pretrain_pamri(&data, &cfg).unwrap();
        assert_eq!(a.encoders.phi.params, b.encoders.phi.params);
        assert_eq!(a.decoders.aux.params, b.decoders.aux.params);
        assert_eq!(a.log, b.log);
        assert!(a.log.last().unwrap().retrieval_acc.is_some());
    }
}
