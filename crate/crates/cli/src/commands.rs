//! Subcommand bodies. Every artifact lives under the configured `out_dir`:
//!
//! ```text
//! config.txt                      resolved configuration
//! data/manifest.csv               id,split,has_lesion,target,aux,mask
//! data/{train,test}/NNNN_*.img    target, aux and lesion mask per pair
//! prior/model.ckpt, prior/log.csv
//! pamri/encoders.ckpt, pamri/decoders.ckpt, pamri/log.csv
//! recon/measurements/NNNN.meas
//! recon/<arm>/NNNN.img, NNNN.pgm, NNNN_diag.csv, seeds.csv
//! metrics/<arm>.csv, metrics/<arm>_aggregate.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mpflow::config::RunConfig;
use mpflow::flow::{train_prior as fit_prior, VelocityModel};
use mpflow::image::{side_by_side, Image};
use mpflow::metrics::{dice, feature_hallucination_score, psnr, ssim, threshold_segment, MetricsReport, MetricsRow};
use mpflow::operators::{add_noise, Measurement};
use mpflow::pamri::{pretrain_pamri as fit_pamri, EncoderPair};
use mpflow::phantoms::{sample_dataset, ImagePair, LESION_SEGMENT_BAND};
use mpflow::sampler::{dc_loss, reconstruct as run_reconstruction, write_diagnostics, Ablation, GuidanceContext};

use crate::Common;

/// Seed offset of the test split relative to the global seed.
const TEST_SPLIT: u64 = 0x7e57_da7a;
/// Seed offset of the measurement noise.
const NOISE_STREAM: u64 = 0x0153_5eed;

/// One reconstruction arm: the full method minus some components.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arm {
    pub name: String,
    pub ablations: Vec<Ablation>,
}

impl Arm {
    fn full() -> Arm {
        Arm {
            name: "full".into(),
            ablations: Vec::new(),
        }
    }
}

pub fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    let ablations = s
        .split('+')
        .map(|part| match part.trim() {
            "no-pamri" => Ok(Ablation::NoPamri),
            "no-noiseopt" => Ok(Ablation::NoNoiseOpt),
            "no-dc" => Ok(Ablation::NoDc),
            other => Err(format!("unknown ablation {other:?}; expected no-pamri, no-noiseopt or no-dc")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Arm {
        name: s.trim().to_string(),
        ablations,
    })
}

/// True when the error chain bottoms out in a NaN/Inf failure.
pub fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<mpflow::Error>().is_some_and(|e| e.is_numerical()))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &c.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {o:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the configuration and records the resolved copy in the run
/// directory. A differing existing copy is only replaced with `--force`.
fn open_run(c: &Common) -> Result<RunConfig> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("config.txt");
    let text = cfg.to_text();
    match fs::read_to_string(&path) {
        Ok(old) if old == text => {}
        Ok(_) if !c.force => bail!(
            "{} holds a different configuration; pass --force to replace it",
            path.display()
        ),
        _ => fs::write(&path, text)?,
    }
    Ok(cfg)
}

fn check_free(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("refusing to overwrite {}; pass --force", path.display());
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what}: {} (run the earlier pipeline step first)", path.display());
    }
    Ok(())
}

fn pair_paths(dir: &Path, split: &str, id: usize) -> [PathBuf; 3] {
    ["target", "aux", "mask"].map(|k| dir.join(split).join(format!("{id:04}_{k}.img")))
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = open_run(c)?;
    let dir = cfg.out_dir.join("data");
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !c.force {
            bail!("{} is not empty; pass --force to regenerate", dir.display());
        }
        fs::remove_dir_all(&dir)?;
    }
    let mut manifest = String::from("id,split,has_lesion,target,aux,mask\n");
    let splits = [
        ("train", cfg.n_train, cfg.seed),
        ("test", cfg.n_test, cfg.seed ^ TEST_SPLIT),
    ];
    for (split, n, seed) in splits {
        fs::create_dir_all(dir.join(split))?;
        for (id, pair) in sample_dataset(n, cfg.height, cfg.width, cfg.lesion_prob, seed)?.iter().enumerate() {
            let paths = pair_paths(&dir, split, id);
            pair.target.save(&paths[0])?;
            pair.aux.save(&paths[1])?;
            pair.lesion_mask.save(&paths[2])?;
            let rel = |p: &Path| p.strip_prefix(&dir).unwrap().display().to_string();
            let _ = writeln!(
                manifest,
                "{id},{split},{},{},{},{}",
                pair.has_lesion() as u8,
                rel(&paths[0]),
                rel(&paths[1]),
                rel(&paths[2])
            );
        }
    }
    fs::write(dir.join("manifest.csv"), manifest)?;
    println!("wrote {} training and {} test pairs to {}", cfg.n_train, cfg.n_test, dir.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<ImagePair>> {
    let dir = cfg.out_dir.join("data");
    let manifest = dir.join("manifest.csv");
    require(&manifest, "dataset manifest")?;
    let text = fs::read_to_string(&manifest)?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("{} line {}: expected 6 fields", manifest.display(), n + 1);
        }
        if f[1] != split {
            continue;
        }
        let load = |rel: &str| Image::load(dir.join(rel)).with_context(|| format!("reading {rel}"));
        pairs.push(ImagePair {
            target: load(f[3])?,
            aux: load(f[4])?,
            lesion_mask: load(f[5])?,
        });
    }
    if pairs.is_empty() {
        bail!("{} lists no {split} pairs", manifest.display());
    }
    Ok(pairs)
}

pub fn train_prior(c: &Common) -> Result<()> {
    let cfg = open_run(c)?;
    let data: Vec<Image> = load_split(&cfg, "train")?.into_iter().map(|p| p.target).collect();
    let dir = cfg.out_dir.join("prior");
    fs::create_dir_all(&dir)?;
    let (ckpt, log) = (dir.join("model.ckpt"), dir.join("log.csv"));
    check_free(&ckpt, c.force)?;
    check_free(&log, c.force)?;
    let mut model = VelocityModel::new(cfg.architecture()?, cfg.height, cfg.width, cfg.seed)?;
    let mut tc = cfg.train_config();
    tc.checkpoint_path = Some(ckpt.clone());
    tc.log_path = Some(log);
    let losses = fit_prior(&mut model, &data, &tc)?;
    let tail = mpflow::flow::smoothed(&losses, 100);
    println!(
        "trained prior for {} iterations, smoothed loss {:.4} -> {:.4}, saved {}",
        losses.len(),
        tail[0],
        tail[tail.len() - 1],
        ckpt.display()
    );
    Ok(())
}

pub fn pretrain_pamri(c: &Common) -> Result<()> {
    let cfg = open_run(c)?;
    let data = load_split(&cfg, "train")?;
    let dir = cfg.out_dir.join("pamri");
    fs::create_dir_all(&dir)?;
    let mut sc = cfg.ssl_config();
    sc.encoder_path = Some(dir.join("encoders.ckpt"));
    sc.decoder_path = Some(dir.join("decoders.ckpt"));
    sc.log_path = Some(dir.join("log.csv"));
    for p in [&sc.encoder_path, &sc.decoder_path, &sc.log_path].into_iter().flatten() {
        check_free(p, c.force)?;
    }
    let model = fit_pamri(&data, &sc)?;
    let last = model.log.last().expect("at least one iteration");
    println!(
        "trained encoders for {} iterations, final loss {:.4}, held-out retrieval {:.3}",
        model.log.len(),
        last.losses.total,
        last.retrieval_acc.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn measurements(cfg: &RunConfig, tests: &[ImagePair], force: bool) -> Result<Vec<Measurement>> {
    let op = cfg.operator()?;
    let dir = cfg.out_dir.join("recon").join("measurements");
    fs::create_dir_all(&dir)?;
    tests
        .iter()
        .enumerate()
        .map(|(id, pair)| {
            let noise_seed = cfg.seed ^ NOISE_STREAM ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let y = add_noise(&op.apply(&pair.target)?, cfg.noise_sigma, noise_seed)?;
            let path = dir.join(format!("{id:04}.meas"));
            check_free(&path, force)?;
            y.save(&path)?;
            Ok(y)
        })
        .collect()
}

pub fn reconstruct(c: &Common, ablate: &[Arm], limit: Option<usize>) -> Result<()> {
    let cfg = open_run(c)?;
    let mut tests = load_split(&cfg, "test")?;
    tests.truncate(limit.unwrap_or(usize::MAX));
    let prior_path = cfg.out_dir.join("prior").join("model.ckpt");
    require(&prior_path, "prior checkpoint")?;
    let prior = VelocityModel::load(&prior_path)?;
    let op = cfg.operator()?;
    let mut arms = vec![Arm::full()];
    arms.extend(ablate.iter().cloned());
    let configs: Vec<_> = arms
        .iter()
        .map(|a| a.ablations.iter().fold(cfg.guidance_config(), |g, &ab| g.ablate(ab)))
        .collect();
    let encoders = if configs.iter().any(|g| g.lambda_p > 0.0) {
        let p = cfg.out_dir.join("pamri").join("encoders.ckpt");
        require(&p, "encoder checkpoint (or set lambda_p = 0)")?;
        Some(EncoderPair::load(&p)?)
    } else {
        None
    };
    let ys = measurements(&cfg, &tests, c.force)?;
    for (arm, gcfg) in arms.iter().zip(&configs) {
        let dir = cfg.out_dir.join("recon").join(&arm.name);
        fs::create_dir_all(&dir)?;
        let seeds_path = dir.join("seeds.csv");
        check_free(&seeds_path, c.force)?;
        let mut seeds = String::from("id,seed_index,objectives\n");
        for (id, (pair, y)) in tests.iter().zip(&ys).enumerate() {
            let mut ctx = GuidanceContext::new(op.clone(), y.clone())?;
            if let (true, Some(enc)) = (gcfg.lambda_p > 0.0, &encoders) {
                ctx = ctx.with_aux(pair.aux.clone(), enc.clone())?;
            }
            let mut g = gcfg.clone();
            g.seed = cfg.seed.wrapping_add(id as u64);
            let img_path = dir.join(format!("{id:04}.img"));
            check_free(&img_path, c.force)?;
            let r = run_reconstruction(&prior, &ctx, &g).with_context(|| format!("arm {}, image {id}", arm.name))?;
            r.image.save(&img_path)?;
            write_diagnostics(dir.join(format!("{id:04}_diag.csv")), &r.diagnostics)?;
            side_by_side(&[&pair.target, &op.baseline(y)?, &r.image])?
                .clamp01()
                .save_pgm(dir.join(format!("{id:04}.pgm")))?;
            let objs: Vec<String> = r.candidate_objectives.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(seeds, "{id},{},{}", r.seed_index, objs.join(";"));
        }
        fs::write(&seeds_path, seeds)?;
        println!("arm {}: {} reconstructions in {}", arm.name, tests.len(), dir.display());
    }
    Ok(())
}

pub fn evaluate(c: &Common) -> Result<()> {
    let cfg = open_run(c)?;
    let tests = load_split(&cfg, "test")?;
    let recon = cfg.out_dir.join("recon");
    require(&recon, "reconstructions")?;
    let enc_path = cfg.out_dir.join("pamri").join("encoders.ckpt");
    let encoders = if enc_path.exists() {
        Some(EncoderPair::load(&enc_path)?)
    } else {
        None
    };
    let op = cfg.operator()?;
    let out = cfg.out_dir.join("metrics");
    fs::create_dir_all(&out)?;
    let mut arms: Vec<PathBuf> = fs::read_dir(&recon)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != "measurements"))
        .collect();
    arms.sort();
    if arms.is_empty() {
        bail!("no reconstruction arms under {}", recon.display());
    }
    for arm in arms {
        let name = arm.file_name().unwrap().to_string_lossy().to_string();
        let mut rows = Vec::new();
        for (id, pair) in tests.iter().enumerate() {
            let img = arm.join(format!("{id:04}.img"));
            if !img.exists() {
                continue;
            }
            let x = Image::load(&img)?;
            let y = Measurement::load(recon.join("measurements").join(format!("{id:04}.meas")))?;
            let seg = threshold_segment(&x, LESION_SEGMENT_BAND.0, LESION_SEGMENT_BAND.1)?;
            rows.push(MetricsRow {
                id: format!("{id:04}"),
                psnr: psnr(&x, &pair.target)?,
                ssim: ssim(&x, &pair.target)?,
                meas_loss: dc_loss(&op, &x, &y)?,
                dice: if pair.has_lesion() {
                    Some(dice(&seg, &pair.lesion_mask)?)
                } else {
                    None
                },
                feat_score: match &encoders {
                    Some(e) => Some(feature_hallucination_score(&e.phi, &x, &pair.target)?),
                    None => None,
                },
            });
        }
        let (per, agg) = (out.join(format!("{name}.csv")), out.join(format!("{name}_aggregate.csv")));
        check_free(&per, c.force)?;
        check_free(&agg, c.force)?;
        let report = MetricsReport { rows };
        report.save(&per, &agg)?;
        let line: Vec<String> = report
            .aggregates()
            .iter()
            .map(|(k, a)| format!("{k} {:.4}", a.mean))
            .collect();
        println!("{name}: {} images, {}", report.rows.len(), line.join(", "));
    }
    Ok(())
}
