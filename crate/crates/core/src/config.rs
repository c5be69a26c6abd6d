//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors, so a
//! resolved copy written by [`RunConfig::to_text`] always parses back to the
//! same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow::{Architecture, TrainConfig};
use crate::operators::{make_mask, ForwardOperator};
use crate::pamri::{NceTerms, SSLConfig};
use crate::sampler::{AlphaMode, GuidanceConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Sr,
    Kspace,
    Blur,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(Task::Sr),
            "kspace" => Ok(Task::Kspace),
            "blur" => Ok(Task::Blur),
            _ => Err(Error::invalid(format!("task must be sr, kspace or blur, got {s:?}"))),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sr => "sr",
            Task::Kspace => "kspace",
            Task::Blur => "blur",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: Task,
    pub sr_factor: usize,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub blur_sigma: f64,
    pub blur_radius: usize,
    pub noise_sigma: f64,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub lesion_prob: f64,
    pub prior_arch: String,
    pub prior_width: usize,
    pub prior_iterations: usize,
    pub prior_batch: usize,
    pub prior_lr: f64,
    pub ssl_patch: usize,
    pub ssl_batch: usize,
    pub ssl_iterations: usize,
    pub ssl_lr: f64,
    pub ssl_channels: usize,
    pub embed_dim: usize,
    pub tau_min: f64,
    pub tau_max: f64,
    pub lambda_rec: f64,
    pub nmi_bins: usize,
    pub jitter: usize,
    pub steps: usize,
    pub alpha0: f64,
    pub alpha_mode: String,
    pub lambda_p: f64,
    pub seeds: usize,
    pub t_noise_frac: f64,
    pub stop_grad_through_prior: bool,
    pub guided_warm_start: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            task: Task::Sr,
            sr_factor: 4,
            acceleration: 4.0,
            center_fraction: 0.08,
            blur_sigma: 1.5,
            blur_radius: 4,
            noise_sigma: 0.0,
            height: 32,
            width: 32,
            n_train: 200,
            n_test: 50,
            lesion_prob: 0.5,
            prior_arch: "unet".into(),
            prior_width: 8,
            prior_iterations: 4000,
            prior_batch: 8,
            prior_lr: 3e-3,
            ssl_patch: 16,
            ssl_batch: 64,
            ssl_iterations: 2000,
            ssl_lr: 2e-3,
            ssl_channels: 16,
            embed_dim: 64,
            tau_min: 0.05,
            tau_max: 0.5,
            lambda_rec: 0.5,
            nmi_bins: 32,
            jitter: 2,
            steps: 100,
            alpha0: 10.0,
            alpha_mode: "gradnorm".into(),
            lambda_p: 0.003,
            seeds: 8,
            t_noise_frac: 0.8,
            stop_grad_through_prior: false,
            guided_warm_start: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("config key {key}: cannot parse {v:?}")))
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            seed, out_dir, task, sr_factor, acceleration, center_fraction, blur_sigma, blur_radius,
            noise_sigma, height, width, n_train, n_test, lesion_prob, prior_arch, prior_width,
            prior_iterations, prior_batch, prior_lr, ssl_patch, ssl_batch, ssl_iterations, ssl_lr,
            ssl_channels, embed_dim, tau_min, tau_max, lambda_rec, nmi_bins, jitter, steps, alpha0,
            alpha_mode, lambda_p, seeds, t_noise_frac, stop_grad_through_prior, guided_warm_start
        )
    };
}

trait ConfigValue: Sized {
    fn read(key: &str, v: &str) -> Result<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn read(key: &str, v: &str) -> Result<Self> {
                parse(key, v)
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(u64, usize, f64, bool, String);

impl ConfigValue for PathBuf {
    fn read(_: &str, v: &str) -> Result<Self> {
        Ok(PathBuf::from(v))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Task {
    fn read(_: &str, v: &str) -> Result<Self> {
        v.parse()
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

impl RunConfig {
    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => self.$f = ConfigValue::read(key, value)?,)*
                    _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
                }
            };
        }
        fields!(set);
        Ok(())
    }

    /// Every key in declaration order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.show())),*] };
        }
        fields!(list)
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::invalid(format!("config line {}: expected key = value", n + 1)));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.alpha()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::invalid("n_train and n_test must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("lesion_prob must be in [0, 1] and noise_sigma >= 0"));
        }
        self.train_config().validate()?;
        self.ssl_config().validate()?;
        self.guidance_config().validate()
    }

    pub fn architecture(&self) -> Result<Architecture> {
        match self.prior_arch.as_str() {
            "unet" => Ok(Architecture::UNet { width: self.prior_width }),
            "mlp" => Ok(Architecture::Mlp { hidden: self.prior_width }),
            a => Err(Error::invalid(format!("prior_arch must be unet or mlp, got {a:?}"))),
        }
    }

    pub fn alpha(&self) -> Result<AlphaMode> {
        match self.alpha_mode.as_str() {
            "gradnorm" => Ok(AlphaMode::GradNorm),
            "constant" => Ok(AlphaMode::Constant),
            a => Err(Error::invalid(format!("alpha_mode must be gradnorm or constant, got {a:?}"))),
        }
    }

    /// The degradation for this run; the k-space mask depends on `seed`.
    pub fn operator(&self) -> Result<ForwardOperator> {
        let (h, w) = (self.height, self.width);
        match self.task {
            Task::Sr => ForwardOperator::downsample(h, w, self.sr_factor),
            Task::Blur => ForwardOperator::gaussian_blur(h, w, self.blur_sigma, self.blur_radius),
            Task::Kspace => ForwardOperator::kspace(make_mask(h, w, self.acceleration, self.center_fraction, self.seed)?),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.prior_iterations,
            batch_size: self.prior_batch,
            learning_rate: self.prior_lr,
            seed: self.seed,
            checkpoint_path: None,
            log_path: None,
        }
    }

    pub fn ssl_config(&self) -> SSLConfig {
        SSLConfig {
            patch_size: self.ssl_patch,
            batch_size: self.ssl_batch,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            lambda_rec: self.lambda_rec,
            nmi_bins: self.nmi_bins,
            jitter: self.jitter,
            terms: NceTerms::Full,
            iterations: self.ssl_iterations,
            learning_rate: self.ssl_lr,
            seed: self.seed,
            channels: self.ssl_channels,
            embed_dim: self.embed_dim,
            ..SSLConfig::default()
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            steps: self.steps,
            alpha0: self.alpha0,
            alpha_mode: self.alpha().unwrap_or(AlphaMode::GradNorm),
            lambda_p: self.lambda_p,
            seeds: self.seeds,
            t_noise_frac: self.t_noise_frac,
            seed: self.seed,
            dc_weight: 1.0,
            stop_grad_through_prior: self.stop_grad_through_prior,
            guided_warm_start: self.guided_warm_start,
        }
    }
}
