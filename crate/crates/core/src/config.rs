//! Run configuration: which feature files take part, which algorithm runs,
//! and the training hyperparameters.
//!
//! Configs are TOML with flat keys, e.g.
//!
//! ```toml
//! task = "target-domain3"
//! clients = ["data/domain0.fcf", "data/domain1.fcf", "data/domain2.fcf"]
//! target = "data/domain3.fcf"
//! algorithm = "fedclip"
//! lr = 5e-4
//! rounds = 200
//! seeds = [0, 1, 2]
//! output_dir = "out"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_feature_file, FeatureDataset};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;

/// Lower and upper ends of the usual learning-rate band.
pub const LR_BAND: (f64, f64) = (5e-5, 5e-3);

/// Parameter count of fully fine-tuning the image and text encoders, used as
/// the reference point for communication savings.
pub const REFERENCE_FULL_MODEL_PARAMS: u64 = 150_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Adapter-only federated averaging.
    Fedclip,
    /// Adapter-only averaging with a proximal term on the local objective.
    FedproxAdapter,
    /// Each client trains its own adapter; nothing is exchanged.
    LocalOnly,
    /// No training: raw features against class text features.
    ZeroShot,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fedclip => "fedclip",
            Algorithm::FedproxAdapter => "fedprox-adapter",
            Algorithm::LocalOnly => "local-only",
            Algorithm::ZeroShot => "zero-shot",
        }
    }

    pub fn all() -> [Algorithm; 4] {
        [
            Algorithm::Fedclip,
            Algorithm::FedproxAdapter,
            Algorithm::LocalOnly,
            Algorithm::ZeroShot,
        ]
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::all()
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Hyperparameters of one training run, independent of where data lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    pub scale: f64,
    pub mu: f64,
    /// Worker threads for client updates; `None` uses the global pool.
    /// Results do not depend on this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub reference_full_model_params: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            algorithm: Algorithm::Fedclip,
            lr: 5e-4,
            batch_size: 32,
            local_epochs: 1,
            rounds: 200,
            scale: 100.0,
            mu: 0.01,
            workers: None,
            reference_full_model_params: REFERENCE_FULL_MODEL_PARAMS,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.reference_full_model_params == 0 {
            return Err(Error::Config("reference_full_model_params must be positive".into()));
        }
        Ok(())
    }

    /// Non-fatal remarks about the settings.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let needs_lr = !matches!(self.algorithm, Algorithm::ZeroShot);
        if needs_lr && (self.lr < LR_BAND.0 || self.lr > LR_BAND.1) {
            out.push(format!(
                "lr {:e} is outside the usual range [{:e}, {:e}]",
                self.lr, LR_BAND.0, LR_BAND.1
            ));
        }
        out
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// Proximal weight actually applied during local training.
    pub fn effective_mu(&self) -> f64 {
        match self.algorithm {
            Algorithm::FedproxAdapter => self.mu,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in reports; defaults to the target's domain name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub clients: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Expected feature width; checked against every file when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub train: TrainSettings,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(clients: Vec<PathBuf>, target: Option<PathBuf>) -> Self {
        RunConfig {
            task: None,
            clients,
            target,
            dim: None,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            train: TrainSettings::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|r| {
                let line = text[..r.start].matches('\n').count() + 1;
                format!(" (line {line})")
            });
            Error::Config(format!("{}{}", e.message().trim(), at.unwrap_or_default()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        // Relative data paths resolve against the config file's directory.
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            cfg.clients.iter_mut().for_each(fix);
            if let Some(t) = cfg.target.as_mut() {
                fix(t);
            }
            fix(&mut cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("at least one client feature file is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.train.validate()
    }

    /// Reads every feature file and checks that they agree on width and
    /// class count.
    pub fn load_datasets(&self) -> Result<(Vec<FeatureDataset>, Option<FeatureDataset>)> {
        let clients = self
            .clients
            .iter()
            .map(|p| read_feature_file(p))
            .collect::<Result<Vec<_>>>()?;
        let target = self.target.as_deref().map(read_feature_file).transpose()?;
        check_compatible(&clients, target.as_ref(), self.dim)?;
        Ok((clients, target))
    }

    /// Stable 64-bit fingerprint of everything that affects results. The
    /// output directory and worker count are left out.
    pub fn config_hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.train.workers = None;
        let json = serde_json::to_vec(&canonical).expect("config serialises");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn task_name(&self, target: Option<&FeatureDataset>) -> String {
        self.task.clone().unwrap_or_else(|| match target {
            Some(t) => format!("target-{}", t.domain_name),
            None => "no-target".to_string(),
        })
    }
}

/// Feature width and class table agreement across clients and target.
pub fn check_compatible(
    clients: &[FeatureDataset],
    target: Option<&FeatureDataset>,
    expected_dim: Option<usize>,
) -> Result<()> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Config("at least one client is required".into()))?;
    let d = expected_dim.unwrap_or(first.dim());
    for ds in clients.iter().chain(target) {
        if ds.dim() != d {
            return Err(Error::Validation(format!(
                "domain {} has feature width {}, expected {d}",
                ds.domain_name,
                ds.dim()
            )));
        }
        if ds.num_classes() != first.num_classes() {
            return Err(Error::Validation(format!(
                "domain {} has {} classes, expected {}",
                ds.domain_name,
                ds.num_classes(),
                first.num_classes()
            )));
        }
    }
    Ok(())
}
