//! Run configuration: a TOML file with one table per pipeline stage.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use guide_core::attacks::{AttackConfig, AttackKind};
use guide_core::evidential::{BranchKind, MetaTrainConfig};
use guide_core::framing::sha256_hex;
use guide_core::metrics::Metric;
use guide_core::nn::TrainConfig;
use guide_core::saliency::Stabilizer;
use guide_core::{Architecture, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for the parallel stages; results do not depend on it.
    #[serde(default = "one")]
    pub threads: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub attack: AttackSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `idx` or `blobs`.
    #[serde(default = "idx")]
    pub source: String,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Train / validation / test counts.
    #[serde(default = "default_split")]
    pub split: [usize; 3],
    #[serde(default = "yes")]
    pub stratified: bool,
    #[serde(default = "default_blob_classes")]
    pub blob_classes: usize,
    #[serde(default = "default_blob_per_class")]
    pub blob_per_class: usize,
    #[serde(default = "default_blob_side")]
    pub blob_side: usize,
    /// `idx`, `blobs` (wide, dim, noisy blobs) or `same` (the ID test pool,
    /// a null-shift control).
    #[serde(default = "idx")]
    pub ood_source: String,
    pub ood_images: Option<PathBuf>,
    pub ood_labels: Option<PathBuf>,
    /// Validation / test counts drawn from the shift set.
    #[serde(default = "default_ood_split")]
    pub ood_split: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    #[serde(default = "default_arch")]
    pub architecture: String,
    #[serde(default = "default_base_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// `relative`, `absolute` or `exact`.
    #[serde(default = "default_stabilizer")]
    pub stabilizer: String,
    /// Relative factor or absolute ε, depending on `stabilizer`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// `linear` or `deep`.
    #[serde(default = "default_branch")]
    pub branch: String,
    #[serde(default = "default_meta_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_meta_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// `fgsm`, `l2pgd` or `salt_pepper`.
    #[serde(default = "default_attack")]
    pub kind: String,
    /// Perturbation budget, or the corrupted fraction for salt-and-pepper.
    #[serde(default = "one_f64")]
    pub epsilon: f64,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    #[serde(default = "yes")]
    pub random_start: bool,
    /// `base` or `pipeline`.
    #[serde(default = "default_attack_target")]
    pub target: String,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn one() -> usize {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn idx() -> String {
    "idx".into()
}
fn default_split() -> [usize; 3] {
    [7000, 1000, 2000]
}
fn default_ood_split() -> [usize; 2] {
    [2000, 2000]
}
fn default_blob_classes() -> usize {
    4
}
fn default_blob_per_class() -> usize {
    60
}
fn default_blob_side() -> usize {
    12
}
fn default_arch() -> String {
    "lenet5".into()
}
fn default_base_epochs() -> usize {
    10
}
fn default_base_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    64
}
fn default_eval_batch() -> usize {
    256
}
fn default_eta() -> f64 {
    0.9
}
fn default_stabilizer() -> String {
    "relative".into()
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_floor() -> f64 {
    1e-9
}
fn default_fisher_samples() -> usize {
    1000
}
fn default_gamma() -> f64 {
    0.25
}
fn default_stages() -> usize {
    5
}
fn default_branch() -> String {
    "linear".into()
}
fn default_meta_epochs() -> usize {
    MetaTrainConfig::default().epochs
}
fn default_meta_lr() -> f64 {
    MetaTrainConfig::default().lr
}
fn default_lambda_kl() -> f64 {
    MetaTrainConfig::default().lambda_kl
}
fn default_beta() -> f64 {
    MetaTrainConfig::default().beta
}
fn default_metric() -> String {
    "mutual_info".into()
}
fn default_attack() -> String {
    "l2pgd".into()
}
fn default_attack_target() -> String {
    "base".into()
}

macro_rules! section_default {
    ($($t:ty),*) => {$(
        impl Default for $t {
            fn default() -> Self {
                toml::from_str("").expect("every field has a default")
            }
        }
    )*};
}
section_default!(BaseConfig, SaliencyConfig, CurriculumConfig, MetaConfig, EvalConfig, AttackSection);

/// Which model an attack differentiates through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackTarget {
    Base,
    Pipeline,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let d = &mut self.data;
        for p in [&mut d.images, &mut d.labels, &mut d.ood_images, &mut d.ood_labels].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        match d.source.as_str() {
            "idx" => require_files(&[("data.images", &d.images), ("data.labels", &d.labels)])?,
            "blobs" => {
                if d.blob_classes < 2 || d.blob_per_class == 0 || d.blob_side < 4 {
                    return bad("blob corpus needs blob_classes >= 2, blob_per_class >= 1, blob_side >= 4".into());
                }
            }
            other => return bad(format!("unknown data.source `{other}` (expected idx or blobs)")),
        }
        match d.ood_source.as_str() {
            "idx" => require_files(&[("data.ood_images", &d.ood_images), ("data.ood_labels", &d.ood_labels)])?,
            "blobs" | "same" => {}
            other => return bad(format!("unknown data.ood_source `{other}` (expected idx, blobs or same)")),
        }
        if d.split.contains(&0) || d.ood_split.contains(&0) {
            return bad("every data split needs at least one sample".into());
        }
        Architecture::parse(&self.base.architecture)?;
        if self.base.epochs == 0 || !(self.base.lr > 0.0) {
            return bad("base.epochs must be >= 1 and base.lr > 0".into());
        }
        let s = &self.saliency;
        if !(s.eta > 0.0 && s.eta <= 1.0) {
            return bad(format!("saliency.eta must lie in (0, 1], got {}", s.eta));
        }
        self.stabilizer()?;
        if s.fisher_samples == 0 {
            return bad("saliency.fisher_samples must be >= 1".into());
        }
        let c = &self.curriculum;
        if !(c.gamma > 0.0) || !c.gamma.is_finite() {
            return bad(format!("curriculum.gamma must be > 0, got {}", c.gamma));
        }
        if c.stages == 0 {
            return bad("curriculum.stages must be >= 1".into());
        }
        let m = &self.meta;
        BranchKind::parse(&m.branch).map_err(|e| Error::Config(e.to_string()))?;
        if m.epochs == 0 || !(m.lr > 0.0) || !(m.lambda_kl >= 0.0) || !(m.beta > 0.0) {
            return bad("meta needs epochs >= 1, lr > 0, lambda_kl >= 0 and beta > 0".into());
        }
        self.metric()?;
        if self.attack.enabled {
            self.attack_config()?.validate().map_err(|e| Error::Config(e.to_string()))?;
            self.attack_target()?;
        }
        let batches = [
            self.base.batch_size,
            s.batch_size,
            c.batch_size,
            m.batch_size,
            self.eval.batch_size,
            self.attack.batch_size,
        ];
        if batches.contains(&0) || self.threads == 0 {
            return bad("batch sizes and threads must be >= 1".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.base.epochs, lr: self.base.lr, batch_size: self.base.batch_size, seed: self.seed }
    }

    pub fn stabilizer(&self) -> Result<Stabilizer> {
        let s = &self.saliency;
        let stab = match s.stabilizer.as_str() {
            "exact" => Stabilizer::Exact,
            "absolute" => Stabilizer::Absolute(s.epsilon),
            "relative" => Stabilizer::Relative { factor: s.epsilon, floor: s.floor },
            other => return Err(Error::Config(format!("unknown saliency.stabilizer `{other}`"))),
        };
        let positive = match stab {
            Stabilizer::Exact => true,
            Stabilizer::Absolute(e) => e > 0.0,
            Stabilizer::Relative { factor, floor } => factor > 0.0 && floor > 0.0,
        };
        if !positive {
            return Err(Error::Config("saliency.epsilon and saliency.floor must be > 0".into()));
        }
        Ok(stab)
    }

    pub fn meta_config(&self) -> MetaTrainConfig {
        let m = &self.meta;
        MetaTrainConfig {
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.lr,
            lambda_kl: m.lambda_kl,
            beta: m.beta,
            seed: self.seed,
        }
    }

    pub fn metric(&self) -> Result<Metric> {
        Metric::parse(&self.eval.metric)
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let a = &self.attack;
        let mut cfg = match AttackKind::parse(&a.kind)? {
            AttackKind::Fgsm => AttackConfig::fgsm(a.epsilon),
            AttackKind::L2Pgd => AttackConfig::l2pgd(a.epsilon, self.seed),
            AttackKind::SaltPepper => AttackConfig::salt_pepper(a.epsilon, self.seed),
        };
        if let Some(steps) = a.steps {
            cfg.steps = steps;
        }
        if let Some(step) = a.step_size {
            cfg.step_size = step;
        }
        if cfg.kind == AttackKind::L2Pgd {
            cfg.random_start = a.random_start;
        }
        Ok(cfg)
    }

    pub fn attack_target(&self) -> Result<AttackTarget> {
        match self.attack.target.as_str() {
            "base" => Ok(AttackTarget::Base),
            "pipeline" => Ok(AttackTarget::Pipeline),
            other => Err(Error::Config(format!("unknown attack.target `{other}` (expected base or pipeline)"))),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn require_files(entries: &[(&str, &Option<PathBuf>)]) -> Result<()> {
    for (key, path) in entries {
        match path {
            None => return Err(Error::Config(format!("{key} is required"))),
            Some(p) if !p.is_file() => return Err(Error::Config(format!("{key}: {} does not exist", p.display()))),
            Some(_) => {}
        }
    }
    Ok(())
}

/// Chained per-stage hashes. A stage's hash covers its own section and the
/// hashes of everything upstream, so editing a late section leaves earlier
/// artifacts valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageHashes {
    pub data: String,
    pub base: String,
    pub calibrate: String,
    pub curriculum: String,
    pub meta: String,
    pub attack: String,
    pub evaluate: String,
}

impl StageHashes {
    pub fn compute(cfg: &RunConfig) -> Result<Self> {
        let mut data_files = String::new();
        let d = &cfg.data;
        for p in [&d.images, &d.labels, &d.ood_images, &d.ood_labels].into_iter().flatten() {
            let bytes = fs::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            data_files.push_str(&sha256_hex(&bytes));
            data_files.push('\n');
        }
        let mut data_section = d.clone();
        // contents are hashed instead, so moving the files keeps caches valid
        data_section.images = None;
        data_section.labels = None;
        data_section.ood_images = None;
        data_section.ood_labels = None;

        let data = chain("data", &[&cfg.seed.to_string(), &section(&data_section), &data_files]);
        let base = chain("base", &[&data, &section(&cfg.base)]);
        let calibrate = chain("calibrate", &[&base, &section(&cfg.saliency)]);
        let curriculum = chain("curriculum", &[&calibrate, &section(&cfg.curriculum)]);
        let meta = chain("meta", &[&curriculum, &section(&cfg.meta)]);
        let attack = if !cfg.attack.enabled {
            chain("attack", &["disabled"])
        } else {
            let upstream = match cfg.attack_target()? {
                AttackTarget::Base => &base,
                AttackTarget::Pipeline => &meta,
            };
            chain("attack", &[upstream, &section(&cfg.attack)])
        };
        let evaluate = chain("evaluate", &[&meta, &attack, &section(&cfg.eval)]);
        Ok(StageHashes { data, base, calibrate, curriculum, meta, attack, evaluate })
    }
}

fn section<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config section serializes")
}

fn chain(stage: &str, parts: &[&str]) -> String {
    let mut text = format!("stage={stage}\n");
    for p in parts {
        text.push_str(p);
        text.push_str("\n--\n");
    }
    sha256_hex(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> RunConfig {
        RunConfig::parse(
            r#"
            seed = 3
            [data]
            source = "blobs"
            ood_source = "blobs"
            split = [100, 40, 40]
            ood_split = [20, 20]
            [base]
            architecture = "mlp:16"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = blobs();
        assert_eq!(cfg.saliency.eta, 0.9);
        assert_eq!(cfg.curriculum.gamma, 0.25);
        assert_eq!(cfg.curriculum.stages, 5);
        assert_eq!(cfg.meta.lambda_kl, 0.1);
        assert_eq!(cfg.threads, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("[data]\nsource = \"blobs\"\nbogus = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::parse("[data]\nsource = \"blobs\"\n[meta]\nepoch = 3\n").unwrap_err();
        assert!(err.to_string().contains("epoch"));
    }

    #[test]
    fn validation_catches_ranges() {
        let mut cfg = blobs();
        cfg.saliency.eta = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = blobs();
        cfg.curriculum.gamma = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = blobs();
        cfg.eval.metric = "entropy".into();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = blobs();
        cfg.data.source = "idx".into();
        cfg.data.images = Some("/nonexistent/images.gz".into());
        cfg.data.labels = Some("/nonexistent/labels.gz".into());
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = blobs();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn hashes_chain_downstream_only() {
        let cfg = blobs();
        let h = StageHashes::compute(&cfg).unwrap();
        let mut changed = cfg.clone();
        changed.meta.epochs += 1;
        let h2 = StageHashes::compute(&changed).unwrap();
        assert_eq!(h.base, h2.base);
        assert_eq!(h.curriculum, h2.curriculum);
        assert_ne!(h.meta, h2.meta);
        assert_ne!(h.evaluate, h2.evaluate);
        // a base-targeted attack does not depend on the meta-model
        assert_eq!(h.attack, h2.attack);

        let mut reseeded = cfg.clone();
        reseeded.seed += 1;
        let h3 = StageHashes::compute(&reseeded).unwrap();
        assert_ne!(h.data, h3.data);
        assert_ne!(h.base, h3.base);

        let mut threads = cfg;
        threads.threads = 8;
        assert_eq!(StageHashes::compute(&threads).unwrap(), h);
    }
}
