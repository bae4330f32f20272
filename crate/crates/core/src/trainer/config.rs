//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[semi]` sections. Unknown keys are rejected, and every problem found is
//! reported in one error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::StrongConfig;
use crate::datasets::PhantomSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Paths (relative to the config file) and the synthetic data recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub registry: PathBuf,
    pub labeled: Vec<PathBuf>,
    pub unlabeled: Vec<PathBuf>,
    pub eval: Option<PathBuf>,
    pub generate: Option<GenerateConfig>,
}

/// What `gen-data` writes: one partially labeled dataset per entry of
/// `institutions`, an unlabeled pool and a fully labeled evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub classes: Vec<String>,
    pub side: usize,
    /// Class names annotated by each labeled dataset.
    pub institutions: Vec<Vec<String>>,
    pub labeled_per_institution: usize,
    pub unlabeled_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    /// Overrides the built-in phantom recipe; `count` and `seed` are
    /// replaced per split.
    pub phantom: Option<PhantomSpec>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            classes: vec!["liver".into(), "kidney".into(), "spleen".into()],
            side: 96,
            institutions: vec![vec!["liver".into()], vec!["kidney".into()], vec!["spleen".into()]],
            labeled_per_institution: 16,
            unlabeled_count: 48,
            eval_count: 16,
            seed: 7,
            phantom: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cycle {
    /// Labeled datasets take turns every step.
    #[default]
    Step,
    /// One labeled dataset per epoch.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative factor applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Defaults to `ceil(total labeled images / labeled_batch)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub cycle: Cycle,
    /// Apply a random weak transform (flips, quarter turns) to each labeled
    /// image and its labels, so the labeled stream sees the same geometry
    /// as the weak view of unlabeled images.
    pub augment_labeled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 0.0005,
            lr_decay: 0.99,
            lr_decay_every: 40,
            labeled_batch: 8,
            unlabeled_batch: 8,
            steps_per_epoch: None,
            seed: 0,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            checkpoint_every: 10,
            cycle: Cycle::Step,
            augment_labeled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemiConfig {
    /// When false (or when there is no unlabeled data) only the supervised
    /// stream is trained.
    pub enabled: bool,
    pub tau: f64,
    pub p_jitter: f64,
    pub p_grayscale: f64,
    pub p_blur: f64,
    pub p_cutmix: f64,
    pub brightness: f32,
    pub contrast: [f32; 2],
    pub gamma: [f32; 2],
    pub blur_sigma: [f32; 2],
    pub cutmix_area: [f64; 2],
    pub cutmix_ratio: [f64; 2],
}

impl Default for SemiConfig {
    fn default() -> Self {
        let s = StrongConfig::default();
        SemiConfig {
            enabled: true,
            tau: 0.95,
            p_jitter: s.p_jitter,
            p_grayscale: s.p_grayscale,
            p_blur: s.p_blur,
            p_cutmix: s.p_cutmix,
            brightness: s.brightness,
            contrast: s.contrast,
            gamma: s.gamma,
            blur_sigma: s.blur_sigma,
            cutmix_area: s.cutmix_area,
            cutmix_ratio: s.cutmix_ratio,
        }
    }
}

impl SemiConfig {
    pub fn strong(&self) -> StrongConfig {
        StrongConfig {
            p_jitter: self.p_jitter,
            p_grayscale: self.p_grayscale,
            p_blur: self.p_blur,
            p_cutmix: self.p_cutmix,
            brightness: self.brightness,
            contrast: self.contrast,
            gamma: self.gamma,
            blur_sigma: self.blur_sigma,
            cutmix_area: self.cutmix_area,
            cutmix_ratio: self.cutmix_ratio,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub semi: SemiConfig,
}

const DATA_KEYS: &[&str] = &["registry", "labeled", "unlabeled", "eval", "generate"];
const GENERATE_KEYS: &[&str] = &[
    "classes",
    "side",
    "institutions",
    "labeled_per_institution",
    "unlabeled_count",
    "eval_count",
    "seed",
    "phantom",
];
const PHANTOM_KEYS: &[&str] = &[
    "height",
    "width",
    "classes",
    "background_mean",
    "background_std",
    "ripple",
    "noise_std",
    "count",
    "seed",
];
const SHAPE_KEYS: &[&str] = &[
    "radius_min",
    "radius_max",
    "center_min",
    "center_max",
    "intensity_mean",
    "intensity_std",
    "presence",
    "texture",
];
const MODEL_KEYS: &[&str] = &[
    "pyramid_depth",
    "base_width",
    "num_classes",
    "input_size",
    "feature_dropout",
    "perturb_site",
    "resize_to",
    "init_seed",
];
const TRAIN_KEYS: &[&str] = &[
    "augment_labeled",
    "epochs",
    "lr",
    "lr_decay",
    "lr_decay_every",
    "labeled_batch",
    "unlabeled_batch",
    "steps_per_epoch",
    "seed",
    "rms_alpha",
    "rms_eps",
    "checkpoint_every",
    "cycle",
];
const SEMI_KEYS: &[&str] = &[
    "enabled",
    "tau",
    "p_jitter",
    "p_grayscale",
    "p_blur",
    "p_cutmix",
    "brightness",
    "contrast",
    "gamma",
    "blur_sigma",
    "cutmix_area",
    "cutmix_ratio",
];

fn unknown_keys(table: &toml::Table, known: &[&str], prefix: &str, out: &mut Vec<String>) {
    for key in table.keys() {
        if !known.contains(&key.as_str()) {
            out.push(format!("unknown key `{prefix}{key}`"));
        }
    }
}

fn collect_unknown(root: &toml::Table, out: &mut Vec<String>) {
    unknown_keys(root, &["data", "model", "train", "semi"], "", out);
    let section = |name: &str| root.get(name).and_then(toml::Value::as_table);
    if let Some(data) = section("data") {
        unknown_keys(data, DATA_KEYS, "data.", out);
        if let Some(generate) = data.get("generate").and_then(toml::Value::as_table) {
            unknown_keys(generate, GENERATE_KEYS, "data.generate.", out);
            if let Some(phantom) = generate.get("phantom").and_then(toml::Value::as_table) {
                unknown_keys(phantom, PHANTOM_KEYS, "data.generate.phantom.", out);
                if let Some(shapes) = phantom.get("classes").and_then(toml::Value::as_array) {
                    for (i, s) in shapes.iter().enumerate() {
                        if let Some(t) = s.as_table() {
                            unknown_keys(t, SHAPE_KEYS, &format!("data.generate.phantom.classes[{i}]."), out);
                        }
                    }
                }
            }
        }
    }
    for (name, keys) in [("model", MODEL_KEYS), ("train", TRAIN_KEYS), ("semi", SEMI_KEYS)] {
        if let Some(t) = section(name) {
            unknown_keys(t, keys, &format!("{name}."), out);
        }
    }
}

fn section<S: DeserializeOwned + Default>(root: &toml::Table, name: &str, errors: &mut Vec<String>) -> S {
    match root.get(name) {
        None => S::default(),
        Some(v) => match v.clone().try_into::<S>() {
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("[{name}]: {}", e.message()));
                S::default()
            }
        },
    }
}

impl Config {
    /// Parses and validates config text, collecting every problem.
    pub fn parse(text: &str) -> Result<Self> {
        let root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_owned()]))?;
        let mut errors = Vec::new();
        collect_unknown(&root, &mut errors);
        let cfg = Config {
            data: section(&root, "data", &mut errors),
            model: section(&root, "model", &mut errors),
            train: section(&root, "train", &mut errors),
            semi: section(&root, "semi", &mut errors),
        };
        if errors.is_empty() {
            errors.extend(cfg.problems());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every value-level problem, in section order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.model.validate() {
            out.push(e.to_string());
        }
        let t = &self.train;
        if t.epochs < 1 {
            out.push("train.epochs must be at least 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            out.push("train.lr must be positive".into());
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            out.push("train.lr_decay must lie in (0, 1]".into());
        }
        if t.lr_decay_every < 1 {
            out.push("train.lr_decay_every must be at least 1".into());
        }
        if t.labeled_batch < 1 {
            out.push("train.labeled_batch must be at least 1".into());
        }
        if t.unlabeled_batch < 1 {
            out.push("train.unlabeled_batch must be at least 1".into());
        }
        if t.steps_per_epoch == Some(0) {
            out.push("train.steps_per_epoch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&t.rms_alpha) {
            out.push("train.rms_alpha must lie in [0, 1)".into());
        }
        if !(t.rms_eps > 0.0) {
            out.push("train.rms_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.semi.tau) {
            out.push("semi.tau must lie in [0, 1]".into());
        }
        if let Err(e) = self.semi.strong().validate() {
            out.push(e.to_string());
        }
        out
    }
}

/// Hex SHA-256 of the config bytes, recorded in run manifests and checkpoints.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resolves a config-relative path.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Key listing used by tests to keep the known-key tables in sync with the
/// structs.
#[cfg(test)]
fn serialized_keys(cfg: &Config) -> std::collections::BTreeMap<String, Vec<String>> {
    let v = toml::Value::try_from(cfg).expect("config serializes");
    let mut out = std::collections::BTreeMap::new();
    if let Some(t) = v.as_table() {
        for (name, sec) in t {
            if let Some(st) = sec.as_table() {
                out.insert(name.clone(), st.keys().cloned().collect());
            }
        }
    }
    out
}
