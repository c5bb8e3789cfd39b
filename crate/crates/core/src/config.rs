//! Run configuration: INI-style sections parsed strictly, with
//! `section.key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_suite, BiasProfile, DatasetSpec, Mixing, Suite, SuiteSpec};
use crate::error::{Error, Result};
use crate::losses::VarianceFormula;
use crate::mvit::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub eps: f64,
    pub variance_formula: VarianceFormula,
    pub expander_hidden: usize,
    /// Initial `σ_k`.
    pub sigma_init: f64,
    pub detach_sigma_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            variance_formula: VarianceFormula::Vicreg,
            expander_hidden: 64,
            sigma_init: 1.0,
            detach_sigma_loss: false,
        }
    }
}

/// The synthetic suite. Per-dataset arrays are indexed like `names`.
///
/// `classes` holds one string per dataset: classes separated by `,`, each a
/// `+`-joined list of concept indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetsConfig {
    pub seed: u64,
    pub names: Vec<String>,
    pub classes: Vec<String>,
    pub concepts: usize,
    pub speed: f64,
    pub width: f64,
    /// Blobs per clip.
    pub blobs: usize,
    pub background: Vec<f64>,
    pub noise: Vec<f64>,
    pub decimation: Vec<usize>,
    pub blob_scale: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub mixing: Mixing,
}

impl Default for DatasetsConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            names: vec!["kin".into(), "mit".into(), "ssv".into()],
            classes: vec!["0,1,2,3".into(), "0+4,1,5,6".into(), "2,3+7,4,5".into()],
            concepts: 8,
            speed: 1.0,
            width: 1.5,
            blobs: 4,
            background: vec![0.0, 0.1, 0.0],
            noise: vec![0.05, 0.05, 0.05],
            decimation: vec![1, 2, 1],
            blob_scale: vec![1.0, 1.0, 1.5],
            train: vec![200, 200, 200],
            test: vec![100, 100, 100],
            mixing: Mixing::Proportional,
        }
    }
}

/// Which terms of the objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Informative loss, projected logits, σ-weighted objective.
    Full,
    /// Plain sum of per-head cross-entropies.
    Vanilla,
    /// Projected logits and σ weighting, no informative loss.
    NoInformative,
    /// No informative loss; cross-entropy on each head and separately on
    /// every projected branch instead of on their sum.
    NoInformativeNoProjectionAdd,
    /// Informative loss and σ weighting, no projections.
    NoProjectionLoss,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Full,
        TrainMode::Vanilla,
        TrainMode::NoInformative,
        TrainMode::NoInformativeNoProjectionAdd,
        TrainMode::NoProjectionLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Vanilla => "vanilla",
            TrainMode::NoInformative => "no-informative",
            TrainMode::NoInformativeNoProjectionAdd => "no-informative-no-projection-add",
            TrainMode::NoProjectionLoss => "no-projection-loss",
        }
    }

    pub fn use_informative(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::NoProjectionLoss)
    }

    pub fn use_projection(self) -> bool {
        matches!(
            self,
            TrainMode::Full | TrainMode::NoInformative | TrainMode::NoInformativeNoProjectionAdd
        )
    }

    /// Projected logits are added to `Y_k` before the cross-entropy.
    pub fn projection_add(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::NoInformative)
    }

    pub fn sigma_weighted(self) -> bool {
        self != TrainMode::Vanilla
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse {
                key: "train.mode".into(),
                message: format!("unknown mode `{s}`"),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Explicit warmup length; 0 falls back to `warmup_fraction`.
    pub warmup_steps: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        if self.warmup_steps > 0 {
            self.warmup_steps
        } else {
            (self.warmup_fraction * self.steps as f64).round() as usize
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            lr_min: 1e-6,
            warmup_steps: 0,
            warmup_fraction: 0.05,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mode: TrainMode::Full,
            seed: 0,
            grad_clip: 0.0,
            eval_every: 0,
            checkpoint_every: 0,
            eval_batch: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub top_n: usize,
    pub ablate_seeds: Vec<u64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            top_n: 5,
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub datasets: DatasetsConfig,
    pub train: TrainConfig,
    pub report: ReportConfig,
}

const SECTIONS: [&str; 5] = ["backbone", "loss", "datasets", "train", "report"];

impl RunConfig {
    /// Parses `text` and applies `overrides` (`section.key=value`) on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            key: "<file>".into(),
            message: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        for (name, value) in &table {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Parse {
                    key: name.clone(),
                    message: "unknown section".into(),
                });
            }
            if !value.is_table() {
                return Err(Error::Parse {
                    key: name.clone(),
                    message: "expected a section".into(),
                });
            }
        }
        let cfg = RunConfig {
            backbone: section(&table, "backbone")?,
            loss: section(&table, "loss")?,
            datasets: section(&table, "datasets")?,
            train: section(&table, "train")?,
            report: section(&table, "report")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    /// The fully resolved configuration in the same format it is read from.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a digest of [`RunConfig::resolved`].
    pub fn hash(&self) -> u64 {
        self.resolved().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Error::Parse {
            key: key.into(),
            message,
        };
        let t = &self.train;
        if t.steps == 0 {
            return Err(bad("train.steps", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(bad("train.warmup_fraction", "must lie in [0, 1)".into()));
        }
        if t.warmup() >= t.steps {
            return Err(bad(
                "train.warmup_steps",
                format!("{} must be below train.steps = {}", t.warmup(), t.steps),
            ));
        }
        if t.batch_size < 2 && t.mode.use_informative() {
            return Err(bad("train.batch_size", "informative loss needs at least 2".into()));
        }
        if t.batch_size == 0 || t.eval_batch == 0 {
            return Err(bad("train.batch_size", "must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr_min >= 0.0 && t.lr_min <= t.lr) {
            return Err(bad("train.lr", "need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if self.loss.sigma_init <= 0.0 {
            return Err(bad("loss.sigma_init", "must be positive".into()));
        }
        if self.report.top_n == 0 {
            return Err(bad("report.top_n", "must be positive".into()));
        }
        let d = &self.datasets;
        let k = d.names.len();
        let lens = [
            ("datasets.classes", d.classes.len()),
            ("datasets.background", d.background.len()),
            ("datasets.noise", d.noise.len()),
            ("datasets.decimation", d.decimation.len()),
            ("datasets.blob_scale", d.blob_scale.len()),
            ("datasets.train", d.train.len()),
            ("datasets.test", d.test.len()),
        ];
        for (key, n) in lens {
            if n != k {
                return Err(bad(key, format!("has {n} entries for {k} datasets")));
            }
        }
        self.backbone.plan()?;
        Ok(())
    }

    pub fn suite(&self) -> Result<Suite> {
        let d = &self.datasets;
        let concept_names = crate::data::motion_concepts(d.concepts, d.speed, d.width);
        let mut specs = Vec::with_capacity(d.names.len());
        for (i, name) in d.names.iter().enumerate() {
            let class_concepts = parse_classes(&d.classes[i]).map_err(|m| Error::Parse {
                key: "datasets.classes".into(),
                message: format!("dataset `{name}`: {m}"),
            })?;
            let class_names = class_concepts
                .iter()
                .map(|set| {
                    set.iter()
                        .map(|&g| {
                            concept_names
                                .get(g)
                                .map_or_else(|| format!("motion{g}"), |c| c.name.clone())
                        })
                        .collect::<Vec<_>>()
                        .join("+")
                })
                .collect();
            specs.push(DatasetSpec {
                id: i,
                name: name.clone(),
                class_names,
                class_concepts,
                bias: BiasProfile {
                    background: d.background[i],
                    noise: d.noise[i],
                    decimation: d.decimation[i],
                    blob_scale: d.blob_scale[i],
                },
                train: d.train[i],
                test: d.test[i],
            });
        }
        let [t, h, w, c] = self.backbone.input;
        generate_synthetic_suite(SuiteSpec {
            seed: d.seed,
            concepts: d.concepts,
            clip_shape: [t, h, w, c],
            concept_speed: d.speed,
            concept_width: d.width,
            blobs: d.blobs,
            mixing: d.mixing,
            datasets: specs,
        })
    }
}

fn section<T: serde::de::DeserializeOwned + Default>(table: &toml::Table, name: &str) -> Result<T> {
    let Some(value) = table.get(name) else {
        return Ok(T::default());
    };
    value.clone().try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("invalid"))
            .map_or_else(|| name.to_string(), |f| format!("{name}.{f}"));
        Error::Parse {
            key: field,
            message: msg,
        }
    })
}

/// Applies one `section.key=value` override. The value is read as a TOML
/// value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let bad = |message: &str| Error::Parse {
        key: assignment.to_string(),
        message: message.to_string(),
    };
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad("expected section.key=value"))?;
    let (sec, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| bad("expected section.key=value"))?;
    if !SECTIONS.contains(&sec) {
        return Err(Error::Parse {
            key: sec.to_string(),
            message: "unknown section".into(),
        });
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(sec.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(t) = entry else {
        return Err(bad("section is not a table"));
    };
    t.insert(key.trim().to_string(), value);
    Ok(())
}

fn parse_classes(text: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    text.split(',')
        .map(|class| {
            class
                .split('+')
                .map(|g| g.trim().parse::<usize>().map_err(|e| format!("`{g}`: {e}")))
                .collect()
        })
        .collect()
}
