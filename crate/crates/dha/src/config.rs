//! Run configuration: a TOML document with a strict schema (unknown keys
//! rejected), validated before any data is touched, plus a SHA-256 digest
//! over the training-relevant subset that ties checkpoints to the config
//! that produced them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cf::{CfHyperparams, ConfidenceMode};
use crate::data::SynthConfig;
use crate::error::{DhaError, Result};
use crate::math::ActivationKind;

/// Where a component's input rows come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComponentSource {
    /// User demographics vectorized from the dataset (user side only).
    BuiltinDemographics,
    /// Item content vectorized from the dataset (item side only).
    BuiltinContent,
    /// Rows (users) or columns (items) of the training interaction matrix.
    BuiltinRatings,
    /// External embedding table file.
    Embeddings(PathBuf),
    /// Token sequence file.
    Sequences(PathBuf),
    /// Side vectors from the synthetic generator.
    SyntheticSide,
    /// Sequences from the synthetic generator (user side only).
    SyntheticSequences,
}

impl ComponentSource {
    fn parse(s: &str) -> Result<Self> {
        let src = match s {
            "builtin:demographics" => ComponentSource::BuiltinDemographics,
            "builtin:content" => ComponentSource::BuiltinContent,
            "builtin:ratings" => ComponentSource::BuiltinRatings,
            "synthetic:side" => ComponentSource::SyntheticSide,
            "synthetic:sequences" => ComponentSource::SyntheticSequences,
            other => {
                if let Some(p) = other.strip_prefix("embeddings:") {
                    ComponentSource::Embeddings(PathBuf::from(p))
                } else if let Some(p) = other.strip_prefix("sequences:") {
                    ComponentSource::Sequences(PathBuf::from(p))
                } else {
                    return Err(DhaError::ConfigInvalid(format!(
                        "unknown component source '{other}' (expected builtin:demographics, \
                         builtin:content, builtin:ratings, embeddings:<path>, sequences:<path>, \
                         synthetic:side, or synthetic:sequences)"
                    )));
                }
            }
        };
        Ok(src)
    }
}

/// One `[[components.user]]` / `[[components.item]]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    /// "static" or "sequential".
    pub kind: String,
    pub source: String,
    // static-only knobs
    pub layers: Option<usize>,
    pub mid_dim: Option<usize>,
    pub width_increment: Option<usize>,
    pub activation: Option<String>,
    pub output_activation: Option<String>,
    pub corruption: Option<f64>,
    // sequential-only knobs
    pub time_steps: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
}

/// A validated component: everything except the data-dependent input width
/// (static) or vocabulary size (sequential), which the pipeline fills in
/// after loading data.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentPlan {
    Static {
        source: ComponentSource,
        layers: usize,
        width_increment: usize,
        activation: ActivationKind,
        output_activation: ActivationKind,
        corruption: f64,
    },
    Sequential {
        source: ComponentSource,
        time_steps: usize,
        embedding_dim: usize,
        hidden_dim: usize,
    },
}

impl ComponentPlan {
    pub fn source(&self) -> &ComponentSource {
        match self {
            ComponentPlan::Static { source, .. } => source,
            ComponentPlan::Sequential { source, .. } => source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentsConfig {
    #[serde(default)]
    pub user: Vec<ComponentConfig>,
    #[serde(default)]
    pub item: Vec<ComponentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// "synthetic", "movielens-100k", or "triples".
    pub format: String,
    /// Dataset directory (movielens-100k) or ratings file (triples).
    pub path: Option<PathBuf>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// Holdout seed; defaults to the run seed.
    pub split_seed: Option<u64>,
    /// Generator knobs, required when format = "synthetic".
    pub synthetic: Option<SynthConfig>,
}

fn default_split_ratio() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared latent / factor dimensionality.
    pub d: usize,
    #[serde(default = "default_fusion_activation")]
    pub fusion_activation: String,
    #[serde(default)]
    pub fusion_extra_layer: bool,
}

fn default_fusion_activation() -> String {
    "sigmoid".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub lambda_f: f64,
    #[serde(default = "one")]
    pub lambda_u: f64,
    #[serde(default = "one")]
    pub lambda_v: f64,
    #[serde(default = "one")]
    pub lambda_m: f64,
    #[serde(default = "one")]
    pub lambda_n: f64,
    pub lambda_w: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn one() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    40.0
}

fn default_mode() -> String {
    "implicit".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "five")]
    pub alternations: u32,
    #[serde(default = "five")]
    pub epochs: u32,
    #[serde(default = "five")]
    pub pretrain_epochs: u32,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub user_batch: usize,
    #[serde(default = "default_batch")]
    pub item_batch: usize,
}

fn five() -> u32 {
    5
}

fn default_batch() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_m_values")]
    pub m_values: Vec<usize>,
}

fn default_m_values() -> Vec<usize> {
    vec![10, 50, 100]
}

/// Cartesian product swept by the grid command; absent axes default to the
/// single configured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rate: Option<Vec<f64>>,
    pub lambda_f: Option<Vec<f64>>,
    pub lambda_w: Option<Vec<f64>>,
    pub corruption: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub components: ComponentsConfig,
    pub hyperparams: HyperConfig,
    pub schedule: ScheduleConfig,
    #[serde(default = "default_eval")]
    pub eval: EvalConfig,
    pub grid: Option<GridConfig>,
}

fn default_eval() -> EvalConfig {
    EvalConfig {
        m_values: default_m_values(),
    }
}

/// The subset of the config that changes training results; [eval] and
/// [grid] are excluded so re-evaluating with different M lists doesn't
/// orphan existing checkpoints.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    data: &'a DataConfig,
    model: &'a ModelConfig,
    components: &'a ComponentsConfig,
    hyperparams: &'a HyperConfig,
    schedule: &'a ScheduleConfig,
}

impl RunConfig {
    /// Parse and validate a TOML config file.
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(DhaError::MissingFile(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Parse and validate a TOML config string.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| DhaError::ConfigInvalid(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.data.format.as_str() {
            "synthetic" => {
                if self.data.synthetic.is_none() {
                    return Err(DhaError::ConfigInvalid(
                        "format = \"synthetic\" needs a [data.synthetic] table".into(),
                    ));
                }
            }
            "movielens-100k" | "triples" => {
                if self.data.path.is_none() {
                    return Err(DhaError::ConfigInvalid(format!(
                        "format = \"{}\" needs data.path",
                        self.data.format
                    )));
                }
            }
            other => {
                return Err(DhaError::ConfigInvalid(format!(
                    "unknown data format '{other}' (expected synthetic, movielens-100k, or triples)"
                )));
            }
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(DhaError::RatioOutOfRange(self.data.split_ratio));
        }
        if self.model.d == 0 {
            return Err(DhaError::ConfigInvalid("model.d must be >= 1".into()));
        }
        self.model
            .fusion_activation
            .parse::<ActivationKind>()
            .map_err(|_| {
                DhaError::ConfigInvalid(format!(
                    "unknown fusion activation '{}'",
                    self.model.fusion_activation
                ))
            })?;
        self.hyperparams()?.validate()?;
        if self.components.user.is_empty() || self.components.item.is_empty() {
            return Err(DhaError::ConfigInvalid(
                "each side needs at least one [[components.<side>]] entry".into(),
            ));
        }
        self.component_plans(SideName::User)?;
        self.component_plans(SideName::Item)?;
        if self.eval.m_values.is_empty() || self.eval.m_values.contains(&0) {
            return Err(DhaError::ConfigInvalid(
                "eval.m_values must be non-empty positive integers".into(),
            ));
        }
        if self.schedule.alternations == 0 {
            return Err(DhaError::ConfigInvalid("alternations must be >= 1".into()));
        }
        if !(self.schedule.learning_rate > 0.0 && self.schedule.learning_rate.is_finite()) {
            return Err(DhaError::ConfigInvalid(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.schedule.user_batch == 0 || self.schedule.item_batch == 0 {
            return Err(DhaError::ConfigInvalid("batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Result<CfHyperparams> {
        let mode = match self.hyperparams.mode.as_str() {
            "implicit" => ConfidenceMode::Implicit,
            "explicit" => ConfidenceMode::Explicit,
            other => {
                return Err(DhaError::ConfigInvalid(format!(
                    "unknown confidence mode '{other}' (expected implicit or explicit)"
                )));
            }
        };
        Ok(CfHyperparams {
            d: self.model.d,
            lambda_f: self.hyperparams.lambda_f,
            lambda_u: self.hyperparams.lambda_u,
            lambda_v: self.hyperparams.lambda_v,
            lambda_m: self.hyperparams.lambda_m,
            lambda_n: self.hyperparams.lambda_n,
            lambda_w: self.hyperparams.lambda_w,
            alpha: self.hyperparams.alpha,
            mode,
        })
    }

    pub fn fusion_activation(&self) -> ActivationKind {
        self.model
            .fusion_activation
            .parse()
            .expect("checked in validate")
    }

    /// Resolve one side's component tables into validated plans.
    pub fn component_plans(&self, side: SideName) -> Result<Vec<ComponentPlan>> {
        let (list, side_str) = match side {
            SideName::User => (&self.components.user, "user"),
            SideName::Item => (&self.components.item, "item"),
        };
        let mut plans = Vec::with_capacity(list.len());
        for (i, c) in list.iter().enumerate() {
            let at = format!("components.{side_str}[{i}]");
            let source = ComponentSource::parse(&c.source)?;
            match source {
                ComponentSource::BuiltinDemographics if side == SideName::Item => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "{at}: builtin:demographics is a user-side source"
                    )));
                }
                ComponentSource::BuiltinContent if side == SideName::User => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "{at}: builtin:content is an item-side source"
                    )));
                }
                ComponentSource::SyntheticSequences if side == SideName::Item => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "{at}: synthetic:sequences is a user-side source"
                    )));
                }
                _ => {}
            }
            let plan = match c.kind.as_str() {
                "static" => {
                    if matches!(
                        source,
                        ComponentSource::Sequences(_) | ComponentSource::SyntheticSequences
                    ) {
                        return Err(DhaError::ConfigInvalid(format!(
                            "{at}: a static component cannot use a sequence source"
                        )));
                    }
                    for (key, set) in [
                        ("time_steps", c.time_steps.is_some()),
                        ("embedding_dim", c.embedding_dim.is_some()),
                        ("hidden_dim", c.hidden_dim.is_some()),
                    ] {
                        if set {
                            return Err(DhaError::ConfigInvalid(format!(
                                "{at}: '{key}' only applies to sequential components"
                            )));
                        }
                    }
                    if let Some(mid) = c.mid_dim {
                        if mid != self.model.d {
                            return Err(DhaError::ConfigInvalid(format!(
                                "{at}: mid_dim {mid} must equal model.d {} (the shared latent width)",
                                self.model.d
                            )));
                        }
                    }
                    let activation: ActivationKind = c
                        .activation
                        .as_deref()
                        .unwrap_or("sigmoid")
                        .parse()
                        .map_err(|_| {
                            DhaError::ConfigInvalid(format!(
                                "{at}: unknown activation '{}'",
                                c.activation.as_deref().unwrap_or_default()
                            ))
                        })?;
                    let output_activation: ActivationKind = c
                        .output_activation
                        .as_deref()
                        .unwrap_or("identity")
                        .parse()
                        .map_err(|_| {
                            DhaError::ConfigInvalid(format!(
                                "{at}: unknown output activation '{}'",
                                c.output_activation.as_deref().unwrap_or_default()
                            ))
                        })?;
                    let corruption = c.corruption.unwrap_or(0.3);
                    if !(0.0..=1.0).contains(&corruption) {
                        return Err(DhaError::RateOutOfRange(corruption));
                    }
                    ComponentPlan::Static {
                        source,
                        layers: c.layers.unwrap_or(2),
                        width_increment: c.width_increment.unwrap_or(1),
                        activation,
                        output_activation,
                        corruption,
                    }
                }
                "sequential" => {
                    if !matches!(
                        source,
                        ComponentSource::Sequences(_) | ComponentSource::SyntheticSequences
                    ) {
                        return Err(DhaError::ConfigInvalid(format!(
                            "{at}: a sequential component needs a sequences:<path> or \
                             synthetic:sequences source"
                        )));
                    }
                    for (key, set) in [
                        ("layers", c.layers.is_some()),
                        ("mid_dim", c.mid_dim.is_some()),
                        ("width_increment", c.width_increment.is_some()),
                        ("activation", c.activation.is_some()),
                        ("output_activation", c.output_activation.is_some()),
                        ("corruption", c.corruption.is_some()),
                    ] {
                        if set {
                            return Err(DhaError::ConfigInvalid(format!(
                                "{at}: '{key}' only applies to static components"
                            )));
                        }
                    }
                    if let Some(h) = c.hidden_dim {
                        if h != self.model.d {
                            return Err(DhaError::ConfigInvalid(format!(
                                "{at}: hidden_dim {h} must equal model.d {} (the shared latent width)",
                                self.model.d
                            )));
                        }
                    }
                    let time_steps = c.time_steps.unwrap_or(8);
                    if time_steps == 0 {
                        return Err(DhaError::ConfigInvalid(format!(
                            "{at}: time_steps must be >= 1"
                        )));
                    }
                    ComponentPlan::Sequential {
                        source,
                        time_steps,
                        embedding_dim: c.embedding_dim.unwrap_or(self.model.d),
                        hidden_dim: self.model.d,
                    }
                }
                other => {
                    return Err(DhaError::ConfigInvalid(format!(
                        "{at}: unknown kind '{other}' (expected static or sequential)"
                    )));
                }
            };
            plans.push(plan);
        }
        // Synthetic sources only make sense with the synthetic format.
        if self.data.format != "synthetic" {
            for (i, p) in plans.iter().enumerate() {
                if matches!(
                    p.source(),
                    ComponentSource::SyntheticSide | ComponentSource::SyntheticSequences
                ) {
                    return Err(DhaError::ConfigInvalid(format!(
                        "components.{side_str}[{i}]: synthetic sources need format = \"synthetic\""
                    )));
                }
            }
        }
        // Demographics/content need the movielens loader.
        if self.data.format != "movielens-100k" {
            for (i, p) in plans.iter().enumerate() {
                if matches!(
                    p.source(),
                    ComponentSource::BuiltinDemographics | ComponentSource::BuiltinContent
                ) {
                    return Err(DhaError::ConfigInvalid(format!(
                        "components.{side_str}[{i}]: builtin vectorizer sources need \
                         format = \"movielens-100k\""
                    )));
                }
            }
        }
        Ok(plans)
    }

    /// Seed for the holdout split (defaults to the run seed).
    pub fn split_seed(&self) -> u64 {
        self.data.split_seed.unwrap_or(self.seed)
    }

    /// SHA-256 over the training-relevant subset, serialized as JSON with
    /// struct-order keys (deterministic for a fixed schema version).
    pub fn digest(&self) -> [u8; 32] {
        let view = DigestView {
            seed: self.seed,
            data: &self.data,
            model: &self.model,
            components: &self.components,
            hyperparams: &self.hyperparams,
            schedule: &self.schedule,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(json.as_bytes()));
        out
    }

    /// Grid axes with absent ones collapsed to the configured value.
    pub fn grid_axes(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let g = self.grid.clone().unwrap_or_default();
        let single = |v: f64| vec![v];
        (
            g.learning_rate
                .unwrap_or_else(|| single(self.schedule.learning_rate)),
            g.lambda_f
                .unwrap_or_else(|| single(self.hyperparams.lambda_f)),
            g.lambda_w
                .unwrap_or_else(|| single(self.hyperparams.lambda_w)),
            g.corruption.unwrap_or_else(|| {
                let rates: BTreeSet<u64> = self
                    .components
                    .user
                    .iter()
                    .chain(&self.components.item)
                    .filter_map(|c| c.corruption)
                    .map(f64::to_bits)
                    .collect();
                if rates.len() == 1 {
                    vec![f64::from_bits(*rates.iter().next().unwrap())]
                } else {
                    vec![0.3]
                }
            }),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SideName {
    User,
    Item,
}
