//! Experiment configuration: strict TOML with every default materialized.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusdom_core::backbone::{BackboneConfig, DEFAULT_MASK_RATE};
use fusdom_core::datagen::{CorpusSizes, DomainShape, PRESETS};
use fusdom_core::downstream::{FinetuneConfig, FinetuneMode};
use fusdom_core::head::MaskConfig;
use fusdom_core::tensor::AdamConfig;
use fusdom_core::trainer::{
    PretextOptions, StagePlan, Strategy, DEFAULT_BATCH_SIZE, DEFAULT_CP_EPOCHS, DEFAULT_CP_LR,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Experiment recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipe {
    /// CP on the target, fine-tune and evaluate on the target.
    R1,
    /// CP on the target, fine-tune and evaluate on the source.
    R2,
    /// Two-domain sequential CP in both orders, evaluated on all domains.
    R3,
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::R1, Recipe::R2, Recipe::R3];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::R1 => "r1",
            Recipe::R2 => "r2",
            Recipe::R3 => "r3",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r1" => Ok(Recipe::R1),
            "r2" => Ok(Recipe::R2),
            "r3" => Ok(Recipe::R3),
            other => Err(CliError::Config(format!(
                "unknown recipe `{other}` (expected r1, r2 or r3)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_source")]
    pub source: String,
    /// CP domain for r1 and r2.
    #[serde(default = "default_target")]
    pub target: String,
    /// The two CP domains of r3; both orders are run.
    #[serde(default = "default_stream")]
    pub stream: Vec<String>,
    #[serde(default)]
    pub shape: DomainShape,
    #[serde(default = "default_source_sizes")]
    pub source_sizes: CorpusSizes,
    #[serde(default = "default_target_sizes")]
    pub target_sizes: CorpusSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            target: default_target(),
            stream: default_stream(),
            shape: DomainShape::default(),
            source_sizes: default_source_sizes(),
            target_sizes: default_target_sizes(),
        }
    }
}

fn default_source() -> String {
    "source".into()
}

fn default_target() -> String {
    "shifted".into()
}

fn default_stream() -> Vec<String> {
    vec!["shifted".into(), "distant".into()]
}

fn default_source_sizes() -> CorpusSizes {
    CorpusSizes::SOURCE
}

fn default_target_sizes() -> CorpusSizes {
    CorpusSizes::TARGET
}

/// Source-domain pre-training of the initial model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub mask_teacher: bool,
    /// Hidden width of the FusDom head's feed-forward layer. Defaults to
    /// the backbone's `d_ffn`.
    pub head_ffn: Option<usize>,
}

impl Default for CpConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_CP_EPOCHS,
            lr: DEFAULT_CP_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            mask_rate: DEFAULT_MASK_RATE,
            mask_teacher: false,
            head_ffn: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSettings {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_recipes")]
    pub recipes: Vec<Recipe>,
    #[serde(default = "default_arms")]
    pub arms: Vec<Strategy>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<FinetuneMode>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub cp: CpConfig,
    #[serde(default)]
    pub finetune: FinetuneSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut config = Self {
            recipes: default_recipes(),
            arms: default_arms(),
            seeds: default_seeds(),
            modes: default_modes(),
            out: default_out(),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            cp: CpConfig::default(),
            finetune: FinetuneSettings::default(),
        };
        config.materialize();
        config
    }
}

fn default_recipes() -> Vec<Recipe> {
    Recipe::ALL.to_vec()
}

fn default_arms() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3]
}

fn default_modes() -> Vec<FinetuneMode> {
    FinetuneMode::ALL.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn check_unique<T: PartialEq + fmt::Debug>(what: &str, items: &[T]) -> Result<()> {
    check(!items.is_empty(), || format!("`{what}` must not be empty"))?;
    for (i, a) in items.iter().enumerate() {
        check(!items[..i].contains(a), || {
            format!("`{what}` lists {a:?} twice")
        })?;
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text. Unknown keys are rejected; omitted keys take
    /// their defaults, which are written back into the returned value.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.materialize();
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    fn materialize(&mut self) {
        self.cp.head_ffn.get_or_insert(self.backbone.d_ffn);
        self.recipes.sort();
        self.arms.sort();
    }

    pub fn validate(&self) -> Result<()> {
        check_unique("recipes", &self.recipes)?;
        check_unique("arms", &self.arms)?;
        check_unique("seeds", &self.seeds)?;
        check_unique("modes", &self.modes)?;
        self.backbone
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;

        let d = &self.data;
        for domain in std::iter::once(&d.source)
            .chain([&d.target])
            .chain(&d.stream)
        {
            check(PRESETS.contains(&domain.as_str()), || {
                format!("unknown domain preset `{domain}` (expected one of {PRESETS:?})")
            })?;
        }
        check(d.target != d.source, || {
            "`data.target` must differ from `data.source`".into()
        })?;
        check(
            d.stream.len() == 2 && d.stream[0] != d.stream[1] && !d.stream.contains(&d.source),
            || "`data.stream` must name two distinct non-source domains".into(),
        )?;
        check(d.shape.frame_dim == self.backbone.frame_dim, || {
            format!(
                "`data.shape.frame_dim` ({}) must equal `backbone.frame_dim` ({})",
                d.shape.frame_dim, self.backbone.frame_dim
            )
        })?;
        let longest = d.shape.max_tokens * d.shape.frames_per_token;
        check(longest <= self.backbone.max_len, || {
            format!(
                "utterances of up to {longest} frames exceed `backbone.max_len` {}",
                self.backbone.max_len
            )
        })?;
        for (name, sizes) in [
            ("source_sizes", &d.source_sizes),
            ("target_sizes", &d.target_sizes),
        ] {
            check(sizes.train > 0 && sizes.test > 0, || {
                format!("`data.{name}` needs nonempty train and test splits")
            })?;
        }
        check(d.source_sizes.pretrain > 0, || {
            "`data.source_sizes.pretrain` must be positive".into()
        })?;
        check(
            d.target_sizes.pretrain > 0 || self.cp.epochs == 0 || self.arms == [Strategy::NoCp],
            || "`data.target_sizes.pretrain` must be positive when CP arms train".into(),
        )?;

        for (name, lr, batch) in [
            ("pretrain", self.pretrain.lr, self.pretrain.batch_size),
            ("cp", self.cp.lr, self.cp.batch_size),
            ("finetune", self.finetune.lr, self.finetune.batch_size),
        ] {
            check(lr > 0.0 && lr.is_finite(), || {
                format!("`{name}.lr` must be positive, got {lr}")
            })?;
            check(batch > 0, || {
                format!("`{name}.batch_size` must be at least 1")
            })?;
        }
        check(self.cp.mask_rate > 0.0 && self.cp.mask_rate <= 1.0, || {
            format!(
                "`cp.mask_rate` must lie in (0, 1], got {}",
                self.cp.mask_rate
            )
        })?;
        check(self.cp.head_ffn != Some(0), || {
            "`cp.head_ffn` must be positive".into()
        })?;
        Ok(())
    }

    /// Domains whose corpora a run needs, source first.
    pub fn domains(&self) -> Vec<String> {
        let mut out = vec![self.data.source.clone()];
        let needed = self.recipes.iter().flat_map(|r| match r {
            Recipe::R1 | Recipe::R2 => vec![&self.data.target],
            Recipe::R3 => self.data.stream.iter().collect(),
        });
        for d in needed {
            if !out.contains(d) {
                out.push(d.clone());
            }
        }
        out
    }

    pub fn sizes_for(&self, domain: &str) -> CorpusSizes {
        if domain == self.data.source {
            self.data.source_sizes
        } else {
            self.data.target_sizes
        }
    }

    pub fn pretext_options(&self) -> PretextOptions {
        PretextOptions {
            mask: MaskConfig {
                mask_rate: self.cp.mask_rate,
                mask_teacher: self.cp.mask_teacher,
            },
            head_ffn: self.cp.head_ffn.unwrap_or(self.backbone.d_ffn),
            adam: AdamConfig::default(),
        }
    }

    pub fn pretrain_plan(&self, seed: u64) -> StagePlan {
        StagePlan {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            ..StagePlan::new(self.data.source.clone(), Strategy::VanillaCp, seed)
        }
    }

    pub fn cp_plan(&self, domain: &str, strategy: Strategy, seed: u64) -> StagePlan {
        StagePlan {
            epochs: self.cp.epochs,
            batch_size: self.cp.batch_size,
            lr: self.cp.lr,
            ..StagePlan::new(domain, strategy, seed)
        }
    }

    pub fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.finetune.lr,
            epochs: self.finetune.epochs,
            batch_size: self.finetune.batch_size,
            seed,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
