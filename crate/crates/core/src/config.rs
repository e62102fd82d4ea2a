//! Run configuration: sectioned `key = value` text with defaults for every
//! field, command-line overrides, validation and a content digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CmidError, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CMID_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Fill masked patches with the per-channel view mean and add the
    /// learnable mask token to the stem output.
    MeanAdd,
    /// Zero the masked patches (token replacement ablation).
    ZeroReplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `scale_min`/`scale_max` bound the crop area fraction.
    Area,
    /// `scale_min`/`scale_max` bound the crop side-length fraction.
    Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMatching {
    /// The N globally smallest entries of the distance matrix.
    GlobalTopN,
    /// Greedy matching in which no feature vector is used twice.
    Bipartite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueDenominator {
    /// Positive logit appears alongside the queue logits.
    WithPositive,
    /// Only the queue logits form the denominator.
    QueueOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossEntropyOrder {
    /// `-q log p`: the gradient-free teacher distribution is the target.
    TeacherTarget,
    /// `-p log q`, operands in the written order.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adan,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_size: usize,
    pub channels: usize,
    pub prefetch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            channels: 3,
            prefetch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            mask_ratio: 0.6,
            mask_strategy: MaskStrategy::MeanAdd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_mode: ScaleMode,
    /// Multiplier on the teacher's color jitter, grayscale and blur recipe.
    pub photometric_strength: f64,
    /// Apply the photometric recipe to the student view before masking.
    pub student_photometric: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.5,
            scale_max: 1.0,
            scale_mode: ScaleMode::Area,
            photometric_strength: 1.0,
            student_photometric: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_stride: usize,
    pub stage_strides: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub global_hidden: usize,
    pub global_dim: usize,
    pub local_hidden: usize,
    pub proto_dim: usize,
    pub num_prototypes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_stride: 4,
            stage_strides: vec![1, 2, 2, 2],
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 1,
            global_hidden: 2048,
            global_dim: 128,
            local_hidden: 2048,
            proto_dim: 256,
            num_prototypes: 2048,
        }
    }
}

impl ModelConfig {
    pub fn total_stride(&self) -> usize {
        self.stem_stride * self.stage_strides.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub tau: f64,
    pub queue_size: usize,
    pub queue_denominator: QueueDenominator,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            queue_size: 65536,
            queue_denominator: QueueDenominator::WithPositive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub num_matched_pairs: usize,
    pub tau_s: f64,
    pub tau_t: f64,
    pub matching: PairMatching,
    pub cross_entropy: CrossEntropyOrder,
    /// Subtract a running mean from teacher logits before the softmax.
    pub center_teacher: bool,
    pub center_momentum: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            num_matched_pairs: 20,
            tau_s: 0.2,
            tau_t: 0.07,
            matching: PairMatching::GlobalTopN,
            cross_entropy: CrossEntropyOrder::TeacherTarget,
            center_teacher: false,
            center_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchToggles {
    pub mim: bool,
    pub global: bool,
    pub local: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            mim: true,
            global: true,
            local: true,
        }
    }
}

/// Branch weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mim: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mim: 1.0,
            lambda_global: 1.0,
            lambda_local: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_mim: f64, lambda_global: f64, lambda_local: f64) -> Self {
        Self {
            lambda_mim,
            lambda_global,
            lambda_local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub ema_base: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub deterministic: bool,
    /// Require `queue_size` to be a multiple of `batch_size`.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            base_lr: 0.003125,
            final_lr: 1e-6,
            weight_decay: 0.02,
            warmup_epochs: 5,
            ema_base: 0.996,
            optimizer: OptimizerKind::Adan,
            grad_clip: 0.0,
            checkpoint_every: 0,
            seed: 0,
            deterministic: true,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub global: GlobalConfig,
    pub local: LocalConfig,
    pub branches: BranchToggles,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Side length of the square patch-mask grid.
    pub fn patch_grid(&self) -> usize {
        self.data.image_size / self.mask.patch_size
    }

    /// Side length of the final feature map.
    pub fn feature_grid(&self) -> usize {
        self.data.image_size / self.model.total_stride()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Applies `key = value` overrides. Keys are either `section.key` or a
    /// bare key that names exactly one field across all sections.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).expect("run config always serializes");
        for (key, raw) in overrides {
            let key = key.trim_start_matches("--").replace('-', "_");
            let (section, field) = resolve_key(&root, &key)?;
            let value = parse_value(raw);
            root.get_mut(&section)
                .and_then(|s| s.as_table_mut())
                .expect("resolved section exists")
                .insert(field, value);
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| CmidError::validation("override", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        fn v(field: &str, message: impl Into<String>) -> CmidError {
            CmidError::validation(field, message)
        }
        let d = &self.data;
        let m = &self.mask;
        if d.image_size == 0 {
            return Err(v("image_size", "must be positive"));
        }
        if d.channels != 1 && d.channels != 3 {
            return Err(v("channels", "must be 1 or 3"));
        }
        if m.patch_size == 0 || d.image_size % m.patch_size != 0 {
            return Err(v("patch_size", format!("must divide image_size {}", d.image_size)));
        }
        if !(m.mask_ratio > 0.0 && m.mask_ratio < 1.0) {
            return Err(v("mask_ratio", "must lie in (0, 1)"));
        }
        let a = &self.augment;
        if !(a.scale_min > 0.0 && a.scale_min <= 1.0) {
            return Err(v("scale_min", "must lie in (0, 1]"));
        }
        if !(a.scale_max >= a.scale_min && a.scale_max <= 1.0) {
            return Err(v("scale_max", "must lie in [scale_min, 1]"));
        }
        if !(a.photometric_strength >= 0.0 && a.photometric_strength.is_finite()) {
            return Err(v("photometric_strength", "must be finite and nonnegative"));
        }
        let md = &self.model;
        if md.stem_stride == 0 || md.stage_strides.iter().any(|&s| s == 0) {
            return Err(v("stage_strides", "strides must be positive"));
        }
        if md.stage_strides.is_empty() || md.stage_strides.len() != md.stage_widths.len() {
            return Err(v("stage_widths", "need one width per stage stride"));
        }
        if md.stage_widths.iter().any(|&w| w == 0) || md.blocks_per_stage == 0 {
            return Err(v("stage_widths", "widths and block counts must be positive"));
        }
        if d.image_size % md.total_stride() != 0 {
            return Err(v(
                "stage_strides",
                format!("total stride {} must divide image_size", md.total_stride()),
            ));
        }
        if m.patch_size % md.stem_stride != 0 {
            return Err(v("patch_size", "must be a multiple of stem_stride"));
        }
        for (name, value) in [
            ("global_hidden", md.global_hidden),
            ("global_dim", md.global_dim),
            ("local_hidden", md.local_hidden),
            ("proto_dim", md.proto_dim),
            ("num_prototypes", md.num_prototypes),
            ("queue_size", self.global.queue_size),
            ("num_matched_pairs", self.local.num_matched_pairs),
            ("batch_size", self.train.batch_size),
        ] {
            if value == 0 {
                return Err(v(name, "must be positive"));
            }
        }
        for (name, value) in [
            ("tau", self.global.tau),
            ("tau_s", self.local.tau_s),
            ("tau_t", self.local.tau_t),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(v(name, "temperature must be finite and positive"));
            }
        }
        if !(self.local.center_momentum >= 0.0 && self.local.center_momentum < 1.0) {
            return Err(v("center_momentum", "must lie in [0, 1)"));
        }
        let cells = self.feature_grid() * self.feature_grid();
        if self.local.num_matched_pairs > cells * cells {
            return Err(v(
                "num_matched_pairs",
                format!("exceeds the {} available position pairs", cells * cells),
            ));
        }
        let w = &self.weights;
        for (name, value) in [
            ("lambda_mim", w.lambda_mim),
            ("lambda_global", w.lambda_global),
            ("lambda_local", w.lambda_local),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(v(name, "must be finite and nonnegative"));
            }
        }
        let t = &self.train;
        if !(t.ema_base > 0.0 && t.ema_base < 1.0) {
            return Err(v("ema_base", "must lie in (0, 1)"));
        }
        if !(t.base_lr >= 0.0 && t.final_lr >= 0.0 && t.final_lr <= t.base_lr) {
            return Err(v("final_lr", "need 0 <= final_lr <= base_lr"));
        }
        if !(t.weight_decay >= 0.0 && t.grad_clip >= 0.0) {
            return Err(v("weight_decay", "weight_decay and grad_clip must be nonnegative"));
        }
        if t.strict && self.global.queue_size % t.batch_size != 0 {
            return Err(v(
                "queue_size",
                format!(
                    "{} is not a multiple of batch_size {}",
                    self.global.queue_size, t.batch_size
                ),
            ));
        }
        Ok(())
    }
}

/// Loads a config file (or defaults when `path` is `None`) and applies
/// overrides last.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CmidError::io(p, e))?;
            let cfg: RunConfig = toml::from_str(&text).map_err(|e| parse_error(&text, &e))?;
            cfg
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Hex SHA-256 over the canonical serialization.
pub fn config_digest(cfg: &RunConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_text().as_bytes());
    hex::encode(hasher.finalize())
}

fn parse_error(text: &str, err: &toml::de::Error) -> CmidError {
    let line = err
        .span()
        .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    CmidError::ConfigParse {
        line,
        message: err.message().to_string(),
    }
}

fn resolve_key(root: &toml::Table, key: &str) -> Result<(String, String)> {
    if let Some((section, field)) = key.split_once('.') {
        let known = root
            .get(section)
            .and_then(|s| s.as_table())
            .is_some_and(|t| t.contains_key(field));
        return if known {
            Ok((section.to_string(), field.to_string()))
        } else {
            Err(CmidError::validation(key, "unknown config key"))
        };
    }
    let hits: Vec<&String> = root
        .iter()
        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
        .map(|(k, _)| k)
        .collect();
    match hits.as_slice() {
        [section] => Ok((section.to_string(), key.to_string())),
        [] => Err(CmidError::validation(key, "unknown config key")),
        _ => Err(CmidError::validation(key, "ambiguous key, use section.key")),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
