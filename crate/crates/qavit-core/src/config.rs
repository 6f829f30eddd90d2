//! Run configuration: strict JSON schema (unknown keys rejected), semantic
//! validation before any work, and the canonical digest recorded in every
//! output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{GridWorldSpec, QuestionForm};
use crate::error::{Error, Result};
use crate::fusion::{plan_fusion, FusionMode, FusionPlan};
use crate::head::{HeadMode, LoraConfig, PoolKind};
use crate::question::TextSource;
use crate::train::{DatasetSpec, TrainConfig};
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    Caption,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    #[serde(rename = "L", default = "d_fusion_l")]
    pub l: usize,
    /// Explicit layer set for custom mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

fn d_fusion_l() -> usize {
    2
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { mode: FusionMode::Late, l: 2, layers: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    #[serde(default = "d_text_source")]
    pub source: TextSource,
    #[serde(default = "d_text_width")]
    pub width: usize,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_text_heads")]
    pub heads: usize,
}

fn d_text_source() -> TextSource {
    TextSource::TinyEncoder
}
fn d_text_width() -> usize {
    32
}
fn d_k_max() -> usize {
    32
}
fn d_text_heads() -> usize {
    2
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { source: d_text_source(), width: 32, k_max: 32, heads: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "d_head_mode")]
    pub mode: HeadMode,
    #[serde(default = "d_pool")]
    pub pool: PoolKind,
    #[serde(default = "d_d2")]
    pub d2: usize,
}

fn d_head_mode() -> HeadMode {
    HeadMode::VisualOnly
}
fn d_pool() -> PoolKind {
    PoolKind::Mean
}
fn d_d2() -> usize {
    128
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { mode: d_head_mode(), pool: d_pool(), d2: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ViTConfig::desk")]
    pub vit: ViTConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub lora: LoraConfig,
    /// Prompt-tuning control: feed a fixed learned prompt instead of the
    /// question.
    #[serde(default)]
    pub pt: bool,
    #[serde(default = "d_true")]
    pub freeze_backbone: bool,
}

fn d_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: ViTConfig::desk(),
            fusion: FusionConfig::default(),
            text: TextConfig::default(),
            head: HeadConfig::default(),
            lora: LoraConfig::default(),
            pt: false,
            freeze_backbone: true,
        }
    }
}

impl ModelConfig {
    /// Small fast configuration used by test suites.
    pub fn desk_test() -> Self {
        ModelConfig {
            vit: ViTConfig { image_size: 16, patch_size: 8, channels: 3, depth: 4, width: 32, heads: 4, mlp_ratio: 2 },
            fusion: FusionConfig { mode: FusionMode::Late, l: 2, layers: None },
            text: TextConfig { source: TextSource::TinyEncoder, width: 16, k_max: 16, heads: 2 },
            head: HeadConfig { mode: HeadMode::VisualOnly, pool: PoolKind::Mean, d2: 32 },
            lora: LoraConfig::default(),
            pt: false,
            freeze_backbone: true,
        }
    }

    pub fn fusion_plan(&self) -> Result<FusionPlan> {
        match self.fusion.mode {
            FusionMode::Custom => {
                let layers = self
                    .fusion
                    .layers
                    .as_ref()
                    .ok_or_else(|| Error::Config("custom fusion requires `layers`".into()))?;
                FusionPlan::custom(layers, self.vit.depth)
            }
            mode => plan_fusion(mode, self.vit.depth, self.fusion.l),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.fusion_plan()?;
        if self.text.width == 0 || self.text.heads == 0 || self.text.width % self.text.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} must be positive and divisible by heads {}",
                self.text.width, self.text.heads
            )));
        }
        if self.text.k_max == 0 {
            return Err(Error::Config("k_max must be positive".into()));
        }
        if self.head.d2 == 0 {
            return Err(Error::Config("head d2 must be positive".into()));
        }
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::Config("lora dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub grid: GridWorldSpec,
    #[serde(default = "d_forms")]
    pub question_forms: Vec<QuestionForm>,
    /// Proportional-sampling mixture, defaulting to the 2.3 : 0.7
    /// VQA-to-caption composition.
    #[serde(default = "d_mixture")]
    pub mixture: Vec<DatasetSpec>,
    #[serde(default = "d_eval_qa")]
    pub eval_qa: usize,
    #[serde(default = "d_eval_caption")]
    pub eval_caption: usize,
}

fn d_forms() -> Vec<QuestionForm> {
    vec![QuestionForm::ColorAt]
}

fn d_mixture() -> Vec<DatasetSpec> {
    vec![
        DatasetSpec { id: "grid_qa".into(), size: 2_300_000.0, task: TaskKind::Qa },
        DatasetSpec { id: "grid_caption".into(), size: 700_000.0, task: TaskKind::Caption },
    ]
}

fn d_eval_qa() -> usize {
    2000
}
fn d_eval_caption() -> usize {
    500
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid: GridWorldSpec::default(),
            question_forms: d_forms(),
            mixture: d_mixture(),
            eval_qa: d_eval_qa(),
            eval_caption: d_eval_caption(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.question_forms.is_empty() {
            return Err(Error::Config("at least one question form required".into()));
        }
        if self
            .question_forms
            .iter()
            .any(|f| matches!(f, QuestionForm::ColorAt | QuestionForm::GlyphAt))
        {
            self.grid.validate_balanced()?;
        }
        if self.mixture.is_empty() {
            return Err(Error::EmptyMixture);
        }
        if self.mixture.iter().any(|d| d.size <= 0.0) {
            return Err(Error::Config("mixture sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate; unknown keys and semantic violations (e.g.
    /// fusion L above the depth) are rejected before any work happens.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("invalid config JSON at line {} column {}: {}", e.line(), e.column(), e))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&canon);
        hash.iter().map(|b| format!("{:02x}", b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::desk_test().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"bogus_key": 1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fusion_spelled_with_capital_l() {
        let cfg = RunConfig::from_json(r#"{"model": {"fusion": {"mode": "late", "L": 3}}}"#).unwrap();
        assert_eq!(cfg.model.fusion.l, 3);
        assert_eq!(cfg.model.fusion_plan().unwrap().indices, vec![3, 4, 5]);
    }

    #[test]
    fn fusion_l_above_depth_rejected_at_validation() {
        let err = RunConfig::from_json(r#"{"model": {"fusion": {"mode": "late", "L": 7}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn digest_changes_with_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), RunConfig { seed: 1, ..RunConfig::default() }.digest());
    }

    #[test]
    fn malformed_json_reports_line_and_column() {
        let err = RunConfig::from_json("{\n  \"seed\": oops\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{}", msg);
        assert!(msg.contains("column"), "{}", msg);
    }
}
