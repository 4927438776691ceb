//! The run configuration: one JSON document covering every stage, with CLI
//! flags layered on top. The merged result is persisted in the run directory
//! and every later invocation must match it (or pass `--force`).

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mclearn_core::metatrain::MetaConfig;
use mclearn_core::model::{ModelConfig, OptKind};
use mclearn_core::seed::derive_seed;
use mclearn_core::synth::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Synthetic data shape. Its `seed` field is overwritten from the global
    /// seed when the config is finalized.
    pub synth: SyntheticConfig,
    /// Translator dimensions (vocabulary size is determined by the data).
    pub model: ModelSection,
    /// Scoring-LM dimensions.
    pub lm_model: ModelSection,
    pub pretrain: PretrainSection,
    pub lm: LmSection,
    pub scoring: ScoringSection,
    pub curriculum: CurriculumSection,
    pub meta: MetaSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SyntheticConfig::default(),
            model: ModelSection::default(),
            lm_model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            lm: LmSection::default(),
            scoring: ScoringSection::default(),
            curriculum: CurriculumSection::default(),
            meta: MetaSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Model dimensions without a vocabulary size; the size comes from the built
/// vocabulary at pipeline time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_hidden: 128,
            max_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_hidden: self.d_hidden,
            max_len: self.max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Warm-up steps of the inverse-square-root schedule.
    pub warmup: usize,
    pub lr_factor: f64,
    pub patience: usize,
    /// Sentence-length ceiling applied to training corpora (general and
    /// meta-train pools); evaluation corpora are never filtered.
    pub max_len_filter: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            max_epochs: 30,
            batch_size: 16,
            warmup: 200,
            lr_factor: 1.0,
            patience: 3,
            max_len_filter: 175,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmSection {
    /// From-scratch learning rate for the general LM.
    pub lr: f64,
    /// Fine-tuning rate for the per-domain LMs derived from it.
    pub finetune_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            lr: 5e-4,
            finetune_lr: 5e-5,
            max_epochs: 40,
            batch_size: 16,
            patience: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringSection {
    /// Negates the curriculum ranking key, for corpora where low raw
    /// divergence marks the domain-specific end. Stored scores are unaffected.
    pub flip_sign: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSection {
    pub meta_steps: usize,
    pub tasks_per_step: usize,
    /// Source-token budget per support set; also sizes the meta-test support
    /// split used for fine-tuning.
    pub support_tokens: usize,
    /// Source-token budget per query set; also sizes the meta-test query
    /// split used for evaluation.
    pub query_tokens: usize,
    pub window_width: f64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            meta_steps: 10,
            tasks_per_step: 160,
            support_tokens: 8_000,
            query_tokens: 16_000,
            window_width: 0.5,
        }
    }
}

impl CurriculumSection {
    pub fn to_curriculum_config(&self) -> mclearn_core::curriculum::CurriculumConfig {
        mclearn_core::curriculum::CurriculumConfig {
            meta_steps: self.meta_steps,
            tasks_per_step: self.tasks_per_step,
            support_budget: self.support_tokens,
            query_budget: self.query_tokens,
            window_width: self.window_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaSection {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub inner_opt: OptKind,
    pub outer_opt: OptKind,
    pub clip_norm: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        MetaSection {
            inner_lr: m.inner_lr,
            outer_lr: m.outer_lr,
            inner_steps: m.inner_steps,
            inner_opt: m.inner_opt,
            outer_opt: m.outer_opt,
            clip_norm: m.clip_norm,
        }
    }
}

impl MetaSection {
    pub fn to_meta_config(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            inner_steps: self.inner_steps,
            inner_opt: self.inner_opt,
            outer_opt: self.outer_opt,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 20,
            lr: 5e-5,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub beam: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { beam: 5 }
    }
}

/// Flag-level overrides; `None` leaves the config value untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub flip_sign: Option<bool>,
    pub support_tokens: Option<usize>,
    pub query_tokens: Option<usize>,
    pub tasks: Option<usize>,
    pub meta_steps: Option<usize>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub epochs: Option<usize>,
    pub beam: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.flip_sign {
            self.scoring.flip_sign = v;
        }
        if let Some(v) = o.support_tokens {
            self.curriculum.support_tokens = v;
        }
        if let Some(v) = o.query_tokens {
            self.curriculum.query_tokens = v;
        }
        if let Some(v) = o.tasks {
            self.curriculum.tasks_per_step = v;
        }
        if let Some(v) = o.meta_steps {
            self.curriculum.meta_steps = v;
        }
        if let Some(v) = o.inner_lr {
            self.meta.inner_lr = v;
        }
        if let Some(v) = o.outer_lr {
            self.meta.outer_lr = v;
        }
        if let Some(v) = o.epochs {
            self.finetune.epochs = v;
        }
        if let Some(v) = o.beam {
            self.eval.beam = v;
        }
    }

    /// Pins derived fields so the persisted document is self-contained: the
    /// synthetic generator's seed becomes a pure function of the global seed.
    pub fn finalize(&mut self) {
        self.synth.seed = derive_seed(self.seed, &[0x6e]);
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate().context("synth section")?;
        // Dimension checks run with a placeholder vocabulary size; the real
        // size only grows it.
        self.model
            .to_model_config(mclearn_core::corpus::RESERVED)
            .validate()
            .context("model section")?;
        self.lm_model
            .to_model_config(mclearn_core::corpus::RESERVED)
            .validate()
            .context("lm_model section")?;
        self.meta.to_meta_config().validate().context("meta section")?;
        if self.finetune.epochs == 0 {
            bail!("finetune.epochs must be >= 1");
        }
        if self.eval.beam == 0 {
            bail!("eval.beam must be >= 1");
        }
        if self.pretrain.batch_size == 0 || self.lm.batch_size == 0 || self.finetune.batch_size == 0
        {
            bail!("batch sizes must be >= 1");
        }
        if self.curriculum.support_tokens == 0 || self.curriculum.query_tokens == 0 {
            bail!("token budgets must be >= 1");
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        // Serialization of this plain struct cannot fail.
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Builds the effective config: file (or defaults) + overrides, finalized and
/// validated.
pub fn effective_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.finalize();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_files_fill_in() {
        let cfg = RunConfig::default();
        let parsed: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(parsed, cfg);

        let partial: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "eval": {"beam": 2}}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.eval.beam, 2);
        assert_eq!(partial.finetune.epochs, 20);
        assert_eq!(partial.curriculum.support_tokens, 8_000);
    }

    #[test]
    fn overrides_take_precedence_and_finalize_pins_the_synth_seed() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(3),
            flip_sign: Some(true),
            tasks: Some(10),
            outer_lr: Some(2e-3),
            ..Overrides::default()
        });
        cfg.finalize();
        assert_eq!(cfg.seed, 3);
        assert!(cfg.scoring.flip_sign);
        assert_eq!(cfg.curriculum.tasks_per_step, 10);
        assert_eq!(cfg.meta.outer_lr, 2e-3);
        assert_eq!(cfg.synth.seed, derive_seed(3, &[0x6e]));

        let mut again = RunConfig::default();
        again.seed = 3;
        again.finalize();
        assert_eq!(again.synth.seed, cfg.synth.seed);
    }

    #[test]
    fn validation_rejects_nonsense() {
        let mut cfg = RunConfig::default();
        cfg.eval.beam = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.model.d_model = 7; // odd
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.meta.outer_lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
