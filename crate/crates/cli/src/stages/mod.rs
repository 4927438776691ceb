//! The pipeline stages. Each consumes earlier artifacts from the run
//! directory and writes its own plus a completion marker.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mclearn_core::corpus::{self, CorpusRole, DomainCorpus, SentencePair, Vocabulary};
use mclearn_core::metatrain::SamplerKind;
use mclearn_core::model::{load_checkpoint, ModelConfig, ModelKind};
use mclearn_core::Real;

use crate::config::RunConfig;
use crate::rundir::{sampler_name, RunDir};

mod evaluate;
mod finetune;
mod gen;
mod lm;
mod meta;
mod pretrain;
mod report;
mod score;

/// Fine-tuned systems and the checkpoint each one starts from.
pub const FT_SYSTEMS: [(&str, BaseModel); 3] = [
    ("traditional-ft", BaseModel::Vanilla),
    ("meta-mt", BaseModel::Meta(SamplerKind::Uniform)),
    ("meta-curriculum", BaseModel::Meta(SamplerKind::Curriculum)),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseModel {
    Vanilla,
    Meta(SamplerKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Pretrain,
    TrainLm,
    Score,
    MetaTrain(SamplerKind),
    Finetune,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Gen => "gen".into(),
            Stage::Pretrain => "pretrain".into(),
            Stage::TrainLm => "train-lm".into(),
            Stage::Score => "score".into(),
            Stage::MetaTrain(s) => format!("meta-train-{}", sampler_name(*s)),
            Stage::Finetune => "finetune".into(),
            Stage::Evaluate => "evaluate".into(),
            Stage::Report => "report".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Runs one stage under the directory lock: skip if its marker matches the
/// config, otherwise execute and write the marker.
pub fn run_stage(dir: &RunDir, cfg: &RunConfig, force: bool, stage: Stage) -> Result<Outcome> {
    let _lock = dir.lock()?;
    dir.persist_config(cfg, force)?;
    let name = stage.name();
    if !force && dir.stage_is_current(&name, cfg)? {
        return Ok(Outcome::UpToDate);
    }
    match stage {
        Stage::Gen => gen::run(dir, cfg)?,
        Stage::Pretrain => pretrain::run(dir, cfg)?,
        Stage::TrainLm => lm::run(dir, cfg)?,
        Stage::Score => score::run(dir, cfg)?,
        Stage::MetaTrain(sampler) => meta::run(dir, cfg, sampler)?,
        Stage::Finetune => finetune::run(dir, cfg)?,
        Stage::Evaluate => evaluate::run(dir, cfg)?,
        Stage::Report => report::run(dir, cfg)?,
    }
    dir.write_marker(&name, cfg)?;
    Ok(Outcome::Ran)
}

/// Every stage in pipeline order, both samplers included.
pub const PIPELINE: [Stage; 9] = [
    Stage::Gen,
    Stage::Pretrain,
    Stage::TrainLm,
    Stage::Score,
    Stage::MetaTrain(SamplerKind::Curriculum),
    Stage::MetaTrain(SamplerKind::Uniform),
    Stage::Finetune,
    Stage::Evaluate,
    Stage::Report,
];

pub fn run_all(dir: &RunDir, cfg: &RunConfig, force: bool) -> Result<Vec<(Stage, Outcome)>> {
    let mut out = Vec::new();
    for stage in PIPELINE {
        let outcome = run_stage(dir, cfg, force, stage)
            .with_context(|| format!("stage `{}`", stage.name()))?;
        out.push((stage, outcome));
    }
    Ok(out)
}

/// The domain inventory written by `gen` and read by everything after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainsManifest {
    /// Sorted by name; all round-robin and seed derivations follow this order.
    pub domains: Vec<DomainMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMeta {
    pub name: String,
    pub seen: bool,
}

impl DomainsManifest {
    pub fn load(dir: &RunDir) -> Result<Self> {
        dir.require(&dir.domains_json(), "domain inventory", "gen")?;
        let text = std::fs::read_to_string(dir.domains_json())?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        std::fs::write(dir.domains_json(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn seen(&self) -> impl Iterator<Item = &DomainMeta> {
        self.domains.iter().filter(|d| d.seen)
    }

    /// Index of a domain in the sorted inventory, for seed derivation.
    pub fn index_of(&self, name: &str) -> Result<u64> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .map(|i| i as u64)
            .ok_or_else(|| anyhow!("unknown domain '{name}'"))
    }
}

/// Corpus file stems under `data/`.
pub fn train_stem(domain: &str) -> String {
    format!("{domain}.train")
}

pub fn test_stem(domain: &str) -> String {
    format!("{domain}.test")
}

pub fn corpus_paths(dir: &RunDir, stem: &str) -> (PathBuf, PathBuf) {
    let d = dir.data_dir();
    (d.join(format!("{stem}.src")), d.join(format!("{stem}.tgt")))
}

pub fn load_corpus(dir: &RunDir, stem: &str, domain: &str, role: CorpusRole) -> Result<DomainCorpus> {
    let (src, tgt) = corpus_paths(dir, stem);
    dir.require(&src, "corpus file", "gen")?;
    dir.require(&tgt, "corpus file", "gen")?;
    corpus::ingest(domain, role, &src, &tgt)
        .with_context(|| format!("ingesting {}", src.display()))
}

/// Sentence-length cap for corpora that feed training: the configured filter
/// tightened so sentences always fit both models' position tables (the LM
/// scores BOS + sentence + EOS).
pub fn effective_len_cap(cfg: &RunConfig) -> usize {
    cfg.pretrain
        .max_len_filter
        .min(cfg.model.max_len.saturating_sub(2))
        .min(cfg.lm_model.max_len.saturating_sub(2))
}

/// A seen domain's meta-training pool: ingested and length-filtered, ids
/// re-densified. Deterministic, so every stage reconstructs the same pool.
pub fn load_train_pool(dir: &RunDir, cfg: &RunConfig, domain: &str) -> Result<DomainCorpus> {
    let raw = load_corpus(dir, &train_stem(domain), domain, CorpusRole::MetaTrainSeen)?;
    Ok(corpus::filter_by_len(&raw, effective_len_cap(cfg)))
}

/// A test domain's corpus, unfiltered (evaluation sets keep every sentence).
pub fn load_test_corpus(dir: &RunDir, domain: &str, seen: bool) -> Result<DomainCorpus> {
    let role = if seen {
        CorpusRole::MetaTestSeen
    } else {
        CorpusRole::MetaTestUnseen
    };
    load_corpus(dir, &test_stem(domain), domain, role)
}

pub fn load_vocab(dir: &RunDir) -> Result<Vocabulary> {
    dir.require(&dir.vocab_json(), "vocabulary", "pretrain")?;
    let text = std::fs::read_to_string(dir.vocab_json())?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_splits(dir: &RunDir) -> Result<corpus::SplitManifest> {
    dir.require(&dir.splits_json(), "support/query split manifest", "pretrain")?;
    Ok(corpus::SplitManifest::load(&dir.splits_json())?)
}

/// Pulls the pairs named by `ids` out of a corpus, in manifest order.
pub fn pairs_by_id(corpus: &DomainCorpus, ids: &[u32]) -> Result<Vec<SentencePair>> {
    let by_id: BTreeMap<u32, &SentencePair> =
        corpus.pairs.iter().map(|p| (p.id, p)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id)
                .map(|p| (*p).clone())
                .ok_or_else(|| {
                    anyhow!("pair id {id} not present in corpus '{}'", corpus.domain)
                })
        })
        .collect()
}

/// The split record for one domain, with a pointed error when absent.
pub fn domain_split<'a>(
    splits: &'a corpus::SplitManifest,
    domain: &str,
) -> Result<&'a corpus::DomainSplit> {
    splits
        .domains
        .iter()
        .find(|d| d.domain == domain)
        .ok_or_else(|| anyhow!("splits.json has no entry for domain '{domain}'"))
}

/// Loads a translator checkpoint and checks it really is a translator.
pub fn load_translator(path: &std::path::Path) -> Result<(mclearn_core::Params, ModelConfig)> {
    let (params, cfg, kind) = load_checkpoint::<Real>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if kind != ModelKind::Translator {
        bail!("{} is not a translator checkpoint", path.display());
    }
    Ok((params, cfg))
}

/// Encodes pairs for translation batches.
pub fn encode_pairs(vocab: &Vocabulary, pairs: &[SentencePair]) -> Vec<(Vec<u32>, Vec<u32>)> {
    pairs
        .iter()
        .map(|p| (vocab.encode(&p.src), vocab.encode(&p.tgt)))
        .collect()
}
