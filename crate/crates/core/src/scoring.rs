//! Sentence-level domain divergence from a pair of language models.
//!
//! A general-domain LM and a per-domain LM (fine-tuned from the general one)
//! each assign a token-averaged cross-entropy to a source sentence; their
//! difference `d = h_domain - h_general` orders sentences from "common" to
//! "domain-specific". Scores are written to TSV with 17 significant digits so
//! a reload reproduces every bit.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::corpus::{DomainCorpus, SentencePair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward_loss, Batch, LrSchedule, ModelConfig, ModelKind, OptKind, ParamVector};
use crate::scalar::Scalar;
use crate::train::{train_supervised, TrainData, TrainOptions, TrainReport};

/// A trained language model plus everything needed to use its scores:
/// comparing two LMs is only meaningful when they share a vocabulary.
#[derive(Debug, Clone)]
pub struct LmHandle<F: Scalar> {
    pub params: ParamVector<F>,
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
}

impl<F: Scalar> LmHandle<F> {
    pub fn same_vocab(&self, other: &LmHandle<F>) -> bool {
        self.vocab == other.vocab
    }
}

/// One scored sentence pair. The source side is scored; the target side
/// inherits the value through the shared `pair`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub pair: SentencePair,
    pub h_general: f64,
    pub h_domain: f64,
    pub divergence: f64,
}

/// Knobs for LM training; translated into a [`TrainOptions`] with a constant
/// Adam learning rate (5e-4 for from-scratch runs, 5e-5 for fine-tuning).
#[derive(Debug, Clone)]
pub struct LmTrainOptions {
    pub lr: f64,
    pub max_epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Consecutive non-improving validation checks before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        LmTrainOptions {
            lr: 5e-4,
            max_epochs: 40,
            max_steps: usize::MAX,
            batch_size: 16,
            patience: 3,
            seed: 0,
        }
    }
}

impl LmTrainOptions {
    fn to_train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            max_epochs: self.max_epochs,
            optimizer: OptKind::Adam,
            schedule: LrSchedule::Constant { lr: self.lr },
            eval_every: 0,
            patience: self.patience,
            seed: self.seed,
        }
    }
}

/// Splits off every tenth sentence as a validation set when the corpus is
/// large enough for one; tiny corpora train on everything.
fn held_out_split(sentences: &[Vec<u32>]) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    if sentences.len() < 10 {
        return (sentences.to_vec(), Vec::new());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in sentences.iter().enumerate() {
        if i % 10 == 9 {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}

/// Trains a decoder-only LM from scratch on encoded sentences.
pub fn train_lm<F: Scalar>(
    sentences: &[Vec<u32>],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
    opts: &LmTrainOptions,
) -> Result<(LmHandle<F>, TrainReport)> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("LM training corpus".into()));
    }
    let mut params = ParamVector::<F>::init_for_training(cfg, ModelKind::Lm, opts.seed);
    let report = run_lm_training(&mut params, sentences, cfg, opts)?;
    Ok((
        LmHandle {
            params,
            cfg: cfg.clone(),
            vocab: vocab.clone(),
        },
        report,
    ))
}

/// Continues training an existing LM on new text, keeping its vocabulary.
/// Used to derive each domain LM from the general one.
pub fn finetune_lm<F: Scalar>(
    base: &LmHandle<F>,
    sentences: &[Vec<u32>],
    opts: &LmTrainOptions,
) -> Result<(LmHandle<F>, TrainReport)> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus("LM fine-tuning corpus".into()));
    }
    let mut handle = base.clone();
    let report = run_lm_training(&mut handle.params, sentences, &handle.cfg, opts)?;
    Ok((handle, report))
}

fn run_lm_training<F: Scalar>(
    params: &mut ParamVector<F>,
    sentences: &[Vec<u32>],
    cfg: &ModelConfig,
    opts: &LmTrainOptions,
) -> Result<TrainReport> {
    let (train, val) = held_out_split(sentences);
    let train_data = TrainData::Lm(&train);
    let val_data = TrainData::Lm(&val);
    let validation = if val.is_empty() {
        None
    } else {
        Some(&val_data)
    };
    train_supervised(params, cfg, &train_data, validation, &opts.to_train_options())
}

/// Token-averaged cross-entropy of a sentence in nats: the mean NLL over the
/// sentence's tokens plus the closing EOS, conditioned on BOS.
pub fn token_avg_cross_entropy<F: Scalar>(lm: &LmHandle<F>, sentence: &[u32]) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot score an empty sentence".into(),
        ));
    }
    let batch = Batch::for_lm(&[sentence.to_vec()], lm.cfg.max_len)?;
    let out = forward_loss(&lm.params, &lm.cfg, &batch, ModelKind::Lm, None)?;
    let h = out.loss.to64();
    if !h.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "sentence cross-entropy".into(),
        });
    }
    Ok(h)
}

/// `d(S) = H_domain(S) - H_general(S)`; positive when the domain model finds
/// the sentence more surprising than the general model does.
pub fn divergence<F: Scalar>(
    general: &LmHandle<F>,
    domain: &LmHandle<F>,
    sentence: &[u32],
) -> Result<f64> {
    if !general.same_vocab(domain) {
        return Err(Error::VocabMismatch);
    }
    let h_g = token_avg_cross_entropy(general, sentence)?;
    let h_d = token_avg_cross_entropy(domain, sentence)?;
    Ok(h_d - h_g)
}

/// Scores the source side of every pair in every corpus against its domain LM.
pub fn score_corpus<F: Scalar>(
    general: &LmHandle<F>,
    domain_lms: &BTreeMap<String, LmHandle<F>>,
    corpora: &[&DomainCorpus],
) -> Result<BTreeMap<String, Vec<ScoredSentence>>> {
    let mut out = BTreeMap::new();
    for corpus in corpora {
        let lm = domain_lms.get(&corpus.domain).ok_or_else(|| {
            Error::InvalidConfig(format!("no domain LM for '{}'", corpus.domain))
        })?;
        if !general.same_vocab(lm) {
            return Err(Error::VocabMismatch);
        }
        let mut scored = Vec::with_capacity(corpus.pairs.len());
        for pair in &corpus.pairs {
            let src_ids = general.vocab.encode(&pair.src);
            let h_general = token_avg_cross_entropy(general, &src_ids)?;
            let h_domain = token_avg_cross_entropy(lm, &src_ids)?;
            scored.push(ScoredSentence {
                pair: pair.clone(),
                h_general,
                h_domain,
                divergence: h_domain - h_general,
            });
        }
        out.insert(corpus.domain.clone(), scored);
    }
    Ok(out)
}

/// Renders an `f64` with 17 significant digits, enough for an exact reload.
fn render(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes one domain's scores as TSV: `pair_id  h_general  h_domain  divergence`.
pub fn write_scores(path: &Path, scores: &[ScoredSentence]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "pair_id\th_general\th_domain\tdivergence")?;
    for s in scores {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            s.pair.id,
            render(s.h_general),
            render(s.h_domain),
            render(s.divergence)
        )?;
    }
    f.flush()?;
    Ok(())
}

/// A reloaded score row; the sentence text lives in the corpus, keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub pair_id: u32,
    pub h_general: f64,
    pub h_domain: f64,
    pub divergence: f64,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "pair_id\th_general\th_domain\tdivergence" {
                return Err(Error::InvalidConfig(format!(
                    "unexpected score header in {}",
                    path.display()
                )));
            }
            continue;
        }
        let mut cols = line.split('\t');
        let parse = |c: Option<&str>| -> Result<f64> {
            c.and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidConfig(format!("bad score row {i}: {line}")))
        };
        let pair_id: u32 = cols
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("bad score row {i}: {line}")))?;
        let h_general = parse(cols.next())?;
        let h_domain = parse(cols.next())?;
        let divergence = parse(cols.next())?;
        rows.push(ScoreRow {
            pair_id,
            h_general,
            h_domain,
            divergence,
        });
    }
    Ok(rows)
}

/// Distribution summary used by the difficulty-level report.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Nearest-rank quantiles over the divergence values.
pub fn summarize(divergences: &[f64]) -> Option<ScoreSummary> {
    if divergences.is_empty() {
        return None;
    }
    let mut sorted = divergences.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let q = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
    Some(ScoreSummary {
        n,
        mean: sorted.iter().sum::<f64>() / n as f64,
        min: sorted[0],
        q25: q(0.25),
        median: q(0.5),
        q75: q(0.75),
        max: sorted[n - 1],
    })
}
