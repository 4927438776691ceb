//! `train-lm`: the general-domain scoring LM plus one fine-tuned LM per
//! domain. Seen domains fine-tune on their meta-training pool; unseen domains
//! only ever see their meta-test support split.

use anyhow::{Context, Result};

use mclearn_core::corpus::Vocabulary;
use mclearn_core::model::{save_checkpoint, ModelKind, TrainMeta};
use mclearn_core::scoring::{finetune_lm, train_lm, LmHandle, LmTrainOptions};
use mclearn_core::seed::derive_seed;
use mclearn_core::Real;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{domain_split, load_test_corpus, load_train_pool, load_splits, load_vocab, pairs_by_id, DomainsManifest};

fn source_sentences(vocab: &Vocabulary, pairs: &[mclearn_core::corpus::SentencePair]) -> Vec<Vec<u32>> {
    pairs.iter().map(|p| vocab.encode(&p.src)).collect()
}

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let vocab = load_vocab(dir)?;
    let splits = load_splits(dir)?;
    std::fs::create_dir_all(dir.lms_dir())?;

    let lm_cfg = cfg.lm_model.to_model_config(vocab.len());
    lm_cfg.validate()?;

    let general =
        super::load_corpus(dir, "general", "general", mclearn_core::corpus::CorpusRole::General)?;
    let general = mclearn_core::corpus::filter_by_len(&general, super::effective_len_cap(cfg));
    let general_sents = source_sentences(&vocab, &general.pairs);
    let opts = LmTrainOptions {
        lr: cfg.lm.lr,
        max_epochs: cfg.lm.max_epochs,
        batch_size: cfg.lm.batch_size,
        patience: cfg.lm.patience,
        seed: derive_seed(cfg.seed, &[0x10a]),
        ..LmTrainOptions::default()
    };
    let (general_lm, report) =
        train_lm::<Real>(&general_sents, &vocab, &lm_cfg, &opts).context("general LM")?;
    save_lm(dir, "general", &general_lm, opts.seed, report.steps, &report.loss_history)?;

    for meta in &domains.domains {
        let idx = domains.index_of(&meta.name)?;
        let sents = if meta.seen {
            let pool = load_train_pool(dir, cfg, &meta.name)?;
            source_sentences(&vocab, &pool.pairs)
        } else {
            let corpus = load_test_corpus(dir, &meta.name, false)?;
            let split = domain_split(&splits, &meta.name)?;
            source_sentences(&vocab, &pairs_by_id(&corpus, &split.support)?)
        };
        let opts = LmTrainOptions {
            lr: cfg.lm.finetune_lr,
            max_epochs: cfg.lm.max_epochs,
            batch_size: cfg.lm.batch_size,
            patience: cfg.lm.patience,
            seed: derive_seed(cfg.seed, &[0x10b, idx]),
            ..LmTrainOptions::default()
        };
        let (lm, report) = finetune_lm(&general_lm, &sents, &opts)
            .with_context(|| format!("domain LM for '{}'", meta.name))?;
        save_lm(dir, &meta.name, &lm, opts.seed, report.steps, &report.loss_history)?;
    }
    Ok(())
}

fn save_lm(
    dir: &RunDir,
    which: &str,
    lm: &LmHandle<Real>,
    seed: u64,
    step: usize,
    loss_history: &[f64],
) -> Result<()> {
    save_checkpoint(
        &dir.lm_ckpt(which),
        &lm.params,
        &lm.cfg,
        ModelKind::Lm,
        &TrainMeta {
            seed,
            step,
            loss_history: loss_history.to_vec(),
        },
    )?;
    Ok(())
}

/// Reloads an LM checkpoint into a scoring handle.
pub fn load_lm(dir: &RunDir, which: &str, vocab: &Vocabulary) -> Result<LmHandle<Real>> {
    let path = dir.lm_ckpt(which);
    dir.require(&path, "language-model checkpoint", "train-lm")?;
    let (params, cfg, kind) = mclearn_core::model::load_checkpoint::<Real>(&path)?;
    if kind != ModelKind::Lm {
        anyhow::bail!("{} is not an LM checkpoint", path.display());
    }
    Ok(LmHandle {
        params,
        cfg,
        vocab: vocab.clone(),
    })
}
