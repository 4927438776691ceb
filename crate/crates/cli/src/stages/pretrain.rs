//! `pretrain`: build the joint vocabulary, fix the meta-test support/query
//! splits, and train the vanilla translator on the general corpus.

use anyhow::{Context, Result};

use mclearn_core::corpus::{
    filter_by_len, split_support_query, CorpusRole, DomainSplit, SplitManifest, Vocabulary,
};
use mclearn_core::model::{save_checkpoint, ModelKind, ParamVector, TrainMeta};
use mclearn_core::seed::derive_seed;
use mclearn_core::train::{vanilla_train, TrainData, TrainOptions};
use mclearn_core::Real;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{effective_len_cap, encode_pairs, load_corpus, load_test_corpus, DomainsManifest};

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let cap = effective_len_cap(cfg);

    let general_raw = load_corpus(dir, "general", "general", CorpusRole::General)?;
    let general = filter_by_len(&general_raw, cap);

    let mut train_pools = Vec::new();
    for d in domains.seen() {
        train_pools.push(super::load_train_pool(dir, cfg, &d.name)?);
    }
    let mut test_corpora = Vec::new();
    for d in &domains.domains {
        test_corpora.push(load_test_corpus(dir, &d.name, d.seen)?);
    }

    // Joint vocabulary over everything the pipeline will ever encode, so the
    // only UNKs at scoring or evaluation time are genuinely unseen tokens.
    let mut all: Vec<&mclearn_core::corpus::DomainCorpus> = vec![&general];
    all.extend(train_pools.iter());
    all.extend(test_corpora.iter());
    let vocab = Vocabulary::build(&all, 1);
    std::fs::write(dir.vocab_json(), serde_json::to_string_pretty(&vocab)?)?;

    // Fixed support/query membership for every test domain. Support feeds
    // fine-tuning (and the unseen-domain LMs); query is evaluation-only.
    let split_seed = derive_seed(cfg.seed, &[0x5b1]);
    let mut splits = Vec::new();
    for (meta, corpus) in domains.domains.iter().zip(&test_corpora) {
        let idx = domains.index_of(&meta.name)?;
        let (support, query) = split_support_query(
            &corpus.pairs,
            cfg.curriculum.support_tokens,
            cfg.curriculum.query_tokens,
            derive_seed(split_seed, &[idx]),
        )
        .with_context(|| format!("splitting meta-test corpus for '{}'", meta.name))?;
        let train_pool = if meta.seen {
            let pool = train_pools
                .iter()
                .find(|c| c.domain == meta.name)
                .expect("seen domain has a pool");
            pool.pairs.iter().map(|p| p.id).collect()
        } else {
            Vec::new()
        };
        splits.push(DomainSplit {
            domain: meta.name.clone(),
            seen: meta.seen,
            train_pool,
            support: support.iter().map(|p| p.id).collect(),
            query: query.iter().map(|p| p.id).collect(),
        });
    }
    SplitManifest {
        seed: split_seed,
        domains: splits,
    }
    .save(&dir.splits_json())?;

    // Vanilla pre-training: held-out tenth for early stopping.
    let encoded = encode_pairs(&vocab, &general.pairs);
    let (train, val): (Vec<_>, Vec<_>) = {
        let mut t = Vec::new();
        let mut v = Vec::new();
        for (i, p) in encoded.into_iter().enumerate() {
            if general.pairs.len() >= 10 && i % 10 == 9 {
                v.push(p);
            } else {
                t.push(p);
            }
        }
        (t, v)
    };
    let model_cfg = cfg.model.to_model_config(vocab.len());
    model_cfg.validate()?;
    let mut params =
        ParamVector::<Real>::init_for_training(&model_cfg, ModelKind::Translator, derive_seed(cfg.seed, &[0x4a]));
    let data = TrainData::Translation(&train);
    let val_data = TrainData::Translation(&val);
    let opts = TrainOptions {
        batch_size: cfg.pretrain.batch_size,
        max_epochs: cfg.pretrain.max_epochs,
        patience: cfg.pretrain.patience,
        seed: derive_seed(cfg.seed, &[0x4b]),
        ..TrainOptions::default()
    };
    let report = vanilla_train(
        &mut params,
        &model_cfg,
        &data,
        if val.is_empty() { None } else { Some(&val_data) },
        cfg.pretrain.warmup,
        cfg.pretrain.lr_factor,
        &opts,
    )
    .context("vanilla pre-training")?;

    save_checkpoint(
        &dir.vanilla_ckpt(),
        &params,
        &model_cfg,
        ModelKind::Translator,
        &TrainMeta {
            seed: opts.seed,
            step: report.steps,
            loss_history: report.loss_history,
        },
    )?;
    Ok(())
}
