//! `finetune`: adapt each base system to every test domain on that domain's
//! support split — a fixed budget of full epochs, no early stopping.

use anyhow::{Context, Result};

use mclearn_core::model::{save_checkpoint, ModelKind, TrainMeta};
use mclearn_core::seed::derive_seed;
use mclearn_core::train::{fine_tune, TrainData};

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{
    domain_split, encode_pairs, load_splits, load_test_corpus, load_translator, load_vocab,
    BaseModel, DomainsManifest, FT_SYSTEMS,
};

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let vocab = load_vocab(dir)?;
    let splits = load_splits(dir)?;

    for (sys_idx, (system, base)) in FT_SYSTEMS.iter().enumerate() {
        let base_path = match base {
            BaseModel::Vanilla => dir.vanilla_ckpt(),
            BaseModel::Meta(sampler) => dir.meta_ckpt(*sampler),
        };
        let producer = match base {
            BaseModel::Vanilla => "pretrain".to_string(),
            BaseModel::Meta(s) => format!("meta-train --sampler {}", crate::rundir::sampler_name(*s)),
        };
        dir.require(&base_path, "base checkpoint", &producer)?;
        let (base_params, model_cfg) = load_translator(&base_path)?;
        std::fs::create_dir_all(dir.finetune_ckpt(system, "x").parent().unwrap())?;

        for meta in &domains.domains {
            let idx = domains.index_of(&meta.name)?;
            let corpus = load_test_corpus(dir, &meta.name, meta.seen)?;
            let split = domain_split(&splits, &meta.name)?;
            let support = super::pairs_by_id(&corpus, &split.support)?;
            let encoded = encode_pairs(&vocab, &support);

            let mut params = base_params.clone();
            let seed = derive_seed(cfg.seed, &[0xf7, sys_idx as u64, idx]);
            let report = fine_tune(
                &mut params,
                &model_cfg,
                &TrainData::Translation(&encoded),
                cfg.finetune.epochs,
                cfg.finetune.lr,
                cfg.finetune.batch_size,
                seed,
            )
            .with_context(|| format!("fine-tuning {system} on '{}'", meta.name))?;

            save_checkpoint(
                &dir.finetune_ckpt(system, &meta.name),
                &params,
                &model_cfg,
                ModelKind::Translator,
                &TrainMeta {
                    seed,
                    step: report.steps,
                    loss_history: report.loss_history,
                },
            )?;
        }
    }
    Ok(())
}
