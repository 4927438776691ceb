//! `meta-train`: FoMAML over scheduled tasks, starting from the vanilla
//! translator. Writes per-step checkpoints and task manifests, the training
//! log, and the final meta checkpoint.

use std::collections::{BTreeMap, HashMap};

use anyhow::{anyhow, Context, Result};

use mclearn_core::metatrain::{meta_train, SamplerKind, ScheduledTaskSource};
use mclearn_core::model::{save_checkpoint, ModelKind, TrainMeta};
use mclearn_core::scoring::{read_scores, ScoredSentence};
use mclearn_core::curriculum::CurriculumSchedule;
use mclearn_core::seed::derive_seed;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{load_train_pool, load_translator, load_vocab, DomainsManifest};

pub fn run(dir: &RunDir, cfg: &RunConfig, sampler: SamplerKind) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let vocab = load_vocab(dir)?;
    let (mut params, model_cfg) = load_translator(&dir.vanilla_ckpt())
        .context("meta-training starts from the vanilla checkpoint")?;
    if model_cfg.vocab_size != vocab.len() {
        anyhow::bail!(
            "vanilla checkpoint vocabulary ({}) does not match vocab.json ({})",
            model_cfg.vocab_size,
            vocab.len()
        );
    }

    // Rebuild each seen domain's scored pool: corpus text joined with the
    // stored scores by pair id.
    let mut by_domain: BTreeMap<String, Vec<ScoredSentence>> = BTreeMap::new();
    for meta in domains.seen() {
        let pool = load_train_pool(dir, cfg, &meta.name)?;
        let path = dir.train_scores(&meta.name);
        dir.require(&path, "divergence scores", "score")?;
        let rows = read_scores(&path)?;
        let pairs: HashMap<u32, &mclearn_core::corpus::SentencePair> =
            pool.pairs.iter().map(|p| (p.id, p)).collect();
        let scored = rows
            .iter()
            .map(|r| {
                let pair = pairs.get(&r.pair_id).ok_or_else(|| {
                    anyhow!(
                        "score row {} of {} has no matching pool sentence — \
                         rerun `score` after corpus changes",
                        r.pair_id,
                        path.display()
                    )
                })?;
                Ok(ScoredSentence {
                    pair: (*pair).clone(),
                    h_general: r.h_general,
                    h_domain: r.h_domain,
                    divergence: r.divergence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        by_domain.insert(meta.name.clone(), scored);
    }

    let schedule = CurriculumSchedule::new(
        cfg.curriculum.to_curriculum_config(),
        by_domain,
        cfg.scoring.flip_sign,
    )
    .context("building the curriculum schedule")?;

    let sampler_idx = match sampler {
        SamplerKind::Curriculum => 0u64,
        SamplerKind::Uniform => 1u64,
    };
    let dropout_base = if model_cfg.dropout > 0.0 {
        Some(derive_seed(cfg.seed, &[0xd8, sampler_idx]))
    } else {
        None
    };
    let mut source = ScheduledTaskSource::new(
        &schedule,
        &vocab,
        model_cfg.clone(),
        sampler,
        derive_seed(cfg.seed, &[0x3e7, sampler_idx]),
        dropout_base,
    );

    let out = dir.meta_dir(sampler);
    std::fs::create_dir_all(out.join("tasks"))?;
    let meta_cfg = cfg.meta.to_meta_config();
    let log = meta_train(&mut params, &mut source, &meta_cfg, |step, p| {
        save_checkpoint(
            &dir.step_ckpt(sampler, step),
            p,
            &model_cfg,
            ModelKind::Translator,
            &TrainMeta {
                seed: cfg.seed,
                step,
                loss_history: Vec::new(),
            },
        )
    })
    .context("meta-training")?;

    for manifest in &source.manifests {
        manifest.save(&dir.task_manifest(sampler, manifest.step))?;
    }
    log.write_tsv(&dir.train_log(sampler))?;

    // Mean query loss per step as the checkpoint's loss trace.
    let steps = cfg.curriculum.meta_steps;
    let mut loss_history = Vec::with_capacity(steps);
    for step in 1..=steps {
        let rows: Vec<&mclearn_core::metatrain::TaskRow> =
            log.rows.iter().filter(|r| r.step == step).collect();
        if !rows.is_empty() {
            loss_history
                .push(rows.iter().map(|r| r.query_loss).sum::<f64>() / rows.len() as f64);
        }
    }
    save_checkpoint(
        &dir.meta_ckpt(sampler),
        &params,
        &model_cfg,
        ModelKind::Translator,
        &TrainMeta {
            seed: cfg.seed,
            step: steps,
            loss_history,
        },
    )?;
    Ok(())
}
