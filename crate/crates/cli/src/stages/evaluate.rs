//! `evaluate`: beam-decode every system on every test domain's query split,
//! recording hypotheses and per-domain BLEU fingerprinted by the exact query
//! membership.

use std::collections::BTreeMap;
use std::io::Write as _;

use anyhow::{Context, Result};

use mclearn_core::eval::{evaluate_domain, manifest_fingerprint, SystemEval, SYSTEMS};
use mclearn_core::metatrain::SamplerKind;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{
    domain_split, load_splits, load_test_corpus, load_translator, load_vocab, pairs_by_id,
    DomainsManifest,
};

/// Which checkpoint a system uses for a given domain.
fn checkpoint_for(dir: &RunDir, system: &str, domain: &str) -> std::path::PathBuf {
    match system {
        "vanilla" => dir.vanilla_ckpt(),
        "meta-mt-woft" => dir.meta_ckpt(SamplerKind::Uniform),
        "meta-curriculum-woft" => dir.meta_ckpt(SamplerKind::Curriculum),
        _ => dir.finetune_ckpt(system, domain),
    }
}

fn producer_for(system: &str) -> &'static str {
    match system {
        "vanilla" => "pretrain",
        "meta-mt-woft" => "meta-train --sampler uniform",
        "meta-curriculum-woft" => "meta-train --sampler curriculum",
        _ => "finetune",
    }
}

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let vocab = load_vocab(dir)?;
    let splits = load_splits(dir)?;

    // Query pairs per domain, in manifest order, shared by every system.
    let mut queries = BTreeMap::new();
    let mut query_ids: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for meta in &domains.domains {
        let corpus = load_test_corpus(dir, &meta.name, meta.seen)?;
        let split = domain_split(&splits, &meta.name)?;
        queries.insert(meta.name.clone(), pairs_by_id(&corpus, &split.query)?);
        query_ids.insert(meta.name.clone(), split.query.clone());
    }
    let fingerprint = manifest_fingerprint(&query_ids);

    for system in SYSTEMS {
        let mut bleu = BTreeMap::new();
        let sys_dir = dir.eval_dir().join(system);
        std::fs::create_dir_all(&sys_dir)?;
        for meta in &domains.domains {
            let ckpt = checkpoint_for(dir, system, &meta.name);
            dir.require(&ckpt, "system checkpoint", producer_for(system))?;
            let (params, model_cfg) = load_translator(&ckpt)?;
            let query = &queries[&meta.name];
            let eval = evaluate_domain(&params, &model_cfg, query, &vocab, cfg.eval.beam)
                .with_context(|| format!("decoding {system} on '{}'", meta.name))?;

            let mut f =
                std::io::BufWriter::new(std::fs::File::create(dir.hyps_txt(system, &meta.name))?);
            for hyp in &eval.hypotheses {
                writeln!(f, "{}", hyp.join(" "))?;
            }
            f.flush()?;
            bleu.insert(meta.name.clone(), eval.bleu);
        }
        let out = SystemEval {
            system: system.to_string(),
            bleu,
            manifest_id: fingerprint.clone(),
        };
        std::fs::write(
            dir.system_eval(system),
            serde_json::to_string_pretty(&out)?,
        )?;
    }
    Ok(())
}
