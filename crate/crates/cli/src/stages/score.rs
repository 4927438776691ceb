//! `score`: divergence-score the seen domains' meta-training pools (the
//! curriculum's input) and every test domain's query split (for the
//! difficulty-bucket report), then summarize the distributions.

use std::collections::BTreeMap;

use anyhow::{Context, Result};

use mclearn_core::corpus::DomainCorpus;
use mclearn_core::scoring::{score_corpus, summarize, write_scores, LmHandle, ScoreSummary};
use mclearn_core::Real;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::lm::load_lm;
use super::{domain_split, load_splits, load_test_corpus, load_train_pool, load_vocab, pairs_by_id, DomainsManifest};

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let vocab = load_vocab(dir)?;
    let splits = load_splits(dir)?;
    std::fs::create_dir_all(dir.scores_dir())?;

    let general = load_lm(dir, "general", &vocab)?;
    let mut lms: BTreeMap<String, LmHandle<Real>> = BTreeMap::new();
    for meta in &domains.domains {
        lms.insert(meta.name.clone(), load_lm(dir, &meta.name, &vocab)?);
    }

    let mut summaries: BTreeMap<String, ScoreSummary> = BTreeMap::new();
    let mut add_summary = |key: String, divergences: &[f64]| {
        if let Some(s) = summarize(divergences) {
            summaries.insert(key, s);
        }
    };

    // Seen domains: the whole meta-training pool.
    for meta in domains.seen() {
        let pool = load_train_pool(dir, cfg, &meta.name)?;
        let scored = score_corpus(&general, &lms, &[&pool])
            .with_context(|| format!("scoring training pool of '{}'", meta.name))?;
        let scores = &scored[&meta.name];
        write_scores(&dir.train_scores(&meta.name), scores)?;
        let d: Vec<f64> = scores.iter().map(|s| s.divergence).collect();
        add_summary(format!("{}/train", meta.name), &d);
    }

    // Every test domain: the query split only (support is training material
    // for the unseen-domain LMs, so scoring it would be circular there).
    for meta in &domains.domains {
        let corpus = load_test_corpus(dir, &meta.name, meta.seen)?;
        let split = domain_split(&splits, &meta.name)?;
        let query = pairs_by_id(&corpus, &split.query)?;
        let query_corpus = DomainCorpus::new(meta.name.clone(), corpus.role, query);
        let scored = score_corpus(&general, &lms, &[&query_corpus])
            .with_context(|| format!("scoring query split of '{}'", meta.name))?;
        let scores = &scored[&meta.name];
        write_scores(&dir.query_scores(&meta.name), scores)?;
        let d: Vec<f64> = scores.iter().map(|s| s.divergence).collect();
        add_summary(format!("{}/query", meta.name), &d);
    }

    std::fs::write(
        dir.score_summaries(),
        serde_json::to_string_pretty(&summaries)?,
    )?;
    Ok(())
}
