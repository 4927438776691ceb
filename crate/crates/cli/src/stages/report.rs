//! `report`: the six-system comparison table plus difficulty- and
//! length-bucket breakdowns for the fine-tuned curriculum system. Pure
//! function of files already in the run directory.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mclearn_core::corpus::CorpusRole;
use mclearn_core::eval::{
    comparison_report, difficulty_buckets, length_buckets, Bucket, SystemEval, SYSTEMS,
};
use mclearn_core::scoring::read_scores;

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{domain_split, load_splits, load_test_corpus, pairs_by_id, DomainsManifest};

/// The system whose per-bucket behaviour the report breaks down.
const BUCKET_SYSTEM: &str = "meta-curriculum";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainBuckets {
    pub difficulty: Vec<Bucket>,
    /// True when ties collapsed a tercile to nothing.
    pub degenerate: bool,
    pub length: Vec<Bucket>,
}

fn read_hyps(path: &std::path::Path, expected: usize) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let hyps: Vec<Vec<String>> = text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    if hyps.len() != expected {
        bail!(
            "{} has {} hypotheses but the query split has {} — rerun `evaluate`",
            path.display(),
            hyps.len(),
            expected
        );
    }
    Ok(hyps)
}

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let domains = DomainsManifest::load(dir)?;
    let splits = load_splits(dir)?;

    let mut evals: BTreeMap<String, SystemEval> = BTreeMap::new();
    for system in SYSTEMS {
        let path = dir.system_eval(system);
        dir.require(&path, "system evaluation", "evaluate")?;
        let ev: SystemEval = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        evals.insert(system.to_string(), ev);
    }

    let roles: Vec<(String, CorpusRole)> = domains
        .domains
        .iter()
        .map(|d| {
            let role = if d.seen {
                CorpusRole::MetaTestSeen
            } else {
                CorpusRole::MetaTestUnseen
            };
            (d.name.clone(), role)
        })
        .collect();
    let (tsv, comparison_md) = comparison_report(&roles, &evals)?;
    std::fs::write(dir.report_tsv(), &tsv)?;

    let mut md = String::new();
    md.push_str("# Domain adaptation report\n\n");
    md.push_str("## System comparison (corpus BLEU)\n\n");
    md.push_str(&comparison_md);
    md.push('\n');

    // Bucket breakdowns over the fine-tuned curriculum system.
    let mut all_buckets: BTreeMap<String, DomainBuckets> = BTreeMap::new();
    md.push_str(&format!("## Buckets — {BUCKET_SYSTEM}\n"));
    for meta in &domains.domains {
        let corpus = load_test_corpus(dir, &meta.name, meta.seen)?;
        let split = domain_split(&splits, &meta.name)?;
        let query = pairs_by_id(&corpus, &split.query)?;
        let refs: Vec<Vec<String>> = query.iter().map(|p| p.tgt.clone()).collect();
        let src_lens: Vec<usize> = query.iter().map(|p| p.src.len()).collect();

        let scores_path = dir.query_scores(&meta.name);
        dir.require(&scores_path, "query divergence scores", "score")?;
        let rows = read_scores(&scores_path)?;
        if rows.len() != query.len() {
            bail!(
                "{} rows in {} but {} query sentences — rerun `score`",
                rows.len(),
                scores_path.display(),
                query.len()
            );
        }
        // Difficulty uses the same orientation as the curriculum: when the
        // ranking key is flipped, low raw divergence marks the hard end.
        let divergences: Vec<f64> = rows
            .iter()
            .map(|r| if cfg.scoring.flip_sign { -r.divergence } else { r.divergence })
            .collect();
        let hyps = read_hyps(&dir.hyps_txt(BUCKET_SYSTEM, &meta.name), query.len())?;

        let (difficulty, degenerate) = difficulty_buckets(&divergences, &hyps, &refs)?;
        let length = length_buckets(&src_lens, &hyps, &refs)?;

        md.push_str(&format!("\n### {} ({})\n\n", meta.name, if meta.seen { "seen" } else { "unseen" }));
        md.push_str("| Difficulty | Sentences | BLEU | Mean sentence BLEU |\n|---|---|---|---|\n");
        for b in &difficulty {
            md.push_str(&bucket_row(b));
        }
        if degenerate {
            md.push_str("\n*Degenerate split: score ties emptied at least one tercile.*\n");
        }
        md.push_str("\n| Source length | Sentences | BLEU | Mean sentence BLEU |\n|---|---|---|---|\n");
        for b in &length {
            md.push_str(&bucket_row(b));
        }
        all_buckets.insert(
            meta.name.clone(),
            DomainBuckets {
                difficulty,
                degenerate,
                length,
            },
        );
    }
    md.push_str(
        "\n---\n*Mean sentence BLEU uses add-one smoothing on n≥2 grams and is \
         diagnostic only; headline and bucket BLEU columns are unsmoothed corpus BLEU.*\n",
    );

    std::fs::write(dir.report_md(), &md)?;
    std::fs::write(
        dir.buckets_json(),
        serde_json::to_string_pretty(&all_buckets)?,
    )?;
    Ok(())
}

fn bucket_row(b: &Bucket) -> String {
    let fmt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.2}"),
        None => "—".to_string(),
    };
    format!(
        "| {} | {} | {} | {} |\n",
        b.label,
        b.indices.len(),
        fmt(b.bleu),
        fmt(b.mean_sentence_bleu)
    )
}
