//! BLEU scoring, difficulty/length bucket diagnostics, and the multi-system
//! comparison report.
//!
//! Corpus BLEU here is the single source of truth for headline numbers:
//! clipped 1-4-gram precisions, geometric mean over the orders that have any
//! candidate n-grams, no smoothing, times the brevity penalty, scaled 0-100.
//! A smoothed sentence-level variant exists solely for bucket diagnostics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRole, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::model::{beam_decode, ModelConfig, ParamVector};
use crate::scalar::Scalar;

/// Clipped n-gram matches and candidate counts for one order.
fn ngram_stats(hyp: &[String], rf: &[String], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let candidates = hyp.len() - n + 1;
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    if rf.len() >= n {
        for g in rf.windows(n) {
            *ref_counts.entry(g).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
    for g in hyp.windows(n) {
        *hyp_counts.entry(g).or_insert(0) += 1;
    }
    let matches = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidates)
}

/// Corpus-level BLEU on a 0-100 scale.
///
/// Orders with zero candidate n-grams anywhere in the corpus (hypotheses all
/// shorter than `n`) drop out of the geometric mean; any remaining order with
/// zero matches sends the score to 0.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::EvalMismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EvalMismatch("empty evaluation corpus".into()));
    }
    let hyp_len: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=4 {
        let (mut matches, mut candidates) = (0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let (m, c) = ngram_stats(h, r, n);
            matches += m;
            candidates += c;
        }
        if candidates == 0 {
            continue;
        }
        if matches == 0 {
            return Ok(0.0);
        }
        log_sum += (matches as f64 / candidates as f64).ln();
        orders += 1;
    }
    let geo = (log_sum / orders as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * geo)
}

/// Sentence-level BLEU with add-1 smoothing on orders n >= 2; diagnostics
/// only, never a headline number.
pub fn sentence_bleu_smoothed(hyp: &[String], rf: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=4 {
        let (matches, candidates) = ngram_stats(hyp, rf, n);
        if candidates == 0 {
            continue;
        }
        let p = if n == 1 {
            if matches == 0 {
                return 0.0;
            }
            matches as f64 / candidates as f64
        } else {
            (matches + 1) as f64 / (candidates + 1) as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let geo = (log_sum / orders as f64).exp();
    let bp = if hyp.len() >= rf.len() {
        1.0
    } else {
        (1.0 - rf.len() as f64 / hyp.len() as f64).exp()
    };
    100.0 * bp * geo
}

/// A slice of the evaluated corpus with its own BLEU figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    /// Indices into the evaluated sentence list.
    pub indices: Vec<usize>,
    /// Corpus BLEU over the members; `None` when the bucket is empty.
    pub bleu: Option<f64>,
    /// Mean smoothed sentence BLEU over the members (diagnostic).
    pub mean_sentence_bleu: Option<f64>,
}

fn fill_bucket(
    label: &str,
    indices: Vec<usize>,
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<Bucket> {
    let (bleu, mean_sentence) = if indices.is_empty() {
        (None, None)
    } else {
        let h: Vec<Vec<String>> = indices.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Vec<String>> = indices.iter().map(|&i| refs[i].clone()).collect();
        let b = corpus_bleu(&h, &r)?;
        let s = indices
            .iter()
            .map(|&i| sentence_bleu_smoothed(&hyps[i], &refs[i]))
            .sum::<f64>()
            / indices.len() as f64;
        (Some(b), Some(s))
    };
    Ok(Bucket {
        label: label.to_string(),
        indices,
        bleu,
        mean_sentence_bleu: mean_sentence,
    })
}

/// Tercile split on divergence scores: thresholds at the 1/3 and 2/3
/// nearest-rank quantiles, ties falling into the lower bucket. Returns the
/// three buckets plus a flag for degenerate splits (some bucket empty).
pub fn difficulty_buckets(
    divergences: &[f64],
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<(Vec<Bucket>, bool)> {
    let n = divergences.len();
    if n < 3 {
        return Err(Error::EvalMismatch(format!(
            "difficulty buckets need at least 3 sentences, got {n}"
        )));
    }
    if hyps.len() != n || refs.len() != n {
        return Err(Error::EvalMismatch(
            "scores, hypotheses and references must align".into(),
        ));
    }
    let mut sorted = divergences.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t1 = sorted[(n + 2) / 3 - 1]; // ceil(n/3)
    let t2 = sorted[(2 * n + 2) / 3 - 1]; // ceil(2n/3)

    let mut easy = Vec::new();
    let mut medium = Vec::new();
    let mut hard = Vec::new();
    for (i, &d) in divergences.iter().enumerate() {
        if d <= t1 {
            easy.push(i);
        } else if d <= t2 {
            medium.push(i);
        } else {
            hard.push(i);
        }
    }
    let degenerate = easy.is_empty() || medium.is_empty() || hard.is_empty();
    let buckets = vec![
        fill_bucket("easy", easy, hyps, refs)?,
        fill_bucket("medium", medium, hyps, refs)?,
        fill_bucket("hard", hard, hyps, refs)?,
    ];
    Ok((buckets, degenerate))
}

const LENGTH_BINS: [(usize, usize); 6] = [
    (1, 10),
    (10, 20),
    (20, 30),
    (30, 40),
    (40, 50),
    (50, usize::MAX),
];

/// Source-length bins; empty bins are absent from the result.
pub fn length_buckets(
    src_lens: &[usize],
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
) -> Result<Vec<Bucket>> {
    if src_lens.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(Error::EvalMismatch(
            "lengths, hypotheses and references must align".into(),
        ));
    }
    let mut out = Vec::new();
    for &(lo, hi) in &LENGTH_BINS {
        let indices: Vec<usize> = src_lens
            .iter()
            .enumerate()
            .filter(|(_, &l)| l >= lo && l < hi)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        let label = if hi == usize::MAX {
            format!("[{lo},inf)")
        } else {
            format!("[{lo},{hi})")
        };
        out.push(fill_bucket(&label, indices, hyps, refs)?);
    }
    Ok(out)
}

/// Decoded output for one domain: hypotheses in corpus order plus the BLEU.
#[derive(Debug, Clone)]
pub struct DomainEval {
    pub bleu: f64,
    pub hypotheses: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    pub src_lens: Vec<usize>,
}

/// Beam-decodes every query source and scores against the targets.
pub fn evaluate_domain<F: Scalar>(
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    query: &[crate::corpus::SentencePair],
    vocab: &Vocabulary,
    beam: usize,
) -> Result<DomainEval> {
    if query.is_empty() {
        return Err(Error::EmptyCorpus("evaluation query set".into()));
    }
    let max_out = cfg.max_len - 1;
    let mut hypotheses = Vec::with_capacity(query.len());
    let mut references = Vec::with_capacity(query.len());
    let mut src_lens = Vec::with_capacity(query.len());
    for pair in query {
        let src_ids = vocab.encode(&pair.src);
        let hyp = beam_decode(params, cfg, &src_ids, beam, max_out)?;
        let tokens: Vec<String> = hyp
            .tokens
            .iter()
            .filter(|&&id| id >= RESERVED as u32)
            .map(|&id| vocab.decode_token(id).to_string())
            .collect();
        hypotheses.push(tokens);
        references.push(pair.tgt.clone());
        src_lens.push(pair.src.len());
    }
    let bleu = corpus_bleu(&hypotheses, &references)?;
    Ok(DomainEval {
        bleu,
        hypotheses,
        references,
        src_lens,
    })
}

/// Canonical system keys in report row order.
pub const SYSTEMS: [&str; 6] = [
    "vanilla",
    "traditional-ft",
    "meta-mt-woft",
    "meta-mt",
    "meta-curriculum-woft",
    "meta-curriculum",
];

pub fn system_display(key: &str) -> &'static str {
    match key {
        "vanilla" => "Vanilla",
        "traditional-ft" => "Traditional FT",
        "meta-mt-woft" => "Meta-MT w/o FT",
        "meta-mt" => "Meta-MT",
        "meta-curriculum-woft" => "Meta-Curriculum w/o FT",
        "meta-curriculum" => "Meta-Curriculum",
        _ => "?",
    }
}

/// Post-adaptation system minus its pre-adaptation counterpart.
pub const DELTA_ROWS: [(&str, &str, &str); 3] = [
    ("Delta FT", "traditional-ft", "vanilla"),
    ("Delta Meta-MT", "meta-mt", "meta-mt-woft"),
    ("Delta Meta-Curriculum", "meta-curriculum", "meta-curriculum-woft"),
];

/// One system's per-domain BLEU plus a fingerprint of the query sets it was
/// scored on; reports refuse to mix fingerprints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemEval {
    pub system: String,
    pub bleu: BTreeMap<String, f64>,
    pub manifest_id: String,
}

/// FNV-1a fingerprint of the exact query membership per domain.
pub fn manifest_fingerprint(query_ids: &BTreeMap<String, Vec<u32>>) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (domain, ids) in query_ids {
        eat(domain.as_bytes());
        eat(&[0xff]);
        for id in ids {
            eat(&id.to_le_bytes());
        }
        eat(&[0xfe]);
    }
    format!("{h:016x}")
}

/// Renders the six-system comparison as TSV and markdown. Columns run unseen
/// domains first (each group followed by its average), mirroring the
/// adaptation protocol's emphasis on domains never seen in meta-training.
pub fn comparison_report(
    domains: &[(String, CorpusRole)],
    evals: &BTreeMap<String, SystemEval>,
) -> Result<(String, String)> {
    for key in SYSTEMS {
        if !evals.contains_key(key) {
            return Err(Error::EvalMismatch(format!("missing system '{key}'")));
        }
    }
    let fingerprint = &evals[SYSTEMS[0]].manifest_id;
    for ev in evals.values() {
        if &ev.manifest_id != fingerprint {
            return Err(Error::EvalMismatch(format!(
                "system '{}' was evaluated on different query sets",
                ev.system
            )));
        }
    }

    let unseen: Vec<&String> = domains
        .iter()
        .filter(|(_, r)| *r == CorpusRole::MetaTestUnseen)
        .map(|(d, _)| d)
        .collect();
    let seen: Vec<&String> = domains
        .iter()
        .filter(|(_, r)| *r == CorpusRole::MetaTestSeen)
        .map(|(d, _)| d)
        .collect();

    let mut columns: Vec<String> = Vec::new();
    for d in &unseen {
        columns.push((*d).clone());
    }
    if !unseen.is_empty() {
        columns.push("unseen-avg".into());
    }
    for d in &seen {
        columns.push((*d).clone());
    }
    if !seen.is_empty() {
        columns.push("seen-avg".into());
    }

    let value = |system: &str, col: &str| -> Result<f64> {
        let ev = &evals[system];
        let avg = |names: &[&String]| -> Result<f64> {
            let mut sum = 0.0;
            for d in names {
                sum += *ev
                    .bleu
                    .get(*d)
                    .ok_or_else(|| Error::EvalMismatch(format!("{system} missing {d}")))?;
            }
            Ok(sum / names.len() as f64)
        };
        match col {
            "unseen-avg" => avg(&unseen),
            "seen-avg" => avg(&seen),
            d => ev
                .bleu
                .get(d)
                .copied()
                .ok_or_else(|| Error::EvalMismatch(format!("{system} missing {d}"))),
        }
    };

    let mut tsv = String::from("system");
    for c in &columns {
        tsv.push('\t');
        tsv.push_str(c);
    }
    tsv.push('\n');
    let mut md = String::new();
    md.push_str("| System |");
    for c in &columns {
        md.push_str(&format!(" {c} |"));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in &columns {
        md.push_str("---|");
    }
    md.push('\n');

    for system in SYSTEMS {
        tsv.push_str(system);
        md.push_str(&format!("| {} |", system_display(system)));
        for c in &columns {
            let v = value(system, c)?;
            tsv.push_str(&format!("\t{v:.2}"));
            md.push_str(&format!(" {v:.2} |"));
        }
        tsv.push('\n');
        md.push('\n');
    }
    for (label, after, before) in DELTA_ROWS {
        tsv.push_str(label);
        md.push_str(&format!("| {label} |"));
        for c in &columns {
            let v = value(after, c)? - value(before, c)?;
            tsv.push_str(&format!("\t{v:+.2}"));
            md.push_str(&format!(" {v:+.2} |"));
        }
        tsv.push('\n');
        md.push('\n');
    }
    Ok((tsv, md))
}
