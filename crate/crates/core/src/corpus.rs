//! Parallel-corpus handling: tokenization, vocabulary, subsampling, splits.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

/// One aligned sentence pair. `id` is dense within its corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: u32,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SentencePair {
    pub fn src_tokens(&self) -> usize {
        self.src.len()
    }
}

/// What a corpus is used for in the adaptation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusRole {
    /// Mixed-domain pre-training text; never evaluated.
    General,
    MetaTrainSeen,
    MetaTestSeen,
    MetaTestUnseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub domain: String,
    pub role: CorpusRole,
    pub pairs: Vec<SentencePair>,
}

impl DomainCorpus {
    pub fn new(domain: impl Into<String>, role: CorpusRole, pairs: Vec<SentencePair>) -> Self {
        DomainCorpus {
            domain: domain.into(),
            role,
            pairs,
        }
    }

    pub fn source_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len()).sum()
    }
}

/// Unicode-NFC normalization followed by whitespace splitting. Case is kept.
pub fn tokenize(line: &str) -> Vec<String> {
    line.nfc()
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Reads an aligned pair of text files into a corpus.
///
/// Fails if the line counts differ or any line tokenizes to nothing; silent
/// row dropping would break the id/line correspondence.
pub fn ingest(
    domain: &str,
    role: CorpusRole,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<DomainCorpus> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Misaligned {
            src_lines: src_lines.len(),
            tgt_lines: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let src = tokenize(s);
        let tgt = tokenize(t);
        if src.is_empty() {
            return Err(Error::EmptyLine {
                side: "source",
                line: i + 1,
            });
        }
        if tgt.is_empty() {
            return Err(Error::EmptyLine {
                side: "target",
                line: i + 1,
            });
        }
        pairs.push(SentencePair {
            id: i as u32,
            src,
            tgt,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus(domain.to_owned()));
    }
    Ok(DomainCorpus::new(domain, role, pairs))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        lines.push(line?);
    }
    Ok(lines)
}

/// Drops pairs where either side exceeds `max_len` tokens and re-densifies ids.
pub fn filter_by_len(corpus: &DomainCorpus, max_len: usize) -> DomainCorpus {
    let pairs = corpus
        .pairs
        .iter()
        .filter(|p| p.src.len() <= max_len && p.tgt.len() <= max_len)
        .enumerate()
        .map(|(i, p)| SentencePair {
            id: i as u32,
            src: p.src.clone(),
            tgt: p.tgt.clone(),
        })
        .collect();
    DomainCorpus::new(corpus.domain.clone(), corpus.role, pairs)
}

/// Joint source+target vocabulary with four reserved ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabOnDisk", into = "VocabOnDisk")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabOnDisk {
    id_to_token: Vec<String>,
}

impl From<VocabOnDisk> for Vocabulary {
    fn from(d: VocabOnDisk) -> Self {
        Vocabulary::from_tokens(d.id_to_token)
    }
}

impl From<Vocabulary> for VocabOnDisk {
    fn from(v: Vocabulary) -> Self {
        VocabOnDisk {
            id_to_token: v.id_to_token,
        }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (the on-disk
    /// form). The first [`RESERVED`] rows are display-only surface forms.
    pub fn from_tokens(id_to_token: Vec<String>) -> Self {
        let mut token_to_id = HashMap::new();
        // Reserved surface forms are display-only; raw text never maps to them.
        for (i, tok) in id_to_token.iter().enumerate().skip(RESERVED) {
            token_to_id.entry(tok.clone()).or_insert(i as u32);
        }
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    /// Builds the vocabulary over every corpus, source and target side.
    ///
    /// Ordering: descending count, ties broken by first occurrence. Tokens
    /// below `min_count` map to UNK at encode time.
    pub fn build(corpora: &[&DomainCorpus], min_count: usize) -> Self {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // token -> (count, first_seen)
        let mut next_seen = 0usize;
        for corpus in corpora {
            for pair in &corpus.pairs {
                for tok in pair.src.iter().chain(&pair.tgt) {
                    let entry = counts.entry(tok.as_str()).or_insert_with(|| {
                        let e = (0, next_seen);
                        next_seen += 1;
                        e
                    });
                    entry.0 += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_count.max(1))
            .map(|(t, (c, s))| (t, c, s))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut id_to_token = vec![
            "<pad>".to_owned(),
            "<bos>".to_owned(),
            "<eos>".to_owned(),
            "<unk>".to_owned(),
        ];
        id_to_token.extend(kept.into_iter().map(|(t, _, _)| t.to_owned()));
        Vocabulary::from_tokens(id_to_token)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always exist
    }

    pub fn encode_token(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode_token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("<unk>")
    }

    /// Joins non-reserved tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id as usize >= RESERVED)
            .map(|&id| self.decode_token(id))
            .collect();
        toks.join(" ")
    }
}

/// Uniformly samples pairs without replacement, in sampled order, stopping
/// when the next draw would push the source-token total past `token_budget`.
pub fn subsample(corpus: &DomainCorpus, token_budget: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus(corpus.domain.clone()));
    }
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.shuffle(&mut rng_for(seed, &[]));
    let mut taken = Vec::new();
    let mut used = 0usize;
    for idx in order {
        let pair = &corpus.pairs[idx];
        if used + pair.src_tokens() > token_budget {
            break;
        }
        used += pair.src_tokens();
        taken.push(pair.clone());
    }
    Ok(taken)
}

/// Greedy prefix fill used by both subsampling and support/query splitting:
/// walks `pairs`, taking while the source-token budget holds, and stops at the
/// first pair that would overflow. Returns (taken, index after stop).
fn greedy_fill(pairs: &[&SentencePair], budget: usize) -> (Vec<SentencePair>, usize) {
    let mut taken = Vec::new();
    let mut used = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        if used + pair.src_tokens() > budget {
            return (taken, i);
        }
        used += pair.src_tokens();
        taken.push((*pair).clone());
    }
    (taken, pairs.len())
}

/// Disjoint support/query split under source-token budgets.
///
/// Pairs are shuffled once; the support set is filled greedily, then the query
/// set continues from the first pair the support budget rejected.
pub fn split_support_query(
    pairs: &[SentencePair],
    support_budget: usize,
    query_budget: usize,
    seed: u64,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>)> {
    let mut order: Vec<&SentencePair> = pairs.iter().collect();
    order.shuffle(&mut rng_for(seed, &[]));
    let (support, after) = greedy_fill(&order, support_budget);
    let (query, _) = greedy_fill(&order[after..], query_budget);
    if support.is_empty() || query.is_empty() {
        return Err(Error::CorpusTooSmall {
            domain: String::new(),
            detail: format!(
                "support/query split got {}/{} pairs from {} candidates (budgets {}/{})",
                support.len(),
                query.len(),
                pairs.len(),
                support_budget,
                query_budget
            ),
        });
    }
    Ok((support, query))
}

/// Record of how each domain was split, written next to the corpora so any
/// stage (or a rerun) can reproduce the exact membership.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub domains: Vec<DomainSplit>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSplit {
    pub domain: String,
    pub seen: bool,
    /// Pair ids (into the filtered corpus) forming the meta-train pool; empty
    /// for unseen domains.
    pub train_pool: Vec<u32>,
    pub support: Vec<u32>,
    pub query: Vec<u32>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
