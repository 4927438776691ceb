//! Beam-search decoding with mean-log-probability length normalization.

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::ModelConfig;
use super::params::ParamVector;
use super::transformer::{encode_source, next_token_logprobs};

/// A finished hypothesis: emitted tokens (EOS excluded) plus its normalized
/// score, `sum of decision log-probs / number of decisions`. A naturally
/// emitted EOS counts as a decision; EOS forced at `max_out` does not.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
}

#[derive(Debug, Clone)]
struct Partial {
    tokens: Vec<u32>,
    sum_logp: f64,
}

/// Decodes one source sentence. Ties are broken toward the candidate produced
/// first (lower beam index, then lower token id), so results are fully
/// deterministic. `beam == 1` is greedy decoding.
pub fn beam_decode<F: Scalar>(
    params: &ParamVector<F>,
    cfg: &ModelConfig,
    src_ids: &[u32],
    beam: usize,
    max_out: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::InvalidConfig("beam width must be >= 1".into()));
    }
    if max_out == 0 || max_out + 1 > cfg.max_len {
        return Err(Error::InvalidConfig(format!(
            "max_out must be in [1, {}]",
            cfg.max_len - 1
        )));
    }
    let memory = encode_source(params, cfg, src_ids)?;

    let mut live = vec![Partial {
        tokens: Vec::new(),
        sum_logp: 0.0,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for step in 0..max_out {
        // Expand every live hypothesis over the whole vocabulary.
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&hyp.tokens);
            let logprobs = next_token_logprobs(params, cfg, Some(&memory), &prefix)?;
            for (tok, &lp) in logprobs.iter().enumerate() {
                candidates.push((b, tok as u32, hyp.sum_logp + lp));
            }
        }
        // Deterministic order: score desc, then beam index, then token id.
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        // The top `beam` candidates claim the slots; an EOS candidate
        // finalizes its hypothesis (so beam == 1 is exactly greedy decoding).
        let mut next_live: Vec<Partial> = Vec::new();
        let mut slots = 0;
        for (b, tok, sum) in candidates {
            if slots >= beam {
                break;
            }
            slots += 1;
            if tok == EOS {
                // Natural termination: the EOS decision joins the score.
                let decisions = live[b].tokens.len() + 1;
                completed.push(Hypothesis {
                    tokens: live[b].tokens.clone(),
                    score: sum / decisions as f64,
                });
            } else {
                let mut tokens = Vec::with_capacity(live[b].tokens.len() + 1);
                tokens.extend_from_slice(&live[b].tokens);
                tokens.push(tok);
                next_live.push(Partial {
                    tokens,
                    sum_logp: sum,
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if step == max_out - 1 {
            // Length limit: force EOS without scoring it.
            for hyp in &live {
                completed.push(Hypothesis {
                    tokens: hyp.tokens.clone(),
                    score: hyp.sum_logp / hyp.tokens.len() as f64,
                });
            }
        }
    }

    // Earliest-completed wins ties, which preserves the beam-index order.
    let mut best: Option<Hypothesis> = None;
    for hyp in completed {
        match &best {
            Some(b) if hyp.score <= b.score => {}
            _ => best = Some(hyp),
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("beam search produced no hypotheses".into()))
}
