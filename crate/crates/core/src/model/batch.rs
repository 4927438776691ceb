//! Padded id batches for training and scoring.

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// One padded batch. For the language model `src` is empty and only the
/// target-side fields are populated; the decoder input row is
/// `BOS t1 .. tn PAD*` and the target row is `t1 .. tn EOS PAD*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `batch * src_len` source ids, PAD-padded.
    pub src: Vec<u32>,
    /// `batch * src_len` true for real source tokens.
    pub src_mask: Vec<bool>,
    /// `batch * tgt_len` decoder input ids.
    pub tgt_in: Vec<u32>,
    /// `batch * tgt_len` prediction targets, PAD where inactive.
    pub tgt_out: Vec<u32>,
    /// `batch * tgt_len` true where `tgt_out` is a real target.
    pub tgt_mask: Vec<bool>,
    /// Number of real prediction targets in the batch.
    pub n_tokens: usize,
}

impl Batch {
    /// Builds a language-model batch from encoded sentences. Each sentence
    /// consumes `len + 1` positions (the EOS prediction is part of the loss).
    pub fn for_lm(sentences: &[Vec<u32>], max_len: usize) -> Result<Batch> {
        if sentences.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let longest = sentences.iter().map(Vec::len).max().unwrap();
        let tgt_len = longest + 1;
        if tgt_len > max_len {
            return Err(Error::SequenceTooLong {
                len: tgt_len,
                max_len,
            });
        }
        let b = sentences.len();
        let mut tgt_in = vec![PAD; b * tgt_len];
        let mut tgt_out = vec![PAD; b * tgt_len];
        let mut tgt_mask = vec![false; b * tgt_len];
        let mut n_tokens = 0;
        for (i, sent) in sentences.iter().enumerate() {
            let row = i * tgt_len;
            tgt_in[row] = BOS;
            for (t, &id) in sent.iter().enumerate() {
                tgt_in[row + t + 1] = id;
                tgt_out[row + t] = id;
                tgt_mask[row + t] = true;
            }
            tgt_out[row + sent.len()] = EOS;
            tgt_mask[row + sent.len()] = true;
            n_tokens += sent.len() + 1;
        }
        Ok(Batch {
            batch: b,
            src_len: 0,
            tgt_len,
            src: Vec::new(),
            src_mask: Vec::new(),
            tgt_in,
            tgt_out,
            tgt_mask,
            n_tokens,
        })
    }

    /// Builds a translation batch from encoded (source, target) pairs.
    pub fn for_translation(pairs: &[(Vec<u32>, Vec<u32>)], max_len: usize) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap() + 1;
        if src_len > max_len || tgt_len > max_len {
            return Err(Error::SequenceTooLong {
                len: src_len.max(tgt_len),
                max_len,
            });
        }
        if pairs.iter().any(|(s, _)| s.is_empty()) {
            return Err(Error::InvalidConfig("empty source sentence in batch".into()));
        }
        let b = pairs.len();
        let mut src = vec![PAD; b * src_len];
        let mut src_mask = vec![false; b * src_len];
        let mut tgt_in = vec![PAD; b * tgt_len];
        let mut tgt_out = vec![PAD; b * tgt_len];
        let mut tgt_mask = vec![false; b * tgt_len];
        let mut n_tokens = 0;
        for (i, (s, t)) in pairs.iter().enumerate() {
            let srow = i * src_len;
            for (j, &id) in s.iter().enumerate() {
                src[srow + j] = id;
                src_mask[srow + j] = true;
            }
            let trow = i * tgt_len;
            tgt_in[trow] = BOS;
            for (j, &id) in t.iter().enumerate() {
                tgt_in[trow + j + 1] = id;
                tgt_out[trow + j] = id;
                tgt_mask[trow + j] = true;
            }
            tgt_out[trow + t.len()] = EOS;
            tgt_mask[trow + t.len()] = true;
            n_tokens += t.len() + 1;
        }
        Ok(Batch {
            batch: b,
            src_len,
            tgt_len,
            src,
            src_mask,
            tgt_in,
            tgt_out,
            tgt_mask,
            n_tokens,
        })
    }

    pub fn validate_ids(&self, vocab_size: usize) -> Result<()> {
        for &id in self.src.iter().chain(&self.tgt_in).chain(&self.tgt_out) {
            if id as usize >= vocab_size {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lm_batch_shifts_targets_and_counts_eos() {
        let b = Batch::for_lm(&[vec![5, 6], vec![7]], 8).unwrap();
        assert_eq!(b.tgt_len, 3);
        assert_eq!(b.tgt_in, vec![BOS, 5, 6, BOS, 7, PAD]);
        assert_eq!(b.tgt_out, vec![5, 6, EOS, 7, EOS, PAD]);
        assert_eq!(b.tgt_mask, vec![true, true, true, true, true, false]);
        assert_eq!(b.n_tokens, 5);
    }

    #[test]
    fn translation_batch_pads_both_sides() {
        let b = Batch::for_translation(&[(vec![4, 5, 6], vec![9]), (vec![4], vec![8, 9])], 8)
            .unwrap();
        assert_eq!(b.src_len, 3);
        assert_eq!(b.tgt_len, 3);
        assert_eq!(b.src, vec![4, 5, 6, 4, PAD, PAD]);
        assert_eq!(b.src_mask, vec![true, true, true, true, false, false]);
        assert_eq!(b.tgt_in, vec![BOS, 9, PAD, BOS, 8, 9]);
        assert_eq!(b.tgt_out, vec![9, EOS, PAD, 8, 9, EOS]);
        assert_eq!(b.n_tokens, 5);
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        assert!(Batch::for_lm(&[vec![5; 8]], 8).is_err());
        assert!(Batch::for_translation(&[(vec![4; 9], vec![5])], 8).is_err());
    }
}
