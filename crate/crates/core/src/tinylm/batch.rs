use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Token sequences plus a per-position target mask.
///
/// `loss_mask[b][t]` marks token `t` of sequence `b` as a prediction target (predicted from
/// tokens `0..t`). Position 0 has no context and is never a target.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<u32>>, loss_mask: Vec<Vec<bool>>) -> Result<Self> {
        if sequences.len() != loss_mask.len()
            || sequences.iter().zip(&loss_mask).any(|(s, m)| s.len() != m.len())
        {
            return Err(Error::Data("loss mask shape differs from sequences".into()));
        }
        Ok(Self { sequences, loss_mask })
    }

    /// Every position after the first is a target.
    pub fn full(sequences: Vec<Vec<u32>>) -> Self {
        let loss_mask = sequences
            .iter()
            .map(|s| (0..s.len()).map(|t| t > 0).collect())
            .collect();
        Self { sequences, loss_mask }
    }

    /// Only positions at or after `prompt_lens[b]` are targets.
    pub fn answer_only(sequences: Vec<Vec<u32>>, prompt_lens: &[usize]) -> Self {
        let loss_mask = sequences
            .iter()
            .zip(prompt_lens)
            .map(|(s, &p)| (0..s.len()).map(|t| t > 0 && t >= p).collect())
            .collect();
        Self { sequences, loss_mask }
    }

    pub fn single(sequence: Vec<u32>) -> Self {
        Self::full(vec![sequence])
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn num_targets(&self) -> usize {
        self.loss_mask
            .iter()
            .map(|m| m.iter().skip(1).filter(|&&b| b).count())
            .sum()
    }

    /// Checks the batch against a model configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if self.sequences.len() != self.loss_mask.len() {
            return Err(Error::Data("loss mask shape differs from sequences".into()));
        }
        for (b, (seq, mask)) in self.sequences.iter().zip(&self.loss_mask).enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("sequence {b} is empty")));
            }
            if seq.len() != mask.len() {
                return Err(Error::Data(format!("sequence {b}: mask length differs")));
            }
            if seq.len() > cfg.max_seq_len {
                return Err(Error::Data(format!(
                    "sequence {b} has length {} > max_seq_len {}",
                    seq.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&tok) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Data(format!(
                    "sequence {b}: token id {tok} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
        }
        if self.num_targets() == 0 {
            return Err(Error::Data("batch has no masked-in target positions".into()));
        }
        Ok(())
    }
}
