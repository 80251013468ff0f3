//! Synthetic tasks whose response quality is computable exactly.

use crate::error::{Error, Result};
use crate::model::{Token, FIRST_CONTENT};
use crate::preference::{oracle_annotate, rank_responses, AnnotationRecord, RankedResponseSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskKind {
    /// Fraction of adjacent strictly ascending token pairs.
    SortedSequence,
    /// One minus the total-variation distance to a target unigram distribution
    /// over content tokens.
    TargetUnigram { target: Vec<f64> },
    /// Fraction of keyword n-grams that occur contiguously in the response.
    KeywordCoverage { keywords: Vec<Vec<Token>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleTask {
    pub vocab_size: usize,
    pub task: TaskKind,
}

impl OracleTask {
    pub fn sorted_sequence(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            task: TaskKind::SortedSequence,
        }
    }

    pub fn keyword_coverage(vocab_size: usize, keywords: Vec<Vec<Token>>) -> Self {
        Self {
            vocab_size,
            task: TaskKind::KeywordCoverage { keywords },
        }
    }

    pub fn target_unigram(vocab_size: usize, target: Vec<f64>) -> Self {
        Self {
            vocab_size,
            task: TaskKind::TargetUnigram { target },
        }
    }

    /// Builds a task from its textual id and JSON parameters.
    pub fn from_id(id: &str, vocab_size: usize, params: serde_json::Value) -> Result<Self> {
        let mut obj = match params {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            other => return Err(Error::invalid(format!("task parameters must be an object, got {other}"))),
        };
        obj.insert("id".into(), serde_json::Value::String(id.to_string()));
        let task: TaskKind = serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::invalid(format!("unknown or malformed task `{id}`: {e}")))?;
        let t = Self { vocab_size, task };
        t.validate()?;
        Ok(t)
    }

    pub fn id(&self) -> &'static str {
        match self.task {
            TaskKind::SortedSequence => "sorted-sequence",
            TaskKind::TargetUnigram { .. } => "target-unigram",
            TaskKind::KeywordCoverage { .. } => "keyword-coverage",
        }
    }

    pub fn content_vocab(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_vocab() < 1 {
            return Err(Error::invalid("task vocabulary has no content tokens"));
        }
        match &self.task {
            TaskKind::SortedSequence => Ok(()),
            TaskKind::TargetUnigram { target } => {
                if target.len() != self.content_vocab() {
                    return Err(Error::invalid(format!(
                        "target distribution has {} entries, content vocabulary has {}",
                        target.len(),
                        self.content_vocab()
                    )));
                }
                let total: f64 = target.iter().sum();
                if target.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("target must be a probability distribution"));
                }
                Ok(())
            }
            TaskKind::KeywordCoverage { keywords } => {
                if keywords.is_empty() || keywords.iter().any(Vec::is_empty) {
                    return Err(Error::invalid("keyword set and keywords must be non-empty"));
                }
                let bad = keywords
                    .iter()
                    .flatten()
                    .any(|&t| t < FIRST_CONTENT || t as usize >= self.vocab_size);
                if bad {
                    return Err(Error::invalid("keywords must use content tokens of the task vocabulary"));
                }
                Ok(())
            }
        }
    }

    /// Ground-truth quality in `[0, 1]`. Reserved tokens (PAD, BOS, EOS) are
    /// ignored; responses with too little content score 0.
    pub fn quality(&self, _prompt: &[Token], response: &[Token]) -> Result<f64> {
        if response.is_empty() {
            return Err(Error::invalid("oracle quality needs a non-empty response"));
        }
        let content: Vec<Token> = response.iter().copied().filter(|&t| t >= FIRST_CONTENT).collect();
        Ok(match &self.task {
            TaskKind::SortedSequence => {
                if content.len() < 2 {
                    0.0
                } else {
                    let ascending = content.windows(2).filter(|w| w[0] < w[1]).count();
                    ascending as f64 / (content.len() - 1) as f64
                }
            }
            TaskKind::TargetUnigram { target } => {
                if content.is_empty() {
                    0.0
                } else {
                    let mut freq = vec![0.0; target.len()];
                    for &t in &content {
                        if let Some(f) = freq.get_mut((t - FIRST_CONTENT) as usize) {
                            *f += 1.0;
                        }
                    }
                    let n = content.len() as f64;
                    let tv: f64 = freq.iter().zip(target).map(|(f, p)| (f / n - p).abs()).sum::<f64>() / 2.0;
                    (1.0 - tv).clamp(0.0, 1.0)
                }
            }
            TaskKind::KeywordCoverage { keywords } => {
                let covered = keywords
                    .iter()
                    .filter(|k| content.windows(k.len()).any(|w| w == k.as_slice()))
                    .count();
                covered as f64 / keywords.len() as f64
            }
        })
    }

    /// Ranks responses by quality (ties by id) and emits one synthetic record
    /// per (annotator, response).
    pub fn rank(
        &self,
        prompt_id: &str,
        prompt: &[Token],
        responses: &[(u32, Vec<Token>)],
        annotators: usize,
        noise: f64,
        seed: u64,
    ) -> Result<(RankedResponseSet, Vec<AnnotationRecord>)> {
        let mut scored = Vec::with_capacity(responses.len());
        let mut records = Vec::with_capacity(responses.len() * annotators);
        for (id, tokens) in responses {
            let q = self.quality(prompt, tokens)?;
            scored.push((*id, q));
            for a in 0..annotators {
                let s = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((a as u64) << 32) ^ *id as u64);
                records.push(oracle_annotate(prompt_id, *id, &format!("oracle-{a}"), q, noise, s));
            }
        }
        Ok((rank_responses(prompt_id, &scored)?, records))
    }

    /// Seeded prompts of content tokens with lengths in `min_len..=max_len`.
    pub fn sample_prompts(&self, count: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
        if min_len == 0 || min_len > max_len {
            return Err(Error::invalid(format!("bad prompt length range {min_len}..={max_len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hi = self.vocab_size as Token;
        Ok((0..count)
            .map(|_| {
                let len = rng.random_range(min_len..=max_len);
                (0..len).map(|_| rng.random_range(FIRST_CONTENT..hi)).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EOS;

    #[test]
    fn sorted_sequence_examples() {
        let t = OracleTask::sorted_sequence(16);
        assert_eq!(t.quality(&[], &[1 + 2, 2 + 2, 3 + 2]).unwrap(), 1.0);
        assert_eq!(t.quality(&[], &[3 + 3, 1 + 3, 2 + 3]).unwrap(), 0.5);
        assert_eq!(t.quality(&[], &[4, 5, EOS]).unwrap(), 1.0);
        assert_eq!(t.quality(&[], &[EOS]).unwrap(), 0.0);
        assert!(t.quality(&[], &[]).is_err());
    }

    #[test]
    fn keyword_coverage_counts_contiguous_ngrams() {
        let t = OracleTask::keyword_coverage(16, vec![vec![4, 5], vec![9]]);
        assert_eq!(t.quality(&[], &[6, 7, 8]).unwrap(), 0.0);
        assert_eq!(t.quality(&[], &[4, 6, 5]).unwrap(), 0.0);
        assert_eq!(t.quality(&[], &[4, 5, 8]).unwrap(), 0.5);
        assert_eq!(t.quality(&[], &[9, 4, 5, EOS]).unwrap(), 1.0);
    }

    #[test]
    fn target_unigram_is_length_free() {
        let t = OracleTask::target_unigram(5, vec![0.5, 0.5]);
        t.validate().unwrap();
        assert_eq!(t.quality(&[], &[3, 4]).unwrap(), 1.0);
        assert_eq!(t.quality(&[], &[3, 4, 3, 4, 4, 3]).unwrap(), 1.0);
        assert_eq!(t.quality(&[], &[3, 3]).unwrap(), 0.5);
        assert_eq!(t.quality(&[], &[3, 3, 3, 3]).unwrap(), 0.5);
    }

    #[test]
    fn unknown_task_rejected() {
        assert!(OracleTask::from_id("palindrome", 16, serde_json::Value::Null).is_err());
        let t = OracleTask::from_id("sorted-sequence", 16, serde_json::Value::Null).unwrap();
        assert_eq!(t.id(), "sorted-sequence");
        let kw = OracleTask::from_id("keyword-coverage", 16, serde_json::json!({"keywords": [[4, 5]]})).unwrap();
        assert_eq!(kw.id(), "keyword-coverage");
    }

    #[test]
    fn rank_orders_by_quality() {
        let t = OracleTask::sorted_sequence(16);
        let (ranked, recs) = t
            .rank("p", &[3], &[(0, vec![9, 3, 4]), (1, vec![3, 4, 9])], 3, 0.0, 7)
            .unwrap();
        assert_eq!(ranked.order, vec![1, 0]);
        assert_eq!(recs.len(), 6);
        let (tied, _) = t.rank("p", &[3], &[(0, vec![3, 4]), (1, vec![3, 4])], 1, 0.0, 7).unwrap();
        assert_eq!(tied.order, vec![0, 1]);
    }

    #[test]
    fn prompts_are_seeded() {
        let t = OracleTask::sorted_sequence(16);
        let a = t.sample_prompts(5, 2, 4, 11).unwrap();
        assert_eq!(a, t.sample_prompts(5, 2, 4, 11).unwrap());
        assert!(a.iter().all(|p| (2..=4).contains(&p.len()) && p.iter().all(|&x| (3..16).contains(&x))));
    }
}
