//! Zero-shot multiple-choice scoring.

use serde::{Deserialize, Serialize};

use crate::data::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceItem {
    pub prompt: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChoiceTask {
    pub items: Vec<ChoiceItem>,
}

impl ChoiceTask {
    pub fn new(items: Vec<ChoiceItem>) -> Result<Self> {
        for (i, item) in items.iter().enumerate() {
            if item.candidates.len() < 2 {
                return Err(Error::Parse(format!("item {i}: needs at least two candidates")));
            }
            if item.gold >= item.candidates.len() {
                return Err(Error::Parse(format!(
                    "item {i}: gold index {} out of range for {} candidates",
                    item.gold,
                    item.candidates.len()
                )));
            }
        }
        Ok(Self { items })
    }

    /// One JSON object per line; blank lines are ignored.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let items = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<ChoiceItem>>>()?;
        Self::new(items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemScore {
    /// Empty when the item was skipped.
    pub scores: Vec<f64>,
    pub pick: Option<usize>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    pub items: Vec<ItemScore>,
    pub warnings: Vec<String>,
}

fn log_softmax_at(logits: &Tensor, row: usize, col: usize) -> f64 {
    let r = logits.row(row);
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    r[col] - lse
}

/// Sum of `log p(candidate token | everything before it)`, optionally divided
/// by the candidate length. `None` when prompt and candidate overflow `T`.
pub fn score_candidate(model: &Model, prompt: &[usize], candidate: &[usize], normalize: bool) -> Result<Option<f64>> {
    let t = model.cfg.seq_len;
    if prompt.is_empty() || candidate.is_empty() || prompt.len() + candidate.len() > t {
        return Ok(None);
    }
    let mut seq = Vec::with_capacity(t);
    seq.extend_from_slice(prompt);
    seq.extend_from_slice(candidate);
    seq.resize(t, PAD);
    let logits = model.logits(&seq)?;
    let start = prompt.len();
    let total: f64 = candidate
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax_at(&logits, start + i - 1, tok))
        .sum();
    Ok(Some(if normalize { total / candidate.len() as f64 } else { total }))
}

/// Scores every candidate and picks the highest; ties go to the lowest index.
/// Items that cannot be scored are skipped and counted as wrong.
pub fn score_choices(model: &Model, vocab: &Vocab, task: &ChoiceTask, normalize: bool) -> Result<ScoreReport> {
    let mut items = Vec::with_capacity(task.items.len());
    let mut warnings = Vec::new();
    for (n, item) in task.items.iter().enumerate() {
        let prompt = vocab.encode(&item.prompt);
        let mut scores = Vec::with_capacity(item.candidates.len());
        for cand in &item.candidates {
            match score_candidate(model, &prompt, &vocab.encode(cand), normalize)? {
                Some(s) => scores.push(s),
                None => {
                    warnings.push(format!(
                        "item {n}: prompt plus candidate {cand:?} does not fit in {} tokens or is empty, skipped",
                        model.cfg.seq_len
                    ));
                    scores.clear();
                    break;
                }
            }
        }
        let pick = if scores.is_empty() {
            None
        } else {
            let mut best = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = i;
                }
            }
            Some(best)
        };
        items.push(ItemScore {
            correct: pick == Some(item.gold),
            scores,
            pick,
        });
    }
    let right = items.iter().filter(|i| i.correct).count();
    let accuracy = if items.is_empty() {
        0.0
    } else {
        right as f64 / items.len() as f64
    };
    Ok(ScoreReport {
        accuracy,
        items,
        warnings,
    })
}
