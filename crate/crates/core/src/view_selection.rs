//! Per-view entropy scoring and the view selection rules.
//!
//! The default rule keeps the `m_select` views with the lowest prediction
//! entropy. Two variants exist for ablations: keeping every view, and a
//! greedy scan that only keeps views whose top-1 decisions differ.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{EmbeddingMatrix, ShapeRecord};
use crate::error::{Error, Result};
use crate::scoring::{compute_logits, entropy_bits, softmax, LogitsVector};

pub const DEFAULT_TOTAL_VIEWS: usize = 20;
pub const DEFAULT_SELECTED_VIEWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    #[value(name = "entropy_min")]
    EntropyMin,
    #[value(name = "none")]
    None,
    #[value(name = "diverse_decisions")]
    DiverseDecisions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub m_total: usize,
    pub m_select: usize,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            m_total: DEFAULT_TOTAL_VIEWS,
            m_select: DEFAULT_SELECTED_VIEWS,
            mode: SelectionMode::EntropyMin,
        }
    }
}

impl SelectionConfig {
    pub fn new(m_total: usize, m_select: usize, mode: SelectionMode) -> Result<Self> {
        let config = Self {
            m_total,
            m_select,
            mode,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_select == 0 || self.m_select > self.m_total {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= m_select ({}) <= m_total ({})",
                self.m_select, self.m_total
            )));
        }
        Ok(())
    }
}

/// Layer-1 prediction of a single view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    /// Position of the view within its shape, in rendering order.
    pub view_index: usize,
    pub entropy: f64,
    pub top1_class: usize,
    pub logits: LogitsVector,
}

/// Non-fatal oddities met while selecting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionWarning {
    /// Fewer views were available than `m_select`.
    Clamped { requested: usize, available: usize },
    /// The diversity scan found too few distinct decisions and filled up with
    /// the lowest-entropy remaining views.
    DiversityFallback { distinct: usize, requested: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected view indices, ascending.
    pub indices: Vec<usize>,
    pub warnings: Vec<SelectionWarning>,
}

/// Scores every view of `shape` against the layer-1 prompts, in view order.
pub fn score_views(
    shape: &ShapeRecord,
    views: &EmbeddingMatrix,
    prompts: &EmbeddingMatrix,
    temperature: f64,
) -> Result<Vec<ViewScore>> {
    shape
        .view_rows
        .iter()
        .enumerate()
        .map(|(view_index, &row)| {
            if row >= views.rows() {
                return Err(Error::IndexOutOfRange {
                    shape_id: shape.shape_id.clone(),
                    row,
                    rows: views.rows(),
                });
            }
            let logits = compute_logits(views.row(row), prompts, temperature)?;
            Ok(ViewScore {
                view_index,
                entropy: entropy_bits(&softmax(&logits)),
                top1_class: logits.argmax(),
                logits,
            })
        })
        .collect()
}

fn by_entropy(a: &ViewScore, b: &ViewScore) -> Ordering {
    a.entropy
        .total_cmp(&b.entropy)
        .then(a.view_index.cmp(&b.view_index))
}

pub fn select_views(scores: &[ViewScore], config: &SelectionConfig) -> Result<Selection> {
    config.validate()?;
    if scores.is_empty() {
        return Err(Error::InvalidConfig("cannot select from zero views".into()));
    }
    let mut warnings = Vec::new();
    let mut wanted = config.m_select;
    if config.mode != SelectionMode::None && wanted > scores.len() {
        warnings.push(SelectionWarning::Clamped {
            requested: wanted,
            available: scores.len(),
        });
        wanted = scores.len();
    }

    let mut ranked: Vec<&ViewScore> = scores.iter().collect();
    ranked.sort_by(|a, b| by_entropy(a, b));

    let mut indices: Vec<usize> = match config.mode {
        SelectionMode::None => scores.iter().map(|s| s.view_index).collect(),
        SelectionMode::EntropyMin => ranked.iter().take(wanted).map(|s| s.view_index).collect(),
        SelectionMode::DiverseDecisions => {
            let mut decisions = HashSet::new();
            let mut kept = Vec::with_capacity(wanted);
            for score in &ranked {
                if kept.len() == wanted {
                    break;
                }
                if decisions.insert(score.top1_class) {
                    kept.push(score.view_index);
                }
            }
            if kept.len() < wanted {
                warnings.push(SelectionWarning::DiversityFallback {
                    distinct: kept.len(),
                    requested: wanted,
                });
                for score in &ranked {
                    if kept.len() == wanted {
                        break;
                    }
                    if !kept.contains(&score.view_index) {
                        kept.push(score.view_index);
                    }
                }
            }
            kept
        }
    };
    indices.sort_unstable();
    Ok(Selection { indices, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Mean,
    Max,
}

/// Element-wise mean or max of the vectors, re-normalized to unit length.
pub fn pool_features(vectors: &[&[f32]], mode: PoolMode) -> Result<Vec<f32>> {
    let Some(first) = vectors.first() else {
        return Err(Error::InvalidConfig("cannot pool zero vectors".into()));
    };
    let dim = first.len();
    let mut acc: Vec<f64> = match mode {
        PoolMode::Mean => vec![0.0; dim],
        PoolMode::Max => vec![f64::NEG_INFINITY; dim],
    };
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            match mode {
                PoolMode::Mean => *a += x as f64,
                PoolMode::Max => *a = a.max(x as f64),
            }
        }
    }
    if mode == PoolMode::Mean {
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    let n = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !n.is_finite() || n < crate::embedding_io::ZERO_NORM_EPS {
        return Err(Error::ZeroNormRow(0));
    }
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}
