//! Per-shape decision procedure.
//!
//! 1. score every view against the layer-1 prompts and select views;
//! 2. sum the selected views' logits into the layer-1 logits;
//! 3. if the layer-1 distribution is not confident enough, take the top-k
//!    classes as candidates and re-score the selected views against the
//!    candidates' layer-2 prompts; the layer-2 argmax is the final label.
//!
//! The gate probability is the softmax of the *mean* selected-view logits, so
//! the meaning of `delta` does not change with the number of selected views.

use serde::{Deserialize, Serialize};

use crate::embedding_io::{EmbeddingMatrix, ShapeRecord};
use crate::error::{Error, Result};
use crate::prompt_bank::{Layer2Entry, PromptBank};
use crate::scoring::{
    check_temperature, compute_logits, dot, residual_mass, softmax, softmax_values, LogitsVector,
    ProbabilityVector, DEFAULT_TEMPERATURE,
};
use crate::view_selection::{
    pool_features, score_views, select_views, PoolMode, Selection, SelectionConfig,
    SelectionWarning, ViewScore,
};

pub const DEFAULT_DELTA: f64 = 0.96;
pub const DEFAULT_TOP_K: usize = 3;

/// Short description of how the gate probability is derived, echoed in
/// reports.
pub const GATE_CONVENTION: &str = "softmax(sum of selected view logits / number of selected views)";

/// How selected views are combined at layer 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum the per-view logits (the default pipeline).
    #[default]
    #[value(name = "sum_logits")]
    SumLogits,
    /// Average the view features, re-normalize, then score once.
    #[value(name = "mean_pool_features")]
    MeanPoolFeatures,
    /// Element-wise max of the view features, re-normalized, scored once.
    #[value(name = "max_pool_features")]
    MaxPoolFeatures,
}

impl Aggregation {
    fn pool_mode(self) -> Option<PoolMode> {
        match self {
            Aggregation::SumLogits => None,
            Aggregation::MeanPoolFeatures => Some(PoolMode::Mean),
            Aggregation::MaxPoolFeatures => Some(PoolMode::Max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Shapes whose maximum layer-1 probability is below this are refined.
    pub delta: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub selection: SelectionConfig,
    pub hierarchical_enabled: bool,
    pub aggregation: Aggregation,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            top_k: DEFAULT_TOP_K,
            temperature: DEFAULT_TEMPERATURE,
            selection: SelectionConfig::default(),
            hierarchical_enabled: true,
            aggregation: Aggregation::SumLogits,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        check_temperature(self.temperature)?;
        self.selection.validate()?;
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidConfig(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.top_k < 2 || self.top_k > num_classes {
            return Err(Error::InvalidConfig(format!(
                "top_k {} must lie in [2, {num_classes}]",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Full trace of one shape's classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub shape_id: String,
    pub selected_views: Vec<usize>,
    pub view_scores: Vec<ViewScore>,
    pub layer1_logits: LogitsVector,
    pub layer1_probs: ProbabilityVector,
    /// `1 - max(layer1_probs)` computed without cancellation; the gate reads
    /// this rather than `layer1_probs`, which saturate at 1.0.
    pub layer1_residual: f64,
    pub layer1_top1: usize,
    pub refined: bool,
    /// Top-k classes by layer-1 logit, descending.
    pub candidates: Option<Vec<usize>>,
    /// Layer-2 logits aligned with `candidates`.
    pub layer2_logits: Option<Vec<f64>>,
    pub final_label: usize,
    /// Refinement was needed but the bank lacked the candidate set's prompts.
    pub deferred_refinement: bool,
    pub deferred_key: Option<String>,
    pub warnings: Vec<SelectionWarning>,
}

fn selected_rows<'a>(
    shape: &ShapeRecord,
    views: &'a EmbeddingMatrix,
    selected: &[usize],
) -> Result<Vec<&'a [f32]>> {
    selected
        .iter()
        .map(|&i| {
            let row = *shape.view_rows.get(i).ok_or_else(|| {
                Error::InvalidConfig(format!("view index {i} out of range for {}", shape.shape_id))
            })?;
            if row >= views.rows() {
                return Err(Error::IndexOutOfRange {
                    shape_id: shape.shape_id.clone(),
                    row,
                    rows: views.rows(),
                });
            }
            Ok(views.row(row))
        })
        .collect()
}

/// Aggregates the selected views into the layer-1 prediction. The returned
/// record is unrefined: `final_label` is the layer-1 top-1.
pub fn first_layer(
    shape: &ShapeRecord,
    views: &EmbeddingMatrix,
    bank: &PromptBank,
    config: &ClassifierConfig,
    view_scores: Vec<ViewScore>,
    selection: Selection,
) -> Result<PredictionRecord> {
    let k = bank.num_classes();
    let (layer1_logits, mean) = match config.aggregation.pool_mode() {
        None => {
            let mut sum = vec![0.0f64; k];
            for &i in &selection.indices {
                let score = view_scores
                    .iter()
                    .find(|s| s.view_index == i)
                    .ok_or_else(|| Error::InvalidConfig(format!("no score for view {i}")))?;
                if score.logits.len() != k {
                    return Err(Error::DimMismatch {
                        expected: k,
                        found: score.logits.len(),
                    });
                }
                for (acc, v) in sum.iter_mut().zip(&score.logits.values) {
                    *acc += v;
                }
            }
            let n = selection.indices.len() as f64;
            let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
            (
                LogitsVector {
                    values: sum,
                    temperature: config.temperature,
                },
                mean,
            )
        }
        Some(mode) => {
            let rows = selected_rows(shape, views, &selection.indices)?;
            let pooled = pool_features(&rows, mode)?;
            let logits = compute_logits(&pooled, &bank.layer1, config.temperature)?;
            let mean = logits.values.clone();
            (logits, mean)
        }
    };
    let layer1_top1 = layer1_logits.argmax();
    Ok(PredictionRecord {
        shape_id: shape.shape_id.clone(),
        selected_views: selection.indices,
        view_scores,
        layer1_probs: softmax_values(&mean),
        layer1_residual: residual_mass(&mean),
        layer1_logits,
        layer1_top1,
        refined: false,
        candidates: None,
        layer2_logits: None,
        final_label: layer1_top1,
        deferred_refinement: false,
        deferred_key: None,
        warnings: selection.warnings,
    })
}

/// True iff hierarchical prompting is on and the maximum layer-1 probability
/// is below `delta`.
pub fn confidence_gate(record: &PredictionRecord, config: &ClassifierConfig) -> bool {
    config.hierarchical_enabled && record.layer1_residual > 1.0 - config.delta
}

/// The `k` classes with the largest layer-1 logits, descending; exact ties
/// go to the lower class index.
pub fn top_k_candidates(record: &PredictionRecord, k: usize) -> Vec<usize> {
    let values = &record.layer1_logits.values;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Re-scores the selected views against the candidates' layer-2 prompts and
/// replaces the final label with the layer-2 argmax.
pub fn second_layer(
    mut record: PredictionRecord,
    shape: &ShapeRecord,
    views: &EmbeddingMatrix,
    entry: &Layer2Entry,
    config: &ClassifierConfig,
) -> Result<PredictionRecord> {
    let candidates = record
        .candidates
        .clone()
        .ok_or_else(|| Error::InvalidConfig("second layer needs candidates".into()))?;
    let mut expected = candidates.clone();
    expected.sort_unstable();
    let mut found = entry.candidate_classes.clone();
    found.sort_unstable();
    if expected != found || entry.embeddings.rows() != entry.candidate_classes.len() {
        return Err(Error::CandidateMismatch { expected, found });
    }

    let rows = selected_rows(shape, views, &record.selected_views)?;
    let pooled;
    let inputs: Vec<&[f32]> = match config.aggregation.pool_mode() {
        None => rows,
        Some(mode) => {
            pooled = pool_features(&rows, mode)?;
            vec![&pooled]
        }
    };
    let mut logits = Vec::with_capacity(candidates.len());
    for &class in &candidates {
        let prompt = entry.embeddings.row(entry.row_of(class).expect("checked above"));
        if prompt.len() != views.cols() {
            return Err(Error::DimMismatch {
                expected: views.cols(),
                found: prompt.len(),
            });
        }
        let total: f64 = inputs.iter().map(|v| config.temperature * dot(v, prompt)).sum();
        logits.push(total);
    }

    let mut best = 0;
    for j in 1..candidates.len() {
        let better = logits[j] > logits[best]
            || (logits[j] == logits[best] && candidates[j] < candidates[best]);
        if better {
            best = j;
        }
    }
    record.final_label = candidates[best];
    record.layer2_logits = Some(logits);
    record.refined = true;
    Ok(record)
}

/// Runs the whole pipeline for one shape. A missing layer-2 entry does not
/// fail: the record keeps the layer-1 answer and carries the missing key.
pub fn classify_shape(
    shape: &ShapeRecord,
    views: &EmbeddingMatrix,
    bank: &PromptBank,
    config: &ClassifierConfig,
) -> Result<PredictionRecord> {
    config.validate(bank.num_classes())?;
    let scores = score_views(shape, views, &bank.layer1, config.temperature)?;
    let selection = select_views(&scores, &config.selection)?;
    let mut record = first_layer(shape, views, bank, config, scores, selection)?;
    if !confidence_gate(&record, config) {
        return Ok(record);
    }
    let candidates = top_k_candidates(&record, config.top_k);
    record.candidates = Some(candidates.clone());
    match bank.lookup_layer2(&candidates) {
        Ok(entry) => second_layer(record, shape, views, entry, config),
        Err(Error::MissingPromptEntry(key)) => {
            record.deferred_refinement = true;
            record.deferred_key = Some(key);
            Ok(record)
        }
        Err(e) => Err(e),
    }
}

/// Softmax of a record's layer-1 logits divided by `n`; exposed for checks
/// that recompute the gate probability independently.
pub fn mean_probabilities(logits: &LogitsVector, n: usize) -> ProbabilityVector {
    let scaled = LogitsVector {
        values: logits.values.iter().map(|v| v / n as f64).collect(),
        temperature: logits.temperature,
    };
    softmax(&scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_io::{normalize_rows, ViewConfig};
    use crate::prompt_bank::PromptStyle;
    use crate::view_selection::SelectionMode;

    fn shape(n: usize) -> ShapeRecord {
        ShapeRecord {
            shape_id: "s".into(),
            label: None,
            view_rows: (0..n).collect(),
            view_config: ViewConfig::Circular,
        }
    }

    fn identity_bank(k: usize) -> PromptBank {
        let mut data = vec![0.0f32; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        let layer1 = normalize_rows(&EmbeddingMatrix::new(k, k, data).unwrap()).unwrap();
        PromptBank::new((0..k).map(|i| format!("c{i}")).collect(), layer1, "[class]")
    }

    fn record_with_logits(values: Vec<f64>) -> PredictionRecord {
        let n = 1;
        let l = LogitsVector {
            values,
            temperature: 1.0,
        };
        PredictionRecord {
            shape_id: "s".into(),
            selected_views: vec![0],
            view_scores: vec![],
            layer1_probs: mean_probabilities(&l, n),
            layer1_residual: residual_mass(&l.values),
            layer1_top1: l.argmax(),
            final_label: l.argmax(),
            layer1_logits: l,
            refined: false,
            candidates: None,
            layer2_logits: None,
            deferred_refinement: false,
            deferred_key: None,
            warnings: vec![],
        }
    }

    fn score(view_index: usize, values: Vec<f64>) -> ViewScore {
        let logits = LogitsVector {
            values,
            temperature: 1.0,
        };
        ViewScore {
            view_index,
            entropy: 0.0,
            top1_class: logits.argmax(),
            logits,
        }
    }

    #[test]
    fn first_layer_sums_selected_logits() {
        let bank = identity_bank(2);
        let views = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let config = ClassifierConfig {
            temperature: 1.0,
            ..Default::default()
        };
        let scores = vec![score(0, vec![1.0, 0.0]), score(1, vec![0.0, 2.0])];
        let selection = Selection {
            indices: vec![0, 1],
            warnings: vec![],
        };
        let r = first_layer(&shape(2), &views, &bank, &config, scores.clone(), selection).unwrap();
        assert_eq!(r.layer1_logits.values, vec![1.0, 2.0]);
        assert_eq!(r.layer1_top1, 1);
        assert_eq!(r.layer1_probs, softmax_values(&[0.5, 1.0]));

        let single = Selection {
            indices: vec![1],
            warnings: vec![],
        };
        let r = first_layer(&shape(2), &views, &bank, &config, scores, single).unwrap();
        assert_eq!(r.layer1_logits.values, vec![0.0, 2.0]);
    }

    #[test]
    fn gate_examples() {
        let config = ClassifierConfig::default();
        let confident = record_with_logits(vec![(0.97f64 / 0.03).ln(), 0.0]);
        assert!((confident.layer1_probs.max() - 0.97).abs() < 1e-12);
        assert!(!confidence_gate(&confident, &config));
        let unsure = record_with_logits(vec![0.0, 0.0]);
        assert!(confidence_gate(&unsure, &config));
        let off = ClassifierConfig {
            delta: 0.0,
            ..config
        };
        assert!(!confidence_gate(&unsure, &off));
        let disabled = ClassifierConfig {
            hierarchical_enabled: false,
            ..config
        };
        assert!(!confidence_gate(&unsure, &disabled));
        let all = ClassifierConfig { delta: 1.0, ..config };
        assert!(confidence_gate(&record_with_logits(vec![300.0, 0.0]), &all));
    }

    #[test]
    fn top_k_examples() {
        let r = record_with_logits(vec![5.0, 1.0, 9.0, 3.0]);
        assert_eq!(top_k_candidates(&r, 3), vec![2, 0, 3]);
        assert_eq!(top_k_candidates(&r, 4), vec![2, 0, 3, 1]);
        let tied = record_with_logits(vec![1.0, 2.0, 2.0, 2.0]);
        assert_eq!(top_k_candidates(&tied, 2), vec![1, 2]);
    }

    fn entry(classes: Vec<usize>, rows: Vec<Vec<f32>>) -> Layer2Entry {
        let dim = rows[0].len();
        Layer2Entry {
            prompt_texts: classes.iter().map(|c| format!("t{c}")).collect(),
            candidate_classes: classes,
            embeddings: EmbeddingMatrix::from_rows(dim, &rows).unwrap(),
            prompt_style: PromptStyle::default(),
        }
    }

    #[test]
    fn second_layer_follows_aligned_prompt() {
        let views = EmbeddingMatrix::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let mut r = record_with_logits(vec![3.0, 2.0, 0.0]);
        r.candidates = Some(vec![0, 2]);
        let e = entry(vec![0, 2], vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let out = second_layer(r, &shape(1), &views, &e, &ClassifierConfig::default()).unwrap();
        assert!(out.refined);
        assert_eq!(out.final_label, 2);
        assert_eq!(out.layer1_top1, 0);
    }

    #[test]
    fn second_layer_ties_go_to_lowest_class() {
        let views = EmbeddingMatrix::new(1, 2, vec![0.6, 0.8]).unwrap();
        let mut r = record_with_logits(vec![1.0, 0.0, 3.0]);
        r.candidates = Some(vec![2, 0, 1]);
        let same = vec![0.0f32, 1.0];
        let e = entry(vec![0, 1, 2], vec![same.clone(), same.clone(), same]);
        let out = second_layer(r, &shape(1), &views, &e, &ClassifierConfig::default()).unwrap();
        assert_eq!(out.final_label, 0);
    }

    #[test]
    fn second_layer_rejects_wrong_entry() {
        let views = EmbeddingMatrix::new(1, 2, vec![0.6, 0.8]).unwrap();
        let mut r = record_with_logits(vec![1.0, 0.0, 3.0]);
        r.candidates = Some(vec![2, 0]);
        let e = entry(vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            second_layer(r, &shape(1), &views, &e, &ClassifierConfig::default()),
            Err(Error::CandidateMismatch { .. })
        ));
    }

    #[test]
    fn missing_entry_defers() {
        let bank = identity_bank(3);
        let v = (0.5f32).sqrt();
        let views = EmbeddingMatrix::new(1, 3, vec![v, v, 0.0]).unwrap();
        let config = ClassifierConfig {
            selection: SelectionConfig::new(1, 1, SelectionMode::EntropyMin).unwrap(),
            top_k: 2,
            ..Default::default()
        };
        let r = classify_shape(&shape(1), &views, &bank, &config).unwrap();
        assert!(!r.refined);
        assert!(r.deferred_refinement);
        assert_eq!(r.deferred_key.as_deref(), Some("c0|c1"));
        assert_eq!(r.final_label, r.layer1_top1);
    }

    #[test]
    fn config_validation() {
        let c = ClassifierConfig::default();
        assert!(c.validate(10).is_ok());
        assert!(c.validate(2).is_err());
        assert!(ClassifierConfig { delta: 1.5, ..c }.validate(10).is_err());
        assert!(ClassifierConfig { top_k: 1, ..c }.validate(10).is_err());
        assert!(ClassifierConfig { temperature: -1.0, ..c }.validate(10).is_err());
    }
}
