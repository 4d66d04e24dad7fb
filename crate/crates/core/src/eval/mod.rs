//! Batch evaluation, ablations, sweeps and per-view statistics.
//!
//! Shapes are classified in parallel on the current rayon pool; records are
//! collected in manifest order and tallied sequentially, so reports do not
//! depend on the thread count.

pub mod report;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_shape, ClassifierConfig, PredictionRecord, GATE_CONVENTION};
use crate::embedding_io::Dataset;
use crate::error::{Error, Result};
use crate::prompt_bank::PromptBank;
use crate::view_selection::SelectionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    /// `None` when the class has no shapes.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub total: usize,
    pub correct: usize,
    pub overall_accuracy: f64,
    /// Mean of per-class accuracies over classes that have shapes.
    pub macro_accuracy: f64,
    pub per_class_accuracy: Vec<ClassAccuracy>,
    pub refined_count: usize,
    /// Refined shapes that layer 2 turned from wrong to right.
    pub corrected_count: usize,
    /// Refined shapes that layer 2 turned from right to wrong.
    pub broken_count: usize,
    pub deferred_count: usize,
    pub config_echo: ClassifierConfig,
    pub gate_convention: String,
    /// Wall time; kept out of serialized payloads so they stay reproducible.
    #[serde(skip)]
    pub runtime_ms: u128,
}

impl EvalReport {
    /// `corrected / broken`, when anything was broken.
    pub fn correction_ratio(&self) -> Option<f64> {
        (self.broken_count > 0).then(|| self.corrected_count as f64 / self.broken_count as f64)
    }
}

fn check_inputs(dataset: &Dataset, bank: &PromptBank) -> Result<()> {
    if dataset.classes() != bank.classes.as_slice() {
        return Err(Error::ClassMismatch);
    }
    if dataset.views.cols() != bank.dim {
        return Err(Error::DimMismatch {
            expected: bank.dim,
            found: dataset.views.cols(),
        });
    }
    Ok(())
}

/// Classifies every shape, preserving manifest order.
pub fn classify_all(
    dataset: &Dataset,
    bank: &PromptBank,
    config: &ClassifierConfig,
) -> Result<Vec<PredictionRecord>> {
    check_inputs(dataset, bank)?;
    config.validate(bank.num_classes())?;
    dataset
        .shapes()
        .par_iter()
        .map(|shape| classify_shape(shape, &dataset.views, bank, config))
        .collect()
}

fn labels(dataset: &Dataset) -> Result<Vec<usize>> {
    if dataset.shapes().is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .shapes()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            dataset
                .label_index(i)
                .ok_or_else(|| Error::MissingLabel(s.shape_id.clone()))
        })
        .collect()
}

/// Tallies already computed records into a report.
pub fn report_from_records(
    dataset: &Dataset,
    records: &[PredictionRecord],
    config: &ClassifierConfig,
) -> Result<EvalReport> {
    let labels = labels(dataset)?;
    let k = dataset.classes().len();
    let mut class_correct = vec![0usize; k];
    let mut class_total = vec![0usize; k];
    let (mut refined, mut corrected, mut broken, mut deferred) = (0, 0, 0, 0);
    for (record, &label) in records.iter().zip(&labels) {
        class_total[label] += 1;
        if record.final_label == label {
            class_correct[label] += 1;
        }
        if record.deferred_refinement {
            deferred += 1;
        }
        if record.refined {
            refined += 1;
            let before = record.layer1_top1 == label;
            let after = record.final_label == label;
            match (before, after) {
                (false, true) => corrected += 1,
                (true, false) => broken += 1,
                _ => {}
            }
        }
    }
    let total = records.len();
    let correct: usize = class_correct.iter().sum();
    let per_class_accuracy: Vec<ClassAccuracy> = dataset
        .classes()
        .iter()
        .enumerate()
        .map(|(c, name)| ClassAccuracy {
            class: name.clone(),
            correct: class_correct[c],
            total: class_total[c],
            accuracy: (class_total[c] > 0).then(|| class_correct[c] as f64 / class_total[c] as f64),
        })
        .collect();
    let present: Vec<f64> = per_class_accuracy.iter().filter_map(|c| c.accuracy).collect();
    Ok(EvalReport {
        dataset_name: dataset.manifest.dataset_name.clone(),
        total,
        correct,
        overall_accuracy: correct as f64 / total as f64,
        macro_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        per_class_accuracy,
        refined_count: refined,
        corrected_count: corrected,
        broken_count: broken,
        deferred_count: deferred,
        config_echo: *config,
        gate_convention: GATE_CONVENTION.to_string(),
        runtime_ms: 0,
    })
}

pub fn evaluate(dataset: &Dataset, bank: &PromptBank, config: &ClassifierConfig) -> Result<EvalReport> {
    let started = Instant::now();
    labels(dataset)?;
    let records = classify_all(dataset, bank, config)?;
    let mut report = report_from_records(dataset, &records, config)?;
    report.runtime_ms = started.elapsed().as_millis();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub view_selection: bool,
    pub hierarchical_prompts: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn get(&self, view_selection: bool, hierarchical_prompts: bool) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.view_selection == view_selection && r.hierarchical_prompts == hierarchical_prompts)
            .map(|r| &r.report)
    }
}

/// The four on/off combinations of view selection and hierarchical prompts.
/// "Selection off" keeps every view; "on" uses the base mode, or entropy
/// minimization if the base mode is itself `none`.
pub fn ablation_grid(dataset: &Dataset, bank: &PromptBank, base: &ClassifierConfig) -> Result<AblationGrid> {
    let on_mode = match base.selection.mode {
        SelectionMode::None => SelectionMode::EntropyMin,
        mode => mode,
    };
    let mut rows = Vec::with_capacity(4);
    for (view_selection, hierarchical_prompts) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut config = *base;
        config.selection.mode = if view_selection { on_mode } else { SelectionMode::None };
        config.hierarchical_enabled = hierarchical_prompts;
        rows.push(AblationRow {
            view_selection,
            hierarchical_prompts,
            report: evaluate(dataset, bank, &config)?,
        });
    }
    Ok(AblationGrid { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    #[value(name = "delta")]
    Delta,
    #[value(name = "m_select")]
    MSelect,
    #[value(name = "top_k")]
    TopK,
    #[value(name = "temperature")]
    Temperature,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Delta => "delta",
            SweepParameter::MSelect => "m_select",
            SweepParameter::TopK => "top_k",
            SweepParameter::Temperature => "temperature",
        }
    }

    /// Returns `base` with the parameter set to `value`, or why it cannot be.
    pub fn apply(self, base: &ClassifierConfig, value: f64, num_classes: usize) -> Result<ClassifierConfig> {
        let invalid = |reason: String| Error::InvalidSweepValue {
            parameter: self.name().to_string(),
            value,
            reason,
        };
        let integral = || -> Result<usize> {
            if value.is_finite() && value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(invalid("must be a non-negative integer".into()))
            }
        };
        let mut config = *base;
        match self {
            SweepParameter::Delta => config.delta = value,
            SweepParameter::MSelect => config.selection.m_select = integral()?,
            SweepParameter::TopK => config.top_k = integral()?,
            SweepParameter::Temperature => config.temperature = value,
        }
        config
            .validate(num_classes)
            .map_err(|e| invalid(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub accuracy: f64,
    pub refined_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub parameter: SweepParameter,
    /// Ascending by value.
    pub points: Vec<SweepPoint>,
    pub reports: Vec<EvalReport>,
}

pub fn sweep(
    dataset: &Dataset,
    bank: &PromptBank,
    base: &ClassifierConfig,
    parameter: SweepParameter,
    values: &[f64],
) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(Error::InvalidSweepValue {
            parameter: parameter.name().to_string(),
            value: f64::NAN,
            reason: "no values given".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidSweepValue {
            parameter: parameter.name().to_string(),
            value: w[0],
            reason: "duplicate value".into(),
        });
    }
    let configs = sorted
        .iter()
        .map(|&v| parameter.apply(base, v, bank.num_classes()))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(configs.len());
    let mut reports = Vec::with_capacity(configs.len());
    for (value, config) in sorted.into_iter().zip(configs) {
        let report = evaluate(dataset, bank, &config)?;
        points.push(SweepPoint {
            value,
            accuracy: report.overall_accuracy,
            refined_count: report.refined_count,
        });
        reports.push(report);
    }
    Ok(SweepCurve {
        parameter,
        points,
        reports,
    })
}

/// Fraction of individual views whose own top-1 class is the shape label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerViewAccuracy {
    pub all_views: f64,
    pub selected_views: f64,
    pub all_count: usize,
    pub selected_count: usize,
}

pub fn per_view_accuracy(dataset: &Dataset, bank: &PromptBank, config: &ClassifierConfig) -> Result<PerViewAccuracy> {
    let labels = labels(dataset)?;
    let records = classify_all(dataset, bank, config)?;
    let (mut all_hit, mut all_n, mut sel_hit, mut sel_n) = (0usize, 0usize, 0usize, 0usize);
    for (record, &label) in records.iter().zip(&labels) {
        for score in &record.view_scores {
            let hit = (score.top1_class == label) as usize;
            all_hit += hit;
            all_n += 1;
            if record.selected_views.binary_search(&score.view_index).is_ok() {
                sel_hit += hit;
                sel_n += 1;
            }
        }
    }
    Ok(PerViewAccuracy {
        all_views: all_hit as f64 / all_n as f64,
        selected_views: sel_hit as f64 / sel_n as f64,
        all_count: all_n,
        selected_count: sel_n,
    })
}

/// Distinct top-1 decisions among each shape's selected views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionHistogram {
    pub per_shape: Vec<usize>,
    /// Distinct-decision count -> number of shapes.
    pub bins: BTreeMap<usize, usize>,
}

impl DecisionHistogram {
    pub fn total(&self) -> usize {
        self.bins.values().sum()
    }
}

pub fn decision_variance(dataset: &Dataset, bank: &PromptBank, config: &ClassifierConfig) -> Result<DecisionHistogram> {
    labels(dataset)?;
    let records = classify_all(dataset, bank, config)?;
    let per_shape: Vec<usize> = records
        .iter()
        .map(|r| {
            r.view_scores
                .iter()
                .filter(|s| r.selected_views.binary_search(&s.view_index).is_ok())
                .map(|s| s.top1_class)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect();
    let mut bins = BTreeMap::new();
    for &d in &per_shape {
        *bins.entry(d).or_insert(0) += 1;
    }
    Ok(DecisionHistogram { per_shape, bins })
}

/// Candidate keys the dataset needs at the given configuration but the bank
/// lacks, sorted and de-duplicated.
pub fn missing_prompt_keys(dataset: &Dataset, bank: &PromptBank, config: &ClassifierConfig) -> Result<Vec<String>> {
    let records = classify_all(dataset, bank, config)?;
    let keys: BTreeSet<String> = records.into_iter().filter_map(|r| r.deferred_key).collect();
    Ok(keys.into_iter().collect())
}
