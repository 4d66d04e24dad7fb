//! Seeded synthetic fixtures with planted ground truth.
//!
//! Every class `c` owns an orthonormal visual direction `v_c`. Classes come
//! in sibling pairs `(0, 1), (2, 3), ...` and every pair also owns a
//! nuisance direction `n_p`, an appearance factor that text-level prompts
//! wrongly read as class evidence.
//!
//! Layer-1 prompts are `a_c ~ v_c + confusion * v_sib + 0.5 * s_c * n_p` with
//! opposite signs `s_c` for the two siblings. Layer-2 prompts sit on `v_c`
//! and ignore the nuisance; a nonzero dilution lets prompts for larger
//! candidate sets drift back toward the layer-1 structure.
//!
//! Clean views are `v_c + z * s_c * n_p` plus noise, where the nuisance draw
//! `z` (part shape-level, part per view, scale `nuisance_gain * noise_sigma`)
//! pushes some shapes across the sibling boundary at layer 1 only. The
//! remaining views are ambiguous:
//!
//! * `uniform_mixture`: an even mixture of all classes plus a shape-level
//!   pull toward up to three distractor classes, high entropy but biased;
//! * `wrong_class_leak`: the true class plus a per-view random unrelated
//!   class, giving conflicting mid-entropy decisions.
//!
//! Noise is Gaussian with per-dimension deviation `noise_sigma`, drawn in
//! the complement of the planted directions, so it lowers every view's
//! similarity to all prompts without favoring any class.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_io::{
    normalize_rows, Dataset, DatasetManifest, EmbeddingMatrix, ShapeRecord, ViewConfig,
};
use crate::error::{Error, Result};
use crate::prompt_bank::{Layer2Entry, PromptBank, PromptStyle};

/// Weight of the nuisance direction in layer-1 prompts.
const PROMPT_NUISANCE: f64 = 0.5;
/// Distractor classes per shape in `uniform_mixture` mode.
const DISTRACTORS: usize = 3;
/// Per-class jitter of ambiguous views inside the class subspace.
const AMBIGUOUS_JITTER: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguousMode {
    #[default]
    #[value(name = "uniform_mixture")]
    UniformMixture,
    #[value(name = "wrong_class_leak")]
    WrongClassLeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub shapes_per_class: usize,
    pub views: usize,
    pub clean_views: usize,
    pub noise_sigma: f64,
    pub ambiguous_mode: AmbiguousMode,
    pub seed: u64,
    /// Weight of the sibling direction in layer-1 prompts, in `[0, 1)`.
    pub prompt_confusion: f64,
    /// Nuisance spread of clean views, in units of `noise_sigma`.
    pub nuisance_gain: f64,
    /// Upper bound of the per-shape distractor pull of ambiguous views.
    pub distractor_leak: f64,
    /// Candidate-set sizes for which layer-2 entries are generated.
    pub layer2_set_sizes: Vec<usize>,
    /// Per candidate beyond two, how far layer-2 prompts drift back toward
    /// the layer-1 prompt structure.
    pub layer2_dilution: f64,
}

impl SyntheticSpec {
    /// The fixture used by the acceptance suite: 10 classes, 500 shapes,
    /// 4 clean and 16 ambiguous views per shape.
    pub fn reference() -> Self {
        Self {
            classes: 10,
            dim: 256,
            shapes_per_class: 50,
            views: 20,
            clean_views: 4,
            noise_sigma: 0.2,
            ambiguous_mode: AmbiguousMode::UniformMixture,
            seed: 2024,
            prompt_confusion: 0.5,
            nuisance_gain: 3.0,
            distractor_leak: 0.5,
            layer2_set_sizes: vec![3],
            layer2_dilution: 0.0,
        }
    }

    /// Number of planted directions: one per class plus one per sibling pair.
    pub fn planted_directions(&self) -> usize {
        self.classes + self.classes / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.dim < self.planted_directions() {
            return Err(Error::DimTooSmall {
                dim: self.dim,
                required: self.planted_directions(),
            });
        }
        if self.views == 0 || self.shapes_per_class == 0 {
            return bad("need at least one shape per class and one view per shape".into());
        }
        if self.clean_views > self.views {
            return bad(format!("clean_views {} > views {}", self.clean_views, self.views));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("nuisance_gain", self.nuisance_gain),
            ("distractor_leak", self.distractor_leak),
            ("layer2_dilution", self.layer2_dilution),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.prompt_confusion) {
            return bad(format!("prompt_confusion {} outside [0, 1)", self.prompt_confusion));
        }
        if let Some(&k) = self
            .layer2_set_sizes
            .iter()
            .find(|&&k| k < 2 || k > self.classes)
        {
            return bad(format!("layer-2 set size {k} outside [2, {}]", self.classes));
        }
        Ok(())
    }
}

/// Planted dataset plus its prompt bank.
#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub dataset: Dataset,
    pub bank: PromptBank,
    /// Per view row: whether the view was planted clean.
    pub clean_rows: Vec<bool>,
}

impl SyntheticFixture {
    /// Writes `manifest.json`, `views.emb` and `bank.json` (with its two
    /// EMB1 files) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.save(&dir.join("manifest.json"))?;
        self.bank.save(&dir.join("bank.json"))
    }
}

pub fn sibling(class: usize, classes: usize) -> usize {
    if class ^ 1 < classes {
        class ^ 1
    } else {
        class - 1
    }
}

/// Nuisance direction index and sign of `class`.
fn nuisance_of(class: usize, classes: usize) -> (usize, f64) {
    let sib = sibling(class, classes);
    let sign = if class < sib { 1.0 } else { -1.0 };
    (class.min(sib) / 2, sign)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
    }
}

/// `count` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        project_out(&mut v, &basis);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn combine(terms: &[(f64, &[f64])], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in terms {
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
    }
    out
}

/// All size-`k` subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticFixture> {
    spec.validate()?;
    let (k, dim) = (spec.classes, spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = orthonormal_basis(&mut rng, spec.planted_directions(), dim);
    let (anchors, nuisances) = basis.split_at(k);
    let class_names: Vec<String> = (0..k).map(|c| format!("class_{c:02}")).collect();
    let nuisance_scale = spec.nuisance_gain * spec.noise_sigma / std::f64::consts::SQRT_2;

    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(k * spec.shapes_per_class * spec.views);
    let mut clean_rows = Vec::with_capacity(rows.capacity());
    let mut shapes = Vec::with_capacity(k * spec.shapes_per_class);
    for class in 0..k {
        let sib = sibling(class, k);
        let (pair, sign) = nuisance_of(class, k);
        let unrelated: Vec<usize> = (0..k)
            .filter(|&c| c != class && (c != sib || k <= 2))
            .collect();
        for s in 0..spec.shapes_per_class {
            let mut kinds: Vec<bool> = (0..spec.views).map(|i| i < spec.clean_views).collect();
            kinds.shuffle(&mut rng);
            let shape_nuisance: f64 = rng.sample(StandardNormal);
            let distractors: Vec<usize> = unrelated
                .choose_multiple(&mut rng, DISTRACTORS.min(unrelated.len()))
                .copied()
                .collect();
            let pull = spec.distractor_leak * rng.random::<f64>();
            let first_row = rows.len();
            for &clean in &kinds {
                let mut view = if clean {
                    let view_nuisance: f64 = rng.sample(StandardNormal);
                    let z = nuisance_scale * (shape_nuisance + view_nuisance);
                    combine(&[(1.0, &anchors[class]), (z * sign, &nuisances[pair])], dim)
                } else {
                    let mut weights = vec![0.0; k];
                    match spec.ambiguous_mode {
                        AmbiguousMode::UniformMixture => {
                            weights.fill(1.0 / (k as f64).sqrt());
                            for &d in &distractors {
                                weights[d] += pull;
                            }
                        }
                        AmbiguousMode::WrongClassLeak => {
                            let wrong = unrelated[rng.random_range(0..unrelated.len())];
                            weights[class] = 1.0;
                            weights[wrong] = 1.0;
                        }
                    }
                    for w in &mut weights {
                        *w += AMBIGUOUS_JITTER * rng.sample::<f64, _>(StandardNormal);
                    }
                    let terms: Vec<(f64, &[f64])> =
                        weights.iter().zip(anchors).map(|(&w, a)| (w, a.as_slice())).collect();
                    combine(&terms, dim)
                };
                if spec.noise_sigma > 0.0 {
                    let mut noise = gaussian(&mut rng, dim);
                    project_out(&mut noise, &basis);
                    view.iter_mut().zip(&noise).for_each(|(v, n)| *v += spec.noise_sigma * n);
                }
                rows.push(to_f32(&unit(view)));
                clean_rows.push(clean);
            }
            shapes.push(ShapeRecord {
                shape_id: format!("{}_{s:04}", class_names[class]),
                label: Some(class_names[class].clone()),
                view_rows: (first_row..rows.len()).collect(),
                view_config: ViewConfig::Circular,
            });
        }
    }

    let views = normalize_rows(&EmbeddingMatrix::from_rows(dim, &rows)?)?;
    let manifest = DatasetManifest {
        dataset_name: format!("synthetic-k{k}-seed{}", spec.seed),
        classes: class_names.clone(),
        dim,
        embedding_file: "views.emb".into(),
        shapes,
    };
    let dataset = Dataset::new(manifest, views)?;

    let layer1_rows: Vec<Vec<f32>> = (0..k)
        .map(|c| {
            let (pair, sign) = nuisance_of(c, k);
            to_f32(&unit(combine(
                &[
                    (1.0, &anchors[c]),
                    (spec.prompt_confusion, &anchors[sibling(c, k)]),
                    (PROMPT_NUISANCE * sign, &nuisances[pair]),
                ],
                dim,
            )))
        })
        .collect();
    let layer1 = normalize_rows(&EmbeddingMatrix::from_rows(dim, &layer1_rows)?)?;
    let mut bank = PromptBank::new(class_names, layer1, "synthetic prompt for [class]");

    for &size in &spec.layer2_set_sizes {
        let blur = spec.layer2_dilution * (size - 2) as f64;
        for set in combinations(k, size) {
            let rows: Vec<Vec<f32>> = set
                .iter()
                .map(|&c| {
                    let (pair, sign) = nuisance_of(c, k);
                    to_f32(&unit(combine(
                        &[
                            (1.0, &anchors[c]),
                            (blur * spec.prompt_confusion, &anchors[sibling(c, k)]),
                            (blur * PROMPT_NUISANCE * sign, &nuisances[pair]),
                        ],
                        dim,
                    )))
                })
                .collect();
            let key = bank.key_for_indices(&set)?;
            let entry = Layer2Entry {
                prompt_texts: set
                    .iter()
                    .map(|&c| format!("synthetic description of {} among {key}", bank.classes[c]))
                    .collect(),
                candidate_classes: set,
                embeddings: normalize_rows(&EmbeddingMatrix::from_rows(dim, &rows)?)?,
                prompt_style: PromptStyle::default(),
            };
            bank.insert_layer2(entry)?;
        }
    }

    Ok(SyntheticFixture {
        dataset,
        bank,
        clean_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            dim: 16,
            shapes_per_class: 3,
            views: 6,
            clean_views: 2,
            ..SyntheticSpec::reference()
        }
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn bank_has_all_subsets() {
        let spec = SyntheticSpec {
            layer2_set_sizes: vec![2, 3],
            ..small()
        };
        let f = generate_synthetic(&spec).unwrap();
        assert_eq!(f.bank.layer2.len(), 6 + 4);
        assert!(f.bank.validate().is_empty());
    }

    #[test]
    fn dim_too_small() {
        let spec = SyntheticSpec { dim: 5, ..small() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::DimTooSmall { dim: 5, required: 6 })));
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset.views.data(), b.dataset.views.data());
        assert_eq!(a.bank, b.bank);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset.views.data(), c.dataset.views.data());
    }

    #[test]
    fn siblings_pair_up() {
        assert_eq!(sibling(0, 4), 1);
        assert_eq!(sibling(3, 4), 2);
        assert_eq!(sibling(4, 5), 3);
    }
}
