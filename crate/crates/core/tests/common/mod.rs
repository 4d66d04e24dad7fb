//! Independent oracles and small builders shared by the integration tests.
#![allow(dead_code)]

use mvzero::embedding_io::{DatasetManifest, EmbeddingMatrix, ShapeRecord, ViewConfig};
use mvzero::prompt_bank::{Layer2Entry, PromptBank, PromptStyle};
use mvzero::Dataset;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Shannon entropy in bits straight from the definition, natural log based.
pub fn entropy_oracle(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &q in p {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    h / std::f64::consts::LN_2
}

/// `tau * <view, prompt>` per prompt row, one multiply-add at a time.
pub fn logits_oracle(view: &[f32], prompts: &[Vec<f32>], tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let mut acc = 0.0f64;
        for i in 0..view.len() {
            acc += view[i] as f64 * prompt[i] as f64;
        }
        out.push(tau * acc);
    }
    out
}

/// Softmax written without max subtraction, for moderate inputs only.
pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn matrix(dim: usize, rows: &[Vec<f32>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(dim, rows).unwrap()
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("c{c}")).collect()
}

/// Dataset from `(label index, views)` pairs.
pub fn dataset(k: usize, dim: usize, shapes: &[(usize, Vec<Vec<f32>>)]) -> Dataset {
    let names = class_names(k);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (i, (label, views)) in shapes.iter().enumerate() {
        let start = rows.len();
        rows.extend(views.iter().cloned());
        records.push(ShapeRecord {
            shape_id: format!("s{i:04}"),
            label: Some(names[*label].clone()),
            view_rows: (start..rows.len()).collect(),
            view_config: ViewConfig::Circular,
        });
    }
    let manifest = DatasetManifest {
        dataset_name: "handmade".into(),
        classes: names,
        dim,
        embedding_file: "views.emb".into(),
        shapes: records,
    };
    Dataset::new(manifest, matrix(dim, &rows)).unwrap()
}

/// Standard basis vector `e_i` in `dim` dimensions.
pub fn basis(i: usize, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Bank whose layer-1 prompts are the given rows, without layer-2 entries.
pub fn bank(k: usize, dim: usize, layer1: &[Vec<f32>]) -> PromptBank {
    PromptBank::new(class_names(k), matrix(dim, layer1), "a view of [class]")
}

pub fn entry(candidates: &[usize], dim: usize, rows: &[Vec<f32>]) -> Layer2Entry {
    let mut candidate_classes = candidates.to_vec();
    candidate_classes.sort_unstable();
    let rows: Vec<Vec<f32>> = candidate_classes
        .iter()
        .map(|c| rows[candidates.iter().position(|x| x == c).unwrap()].clone())
        .collect();
    Layer2Entry {
        prompt_texts: candidate_classes.iter().map(|c| format!("about c{c}")).collect(),
        candidate_classes,
        embeddings: mvzero::embedding_io::normalize_rows(&matrix(dim, &rows)).unwrap(),
        prompt_style: PromptStyle::default(),
    }
}
