//! Similarity logits, softmax and Shannon entropy. All reductions accumulate
//! in `f64` regardless of the `f32` storage type.

use serde::{Deserialize, Serialize};

use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Logit scale applied to cosine similarities unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Index of the largest value; the lowest index wins exact ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// One score per class, already multiplied by the temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsVector {
    pub values: Vec<f64>,
    pub temperature: f64,
}

impl LogitsVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    pub values: Vec<f64>,
}

impl ProbabilityVector {
    /// Accepts values in `[0, 1]` summing to 1 within `1e-9`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let in_range = values.iter().all(|p| (0.0..=1.0).contains(p));
        let sum: f64 = values.iter().sum();
        if values.is_empty() || !in_range || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(Self { values })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `temperature * <view, prompt_j>` for every prompt row `j`.
pub fn compute_logits(
    view: &[f32],
    prompts: &EmbeddingMatrix,
    temperature: f64,
) -> Result<LogitsVector> {
    check_temperature(temperature)?;
    if view.len() != prompts.cols() {
        return Err(Error::DimMismatch {
            expected: prompts.cols(),
            found: view.len(),
        });
    }
    let values = prompts
        .iter_rows()
        .map(|row| temperature * dot(view, row))
        .collect();
    Ok(LogitsVector {
        values,
        temperature,
    })
}

/// Softmax with max subtraction.
pub fn softmax_values(values: &[f64]) -> ProbabilityVector {
    if values.is_empty() {
        return ProbabilityVector { values: Vec::new() };
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total = sorted_sum(exps.clone());
    ProbabilityVector {
        values: exps.into_iter().map(|e| e / total).collect(),
    }
}

pub fn softmax(logits: &LogitsVector) -> ProbabilityVector {
    softmax_values(&logits.values)
}

/// `1 - max(softmax(values))`, computed from the non-maximal terms so it
/// stays positive even when the maximum probability rounds to 1.
pub fn residual_mass(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let top = argmax(values);
    let max = values[top];
    let rest = sorted_sum(
        values
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, v)| (v - max).exp())
            .collect(),
    );
    rest / (1.0 + rest)
}

/// Sums in ascending order, so the result does not depend on input order.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_bits(p: &ProbabilityVector) -> f64 {
    let h = -sorted_sum(
        p.values
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.log2())
            .collect(),
    );
    if h > 0.0 {
        h
    } else {
        0.0
    }
}

pub fn view_entropy(view: &[f32], prompts: &EmbeddingMatrix, temperature: f64) -> Result<f64> {
    Ok(entropy_bits(&softmax(&compute_logits(view, prompts, temperature)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn logits_examples() {
        let basis = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let l = compute_logits(&[1.0, 0.0], &basis, 1.0).unwrap();
        assert_eq!(l.values, vec![1.0, 0.0]);

        let single = EmbeddingMatrix::from_rows(2, &[[0.0f32, 1.0]]).unwrap();
        let l = compute_logits(&[0.6, 0.8], &single, 100.0).unwrap();
        assert!((l.values[0] - 80.0).abs() < 1e-4);
    }

    #[test]
    fn logits_errors() {
        let basis = EmbeddingMatrix::from_rows(2, &[[1.0f32, 0.0]]).unwrap();
        assert!(matches!(compute_logits(&[1.0], &basis, 1.0), Err(Error::DimMismatch { .. })));
        assert!(matches!(
            compute_logits(&[1.0, 0.0], &basis, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(compute_logits(&[1.0, 0.0], &basis, f64::NAN).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_values(&[0.0, 0.0, 0.0]);
        for v in &p.values {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_values(&[2f64.ln(), 0.0]);
        assert!((p.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_values(&[1000.0, 0.0]);
        assert_eq!(p.values, vec![1.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_bits(&probs(&[0.5, 0.5])), 1.0);
        assert_eq!(entropy_bits(&probs(&[1.0, 0.0, 0.0])), 0.0);
        assert_eq!(entropy_bits(&probs(&[0.5, 0.25, 0.25])), 1.5);
    }

    #[test]
    fn equidistant_view_has_max_entropy() {
        let prompts = EmbeddingMatrix::from_rows(3, &[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let v = (1.0f32 / 3.0).sqrt();
        let h = view_entropy(&[v, v, v], &prompts, 100.0).unwrap();
        assert!((h - 3f64.log2()).abs() < 1e-12);
        let h = view_entropy(&[1.0, 0.0, 0.0], &prompts, 1e4).unwrap();
        assert!(h < 1e-12);
    }

    #[test]
    fn residual_mass_survives_saturation() {
        let values = [200.0, 0.0];
        assert_eq!(softmax_values(&values).max(), 1.0);
        assert!(residual_mass(&values) > 0.0);
        let r = residual_mass(&[(0.97f64 / 0.03).ln(), 0.0]);
        assert!((r - 0.03).abs() < 1e-12);
        assert_eq!(residual_mass(&[1.0, 1.0]), 0.5);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn probability_vector_rejects_bad_input() {
        assert!(ProbabilityVector::new(vec![0.6, 0.6]).is_err());
        assert!(ProbabilityVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
    }
}
