//! Two-layer prompt embeddings.
//!
//! Layer 1 holds one hand-written template prompt per class. Layer 2 holds,
//! per candidate set, one generated description per candidate class. Layer-2
//! entries are produced offline and looked up by a canonical candidate key:
//! the candidate class names ordered by class index and joined with `|`.
//!
//! On disk a bank is a JSON document that references two EMB1 files, one for
//! layer 1 and one holding all layer-2 rows back to back.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding_io::{
    normalize_rows, read_embeddings_file, write_embeddings_file, EmbeddingMatrix,
    UNIT_NORM_TOLERANCE,
};
use crate::error::{Error, Result};

pub const KEY_SEPARATOR: &str = "|";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    VisualOnly,
    FunctionalOnly,
    Fused,
    Difference,
    #[default]
    VisualAndFunctional,
}

/// Layer-2 prompts for one candidate set. Row `j` of `embeddings` and
/// `prompt_texts[j]` describe `candidate_classes[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer2Entry {
    /// Class indices, ascending.
    pub candidate_classes: Vec<usize>,
    pub embeddings: EmbeddingMatrix,
    pub prompt_texts: Vec<String>,
    pub prompt_style: PromptStyle,
}

impl Layer2Entry {
    /// Row holding the prompt of `class`, if it is a candidate.
    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.candidate_classes.iter().position(|&c| c == class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FindingCode {
    EmptyClasses,
    DuplicateClass,
    DimMismatch,
    Layer1RowCount,
    NormViolation,
    CandidateSetTooSmall,
    UnknownCandidateClass,
    DuplicateCandidate,
    UnsortedCandidates,
    KeyMismatch,
    EmbeddingRowCount,
    PromptTextCount,
}

impl fmt::Display for FindingCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        write!(f, "{}", s.as_str().unwrap_or("UNKNOWN"))
    }
}

/// A single invariant violation, e.g. `NORM_VIOLATION` at `layer1[3]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub location: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.code, self.location)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub classes: Vec<String>,
    /// K x C layer-1 prompt embeddings, row `j` for `classes[j]`.
    pub layer1: EmbeddingMatrix,
    pub layer1_template: String,
    pub layer2: BTreeMap<String, Layer2Entry>,
    pub dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankFile {
    classes: Vec<String>,
    dim: usize,
    layer1_template: String,
    layer1_file: PathBuf,
    #[serde(default)]
    layer2_file: Option<PathBuf>,
    #[serde(default)]
    layer2_entries: Vec<EntryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryFile {
    key: String,
    classes: Vec<String>,
    row_start: usize,
    row_count: usize,
    prompt_texts: Vec<String>,
    prompt_style: PromptStyle,
}

impl PromptBank {
    /// A bank with layer-1 prompts only.
    pub fn new(classes: Vec<String>, layer1: EmbeddingMatrix, layer1_template: impl Into<String>) -> Self {
        let dim = layer1.cols();
        Self {
            classes,
            layer1,
            layer1_template: layer1_template.into(),
            layer2: BTreeMap::new(),
            dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Canonical key for a candidate set given by class indices.
    pub fn key_for_indices(&self, indices: &[usize]) -> Result<String> {
        if indices.len() < 2 {
            return Err(Error::CandidateSetTooSmall(indices.len()));
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::DuplicateCandidate(self.class_name(pair[0])));
            }
        }
        let names = sorted
            .iter()
            .map(|&i| {
                self.classes
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| Error::UnknownClass(format!("#{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(names.join(KEY_SEPARATOR))
    }

    /// Canonical key for a candidate set given by class names, in any order.
    pub fn candidate_key<S: AsRef<str>>(&self, names: &[S]) -> Result<String> {
        let indices = names
            .iter()
            .map(|n| {
                self.class_index(n.as_ref())
                    .ok_or_else(|| Error::UnknownClass(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.key_for_indices(&indices)
    }

    fn class_name(&self, index: usize) -> String {
        self.classes
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("#{index}"))
    }

    /// Entry for the candidate set, or `MissingPromptEntry` carrying the key
    /// that has to be generated offline.
    pub fn lookup_layer2(&self, candidates: &[usize]) -> Result<&Layer2Entry> {
        let key = self.key_for_indices(candidates)?;
        match self.layer2.get(&key) {
            Some(entry) => Ok(entry),
            None => Err(Error::MissingPromptEntry(key)),
        }
    }

    /// Stores `entry` under its canonical key, replacing any previous entry,
    /// and returns the key.
    pub fn insert_layer2(&mut self, entry: Layer2Entry) -> Result<String> {
        let key = self.key_for_indices(&entry.candidate_classes)?;
        self.layer2.insert(key.clone(), entry);
        Ok(key)
    }

    /// Checks every bank invariant and reports all violations found.
    pub fn validate(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut push = |code, location: String| findings.push(Finding { code, location });

        if self.classes.is_empty() {
            push(FindingCode::EmptyClasses, "classes".into());
        }
        let mut seen = HashSet::new();
        for (i, class) in self.classes.iter().enumerate() {
            if !seen.insert(class) {
                push(FindingCode::DuplicateClass, format!("classes[{i}]"));
            }
        }
        if self.layer1.cols() != self.dim {
            push(FindingCode::DimMismatch, "layer1".into());
        }
        if self.layer1.rows() != self.classes.len() {
            push(FindingCode::Layer1RowCount, "layer1".into());
        }
        for row in self.layer1.non_unit_rows(UNIT_NORM_TOLERANCE) {
            push(FindingCode::NormViolation, format!("layer1[{row}]"));
        }

        for (key, entry) in &self.layer2 {
            let at = |what: &str| format!("layer2[{key}]{what}");
            let k = entry.candidate_classes.len();
            if k < 2 {
                push(FindingCode::CandidateSetTooSmall, at(""));
            }
            if entry.candidate_classes.iter().any(|&c| c >= self.classes.len()) {
                push(FindingCode::UnknownCandidateClass, at(".classes"));
            }
            let unique: HashSet<_> = entry.candidate_classes.iter().collect();
            if unique.len() != k {
                push(FindingCode::DuplicateCandidate, at(".classes"));
            }
            if entry.candidate_classes.windows(2).any(|w| w[0] > w[1]) {
                push(FindingCode::UnsortedCandidates, at(".classes"));
            }
            let expected_key = entry
                .candidate_classes
                .iter()
                .map(|&c| self.class_name(c))
                .collect::<Vec<_>>()
                .join(KEY_SEPARATOR);
            if &expected_key != key {
                push(FindingCode::KeyMismatch, at(""));
            }
            if entry.embeddings.rows() != k {
                push(FindingCode::EmbeddingRowCount, at(".embeddings"));
            }
            if entry.embeddings.cols() != self.dim {
                push(FindingCode::DimMismatch, at(".embeddings"));
            }
            if entry.prompt_texts.len() != k {
                push(FindingCode::PromptTextCount, at(".prompt_texts"));
            }
            for row in entry.embeddings.non_unit_rows(UNIT_NORM_TOLERANCE) {
                push(FindingCode::NormViolation, at(&format!("[{row}]")));
            }
        }
        findings
    }

    /// Row-normalizes both layers.
    pub fn normalized(mut self) -> Result<Self> {
        self.layer1 = normalize_rows(&self.layer1)?;
        for entry in self.layer2.values_mut() {
            entry.embeddings = normalize_rows(&entry.embeddings)?;
        }
        Ok(self)
    }

    /// Writes `<stem>.json` plus `<stem>.layer1.emb` and `<stem>.layer2.emb`
    /// next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("bank")
            .to_string();
        let layer1_file = PathBuf::from(format!("{stem}.layer1.emb"));
        let layer2_file = PathBuf::from(format!("{stem}.layer2.emb"));

        let mut entries = Vec::with_capacity(self.layer2.len());
        let mut parts = Vec::with_capacity(self.layer2.len());
        let mut row_start = 0;
        for (key, entry) in &self.layer2 {
            entries.push(EntryFile {
                key: key.clone(),
                classes: entry.candidate_classes.iter().map(|&c| self.class_name(c)).collect(),
                row_start,
                row_count: entry.embeddings.rows(),
                prompt_texts: entry.prompt_texts.clone(),
                prompt_style: entry.prompt_style,
            });
            row_start += entry.embeddings.rows();
            parts.push(&entry.embeddings);
        }
        let layer2 = EmbeddingMatrix::concat(self.dim, &parts)?;

        write_embeddings_file(&self.layer1, &dir.join(&layer1_file))?;
        write_embeddings_file(&layer2, &dir.join(&layer2_file))?;
        let file = BankFile {
            classes: self.classes.clone(),
            dim: self.dim,
            layer1_template: self.layer1_template.clone(),
            layer1_file,
            layer2_file: Some(layer2_file),
            layer2_entries: entries,
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Reads a bank exactly as stored: no normalization and no invariant
    /// checks beyond what is needed to assemble it. Use [`PromptBank::load`]
    /// for anything that feeds the classifier.
    pub fn load_raw(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BankFile =
            serde_json::from_str(&text).map_err(|e| Error::BankSchema(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new("."));

        if file.dim == 0 {
            return Err(Error::BankSchema("dim must be at least 1".into()));
        }
        let layer1 = read_embeddings_file(&dir.join(&file.layer1_file))?;
        if layer1.cols() != file.dim {
            return Err(Error::DimMismatch {
                expected: file.dim,
                found: layer1.cols(),
            });
        }
        let mut bank = PromptBank {
            classes: file.classes,
            layer1,
            layer1_template: file.layer1_template,
            layer2: BTreeMap::new(),
            dim: file.dim,
        };

        let layer2 = match &file.layer2_file {
            Some(p) => read_embeddings_file(&dir.join(p))?,
            None if file.layer2_entries.is_empty() => EmbeddingMatrix::empty(file.dim)?,
            None => return Err(Error::BankSchema("layer2_entries without layer2_file".into())),
        };
        if layer2.cols() != file.dim {
            return Err(Error::DimMismatch {
                expected: file.dim,
                found: layer2.cols(),
            });
        }

        let mut ranges: Vec<(usize, usize)> = file
            .layer2_entries
            .iter()
            .map(|e| (e.row_start, e.row_count))
            .collect();
        ranges.sort_unstable();
        let mut cursor = 0;
        for (start, count) in ranges {
            if start != cursor {
                return Err(Error::BankSchema(format!(
                    "layer-2 row ranges must tile the layer-2 file (gap or overlap at row {start})"
                )));
            }
            cursor += count;
        }
        if cursor != layer2.rows() {
            return Err(Error::BankSchema(format!(
                "layer-2 entries cover {cursor} rows but the file has {}",
                layer2.rows()
            )));
        }

        for e in file.layer2_entries {
            let candidate_classes = e
                .classes
                .iter()
                .map(|n| bank.class_index(n).ok_or_else(|| Error::UnknownClass(n.clone())))
                .collect::<Result<Vec<_>>>()?;
            let entry = Layer2Entry {
                candidate_classes,
                embeddings: layer2.slice_rows(e.row_start, e.row_count)?,
                prompt_texts: e.prompt_texts,
                prompt_style: e.prompt_style,
            };
            if bank.layer2.insert(e.key.clone(), entry).is_some() {
                return Err(Error::BankSchema(format!("duplicate layer-2 key {:?}", e.key)));
            }
        }
        Ok(bank)
    }

    /// Loads, normalizes and validates a bank; any finding is fatal.
    pub fn load(path: &Path) -> Result<Self> {
        let bank = Self::load_raw(path)?.normalized()?;
        let findings = bank.validate();
        if findings.is_empty() {
            Ok(bank)
        } else {
            Err(Error::InvalidBank(findings))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(k: usize) -> EmbeddingMatrix {
        let mut data = vec![0.0f32; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        EmbeddingMatrix::new(k, k, data).unwrap()
    }

    fn bank() -> PromptBank {
        let classes = ["bed", "desk", "dresser", "table", "wardrobe"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        PromptBank::new(classes, normalize_rows(&basis(5)).unwrap(), "a view of [class]")
    }

    fn entry(classes: Vec<usize>, dim: usize) -> Layer2Entry {
        let rows: Vec<Vec<f32>> = classes
            .iter()
            .map(|&c| {
                let mut r = vec![0.0; dim];
                r[c] = 1.0;
                r
            })
            .collect();
        Layer2Entry {
            prompt_texts: classes.iter().map(|c| format!("text {c}")).collect(),
            candidate_classes: classes,
            embeddings: EmbeddingMatrix::from_rows(dim, &rows).unwrap(),
            prompt_style: PromptStyle::default(),
        }
    }

    #[test]
    fn key_is_sorted_by_class_index() {
        let b = bank();
        assert_eq!(b.candidate_key(&["wardrobe", "dresser"]).unwrap(), "dresser|wardrobe");
        assert_eq!(b.candidate_key(&["dresser", "wardrobe"]).unwrap(), "dresser|wardrobe");
        assert!(matches!(b.candidate_key(&["dresser", "unicorn"]), Err(Error::UnknownClass(n)) if n == "unicorn"));
        assert!(matches!(b.candidate_key(&["dresser"]), Err(Error::CandidateSetTooSmall(1))));
        assert!(matches!(b.candidate_key(&["desk", "desk"]), Err(Error::DuplicateCandidate(_))));
    }

    #[test]
    fn lookup_hit_and_miss() {
        let mut b = bank();
        b.insert_layer2(entry(vec![0, 1], 5)).unwrap();
        assert_eq!(b.lookup_layer2(&[1, 0]).unwrap().embeddings.rows(), 2);
        match b.lookup_layer2(&[3, 0, 1]) {
            Err(Error::MissingPromptEntry(key)) => assert_eq!(key, "bed|desk|table"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_findings() {
        let mut b = bank();
        assert!(b.validate().is_empty());

        let mut data = b.layer1.data().to_vec();
        data[3 * 5 + 3] = 2.0;
        b.layer1 = EmbeddingMatrix::new(5, 5, data).unwrap();
        let small = entry(vec![2], 5);
        b.layer2.insert("dresser".into(), small);
        let findings = b.validate();
        assert!(findings.contains(&Finding {
            code: FindingCode::NormViolation,
            location: "layer1[3]".into()
        }));
        assert!(findings.iter().any(|f| f.code == FindingCode::CandidateSetTooSmall));
        assert_eq!(findings[0].to_string(), "NORM_VIOLATION at layer1[3]");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bank();
        b.insert_layer2(entry(vec![2, 4], 5)).unwrap();
        b.insert_layer2(entry(vec![0, 1, 3], 5)).unwrap();
        let path = dir.path().join("bank.json");
        b.save(&path).unwrap();
        let back = PromptBank::load(&path).unwrap();
        assert_eq!(back.classes, b.classes);
        assert_eq!(back.layer1.data(), b.layer1.data());
        for (key, e) in &b.layer2 {
            let got = &back.layer2[key];
            assert_eq!(got.candidate_classes, e.candidate_classes);
            assert_eq!(got.embeddings.data(), e.embeddings.data());
            assert_eq!(got.prompt_texts, e.prompt_texts);
        }
    }
}
