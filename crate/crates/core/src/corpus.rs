//! Pre-processing: ingestion of line-delimited code records, lexical
//! tokenization, vocabulary building, minimum-count cleaning and the
//! stratified train/test split.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

/// Category key used for secure samples.
pub const SECURE: &str = "secure";
/// Category of vulnerable samples that carry no CWE tag.
pub const CWE_NONE: &str = "CWE-None";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Upstream pre-processing form the code text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RawForm {
    SourceCode,
    CodeGadget,
    Sevc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Secure,
    Vulnerable,
}

impl Label {
    pub fn from_class(class: usize) -> Label {
        if class == 1 {
            Label::Vulnerable
        } else {
            Label::Secure
        }
    }

    pub fn class(self) -> usize {
        match self {
            Label::Secure => 0,
            Label::Vulnerable => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub raw_form: RawForm,
    pub label: Label,
    /// Always `None` for secure samples.
    pub cwe: Option<String>,
    pub project: Option<String>,
}

impl DatasetSample {
    /// Category key: `"secure"`, the CWE tag, or `"CWE-None"` for untagged
    /// vulnerable samples.
    pub fn category(&self) -> &str {
        match (self.label, &self.cwe) {
            (Label::Secure, _) => SECURE,
            (Label::Vulnerable, Some(cwe)) => cwe,
            (Label::Vulnerable, None) => CWE_NONE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    pub fn new(samples: Vec<DatasetSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self) -> BTreeMap<String, usize> {
        category_histogram(self.samples.iter().map(|s| s.category()))
    }

    pub fn vulnerable_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.label == Label::Vulnerable)
            .count()
    }

    /// Encode every sample with `vocab`, keeping the first `max_len` tokens.
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Vec<EncodedSample> {
        self.samples
            .iter()
            .map(|s| EncodedSample {
                sample_id: s.sample_id.clone(),
                ids: vocab.encode(&s.tokens, max_len),
                label: s.label,
                category: s.category().to_string(),
            })
            .collect()
    }
}

pub fn category_histogram<'a>(cats: impl Iterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut hist = BTreeMap::new();
    for c in cats {
        *hist.entry(c.to_string()).or_insert(0) += 1;
    }
    hist
}

/// A sample ready for the model: token ids, truncated, no padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub sample_id: String,
    pub ids: Vec<u32>,
    pub label: Label,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    max_size: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, max_size: usize) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Input(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        if tokens.len() > max_size {
            return Err(Error::Input(format!(
                "vocabulary of {} tokens exceeds max_size {max_size}",
                tokens.len()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(Error::Input("duplicate token in vocabulary".into()));
        }
        Ok(Vocab {
            tokens,
            index,
            max_size,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String], max_len: usize) -> Vec<u32> {
        tokens.iter().take(max_len).map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

/// Frequency-ranked vocabulary. Ties are broken lexicographically; ids 0 and
/// 1 are reserved for PAD and UNK.
pub fn build_vocab(dataset: &Dataset, max_size: usize) -> Result<Vocab> {
    if max_size < 3 {
        return Err(Error::Config(format!("vocab max_size {max_size} < 3")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &dataset.samples {
        for t in &s.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - 2)
            .map(|(t, _)| t.to_string()),
    );
    Vocab::from_tokens(tokens, max_size)
}

const OPERATORS_3: [&str; 3] = ["<<=", ">>=", "..."];
const OPERATORS_2: [&str; 21] = [
    "->", "++", "--", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "::", "##",
];

/// Lexical split of C-like code.
///
/// Identifiers, pp-numbers, string and char literals are single tokens;
/// operators are matched longest first; whitespace and comments are dropped.
pub fn tokenize(code: &str) -> Vec<String> {
    let chars: Vec<char> = code.chars().collect();
    let n = chars.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '/' && i + 1 < n && chars[i + 1] == '/' {
            while i < n && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && i + 1 < n && chars[i + 1] == '*' {
            i += 2;
            while i < n && !(chars[i] == '*' && i + 1 < n && chars[i + 1] == '/') {
                i += 1;
            }
            i = (i + 2).min(n);
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < n && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < n && chars[i + 1].is_ascii_digit()) {
            i += 1;
            while i < n {
                let d = chars[i];
                let exponent_sign =
                    (d == '+' || d == '-') && matches!(chars[i - 1], 'e' | 'E' | 'p' | 'P');
                if d.is_ascii_alphanumeric() || d == '_' || d == '.' || exponent_sign {
                    i += 1;
                } else {
                    break;
                }
            }
        } else if c == '"' || c == '\'' {
            i += 1;
            while i < n && chars[i] != c && chars[i] != '\n' {
                if chars[i] == '\\' {
                    i += 1;
                }
                i += 1;
            }
            i = (i + 1).min(n);
        } else {
            let rest: String = chars[i..n.min(i + 3)].iter().collect();
            let len = if OPERATORS_3.iter().any(|op| rest.starts_with(op)) {
                3
            } else if OPERATORS_2.iter().any(|op| rest.starts_with(op)) {
                2
            } else {
                1
            };
            i += len;
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

fn parse_label(v: &Value) -> Option<Label> {
    match v {
        Value::Number(n) => match n.as_u64() {
            Some(0) => Some(Label::Secure),
            Some(1) => Some(Label::Vulnerable),
            _ => None,
        },
        Value::String(s) => match s.trim() {
            "0" => Some(Label::Secure),
            "1" => Some(Label::Vulnerable),
            _ => None,
        },
        Value::Bool(b) => Some(if *b { Label::Vulnerable } else { Label::Secure }),
        _ => None,
    }
}

fn optional_string(
    obj: &serde_json::Map<String, Value>,
    key: &str,
) -> std::result::Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.trim().to_string())),
        Some(other) => Err(format!("field `{key}` must be a string, got {other}")),
    }
}

/// Read one record per line. Blank lines are skipped; every other line must
/// be a JSON object with `code`, `label` and optional `cwe` / `project`.
pub fn load_jsonl(path: &Path, form: RawForm) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path, form)
}

/// [`load_jsonl`] over any reader; `path` names the source in sample ids
/// (`<file stem>:<line>`) and error messages.
pub fn read_jsonl<R: BufRead>(reader: R, path: &Path, form: RawForm) -> Result<Dataset> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let schema_err = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| record_err("record is not an object".into()))?;
        let code = obj
            .get("code")
            .and_then(Value::as_str)
            .ok_or_else(|| record_err("missing string field `code`".into()))?;
        let raw_label = obj
            .get("label")
            .ok_or_else(|| record_err("missing field `label`".into()))?;
        let label = parse_label(raw_label)
            .ok_or_else(|| schema_err(format!("unknown label value {raw_label}")))?;
        let mut cwe = optional_string(obj, "cwe").map_err(schema_err)?;
        let project = optional_string(obj, "project").map_err(schema_err)?;
        if label == Label::Secure {
            match cwe.as_deref() {
                None => {}
                Some(tag) if tag.eq_ignore_ascii_case(SECURE) => cwe = None,
                Some(tag) => {
                    return Err(schema_err(format!("secure sample tagged with `{tag}`")));
                }
            }
        }
        let tokens = tokenize(code);
        if tokens.is_empty() {
            return Err(record_err("code has no tokens".into()));
        }
        samples.push(DatasetSample {
            sample_id: format!("{stem}:{line_no}"),
            tokens,
            raw_form: form,
            label,
            cwe,
            project,
        });
    }
    Ok(Dataset { samples })
}

/// Drop vulnerable categories with fewer than `min_count` samples. Secure
/// samples are always kept.
pub fn clean_min_count(dataset: &Dataset, min_count: usize) -> Dataset {
    let hist = dataset.label_histogram();
    let samples = dataset
        .samples
        .iter()
        .filter(|s| s.label == Label::Secure || hist[s.category()] >= min_count)
        .cloned()
        .collect();
    Dataset { samples }
}

/// `floor(count * fraction)`, robust to `0.29 * 100 = 28.999...`.
pub(crate) fn floor_share(count: usize, fraction: f64) -> usize {
    ((count as f64 * fraction) + 1e-9).floor() as usize
}

/// Stratified split: every category sends `floor(count * train_fraction)`
/// seeded-shuffled samples to train and the rest to test. Both halves keep
/// the input order.
pub fn split_train_test(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_category.entry(s.category()).or_default().push(i);
    }
    let mut in_train = vec![false; dataset.len()];
    for (cat_idx, (_, mut members)) in by_category.into_iter().enumerate() {
        let mut rng = rng::stream(seed, &[rng::TAG_SPLIT, cat_idx as u64]);
        members.shuffle(&mut rng);
        let n_train = floor_share(members.len(), train_fraction);
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in dataset.samples.iter().zip(&in_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((Dataset::new(train), Dataset::new(test)))
}
