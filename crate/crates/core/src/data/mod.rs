//! Relation-instance records, validation, vocabulary and dataset splits.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec, NA_RELATION, RELATION_NAMES};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

/// One sentence with a head/tail entity pair. Spans are half-open token
/// ranges `[start, end)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub tokens: Vec<String>,
    pub head: (usize, usize),
    pub tail: (usize, usize),
    pub relation: Option<String>,
    pub domain: String,
}

impl InstanceRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("empty tokens".into());
        }
        let n = self.tokens.len();
        for (name, (s, e)) in [("head", self.head), ("tail", self.tail)] {
            if !(s < e && e <= n) {
                return Err(format!("span out of range: {name} ({s}, {e}) on {n} tokens"));
            }
        }
        let (h, t) = (self.head, self.tail);
        if h.0 < t.1 && t.0 < h.1 {
            return Err("overlapping spans".into());
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub records: Vec<InstanceRecord>,
    pub rejected: Vec<LineError>,
}

/// Parses one record per line; bad lines are collected, not fatal.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        match serde_json::from_str::<InstanceRecord>(&line) {
            Ok(rec) => match rec.validate() {
                Ok(()) => report.records.push(rec),
                Err(reason) => report.rejected.push(LineError { line: lineno, reason }),
            },
            Err(e) => report.rejected.push(LineError {
                line: lineno,
                reason: format!("malformed record: {e}"),
            }),
        }
    }
    Ok(report)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::MissingArtifact(format!("data file {} not found", path.display()))
        }
        _ => Error::Io(e),
    })?;
    parse_jsonl(BufReader::new(file))
}

pub fn to_jsonl(records: &[InstanceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[InstanceRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_jsonl(records).as_bytes())?;
    Ok(())
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != UNK {
            return Err(Error::Data("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingArtifact(format!("vocabulary {} not found", path.display()))
            }
            _ => Error::Io(e),
        })?;
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Tokens seen at least `min_count` times, ordered by frequency (descending)
/// then lexicographically, after the reserved `<pad>` and `<unk>`.
pub fn build_vocab(records: &[InstanceRecord], min_count: usize) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::contract("build_vocab on an empty record list"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        for t in &r.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && t != PAD && t != UNK)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec![PAD.to_string(), UNK.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// Sorted distinct relation labels.
pub fn label_set<'a>(records: impl IntoIterator<Item = &'a InstanceRecord>) -> Vec<String> {
    records
        .into_iter()
        .filter_map(|r| r.relation.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Seeded uniform choice of `count` classes, returned sorted.
pub fn choose_classes(observed: &[String], count: usize, seed: u64) -> Result<Vec<String>> {
    if count == 0 || count > observed.len() {
        return Err(Error::config(format!(
            "cannot keep {count} of {} classes",
            observed.len()
        )));
    }
    let mut sorted: Vec<String> = observed.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<String> = sorted.choose_multiple(&mut rng, count).cloned().collect();
    picked.sort();
    Ok(picked)
}

/// Drops target-domain records whose label is outside the kept set. With
/// `kept = None`, half of the observed classes (rounded down, at least one)
/// are chosen with `seed`. Returns the filtered records and the kept set.
pub fn subset_label_space(
    records: &[InstanceRecord],
    kept: Option<&[String]>,
    seed: u64,
) -> Result<(Vec<InstanceRecord>, Vec<String>)> {
    let observed = label_set(records);
    let kept: Vec<String> = match kept {
        Some(k) => {
            if k.is_empty() {
                return Err(Error::contract("kept class set is empty"));
            }
            if let Some(bad) = k.iter().find(|c| !observed.contains(c)) {
                return Err(Error::contract(format!("kept class {bad:?} is not observed")));
            }
            let mut k = k.to_vec();
            k.sort();
            k.dedup();
            k
        }
        None => choose_classes(&observed, (observed.len() / 2).max(1), seed)?,
    };
    let out = records
        .iter()
        .filter(|r| {
            r.domain != TARGET
                || r.relation.as_ref().map_or(true, |rel| kept.binary_search(rel).is_ok())
        })
        .cloned()
        .collect();
    Ok((out, kept))
}

/// Seeded shuffle followed by contiguous cuts at the cumulative fractions.
pub fn split<T: Clone>(records: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n = records.len();
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            ((n as f64 * cum).round() as usize).clamp(start, n)
        };
        parts.push(order[start..end].iter().map(|&j| records[j].clone()).collect());
        start = end;
    }
    Ok(parts)
}

/// Per-domain, per-class instance counts.
pub fn class_counts(records: &[InstanceRecord]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        let rel = r.relation.clone().unwrap_or_else(|| "<unlabeled>".into());
        *out.entry(r.domain.clone()).or_default().entry(rel).or_default() += 1;
    }
    out
}
