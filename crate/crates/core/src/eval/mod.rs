//! Held-out metrics and the CSV tables experiments emit.

mod experiments;

pub use experiments::{
    finetune_curve, run_ablations, sweep_target_classes, AblationRow, DataSource, FinetuneRow,
    SweepRow,
};

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub gold: usize,
    pub predicted: usize,
    /// Largest class probability.
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn accuracy(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("accuracy of no predictions"));
    }
    Ok(ratio(preds.iter().filter(|p| p.predicted == p.gold).count(), preds.len()))
}

/// Micro-averaged scores over every class except `na`.
pub fn micro_f1(preds: &[Prediction], na: Option<usize>) -> Result<MicroScores> {
    if preds.is_empty() {
        return Err(Error::contract("micro F1 of no predictions"));
    }
    let is_na = |l: usize| Some(l) == na;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for p in preds {
        if p.predicted == p.gold {
            if !is_na(p.gold) {
                tp += 1;
            }
            continue;
        }
        if !is_na(p.predicted) {
            fp += 1;
        }
        if !is_na(p.gold) {
            fn_ += 1;
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MicroScores { precision, recall, f1 })
}

/// Non-NA predictions, most confident first, ties by ascending id.
pub fn ranked(preds: &[Prediction], na: Option<usize>) -> Vec<&Prediction> {
    let mut r: Vec<&Prediction> = preds.iter().filter(|p| Some(p.predicted) != na).collect();
    r.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    r
}

pub fn precision_at_k(preds: &[Prediction], k: usize, na: Option<usize>) -> Result<f64> {
    let r = ranked(preds, na);
    if k == 0 || k > r.len() {
        return Err(Error::contract(format!("precision@{k} over {} ranked predictions", r.len())));
    }
    Ok(ratio(r[..k].iter().filter(|p| p.predicted == p.gold).count(), k))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per rank of the confidence-ordered non-NA predictions.
/// Recall is relative to the number of non-NA gold labels.
pub fn pr_curve(preds: &[Prediction], na: Option<usize>) -> Vec<PrPoint> {
    let positives = preds.iter().filter(|p| Some(p.gold) != na).count();
    let mut tp = 0;
    ranked(preds, na)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.predicted == p.gold {
                tp += 1;
            }
            PrPoint {
                rank: i + 1,
                confidence: p.confidence,
                precision: ratio(tp, i + 1),
                recall: ratio(tp, positives),
            }
        })
        .collect()
}

/// Trapezoid area under the emitted (recall, precision) points.
pub fn pr_auc(points: &[PrPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0)
        .sum()
}

/// Rounds to the six decimals written to CSV, so tables survive a round trip.
pub fn round6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

pub(crate) fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// A row type with a fixed CSV header.
pub trait CsvRow: Sized {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
    fn from_fields(fields: &csv::StringRecord) -> Result<Self>;
}

pub fn to_csv<T: CsvRow>(rows: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(T::HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv<T: CsvRow>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != T::HEADER {
        return Err(Error::Data(format!("unexpected CSV header {:?}", header)));
    }
    r.records().map(|rec| T::from_fields(&rec?)).collect()
}

pub(crate) fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("bad CSV field {i} in {rec:?}")))
}

impl CsvRow for PrPoint {
    const HEADER: &'static [&'static str] = &["rank", "confidence", "precision", "recall"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.rank.to_string(),
            fmt6(self.confidence),
            fmt6(self.precision),
            fmt6(self.recall),
        ]
    }
    fn from_fields(rec: &csv::StringRecord) -> Result<Self> {
        Ok(PrPoint {
            rank: field(rec, 0)?,
            confidence: field(rec, 1)?,
            precision: field(rec, 2)?,
            recall: field(rec, 3)?,
        })
    }
}

/// Headline numbers of one evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub micro_f1_excl_na: f64,
    /// Precision over the top min(k, ranked) predictions.
    pub precision_at_k: f64,
    pub k: usize,
    pub pr_auc: f64,
}

impl Metrics {
    pub fn compute(preds: &[Prediction], na: Option<usize>, k: usize) -> Result<Self> {
        let ranked_len = ranked(preds, na).len();
        let k = k.min(ranked_len);
        let p_at_k = if k == 0 { 0.0 } else { precision_at_k(preds, k, na)? };
        Ok(Metrics {
            accuracy: round6(accuracy(preds)?),
            micro_f1_excl_na: round6(micro_f1(preds, na)?.f1),
            precision_at_k: round6(p_at_k),
            k,
            pr_auc: round6(pr_auc(&pr_curve(preds, na))),
        })
    }

    /// `metric,value` table.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\naccuracy,{}\nmicro_f1_excl_na,{}\nprecision_at_{},{}\npr_auc,{}\n",
            fmt6(self.accuracy),
            fmt6(self.micro_f1_excl_na),
            self.k,
            fmt6(self.precision_at_k),
            fmt6(self.pr_auc)
        )
    }
}

/// `instance_id,gold,predicted,confidence` table with label names.
pub fn predictions_csv(preds: &[Prediction], labels: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["instance_id", "gold", "predicted", "confidence"])?;
    for p in preds {
        w.write_record([
            p.id.to_string(),
            labels[p.gold].clone(),
            labels[p.predicted].clone(),
            fmt6(p.confidence),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
