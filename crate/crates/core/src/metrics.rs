//! Label aggregation and the evaluation metrics: per-class precision, recall
//! and F1, accuracy, macro averages, Fleiss' kappa and per-category recall.
//!
//! Any 0/0 ratio is taken as 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Claim, HallucinationCategory, Label};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("segment has no claims")]
    EmptySegment,
    #[error("response has no segments")]
    EmptyResponse,
    #[error("length mismatch: {preds} predictions, {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no labels to score")]
    EmptyInput,
    #[error("invalid ratings matrix: {0}")]
    InvalidMatrix(String),
    #[error("expected agreement is 1 but observed agreement is not")]
    DegenerateMarginals,
    #[error("gold-hallucinatory claim {0} has no category tags")]
    MissingCategoryTags(String),
}

/// A segment is hallucinatory if any of its claims is.
pub fn derive_segment_label(claim_labels: &[Label]) -> Result<Label, MetricsError> {
    any_hallucinatory(claim_labels).ok_or(MetricsError::EmptySegment)
}

/// A response is hallucinatory if any of its segments is.
pub fn derive_response_label(segment_labels: &[Label]) -> Result<Label, MetricsError> {
    any_hallucinatory(segment_labels).ok_or(MetricsError::EmptyResponse)
}

fn any_hallucinatory(labels: &[Label]) -> Option<Label> {
    if labels.is_empty() {
        return None;
    }
    Some(if labels.iter().any(|l| l.is_hallucinatory()) {
        Label::Hallucinatory
    } else {
        Label::NonHallucinatory
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Claim,
    Segment,
    Response,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Claim, Level::Segment, Level::Response];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Claim => "claim",
            Level::Segment => "segment",
            Level::Response => "response",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub hallucinatory: ClassCounts,
    pub non_hallucinatory: ClassCounts,
    pub total: u64,
}

pub fn confusion(preds: &[Label], golds: &[Label]) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut c = ConfusionCounts {
        total: preds.len() as u64,
        ..Default::default()
    };
    for (&p, &g) in preds.iter().zip(golds) {
        let gold = match g {
            Label::Hallucinatory => &mut c.hallucinatory,
            Label::NonHallucinatory => &mut c.non_hallucinatory,
        };
        if p == g {
            gold.tp += 1;
            continue;
        }
        gold.fn_ += 1;
        match p {
            Label::Hallucinatory => c.hallucinatory.fp += 1,
            Label::NonHallucinatory => c.non_hallucinatory.fp += 1,
        }
    }
    Ok(c)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(c: ClassCounts) -> Prf1 {
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    Prf1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

/// All values are fractions in [0, 1]; emitters render percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub hallucinatory: Prf1,
    pub non_hallucinatory: Prf1,
    pub accuracy: f64,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub macro_f1: f64,
    pub counts: ConfusionCounts,
    /// Items whose prediction is an unverified fallback.
    #[serde(default)]
    pub unverified: u64,
}

pub fn report(preds: &[Label], golds: &[Label], level: Level) -> Result<MetricsReport, MetricsError> {
    let counts = confusion(preds, golds)?;
    if counts.total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let h = prf1(counts.hallucinatory);
    let nh = prf1(counts.non_hallucinatory);
    Ok(MetricsReport {
        level,
        hallucinatory: h,
        non_hallucinatory: nh,
        accuracy: (counts.hallucinatory.tp + counts.non_hallucinatory.tp) as f64 / counts.total as f64,
        avg_precision: (h.precision + nh.precision) / 2.0,
        avg_recall: (h.recall + nh.recall) / 2.0,
        macro_f1: (h.f1 + nh.f1) / 2.0,
        counts,
        unverified: 0,
    })
}

/// Fraction to a percentage with two decimals, halves rounded away from zero.
pub fn percent(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

pub fn percent_str(fraction: f64) -> String {
    format!("{:.2}", percent(fraction))
}

fn row_values(r: &MetricsReport) -> [f64; 10] {
    [
        r.hallucinatory.precision,
        r.hallucinatory.recall,
        r.hallucinatory.f1,
        r.non_hallucinatory.precision,
        r.non_hallucinatory.recall,
        r.non_hallucinatory.f1,
        r.accuracy,
        r.avg_precision,
        r.avg_recall,
        r.macro_f1,
    ]
}

const COLUMNS: [&str; 10] = ["H.P", "H.R", "H.F1", "NH.P", "NH.R", "NH.F1", "Acc", "Avg.P", "Avg.R", "Mac.F1"];

/// Aligned text table: hallucinatory P/R/F1, non-hallucinatory P/R/F1,
/// then accuracy, average P, average R and macro F1.
pub fn to_table(reports: &[MetricsReport]) -> String {
    let mut out = format!("{:<9}", "level");
    for c in COLUMNS {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<9}", r.level.as_str());
        for v in row_values(r) {
            let _ = write!(out, " {:>7}", percent_str(v));
        }
        out.push('\n');
    }
    out
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "level,h_precision,h_recall,h_f1,nh_precision,nh_recall,nh_f1,accuracy,avg_precision,avg_recall,macro_f1,total,unverified\n",
    );
    for r in reports {
        out.push_str(r.level.as_str());
        for v in row_values(r) {
            out.push(',');
            out.push_str(&percent_str(v));
        }
        let _ = writeln!(out, ",{},{}", r.counts.total, r.unverified);
    }
    out
}

/// JSON with percentages rounded for display, plus raw counts.
pub fn to_json(reports: &[MetricsReport], categories: Option<&BTreeMap<HallucinationCategory, CategoryRecall>>) -> serde_json::Value {
    let class = |p: &Prf1| {
        serde_json::json!({
            "precision": percent(p.precision),
            "recall": percent(p.recall),
            "f1": percent(p.f1),
        })
    };
    let rows: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "level": r.level,
                "hallucinatory": class(&r.hallucinatory),
                "non_hallucinatory": class(&r.non_hallucinatory),
                "accuracy": percent(r.accuracy),
                "avg_precision": percent(r.avg_precision),
                "avg_recall": percent(r.avg_recall),
                "macro_f1": percent(r.macro_f1),
                "counts": r.counts,
                "unverified": r.unverified,
            })
        })
        .collect();
    let mut out = serde_json::json!({"zero_division": 0, "reports": rows});
    if let Some(cats) = categories {
        let map: serde_json::Map<String, serde_json::Value> = cats
            .iter()
            .map(|(c, r)| {
                (
                    c.code().to_string(),
                    serde_json::json!({"detected": r.detected, "total": r.total, "recall": percent(r.recall)}),
                )
            })
            .collect();
        out["category_recall"] = serde_json::Value::Object(map);
    }
    out
}

/// Items × categories; each cell counts the raters choosing that category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingsMatrix {
    rows: Vec<Vec<u32>>,
}

impl RatingsMatrix {
    pub fn new(rows: Vec<Vec<u32>>) -> Result<Self, MetricsError> {
        if rows.len() < 2 {
            return Err(MetricsError::InvalidMatrix("need at least 2 items".into()));
        }
        let k = rows[0].len();
        if k == 0 {
            return Err(MetricsError::InvalidMatrix("need at least 1 category".into()));
        }
        if rows.iter().any(|r| r.len() != k) {
            return Err(MetricsError::InvalidMatrix("rows have different category counts".into()));
        }
        let n: u32 = rows[0].iter().sum();
        if rows.iter().any(|r| r.iter().sum::<u32>() != n) {
            return Err(MetricsError::InvalidMatrix("row sums differ".into()));
        }
        if n < 2 {
            return Err(MetricsError::InvalidMatrix("need at least 2 raters".into()));
        }
        Ok(RatingsMatrix { rows })
    }

    pub fn raters(&self) -> u32 {
        self.rows[0].iter().sum()
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }
}

pub fn fleiss_kappa(m: &RatingsMatrix) -> Result<f64, MetricsError> {
    let n = m.raters() as f64;
    let items = m.rows.len() as f64;
    let k = m.rows[0].len();
    let p_bar = m
        .rows
        .iter()
        .map(|r| {
            let sq: f64 = r.iter().map(|&c| (c as f64) * (c as f64)).sum();
            (sq - n) / (n * (n - 1.0))
        })
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = m.rows.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    let unanimous = m.rows.iter().all(|r| r.iter().any(|&c| c as f64 == n));
    if unanimous {
        return Ok(1.0);
    }
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Err(MetricsError::DegenerateMarginals);
    }
    Ok(((p_bar - p_e) / (1.0 - p_e)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub detected: u64,
    pub total: u64,
    pub recall: f64,
}

/// Recall over gold-hallucinatory claims, per category. A claim with several
/// tags counts once toward each of them.
pub fn per_category_recall(
    preds: &[Label],
    golds: &[&Claim],
) -> Result<BTreeMap<HallucinationCategory, CategoryRecall>, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut tally: BTreeMap<HallucinationCategory, (u64, u64)> = BTreeMap::new();
    for (&pred, claim) in preds.iter().zip(golds) {
        if claim.gold_label != Some(Label::Hallucinatory) {
            continue;
        }
        let tags = claim
            .gold_categories
            .as_ref()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| MetricsError::MissingCategoryTags(claim.key()))?;
        for &cat in tags {
            let e = tally.entry(cat).or_default();
            e.1 += 1;
            if pred.is_hallucinatory() {
                e.0 += 1;
            }
        }
    }
    Ok(tally
        .into_iter()
        .map(|(c, (detected, total))| {
            (
                c,
                CategoryRecall {
                    detected,
                    total,
                    recall: ratio(detected as f64, total as f64),
                },
            )
        })
        .collect())
}
