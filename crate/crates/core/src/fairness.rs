//! Per-group confusion counts, group utilities and difference-based parity
//! metrics. Undefined ratios are `None` ("Missing") and propagate into every
//! delta that depends on them; they are never replaced by zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::TabularInstance;

#[derive(Debug, Error, PartialEq)]
pub enum FairnessError {
    #[error("prediction for instance {0} which is not in the evaluation set")]
    UnknownInstance(u64),
    #[error("instance {id} has group `{group}` outside the configured pair")]
    UnknownGroup { id: u64, group: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, label: bool, prediction: bool) {
        match (label, prediction) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub groups: [String; 2],
    pub counts: [Counts; 2],
    /// Instances of each group without a usable prediction.
    pub excluded: [usize; 2],
}

/// Tallies predictions against labels for each of the two groups.
/// Eval instances without a prediction are counted as excluded.
pub fn confusion_by_group(
    predictions: &BTreeMap<u64, bool>,
    eval: &[TabularInstance],
    groups: &[String; 2],
) -> Result<GroupConfusion, FairnessError> {
    let ids: BTreeSet<u64> = eval.iter().map(|i| i.id).collect();
    if let Some(id) = predictions.keys().find(|id| !ids.contains(id)) {
        return Err(FairnessError::UnknownInstance(*id));
    }
    let mut counts = [Counts::default(); 2];
    let mut excluded = [0usize; 2];
    for inst in eval {
        let g = groups
            .iter()
            .position(|g| *g == inst.group)
            .ok_or_else(|| FairnessError::UnknownGroup {
                id: inst.id,
                group: inst.group.clone(),
            })?;
        match predictions.get(&inst.id) {
            Some(&p) => counts[g].add(inst.label, p),
            None => excluded[g] += 1,
        }
    }
    Ok(GroupConfusion {
        groups: groups.clone(),
        counts,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupUtility {
    pub acc: Option<f64>,
    pub tpr: Option<f64>,
    pub ppv: Option<f64>,
    pub fpr: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl GroupUtility {
    pub fn from_counts(c: &Counts) -> Self {
        let tpr = ratio(c.tp, c.tp + c.fn_);
        let ppv = ratio(c.tp, c.tp + c.fp);
        let f1 = match (ppv, tpr) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Self {
            acc: ratio(c.tp + c.tn, c.total()),
            tpr,
            ppv,
            fpr: ratio(c.fp, c.fp + c.tn),
            f1,
        }
    }
}

pub fn group_utilities(confusion: &GroupConfusion) -> [GroupUtility; 2] {
    [
        GroupUtility::from_counts(&confusion.counts[0]),
        GroupUtility::from_counts(&confusion.counts[1]),
    ]
}

/// Absolute between-group differences. `d_eo_sum` is the sum of the TPR
/// and FPR gaps, `d_eo_max` their maximum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessDeltas {
    pub d_acc: Option<f64>,
    pub d_tpr: Option<f64>,
    pub d_ppv: Option<f64>,
    pub d_fpr: Option<f64>,
    pub d_f1: Option<f64>,
    pub d_eo_sum: Option<f64>,
    pub d_eo_max: Option<f64>,
}

fn abs_diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

pub fn fairness_deltas(u1: &GroupUtility, u2: &GroupUtility) -> FairnessDeltas {
    let d_tpr = abs_diff(u1.tpr, u2.tpr);
    let d_fpr = abs_diff(u1.fpr, u2.fpr);
    FairnessDeltas {
        d_acc: abs_diff(u1.acc, u2.acc),
        d_tpr,
        d_ppv: abs_diff(u1.ppv, u2.ppv),
        d_fpr,
        d_f1: abs_diff(u1.f1, u2.f1),
        d_eo_sum: d_tpr.zip(d_fpr).map(|(t, f)| t + f),
        d_eo_max: d_tpr.zip(d_fpr).map(|(t, f)| t.max(f)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    DAcc,
    DEoMax,
    DEoSum,
    DPpv,
    DF1,
    DTpr,
    DFpr,
}

impl MetricName {
    /// Report column order.
    pub const ALL: [MetricName; 7] = [
        MetricName::DAcc,
        MetricName::DEoMax,
        MetricName::DEoSum,
        MetricName::DPpv,
        MetricName::DF1,
        MetricName::DTpr,
        MetricName::DFpr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::DAcc => "d_acc",
            MetricName::DEoMax => "d_eo_max",
            MetricName::DEoSum => "d_eo_sum",
            MetricName::DPpv => "d_ppv",
            MetricName::DF1 => "d_f1",
            MetricName::DTpr => "d_tpr",
            MetricName::DFpr => "d_fpr",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetricName::DAcc => "ΔACC",
            MetricName::DEoMax => "ΔEO",
            MetricName::DEoSum => "ΔEO(sum)",
            MetricName::DPpv => "ΔPPV",
            MetricName::DF1 => "ΔF1",
            MetricName::DTpr => "ΔTPR",
            MetricName::DFpr => "ΔFPR",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

impl FairnessDeltas {
    pub fn get(&self, metric: MetricName) -> Option<f64> {
        match metric {
            MetricName::DAcc => self.d_acc,
            MetricName::DEoMax => self.d_eo_max,
            MetricName::DEoSum => self.d_eo_sum,
            MetricName::DPpv => self.d_ppv,
            MetricName::DF1 => self.d_f1,
            MetricName::DTpr => self.d_tpr,
            MetricName::DFpr => self.d_fpr,
        }
    }
}

/// Confusion, utilities and deltas of one predictor over an eval set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: GroupConfusion,
    pub utilities: [GroupUtility; 2],
    pub deltas: FairnessDeltas,
}

impl Evaluation {
    pub fn excluded(&self) -> usize {
        self.confusion.excluded.iter().sum()
    }

    pub fn evaluated(&self) -> usize {
        self.confusion.counts.iter().map(Counts::total).sum()
    }
}

pub fn evaluate(
    predictions: &BTreeMap<u64, bool>,
    eval: &[TabularInstance],
    groups: &[String; 2],
) -> Result<Evaluation, FairnessError> {
    let confusion = confusion_by_group(predictions, eval, groups)?;
    let utilities = group_utilities(&confusion);
    let deltas = fairness_deltas(&utilities[0], &utilities[1]);
    Ok(Evaluation {
        confusion,
        utilities,
        deltas,
    })
}
