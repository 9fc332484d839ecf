//! AUC, thresholded classification metrics and per-pattern breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidInput(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|y| **y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(format!(
            "AUC needs both classes; got {n_pos} positive and {n_neg} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let rank = (i + j + 2) as f64 / 2.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += rank * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn compute(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (s, y) in scores.iter().zip(labels) {
            match (*s >= threshold, *y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Absent when the labels hold a single class.
    pub auc: Option<f64>,
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub n_instances: usize,
    pub threshold: f64,
}

impl MetricReport {
    pub fn from_confusion(c: Confusion, auc: Option<f64>, threshold: f64) -> Self {
        let pre = ratio(c.tp, c.tp + c.fp);
        let rec = ratio(c.tp, c.tp + c.fn_);
        let f1 = if pre + rec > 0.0 {
            2.0 * pre * rec / (pre + rec)
        } else {
            0.0
        };
        MetricReport {
            auc,
            acc: ratio(c.tp + c.tn, c.total()),
            pre,
            rec,
            f1,
            n_instances: c.total(),
            threshold,
        }
    }

    pub const TSV_HEADER: &'static str = "auc\tacc\tpre\trec\tf1\tn";

    pub fn tsv_row(&self) -> String {
        let auc = self
            .auc
            .map_or_else(|| "NA".to_string(), |a| format!("{a:.4}"));
        format!(
            "{auc}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.acc, self.pre, self.rec, self.f1, self.n_instances
        )
    }
}

/// Confusion-matrix metrics at `threshold` (predicted positive iff
/// `score >= threshold`), plus AUC when both classes occur.
pub fn classify_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to evaluate".into()));
    }
    let c = Confusion::compute(scores, labels, threshold);
    Ok(MetricReport::from_confusion(
        c,
        auc(scores, labels).ok(),
        threshold,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatternBreakdown {
    pub groups: BTreeMap<String, MetricReport>,
}

impl PatternBreakdown {
    pub const OTHER: &'static str = "other";

    /// Rows sorted by group size, largest first.
    pub fn to_tsv(&self) -> String {
        let mut rows: Vec<(&String, &MetricReport)> = self.groups.iter().collect();
        rows.sort_by(|a, b| b.1.n_instances.cmp(&a.1.n_instances).then(a.0.cmp(b.0)));
        let mut out = format!("pattern\t{}\n", MetricReport::TSV_HEADER);
        for (p, r) in rows {
            out.push_str(&format!("{p}\t{}\n", r.tsv_row()));
        }
        out
    }
}

/// Groups by thread pattern; patterns with fewer than `min_count` instances
/// are pooled under `"other"`.
pub fn breakdown_by_pattern(
    patterns: &[String],
    labels: &[bool],
    scores: &[f64],
    min_count: usize,
    threshold: f64,
) -> Result<PatternBreakdown> {
    check_inputs(scores, labels)?;
    if patterns.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} patterns for {} scores",
            patterns.len(),
            scores.len()
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in patterns {
        *counts.entry(p).or_default() += 1;
    }
    let mut members: BTreeMap<String, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((p, s), y) in patterns.iter().zip(scores).zip(labels) {
        let key = if counts[p.as_str()] >= min_count {
            p.clone()
        } else {
            PatternBreakdown::OTHER.to_string()
        };
        let g = members.entry(key).or_default();
        g.0.push(*s);
        g.1.push(*y);
    }
    let groups = members
        .into_iter()
        .map(|(k, (s, y))| Ok((k, classify_metrics(&s, &y, threshold)?)))
        .collect::<Result<_>>()?;
    Ok(PatternBreakdown { groups })
}

pub fn pattern_breakdown(
    instances: &[Instance],
    scores: &[f64],
    min_count: usize,
    threshold: f64,
) -> Result<PatternBreakdown> {
    let patterns: Vec<String> = instances
        .iter()
        .map(|i| i.pattern().as_str().to_string())
        .collect();
    let labels: Vec<bool> = instances.iter().map(|i| i.y_main).collect();
    breakdown_by_pattern(&patterns, &labels, scores, min_count, threshold)
}

/// First epoch (1-based) whose value reaches `target`.
pub fn epochs_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|v| *v >= target).map(|i| i + 1)
}
