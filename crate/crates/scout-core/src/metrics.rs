//! Multi-label evaluation: per-label and per-group precision/recall/F1,
//! group-macro averages, exact-match and per-label agreement rates.
//!
//! Zero denominators follow one convention everywhere: the affected value
//! is reported as 0 and flagged undefined, so long-tail labels that were
//! never predicted cannot inflate macro scores. The group macro averages
//! over groups with at least one active label; undefined components
//! contribute their 0 value.
//!
//! [`reference`] holds a deliberately naive re-implementation (nested
//! loops, no shared accumulation) used to cross-check this module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelVector;
use crate::taxonomy::{GroupId, Taxonomy};
use crate::train::LabelSource;

/// Per-label confusion cells. `fn_` carries a trailing underscore because
/// `fn` is reserved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl LabelCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: LabelCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Confusion cells for every label over a prediction/reference pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub labels: Vec<LabelCounts>,
    pub n_scenes: usize,
}

/// Precision/recall/F1 with per-metric zero-division flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

impl Prf {
    pub fn from_counts(c: &LabelCounts) -> Prf {
        let p_den = c.tp + c.fp;
        let r_den = c.tp + c.fn_;
        let precision_defined = p_den > 0;
        let recall_defined = r_den > 0;
        let precision = if precision_defined {
            c.tp as f64 / p_den as f64
        } else {
            0.0
        };
        let recall = if recall_defined {
            c.tp as f64 / r_den as f64
        } else {
            0.0
        };
        let f1_defined = precision_defined && recall_defined && precision + recall > 0.0;
        let f1 = if f1_defined {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            precision_defined,
            recall_defined,
            f1_defined,
        }
    }

    /// True when any component hit a zero denominator.
    pub fn undefined(&self) -> bool {
        !(self.precision_defined && self.recall_defined && self.f1_defined)
    }
}

/// One label's row in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub group: GroupId,
    pub counts: LabelCounts,
    pub prf: Prf,
}

/// One group's micro-accumulated row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: GroupId,
    pub n_labels: usize,
    pub counts: LabelCounts,
    pub prf: Prf,
}

/// The full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    pub reference_source: LabelSource,
    pub per_label: Vec<LabelMetrics>,
    /// Populated groups only, ascending by group.
    pub per_group: Vec<GroupMetrics>,
    /// Primary macro: unweighted mean over the populated groups.
    pub macro_group: Prf,
    /// Secondary macro: unweighted mean over all active labels.
    pub macro_label: Prf,
    pub exact_match_rate: f64,
    pub label_agreement_rate: f64,
}

fn check_paired(preds: &[LabelVector], refs: &[LabelVector]) -> Result<usize> {
    if preds.len() != refs.len() {
        return Err(Error::Validation(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    let width = match preds.first() {
        None => return Ok(0),
        Some(p) => p.len(),
    };
    for (i, (p, r)) in preds.iter().zip(refs).enumerate() {
        if p.len() != width || r.len() != width {
            return Err(Error::Validation(format!(
                "scene {i}: vector lengths {} / {} vs expected {width}",
                p.len(),
                r.len()
            )));
        }
    }
    Ok(width)
}

/// Per-label confusion counting.
pub fn confusion(preds: &[LabelVector], refs: &[LabelVector]) -> Result<ConfusionCounts> {
    let width = check_paired(preds, refs)?;
    let mut labels = vec![LabelCounts::default(); width];
    for (p, r) in preds.iter().zip(refs) {
        for (i, c) in labels.iter_mut().enumerate() {
            match (p[i], r[i]) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                (a, b) => {
                    return Err(Error::Validation(format!(
                        "scene labels must be 0/1, found ({a}, {b})"
                    )))
                }
            }
        }
    }
    Ok(ConfusionCounts {
        labels,
        n_scenes: preds.len(),
    })
}

/// Per-label precision/recall/F1.
pub fn prf(counts: &ConfusionCounts) -> Vec<Prf> {
    counts.labels.iter().map(Prf::from_counts).collect()
}

/// Micro-accumulated counts for every group (all six, including empty
/// ones, which come out as zero counts).
pub fn group_counts(
    counts: &ConfusionCounts,
    taxonomy: &Taxonomy,
) -> Result<BTreeMap<GroupId, LabelCounts>> {
    if counts.labels.len() != taxonomy.n_labels() {
        return Err(Error::Validation(format!(
            "{} labels in counts vs {} active in taxonomy",
            counts.labels.len(),
            taxonomy.n_labels()
        )));
    }
    let mut groups: BTreeMap<GroupId, LabelCounts> = GroupId::ALL
        .iter()
        .map(|&g| (g, LabelCounts::default()))
        .collect();
    for (i, c) in counts.labels.iter().enumerate() {
        groups
            .get_mut(&taxonomy.group_of(i)?)
            .expect("all groups present")
            .add(*c);
    }
    Ok(groups)
}

/// Within-group micro P/R/F1 for every group.
pub fn group_prf(counts: &ConfusionCounts, taxonomy: &Taxonomy) -> Result<BTreeMap<GroupId, Prf>> {
    Ok(group_counts(counts, taxonomy)?
        .into_iter()
        .map(|(g, c)| (g, Prf::from_counts(&c)))
        .collect())
}

/// Unweighted mean of P/R/F1 over the given rows (the populated groups,
/// for the primary macro). Undefined components contribute their 0 value;
/// the macro's own flags record whether any row had the component
/// defined. Errors if every row is entirely undefined.
pub fn macro_average(rows: &[Prf]) -> Result<Prf> {
    if rows.is_empty() || rows.iter().all(Prf::undefined_everywhere) {
        return Err(Error::Validation(
            "macro average over no defined values".into(),
        ));
    }
    let n = rows.len() as f64;
    Ok(Prf {
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        precision_defined: rows.iter().any(|r| r.precision_defined),
        recall_defined: rows.iter().any(|r| r.recall_defined),
        f1_defined: rows.iter().any(|r| r.f1_defined),
    })
}

impl Prf {
    fn undefined_everywhere(&self) -> bool {
        !self.precision_defined && !self.recall_defined && !self.f1_defined
    }
}

/// Fraction of scenes whose whole vector matches.
pub fn exact_match_rate(preds: &[LabelVector], refs: &[LabelVector]) -> Result<f64> {
    check_paired(preds, refs)?;
    if preds.is_empty() {
        return Err(Error::Validation("exact match over zero scenes".into()));
    }
    let hits = preds.iter().zip(refs).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of individual label bits that match.
pub fn agreement_rate(preds: &[LabelVector], refs: &[LabelVector]) -> Result<f64> {
    let width = check_paired(preds, refs)?;
    if preds.is_empty() || width == 0 {
        return Err(Error::Validation("agreement over zero bits".into()));
    }
    let mut hits = 0u64;
    for (p, r) in preds.iter().zip(refs) {
        hits += p.iter().zip(r).filter(|(a, b)| a == b).count() as u64;
    }
    Ok(hits as f64 / (preds.len() as u64 * width as u64) as f64)
}

impl MetricsReport {
    /// Assemble the full report for a prediction/reference pairing.
    pub fn compute(
        preds: &[LabelVector],
        refs: &[LabelVector],
        taxonomy: &Taxonomy,
        reference_source: LabelSource,
    ) -> Result<MetricsReport> {
        if preds.is_empty() {
            return Err(Error::Validation("no scenes to evaluate".into()));
        }
        let counts = confusion(preds, refs)?;
        if counts.labels.len() != taxonomy.n_labels() {
            return Err(Error::Validation(format!(
                "{} labels in predictions vs {} active in taxonomy",
                counts.labels.len(),
                taxonomy.n_labels()
            )));
        }
        let per_label: Vec<LabelMetrics> = counts
            .labels
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Ok(LabelMetrics {
                    label: taxonomy.id_at(i)?.to_string(),
                    group: taxonomy.group_of(i)?,
                    counts: *c,
                    prf: Prf::from_counts(c),
                })
            })
            .collect::<Result<_>>()?;

        let by_group = group_counts(&counts, taxonomy)?;
        let mut label_tally: BTreeMap<GroupId, usize> = BTreeMap::new();
        for i in 0..taxonomy.n_labels() {
            *label_tally.entry(taxonomy.group_of(i)?).or_default() += 1;
        }
        let per_group: Vec<GroupMetrics> = by_group
            .into_iter()
            .filter_map(|(group, c)| {
                let n_labels = label_tally.get(&group).copied().unwrap_or(0);
                (n_labels > 0).then(|| GroupMetrics {
                    group,
                    n_labels,
                    counts: c,
                    prf: Prf::from_counts(&c),
                })
            })
            .collect();

        let group_rows: Vec<Prf> = per_group.iter().map(|g| g.prf).collect();
        let label_rows: Vec<Prf> = per_label.iter().map(|l| l.prf).collect();
        Ok(MetricsReport {
            n_scenes: counts.n_scenes,
            reference_source,
            macro_group: macro_average(&group_rows)?,
            macro_label: macro_average(&label_rows)?,
            per_label,
            per_group,
            exact_match_rate: exact_match_rate(preds, refs)?,
            label_agreement_rate: agreement_rate(preds, refs)?,
        })
    }

    /// Aligned plain-text table: one row per populated group, one
    /// "Macro Avg." row, then the scene-level rates.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .per_group
            .iter()
            .map(|g| group_row_name(g).len())
            .chain(["Macro Avg.".len()])
            .max()
            .unwrap_or(10);
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>9}  {:>9}\n",
            "Group", "Precision", "Recall", "F1"
        ));
        for g in &self.per_group {
            out.push_str(&format!(
                "{:<name_w$}  {:>9}  {:>9}  {:>9}{}\n",
                group_row_name(g),
                fmt3(g.prf.precision),
                fmt3(g.prf.recall),
                fmt3(g.prf.f1),
                if g.prf.undefined() { "  (undefined)" } else { "" },
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>9}  {:>9}  {:>9}\n",
            "Macro Avg.",
            fmt3(self.macro_group.precision),
            fmt3(self.macro_group.recall),
            fmt3(self.macro_group.f1),
        ));
        out.push_str(&format!("Exact Match Rate      {}\n", fmt3(self.exact_match_rate)));
        out.push_str(&format!(
            "Label Agreement Rate  {}\n",
            fmt3(self.label_agreement_rate)
        ));
        out.push_str(&format!(
            "({} scenes, reference: {:?})\n",
            self.n_scenes, self.reference_source
        ));
        out
    }
}

fn group_row_name(g: &GroupMetrics) -> String {
    format!(
        "{}. {} ({} labels)",
        g.group.numeral(),
        g.group.short_title(),
        g.n_labels
    )
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Deliberately naive re-implementations used as test oracles: nothing is
/// shared with the fast paths above, and every quantity is recounted from
/// scratch with plain nested loops.
pub mod reference {
    use super::*;

    pub fn confusion(preds: &[LabelVector], refs: &[LabelVector]) -> Result<ConfusionCounts> {
        let width = super::check_paired(preds, refs)?;
        let mut labels = Vec::new();
        for label in 0..width {
            let mut c = LabelCounts::default();
            for scene in 0..preds.len() {
                let p = preds[scene][label];
                let r = refs[scene][label];
                if p > 1 || r > 1 {
                    return Err(Error::Validation("labels must be 0/1".into()));
                }
                if p == 1 && r == 1 {
                    c.tp += 1;
                } else if p == 1 && r == 0 {
                    c.fp += 1;
                } else if p == 0 && r == 1 {
                    c.fn_ += 1;
                } else {
                    c.tn += 1;
                }
            }
            labels.push(c);
        }
        Ok(ConfusionCounts {
            labels,
            n_scenes: preds.len(),
        })
    }

    pub fn report(
        preds: &[LabelVector],
        refs: &[LabelVector],
        taxonomy: &Taxonomy,
        reference_source: LabelSource,
    ) -> Result<MetricsReport> {
        if preds.is_empty() {
            return Err(Error::Validation("no scenes to evaluate".into()));
        }
        let counts = confusion(preds, refs)?;
        if counts.labels.len() != taxonomy.n_labels() {
            return Err(Error::Validation("label/taxonomy mismatch".into()));
        }

        let mut per_label = Vec::new();
        for (i, c) in counts.labels.iter().enumerate() {
            per_label.push(LabelMetrics {
                label: taxonomy.id_at(i)?.to_string(),
                group: taxonomy.group_of(i)?,
                counts: *c,
                prf: Prf::from_counts(c),
            });
        }

        let mut per_group = Vec::new();
        for group in GroupId::ALL {
            let mut c = LabelCounts::default();
            let mut n_labels = 0;
            for i in 0..taxonomy.n_labels() {
                if taxonomy.group_of(i)? == group {
                    n_labels += 1;
                    let lc = counts.labels[i];
                    c.tp += lc.tp;
                    c.fp += lc.fp;
                    c.fn_ += lc.fn_;
                    c.tn += lc.tn;
                }
            }
            if n_labels > 0 {
                per_group.push(GroupMetrics {
                    group,
                    n_labels,
                    counts: c,
                    prf: Prf::from_counts(&c),
                });
            }
        }

        let macro_group =
            super::macro_average(&per_group.iter().map(|g| g.prf).collect::<Vec<_>>())?;
        let macro_label =
            super::macro_average(&per_label.iter().map(|l| l.prf).collect::<Vec<_>>())?;

        let mut exact = 0u64;
        for scene in 0..preds.len() {
            let mut all = true;
            for label in 0..preds[scene].len() {
                if preds[scene][label] != refs[scene][label] {
                    all = false;
                }
            }
            if all {
                exact += 1;
            }
        }
        let mut agree = 0u64;
        let mut bits = 0u64;
        for scene in 0..preds.len() {
            for label in 0..preds[scene].len() {
                bits += 1;
                if preds[scene][label] == refs[scene][label] {
                    agree += 1;
                }
            }
        }

        Ok(MetricsReport {
            n_scenes: preds.len(),
            reference_source,
            per_label,
            per_group,
            macro_group,
            macro_label,
            exact_match_rate: exact as f64 / preds.len() as f64,
            label_agreement_rate: agree as f64 / bits as f64,
        })
    }
}
