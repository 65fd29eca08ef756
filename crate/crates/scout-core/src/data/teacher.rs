//! The calibrated noisy teacher.
//!
//! The teacher is modelled as independent asymmetric bit-flips of the
//! ground-truth labels: a positive survives with probability `1 − fn_i`,
//! a negative flips on with probability `fp_i`. For a label of group `g`
//! with positive rate π and targets `(P_g, R_g)`:
//!
//! * `fn_i = 1 − R_g` makes expected recall exactly `R_g`;
//! * `fp_i = π·R_g·(1−P_g) / (P_g·(1−π))` makes expected precision
//!   exactly `P_g`, since precision = πR / (πR + (1−π)fp).
//!
//! Flips are keyed by the scene id, not the scene's position, so teacher
//! labels are stable under reordering, splitting, or regeneration with a
//! larger corpus.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::model::LabelVector;
use crate::rng::RngState;
use crate::taxonomy::{GroupId, Taxonomy};

use super::SceneRecord;

/// Target precision/recall for one taxonomy group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrTargets {
    pub precision: f64,
    pub recall: f64,
}

impl PrTargets {
    pub fn f1(&self) -> f64 {
        2.0 * self.precision * self.recall / (self.precision + self.recall)
    }
}

/// Teacher quality targets plus the seed for its flip streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub targets: BTreeMap<GroupId, PrTargets>,
    pub seed: u64,
}

impl TeacherConfig {
    /// The measured per-group quality of the reference teacher model.
    pub fn default_reference(seed: u64) -> TeacherConfig {
        let mut targets = BTreeMap::new();
        targets.insert(
            GroupId::II,
            PrTargets {
                precision: 0.91,
                recall: 0.88,
            },
        );
        targets.insert(
            GroupId::III,
            PrTargets {
                precision: 0.85,
                recall: 0.79,
            },
        );
        targets.insert(
            GroupId::IV,
            PrTargets {
                precision: 0.87,
                recall: 0.75,
            },
        );
        targets.insert(
            GroupId::V,
            PrTargets {
                precision: 0.83,
                recall: 0.86,
            },
        );
        TeacherConfig { targets, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("teacher has no group targets".into()));
        }
        for (g, t) in &self.targets {
            if !(t.precision > 0.0 && t.precision < 1.0 && t.recall > 0.0 && t.recall < 1.0) {
                return Err(Error::Config(format!(
                    "group {g} targets ({}, {}) must lie in (0, 1)",
                    t.precision, t.recall
                )));
            }
        }
        Ok(())
    }

    pub fn digest_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("teacher config serialises");
        crate::digest::fnv1a64_hex(json.as_bytes())
    }
}

/// Per-label flip rates derived from group targets and prevalence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCalibration {
    pub fn_rates: Vec<f64>,
    pub fp_rates: Vec<f64>,
    seed: u64,
}

impl TeacherCalibration {
    /// Solve the closed forms for every active label.
    pub fn calibrate(
        config: &TeacherConfig,
        prevalence: &[f64],
        taxonomy: &Taxonomy,
    ) -> Result<TeacherCalibration> {
        config.validate()?;
        if prevalence.len() != taxonomy.n_labels() {
            return Err(Error::Config(format!(
                "prevalence has {} entries, taxonomy has {} active labels",
                prevalence.len(),
                taxonomy.n_labels()
            )));
        }
        let mut fn_rates = Vec::with_capacity(prevalence.len());
        let mut fp_rates = Vec::with_capacity(prevalence.len());
        for (i, &pi) in prevalence.iter().enumerate() {
            let group = taxonomy.group_of(i)?;
            let label = taxonomy.id_at(i)?;
            let t = config.targets.get(&group).ok_or_else(|| {
                Error::Calibration(format!("label {label}: no targets for group {group}"))
            })?;
            let fp = pi * t.recall * (1.0 - t.precision) / (t.precision * (1.0 - pi));
            if fp >= 1.0 {
                return Err(Error::Calibration(format!(
                    "label {label}: implied false-positive rate {fp:.4} ≥ 1 \
                     (π={pi}, P={}, R={})",
                    t.precision, t.recall
                )));
            }
            fn_rates.push(1.0 - t.recall);
            fp_rates.push(fp);
        }
        Ok(TeacherCalibration {
            fn_rates,
            fp_rates,
            seed: config.seed,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.fn_rates.len()
    }

    /// Teacher labels for one scene, keyed by its id.
    pub fn label_scene(&self, scene_id: &str, y_true: &LabelVector) -> Result<LabelVector> {
        if y_true.len() != self.n_labels() {
            return Err(Error::Validation(format!(
                "scene {scene_id}: {} labels vs calibration for {}",
                y_true.len(),
                self.n_labels()
            )));
        }
        let mut stream = RngState::new(self.seed)
            .child("teacher", fnv1a64(scene_id.as_bytes()))
            .stream();
        Ok(y_true
            .iter()
            .zip(self.fn_rates.iter().zip(&self.fp_rates))
            .map(|(&y, (&fnr, &fpr))| {
                if y == 1 {
                    (!stream.bernoulli(fnr)) as u8
                } else {
                    stream.bernoulli(fpr) as u8
                }
            })
            .collect())
    }
}

/// Fill `y_teacher` on every record.
pub fn apply_teacher(scenes: &mut [SceneRecord], cal: &TeacherCalibration) -> Result<()> {
    for s in scenes.iter_mut() {
        s.y_teacher = Some(cal.label_scene(&s.scene_id, &s.y_true)?);
    }
    Ok(())
}

/// Expected group-macro F1 implied by the targets alone (mean of the
/// per-group F1 = 2PR/(P+R) values).
pub fn expected_group_macro_f1(config: &TeacherConfig) -> f64 {
    let sum: f64 = config.targets.values().map(PrTargets::f1).sum();
    sum / config.targets.len() as f64
}

/// Per-label expected agreement rate 1 − π·fn − (1−π)·fp.
pub fn expected_agreement_rates(cal: &TeacherCalibration, prevalence: &[f64]) -> Vec<f64> {
    prevalence
        .iter()
        .zip(cal.fn_rates.iter().zip(&cal.fp_rates))
        .map(|(&pi, (&fnr, &fpr))| 1.0 - pi * fnr - (1.0 - pi) * fpr)
        .collect()
}

/// Analytic exact-match rate: the product of per-label agreement rates
/// (labels flip independently).
pub fn expected_exact_match_rate(cal: &TeacherCalibration, prevalence: &[f64]) -> f64 {
    expected_agreement_rates(cal, prevalence).iter().product()
}
