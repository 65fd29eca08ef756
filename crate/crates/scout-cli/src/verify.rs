//! The fast property suite behind `scout verify`.
//!
//! Four families of checks, all seeded with fixed constants so two runs
//! print identical summaries: a finite-difference gradient check of the
//! full model, equivalence of the metrics module against its naive
//! reference implementation, the teacher's calibration measured on a
//! large label-only corpus, and the masked-softmax invariants. The hidden
//! `--sabotage-grad` flag flips one gradient's sign so the negative
//! control path of the gradient check stays honest.

use scout_core::data::{
    expected_group_macro_f1, generate_labels, GeneratorConfig, TeacherCalibration, TeacherConfig,
};
use scout_core::error::Error;
use scout_core::metrics::{self, MetricsReport};
use scout_core::model::{AttentionKind, LabelVector, SceneView, SurrogateConfig, SurrogateModel};
use scout_core::rng::RngState;
use scout_core::taxonomy::Taxonomy;
use scout_core::tensor::{
    bce_from_logits, grad_check, masked_softmax, GradTarget, Matrix, Param,
};
use scout_core::train::LabelSource;
use scout_core::Result;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run every check; order and seeds are fixed.
pub fn run_all(sabotage_grad: bool) -> Vec<CheckResult> {
    vec![
        gradient_check(sabotage_grad),
        metrics_oracle_check(),
        teacher_calibration_check(),
        masked_softmax_check(),
    ]
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

struct ModelTarget {
    model: SurrogateModel,
    scenes: Vec<(Matrix, Vec<bool>)>,
    targets: Matrix,
    sabotage: bool,
}

impl GradTarget for ModelTarget {
    fn params_mut(&mut self) -> &mut [Param] {
        self.model.params_mut()
    }

    fn eval(&mut self, accumulate_grads: bool) -> scout_core::Result<f64> {
        let views: Vec<SceneView> = self
            .scenes
            .iter()
            .map(|(x, m)| SceneView {
                embeddings: x,
                mask: m,
            })
            .collect();
        let (logits, cache) = self.model.frozen_forward(&views)?;
        let (loss, d_logits) = bce_from_logits(&logits, &self.targets)?;
        if accumulate_grads {
            self.model.backward(&cache, &d_logits)?;
            if self.sabotage {
                // Negative control: corrupt one analytic gradient entry.
                let g = &mut self.model.params_mut()[0].grad;
                let v = g.data()[0];
                g.data_mut()[0] = -v - 1.0;
            }
        }
        Ok(loss)
    }
}

fn gradient_check(sabotage: bool) -> CheckResult {
    outcome("gradient check (attention pooling + residual stack)", (|| {
        let cfg = SurrogateConfig {
            embed_dim: 12,
            attn_dim: 8,
            n_heads: 2,
            n_queries: 2,
            hidden_dim: 16,
            n_residual_blocks: 1,
            dropout_p: 0.0,
            n_labels: 4,
            use_attention: true,
            attention_kind: AttentionKind::Cross,
            init_seed: 11,
        };
        let model = SurrogateModel::init(cfg)?;
        let root = RngState::new(2024);
        let mut scenes = Vec::new();
        for i in 0..4u64 {
            let mut rng = root.child("scene", i).stream();
            let seq = 3 + (i as usize % 3);
            let mut x = Matrix::zeros(seq, 12);
            for v in x.data_mut() {
                *v = rng.normal();
            }
            let mut mask = vec![true; seq];
            if seq > 3 {
                mask[seq - 1] = false; // one padded position
            }
            scenes.push((x, mask));
        }
        let mut rng = root.child("targets", 0).stream();
        let mut targets = Matrix::zeros(4, 4);
        for v in targets.data_mut() {
            *v = rng.bernoulli(0.5) as u8 as f64;
        }
        let mut target = ModelTarget {
            model,
            scenes,
            targets,
            sabotage,
        };
        let report = grad_check(&mut target, &root.child("coords", 0), 25)?;
        Ok((
            report.max_rel_err < 1e-4,
            format!(
                "max rel err {:.3e} (worst: {}), {} coordinates",
                report.max_rel_err, report.worst_param, report.coords_checked
            ),
        ))
    })())
}

fn random_labels(rng: &mut scout_core::rng::Rng, n: usize, k: usize, p: f64) -> Vec<LabelVector> {
    (0..n)
        .map(|_| (0..k).map(|_| rng.bernoulli(p) as u8).collect())
        .collect()
}

fn metrics_oracle_check() -> CheckResult {
    outcome("metrics vs naive reference (1000 random cases)", (|| {
        let tax = Taxonomy::bundled();
        let k = tax.n_labels();
        let root = RngState::new(77);
        let mut mismatches = 0usize;
        for case in 0..1000u64 {
            let mut rng = root.child("case", case).stream();
            let n = 1 + rng.below(8) as usize;
            let p = 0.05 + 0.5 * rng.uniform();
            let preds = random_labels(&mut rng, n, k, p);
            let refs = random_labels(&mut rng, n, k, p);
            let fast = MetricsReport::compute(&preds, &refs, &tax, LabelSource::Truth)?;
            let naive = metrics::reference::report(&preds, &refs, &tax, LabelSource::Truth)?;
            if fast != naive {
                mismatches += 1;
            }
        }
        Ok((
            mismatches == 0,
            format!("{mismatches} mismatches in 1000 cases"),
        ))
    })())
}

fn teacher_calibration_check() -> CheckResult {
    outcome("teacher calibration on 50,000 scenes", (|| {
        let tax = Taxonomy::bundled();
        let gen = GeneratorConfig {
            n_scenes: 50_000,
            ..GeneratorConfig::default_for(tax.n_labels(), 5)
        };
        let teacher = TeacherConfig::default_reference(6);
        let cal = TeacherCalibration::calibrate(&teacher, &gen.prevalence, &tax)?;
        let labels = generate_labels(&gen)?;
        let mut preds = Vec::with_capacity(labels.len());
        let mut refs = Vec::with_capacity(labels.len());
        for (scene_id, y_true) in labels {
            preds.push(cal.label_scene(&scene_id, &y_true)?);
            refs.push(y_true);
        }
        let report = MetricsReport::compute(&preds, &refs, &tax, LabelSource::Truth)?;
        let mut worst: f64 = 0.0;
        for g in &report.per_group {
            let t = teacher.targets[&g.group];
            worst = worst
                .max((g.prf.precision - t.precision).abs())
                .max((g.prf.recall - t.recall).abs());
        }
        let expected = expected_group_macro_f1(&teacher);
        let f1_err = (report.macro_group.f1 - expected).abs();
        Ok((
            worst <= 0.02 && f1_err <= 0.02,
            format!(
                "max group P/R deviation {worst:.4}, macro-F1 {:.4} vs expected {expected:.4}",
                report.macro_group.f1
            ),
        ))
    })())
}

fn masked_softmax_check() -> CheckResult {
    outcome("masked softmax invariants (1000 random cases)", (|| {
        let root = RngState::new(99);
        let mut failures = 0usize;
        for case in 0..1000u64 {
            let mut rng = root.child("case", case).stream();
            let rows = 1 + rng.below(4) as usize;
            let cols = 2 + rng.below(7) as usize;
            let mut logits = Matrix::zeros(rows, cols);
            for v in logits.data_mut() {
                *v = 4.0 * rng.normal();
            }
            let mut mask: Vec<bool> = (0..cols).map(|_| rng.bernoulli(0.7)).collect();
            if !mask.iter().any(|&m| m) {
                mask[0] = true;
            }
            let w = masked_softmax(&logits, &mask)?;
            let shift = rng.uniform_in(-5.0, 5.0);
            let shifted = masked_softmax(&logits.map(|v| v + shift), &mask)?;
            for r in 0..rows {
                let sum: f64 = w.row(r).iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    failures += 1;
                }
                for c in 0..cols {
                    if !mask[c] && w.row(r)[c] != 0.0 {
                        failures += 1;
                    }
                    if (w.row(r)[c] - shifted.row(r)[c]).abs() > 1e-12 {
                        failures += 1;
                    }
                }
            }
        }
        // The degenerate all-masked mask must be rejected, not averaged.
        let degenerate = masked_softmax(&Matrix::zeros(1, 3), &[false, false, false]);
        let degenerate_ok = matches!(degenerate, Err(Error::DegenerateMask(_)));
        Ok((
            failures == 0 && degenerate_ok,
            format!(
                "{failures} invariant violations; all-masked rejected: {degenerate_ok}"
            ),
        ))
    })())
}
