//! The ablation matrix and the inference-cost benchmark.
//!
//! Each ablation run derives its RNG streams solely from (variant name,
//! seed), so rows are a pure function of (spec, dataset, seeds) no matter
//! how runs are scheduled. A diverging variant is recorded as a failed row
//! and the sweep continues.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::digest::{fnv1a64_hex, hex64, Fnv1a64};
use crate::error::{Error, Result};
use crate::model::{SceneView, SurrogateConfig};
use crate::rng::RngState;
use crate::taxonomy::Taxonomy;
use crate::train::{
    evaluate, group_f1_map, train_logreg, train_surrogate, Classifier, LabelSource, TrainConfig,
};

/// Partition names the ablation consumes from a [`DatasetSplit`].
pub const TRAIN_PARTITION: &str = "surrogate_train";
pub const VAL_PARTITION: &str = "surrogate_val";
pub const TEST_PARTITION: &str = "surrogate_test";

/// One named variant: config overrides on top of the base configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_attention: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_residual_blocks: Option<usize>,
    /// Fraction of the training partition to use, from the front.
    #[serde(default = "full_fraction")]
    pub train_fraction: f64,
    /// Train the logistic-regression baseline instead of the surrogate.
    #[serde(default)]
    pub logreg: bool,
}

fn full_fraction() -> f64 {
    1.0
}

impl VariantSpec {
    /// A variant that runs the base configuration unchanged.
    pub fn plain(name: &str) -> VariantSpec {
        VariantSpec {
            name: name.into(),
            use_attention: None,
            dropout_p: None,
            n_residual_blocks: None,
            train_fraction: 1.0,
            logreg: false,
        }
    }
}

/// The sweep definition. The default matrix covers the reference rows:
/// full, no_cross_attention, no_dropout, two_residual_blocks,
/// reduced_train (1/8 of the training partition), and logreg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<VariantSpec>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            variants: vec![
                VariantSpec::plain("full"),
                VariantSpec {
                    use_attention: Some(false),
                    ..VariantSpec::plain("no_cross_attention")
                },
                VariantSpec {
                    dropout_p: Some(0.0),
                    ..VariantSpec::plain("no_dropout")
                },
                VariantSpec {
                    n_residual_blocks: Some(2),
                    ..VariantSpec::plain("two_residual_blocks")
                },
                VariantSpec {
                    train_fraction: 0.125,
                    ..VariantSpec::plain("reduced_train")
                },
                VariantSpec {
                    logreg: true,
                    ..VariantSpec::plain("logreg")
                },
            ],
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Validation("ablation spec has no variants".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if v.name.is_empty() {
                return Err(Error::Validation("variant with an empty name".into()));
            }
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate variant name {:?}",
                    v.name
                )));
            }
            if !(v.train_fraction > 0.0 && v.train_fraction <= 1.0) {
                return Err(Error::Validation(format!(
                    "variant {:?}: train_fraction {} outside (0, 1]",
                    v.name, v.train_fraction
                )));
            }
            if let Some(p) = v.dropout_p {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Validation(format!(
                        "variant {:?}: dropout_p {p} outside [0, 1)",
                        v.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn digest_hex(&self) -> String {
        fnv1a64_hex(&serde_json::to_vec(self).expect("spec serialises"))
    }
}

/// Base configs and taxonomy shared by every run in a sweep.
pub struct AblationContext<'a> {
    pub taxonomy: &'a Taxonomy,
    pub model_cfg: &'a SurrogateConfig,
    pub train_cfg: &'a TrainConfig,
}

/// Outcome of one (variant, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Group-macro F1 against ground truth on the test partition; `None`
    /// when the run failed.
    pub macro_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub per_group: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    /// Digest of the exact resolved (model, train) configuration.
    pub config_digest: String,
}

/// One variant's row: per-seed outcomes plus the aggregate columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<SeedOutcome>,
    pub median_macro_f1: Option<f64>,
    pub delta_vs_full: Option<f64>,
}

/// The whole sweep result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub spec_digest: String,
    pub dataset_digest: String,
}

impl AblationTable {
    /// Digest over everything except wall times: two runs of the same
    /// (spec, dataset, seeds) must produce equal digests.
    pub fn determinism_digest(&self) -> String {
        let mut d = Fnv1a64::new();
        d.update(self.spec_digest.as_bytes());
        d.update(self.dataset_digest.as_bytes());
        for &s in &self.seeds {
            d.update(&s.to_le_bytes());
        }
        for row in &self.rows {
            d.update(row.variant.as_bytes());
            for o in &row.per_seed {
                d.update(&o.seed.to_le_bytes());
                d.update(&f64_opt_bits(o.macro_f1));
                if let Some(e) = &o.error {
                    d.update(e.as_bytes());
                }
                for (g, f1) in &o.per_group {
                    d.update(g.as_bytes());
                    d.update(&f1.to_bits().to_le_bytes());
                }
                d.update(o.config_digest.as_bytes());
            }
            d.update(&f64_opt_bits(row.median_macro_f1));
            d.update(&f64_opt_bits(row.delta_vs_full));
        }
        hex64(d.finish())
    }

    /// Plain-text table shaped like the reference ablation table.
    pub fn render_text(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Validation("no ablation rows to render".into()));
        }
        let name_w = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .chain(["Variant".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        out.push_str(&format!("{:<name_w$}", "Variant"));
        for s in &self.seeds {
            out.push_str(&format!("  {:>8}", format!("s={s}")));
        }
        out.push_str(&format!("  {:>8}  {:>9}\n", "Median", "Δ vs full"));
        for row in &self.rows {
            out.push_str(&format!("{:<name_w$}", row.variant));
            for o in &row.per_seed {
                out.push_str(&format!("  {:>8}", fmt_opt(o.macro_f1)));
            }
            out.push_str(&format!(
                "  {:>8}  {:>9}\n",
                fmt_opt(row.median_macro_f1),
                fmt_delta(row.delta_vs_full),
            ));
            for o in &row.per_seed {
                if let Some(e) = &o.error {
                    out.push_str(&format!("    seed {}: failed: {e}\n", o.seed));
                }
            }
        }
        out.push_str(&format!(
            "spec {}  dataset {}\n",
            self.spec_digest, self.dataset_digest
        ));
        Ok(out)
    }

    /// Line-delimited JSON: one header record, then one record per row.
    pub fn render_structured(&self) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Validation("no ablation rows to render".into()));
        }
        let mut out = String::new();
        let header = serde_json::json!({
            "kind": "ablation",
            "seeds": self.seeds,
            "spec_digest": self.spec_digest,
            "dataset_digest": self.dataset_digest,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serialises"));
            out.push('\n');
        }
        Ok(out)
    }

    /// Inverse of [`render_structured`].
    pub fn parse_structured(text: &str) -> Result<AblationTable> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = lines
            .next()
            .ok_or_else(|| Error::Parse("empty ablation record stream".into()))
            .and_then(|l| {
                serde_json::from_str(l).map_err(|e| Error::Parse(format!("line 1: {e}")))
            })?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("ablation") {
            return Err(Error::Parse("line 1: not an ablation header".into()));
        }
        let seeds: Vec<u64> =
            serde_json::from_value(header.get("seeds").cloned().unwrap_or_default())
                .map_err(|e| Error::Parse(format!("line 1 seeds: {e}")))?;
        let grab = |key: &str| -> Result<String> {
            header
                .get(key)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("line 1: missing {key}")))
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            rows.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?,
            );
        }
        if rows.is_empty() {
            return Err(Error::Parse("ablation record stream has no rows".into()));
        }
        Ok(AblationTable {
            rows,
            seeds,
            spec_digest: grab("spec_digest")?,
            dataset_digest: grab("dataset_digest")?,
        })
    }
}

fn f64_opt_bits(v: Option<f64>) -> [u8; 8] {
    match v {
        Some(x) => x.to_bits().to_le_bytes(),
        None => u64::MAX.to_le_bytes(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "failed".into(),
    }
}

fn fmt_delta(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:+.3}"),
        None => "-".into(),
    }
}

/// Median of the defined values; `None` when every seed failed. Even
/// counts average the middle pair.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut xs: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Resolved configuration for one (variant, seed) run. The init and
/// shuffle seeds are derived from the variant name and sweep seed alone.
fn resolve(
    variant: &VariantSpec,
    ctx: &AblationContext,
    seed: u64,
) -> (SurrogateConfig, TrainConfig) {
    let run_root = RngState::new(seed).child(&variant.name, 0);
    let mut m = ctx.model_cfg.clone();
    if let Some(a) = variant.use_attention {
        m.use_attention = a;
    }
    if let Some(p) = variant.dropout_p {
        m.dropout_p = p;
    }
    if let Some(n) = variant.n_residual_blocks {
        m.n_residual_blocks = n;
    }
    m.init_seed = run_root.child("init", 0).seed();
    let mut t = ctx.train_cfg.clone();
    t.shuffle_seed = run_root.child("train", 0).seed();
    (m, t)
}

fn run_digest(variant: &VariantSpec, m: &SurrogateConfig, t: &TrainConfig) -> String {
    let mut d = Fnv1a64::new();
    d.update(&serde_json::to_vec(variant).expect("variant serialises"));
    d.update(&serde_json::to_vec(m).expect("config serialises"));
    d.update(&serde_json::to_vec(t).expect("config serialises"));
    hex64(d.finish())
}

fn run_one(
    variant: &VariantSpec,
    ctx: &AblationContext,
    split: &DatasetSplit,
    seed: u64,
) -> Result<SeedOutcome> {
    let train_full = split.get(TRAIN_PARTITION)?;
    let val = split.get(VAL_PARTITION)?;
    let test = split.get(TEST_PARTITION)?;
    let n_used = ((train_full.len() as f64 * variant.train_fraction).round() as usize)
        .clamp(1, train_full.len());
    let train = &train_full[..n_used];

    let (m_cfg, t_cfg) = resolve(variant, ctx, seed);
    let config_digest = run_digest(variant, &m_cfg, &t_cfg);
    let started = Instant::now();
    let evaluated = if variant.logreg {
        train_logreg(train, &t_cfg).and_then(|model| {
            evaluate(&model, test, ctx.taxonomy, LabelSource::Truth, 0.5)
        })
    } else {
        train_surrogate(train, val, &m_cfg, &t_cfg).and_then(|(model, _)| {
            evaluate(&model, test, ctx.taxonomy, LabelSource::Truth, 0.5)
        })
    };
    let wall_time_s = started.elapsed().as_secs_f64();
    Ok(match evaluated {
        Ok(report) => SeedOutcome {
            seed,
            macro_f1: Some(report.macro_group.f1),
            error: None,
            per_group: group_f1_map(&report),
            wall_time_s,
            config_digest,
        },
        // A failed run becomes a row entry; the sweep continues.
        Err(e) => SeedOutcome {
            seed,
            macro_f1: None,
            error: Some(e.to_string()),
            per_group: BTreeMap::new(),
            wall_time_s,
            config_digest,
        },
    })
}

/// Run every (variant, seed) combination over the shared split and
/// assemble the comparison table, including Δ columns against the
/// variant named `full` when present.
pub fn run_ablation(
    spec: &AblationSpec,
    split: &DatasetSplit,
    seeds: &[u64],
    ctx: &AblationContext,
) -> Result<AblationTable> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if seeds.len() < 3 {
        // Medians over fewer than 3 seeds are noise; allowed for smoke runs.
        log::warn!(
            "running ablation with {} seed(s); at least 3 are recommended",
            seeds.len()
        );
    }
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        return Err(Error::Config("duplicate seeds in ablation".into()));
    }

    let mut rows = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let outcome = run_one(variant, ctx, split, seed)?;
            log::info!(
                "ablation {} seed {seed}: {}",
                variant.name,
                fmt_opt(outcome.macro_f1)
            );
            per_seed.push(outcome);
        }
        let f1s: Vec<f64> = per_seed.iter().filter_map(|o| o.macro_f1).collect();
        rows.push(AblationRow {
            variant: variant.name.clone(),
            per_seed,
            median_macro_f1: median(&f1s),
            delta_vs_full: None,
        });
    }

    let full_median = rows
        .iter()
        .find(|r| r.variant == "full")
        .and_then(|r| r.median_macro_f1);
    for row in &mut rows {
        row.delta_vs_full = match (row.median_macro_f1, full_median) {
            (Some(m), Some(f)) => Some(m - f),
            _ => None,
        };
    }

    Ok(AblationTable {
        rows,
        seeds: seeds.to_vec(),
        spec_digest: spec.digest_hex(),
        dataset_digest: split.content_digest(),
    })
}

/// One model's benchmark line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub model: String,
    pub param_count: usize,
    /// Median wall time per scene over the repetitions, batched.
    pub batched_s_per_scene: f64,
    pub batched_scenes_per_s: f64,
    /// Median wall time per scene, one scene per call.
    pub unbatched_s_per_scene: f64,
    pub unbatched_scenes_per_s: f64,
    pub batch_size: usize,
    /// Coarse static estimate (weights + one batch of pooled activations);
    /// never measured.
    pub peak_memory_estimate_bytes: usize,
    /// FNV digest of the predicted label bits, for output-determinism
    /// checks against the evaluation path.
    pub predictions_digest: String,
}

/// The benchmark result set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub reps: usize,
    pub n_scenes: usize,
    pub hardware: String,
}

fn predictions_digest(preds: &[Vec<u8>]) -> String {
    let mut d = Fnv1a64::new();
    for p in preds {
        d.update(p);
    }
    hex64(d.finish())
}

/// Measure eval-mode latency for each named model over the same scenes.
/// Times are medians over `reps` repetitions after one warm-up pass.
pub fn bench_inference(
    models: &[(&str, &dyn Classifier)],
    scenes: &[SceneView],
    reps: usize,
) -> Result<BenchReport> {
    if scenes.len() < 100 {
        return Err(Error::Config(format!(
            "benchmark needs at least 100 scenes, got {}",
            scenes.len()
        )));
    }
    if reps < 5 {
        return Err(Error::Config(format!(
            "benchmark needs at least 5 repetitions, got {reps}"
        )));
    }
    if models.is_empty() {
        return Err(Error::Validation("no models to benchmark".into()));
    }

    let embed_dim = scenes[0].embeddings.cols();
    let mut entries = Vec::with_capacity(models.len());
    for (name, model) in models {
        // Warm-up also pins the reference predictions.
        let reference = model.predict_batch(scenes, 0.5)?;

        let mut batched = Vec::with_capacity(reps);
        for _ in 0..reps {
            let started = Instant::now();
            let preds = model.predict_batch(scenes, 0.5)?;
            batched.push(started.elapsed().as_secs_f64() / scenes.len() as f64);
            if preds != reference {
                return Err(Error::Numeric(format!(
                    "{name}: benchmark predictions changed between repetitions"
                )));
            }
        }

        let single = &scenes[..1];
        model.predict_batch(single, 0.5)?;
        let mut unbatched = Vec::with_capacity(reps);
        for _ in 0..reps {
            let started = Instant::now();
            for scene in scenes.chunks(1) {
                model.predict_batch(scene, 0.5)?;
            }
            unbatched.push(started.elapsed().as_secs_f64() / scenes.len() as f64);
        }

        let batched_s = median(&batched).expect("reps >= 5");
        let unbatched_s = median(&unbatched).expect("reps >= 5");
        entries.push(BenchEntry {
            model: name.to_string(),
            param_count: model.n_parameters(),
            batched_s_per_scene: batched_s,
            batched_scenes_per_s: 1.0 / batched_s,
            unbatched_s_per_scene: unbatched_s,
            unbatched_scenes_per_s: 1.0 / unbatched_s,
            batch_size: scenes.len(),
            peak_memory_estimate_bytes: 8 * (model.n_parameters() + scenes.len() * embed_dim),
            predictions_digest: predictions_digest(&reference),
        });
    }

    Ok(BenchReport {
        entries,
        reps,
        n_scenes: scenes.len(),
        hardware: hardware_description(),
    })
}

fn hardware_description() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get().to_string())
        .unwrap_or_else(|_| "?".into());
    format!(
        "{} {} ({cores} cores)",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

impl BenchReport {
    /// Plain-text table shaped like the reference cost table.
    pub fn render_text(&self) -> Result<String> {
        if self.entries.is_empty() {
            return Err(Error::Validation("no benchmark entries to render".into()));
        }
        let name_w = self
            .entries
            .iter()
            .map(|e| e.model.len())
            .chain(["Model".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}  {:>14}  {:>16}\n",
            "Model", "Params", "Batched s/scn", "Single s/scn", "Batched scn/s"
        ));
        for e in &self.entries {
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>14.6}  {:>14.6}  {:>16.1}\n",
                e.model,
                e.param_count,
                e.batched_s_per_scene,
                e.unbatched_s_per_scene,
                e.batched_scenes_per_s,
            ));
        }
        out.push_str(&format!(
            "(medians over {} reps, {} scenes, {})\n",
            self.reps, self.n_scenes, self.hardware
        ));
        // Static reference figure from the source material; never measured.
        out.push_str("manual review reference: 10-15 min per scene (not measured)\n");
        Ok(out)
    }

    /// Line-delimited JSON mirroring [`AblationTable::render_structured`].
    pub fn render_structured(&self) -> Result<String> {
        if self.entries.is_empty() {
            return Err(Error::Validation("no benchmark entries to render".into()));
        }
        let mut out = String::new();
        let header = serde_json::json!({
            "kind": "bench",
            "reps": self.reps,
            "n_scenes": self.n_scenes,
            "hardware": self.hardware,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_structured(text: &str) -> Result<BenchReport> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = lines
            .next()
            .ok_or_else(|| Error::Parse("empty benchmark record stream".into()))
            .and_then(|l| {
                serde_json::from_str(l).map_err(|e| Error::Parse(format!("line 1: {e}")))
            })?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("bench") {
            return Err(Error::Parse("line 1: not a benchmark header".into()));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            entries.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?,
            );
        }
        if entries.is_empty() {
            return Err(Error::Parse("benchmark record stream has no entries".into()));
        }
        Ok(BenchReport {
            entries,
            reps: header
                .get("reps")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Parse("line 1: missing reps".into()))? as usize,
            n_scenes: header
                .get("n_scenes")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Parse("line 1: missing n_scenes".into()))?
                as usize,
            hardware: header
                .get("hardware")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Parse("line 1: missing hardware".into()))?
                .to_string(),
        })
    }
}
