//! One TOML-configurable experiment bundle.
//!
//! A config file describes an entire pipeline run — taxonomy, corpus,
//! teacher, split, model, trainer, ablation grid — under a single global
//! seed. Resolution fills every omitted section with built-in defaults,
//! derives every stage seed from the global seed via purpose tags, and
//! validates all child configurations. Seeds written inside child
//! sections are ignored: the global seed is the only source of
//! randomness, so one number reproduces the whole run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ablation::AblationSpec;
use crate::data::{
    apply_teacher, generate, split, DatasetSplit, GeneratorConfig, PrTargets, TeacherCalibration,
    TeacherConfig, DEFAULT_SPLIT,
};
use crate::digest::fnv1a64_hex;
use crate::error::{Error, Result};
use crate::model::SurrogateConfig;
use crate::rng::RngState;
use crate::taxonomy::{GroupId, Taxonomy};
use crate::train::TrainConfig;

/// Partial overrides for the corpus generator; unset fields keep the
/// built-in defaults sized to the active taxonomy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_scenes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prevalence: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal_strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nuisance_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_visibility: Option<f64>,
}

impl GeneratorOverrides {
    fn apply(&self, mut base: GeneratorConfig) -> GeneratorConfig {
        if let Some(v) = self.n_scenes {
            base.n_scenes = v;
        }
        if let Some(v) = self.embed_dim {
            base.embed_dim = v;
        }
        if let Some(v) = self.seq_len_min {
            base.seq_len_min = v;
        }
        if let Some(v) = self.seq_len_max {
            base.seq_len_max = v;
        }
        if let Some(v) = &self.prevalence {
            base.prevalence = v.clone();
        }
        if let Some(v) = self.signal_strength {
            base.signal_strength = v;
        }
        if let Some(v) = self.noise_std {
            base.noise_std = v;
        }
        if let Some(v) = self.nuisance_std {
            base.nuisance_std = v;
        }
        if let Some(v) = self.frame_visibility {
            base.frame_visibility = v;
        }
        base
    }
}

/// Partial overrides for the teacher's per-group operating points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<BTreeMap<GroupId, PrTargets>>,
}

/// One named piece of the corpus split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPart {
    pub name: String,
    pub fraction: f64,
}

/// The experiment file as written by a user: global scalars first, then
/// optional per-stage sections layered over built-in defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// The only seed; every stage seed is derived from it.
    pub seed: u64,
    pub output_dir: String,
    /// Taxonomy file; omitted means the bundled taxonomy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy_path: Option<String>,
    /// Profile override; omitted means the taxonomy's default profile.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Vec<SplitPart>>,
    pub generator: GeneratorOverrides,
    pub teacher: TeacherOverrides,
    pub model: SurrogateConfig,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: "runs".into(),
            taxonomy_path: None,
            profile: None,
            split: None,
            generator: GeneratorOverrides::default(),
            teacher: TeacherOverrides::default(),
            model: SurrogateConfig::default(),
            train: TrainConfig::default(),
            ablation: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serialises")
    }

    pub fn digest_hex(&self) -> String {
        fnv1a64_hex(&serde_json::to_vec(self).expect("experiment config serialises"))
    }

    /// Fill defaults, derive stage seeds from the global seed, and
    /// validate every child configuration.
    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        let taxonomy = match &self.taxonomy_path {
            Some(p) => Taxonomy::load(std::path::Path::new(p))?,
            None => Taxonomy::bundled(),
        };
        let taxonomy = match &self.profile {
            Some(name) => taxonomy.with_profile(name)?,
            None => taxonomy,
        };
        let n_labels = taxonomy.n_labels();
        let root = RngState::new(self.seed);

        let generator = self
            .generator
            .apply(GeneratorConfig::default_for(
                n_labels,
                root.child("generate", 0).seed(),
            ));
        generator.validate()?;
        if generator.prevalence.len() != n_labels {
            return Err(Error::Config(format!(
                "prevalence has {} entries, taxonomy profile {:?} has {} labels",
                generator.prevalence.len(),
                taxonomy.active_profile(),
                n_labels
            )));
        }

        let mut teacher = TeacherConfig::default_reference(root.child("teacher", 0).seed());
        if let Some(targets) = &self.teacher.targets {
            teacher.targets = targets.clone();
        }
        teacher.validate()?;

        let split_parts: Vec<SplitPart> = match &self.split {
            Some(parts) => parts.clone(),
            None => DEFAULT_SPLIT
                .iter()
                .map(|(n, f)| SplitPart {
                    name: n.to_string(),
                    fraction: *f,
                })
                .collect(),
        };
        validate_split_parts(&split_parts)?;

        let mut model = self.model.clone();
        model.n_labels = n_labels;
        model.init_seed = root.child("init", 0).seed();
        model.validate()?;

        let mut train = self.train.clone();
        train.shuffle_seed = root.child("shuffle", 0).seed();
        train.validate()?;

        let ablation = self.ablation.clone().unwrap_or_default();
        ablation.validate()?;

        Ok(ResolvedExperiment {
            taxonomy,
            generator,
            teacher,
            split_parts,
            split_seed: root.child("split", 0).seed(),
            model,
            train,
            ablation,
            output_dir: PathBuf::from(&self.output_dir),
            seed: self.seed,
        })
    }
}

fn validate_split_parts(parts: &[SplitPart]) -> Result<()> {
    if parts.is_empty() {
        return Err(Error::Config("split has no partitions".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut total = 0.0;
    for p in parts {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Config(format!(
                "duplicate split partition {:?}",
                p.name
            )));
        }
        if !(p.fraction >= 0.0) {
            return Err(Error::Config(format!(
                "split partition {:?} has negative fraction {}",
                p.name, p.fraction
            )));
        }
        total += p.fraction;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// A fully resolved run: every stage config concrete and validated, every
/// seed derived. This is what manifests echo.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedExperiment {
    pub taxonomy: Taxonomy,
    pub generator: GeneratorConfig,
    pub teacher: TeacherConfig,
    pub split_parts: Vec<SplitPart>,
    pub split_seed: u64,
    pub model: SurrogateConfig,
    pub train: TrainConfig,
    pub ablation: AblationSpec,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ResolvedExperiment {
    /// Every resolved value as one JSON document (the taxonomy appears as
    /// its digest, profile and label count).
    pub fn manifest_value(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "output_dir": self.output_dir.display().to_string(),
            "taxonomy": {
                "digest": self.taxonomy.digest_hex(),
                "profile": self.taxonomy.active_profile(),
                "n_labels": self.taxonomy.n_labels(),
            },
            "generator": self.generator,
            "teacher": self.teacher,
            "split": { "parts": self.split_parts, "seed": self.split_seed },
            "model": self.model,
            "train": self.train,
            "ablation": self.ablation,
        })
    }

    pub fn digest_hex(&self) -> String {
        fnv1a64_hex(self.manifest_value().to_string().as_bytes())
    }
}

/// Generate the corpus, calibrate and apply the teacher, and split —
/// the in-memory form of the dataset-preparation stage.
pub fn prepare_corpus(res: &ResolvedExperiment) -> Result<DatasetSplit> {
    let mut scenes = generate(&res.generator, &res.taxonomy)?;
    let cal = TeacherCalibration::calibrate(&res.teacher, &res.generator.prevalence, &res.taxonomy)?;
    apply_teacher(&mut scenes, &cal)?;
    let parts: Vec<(&str, f64)> = res
        .split_parts
        .iter()
        .map(|p| (p.name.as_str(), p.fraction))
        .collect();
    split(scenes, &parts, res.split_seed)
}
