//! Deterministic synthetic scene generation with long-tail label
//! imbalance.
//!
//! Every scene is produced from child streams of `(seed, scene index)`,
//! so generation parallelises freely, corpora are bitwise reproducible,
//! and growing `n_scenes` never disturbs earlier scenes. Geometry: each
//! active label owns a fixed unit-norm prototype direction; a scene's
//! *visible* frames carry the sum of its positive labels' prototypes,
//! while the remaining frames are distractors. All frames share a
//! per-scene nuisance offset plus i.i.d. Gaussian noise. Keeping the
//! signal confined to a random subset of frames is what separates
//! attention pooling from a plain mean over frames: a mean dilutes the
//! signal by a random per-scene factor, while attention can select the
//! informative frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelVector;
use crate::rng::RngState;
use crate::taxonomy::Taxonomy;
use crate::tensor::Matrix;

use super::SceneRecord;

/// Scenes per parallel work unit; results are spliced in index order.
const GEN_CHUNK: usize = 64;

/// Configuration for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_scenes: usize,
    pub embed_dim: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Per-label positive rate π_i, aligned with the active taxonomy
    /// labels.
    pub prevalence: Vec<f64>,
    pub signal_strength: f64,
    pub noise_std: f64,
    /// Scale of the per-scene nuisance offset shared by all frames.
    pub nuisance_std: f64,
    /// Probability that a frame carries the label signal (at least one
    /// frame per scene always does).
    pub frame_visibility: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Desk-scale defaults for a given label count: 9,000 scenes with the
    /// long-tail prevalence profile derived from `seed`.
    pub fn default_for(n_labels: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_scenes: 9_000,
            embed_dim: 256,
            seq_len_min: 5,
            seq_len_max: 8,
            prevalence: default_long_tail_prevalence(n_labels, &RngState::new(seed)),
            signal_strength: 1.5,
            noise_std: 1.0,
            nuisance_std: 0.1,
            frame_visibility: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::Config(format!(
                "sequence length range [{}, {}] is invalid",
                self.seq_len_min, self.seq_len_max
            )));
        }
        if self.prevalence.is_empty() {
            return Err(Error::Config("prevalence profile is empty".into()));
        }
        for (i, &p) in self.prevalence.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!(
                    "prevalence[{i}] = {p} is outside (0, 1)"
                )));
            }
        }
        if !(self.signal_strength >= 0.0) {
            return Err(Error::Config(format!(
                "signal_strength {} must be non-negative",
                self.signal_strength
            )));
        }
        if !(self.noise_std > 0.0) {
            return Err(Error::Config(format!(
                "noise_std {} must be positive",
                self.noise_std
            )));
        }
        if !(self.nuisance_std >= 0.0) {
            return Err(Error::Config(format!(
                "nuisance_std {} must be non-negative",
                self.nuisance_std
            )));
        }
        if !(self.frame_visibility > 0.0 && self.frame_visibility <= 1.0) {
            return Err(Error::Config(format!(
                "frame_visibility {} must be in (0, 1]",
                self.frame_visibility
            )));
        }
        Ok(())
    }

    /// Digest of the full configuration (prevalence included).
    pub fn digest_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("generator config serialises");
        crate::digest::fnv1a64_hex(json.as_bytes())
    }
}

/// The default long-tail profile: ⌈55n/68⌉ labels get a log-uniform rate
/// in [0.02, 0.30] (the rare tail), the rest a uniform rate in
/// [0.30, 0.50]. Which labels land in the tail is a seeded shuffle, so
/// rarity is not correlated with taxonomy order.
pub fn default_long_tail_prevalence(n_labels: usize, root: &RngState) -> Vec<f64> {
    let n_low = (55 * n_labels).div_ceil(68);
    let mut values = vec![0.0; n_labels];
    let mut value_stream = root.child("prevalence-values", 0).stream();
    let mut order: Vec<usize> = (0..n_labels).collect();
    root.child("prevalence-assign", 0)
        .stream()
        .shuffle(&mut order);
    let (lo, hi) = (0.02f64.ln(), 0.30f64.ln());
    for (rank, &label) in order.iter().enumerate() {
        values[label] = if rank < n_low {
            value_stream.uniform_in(lo, hi).exp()
        } else {
            value_stream.uniform_in(0.30, 0.50)
        };
    }
    values
}

/// Fixed unit-norm prototype direction per label, derived from the
/// generator seed alone. The first `embed_dim` prototypes are mutually
/// orthogonal (Gram–Schmidt over the seeded draws) so one label's signal
/// never leaks into another's matched filter; any labels beyond the
/// embedding dimension stay unit-norm random.
pub fn prototypes(config: &GeneratorConfig) -> Matrix {
    let root = RngState::new(config.seed);
    let e = config.embed_dim;
    let mut m = Matrix::zeros(config.prevalence.len(), e);
    for i in 0..config.prevalence.len() {
        let mut stream = root.child("prototype", i as u64).stream();
        loop {
            {
                let row = m.row_mut(i);
                for slot in row.iter_mut() {
                    *slot = stream.normal();
                }
            }
            if i < e {
                for j in 0..i {
                    let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                    let prev: Vec<f64> = m.row(j).to_vec();
                    for (slot, p) in m.row_mut(i).iter_mut().zip(prev) {
                        *slot -= dot * p;
                    }
                }
            }
            let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            // A residual this small means the draw was (numerically) inside
            // the span of earlier prototypes; redraw from the same stream.
            if norm > 1e-6 {
                for slot in m.row_mut(i).iter_mut() {
                    *slot /= norm;
                }
                break;
            }
        }
    }
    m
}

/// Canonical scene identifier for a generation index.
pub fn scene_id(index: usize) -> String {
    format!("scene-{index:06}")
}

fn draw_labels(scene: &RngState, prevalence: &[f64]) -> LabelVector {
    let mut stream = scene.child("labels", 0).stream();
    prevalence
        .iter()
        .map(|&p| stream.bernoulli(p) as u8)
        .collect()
}

fn generate_scene(config: &GeneratorConfig, protos: &Matrix, index: usize) -> SceneRecord {
    let scene = RngState::new(config.seed).child("scene", index as u64);
    let y_true = draw_labels(&scene, &config.prevalence);

    let span = config.seq_len_max - config.seq_len_min + 1;
    let seq_len = config.seq_len_min + scene.child("seq", 0).stream().below(span as u64) as usize;

    let mut vis_stream = scene.child("visibility", 0).stream();
    let mut visible: Vec<bool> = (0..seq_len)
        .map(|_| vis_stream.bernoulli(config.frame_visibility))
        .collect();
    if !visible.iter().any(|&v| v) {
        visible[vis_stream.below(seq_len as u64) as usize] = true;
    }

    let e = config.embed_dim;
    let mut signal = vec![0.0; e];
    for (i, &y) in y_true.iter().enumerate() {
        if y == 1 {
            for (s, &p) in signal.iter_mut().zip(protos.row(i)) {
                *s += config.signal_strength * p;
            }
        }
    }

    let mut nuisance_stream = scene.child("nuisance", 0).stream();
    let nuisance: Vec<f64> = (0..e)
        .map(|_| config.nuisance_std * nuisance_stream.normal())
        .collect();

    let mut noise_stream = scene.child("noise", 0).stream();
    let mut embeddings = Matrix::zeros(seq_len, e);
    for f in 0..seq_len {
        let row = embeddings.row_mut(f);
        for j in 0..e {
            let base = if visible[f] { signal[j] } else { 0.0 };
            row[j] = base + nuisance[j] + config.noise_std * noise_stream.normal();
        }
    }

    SceneRecord {
        scene_id: scene_id(index),
        embeddings,
        mask: vec![true; seq_len],
        y_true,
        y_teacher: None,
    }
}

/// Generate the full corpus. Scene `i` depends only on `(seed, i)`.
pub fn generate(config: &GeneratorConfig, taxonomy: &Taxonomy) -> Result<Vec<SceneRecord>> {
    config.validate()?;
    if config.prevalence.len() != taxonomy.n_labels() {
        return Err(Error::Config(format!(
            "prevalence profile has {} entries, taxonomy has {} active labels",
            config.prevalence.len(),
            taxonomy.n_labels()
        )));
    }
    let protos = prototypes(config);
    let indices: Vec<usize> = (0..config.n_scenes).collect();
    let chunks: Vec<Vec<SceneRecord>> = indices
        .par_chunks(GEN_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| generate_scene(config, &protos, i))
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Fast path producing only `(scene_id, y_true)` pairs — bitwise the same
/// labels as [`generate`], without paying for embeddings. Used for the
/// large-sample statistical checks.
pub fn generate_labels(config: &GeneratorConfig) -> Result<Vec<(String, LabelVector)>> {
    config.validate()?;
    let root = RngState::new(config.seed);
    let indices: Vec<usize> = (0..config.n_scenes).collect();
    let chunks: Vec<Vec<(String, LabelVector)>> = indices
        .par_chunks(4096)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| {
                    (
                        scene_id(i),
                        draw_labels(&root.child("scene", i as u64), &config.prevalence),
                    )
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n_labels: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_scenes: 50,
            embed_dim: 16,
            ..GeneratorConfig::default_for(n_labels, 9)
        }
    }

    fn tiny_taxonomy(n: usize) -> Taxonomy {
        // Active labels come from the bundled taxonomy; slice via profile
        // is overkill here, so use the full default and trim prevalence in
        // callers instead. For unit tests we only need matching counts.
        let tax = Taxonomy::bundled();
        assert!(tax.n_labels() >= n);
        tax
    }

    #[test]
    fn zero_scenes_is_empty() {
        let tax = Taxonomy::bundled();
        let cfg = GeneratorConfig {
            n_scenes: 0,
            ..GeneratorConfig::default_for(tax.n_labels(), 1)
        };
        assert!(generate(&cfg, &tax).unwrap().is_empty());
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let tax = tiny_taxonomy(68);
        let cfg = small_config(tax.n_labels());
        let a = generate(&cfg, &tax).unwrap();
        let b = generate(&cfg, &tax).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scenes_are_mutually_independent() {
        let tax = Taxonomy::bundled();
        let cfg = small_config(tax.n_labels());
        let longer = GeneratorConfig {
            n_scenes: cfg.n_scenes + 1,
            ..cfg.clone()
        };
        let a = generate(&cfg, &tax).unwrap();
        let b = generate(&longer, &tax).unwrap();
        assert_eq!(a[..], b[..cfg.n_scenes]);
    }

    #[test]
    fn scene_shapes_respect_config() {
        let tax = Taxonomy::bundled();
        let cfg = small_config(tax.n_labels());
        for s in generate(&cfg, &tax).unwrap() {
            let len = s.embeddings.rows();
            assert!((cfg.seq_len_min..=cfg.seq_len_max).contains(&len));
            assert_eq!(s.mask.len(), len);
            assert!(s.mask.iter().all(|&m| m), "all frames real at generation");
            assert_eq!(s.y_true.len(), tax.n_labels());
            assert!(s.y_teacher.is_none());
            s.validate(cfg.embed_dim, tax.n_labels()).unwrap();
        }
    }

    #[test]
    fn labels_fast_path_matches_full_generation() {
        let tax = Taxonomy::bundled();
        let cfg = GeneratorConfig {
            n_scenes: 300,
            ..small_config(tax.n_labels())
        };
        let full = generate(&cfg, &tax).unwrap();
        let labels = generate_labels(&cfg).unwrap();
        assert_eq!(full.len(), labels.len());
        for (s, (id, y)) in full.iter().zip(&labels) {
            assert_eq!(&s.scene_id, id);
            assert_eq!(&s.y_true, y);
        }
    }

    #[test]
    fn prototypes_are_orthonormal_and_stable() {
        let tax = Taxonomy::bundled();
        let cfg = small_config(tax.n_labels());
        let p = prototypes(&cfg);
        let q = prototypes(&cfg);
        assert_eq!(p, q);
        for i in 0..p.rows() {
            let norm: f64 = p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "label {i}: norm {norm}");
            if i < cfg.embed_dim {
                for j in 0..i {
                    let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                    assert!(dot.abs() < 1e-10, "labels {i},{j}: dot {dot}");
                }
            }
        }
    }

    #[test]
    fn prototypes_beyond_embed_dim_stay_unit_norm() {
        let cfg = GeneratorConfig {
            embed_dim: 3,
            prevalence: vec![0.2; 6],
            ..small_config(6)
        };
        let p = prototypes(&cfg);
        for i in 0..6 {
            let norm: f64 = p.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "label {i}: norm {norm}");
        }
        // First three are pairwise orthogonal; the rest cannot be.
        for i in 0..3 {
            for j in 0..i {
                let dot: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-10, "labels {i},{j}: dot {dot}");
            }
        }
    }

    #[test]
    fn default_profile_is_long_tailed() {
        let pi = default_long_tail_prevalence(68, &RngState::new(42));
        assert_eq!(pi.len(), 68);
        assert!(pi.iter().all(|&p| p > 0.0 && p < 1.0));
        let rare = pi.iter().filter(|&&p| p <= 0.30).count();
        assert!(rare >= 55, "only {rare} rare labels");
        let common = pi.iter().filter(|&&p| (0.30..=0.50).contains(&p)).count();
        assert_eq!(rare + common, 68);
        assert!(pi.iter().all(|&p| p >= 0.02 && p <= 0.50));
    }

    #[test]
    fn empirical_prevalence_tracks_profile_at_scale() {
        let cfg = GeneratorConfig {
            n_scenes: 100_000,
            ..GeneratorConfig::default_for(68, 42)
        };
        let labels = generate_labels(&cfg).unwrap();
        let mut counts = vec![0usize; 68];
        for (_, y) in &labels {
            for (c, &b) in counts.iter_mut().zip(y) {
                *c += b as usize;
            }
        }
        for (i, (&c, &pi)) in counts.iter().zip(&cfg.prevalence).enumerate() {
            let emp = c as f64 / cfg.n_scenes as f64;
            assert!(
                (emp - pi).abs() <= 0.01,
                "label {i}: empirical {emp:.4} vs π {pi:.4}"
            );
        }
    }

    #[test]
    fn every_scene_has_a_visible_signal_frame() {
        // Indirect check: with enormous signal and no noise, at least one
        // frame must sit far from the nuisance-only distractors whenever
        // any label is positive.
        let tax = Taxonomy::bundled();
        let cfg = GeneratorConfig {
            n_scenes: 200,
            signal_strength: 100.0,
            noise_std: 1e-9,
            nuisance_std: 0.0,
            ..small_config(tax.n_labels())
        };
        for s in generate(&cfg, &tax).unwrap() {
            if s.y_true.iter().all(|&b| b == 0) {
                continue;
            }
            let has_loud_frame = (0..s.embeddings.rows())
                .any(|f| s.embeddings.row(f).iter().map(|v| v * v).sum::<f64>() > 1.0);
            assert!(has_loud_frame, "scene {} lost its signal", s.scene_id);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = GeneratorConfig::default_for(68, 1);
        for bad in [
            GeneratorConfig {
                seq_len_min: 9,
                ..ok.clone()
            },
            GeneratorConfig {
                noise_std: 0.0,
                ..ok.clone()
            },
            GeneratorConfig {
                prevalence: vec![0.5, 1.0],
                ..ok.clone()
            },
            GeneratorConfig {
                frame_visibility: 0.0,
                ..ok.clone()
            },
            GeneratorConfig {
                signal_strength: -1.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let tax = Taxonomy::bundled();
        let mismatched = GeneratorConfig {
            prevalence: vec![0.2; 5],
            ..ok
        };
        assert!(matches!(generate(&mismatched, &tax), Err(Error::Config(_))));
    }
}
