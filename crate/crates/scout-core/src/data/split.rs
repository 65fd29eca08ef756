//! Seeded shuffling and contiguous partitioning of a generated corpus.

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::SceneRecord;

/// The pipeline's partition layout at 1/10 scale of the reference corpus:
/// 800/200 teacher fine-tune/test and 5600/1200/1200 surrogate
/// train/val/test out of 9,000 scenes.
pub const DEFAULT_SPLIT: [(&str, f64); 5] = [
    ("teacher_train", 8.0 / 90.0),
    ("teacher_test", 2.0 / 90.0),
    ("surrogate_train", 56.0 / 90.0),
    ("surrogate_val", 12.0 / 90.0),
    ("surrogate_test", 12.0 / 90.0),
];

/// Named, disjoint, exhaustive partitions of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    partitions: Vec<(String, Vec<SceneRecord>)>,
}

impl DatasetSplit {
    pub fn get(&self, name: &str) -> Result<&[SceneRecord]> {
        self.partitions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, scenes)| scenes.as_slice())
            .ok_or_else(|| Error::Lookup(format!("no partition named {name:?}")))
    }

    pub fn partitions(&self) -> impl Iterator<Item = (&str, &[SceneRecord])> {
        self.partitions
            .iter()
            .map(|(n, s)| (n.as_str(), s.as_slice()))
    }

    pub fn into_partitions(self) -> Vec<(String, Vec<SceneRecord>)> {
        self.partitions
    }

    /// Content digest over partition names, scene ids, labels, masks and
    /// embedding bits — the dataset identity recorded by downstream runs.
    pub fn content_digest(&self) -> String {
        let mut d = crate::digest::Fnv1a64::new();
        for (name, scenes) in self.partitions() {
            d.update(name.as_bytes());
            d.update(&(scenes.len() as u64).to_le_bytes());
            for r in scenes {
                d.update(r.scene_id.as_bytes());
                d.update(&r.y_true);
                match &r.y_teacher {
                    Some(t) => {
                        d.update(&[1]);
                        d.update(t);
                    }
                    None => d.update(&[0]),
                }
                for &m in &r.mask {
                    d.update(&[m as u8]);
                }
                for &v in r.embeddings.data() {
                    d.update(&v.to_bits().to_le_bytes());
                }
            }
        }
        crate::digest::hex64(d.finish())
    }
}

/// Shuffle with `seed`, then cut into contiguous named pieces whose sizes
/// follow the cumulative-rounded proportions (so sizes differ from exact
/// products by less than one scene and always sum to the corpus size).
pub fn split(
    scenes: Vec<SceneRecord>,
    parts: &[(impl AsRef<str>, f64)],
    seed: u64,
) -> Result<DatasetSplit> {
    if parts.is_empty() {
        return Err(Error::Config("split needs at least one partition".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, p) in parts {
        if !(*p >= 0.0) {
            return Err(Error::Config(format!(
                "partition {:?} has negative proportion {p}",
                name.as_ref()
            )));
        }
        if !seen.insert(name.as_ref()) {
            return Err(Error::Config(format!(
                "duplicate partition name {:?}",
                name.as_ref()
            )));
        }
    }
    let total_p: f64 = parts.iter().map(|(_, p)| *p).sum();
    if (total_p - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split proportions sum to {total_p}, expected 1"
        )));
    }

    let n = scenes.len();
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).child("split", 0).stream().shuffle(&mut order);

    // Reorder scenes by the shuffled index list without cloning records.
    let mut slots: Vec<Option<SceneRecord>> = scenes.into_iter().map(Some).collect();
    let shuffled: Vec<SceneRecord> = order
        .into_iter()
        .map(|i| slots[i].take().expect("each index visited once"))
        .collect();

    let mut partitions = Vec::with_capacity(parts.len());
    let mut cumulative = 0.0;
    let mut start = 0usize;
    let mut rest = shuffled;
    for (k, (name, p)) in parts.iter().enumerate() {
        cumulative += *p;
        let end = if k + 1 == parts.len() {
            n // guards against rounding drift on the last piece
        } else {
            (cumulative * n as f64).round() as usize
        };
        let end = end.clamp(start, n);
        let tail = rest.split_off(end - start);
        partitions.push((name.as_ref().to_string(), rest));
        rest = tail;
        start = end;
    }
    Ok(DatasetSplit { partitions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::taxonomy::Taxonomy;
    use std::collections::BTreeSet;

    fn corpus(n: usize) -> Vec<SceneRecord> {
        let tax = Taxonomy::bundled();
        let cfg = GeneratorConfig {
            n_scenes: n,
            embed_dim: 4,
            ..GeneratorConfig::default_for(tax.n_labels(), 5)
        };
        generate(&cfg, &tax).unwrap()
    }

    #[test]
    fn ten_scenes_eighty_twenty() {
        let s = split(corpus(10), &[("train", 0.8), ("test", 0.2)], 1).unwrap();
        assert_eq!(s.get("train").unwrap().len(), 8);
        assert_eq!(s.get("test").unwrap().len(), 2);
    }

    #[test]
    fn default_split_hits_reference_sizes() {
        let s = split(corpus(9_000), &DEFAULT_SPLIT, 2).unwrap();
        let sizes: Vec<usize> = DEFAULT_SPLIT
            .iter()
            .map(|(n, _)| s.get(n).unwrap().len())
            .collect();
        assert_eq!(sizes, vec![800, 200, 5_600, 1_200, 1_200]);
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let scenes = corpus(101);
        let all_ids: BTreeSet<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
        let s = split(scenes, &[("a", 0.37), ("b", 0.4), ("c", 0.23)], 3).unwrap();
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for (_, part) in s.partitions() {
            total += part.len();
            for r in part {
                assert!(seen.insert(r.scene_id.clone()), "{} duplicated", r.scene_id);
            }
        }
        assert_eq!(total, 101);
        assert_eq!(seen, all_ids);
    }

    #[test]
    fn same_seed_same_partition() {
        let a = split(corpus(60), &[("x", 0.5), ("y", 0.5)], 9).unwrap();
        let b = split(corpus(60), &[("x", 0.5), ("y", 0.5)], 9).unwrap();
        assert_eq!(a, b);
        let c = split(corpus(60), &[("x", 0.5), ("y", 0.5)], 10).unwrap();
        assert_ne!(a, c, "different seed should reshuffle");
    }

    #[test]
    fn bad_proportions_are_rejected() {
        assert!(matches!(
            split(corpus(4), &[("a", 0.5), ("b", 0.4)], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split(corpus(4), &[("a", 1.5), ("b", -0.5)], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            split(corpus(4), &[("a", 0.5), ("a", 0.5)], 0),
            Err(Error::Config(_))
        ));
        let empty: &[(&str, f64)] = &[];
        assert!(matches!(split(corpus(4), empty, 0), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_partition_lookup_fails() {
        let s = split(corpus(4), &[("a", 1.0)], 0).unwrap();
        assert!(matches!(s.get("nope"), Err(Error::Lookup(_))));
    }
}
