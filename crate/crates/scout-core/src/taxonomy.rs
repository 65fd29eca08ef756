//! Conflict-type label space.
//!
//! The label vocabulary comes from a crash typology of 13 letter rows
//! (A–M) organised into six groups. Each letter row covers `count`
//! individual conflict descriptions; the label vector has one binary slot
//! per description, auto-named `<letter>-<k>` with `k` starting at 1.
//!
//! Which slots are *active* — i.e. actually form the label vector — is
//! data-driven via named profiles. The bundled taxonomy ships two:
//!
//! * `table1-groups2to5`: every slot of groups II–V (75 labels),
//! * `paper-68` (the default): the same minus the last slot of each of the
//!   seven largest rows, giving the 68-label space the rest of the
//!   pipeline is calibrated against.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::error::{Error, Result};

const BUNDLED: &str = include_str!("default_taxonomy.toml");
const FORMAT_VERSION: u32 = 1;

/// The six top-level conflict groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupId {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl GroupId {
    pub const ALL: [GroupId; 6] = [
        GroupId::I,
        GroupId::II,
        GroupId::III,
        GroupId::IV,
        GroupId::V,
        GroupId::VI,
    ];

    pub fn numeral(self) -> &'static str {
        match self {
            GroupId::I => "I",
            GroupId::II => "II",
            GroupId::III => "III",
            GroupId::IV => "IV",
            GroupId::V => "V",
            GroupId::VI => "VI",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            GroupId::I => "Single Driver",
            GroupId::II => "Same Trafficway, Same Direction",
            GroupId::III => "Same Trafficway, Opposite Direction",
            GroupId::IV => "Change Trafficway, Vehicle Turning",
            GroupId::V => "Intersect Paths",
            GroupId::VI => "Misc",
        }
    }

    /// Abbreviated title used in rendered tables.
    pub fn short_title(self) -> &'static str {
        match self {
            GroupId::I => "Single Driver",
            GroupId::II => "Same TW, Same Dir.",
            GroupId::III => "Same TW, Opp. Dir.",
            GroupId::IV => "Change TW, Veh. Turn.",
            GroupId::V => "Intersect Paths",
            GroupId::VI => "Misc",
        }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.numeral())
    }
}

/// One letter row of the typology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictCategory {
    pub id: String,
    pub group: GroupId,
    pub letter: char,
    pub description: String,
    /// Number of individual conflict descriptions under this letter.
    pub count: u32,
}

/// A named selection of active label slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub groups: Vec<GroupId>,
    /// Slot ids within the selected groups that are switched off.
    pub exclude: Vec<String>,
}

/// One label slot: `<letter>-<k>` of some category.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    id: String,
    category: usize,
}

/// The label space: categories, profiles, and the resolved active slots of
/// one selected profile. Immutable after load.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    categories: Vec<ConflictCategory>,
    profiles: Vec<Profile>,
    default_profile: String,
    active_profile: String,
    slots: Vec<Slot>,
    /// Indices into `slots`, in slot order; position = label index.
    active: Vec<usize>,
    index_by_id: HashMap<String, usize>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.categories == other.categories
            && self.profiles == other.profiles
            && self.default_profile == other.default_profile
            && self.active_profile == other.active_profile
    }
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    format_version: u32,
    default_profile: String,
    #[serde(rename = "category")]
    categories: Vec<CategoryRecord>,
    #[serde(rename = "profile")]
    profiles: Vec<ProfileRecord>,
}

#[derive(Serialize, Deserialize)]
struct CategoryRecord {
    id: String,
    group: GroupId,
    letter: String,
    description: String,
    count: u32,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    name: String,
    groups: Vec<GroupId>,
    #[serde(default)]
    exclude: Vec<String>,
}

impl Taxonomy {
    /// The bundled typology with its default profile.
    pub fn bundled() -> Taxonomy {
        Self::from_toml_str(BUNDLED).expect("bundled taxonomy is valid")
    }

    /// Load from a file, activating the file's default profile.
    pub fn load(path: &Path) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| match e {
                Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
                other => other,
            })
    }

    /// Parse a taxonomy document and activate its default profile.
    pub fn from_toml_str(text: &str) -> Result<Taxonomy> {
        let file: TaxonomyFile =
            toml::from_str(text).map_err(|e| Error::Parse(format!("taxonomy: {e}")))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "taxonomy format_version {} (supported: {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut categories = Vec::with_capacity(file.categories.len());
        for rec in file.categories {
            let mut chars = rec.letter.chars();
            let letter = match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => c,
                _ => {
                    return Err(Error::Validation(format!(
                        "category {}: letter must be a single uppercase ASCII character, got {:?}",
                        rec.id, rec.letter
                    )))
                }
            };
            if rec.count == 0 {
                return Err(Error::Validation(format!(
                    "category {}: count must be at least 1",
                    rec.id
                )));
            }
            categories.push(ConflictCategory {
                id: rec.id,
                group: rec.group,
                letter,
                description: rec.description,
                count: rec.count,
            });
        }
        let profiles = file
            .profiles
            .into_iter()
            .map(|p| Profile {
                name: p.name,
                groups: p.groups,
                exclude: p.exclude,
            })
            .collect();
        Self::assemble(categories, profiles, file.default_profile.clone(), &file.default_profile)
    }

    /// Re-resolve this taxonomy with a different active profile.
    pub fn with_profile(&self, profile: &str) -> Result<Taxonomy> {
        Self::assemble(
            self.categories.clone(),
            self.profiles.clone(),
            self.default_profile.clone(),
            profile,
        )
    }

    fn assemble(
        categories: Vec<ConflictCategory>,
        profiles: Vec<Profile>,
        default_profile: String,
        active_profile: &str,
    ) -> Result<Taxonomy> {
        let mut seen_ids = HashMap::new();
        for (i, c) in categories.iter().enumerate() {
            if let Some(prev) = seen_ids.insert(c.id.clone(), i) {
                return Err(Error::Validation(format!(
                    "duplicate category id {:?} (records {} and {})",
                    c.id, prev, i
                )));
            }
        }
        let mut slots = Vec::new();
        let mut slot_ids = HashMap::new();
        for (ci, c) in categories.iter().enumerate() {
            for k in 1..=c.count {
                let id = format!("{}-{}", c.letter, k);
                if slot_ids.insert(id.clone(), slots.len()).is_some() {
                    return Err(Error::Validation(format!(
                        "duplicate label slot {id:?}; letters must be unique across categories"
                    )));
                }
                slots.push(Slot { id, category: ci });
            }
        }
        let mut profile_names = HashMap::new();
        for (i, p) in profiles.iter().enumerate() {
            if profile_names.insert(p.name.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate profile {:?}", p.name)));
            }
        }
        if !profile_names.contains_key(&default_profile) {
            return Err(Error::Validation(format!(
                "default_profile {default_profile:?} is not a defined profile"
            )));
        }
        let profile = &profiles[*profile_names
            .get(active_profile)
            .ok_or_else(|| Error::Lookup(format!("profile {active_profile:?}")))?];

        for id in &profile.exclude {
            let si = slot_ids.get(id).ok_or_else(|| {
                Error::Validation(format!(
                    "profile {:?} excludes unknown slot {id:?}",
                    profile.name
                ))
            })?;
            let group = categories[slots[*si].category].group;
            if !profile.groups.contains(&group) {
                return Err(Error::Validation(format!(
                    "profile {:?} excludes slot {id:?} which is not in its groups",
                    profile.name
                )));
            }
        }
        let active: Vec<usize> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                profile.groups.contains(&categories[s.category].group)
                    && !profile.exclude.contains(&s.id)
            })
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            return Err(Error::Validation(format!(
                "profile {:?} selects no labels",
                profile.name
            )));
        }
        let index_by_id = active
            .iter()
            .enumerate()
            .map(|(label_idx, &si)| (slots[si].id.clone(), label_idx))
            .collect();
        Ok(Taxonomy {
            categories,
            profiles,
            default_profile,
            active_profile: active_profile.to_string(),
            slots,
            active,
            index_by_id,
        })
    }

    /// Number of active labels (the label-vector length).
    pub fn n_labels(&self) -> usize {
        self.active.len()
    }

    /// Position of an active slot id in the label vector.
    pub fn label_index(&self, id: &str) -> Result<usize> {
        self.index_by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("label {id:?} is not active")))
    }

    /// Slot id at a label-vector position.
    pub fn id_at(&self, index: usize) -> Result<&str> {
        self.active
            .get(index)
            .map(|&si| self.slots[si].id.as_str())
            .ok_or_else(|| self.bounds_err(index))
    }

    /// Group of the label at a position.
    pub fn group_of(&self, index: usize) -> Result<GroupId> {
        self.active
            .get(index)
            .map(|&si| self.categories[self.slots[si].category].group)
            .ok_or_else(|| self.bounds_err(index))
    }

    /// Category (letter row) of the label at a position.
    pub fn category_of(&self, index: usize) -> Result<&ConflictCategory> {
        self.active
            .get(index)
            .map(|&si| &self.categories[self.slots[si].category])
            .ok_or_else(|| self.bounds_err(index))
    }

    fn bounds_err(&self, index: usize) -> Error {
        Error::Bounds(format!(
            "label index {index} with {} active labels",
            self.active.len()
        ))
    }

    /// Groups that own at least one active label, in group order.
    pub fn active_groups(&self) -> Vec<GroupId> {
        GroupId::ALL
            .into_iter()
            .filter(|g| {
                self.active
                    .iter()
                    .any(|&si| self.categories[self.slots[si].category].group == *g)
            })
            .collect()
    }

    pub fn categories(&self) -> &[ConflictCategory] {
        &self.categories
    }

    pub fn profiles(&self) -> &[Profile] {
        &self.profiles
    }

    pub fn active_profile(&self) -> &str {
        &self.active_profile
    }

    pub fn active_label_ids(&self) -> impl Iterator<Item = &str> {
        self.active.iter().map(|&si| self.slots[si].id.as_str())
    }

    /// Canonical serialisation; `from_toml_str` of the output reproduces an
    /// equal taxonomy (with its default profile active).
    pub fn to_toml_string(&self) -> String {
        let file = TaxonomyFile {
            format_version: FORMAT_VERSION,
            default_profile: self.default_profile.clone(),
            categories: self
                .categories
                .iter()
                .map(|c| CategoryRecord {
                    id: c.id.clone(),
                    group: c.group,
                    letter: c.letter.to_string(),
                    description: c.description.clone(),
                    count: c.count,
                })
                .collect(),
            profiles: self
                .profiles
                .iter()
                .map(|p| ProfileRecord {
                    name: p.name.clone(),
                    groups: p.groups.clone(),
                    exclude: p.exclude.clone(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("taxonomy serialises")
    }

    /// Digest of the canonical serialisation plus the active profile.
    pub fn digest(&self) -> u64 {
        let mut h = crate::digest::Fnv1a64::new();
        h.update(self.to_toml_string().as_bytes());
        h.update(self.active_profile.as_bytes());
        h.finish()
    }

    /// Stable digest as hex, for file headers.
    pub fn digest_hex(&self) -> String {
        crate::digest::hex64(self.digest())
    }
}

/// Digest helper for ad-hoc byte content related to taxonomy files.
pub fn content_digest(bytes: &[u8]) -> u64 {
    fnv1a64(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_counts_match_the_typology() {
        let tax = Taxonomy::bundled();
        let total: u32 = tax.categories().iter().map(|c| c.count).sum();
        assert_eq!(total, 96);
        let groups2to5: u32 = tax
            .categories()
            .iter()
            .filter(|c| matches!(c.group, GroupId::II | GroupId::III | GroupId::IV | GroupId::V))
            .map(|c| c.count)
            .sum();
        assert_eq!(groups2to5, 75);
    }

    #[test]
    fn default_profile_has_68_labels() {
        let tax = Taxonomy::bundled();
        assert_eq!(tax.active_profile(), "paper-68");
        assert_eq!(tax.n_labels(), 68);
        assert_eq!(
            tax.active_groups(),
            vec![GroupId::II, GroupId::III, GroupId::IV, GroupId::V]
        );
    }

    #[test]
    fn full_groups_profile_has_75_labels() {
        let tax = Taxonomy::bundled().with_profile("table1-groups2to5").unwrap();
        assert_eq!(tax.n_labels(), 75);
        // Equals the sum of counts over the selected groups.
        let expected: u32 = tax
            .categories()
            .iter()
            .filter(|c| matches!(c.group, GroupId::II | GroupId::III | GroupId::IV | GroupId::V))
            .map(|c| c.count)
            .sum();
        assert_eq!(tax.n_labels(), expected as usize);
    }

    #[test]
    fn unknown_profile_is_a_lookup_error() {
        assert!(matches!(
            Taxonomy::bundled().with_profile("nope"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn label_index_and_id_at_are_inverse() {
        let tax = Taxonomy::bundled();
        assert_eq!(tax.id_at(0).unwrap(), "D-1");
        assert_eq!(tax.label_index("D-1").unwrap(), 0);
        for k in 0..tax.n_labels() {
            let id = tax.id_at(k).unwrap().to_string();
            assert_eq!(tax.label_index(&id).unwrap(), k);
        }
        assert!(matches!(tax.label_index("A-1"), Err(Error::Lookup(_))));
        assert!(matches!(tax.label_index("Z-9"), Err(Error::Lookup(_))));
    }

    #[test]
    fn group_of_maps_slots_to_their_rows() {
        let tax = Taxonomy::bundled();
        // D-derived slots belong to group II, L-derived slots to group V.
        assert_eq!(tax.group_of(tax.label_index("D-5").unwrap()).unwrap(), GroupId::II);
        assert_eq!(tax.group_of(tax.label_index("L-1").unwrap()).unwrap(), GroupId::V);
        assert!(matches!(tax.group_of(tax.n_labels()), Err(Error::Bounds(_))));
        // No orphan index: every active index maps to a selected group.
        for k in 0..tax.n_labels() {
            let g = tax.group_of(k).unwrap();
            assert!(tax.active_groups().contains(&g));
        }
    }

    #[test]
    fn excluded_slots_are_inactive_but_their_rows_remain() {
        let tax = Taxonomy::bundled();
        for id in ["D-17", "E-10", "F-6", "H-10", "J-8", "K-10", "L-6"] {
            assert!(tax.label_index(id).is_err(), "{id} should be inactive");
        }
        assert!(tax.label_index("D-16").is_ok());
        assert!(tax.label_index("K-9").is_ok());
    }

    #[test]
    fn round_trip_preserves_equality() {
        let tax = Taxonomy::bundled();
        let text = tax.to_toml_string();
        let again = Taxonomy::from_toml_str(&text).unwrap();
        assert_eq!(tax, again);
        assert_eq!(tax.digest(), again.digest());
    }

    #[test]
    fn duplicate_category_id_is_rejected() {
        let text = r#"
format_version = 1
default_profile = "p"

[[category]]
id = "D"
group = "II"
letter = "D"
description = "Rear end"
count = 2

[[category]]
id = "D"
group = "II"
letter = "E"
description = "Other"
count = 1

[[profile]]
name = "p"
groups = ["II"]
"#;
        assert!(matches!(
            Taxonomy::from_toml_str(text),
            Err(Error::Validation(msg)) if msg.contains("duplicate category id")
        ));
    }

    #[test]
    fn malformed_file_names_the_line() {
        let err = Taxonomy::from_toml_str("format_version = 1\nnot toml ===").unwrap_err();
        match err {
            Error::Parse(msg) => assert!(msg.contains("line"), "message: {msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn excluding_foreign_slot_is_rejected() {
        let text = r#"
format_version = 1
default_profile = "p"

[[category]]
id = "A"
group = "I"
letter = "A"
description = "x"
count = 2

[[category]]
id = "D"
group = "II"
letter = "D"
description = "y"
count = 2

[[profile]]
name = "p"
groups = ["II"]
exclude = ["A-1"]
"#;
        assert!(matches!(
            Taxonomy::from_toml_str(text),
            Err(Error::Validation(msg)) if msg.contains("not in its groups")
        ));
    }

    #[test]
    fn digest_distinguishes_profiles() {
        let a = Taxonomy::bundled();
        let b = a.with_profile("table1-groups2to5").unwrap();
        assert_ne!(a.digest(), b.digest());
    }
}
