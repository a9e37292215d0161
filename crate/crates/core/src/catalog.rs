//! WordNet class sets: synset metadata, catalogs and background scene lists.
//!
//! The metadata source is a pre-extracted JSON array with one object per
//! synset (`wnid`, `lemmas`, `hypernym_lemmas`, `definition`, optional
//! `class_index`). `scripts/extract_wordnet_meta.py` produces it from NLTK's
//! WordNet; hypernyms carry the first lemma of each parent synset.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator between lemmas, and between a class name and its extra context.
pub const LIST_SEPARATOR: &str = ", ";

/// One WordNet synset used as a class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub wnid: String,
    pub class_index: usize,
    pub lemmas: Vec<String>,
    pub hypernym_lemmas: Vec<String>,
    pub definition: String,
}

impl ClassEntry {
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidEntry {
            wnid: self.wnid.clone(),
            reason: reason.to_string(),
        };
        if !is_valid_wnid(&self.wnid) {
            return Err(invalid("wnid must be 'n' followed by 8 digits"));
        }
        if self.lemmas.is_empty() {
            return Err(invalid("no lemmas"));
        }
        if self.lemmas.iter().any(|l| l.trim().is_empty()) {
            return Err(invalid("empty lemma"));
        }
        if self.definition.trim().is_empty() {
            return Err(invalid("empty definition"));
        }
        Ok(())
    }

    /// Lemmas joined with ", ", e.g. `"pirate, pirate ship"`.
    pub fn lemmas_string(&self) -> String {
        self.lemmas.join(LIST_SEPARATOR)
    }

    pub fn hypernym_string(&self) -> String {
        self.hypernym_lemmas.join(LIST_SEPARATOR)
    }

    pub fn definition_string(&self) -> &str {
        self.definition.trim()
    }
}

pub fn is_valid_wnid(wnid: &str) -> bool {
    let b = wnid.as_bytes();
    b.len() == 9 && b[0] == b'n' && b[1..].iter().all(u8::is_ascii_digit)
}

/// An ordered class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub name: String,
    pub entries: Vec<ClassEntry>,
}

#[derive(Debug, Clone, Deserialize)]
struct SourceRecord {
    wnid: String,
    lemmas: Vec<String>,
    #[serde(default)]
    hypernym_lemmas: Vec<String>,
    #[serde(default)]
    definition: String,
}

/// Synset metadata keyed by wnid.
#[derive(Debug, Clone, Default)]
pub struct MetadataSource {
    records: HashMap<String, SourceRecord>,
}

impl MetadataSource {
    pub fn from_json(text: &str) -> Result<Self> {
        let list: Vec<SourceRecord> = serde_json::from_str(text)?;
        let records = list.into_iter().map(|r| (r.wnid.clone(), r)).collect();
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, wnid: &str) -> bool {
        self.records.contains_key(wnid)
    }
}

impl ClassCatalog {
    /// Builds a catalog holding `class_list` in order, with `class_index`
    /// equal to the position in the list.
    pub fn load(name: &str, source: &MetadataSource, class_list: &[String]) -> Result<Self> {
        let mut entries = Vec::with_capacity(class_list.len());
        for (class_index, wnid) in class_list.iter().enumerate() {
            let rec = source
                .records
                .get(wnid)
                .ok_or_else(|| Error::MissingWnid(wnid.clone()))?;
            let entry = ClassEntry {
                wnid: rec.wnid.clone(),
                class_index,
                lemmas: rec.lemmas.clone(),
                hypernym_lemmas: rec.hypernym_lemmas.clone(),
                definition: rec.definition.clone(),
            };
            entry.validate()?;
            entries.push(entry);
        }
        let catalog = Self {
            name: name.to_string(),
            entries,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (pos, e) in self.entries.iter().enumerate() {
            e.validate()?;
            if e.class_index != pos {
                return Err(Error::InvalidEntry {
                    wnid: e.wnid.clone(),
                    reason: format!("class_index {} at position {pos}", e.class_index),
                });
            }
            if !seen.insert(e.wnid.as_str()) {
                return Err(Error::InvalidEntry {
                    wnid: e.wnid.clone(),
                    reason: "duplicate wnid".into(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, wnid: &str) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.wnid == wnid)
    }

    pub fn wnids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.wnid.clone()).collect()
    }

    /// Serializes as the catalog file format: a JSON array of entries.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(name: &str, text: &str) -> Result<Self> {
        let mut entries: Vec<ClassEntry> = serde_json::from_str(text)?;
        entries.sort_by_key(|e| e.class_index);
        let catalog = Self {
            name: name.to_string(),
            entries,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads a catalog file; the catalog name is the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "catalog".into());
        Self::from_json(&name, &text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            other => other,
        })
    }
}

/// Reads a class list: one wnid per line, `#` comments and blanks ignored.
/// Anything after the wnid on a line (e.g. a human-readable name) is dropped.
pub fn parse_class_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect()
}

/// Scene names used to place classes in context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundSet {
    scenes: Vec<String>,
}

impl BackgroundSet {
    pub fn new(scenes: Vec<String>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidBackgrounds("empty background set".into()));
        }
        let mut seen = HashSet::new();
        for s in &scenes {
            if s.is_empty() || *s != normalize_scene(s) {
                return Err(Error::InvalidBackgrounds(format!(
                    "scene {s:?} is not normalized"
                )));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::InvalidBackgrounds(format!("duplicate scene {s:?}")));
            }
        }
        Ok(Self { scenes })
    }

    /// Parses one scene per line. Accepts plain names ("living_room") as well
    /// as the Places category file style ("/l/living_room 215").
    pub fn parse(text: &str) -> Result<Self> {
        let scenes = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(normalize_scene)
            .collect();
        Self::new(scenes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn scenes(&self) -> &[String] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Lowercases, maps `_` and `/` to spaces and drops a Places-style
/// "/x/" prefix and trailing numeric index.
pub fn normalize_scene(raw: &str) -> String {
    let mut s = raw.trim();
    if let Some((head, tail)) = s.rsplit_once(char::is_whitespace) {
        if tail.chars().all(|c| c.is_ascii_digit()) {
            s = head.trim_end();
        }
    }
    let b = s.as_bytes();
    if b.len() > 3 && b[0] == b'/' && b[2] == b'/' {
        s = &s[3..];
    }
    s.to_lowercase()
        .replace(['_', '/'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_source() -> MetadataSource {
        MetadataSource::from_json(include_str!("../../../data/wordnet_meta_sample.json")).unwrap()
    }

    fn one(wnid: &str) -> ClassEntry {
        ClassCatalog::load("t", &sample_source(), &[wnid.to_string()])
            .unwrap()
            .entries
            .remove(0)
    }

    #[test]
    fn papillon_from_source() {
        let e = one("n02086910");
        assert_eq!(e.lemmas, vec!["papillon"]);
        assert_eq!(e.hypernym_lemmas, vec!["toy spaniel"]);
        assert_eq!(
            e.definition,
            "small slender toy spaniel with erect ears and a black-spotted brown to white coat"
        );
        assert_eq!(e.lemmas_string(), "papillon");
        assert_eq!(e.hypernym_string(), "toy spaniel");
    }

    #[test]
    fn pirate_ship() {
        let e = one("n03947888");
        assert_eq!(e.lemmas, vec!["pirate", "pirate ship"]);
        assert_eq!(e.hypernym_lemmas, vec!["ship"]);
        assert_eq!(e.lemmas_string(), "pirate, pirate ship");
        assert_eq!(e.definition_string(), "a ship that is manned by pirates");
    }

    #[test]
    fn robin_and_shih_tzu() {
        assert_eq!(
            one("n01558993").lemmas_string(),
            "robin, American robin, Turdus migratorius"
        );
        assert_eq!(one("n02086240").hypernym_string(), "toy dog");
    }

    #[test]
    fn empty_class_list() {
        let c = ClassCatalog::load("t", &sample_source(), &[]).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn missing_wnid_names_offender() {
        let err = ClassCatalog::load("t", &sample_source(), &["n99999999".into()]).unwrap_err();
        assert!(matches!(err, Error::MissingWnid(ref w) if w == "n99999999"));
    }

    #[test]
    fn empty_definition_is_fatal() {
        let src = MetadataSource::from_json(
            r#"[{"wnid":"n00000001","lemmas":["x"],"hypernym_lemmas":[],"definition":"  "}]"#,
        )
        .unwrap();
        let err = ClassCatalog::load("t", &src, &["n00000001".into()]).unwrap_err();
        assert!(matches!(err, Error::InvalidEntry { .. }));
    }

    #[test]
    fn wnid_pattern() {
        assert!(is_valid_wnid("n02086910"));
        assert!(!is_valid_wnid("n0208691"));
        assert!(!is_valid_wnid("x02086910"));
        assert!(!is_valid_wnid("n0208691a"));
    }

    #[test]
    fn catalog_round_trip() {
        let src = sample_source();
        let ids = vec![
            "n03947888".to_string(),
            "n02086910".into(),
            "n01558993".into(),
        ];
        let c = ClassCatalog::load("rt", &src, &ids).unwrap();
        let back = ClassCatalog::from_json("rt", &c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.entries[0].wnid, "n03947888");
    }

    #[test]
    fn duplicate_wnid_rejected() {
        let src = sample_source();
        let ids = vec!["n03947888".to_string(), "n03947888".into()];
        assert!(ClassCatalog::load("d", &src, &ids).is_err());
    }

    #[test]
    fn class_list_parsing() {
        let l = parse_class_list("# header\nn01440764 tench\n\n  n01443537\n");
        assert_eq!(l, vec!["n01440764", "n01443537"]);
    }

    #[test]
    fn scene_normalization() {
        assert_eq!(normalize_scene("/l/living_room 215"), "living room");
        assert_eq!(normalize_scene("Bedroom"), "bedroom");
        assert_eq!(
            normalize_scene("/a/apartment_building/outdoor 8"),
            "apartment building outdoor"
        );
        let b = BackgroundSet::parse("bedroom\n/k/kitchen 1\n").unwrap();
        assert_eq!(b.scenes(), ["bedroom", "kitchen"]);
        assert!(BackgroundSet::parse("bedroom\nBedroom\n").is_err());
        assert!(BackgroundSet::parse("\n").is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn separator_count(lemmas in proptest::collection::vec("[a-zA-Z ]{1,8}[a-z]", 1..6)) {
            let e = ClassEntry {
                wnid: "n00000001".into(),
                class_index: 0,
                lemmas: lemmas.clone(),
                hypernym_lemmas: vec![],
                definition: "d".into(),
            };
            prop_assert_eq!(e.lemmas_string().matches(", ").count(), lemmas.len() - 1);
        }
    }
}
