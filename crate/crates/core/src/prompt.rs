//! Prompt templates and deterministic generation plans.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::{BackgroundSet, ClassCatalog, ClassEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptTemplate {
    Name,
    NameHypernym,
    NameDefinition,
    MultiHypernym,
    MultiDifferentHypernym,
    HypernymBackground,
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 6] = [
        PromptTemplate::Name,
        PromptTemplate::NameHypernym,
        PromptTemplate::NameDefinition,
        PromptTemplate::MultiHypernym,
        PromptTemplate::MultiDifferentHypernym,
        PromptTemplate::HypernymBackground,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PromptTemplate::Name => "NAME",
            PromptTemplate::NameHypernym => "NAME_HYPERNYM",
            PromptTemplate::NameDefinition => "NAME_DEFINITION",
            PromptTemplate::MultiHypernym => "MULTI_HYPERNYM",
            PromptTemplate::MultiDifferentHypernym => "MULTI_DIFFERENT_HYPERNYM",
            PromptTemplate::HypernymBackground => "HYPERNYM_BACKGROUND",
        }
    }

    /// CLI short name.
    pub fn short_name(self) -> &'static str {
        match self {
            PromptTemplate::Name => "name",
            PromptTemplate::NameHypernym => "name_hyper",
            PromptTemplate::NameDefinition => "name_def",
            PromptTemplate::MultiHypernym => "multi",
            PromptTemplate::MultiDifferentHypernym => "multi_diff",
            PromptTemplate::HypernymBackground => "hyper_bg",
        }
    }

    pub fn needs_background(self) -> bool {
        self == PromptTemplate::HypernymBackground
    }

    /// Parses a comma-separated list of short names or ids.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptTemplate::ALL
            .into_iter()
            .find(|t| t.short_name() == s || t.id() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Renders the prompt for one class. `background` must be present exactly
/// when the template is [`PromptTemplate::HypernymBackground`].
pub fn render_prompt(
    entry: &ClassEntry,
    template: PromptTemplate,
    background: Option<&str>,
) -> Result<String> {
    match (template.needs_background(), background) {
        (true, None) => return Err(Error::MissingBackgrounds(template.id().into())),
        (false, Some(b)) => {
            return Err(Error::Contract(format!(
                "background {b:?} given to template {template}"
            )))
        }
        _ => {}
    }
    let c = entry.lemmas_string();
    let h = entry.hypernym_string();
    Ok(match template {
        PromptTemplate::Name => c,
        PromptTemplate::NameHypernym => format!("{c}, {h}"),
        PromptTemplate::NameDefinition => format!("{c}, {}", entry.definition_string()),
        PromptTemplate::MultiHypernym => format!("a photo of multiple {c}, {h}"),
        PromptTemplate::MultiDifferentHypernym => format!("a photo of multiple different {c}, {h}"),
        PromptTemplate::HypernymBackground => {
            format!("{c}, {h} inside {}", background.unwrap_or_default())
        }
    })
}

/// Seed for one record: the first 8 bytes (little-endian) of
/// SHA-256("{plan_seed}|{wnid}|{template_id}|{background}|{index_in_class}").
pub fn derive_seed(
    plan_seed: u64,
    wnid: &str,
    template_id: &str,
    background: &str,
    index_in_class: usize,
) -> u64 {
    let key = format!("{plan_seed}|{wnid}|{template_id}|{background}|{index_in_class}");
    let digest = Sha256::digest(key.as_bytes());
    let mut low = [0u8; 8];
    low.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(low)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub steps: u32,
    pub guidance: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub safety_filter: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            width: 512,
            height: 384,
            safety_filter: false,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.guidance > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Contract(format!(
                "invalid generation parameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub wnid: String,
    pub template: PromptTemplate,
    pub background: Option<String>,
    pub index_in_class: usize,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.wnid,
            self.template,
            self.background.as_deref().unwrap_or("-"),
            self.index_in_class
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub wnid: String,
    pub class_index: usize,
    pub template: PromptTemplate,
    pub background: Option<String>,
    pub prompt: String,
    pub seed: u64,
    pub index_in_class: usize,
}

impl PromptRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            wnid: self.wnid.clone(),
            template: self.template,
            background: self.background.clone(),
            index_in_class: self.index_in_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanHeader {
    plan_seed: u64,
    gen_params: GenParams,
    catalog_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub plan_seed: u64,
    pub records: Vec<PromptRecord>,
    pub gen_params: GenParams,
    pub catalog_name: String,
    /// Left unset by [`build_plan`] so serialized plans stay byte-identical.
    pub created_at: Option<String>,
}

/// Per-class target counts, keyed by wnid.
pub type ClassCounts = BTreeMap<String, usize>;

/// Same count for every class in the catalog.
pub fn uniform_counts(catalog: &ClassCatalog, per_class: usize) -> ClassCounts {
    catalog
        .entries
        .iter()
        .map(|e| (e.wnid.clone(), per_class))
        .collect()
}

/// Parses a counts file: lines of `wnid count` (whitespace or comma separated).
pub fn parse_counts(text: &str) -> Result<ClassCounts> {
    let mut out = ClassCounts::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty());
        let (Some(wnid), Some(count), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::InvalidData(format!(
                "counts line {}: {line:?}",
                lineno + 1
            )));
        };
        let count: usize = count.parse().map_err(|_| {
            Error::InvalidData(format!("counts line {}: bad count {count:?}", lineno + 1))
        })?;
        out.insert(wnid.to_string(), count);
    }
    Ok(out)
}

/// Compiles the plan. Templates are cycled round-robin within each class;
/// background records walk a per-class seeded permutation of the scenes.
pub fn build_plan(
    catalog: &ClassCatalog,
    templates: &[PromptTemplate],
    counts: &ClassCounts,
    backgrounds: Option<&BackgroundSet>,
    plan_seed: u64,
    gen_params: GenParams,
) -> Result<GenerationPlan> {
    if templates.is_empty() {
        return Err(Error::Contract("no templates given".into()));
    }
    if templates.iter().any(|t| t.needs_background()) && backgrounds.is_none() {
        return Err(Error::MissingBackgrounds(
            PromptTemplate::HypernymBackground.id().into(),
        ));
    }
    gen_params.validate()?;
    for (wnid, &count) in counts {
        if catalog.get(wnid).is_none() {
            return Err(Error::UnknownClass(wnid.clone()));
        }
        if count == 0 {
            return Err(Error::Contract(format!(
                "count for {wnid} must be positive"
            )));
        }
    }

    let mut records = Vec::with_capacity(counts.values().sum());
    for entry in &catalog.entries {
        let Some(&count) = counts.get(&entry.wnid) else {
            continue;
        };
        let scene_order = backgrounds.map(|b| {
            let mut order: Vec<&str> = b.scenes().iter().map(String::as_str).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(plan_seed, &entry.wnid, "BG_ORDER", "", 0));
            order.shuffle(&mut rng);
            order
        });
        let mut bg_cursor = 0usize;
        for index_in_class in 0..count {
            let template = templates[index_in_class % templates.len()];
            let background = if template.needs_background() {
                let order = scene_order.as_ref().expect("checked above");
                let scene = order[bg_cursor % order.len()];
                bg_cursor += 1;
                Some(scene.to_string())
            } else {
                None
            };
            let prompt = render_prompt(entry, template, background.as_deref())?;
            let seed = derive_seed(
                plan_seed,
                &entry.wnid,
                template.id(),
                background.as_deref().unwrap_or(""),
                index_in_class,
            );
            records.push(PromptRecord {
                wnid: entry.wnid.clone(),
                class_index: entry.class_index,
                template,
                background,
                prompt,
                seed,
                index_in_class,
            });
        }
    }

    Ok(GenerationPlan {
        plan_seed,
        records,
        gen_params,
        catalog_name: catalog.name.clone(),
        created_at: None,
    })
}

impl GenerationPlan {
    pub fn counts_by_class(&self) -> ClassCounts {
        let mut out = ClassCounts::new();
        for r in &self.records {
            *out.entry(r.wnid.clone()).or_default() += 1;
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.class_index + 1)
            .max()
            .unwrap_or(0)
    }

    /// JSON Lines: a header object followed by one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = PlanHeader {
            plan_seed: self.plan_seed,
            gen_params: self.gen_params.clone(),
            catalog_name: self.catalog_name.clone(),
            created_at: self.created_at.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: PlanHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::InvalidData("empty plan file".into()))?,
        )?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<PromptRecord>, _>>()?;
        Ok(Self {
            plan_seed: header.plan_seed,
            records,
            gen_params: header.gen_params,
            catalog_name: header.catalog_name,
            created_at: header.created_at,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::MetadataSource;
    use std::collections::HashSet;

    fn catalog(ids: &[&str]) -> ClassCatalog {
        let src = MetadataSource::from_json(include_str!("../../../data/wordnet_meta_sample.json"))
            .unwrap();
        let ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        ClassCatalog::load("sample", &src, &ids).unwrap()
    }

    const PAPILLON: &str = "n02086910";
    const PIRATE: &str = "n03947888";

    #[test]
    fn renders_reference_prompts() {
        let c = catalog(&[PAPILLON, PIRATE]);
        let (pap, pir) = (&c.entries[0], &c.entries[1]);
        assert_eq!(
            render_prompt(pap, PromptTemplate::NameHypernym, None).unwrap(),
            "papillon, toy spaniel"
        );
        assert_eq!(
            render_prompt(pap, PromptTemplate::NameDefinition, None).unwrap(),
            "papillon, small slender toy spaniel with erect ears and a black-spotted brown to white coat"
        );
        assert_eq!(
            render_prompt(pir, PromptTemplate::HypernymBackground, Some("bedroom")).unwrap(),
            "pirate, pirate ship, ship inside bedroom"
        );
        assert_eq!(
            render_prompt(pir, PromptTemplate::MultiHypernym, None).unwrap(),
            "a photo of multiple pirate, pirate ship, ship"
        );
        assert_eq!(
            render_prompt(pir, PromptTemplate::MultiDifferentHypernym, None).unwrap(),
            "a photo of multiple different pirate, pirate ship, ship"
        );
        for e in &c.entries {
            assert_eq!(
                render_prompt(e, PromptTemplate::Name, None).unwrap(),
                e.lemmas_string()
            );
        }
    }

    #[test]
    fn background_contract() {
        let c = catalog(&[PAPILLON]);
        let e = &c.entries[0];
        assert!(matches!(
            render_prompt(e, PromptTemplate::Name, Some("bedroom")),
            Err(Error::Contract(_))
        ));
        assert!(render_prompt(e, PromptTemplate::HypernymBackground, None).is_err());
    }

    #[test]
    fn template_names() {
        let all = PromptTemplate::parse_list("name,name_hyper,name_def,multi,multi_diff,hyper_bg")
            .unwrap();
        assert_eq!(all, PromptTemplate::ALL);
        assert_eq!(
            "NAME_HYPERNYM".parse::<PromptTemplate>().unwrap(),
            PromptTemplate::NameHypernym
        );
        assert!(matches!(
            PromptTemplate::parse_list("name,photo_of"),
            Err(Error::UnknownTemplate(t)) if t == "photo_of"
        ));
    }

    #[test]
    fn derive_seed_golden() {
        // Pinned from an independent SHA-256 (Python hashlib) of "0|n02086910|NAME||0".
        assert_eq!(derive_seed(0, PAPILLON, "NAME", "", 0), GOLDEN_SEED);
        assert_eq!(
            derive_seed(0, PAPILLON, "NAME", "", 0),
            derive_seed(0, PAPILLON, "NAME", "", 0)
        );
        assert_ne!(
            derive_seed(0, PAPILLON, "NAME", "", 0),
            derive_seed(0, PAPILLON, "NAME", "", 1)
        );
    }

    const GOLDEN_SEED: u64 = 8_953_604_122_376_564_484;

    #[test]
    fn counts_and_round_robin() {
        let c = catalog(&[PAPILLON, PIRATE]);
        let mut counts = ClassCounts::new();
        counts.insert(PAPILLON.into(), 3);
        counts.insert(PIRATE.into(), 2);
        let plan = build_plan(
            &c,
            &[PromptTemplate::Name],
            &counts,
            None,
            7,
            GenParams::default(),
        )
        .unwrap();
        assert_eq!(plan.records.len(), 5);
        assert_eq!(plan.counts_by_class(), counts);

        let bg = BackgroundSet::parse("bedroom\nkitchen\nbeach\n").unwrap();
        let mut counts = ClassCounts::new();
        counts.insert(PAPILLON.into(), 6);
        let plan = build_plan(
            &c,
            &PromptTemplate::ALL,
            &counts,
            Some(&bg),
            7,
            GenParams::default(),
        )
        .unwrap();
        let used: Vec<_> = plan.records.iter().map(|r| r.template).collect();
        assert_eq!(used, PromptTemplate::ALL);
    }

    #[test]
    fn unknown_class_and_missing_backgrounds() {
        let c = catalog(&[PAPILLON]);
        let mut counts = ClassCounts::new();
        counts.insert("n01440764".into(), 1);
        assert!(matches!(
            build_plan(
                &c,
                &[PromptTemplate::Name],
                &counts,
                None,
                0,
                GenParams::default()
            ),
            Err(Error::UnknownClass(_))
        ));
        let counts = uniform_counts(&c, 2);
        assert!(matches!(
            build_plan(
                &c,
                &[PromptTemplate::HypernymBackground],
                &counts,
                None,
                0,
                GenParams::default()
            ),
            Err(Error::MissingBackgrounds(_))
        ));
    }

    #[test]
    fn background_coverage() {
        let c = catalog(&[PAPILLON, PIRATE]);
        let bg = BackgroundSet::parse("a\nb\nc\nd\ne\n").unwrap();
        let counts = uniform_counts(&c, 23);
        let plan = build_plan(
            &c,
            &[PromptTemplate::HypernymBackground],
            &counts,
            Some(&bg),
            3,
            GenParams::default(),
        )
        .unwrap();
        for e in &c.entries {
            let mut per_scene = BTreeMap::<&str, usize>::new();
            for r in plan.records.iter().filter(|r| r.wnid == e.wnid) {
                *per_scene
                    .entry(r.background.as_deref().unwrap())
                    .or_default() += 1;
            }
            assert_eq!(per_scene.len(), 5);
            assert!(per_scene.values().all(|&n| n >= 23 / 5));
        }
    }

    #[test]
    fn plan_file_round_trip() {
        let c = catalog(&[PAPILLON, PIRATE]);
        let bg = BackgroundSet::parse("bedroom\nkitchen\n").unwrap();
        let plan = build_plan(
            &c,
            &PromptTemplate::ALL,
            &uniform_counts(&c, 8),
            Some(&bg),
            11,
            GenParams::default(),
        )
        .unwrap();
        let text = plan.to_jsonl().unwrap();
        let back = GenerationPlan::from_jsonl(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_jsonl().unwrap(), text);
        let first_record: serde_json::Value =
            serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let keys: HashSet<_> = first_record.as_object().unwrap().keys().cloned().collect();
        let expected: HashSet<String> = [
            "wnid",
            "class_index",
            "template",
            "background",
            "prompt",
            "seed",
            "index_in_class",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        assert_eq!(keys, expected);
        assert!(first_record["background"].is_null());
    }

    #[test]
    fn counts_file() {
        let c = parse_counts("n02086910 3\nn03947888,2\n").unwrap();
        assert_eq!(c["n02086910"], 3);
        assert_eq!(c["n03947888"], 2);
        assert!(parse_counts("n02086910").is_err());
    }
}
