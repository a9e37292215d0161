#![allow(dead_code)]

use std::path::Path;

use dsclone::catalog::{parse_class_list, BackgroundSet, ClassCatalog, MetadataSource};
use dsclone::prompt::{self, GenParams, GenerationPlan, PromptTemplate};
use dsclone::store::{self, DatasetStore, ManifestHeader};

pub const META: &str = include_str!("../../../../data/wordnet_meta_sample.json");
pub const CLASSES: &str = include_str!("../../../../data/classes_sample.txt");
pub const BACKGROUNDS: &str = include_str!("../../../../data/backgrounds_sample.txt");

pub fn catalog() -> ClassCatalog {
    let source = MetadataSource::from_json(META).unwrap();
    ClassCatalog::load("sample", &source, &parse_class_list(CLASSES)).unwrap()
}

pub fn backgrounds() -> BackgroundSet {
    BackgroundSet::parse(BACKGROUNDS).unwrap()
}

/// All six templates, `per_class` images per class at `width`×`height`.
pub fn plan(per_class: usize, seed: u64, width: u32, height: u32) -> GenerationPlan {
    let catalog = catalog();
    let params = GenParams {
        width,
        height,
        ..GenParams::default()
    };
    prompt::build_plan(
        &catalog,
        &PromptTemplate::ALL,
        &prompt::uniform_counts(&catalog, per_class),
        Some(&backgrounds()),
        seed,
        params,
    )
    .unwrap()
}

pub fn header(plan: &GenerationPlan) -> ManifestHeader {
    ManifestHeader {
        format_version: store::FORMAT_VERSION,
        plan_seed: plan.plan_seed,
        catalog_name: plan.catalog_name.clone(),
    }
}

pub fn create_store(root: &Path, plan: &GenerationPlan) -> DatasetStore {
    DatasetStore::create(root, header(plan)).unwrap()
}

pub fn open_store(root: &Path, plan: &GenerationPlan) -> DatasetStore {
    DatasetStore::open_or_create(root, header(plan)).unwrap()
}
