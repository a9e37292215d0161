//! Evaluation: top-k accuracy (optionally class-restricted), feature
//! extraction and linear probing.

pub mod features;
pub mod probe;
pub mod topk;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use features::{extract_features, FeatureMatrix, FeatureMeta};
pub use probe::{linear_probe, ProbeReport, TunerConfig};
pub use topk::{topk_accuracy, ClassMask};

use crate::error::{Error, Result};
use crate::generation::load_image;
use crate::par::{self, Parallelism};
use crate::store::DatasetView;
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"top1"`, `"top5"`, … → accuracy in [0, 1].
    #[serde(flatten)]
    pub accuracy: BTreeMap<String, f64>,
    pub n: usize,
    pub dataset: String,
    pub masked_classes: Option<usize>,
    pub mask_logits: bool,
}

/// Logits for every image of `dataset` under the checkpoint's evaluation
/// preprocessing, in dataset order.
pub fn dataset_logits(
    ckpt: &Checkpoint,
    dataset: &DatasetView,
    par: Parallelism,
) -> Result<Vec<Vec<f32>>> {
    par::map(par, &dataset.items, |item| {
        load_image(&item.path).map(|img| ckpt.logits(&img))
    })
    .into_iter()
    .collect()
}

/// Scores the checkpoint on `dataset` for every k in `ks`.
pub fn evaluate_topk(
    ckpt: &Checkpoint,
    dataset: &DatasetView,
    ks: &[usize],
    mask: Option<&ClassMask>,
    mask_logits: bool,
    par: Parallelism,
) -> Result<EvalReport> {
    let n_classes = ckpt.num_classes();
    if let Some(bad) = dataset.items.iter().find(|i| i.label >= n_classes) {
        return Err(Error::InvalidData(format!(
            "dataset label {} outside the checkpoint's {n_classes} classes",
            bad.label
        )));
    }
    if let Some(m) = mask {
        if let Some(bad) = dataset.items.iter().find(|i| !m.contains(i.label)) {
            return Err(Error::MaskMismatch(format!(
                "{} has label {} outside the class mask",
                bad.path.display(),
                bad.label
            )));
        }
    }
    let logits = dataset_logits(ckpt, dataset, par)?;
    let acc = topk_accuracy(&logits, &dataset.labels(), ks, mask, mask_logits)?;
    Ok(EvalReport {
        accuracy: topk::topk_keys(&acc),
        n: dataset.len(),
        dataset: dataset.root.display().to_string(),
        masked_classes: mask.map(ClassMask::len),
        mask_logits,
    })
}
