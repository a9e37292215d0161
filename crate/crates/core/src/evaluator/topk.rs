//! Top-k accuracy, optionally restricted to a subset of classes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classes present in a restricted test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMask {
    allowed: BTreeSet<usize>,
}

impl ClassMask {
    pub fn new(allowed: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let allowed: BTreeSet<usize> = allowed.into_iter().collect();
        if allowed.is_empty() {
            return Err(Error::MaskMismatch("empty class mask".into()));
        }
        if let Some(&bad) = allowed.iter().find(|&&c| c >= num_classes) {
            return Err(Error::MaskMismatch(format!(
                "mask class {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self { allowed })
    }

    pub fn all(num_classes: usize) -> Result<Self> {
        Self::new(0..num_classes, num_classes)
    }

    /// Parses one entry per line: a wnid (resolved through `classes`) or a
    /// class index.
    pub fn parse(text: &str, classes: &[String]) -> Result<Self> {
        let mut allowed = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let token = line.split_whitespace().next().unwrap_or(line);
            let idx = match token.parse::<usize>() {
                Ok(i) => i,
                Err(_) => classes.iter().position(|w| w == token).ok_or_else(|| {
                    Error::MaskMismatch(format!("mask wnid {token} not a checkpoint class"))
                })?,
            };
            allowed.push(idx);
        }
        Self::new(allowed, classes.len())
    }

    pub fn load(path: &Path, classes: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, classes)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.allowed.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.allowed.iter().copied()
    }
}

/// 0-based rank of `label` among the candidate classes: the number of
/// candidates with a higher logit, or an equal logit and smaller index.
pub fn rank_of(logits: &[f32], label: usize, mask: Option<&ClassMask>) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, _)| mask.is_none_or(|m| m.contains(c)))
        .filter(|&(c, &l)| l > target || (l == target && c < label))
        .count()
}

/// Fraction of samples whose label ranks within the top k, for every k.
///
/// With a mask, every label must be in the mask. If `mask_logits` is set,
/// ranking is among masked classes only; otherwise among all classes.
pub fn topk_accuracy(
    logits: &[Vec<f32>],
    labels: &[usize],
    ks: &[usize],
    mask: Option<&ClassMask>,
    mask_logits: bool,
) -> Result<BTreeMap<usize, f64>> {
    if logits.len() != labels.len() {
        return Err(Error::Contract("one logit row per label required".into()));
    }
    if logits.is_empty() {
        return Err(Error::InvalidData("no samples to evaluate".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Contract("k must be positive".into()));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::InvalidData(format!(
                "label {label} outside {} logits",
                row.len()
            )));
        }
        if let Some(m) = mask {
            if !m.contains(label) {
                return Err(Error::MaskMismatch(format!(
                    "test label {label} not in class mask"
                )));
            }
        }
        let rank = rank_of(row, label, if mask_logits { mask } else { None });
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = labels.len() as f64;
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect())
}

/// `{"top1": .., "top5": ..}` style keys.
pub fn topk_keys(acc: &BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
    acc.iter().map(|(k, v)| (format!("top{k}"), *v)).collect()
}
