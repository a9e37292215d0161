//! Feature matrices: extraction from a trained encoder and the `FEATMAT1`
//! binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "FEATMAT1"
//! u32       header length L
//! L bytes   UTF-8 JSON {"n", "d", "dtype": "f32", "normalized", "meta"}
//! n·d f32   features, row-major
//! n   i32   labels
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::load_image;
use crate::imaging::{resize_center_crop, Normalization, Tensor3};
use crate::nn::Model;
use crate::par::{self, Parallelism};
use crate::store::DatasetView;

pub const FEATMAT_MAGIC: &[u8; 8] = b"FEATMAT1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    #[serde(default)]
    pub source_dataset: String,
    #[serde(default)]
    pub encoder_id: String,
    /// Images that could not be decoded and were left out.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

/// `n × d` features (row-major) with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub labels: Vec<i32>,
    pub normalized: bool,
    pub meta: FeatureMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    n: usize,
    d: usize,
    dtype: String,
    normalized: bool,
    meta: FeatureMeta,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>, labels: Vec<i32>) -> Result<Self> {
        let m = Self {
            n,
            d,
            data,
            labels,
            normalized: false,
            meta: FeatureMeta::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>], labels: Vec<i32>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidData("ragged feature rows".into()));
        }
        Self::new(rows.len(), d, rows.concat(), labels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n * self.d || self.labels.len() != self.n {
            return Err(Error::InvalidData(format!(
                "feature matrix {}x{} with {} values and {} labels",
                self.n,
                self.d,
                self.data.len(),
                self.labels.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        if self.labels.iter().any(|&l| l < 0) {
            return Err(Error::InvalidData("negative label".into()));
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Row subset, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            n: rows.len(),
            d: self.d,
            data,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            normalized: self.normalized,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            n: self.n,
            d: self.d,
            dtype: "f32".into(),
            normalized: self.normalized,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * (self.data.len() + self.n));
        out.extend_from_slice(FEATMAT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::InvalidData(format!("feature file: {m}"));
        if bytes.len() < 12 || &bytes[..8] != FEATMAT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        if header.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", header.dtype)));
        }
        let rest = &body[len..];
        let nd = header.n * header.d;
        if rest.len() != 4 * (nd + header.n) {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                4 * (nd + header.n),
                rest.len()
            )));
        }
        let words = |b: &[u8]| -> Vec<[u8; 4]> {
            b.chunks_exact(4)
                .map(|c| c.try_into().expect("4 bytes"))
                .collect()
        };
        let data = words(&rest[..4 * nd])
            .into_iter()
            .map(f32::from_le_bytes)
            .collect();
        let labels = words(&rest[4 * nd..])
            .into_iter()
            .map(i32::from_le_bytes)
            .collect();
        let m = Self {
            n: header.n,
            d: header.d,
            data,
            labels,
            normalized: header.normalized,
            meta: header.meta,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Encodes every decodable image of `dataset`: shortest side resized to
/// `resolution` (bicubic), central square crop, normalization, encoder.
/// Rows follow dataset order; undecodable images are skipped and listed in
/// `meta.skipped`.
pub fn extract_features(
    model: &Model,
    norm: &Normalization,
    dataset: &DatasetView,
    resolution: u32,
    par: Parallelism,
) -> Result<FeatureMatrix> {
    let rows = par::map(par, &dataset.items, |item| {
        load_image(&item.path).map(|img| {
            let mut t = Tensor3::from_rgb(&resize_center_crop(&img, resolution));
            norm.apply(&mut t);
            model.encode(&t)
        })
    });
    let d = model.feature_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    let mut meta = FeatureMeta {
        source_dataset: dataset.root.display().to_string(),
        encoder_id: format!("{}{:?}", model.spec.arch, model.spec.channels),
        skipped: vec![],
    };
    for (item, row) in dataset.items.iter().zip(rows) {
        match row {
            Ok(z) => {
                data.extend_from_slice(&z);
                labels.push(item.label as i32);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", item.path.display());
                meta.skipped.push(item.path.display().to_string());
            }
        }
    }
    let mut m = FeatureMatrix::new(labels.len(), d, data, labels)?;
    m.meta = meta;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_files() {
        assert!(FeatureMatrix::from_bytes(b"FEATMAT2\0\0\0\0").is_err());
        let m = FeatureMatrix::from_rows(&[vec![1.0, 2.0]], vec![0]).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        bytes.pop();
        assert!(FeatureMatrix::from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_fields() {
        let m = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], vec![0, 1]).unwrap();
        let bytes = m.to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header["n"], 2);
        assert_eq!(header["d"], 2);
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["normalized"], false);
        assert_eq!(bytes.len(), 12 + len + 4 * 4 + 2 * 4);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n in 0usize..6,
            d in 1usize..5,
            seed in any::<u64>(),
            normalized in any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n * d).map(|_| f32::from_bits(rng.random::<u32>() & 0xBFFF_FFFF)).map(|v| if v.is_finite() { v } else { 0.0 }).collect();
            let labels: Vec<i32> = (0..n).map(|_| rng.random_range(0..1000)).collect();
            let mut m = FeatureMatrix::new(n, d, data, labels).unwrap();
            m.normalized = normalized;
            m.meta.encoder_id = "enc".into();
            let bytes = m.to_bytes().unwrap();
            let back = FeatureMatrix::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.labels, m.labels);
        }
    }
}
