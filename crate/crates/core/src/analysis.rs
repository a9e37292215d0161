//! Representation statistics over a feature matrix: sparsity, intra-class
//! distance, feature redundancy and coding length.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::FeatureMatrix;

pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 1e-5;
pub const DEFAULT_EPS2: f64 = 0.5;

/// Scales each nonzero row to unit ℓ2 norm; returns the number of all-zero
/// rows, which are left untouched.
pub fn l2_normalize_rows(x: &mut FeatureMatrix) -> usize {
    let d = x.d;
    let mut zero_rows = 0;
    for row in x.data.chunks_mut(d.max(1)) {
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows += 1;
        } else {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
    x.normalized = true;
    zero_rows
}

/// Fraction of entries with absolute value below `threshold`.
pub fn sparsity_ratio(x: &FeatureMatrix, threshold: f64) -> Result<f64> {
    if x.data.is_empty() {
        return Err(Error::InvalidData("sparsity of an empty matrix".into()));
    }
    let small = x
        .data
        .iter()
        .filter(|v| (v.abs() as f64) < threshold)
        .count();
    Ok(small as f64 / x.data.len() as f64)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean pairwise ℓ2 distance within each class, macro-averaged over the
/// classes that have at least two samples.
pub fn intra_class_distance(x: &FeatureMatrix) -> Result<f64> {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in x.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let per_class: Vec<f64> = by_class
        .values()
        .filter(|rows| rows.len() >= 2)
        .map(|rows| {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for (a, &i) in rows.iter().enumerate() {
                for &j in &rows[a + 1..] {
                    sum += l2(x.row(i), x.row(j));
                    pairs += 1;
                }
            }
            sum / pairs as f64
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::InvalidData(
            "no class has two or more samples".into(),
        ));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mean absolute Pearson correlation over all ordered column pairs,
/// diagonal included. Constant columns correlate 0 with every other column.
pub fn feature_redundancy(x: &FeatureMatrix) -> Result<f64> {
    if x.n < 2 {
        return Err(Error::InvalidData(
            "redundancy needs at least two rows".into(),
        ));
    }
    if x.d == 0 {
        return Err(Error::InvalidData(
            "redundancy of zero-width features".into(),
        ));
    }
    let (n, d) = (x.n, x.d);
    let mut centered = vec![0.0f64; n * d];
    let mut norms = vec![0.0f64; d];
    for j in 0..d {
        let mean = (0..n).map(|i| x.data[i * d + j] as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            let c = x.data[i * d + j] as f64 - mean;
            centered[i * d + j] = c;
            norms[j] += c * c;
        }
        norms[j] = norms[j].sqrt();
    }
    let mut total = d as f64;
    for a in 0..d {
        for b in a + 1..d {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let cov: f64 = (0..n)
                .map(|i| centered[i * d + a] * centered[i * d + b])
                .sum();
            total += 2.0 * (cov / (norms[a] * norms[b])).abs().min(1.0);
        }
    }
    Ok(total / (d * d) as f64)
}

/// `½ log det(I + d/(N·eps2) · XᵀX)` from the eigenvalues of the smaller of
/// the two Gram matrices, in nats. Zero eigenvalues contribute nothing.
pub fn coding_length(x: &FeatureMatrix, eps2: f64) -> Result<f64> {
    if x.n == 0 {
        return Err(Error::InvalidData(
            "coding length of an empty matrix".into(),
        ));
    }
    if !(eps2 > 0.0) {
        return Err(Error::Contract("eps2 must be positive".into()));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("non-finite feature value".into()));
    }
    let m = DMatrix::from_row_iterator(x.n, x.d, x.data.iter().map(|v| *v as f64));
    let gram = if x.n < x.d {
        &m * m.transpose()
    } else {
        m.transpose() * &m
    };
    let coeff = x.d as f64 / (x.n as f64 * eps2);
    let eig = gram.symmetric_eigen();
    Ok(0.5
        * eig
            .eigenvalues
            .iter()
            .map(|l| (coeff * l.max(0.0)).ln_1p())
            .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Sparsity,
    Intra,
    Redundancy,
    Coding,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Sparsity,
        Metric::Intra,
        Metric::Redundancy,
        Metric::Coding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sparsity => "sparsity",
            Metric::Intra => "intra",
            Metric::Redundancy => "redundancy",
            Metric::Coding => "coding",
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Metric>> {
        let mut out = Vec::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m = Self::ALL
                .into_iter()
                .find(|m| m.name() == name)
                .ok_or_else(|| Error::Contract(format!("unknown metric {name:?}")))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub threshold: f64,
    pub eps2: f64,
    pub log_base: Option<f64>,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_SPARSITY_THRESHOLD,
            eps2: DEFAULT_EPS2,
            log_base: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intra_class_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redundancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coding_length: Option<f64>,
    pub params: MetricParams,
    pub zero_rows: usize,
    pub n: usize,
    pub d: usize,
    pub dataset_group: Option<String>,
}

/// Normalizes a copy of `x` (unless already normalized) and computes the
/// requested metrics. Coding length and redundancy use the normalized rows
/// as well, matching how the features are compared across encoders.
pub fn analyze(
    x: &FeatureMatrix,
    metrics: &[Metric],
    params: &MetricParams,
    dataset_group: Option<String>,
) -> Result<MetricsReport> {
    x.validate()?;
    let mut xn = x.clone();
    let zero_rows = if x.normalized {
        x.data
            .chunks(x.d.max(1))
            .filter(|r| r.iter().all(|v| *v == 0.0))
            .count()
    } else {
        l2_normalize_rows(&mut xn)
    };
    let mut report = MetricsReport {
        sparsity: None,
        intra_class_l2: None,
        redundancy: None,
        coding_length: None,
        params: params.clone(),
        zero_rows,
        n: x.n,
        d: x.d,
        dataset_group,
    };
    for m in metrics {
        match m {
            Metric::Sparsity => report.sparsity = Some(sparsity_ratio(&xn, params.threshold)?),
            Metric::Intra => report.intra_class_l2 = Some(intra_class_distance(&xn)?),
            Metric::Redundancy => report.redundancy = Some(feature_redundancy(&xn)?),
            Metric::Coding => {
                let nats = coding_length(&xn, params.eps2)?;
                report.coding_length = Some(match params.log_base {
                    Some(b) => nats / b.ln(),
                    None => nats,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: &[Vec<f32>], labels: Vec<i32>) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows, labels).unwrap()
    }

    #[test]
    fn normalize_rows() {
        let mut x = fm(
            &[vec![3.0, 4.0], vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0, 0, 0],
        );
        assert_eq!(l2_normalize_rows(&mut x), 1);
        assert_eq!(x.row(0), &[0.6, 0.8]);
        assert_eq!(x.row(1), &[0.0, 0.0]);
        assert_eq!(x.row(2), &[1.0, 0.0]);
    }

    #[test]
    fn sparsity_examples() {
        let d = 2048;
        let rows: Vec<Vec<f32>> = (0..4)
            .map(|i| {
                let mut r = vec![0.0; d];
                r[i] = 1.0;
                r
            })
            .collect();
        assert_eq!(
            sparsity_ratio(&fm(&rows, vec![0; 4]), 1e-5).unwrap(),
            2047.0 / 2048.0
        );
        let dense = fm(&[vec![0.25; 16]], vec![0]);
        assert_eq!(sparsity_ratio(&dense, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn intra_examples() {
        let same = fm(&[vec![1.0, 0.0], vec![1.0, 0.0]], vec![0, 0]);
        assert_eq!(intra_class_distance(&same).unwrap(), 0.0);
        let eye = fm(
            &[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![0; 3],
        );
        assert!((intra_class_distance(&eye).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let singletons = fm(&[vec![1.0], vec![2.0]], vec![0, 1]);
        assert!(intra_class_distance(&singletons).is_err());
    }

    #[test]
    fn redundancy_examples() {
        let x = fm(
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
            ],
            vec![0; 4],
        );
        assert!((feature_redundancy(&x).unwrap() - 0.5).abs() < 1e-12);
        let anti = fm(
            &[vec![1.0, -1.0], vec![2.0, -2.0], vec![5.0, -5.0]],
            vec![0; 3],
        );
        assert!((feature_redundancy(&anti).unwrap() - 1.0).abs() < 1e-12);
        let constant = fm(&[vec![1.0, 7.0], vec![2.0, 7.0]], vec![0; 2]);
        assert_eq!(feature_redundancy(&constant).unwrap(), 0.5);
        assert!(feature_redundancy(&fm(&[vec![1.0]], vec![0])).is_err());
    }

    #[test]
    fn coding_length_examples() {
        let zero = fm(&vec![vec![0.0; 3]; 4], vec![0; 4]);
        assert_eq!(coding_length(&zero, 0.5).unwrap(), 0.0);
        let eye = fm(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        assert!((coding_length(&eye, 0.5).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analyze_reports_requested_metrics_only() {
        let x = fm(
            &[vec![3.0, 4.0], vec![4.0, 3.0], vec![0.0, 1.0]],
            vec![0, 0, 1],
        );
        let r = analyze(
            &x,
            &[Metric::Sparsity, Metric::Coding],
            &MetricParams::default(),
            None,
        )
        .unwrap();
        assert!(r.sparsity.is_some() && r.coding_length.is_some());
        assert!(r.redundancy.is_none() && r.intra_class_l2.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["params"]["threshold"], 1e-5);
        assert_eq!(
            Metric::parse_list("sparsity,intra,redundancy,coding").unwrap(),
            Metric::ALL.to_vec()
        );
        assert!(Metric::parse_list("entropy").is_err());
    }

    fn matrix() -> impl Strategy<Value = FeatureMatrix> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(n, d)| {
            prop::collection::vec(-2.0f32..2.0, n * d)
                .prop_map(move |data| FeatureMatrix::new(n, d, data, vec![0; n]).unwrap())
        })
    }

    proptest! {
        #[test]
        fn coding_length_matches_direct_log_det(x in matrix()) {
            let m = DMatrix::from_row_iterator(x.n, x.d, x.data.iter().map(|v| *v as f64));
            let coeff = x.d as f64 / (x.n as f64 * 0.5);
            let a = DMatrix::<f64>::identity(x.d, x.d) + m.transpose() * &m * coeff;
            let direct = 0.5 * a.determinant().ln();
            prop_assert!((coding_length(&x, 0.5).unwrap() - direct).abs() < 1e-9);
        }

        #[test]
        fn coding_length_row_permutation_invariant(x in matrix()) {
            let rows: Vec<usize> = (0..x.n).rev().collect();
            let y = x.select(&rows);
            prop_assert!((coding_length(&x, 0.5).unwrap() - coding_length(&y, 0.5).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn redundancy_within_bounds(x in matrix()) {
            prop_assume!(x.n >= 2);
            let r = feature_redundancy(&x).unwrap();
            prop_assert!(r >= 1.0 / x.d as f64 - 1e-12 && r <= 1.0 + 1e-12);
        }

        #[test]
        fn sparsity_monotone_in_threshold(x in matrix(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(sparsity_ratio(&x, lo).unwrap() <= sparsity_ratio(&x, hi).unwrap());
        }
    }
}
