//! Representation diagnostics: teacher/student embedding angles, the mean
//! silhouette coefficient (MSC) of an embedding set, and accuracy.

use std::collections::BTreeMap;

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::ModelBundle;
use crate::tensor::{argmax, euclidean, norm, Tensor};

/// Embedding vectors `[N, d]` with one class label per row.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>) -> Result<Self> {
        if vectors.num_rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding_set",
                lhs: vectors.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::arg("labels", "embedding set is empty"));
        }
        Ok(Self { vectors, labels })
    }
}

/// Angle in radians between two vectors: `arccos` of their cosine
/// similarity, in `[0, pi]`.
///
/// Evaluated as `2 atan2(|u - v|, |u + v|)` on the unit vectors `u`, `v`,
/// which equals the clamped `arccos` but keeps full precision near 0 and pi;
/// identical directions give exactly 0.
pub fn embedding_angle(z_t: &[f64], z_s: &[f64]) -> Result<f64> {
    if z_t.len() != z_s.len() {
        return Err(Error::ShapeMismatch {
            op: "embedding_angle",
            lhs: vec![z_t.len()],
            rhs: vec![z_s.len()],
        });
    }
    let (nt, ns) = (norm(z_t), norm(z_s));
    if nt == 0.0 {
        return Err(Error::ZeroNorm(0));
    }
    if ns == 0.0 {
        return Err(Error::ZeroNorm(1));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in z_t.iter().zip(z_s) {
        let (u, v) = (a / nt, b / ns);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// Row-by-row angles between two feature matrices.
pub fn row_angles(z_t: &Tensor, z_s: &Tensor) -> Result<Vec<f64>> {
    if z_t.shape() != z_s.shape() {
        return Err(Error::DimensionMismatch(format!(
            "teacher features {:?} vs student features {:?}",
            z_t.shape(),
            z_s.shape()
        )));
    }
    z_t.rows()
        .zip(z_s.rows())
        .enumerate()
        .map(|(i, (t, s))| embedding_angle(t, s).map_err(|_| Error::ZeroNorm(i)))
        .collect()
}

/// Mean angle between teacher and student features over the test split.
/// Student features include its adapter, so the two widths must agree.
pub fn mean_angle(
    teacher: &ModelBundle,
    student: &ModelBundle,
    data: &LabeledDataset,
) -> Result<f64> {
    let x = data.split_features(Split::Test)?;
    let angles = row_angles(&teacher.features(&x)?, &student.features(&x)?)?;
    Ok(angles.iter().sum::<f64>() / angles.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MscReport {
    pub score: f64,
    pub per_sample: Vec<f64>,
    /// Classes with one member; their `sigma` is taken as 0.
    pub singleton_classes: usize,
}

/// Mean over samples of `(delta - sigma) / max(delta, sigma)`, where `sigma`
/// is the mean distance to the other members of the sample's class and
/// `delta` the smallest distance to the centroid of any other class.
/// A sample with `delta = sigma = 0` scores 0.
pub fn msc_score(set: &EmbeddingSet) -> Result<f64> {
    msc_details(set).map(|r| r.score)
}

pub fn msc_details(set: &EmbeddingSet) -> Result<MscReport> {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in set.labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::arg(
            "labels",
            "MSC needs at least two distinct classes",
        ));
    }
    let d = set.vectors.row_len();
    let centroids: BTreeMap<usize, Vec<f64>> = members
        .iter()
        .map(|(&c, idx)| {
            let mut sum = vec![0.0; d];
            for &i in idx {
                for (s, v) in sum.iter_mut().zip(set.vectors.row(i)) {
                    *s += v;
                }
            }
            let n = idx.len() as f64;
            (c, sum.into_iter().map(|s| s / n).collect())
        })
        .collect();

    let mut per_sample = Vec::with_capacity(set.labels.len());
    for (i, &y) in set.labels.iter().enumerate() {
        let zi = set.vectors.row(i);
        let same = &members[&y];
        let sigma = if same.len() > 1 {
            let mut total = 0.0;
            for &j in same {
                if j != i {
                    total += euclidean(zi, set.vectors.row(j));
                }
            }
            total / (same.len() - 1) as f64
        } else {
            0.0
        };
        let delta = centroids
            .iter()
            .filter(|(&c, _)| c != y)
            .map(|(_, centre)| euclidean(zi, centre))
            .fold(f64::INFINITY, f64::min);
        let denom = delta.max(sigma);
        per_sample.push(if denom == 0.0 {
            0.0
        } else {
            (delta - sigma) / denom
        });
    }
    let score = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(MscReport {
        score,
        per_sample,
        singleton_classes: members.values().filter(|m| m.len() == 1).count(),
    })
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(p: &Tensor, labels: &[usize]) -> f64 {
    let correct = p
        .rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn set(points: &[[f64; 2]], labels: &[usize]) -> EmbeddingSet {
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        EmbeddingSet::new(Tensor::from_rows(&rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn angle_cases() {
        assert_eq!(embedding_angle(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            embedding_angle(&[0.3, -7.1, 2.2], &[0.6, -14.2, 4.4]).unwrap(),
            0.0
        );
        assert!((embedding_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        let a = embedding_angle(&[3.0, 4.0], &[0.0, 1.0]).unwrap();
        assert!((a - 0.8f64.acos()).abs() < 1e-15);
        assert!((a - 0.643501).abs() < 1e-6);
        assert!((embedding_angle(&[1.0, 1.0], &[-2.0, -2.0]).unwrap() - PI).abs() < 1e-12);
        assert!(matches!(
            embedding_angle(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(0))
        ));
    }

    #[test]
    fn msc_two_singletons() {
        let r = msc_details(&set(&[[0.0, 0.0], [1.0, 1.0]], &[0, 1])).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.singleton_classes, 2);
    }

    #[test]
    fn msc_four_points() {
        let s = set(
            &[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]],
            &[0, 0, 1, 1],
        );
        let delta = 100.25f64.sqrt();
        let expected = (delta - 1.0) / delta;
        let v = msc_score(&s).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.900125).abs() < 1e-6);
    }

    #[test]
    fn msc_degenerate_is_zero() {
        let s = set(&[[1.0, 1.0]; 4], &[0, 0, 1, 1]);
        assert_eq!(msc_score(&s).unwrap(), 0.0);
    }

    #[test]
    fn msc_single_class_errors() {
        assert!(msc_score(&set(&[[0.0, 0.0], [1.0, 0.0]], &[3, 3])).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(accuracy(&p, &[0, 1]), 1.0);
        assert_eq!(accuracy(&p, &[1, 0]), 0.0);
        let tie = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(accuracy(&tie, &[0]), 1.0);
        assert_eq!(accuracy(&tie, &[1]), 0.0);
    }
}
