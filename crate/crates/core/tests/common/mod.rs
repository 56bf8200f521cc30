//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use headkd::data::{generate, DatasetKind, LabeledDataset, SyntheticSpec};

pub fn rings(seed: u64, samples_per_class: usize) -> LabeledDataset {
    generate(&SyntheticSpec {
        kind: DatasetKind::ConcentricRings,
        num_classes: 4,
        dim: 8,
        samples_per_class,
        noise_std: 0.15,
        seed,
    })
    .unwrap()
}

pub fn blobs(seed: u64, num_classes: usize, samples_per_class: usize) -> LabeledDataset {
    generate(&SyntheticSpec {
        kind: DatasetKind::GaussianBlobs,
        num_classes,
        dim: 4,
        samples_per_class,
        noise_std: 0.5,
        seed,
    })
    .unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Silhouette-style score computed by brute force: all pairs for `sigma`,
/// centroids recomputed per query for `delta`.
pub fn naive_msc(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let centroid = |c: usize| {
        let mut sum = vec![0.0; points[0].len()];
        let mut n = 0.0;
        for (p, &y) in points.iter().zip(labels) {
            if y == c {
                for (s, v) in sum.iter_mut().zip(p) {
                    *s += v;
                }
                n += 1.0;
            }
        }
        sum.into_iter().map(|s| s / n).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    for i in 0..points.len() {
        let (mut sigma, mut count) = (0.0, 0usize);
        for j in 0..points.len() {
            if j != i && labels[j] == labels[i] {
                sigma += dist(&points[i], &points[j]);
                count += 1;
            }
        }
        let sigma = if count == 0 {
            0.0
        } else {
            sigma / count as f64
        };
        let mut delta = f64::INFINITY;
        for &c in &classes {
            if c != labels[i] {
                delta = delta.min(dist(&points[i], &centroid(c)));
            }
        }
        let m = delta.max(sigma);
        total += if m == 0.0 { 0.0 } else { (delta - sigma) / m };
    }
    total / points.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
