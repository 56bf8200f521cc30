//! Labelled datasets: synthetic generators, CSV I/O, stratified splits and
//! seeded mini-batches.
//!
//! Generation, splitting and batching each draw from their own RNG stream
//! (see [`crate::rng`]), so e.g. changing the batch size never changes the
//! generated points or the split.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{euclidean, Tensor};

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Minimum distance between two blob centroids, in units of `noise_std`.
pub const BLOB_SEPARATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianBlobs,
    ConcentricRings,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::GaussianBlobs => "gaussian_blobs",
            DatasetKind::ConcentricRings => "concentric_rings",
        })
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_blobs" => Ok(DatasetKind::GaussianBlobs),
            "concentric_rings" => Ok(DatasetKind::ConcentricRings),
            other => Err(Error::arg(
                "kind",
                format!(
                    "unknown dataset kind `{other}` (expected gaussian_blobs or concentric_rings)"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Every violated field, in declaration order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!(
                "num_classes: must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.dim < 2 {
            v.push(format!("dim: must be >= 2, got {}", self.dim));
        }
        if self.samples_per_class < 2 {
            v.push(format!(
                "samples_per_class: must be >= 2, got {}",
                self.samples_per_class
            ));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            v.push(format!("noise_std: must be > 0, got {}", self.noise_std));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    /// Contiguous class ids `0..num_classes`.
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    /// Original label value of each class id.
    pub label_values: Vec<i64>,
}

impl LabeledDataset {
    /// Build from raw labels, remapping them to contiguous ids (ascending by
    /// value) and assigning a stratified train/test split.
    pub fn new(
        features: Tensor,
        raw_labels: &[i64],
        split_seed: u64,
        test_fraction: f64,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::arg(
                "features",
                format!("expected [N, d], got {:?}", features.shape()),
            ));
        }
        if features.num_rows() != raw_labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![raw_labels.len()],
            });
        }
        let mut label_values = raw_labels.to_vec();
        label_values.sort_unstable();
        label_values.dedup();
        let labels: Vec<usize> = raw_labels
            .iter()
            .map(|v| label_values.binary_search(v).expect("present"))
            .collect();
        let split = stratified_split(&labels, label_values.len(), test_fraction, split_seed)?;
        Ok(Self {
            features,
            labels,
            split,
            label_values,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.row_len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_values.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn split_features(&self, split: Split) -> Result<Tensor> {
        self.features.select_rows(&self.indices(split))
    }

    pub fn split_labels(&self, split: Split) -> Vec<usize> {
        self.indices(split)
            .into_iter()
            .map(|i| self.labels[i])
            .collect()
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Same points and labels under a fresh stratified split.
    pub fn resplit(&self, split_seed: u64, test_fraction: f64) -> Result<Self> {
        let mut out = self.clone();
        out.split = stratified_split(&self.labels, self.num_classes(), test_fraction, split_seed)?;
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            out.push_str(&format!("f{j},"));
        }
        out.push_str("label\n");
        for (row, &y) in self.features.rows().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.label_values[y]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Per class: shuffle its indices with the split stream and send
/// `round(n_c * test_fraction)` of them (at least one, at most `n_c - 1`) to
/// the test split.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<Split>> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::arg(
            "test_fraction",
            format!("must lie in (0, 1), got {test_fraction}"),
        ));
    }
    let mut split = vec![Split::Train; labels.len()];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(Error::arg(
                "labels",
                format!(
                    "class {c} has {} sample(s); each class needs one per split",
                    idx.len()
                ),
            ));
        }
        let mut rng = Rng::stream(seed, Stream::Split, c as u64);
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_test] {
            split[i] = Split::Test;
        }
    }
    Ok(split)
}

pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = Rng::stream(spec.seed, Stream::Generate, 0);
    let (n, d) = (spec.num_classes * spec.samples_per_class, spec.dim);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        DatasetKind::GaussianBlobs => {
            let centroids = blob_centroids(spec, &mut rng);
            for (c, centre) in centroids.iter().enumerate() {
                for _ in 0..spec.samples_per_class {
                    data.extend(centre.iter().map(|m| m + spec.noise_std * rng.normal()));
                    labels.push(c as i64);
                }
            }
        }
        DatasetKind::ConcentricRings => {
            // Class c lies on the circle of radius c + 1 in the first two
            // coordinates (uniform angle, radial noise); the remaining
            // coordinates are pure noise.
            for c in 0..spec.num_classes {
                let radius = (c + 1) as f64;
                for _ in 0..spec.samples_per_class {
                    let theta = std::f64::consts::TAU * rng.uniform();
                    let r = radius + spec.noise_std * rng.normal();
                    data.push(r * theta.cos());
                    data.push(r * theta.sin());
                    for _ in 2..d {
                        data.push(spec.noise_std * rng.normal());
                    }
                    labels.push(c as i64);
                }
            }
        }
    }
    let features = Tensor::matrix(n, d, data)?;
    LabeledDataset::new(features, &labels, spec.seed, DEFAULT_TEST_FRACTION)
}

/// Rejection-sample centroids uniformly in a cube until every pair is at
/// least `BLOB_SEPARATION * noise_std` apart; the cube grows by half after
/// 1000 consecutive rejections.
fn blob_centroids(spec: &SyntheticSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let min_dist = BLOB_SEPARATION * spec.noise_std;
    let mut half_width = min_dist;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut rejections = 0;
    while centroids.len() < spec.num_classes {
        let cand: Vec<f64> = (0..spec.dim)
            .map(|_| rng.uniform_range(-half_width, half_width))
            .collect();
        if centroids.iter().all(|c| euclidean(c, &cand) >= min_dist) {
            centroids.push(cand);
            rejections = 0;
        } else {
            rejections += 1;
            if rejections == 1000 {
                half_width *= 1.5;
                rejections = 0;
            }
        }
    }
    centroids
}

/// Read `f0,...,f{d-1},label` rows. Labels are remapped to contiguous ids;
/// the original values stay in [`LabeledDataset::label_values`].
pub fn load_csv(path: &Path, split_seed: u64) -> Result<LabeledDataset> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "empty file".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.last() != Some(&"label") {
        return Err(parse_err(1, "missing `label` column (must be last)".into()));
    }
    let d = cols.len() - 1;
    if d == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    for (j, name) in cols[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(
                1,
                format!("expected column `f{j}`, found `{name}`"),
            ));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| parse_err(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != d + 1 {
            return Err(parse_err(
                line,
                format!("expected {} cells, found {}", d + 1, rec.len()),
            ));
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{cell}` is not a number")))?;
            data.push(v);
        }
        let label_cell = rec[d].trim();
        let label: i64 = label_cell
            .parse()
            .map_err(|_| parse_err(line, format!("label `{label_cell}` is not an integer")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let features = Tensor::matrix(labels.len(), d, data)?;
    LabeledDataset::new(features, &labels, split_seed, DEFAULT_TEST_FRACTION)
}

/// A seeded permutation of the split's indices cut into batches of
/// `batch_size`; the final partial batch is kept. `(seed, epoch)` fully
/// determines the order.
pub fn batches(
    data: &LabeledDataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch_size", "must be >= 1"));
    }
    let mut idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::arg("split", format!("{split:?} split is empty")));
    }
    let mut rng = Rng::stream(seed, Stream::Batch, epoch);
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rings(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            kind: DatasetKind::ConcentricRings,
            num_classes: 4,
            dim: 8,
            samples_per_class: 50,
            noise_std: 0.1,
            seed,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let a = generate(&rings(3)).unwrap();
        let b = generate(&rings(3)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_ne!(a.to_csv(), generate(&rings(4)).unwrap().to_csv());
    }

    #[test]
    fn invalid_spec_names_fields() {
        let mut s = rings(0);
        s.num_classes = 1;
        s.noise_std = 0.0;
        let msg = generate(&s).unwrap_err().to_string();
        assert!(
            msg.contains("num_classes") && msg.contains("noise_std"),
            "{msg}"
        );
        assert!("spiral"
            .parse::<DatasetKind>()
            .unwrap_err()
            .to_string()
            .contains("kind"));
    }

    #[test]
    fn blob_centroids_are_separated() {
        let spec = SyntheticSpec {
            kind: DatasetKind::GaussianBlobs,
            num_classes: 12,
            dim: 2,
            samples_per_class: 2,
            noise_std: 0.3,
            seed: 1,
        };
        let c = blob_centroids(&spec, &mut Rng::stream(1, Stream::Generate, 0));
        for i in 0..c.len() {
            for j in 0..i {
                assert!(euclidean(&c[i], &c[j]) >= 6.0 * spec.noise_std);
            }
        }
    }

    #[test]
    fn split_is_stratified_and_covers_classes() {
        let d = generate(&rings(9)).unwrap();
        assert_eq!(d.len(), 200);
        let global = DEFAULT_TEST_FRACTION;
        for c in 0..4 {
            let n_c = d.labels.iter().filter(|&&y| y == c).count();
            let test_c = (0..d.len())
                .filter(|&i| d.labels[i] == c && d.split[i] == Split::Test)
                .count();
            assert!((test_c as f64 - n_c as f64 * global).abs() <= 1.0);
            assert!(test_c > 0 && test_c < n_c);
        }
    }

    #[test]
    fn batches_partition_the_split() {
        let d = generate(&rings(2)).unwrap();
        let train = d.indices(Split::Train);
        let b = batches(&d, Split::Train, 7, 5, 0).unwrap();
        assert!(b[..b.len() - 1].iter().all(|x| x.len() == 7));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, train);

        let whole = batches(&d, Split::Train, 10_000, 5, 0).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), train.len());

        assert_eq!(b, batches(&d, Split::Train, 7, 5, 0).unwrap());
        assert_ne!(b, batches(&d, Split::Train, 7, 5, 1).unwrap());
        assert!(batches(&d, Split::Train, 0, 5, 0).is_err());
    }

    #[test]
    fn batch_size_does_not_touch_data() {
        let d = generate(&rings(2)).unwrap();
        let _ = batches(&d, Split::Train, 3, 2, 0).unwrap();
        assert_eq!(d, generate(&rings(2)).unwrap());
    }
}
