//! Dense row-major `f64` tensors.
//!
//! Only what the autodiff graph and the metrics need: elementwise ops with
//! numpy-style broadcasting, 2-D matmul, and a handful of row-wise reductions
//! over the last axis.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(d) = shape.iter().position(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "dimension {d} of shape {shape:?} is zero"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Width of the last axis (1 for a scalar).
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn num_rows(&self) -> usize {
        self.data.len() / self.row_len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.row_len())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    lhs: self.shape.clone(),
                    rhs: vec![],
                })
            }
        };
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// Matrix product. A rank-1 left operand is a row vector and a rank-1
    /// right operand a column vector; those axes are dropped from the result.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        let (m, k, lhs_vec) = match self.shape.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(mismatch()),
        };
        let (k2, n, rhs_vec) = match rhs.shape.as_slice() {
            [k2] => (*k2, 1, true),
            [k2, n] => (*k2, *n, false),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let shape = match (lhs_vec, rhs_vec) {
            (false, false) => vec![m, n],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (true, true) => vec![],
        };
        Ok(Tensor { shape, data: out })
    }

    pub fn zip_broadcast(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == rhs.shape {
            let data = self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape =
            broadcast_shape(&self.shape, &rhs.shape).ok_or_else(|| Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            })?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&rhs.shape, &shape);
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(self.data[ia], rhs.data[ib]));
            // odometer increment
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                ia -= sa[ax] * shape[ax];
                ib -= sb[ax] * shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(rhs, "div", |a, b| a / b)
    }

    /// Sum `self` down to `shape`, undoing a broadcast.
    pub fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut out = Tensor::zeros(shape);
        let mut idx = vec![0usize; self.shape.len()];
        let mut io = 0usize;
        for &v in &self.data {
            out.data[io] += v;
            for ax in (0..self.shape.len()).rev() {
                idx[ax] += 1;
                io += strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                io -= strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        out
    }

    /// Row-wise map over the last axis producing a row of the same width.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
        let w = self.row_len();
        let mut data = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks(w).zip(data.chunks_mut(w)) {
            f(src, dst);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Row-wise reduction over the last axis; keeps a trailing axis of 1.
    pub fn reduce_rows(&self, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let data: Vec<f64> = self.rows().map(f).collect();
        let mut shape = self.shape.clone();
        match shape.last_mut() {
            Some(last) => *last = 1,
            None => shape.push(1),
        }
        Tensor { shape, data }
    }

    pub fn softmax_rows(&self) -> Tensor {
        self.map_rows(softmax_into)
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        self.map_rows(log_softmax_into)
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

pub(crate) fn log_softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid out in the index space of `out` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn vector_times_identity() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = x.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::vector(vec![10., 20., 30.]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let col = Tensor::matrix(2, 1, vec![1., 2.]).unwrap();
        let d = a.mul(&col).unwrap();
        assert_eq!(d.data(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(a.reduce_to(&[3]).data(), &[5., 7., 9.]);
        assert_eq!(a.reduce_to(&[2, 1]).data(), &[6., 15.]);
        assert_eq!(a.reduce_to(&[]).data(), &[21.]);
        assert!(a.add(&Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::matrix(2, 3, vec![1000., 0., -1000., 0.1, 0.2, 0.3]).unwrap();
        for row in t.softmax_rows().rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = t.log_softmax_rows();
        assert!(ls.all_finite());
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.6, 0.3]), 1);
    }
}
