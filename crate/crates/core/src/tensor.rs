//! Dense row-major tensors of `f64` and the handful of kernels the
//! attention block is assembled from: outer products, leading-mode
//! contraction, matrix products, Hadamard products and vectorization.

use std::fmt;

use thiserror::Error;

/// Upper bound on element count accepted by [`Shape::new`].
pub const MAX_ELEMENTS: usize = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}

/// Ordered list of mode extents. The empty list is the shape of a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let mut count: usize = 1;
        for (mode, &d) in dims.iter().enumerate() {
            if d == 0 {
                return shape_err(format!("mode {mode} has extent 0"));
            }
            count = match count.checked_mul(d) {
                Some(c) if c <= MAX_ELEMENTS => c,
                _ => return shape_err(format!("{dims:?} exceeds {MAX_ELEMENTS} elements")),
            };
        }
        Ok(Self(dims))
    }

    pub fn scalar() -> Self {
        Self(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for m in (0..self.0.len().saturating_sub(1)).rev() {
            strides[m] = strides[m + 1] * self.0[m + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

/// Row-major tensor. Constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return shape_err(format!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Self { shape, data })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.fill(value);
        Self::new(t.shape.0, t.data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a matrix from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return shape_err("ragged rows");
        }
        Self::new(vec![n, d], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Fills a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let mut data = Vec::with_capacity(shape.numel());
        let mut idx = vec![0usize; shape.ndim()];
        for _ in 0..shape.numel() {
            data.push(f(&idx));
            for m in (0..idx.len()).rev() {
                idx[m] += 1;
                if idx[m] < shape.0[m] {
                    break;
                }
                idx[m] = 0;
            }
        }
        Self::new(shape.0, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn ndim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the storage. Callers are responsible for keeping
    /// entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_vector(&self) -> bool {
        self.ndim() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.ndim() == 2
    }

    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    pub fn cols(&self) -> usize {
        self.dims()[1]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.ndim(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(self.dims()) {
            assert!(i < d, "index {idx:?} out of bounds for {}", self.shape);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return shape_err(format!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn transpose(&self) -> Result<Self> {
        if !self.is_matrix() {
            return shape_err(format!("transpose needs a matrix, got {}", self.shape));
        }
        let (n, d) = (self.rows(), self.cols());
        Self::from_fn(vec![d, n], |ix| self.data[ix[1] * d + ix[0]])
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("add: {} vs {}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `factors[0] ∘ factors[1] ∘ ...` for two or more vectors.
pub fn outer_product(factors: &[&DenseTensor]) -> Result<DenseTensor> {
    if factors.len() < 2 {
        return shape_err("outer product needs at least two factors");
    }
    if let Some(f) = factors.iter().find(|f| !f.is_vector()) {
        return shape_err(format!("outer product factor must be a vector, got {}", f.shape));
    }
    let dims: Vec<usize> = factors.iter().map(|f| f.numel()).collect();
    DenseTensor::from_fn(dims, |idx| idx.iter().zip(factors).map(|(&i, f)| f.data[i]).product())
}

/// Contracts the leading `vectors.len()` modes of `t` against the given
/// vectors, leaving the remaining trailing modes free. Contracting every mode
/// yields a 0-mode (scalar) tensor.
pub fn contract_leading(t: &DenseTensor, vectors: &[&DenseTensor]) -> Result<DenseTensor> {
    if vectors.len() > t.ndim() {
        return shape_err(format!("{} vectors for a {}-mode tensor", vectors.len(), t.ndim()));
    }
    for (mode, v) in vectors.iter().enumerate() {
        if !v.is_vector() || v.numel() != t.dims()[mode] {
            return shape_err(format!("mode {mode}: vector {} does not match extent {}", v.shape, t.dims()[mode]));
        }
    }
    // Contract one leading mode at a time; each pass shrinks the tensor by
    // the extent of that mode.
    let mut data = t.data.clone();
    let mut remaining: Vec<usize> = t.dims().to_vec();
    for v in vectors {
        let lead = remaining[0];
        let tail: usize = remaining[1..].iter().product();
        let mut next = vec![0.0; tail];
        for (a, &w) in v.data.iter().enumerate().take(lead) {
            let block = &data[a * tail..(a + 1) * tail];
            for (acc, &x) in next.iter_mut().zip(block) {
                *acc += w * x;
            }
        }
        data = next;
        remaining.remove(0);
    }
    DenseTensor::new(remaining, data)
}

pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return shape_err(format!("matmul needs matrices, got {} and {}", a.shape, b.shape));
    }
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return shape_err(format!("matmul inner extents {k} and {k2} differ"));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    DenseTensor::new(vec![n, m], out)
}

/// Elementwise product of one or more equal-length vectors.
pub fn hadamard(vectors: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = match vectors.first() {
        Some(v) => v,
        None => return shape_err("hadamard needs at least one vector"),
    };
    if vectors.iter().any(|v| !v.is_vector() || v.numel() != first.numel()) {
        return shape_err("hadamard operands must be vectors of equal length");
    }
    let mut data = first.data.clone();
    for v in &vectors[1..] {
        for (d, &x) in data.iter_mut().zip(&v.data) {
            *d *= x;
        }
    }
    DenseTensor::vector(data)
}

/// Row-major flattening of a matrix into a vector.
pub fn vectorize(m: &DenseTensor) -> Result<DenseTensor> {
    if !m.is_matrix() {
        return shape_err(format!("vectorize needs a matrix, got {}", m.shape));
    }
    DenseTensor::vector(m.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> DenseTensor {
        DenseTensor::vector(d.to_vec()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_extent_and_huge_counts() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![1 << 20, 1 << 20, 2]).is_err());
        assert!(Shape::new(vec![1 << 20, 1 << 20]).is_ok());
        assert_eq!(Shape::scalar().numel(), 1);
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(matches!(DenseTensor::vector(vec![1.0, f64::NAN]), Err(TensorError::NonFinite { index: 1, .. })));
        assert!(DenseTensor::vector(vec![f64::INFINITY]).is_err());
        assert!(DenseTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn outer_product_examples() {
        let t = outer_product(&[&v(&[1.0, 2.0]), &v(&[3.0, 4.0])]).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        assert_eq!(t.data(), &[3.0, 4.0, 6.0, 8.0]);

        let t = outer_product(&[&v(&[1.0]), &v(&[5.0])]).unwrap();
        assert_eq!(t.data(), &[5.0]);

        let t = outer_product(&[&v(&[1.0, 0.0]), &v(&[0.0, 1.0]), &v(&[1.0, 1.0])]).unwrap();
        let nonzero: Vec<Vec<usize>> =
            (0..8).filter(|&f| t.data()[f] != 0.0).map(|f| vec![f / 4, (f / 2) % 2, f % 2]).collect();
        assert_eq!(nonzero, vec![vec![0, 1, 0], vec![0, 1, 1]]);
        assert_eq!(t.get(&[0, 1, 0]), 1.0);
    }

    #[test]
    fn outer_product_rejects_matrices() {
        let m = DenseTensor::identity(2).unwrap();
        assert!(outer_product(&[&m, &v(&[1.0])]).is_err());
        assert!(outer_product(&[&v(&[1.0])]).is_err());
    }

    #[test]
    fn contract_leading_examples() {
        let eye = DenseTensor::identity(2).unwrap();
        let s = contract_leading(&eye, &[&v(&[1.0, 0.0]), &v(&[0.0, 1.0])]).unwrap();
        assert_eq!(s.ndim(), 0);
        assert_eq!(s.data(), &[0.0]);

        let ones = DenseTensor::full(vec![2, 2, 3], 1.0).unwrap();
        let r = contract_leading(&ones, &[&v(&[1.0, 1.0]), &v(&[1.0, 1.0])]).unwrap();
        assert_eq!(r.dims(), &[3]);
        assert_eq!(r.data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn contract_leading_with_basis_vectors_picks_a_fiber() {
        let t = DenseTensor::from_fn(vec![3, 3, 3, 2], |ix| {
            (ix[0] * 31 + ix[1] * 7 + ix[2] * 3 + ix[3]) as f64 * 0.37 - 4.0
        })
        .unwrap();
        let e = |k: usize| {
            let mut d = vec![0.0; 3];
            d[k] = 1.0;
            v(&d)
        };
        let r = contract_leading(&t, &[&e(0), &e(1), &e(2)]).unwrap();
        assert_eq!(r.data(), &[t.get(&[0, 1, 2, 0]), t.get(&[0, 1, 2, 1])]);
    }

    #[test]
    fn contract_leading_length_mismatch() {
        let t = DenseTensor::zeros(vec![2, 3]).unwrap();
        assert!(contract_leading(&t, &[&v(&[1.0, 2.0, 3.0])]).is_err());
        assert!(contract_leading(&t, &[&v(&[1.0, 2.0]), &v(&[1.0; 3]), &v(&[1.0])]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = DenseTensor::identity(2).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap(), a);

        let row = DenseTensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = DenseTensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
        assert!(matmul(&a, &row).is_err());
    }

    #[test]
    fn hadamard_examples() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[3.0, 4.0]);
        assert_eq!(hadamard(&[&a, &b]).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(hadamard(&[&a, &v(&[1.0, 1.0])]).unwrap(), a);
        assert_eq!(hadamard(&[&a, &b, &v(&[5.0, 6.0])]).unwrap().data(), &[15.0, 48.0]);
        assert!(hadamard(&[&a, &v(&[1.0])]).is_err());
    }

    #[test]
    fn vectorize_examples() {
        let m = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(vectorize(&m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = DenseTensor::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap();
        assert_eq!(vectorize(&r).unwrap(), v(&[7.0, 8.0, 9.0]));
        let o = outer_product(&[&v(&[1.0, 2.0]), &v(&[3.0, 4.0])]).unwrap();
        assert_eq!(vectorize(&o).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
        assert!(vectorize(&v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        let s = Shape::new(vec![2, 3, 4]).unwrap();
        assert_eq!(s.strides(), vec![12, 4, 1]);
        assert_eq!(s.to_string(), "[2x3x4]");
    }
}
