//! Dense row-major storage: [`Tensor`] for NCHW activations, kernels and
//! scalars, and [`Matrix`] for the small linear algebra in the metrics.

use crate::error::{shape_err, Result};

/// Dense row-major array of 64-bit reals.
///
/// Rank-4 tensors use batch/channel/height/width layout. Scalars are rank 0
/// with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Sum with innermost index fastest (plain left-to-right order).
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    /// Contiguous slice of batch element `i` along the first axis.
    pub fn outer_slice(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Concatenates along the first (batch) axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat_batch of zero tensors"))?;
        let inner = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != inner {
                return Err(shape_err!("concat_batch mismatch {:?} vs {:?}", p.shape, first.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(inner);
        Self::new(shape, data)
    }

    /// Rows `start..start+len` along the batch axis.
    pub fn batch_range(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.shape[0] {
            return Err(shape_err!("batch range {start}+{len} exceeds {}", self.shape[0]));
        }
        let stride = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(shape, self.data[start * stride..(start + len) * stride].to_vec())
    }
}

/// Elementwise `x if x >= 0 else slope * x`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Nearest-neighbour 2x upsampling of a rank-4 tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for i in 0..h2 {
            let row = &src[(i / 2) * w..(i / 2 + 1) * w];
            for (j, d) in dst[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                *d = row[j / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

/// 2x2 mean pooling (stride 2) of a rank-4 tensor with even spatial size.
pub fn avg_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2x2 needs even spatial size, got {h}x{w}"));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c2 = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                out[plane * h2 * w2 + i * w2 + j] = (a + b + c2 + d) * 0.25;
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err!("{rows}x{cols} matrix needs {} elements, got {}", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).fold(0.0, |acc, i| acc + self.get(i, i))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(shape_err!("matrix add {}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
    }
}

/// Row-by-column product; each entry accumulates left to right over the
/// shared index starting from zero.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err!("matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};

    #[test]
    fn length_invariant_enforced() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor::new(vec![3], vec![0.0, -1.0, 3.5]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[0.0, -0.2, 3.5]);
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![7.0]).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[7.0; 4]);
    }

    #[test]
    fn upsample_two_by_two() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        #[rustfmt::skip]
        let want = [1.0, 1.0, 2.0, 2.0,
                    1.0, 1.0, 2.0, 2.0,
                    3.0, 3.0, 4.0, 4.0,
                    3.0, 3.0, 4.0, 4.0];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn pool_inverts_upsample_exactly() {
        let x = randn(&[2, 3, 4, 5], &mut Rng::new(3)).unwrap();
        let back = avg_pool2x2(&upsample_nearest2x(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut rng = Rng::new(1);
        let m = Matrix::new(3, 4, (0..12).map(|_| rng.normal()).collect()).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_transpose_identity_exact() {
        let mut rng = Rng::new(9);
        let a = Matrix::new(3, 5, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let b = Matrix::new(5, 2, (0..10).map(|_| rng.normal()).collect()).unwrap();
        let lhs = matmul(&a, &b).unwrap().transpose();
        let rhs = matmul(&b.transpose(), &a.transpose()).unwrap();
        assert_eq!(lhs, rhs);
    }
}
