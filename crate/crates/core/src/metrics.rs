//! Random-feature Fréchet distance and offset statistics.

use crate::autodiff::Tape;
use crate::deform::OffsetField;
use crate::error::{shape_err, Error, Result};
use crate::rng::{randn, Rng};
use crate::tensor::{matmul, Matrix, Tensor};

pub const EXTRACTOR_SEED: u64 = 12345;
pub const FEATURE_DIM: usize = 16;
pub const MIN_SET_SIZE: usize = 32;
const STABILIZER: f64 = 1e-10;

/// Two fixed conv layers (1 -> 8 -> 16, 3x3) with leaky ReLU and 2x2
/// mean-pool each, then a global mean over space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    resolution: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl FeatureExtractor {
    /// Weights `N(0,1)/sqrt(fan_in)` and biases `0.1 N(0,1)`, drawn in the
    /// order w1, b1, w2, b2 from one stream.
    pub fn new(seed: u64, resolution: usize) -> Result<Self> {
        if resolution < 4 || !resolution.is_multiple_of(4) {
            return Err(shape_err!("extractor resolution must be a multiple of 4, got {resolution}"));
        }
        let mut rng = Rng::new(seed);
        let w1 = randn(&[8, 1, 3, 3], &mut rng)?.map(|v| v / 3.0);
        let b1 = randn(&[8], &mut rng)?.map(|v| 0.1 * v);
        let w2 = randn(&[16, 8, 3, 3], &mut rng)?.map(|v| v / 72f64.sqrt());
        let b2 = randn(&[16], &mut rng)?.map(|v| 0.1 * v);
        Ok(Self {
            resolution,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn standard(resolution: usize) -> Result<Self> {
        Self::new(EXTRACTOR_SEED, resolution)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Sum of the first-layer weights.
    pub fn checksum(&self) -> f64 {
        self.w1.sum()
    }

    /// `(n, 16)` feature rows.
    pub fn extract(&self, images: &Tensor) -> Result<Matrix> {
        let (n, c, h, w) = images.dims4()?;
        if c != 1 || h != self.resolution || w != self.resolution {
            return Err(shape_err!(
                "extractor expects 1x{r}x{r} images, got {c}x{h}x{w}",
                r = self.resolution
            ));
        }
        let mut tape = Tape::no_grad();
        let x = tape.constant(images.clone());
        let mut y = x;
        for (wt, bt) in [(&self.w1, &self.b1), (&self.w2, &self.b2)] {
            let wv = tape.constant(wt.clone());
            let bv = tape.constant(bt.clone());
            y = tape.conv2d(y, wv)?;
            y = tape.add_channel_bias(y, bv)?;
            y = tape.leaky_relu(y, 0.2)?;
            y = tape.avg_pool2x2(y)?;
        }
        let f = tape.value(y)?;
        let p = (h / 4) * (w / 4);
        let data: Vec<f64> = f
            .data()
            .chunks_exact(p)
            .map(|plane| plane.iter().fold(0.0, |acc, v| acc + v) / p as f64)
            .collect();
        Matrix::new(n, FEATURE_DIM, data)
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

impl GaussianStats {
    pub fn fit(features: &Matrix) -> Result<Self> {
        let (n, d) = (features.rows(), features.cols());
        if n < 2 {
            return Err(Error::Contract(format!("need at least 2 samples for a covariance, got {n}")));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += features.get(r, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += (features.get(r, i) - mean[i]) * (features.get(r, j) - mean[j]);
                }
                let v = acc / (n - 1) as f64;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        Ok(Self { mean, cov })
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the eigenvectors as matrix columns.
pub fn jacobi_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(shape_err!("eigendecomposition needs a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let frob = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off = off_diagonal_norm(&m);
        if off <= 1e-12 * frob.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if off_diagonal_norm(&m) > 1e-9 * frob.max(1.0) {
        return Err(Error::Numeric("Jacobi iteration did not converge".into()));
    }
    Ok(((0..n).map(|i| m.get(i, i)).collect(), v))
}

fn off_diagonal_norm(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += m.get(i, j) * m.get(i, j);
            }
        }
    }
    acc.sqrt()
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from roundoff are clamped to zero.
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = jacobi_eigen(a)?;
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, &l) in vals.iter().enumerate() {
                acc += vecs.get(i, k) * l.max(0.0).sqrt() * vecs.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

fn check_symmetric(m: &Matrix, what: &str) -> Result<()> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Contract(format!("{what} covariance is not square")));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 {
                return Err(Error::Contract(format!("{what} covariance is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of
/// the root taken from the eigenvalues of `S_a^{1/2} S_b S_a^{1/2}`. Both
/// covariances get `1e-10 I` added first.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    check_symmetric(&a.cov, "first")?;
    check_symmetric(&b.cov, "second")?;
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.rows() != d || b.cov.rows() != d {
        return Err(shape_err!("Gaussian stats of different dimension"));
    }
    let eps = Matrix::identity(d).scale(STABILIZER);
    let sa = a.cov.add(&eps)?;
    let sb = b.cov.add(&eps)?;
    let root_a = sqrt_psd(&sa)?;
    let inner = matmul(&matmul(&root_a, &sb)?, &root_a)?;
    // Symmetrize away roundoff before the eigen-solve.
    let inner = inner.add(&inner.transpose())?.scale(0.5);
    let (vals, _) = jacobi_eigen(&inner)?;
    let tr_root: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let dist = mean_term + sa.trace() + sb.trace() - 2.0 * tr_root;
    if !dist.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance is {dist}")));
    }
    Ok(dist.max(0.0))
}

/// Fréchet distance between feature Gaussians of two image sets.
pub fn rffd(extractor: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    for (set, t) in [("first", a), ("second", b)] {
        let n = t.dims4()?.0;
        if n < MIN_SET_SIZE {
            return Err(Error::Contract(format!("{set} set has {n} images, need at least {MIN_SET_SIZE}")));
        }
    }
    let fa = GaussianStats::fit(&extractor.extract(a)?)?;
    let fb = GaussianStats::fit(&extractor.extract(b)?)?;
    frechet_distance(&fa, &fb)
}

/// Mean L2 distance over all unordered pairs of images.
pub fn mean_pairwise_l2(images: &Tensor) -> Result<f64> {
    let n = images.dims4()?.0;
    if n < 2 {
        return Err(Error::Contract("pairwise distance needs at least 2 images".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = images
                .outer_slice(i)
                .iter()
                .zip(images.outer_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += d.sqrt();
        }
    }
    Ok(acc / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Mean of `|dy|` and `|dx|` per tap.
    pub per_tap_mean_abs: Vec<f64>,
    /// Number of scalar offsets aggregated.
    pub count: usize,
}

/// Aggregates absolute offsets (pixel units) across fields of one kernel
/// size.
pub fn offset_stats(fields: &[OffsetField]) -> Result<OffsetStats> {
    let first = fields.first().ok_or_else(|| Error::Contract("offset statistics of an empty list".into()))?;
    let k2 = first.k() * first.k();
    let mut tap_sum = vec![0.0; k2];
    let mut tap_count = vec![0usize; k2];
    let mut max_abs = 0.0f64;
    for f in fields {
        if f.k() != first.k() {
            return Err(shape_err!("offset fields with different kernel sizes"));
        }
        let (_, c, h, w) = f.tensor().dims4()?;
        for (ch, plane) in f.tensor().data().chunks_exact(h * w).enumerate() {
            let tap = (ch % c) / 2;
            for v in plane {
                tap_sum[tap] += v.abs();
                max_abs = max_abs.max(v.abs());
            }
            tap_count[tap] += plane.len();
        }
    }
    let count: usize = tap_count.iter().sum();
    let total: f64 = tap_sum.iter().sum();
    Ok(OffsetStats {
        mean_abs: total / count as f64,
        max_abs,
        per_tap_mean_abs: tap_sum.iter().zip(&tap_count).map(|(s, &n)| s / n as f64).collect(),
        count,
    })
}
