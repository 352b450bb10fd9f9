//! Regular and style-modulated convolution.
//!
//! The plain functions here evaluate the same taped graph the generator
//! builds (on a [`Tape::no_grad`]), so the library entry points and the
//! training path cannot drift apart numerically.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Default demodulation epsilon.
pub const DEMOD_EPS: f64 = 1e-8;

/// Square, stride-1, zero-padded convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    k: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { k: 3 }
    }
}

impl ConvSpec {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(shape_err!("kernel size must be odd, got {k}"));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn tap_count(&self) -> usize {
        self.k * self.k
    }

    /// Tap displacements `(dy, dx)`, row-major over the kernel window.
    pub fn taps(&self) -> Vec<(i64, i64)> {
        let r = self.padding() as i64;
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
    }
}

/// `(c_out, c_in, k, k)` kernel with an optional per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl KernelWeights {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (co, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("kernel must be square with odd size, got {kh}x{kw}"));
        }
        if let Some(b) = &bias {
            if b.shape() != [co] {
                return Err(shape_err!("bias {:?} for {co} output channels", b.shape()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    fn check_spec(&self, spec: &ConvSpec) -> Result<()> {
        if self.k() != spec.k() {
            return Err(shape_err!("kernel size {} does not match spec {}", self.k(), spec.k()));
        }
        Ok(())
    }
}

/// Per-input-channel style scales of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn ones(c: usize) -> Self {
        Self(vec![1.0; c])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Stacks one style per sample into an `(n, c)` tensor.
pub fn styles_tensor(styles: &[StyleVector], c: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(styles.len() * c);
    for s in styles {
        if s.len() != c {
            return Err(shape_err!("style of length {} for {c} input channels", s.len()));
        }
        data.extend_from_slice(&s.0);
    }
    Tensor::new(vec![styles.len(), c], data)
}

/// Per-sample kernels `(n, c_out, c_in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedWeights {
    pub weight: Tensor,
}

impl ModulatedWeights {
    pub fn batch(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Squared norm of each `(sample, output channel)` kernel.
    pub fn channel_sq_norms(&self) -> Vec<f64> {
        let s = self.weight.shape();
        let per = s[2] * s[3] * s[4];
        self.weight
            .data()
            .chunks_exact(per)
            .map(|c| c.iter().fold(0.0, |acc, v| acc + v * v))
            .collect()
    }
}

/// Zero-padded convolution `y(p) = sum_i w_i x(p + p_i)` plus bias.
pub fn conv2d(x: &Tensor, w: &KernelWeights, spec: &ConvSpec) -> Result<Tensor> {
    w.check_spec(spec)?;
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.weight.clone());
    let y = tape.conv2d(xv, wv)?;
    let y = match &w.bias {
        Some(b) => {
            let bv = tape.constant(b.clone());
            tape.add_channel_bias(y, bv)?
        }
        None => y,
    };
    Ok(tape.value(y)?.clone())
}

/// `w'[o,i] = s[i] w[o,i]`, then each output channel divided by
/// `sqrt(sum w'^2 + eps)`.
pub fn modulate_demodulate(w: &KernelWeights, s: &StyleVector, eps: f64) -> Result<ModulatedWeights> {
    modulate_batch(w, std::slice::from_ref(s), eps, true)
}

/// Modulates `w` once per style; demodulation is optional.
pub fn modulate_batch(w: &KernelWeights, styles: &[StyleVector], eps: f64, demodulate: bool) -> Result<ModulatedWeights> {
    let st = styles_tensor(styles, w.c_in())?;
    let mut tape = Tape::no_grad();
    let wv = tape.constant(w.weight.clone());
    let sv = tape.constant(st);
    let m = tape.modulate(wv, sv, eps, demodulate)?;
    Ok(ModulatedWeights {
        weight: tape.value(m)?.clone(),
    })
}

/// Convolution of each sample with its own demodulated kernel, bias added
/// after.
pub fn modulated_conv2d(x: &Tensor, w: &KernelWeights, styles: &[StyleVector], spec: &ConvSpec) -> Result<Tensor> {
    w.check_spec(spec)?;
    let n = x.dims4()?.0;
    if styles.len() != n {
        return Err(shape_err!("{} styles for a batch of {n}", styles.len()));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.weight.clone());
    let sv = tape.constant(styles_tensor(styles, w.c_in())?);
    let bv = w.bias.clone().map(|b| tape.constant(b));
    let y = modulated_conv(&mut tape, xv, wv, sv, bv, DEMOD_EPS)?;
    Ok(tape.value(y)?.clone())
}

/// Taped modulated convolution: `(n,ci,h,w)` input, `(co,ci,k,k)` kernel,
/// `(n,ci)` styles, optional `(co)` bias.
pub fn modulated_conv(tape: &mut Tape, x: Var, weight: Var, styles: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
    let m = tape.modulate(weight, styles, eps, true)?;
    let y = tape.sampled_conv2d(x, m, None)?;
    match bias {
        Some(b) => tape.add_channel_bias(y, b),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, Rng};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        randn(shape, &mut Rng::new(seed)).unwrap()
    }

    fn kernel(co: usize, ci: usize, k: usize, seed: u64) -> KernelWeights {
        KernelWeights::new(rand(&[co, ci, k, k], seed), None).unwrap()
    }

    /// Per-pixel loop oracle with the documented summation order.
    fn brute_conv(x: &Tensor, w: &Tensor) -> Tensor {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let r = (k / 2) as i64;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..h as i64 {
                    for xx in 0..wd as i64 {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..k as i64 {
                                for kx in 0..k as i64 {
                                    let (sy, sx) = (y + ky - r, xx + kx - r);
                                    let v = if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                        0.0
                                    } else {
                                        x.data()[((b * ci + i) * h + sy as usize) * wd + sx as usize]
                                    };
                                    acc += w.data()[((o * ci + i) * k + ky as usize) * k + kx as usize] * v;
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * h + y as usize) * wd + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn spec_taps_for_three() {
        let s = ConvSpec::default();
        assert_eq!(s.tap_count(), 9);
        assert_eq!(s.taps()[0], (-1, -1));
        assert_eq!(s.taps()[4], (0, 0));
        assert_eq!(s.taps()[8], (1, 1));
        assert!(ConvSpec::new(4).is_err());
    }

    #[test]
    fn all_ones_counts_neighbours() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = KernelWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0), None).unwrap();
        let y = conv2d(&x, &w, &ConvSpec::default()).unwrap();
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn identity_kernel() {
        let x = rand(&[2, 1, 5, 4], 1);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &KernelWeights::new(w, None).unwrap(), &ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = rand(&[1, 2, 4, 4], 1);
        assert!(conv2d(&x, &kernel(1, 3, 3, 2), &ConvSpec::default()).is_err());
    }

    #[test]
    fn matches_brute_force_exactly() {
        let x = rand(&[2, 3, 8, 8], 3);
        let w = kernel(4, 3, 3, 4);
        let y = conv2d(&x, &w, &ConvSpec::default()).unwrap();
        assert_eq!(y, brute_conv(&x, &w.weight));
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = KernelWeights::new(Tensor::zeros(&[2, 1, 1, 1]), Some(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap())).unwrap();
        let y = conv2d(&x, &w, &ConvSpec::new(1).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    fn unit_norm_kernel(co: usize, ci: usize, seed: u64) -> KernelWeights {
        let mut w = rand(&[co, ci, 3, 3], seed);
        let per = ci * 9;
        for ch in w.data_mut().chunks_exact_mut(per) {
            let n = ch.iter().map(|v| v * v).sum::<f64>().sqrt();
            ch.iter_mut().for_each(|v| *v /= n);
        }
        KernelWeights::new(w, None).unwrap()
    }

    #[test]
    fn demod_is_noop_on_unit_norms() {
        let w = unit_norm_kernel(3, 2, 5);
        let m = modulate_demodulate(&w, &StyleVector::ones(2), DEMOD_EPS).unwrap();
        let diff = m.weight.reshape(&[3, 2, 3, 3]).unwrap().max_abs_diff(&w.weight).unwrap();
        assert!(diff < 1e-6);
        for n in m.channel_sq_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_kernel_stays_finite() {
        let w = KernelWeights::new(Tensor::zeros(&[2, 2, 3, 3]), None).unwrap();
        let m = modulate_demodulate(&w, &StyleVector(vec![0.3, -2.0]), DEMOD_EPS).unwrap();
        assert!(m.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduces_to_plain_conv_with_unit_styles() {
        let w = unit_norm_kernel(3, 2, 6);
        let x = rand(&[1, 2, 5, 5], 7);
        let a = modulated_conv2d(&x, &w, &[StyleVector::ones(2)], &ConvSpec::default()).unwrap();
        let b = conv2d(&x, &w, &ConvSpec::default()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn styles_make_samples_differ() {
        let w = kernel(2, 2, 3, 8);
        let one = rand(&[1, 2, 4, 4], 9);
        let x = Tensor::concat_batch(&[one.clone(), one]).unwrap();
        let styles = [StyleVector(vec![1.0, 0.2]), StyleVector(vec![0.3, 1.0])];
        let y = modulated_conv2d(&x, &w, &styles, &ConvSpec::default()).unwrap();
        let d: f64 = y.outer_slice(0).iter().zip(y.outer_slice(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d > 1e-3);
        assert!(modulated_conv2d(&x, &w, &styles[..1], &ConvSpec::default()).is_err());
    }

    #[test]
    fn style_gradient_passes_gradcheck() {
        use crate::autodiff::finite_diff_check;
        let w = rand(&[2, 3, 3, 3], 10);
        let x = rand(&[2, 3, 4, 4], 11);
        let s = rand(&[2, 3], 12);
        let b = rand(&[2], 13);
        let eval = |tape: &mut Tape, sv: Var| -> Result<Var> {
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = modulated_conv(tape, xv, wv, sv, Some(bv), DEMOD_EPS)?;
            let y = tape.tanh(y)?;
            tape.sum(y)
        };
        let mut tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let loss = eval(&mut tape, sv).unwrap();
        let g = tape.backward(loss, &[sv], false).unwrap().get(sv).unwrap();
        let analytic = tape.value(g).unwrap().clone();
        let mut f = |p: &Tensor| {
            let mut t = Tape::no_grad();
            let sv = t.constant(p.clone());
            let l = eval(&mut t, sv)?;
            t.value(l)?.item()
        };
        assert!(finite_diff_check(&mut f, &s, &analytic, 1e-5).unwrap() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn demod_invariant_to_style_scale(seed in 0u64..1000, c in 1.0f64..20.0) {
            // Styles around 1, as the affine layers produce at init.
            let w = kernel(3, 8, 3, seed);
            let x = rand(&[2, 8, 5, 5], seed + 1);
            let s: Vec<StyleVector> = (0..2)
                .map(|i| StyleVector(rand(&[8], seed * 7 + i).data().iter().map(|v| 1.0 + 0.5 * v).collect()))
                .collect();
            let scaled: Vec<StyleVector> = s.iter().map(|v| StyleVector(v.0.iter().map(|a| a * c).collect())).collect();
            let a = modulated_conv2d(&x, &w, &s, &ConvSpec::default()).unwrap();
            let b = modulated_conv2d(&x, &w, &scaled, &ConvSpec::default()).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        }

        #[test]
        fn demodulated_kernels_invariant_without_eps(seed in 0u64..1000, c in 1e-3f64..1e3) {
            let w = kernel(3, 2, 3, seed);
            let s = StyleVector(rand(&[2], seed + 5).data().to_vec());
            let scaled = StyleVector(s.0.iter().map(|a| a * c).collect());
            let a = modulate_batch(&w, &[s], 0.0, true).unwrap();
            let b = modulate_batch(&w, &[scaled], 0.0, true).unwrap();
            prop_assert!(a.weight.max_abs_diff(&b.weight).unwrap() < 1e-12);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let spec = ConvSpec::default();
            let x1 = rand(&[1, 2, 5, 6], seed);
            let x2 = rand(&[1, 2, 5, 6], seed + 1);
            let w1 = kernel(2, 2, 3, seed + 2);
            let w2 = kernel(2, 2, 3, seed + 3);
            let mix_x = x1.zip_map(&x2, |a, b| alpha * a + beta * b).unwrap();
            let lhs = conv2d(&mix_x, &w1, &spec).unwrap();
            let rhs = conv2d(&x1, &w1, &spec).unwrap().zip_map(&conv2d(&x2, &w1, &spec).unwrap(), |a, b| alpha * a + beta * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
            let mix_w = KernelWeights::new(w1.weight.zip_map(&w2.weight, |a, b| alpha * a + beta * b).unwrap(), None).unwrap();
            let lhs = conv2d(&x1, &mix_w, &spec).unwrap();
            let rhs = conv2d(&x1, &w1, &spec).unwrap().zip_map(&conv2d(&x1, &w2, &spec).unwrap(), |a, b| alpha * a + beta * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
        }

        #[test]
        fn conv_scales_with_input(seed in 0u64..1000, alpha in -4.0f64..4.0) {
            let x = rand(&[1, 2, 4, 4], seed);
            let w = kernel(2, 2, 3, seed + 9);
            let a = conv2d(&x.map(|v| alpha * v), &w, &ConvSpec::default()).unwrap();
            let b = conv2d(&x, &w, &ConvSpec::default()).unwrap().map(|v| alpha * v);
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }
}
