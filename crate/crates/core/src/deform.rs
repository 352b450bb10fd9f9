//! Bilinear sampling, deformable convolution, latent-modulated offset
//! prediction and the composite MTM layer.

use crate::autodiff::{Tape, Var};
use crate::conv::{modulated_conv, styles_tensor, ConvSpec, KernelWeights, ModulatedWeights, StyleVector, DEMOD_EPS};
use crate::error::{shape_err, Result};
use crate::kernels::Neighbourhood;
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

/// Per-location, per-tap displacements `(n, 2k^2, h, w)`; tap `t` (row-major
/// over the kernel window) owns channels `2t` (dy) and `2t+1` (dx).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    field: Tensor,
    k: usize,
}

impl OffsetField {
    pub fn new(field: Tensor, k: usize) -> Result<Self> {
        let (_, c, _, _) = field.dims4()?;
        if c != 2 * k * k {
            return Err(shape_err!("offset field needs {} channels for k={k}, got {c}", 2 * k * k));
        }
        Ok(Self { field, k })
    }

    pub fn zeros(n: usize, k: usize, h: usize, w: usize) -> Self {
        Self {
            field: Tensor::zeros(&[n, 2 * k * k, h, w]),
            k,
        }
    }

    /// Same displacement for every tap and location.
    pub fn constant(n: usize, k: usize, h: usize, w: usize, dy: f64, dx: f64) -> Self {
        let mut f = Self::zeros(n, k, h, w);
        let p = h * w;
        for (ch, chunk) in f.field.data_mut().chunks_exact_mut(p).enumerate() {
            chunk.fill(if ch % 2 == 0 { dy } else { dx });
        }
        f
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor {
        self.field
    }

    /// `(dy, dx)` of tap `t` at output location `(y, x)` of sample `b`.
    pub fn at(&self, b: usize, t: usize, y: usize, x: usize) -> (f64, f64) {
        let s = self.field.shape();
        let (h, w) = (s[2], s[3]);
        let base = b * s[1] * h * w + y * w + x;
        let d = self.field.data();
        (d[base + 2 * t * h * w], d[base + (2 * t + 1) * h * w])
    }
}

/// Bilinear interpolation of channel `c` of sample `b` at `(qy, qx)`; the
/// four neighbours are weighted by `(1-|qy-iy|)(1-|qx-ix|)` and locations
/// outside the image read as zero.
pub fn bilinear_sample(x: &Tensor, b: usize, c: usize, qy: f64, qx: f64) -> Result<f64> {
    let (n, ch, h, w) = x.dims4()?;
    if b >= n || c >= ch {
        return Err(shape_err!("sample ({b}, {c}) outside a {n}x{ch} batch"));
    }
    let plane = &x.data()[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
    Ok(Neighbourhood::at(qy, qx, h, w).sample(plane))
}

/// Kernel argument of [`deform_conv2d`]: shared across the batch or one per
/// sample.
#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    Shared(&'a KernelWeights),
    PerSample(&'a ModulatedWeights),
}

impl<'a> From<&'a KernelWeights> for Kernel<'a> {
    fn from(w: &'a KernelWeights) -> Self {
        Kernel::Shared(w)
    }
}

impl<'a> From<&'a ModulatedWeights> for Kernel<'a> {
    fn from(w: &'a ModulatedWeights) -> Self {
        Kernel::PerSample(w)
    }
}

/// `y(p) = sum_i w_i x(p + p_i + dp_i(p))` with bilinear sampling. A shared
/// kernel's bias, if any, is added.
pub fn deform_conv2d<'a>(x: &Tensor, w: impl Into<Kernel<'a>>, offsets: &OffsetField, spec: &ConvSpec) -> Result<Tensor> {
    if offsets.k() != spec.k() {
        return Err(shape_err!("offset field for k={} used with k={}", offsets.k(), spec.k()));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let ov = tape.constant(offsets.tensor().clone());
    let (wt, bias) = match w.into() {
        Kernel::Shared(k) => (&k.weight, k.bias.as_ref()),
        Kernel::PerSample(m) => (&m.weight, None),
    };
    if wt.shape()[wt.rank() - 1] != spec.k() {
        return Err(shape_err!("kernel size does not match spec k={}", spec.k()));
    }
    let wv = tape.constant(wt.clone());
    let mut y = tape.sampled_conv2d(xv, wv, Some(ov))?;
    if let Some(b) = bias {
        let bv = tape.constant(b.clone());
        y = tape.add_channel_bias(y, bv)?;
    }
    Ok(tape.value(y)?.clone())
}

/// Offsets from a modulated (demodulated) convolution of `x` with `head`;
/// no activation on the output.
pub fn predict_offsets(x: &Tensor, offset_styles: &[StyleVector], head: &KernelWeights) -> Result<OffsetField> {
    let k = head.k();
    if head.c_out() != 2 * k * k {
        return Err(shape_err!("offset head must have {} outputs, got {}", 2 * k * k, head.c_out()));
    }
    let n = x.dims4()?.0;
    if offset_styles.len() != n {
        return Err(shape_err!("{} offset styles for a batch of {n}", offset_styles.len()));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let hv = tape.constant(head.weight.clone());
    let sv = tape.constant(styles_tensor(offset_styles, head.c_in())?);
    let bv = head.bias.clone().map(|b| tape.constant(b));
    let off = modulated_conv(&mut tape, xv, hv, sv, bv, DEMOD_EPS)?;
    OffsetField::new(tape.value(off)?.clone(), k)
}

/// Learned map from a latent vector to one style per input channel:
/// `s = latent . weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleAffine {
    /// `(latent_dim, channels)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl StyleAffine {
    pub fn latent_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply(&self, latent: &[f64]) -> Result<StyleVector> {
        let (d, c) = self.weight.dims2()?;
        if latent.len() != d {
            return Err(shape_err!("latent of length {} for an affine expecting {d}", latent.len()));
        }
        let mut s = self.bias.data().to_vec();
        for (i, &z) in latent.iter().enumerate() {
            for (o, &wv) in s.iter_mut().zip(&self.weight.data()[i * c..(i + 1) * c]) {
                *o += z * wv;
            }
        }
        Ok(StyleVector(s))
    }
}

/// Deformable convolution whose offsets come from a latent-modulated head.
#[derive(Debug, Clone, PartialEq)]
pub struct MtmLayer {
    pub main: KernelWeights,
    pub main_affine: StyleAffine,
    /// `c_in -> 2k^2` offset head.
    pub head: KernelWeights,
    pub offset_affine: StyleAffine,
    pub offsets_enabled: bool,
}

impl MtmLayer {
    /// Random main kernel and affines, zero offset head (so offsets start at
    /// exactly zero), unit affine bias.
    pub fn fresh(c_in: usize, c_out: usize, k: usize, style_dim: usize, offset_style_dim: usize, rng: &mut Rng) -> Result<Self> {
        ConvSpec::new(k)?;
        let fan_in = (c_in * k * k) as f64;
        let main_w = randn(&[c_out, c_in, k, k], rng)?.map(|v| v / fan_in.sqrt());
        let affine = |dim: usize, rng: &mut Rng| -> Result<StyleAffine> {
            Ok(StyleAffine {
                weight: randn(&[dim, c_in], rng)?.map(|v| v / (dim as f64).sqrt()),
                bias: Tensor::full(&[c_in], 1.0),
            })
        };
        let main_affine = affine(style_dim, rng)?;
        let offset_affine = affine(offset_style_dim, rng)?;
        Ok(Self {
            main: KernelWeights::new(main_w, Some(Tensor::zeros(&[c_out])))?,
            main_affine,
            head: KernelWeights::new(Tensor::zeros(&[2 * k * k, c_in, k, k]), Some(Tensor::zeros(&[2 * k * k])))?,
            offset_affine,
            offsets_enabled: true,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::new(self.main.k()).expect("validated kernel size")
    }
}

/// Offsets from the head, then deformable convolution with the demodulated
/// main kernel; returns the output and the offsets actually used.
pub fn mtm_forward(layer: &MtmLayer, x: &Tensor, main_styles: &[StyleVector], offset_styles: &[StyleVector]) -> Result<(Tensor, OffsetField)> {
    let n = x.dims4()?.0;
    if main_styles.len() != n || offset_styles.len() != n {
        return Err(shape_err!(
            "{} main and {} offset styles for a batch of {n}",
            main_styles.len(),
            offset_styles.len()
        ));
    }
    let c_in = layer.main.c_in();
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let vars = MtmVars {
        weight: tape.constant(layer.main.weight.clone()),
        bias: layer.main.bias.clone().map(|b| tape.constant(b)),
        head_weight: tape.constant(layer.head.weight.clone()),
        head_bias: layer.head.bias.clone().map(|b| tape.constant(b)),
    };
    let ms = tape.constant(styles_tensor(main_styles, c_in)?);
    let os = tape.constant(styles_tensor(offset_styles, c_in)?);
    let (y, off) = mtm_conv(&mut tape, xv, &vars, ms, os, layer.offsets_enabled)?;
    Ok((tape.value(y)?.clone(), OffsetField::new(tape.value(off)?.clone(), layer.main.k())?))
}

/// `(main_params, offset_params)`: main kernel, bias and style affine versus
/// offset head, its bias and its style affine.
pub fn mtm_param_count(layer: &MtmLayer) -> (usize, usize) {
    (
        layer.main.param_count() + layer.main_affine.param_count(),
        layer.head.param_count() + layer.offset_affine.param_count(),
    )
}

/// Parameters of one MTM layer on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MtmVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub head_weight: Var,
    pub head_bias: Option<Var>,
}

/// Taped MTM layer. With `offsets_enabled == false` the predicted offsets
/// are replaced by zeros before sampling.
pub fn mtm_conv(tape: &mut Tape, x: Var, p: &MtmVars, main_styles: Var, offset_styles: Var, offsets_enabled: bool) -> Result<(Var, Var)> {
    let head_out = tape.value(p.head_weight)?.shape()[0];
    let k = tape.value(p.head_weight)?.shape()[2];
    if head_out != 2 * k * k {
        return Err(shape_err!("offset head must have {} outputs, got {head_out}", 2 * k * k));
    }
    let mut off = modulated_conv(tape, x, p.head_weight, offset_styles, p.head_bias, DEMOD_EPS)?;
    if !offsets_enabled {
        let shape = tape.value(off)?.shape().to_vec();
        off = tape.constant(Tensor::zeros(&shape));
    }
    let m = tape.modulate(p.weight, main_styles, DEMOD_EPS, true)?;
    let mut y = tape.sampled_conv2d(x, m, Some(off))?;
    if let Some(b) = p.bias {
        y = tape.add_channel_bias(y, b)?;
    }
    Ok((y, off))
}

/// Smallest distance of any offset value to the integer lattice. Sampling
/// points share the fractional part of their offset.
pub fn lattice_margin(offsets: &Tensor) -> f64 {
    offsets
        .data()
        .iter()
        .map(|v| {
            let f = v - v.floor();
            f.min(1.0 - f)
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::conv::{conv2d, modulate_batch, modulated_conv2d};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        randn(shape, &mut Rng::new(seed)).unwrap()
    }

    fn kernel(co: usize, ci: usize, seed: u64) -> KernelWeights {
        KernelWeights::new(rand(&[co, ci, 3, 3], seed), Some(rand(&[co], seed + 100))).unwrap()
    }

    fn styles(n: usize, c: usize, seed: u64) -> Vec<StyleVector> {
        (0..n).map(|i| StyleVector(rand(&[c], seed + i as u64).data().to_vec())).collect()
    }

    fn spec() -> ConvSpec {
        ConvSpec::default()
    }

    /// Explicit four-neighbour interpolation, written independently of the
    /// kernel code.
    fn interp(x: &Tensor, b: usize, c: usize, qy: f64, qx: f64) -> f64 {
        let (_, ch, h, w) = x.dims4().unwrap();
        let (y0, x0) = (qy.floor(), qx.floor());
        let mut acc = 0.0;
        for (iy, ix) in [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)] {
            let wgt = (1.0 - (qy - iy).abs()) * (1.0 - (qx - ix).abs());
            if iy >= 0.0 && ix >= 0.0 && (iy as usize) < h && (ix as usize) < w {
                acc += wgt * x.data()[((b * ch + c) * h + iy as usize) * w + ix as usize];
            }
        }
        acc
    }

    fn brute_deform(x: &Tensor, w: &Tensor, off: &OffsetField) -> Tensor {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let co = w.shape()[0];
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for (t, (ty, tx)) in spec().taps().into_iter().enumerate() {
                                let (dy, dx) = off.at(b, t, y, xx);
                                let v = interp(x, b, i, y as f64 + ty as f64 + dy, xx as f64 + tx as f64 + dx);
                                acc += w.data()[(o * ci + i) * 9 + t] * v;
                            }
                        }
                        out.data_mut()[((b * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_examples() {
        let x = Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_sample(&x, 0, 0, 1.0, 1.0).unwrap(), 4.0);
        let m = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 0, 0, 0.5, 0.5).unwrap(), 1.5);
        assert_eq!(bilinear_sample(&m, 0, 0, -5.0, -5.0).unwrap(), 0.0);
        assert!(bilinear_sample(&m, 1, 0, 0.0, 0.0).is_err());
    }

    #[test]
    fn bilinear_matches_explicit_interpolation() {
        let x = rand(&[2, 2, 5, 4], 1);
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let (qy, qx) = (rng.uniform(-2.0, 6.0), rng.uniform(-2.0, 5.0));
            let a = bilinear_sample(&x, 1, 1, qy, qx).unwrap();
            assert!((a - interp(&x, 1, 1, qy, qx)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offsets_reduce_to_conv() {
        let x = rand(&[2, 3, 6, 5], 3);
        let w = kernel(4, 3, 4);
        let a = deform_conv2d(&x, &w, &OffsetField::zeros(2, 3, 6, 5), &spec()).unwrap();
        let b = conv2d(&x, &w, &spec()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn unit_column_offset_is_left_shift() {
        let x = rand(&[1, 2, 5, 6], 5);
        let w = kernel(2, 2, 6);
        let y = deform_conv2d(&x, &w, &OffsetField::constant(1, 3, 5, 6, 0.0, 1.0), &spec()).unwrap();
        // x shifted left by one column, zero-filled on the right.
        let mut shifted = Tensor::zeros(x.shape());
        for row in 0..10 {
            for c in 0..5 {
                shifted.data_mut()[row * 6 + c] = x.data()[row * 6 + c + 1];
            }
        }
        let r = conv2d(&shifted, &w, &spec()).unwrap();
        // The leftmost output column reads x's first column through tap
        // dx=-1, which the shifted image no longer has.
        for row in 0..10 {
            for c in 1..6 {
                assert_eq!(y.data()[row * 6 + c], r.data()[row * 6 + c]);
            }
        }
    }

    #[test]
    fn matches_brute_force_loop() {
        let x = rand(&[2, 3, 6, 6], 7);
        let w = kernel(2, 3, 8);
        let off = OffsetField::new(rand(&[2, 18, 6, 6], 9).map(|v| 1.5 * v), 3).unwrap();
        let plain = KernelWeights::new(w.weight.clone(), None).unwrap();
        let a = deform_conv2d(&x, &plain, &off, &spec()).unwrap();
        assert!(a.max_abs_diff(&brute_deform(&x, &w.weight, &off)).unwrap() <= 1e-12);
    }

    #[test]
    fn wrong_offset_channels_rejected() {
        assert!(OffsetField::new(Tensor::zeros(&[1, 16, 4, 4]), 3).is_err());
        let x = rand(&[1, 2, 4, 4], 1);
        let w = kernel(1, 2, 2);
        assert!(deform_conv2d(&x, &w, &OffsetField::zeros(1, 1, 4, 4), &spec()).is_err());
        assert!(deform_conv2d(&x, &w, &OffsetField::zeros(1, 3, 5, 4), &spec()).is_err());
    }

    #[test]
    fn offset_gradient_passes_gradcheck() {
        let x = rand(&[1, 2, 5, 5], 11);
        let w = rand(&[2, 2, 3, 3], 12);
        let mut rng = Rng::new(13);
        let off = Tensor::new(vec![1, 18, 5, 5], (0..450).map(|_| rng.uniform(0.1, 0.4)).collect()).unwrap();
        let eval = |t: &mut Tape, ov: Var| -> Result<Var> {
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.sampled_conv2d(xv, wv, Some(ov))?;
            let y = t.tanh(y)?;
            t.sum(y)
        };
        let mut tape = Tape::new();
        let ov = tape.leaf(off.clone());
        let l = eval(&mut tape, ov).unwrap();
        let g = tape.backward(l, &[ov], false).unwrap().get(ov).unwrap();
        let analytic = tape.value(g).unwrap().clone();
        let mut f = |p: &Tensor| {
            let mut t = Tape::no_grad();
            let ov = t.constant(p.clone());
            let l = eval(&mut t, ov)?;
            t.value(l)?.item()
        };
        assert!(finite_diff_check(&mut f, &off, &analytic, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn zero_head_predicts_zero_offsets() {
        let x = rand(&[2, 4, 4, 4], 14);
        let head = KernelWeights::new(Tensor::zeros(&[18, 4, 3, 3]), Some(Tensor::zeros(&[18]))).unwrap();
        let f = predict_offsets(&x, &styles(2, 4, 15), &head).unwrap();
        assert_eq!(f.tensor().shape(), &[2, 18, 4, 4]);
        assert!(f.tensor().data().iter().all(|&v| v == 0.0));
        let bad = KernelWeights::new(Tensor::zeros(&[16, 4, 3, 3]), None).unwrap();
        assert!(predict_offsets(&x, &styles(2, 4, 15), &bad).is_err());
    }

    #[test]
    fn offset_styles_make_fields_instance_specific() {
        let one = rand(&[1, 3, 4, 4], 16);
        let x = Tensor::concat_batch(&[one.clone(), one]).unwrap();
        let head = kernel(18, 3, 17);
        let f = predict_offsets(&x, &styles(2, 3, 18), &head).unwrap();
        let t = f.tensor();
        let d = t.outer_slice(0).iter().zip(t.outer_slice(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d > 0.0);
    }

    #[test]
    fn fresh_layer_equals_modulated_conv() {
        let layer = MtmLayer::fresh(3, 4, 3, 8, 8, &mut Rng::new(19)).unwrap();
        let x = rand(&[2, 3, 5, 5], 20);
        let (ms, os) = (styles(2, 3, 21), styles(2, 3, 23));
        let (y, off) = mtm_forward(&layer, &x, &ms, &os).unwrap();
        assert!(off.tensor().data().iter().all(|&v| v == 0.0));
        let r = modulated_conv2d(&x, &layer.main, &ms, &spec()).unwrap();
        assert!(y.max_abs_diff(&r).unwrap() <= 1e-12);
    }

    #[test]
    fn disabled_offsets_equal_zero_offset_deform() {
        let mut layer = MtmLayer::fresh(3, 2, 3, 8, 8, &mut Rng::new(24)).unwrap();
        layer.head = kernel(18, 3, 25);
        let x = rand(&[2, 3, 4, 4], 26);
        let (ms, os) = (styles(2, 3, 27), styles(2, 3, 29));
        let (trained, off) = mtm_forward(&layer, &x, &ms, &os).unwrap();
        assert!(off.tensor().max_abs() > 0.0);
        layer.offsets_enabled = false;
        let (y, off) = mtm_forward(&layer, &x, &ms, &os).unwrap();
        assert_eq!(off.tensor().max_abs(), 0.0);
        let m = modulate_batch(&layer.main, &ms, DEMOD_EPS, true).unwrap();
        let d = deform_conv2d(&x, &m, &OffsetField::zeros(2, 3, 4, 4), &spec()).unwrap();
        let bias = layer.main.bias.as_ref().unwrap();
        let d = d.zip_map(&Tensor::concat_batch(&[bias_plane(bias, 4, 4), bias_plane(bias, 4, 4)]).unwrap(), |a, b| a + b).unwrap();
        assert_eq!(y, d);
        assert!(y.max_abs_diff(&trained).unwrap() > 0.0);
    }

    fn bias_plane(b: &Tensor, h: usize, w: usize) -> Tensor {
        let data: Vec<f64> = b.data().iter().flat_map(|&v| std::iter::repeat_n(v, h * w)).collect();
        Tensor::new(vec![1, b.len(), h, w], data).unwrap()
    }

    #[test]
    fn full_layer_gradcheck() {
        // Inputs: x, main weight, main bias, head weight, head bias, styles.
        let mut seed = 30;
        let inputs = loop {
            let head = rand(&[18, 4, 3, 3], seed + 3).map(|v| 0.3 * v);
            let hb = rand(&[18], seed + 4).map(|v| 0.2 * v);
            let cand = vec![
                rand(&[1, 4, 6, 6], seed),
                rand(&[3, 4, 3, 3], seed + 1),
                rand(&[3], seed + 2),
                head,
                hb,
                rand(&[1, 4], seed + 5),
                rand(&[1, 4], seed + 6),
            ];
            let mut t = Tape::no_grad();
            let off = layer_eval(&mut t, &cand).unwrap().1;
            if lattice_margin(t.value(off).unwrap()) >= 1e-3 {
                break cand;
            }
            seed += 10;
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = layer_loss(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss, &vars, false).unwrap();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = tape.value(grads.get(v).unwrap()).unwrap().clone();
            let mut f = |p: &Tensor| {
                let mut xs = inputs.clone();
                xs[k] = p.clone();
                let mut t = Tape::no_grad();
                let vs: Vec<Var> = xs.iter().map(|v| t.constant(v.clone())).collect();
                let l = layer_loss(&mut t, &vs)?;
                t.value(l)?.item()
            };
            let err = finite_diff_check(&mut f, &inputs[k], &analytic, 1e-5).unwrap();
            assert!(err < 1e-4, "input {k}: {err}");
        }
    }

    fn layer_eval(t: &mut Tape, xs: &[Tensor]) -> Result<(Var, Var)> {
        let vs: Vec<Var> = xs.iter().map(|v| t.constant(v.clone())).collect();
        layer_vars(t, &vs)
    }

    fn layer_vars(t: &mut Tape, v: &[Var]) -> Result<(Var, Var)> {
        let p = MtmVars {
            weight: v[1],
            bias: Some(v[2]),
            head_weight: v[3],
            head_bias: Some(v[4]),
        };
        mtm_conv(t, v[0], &p, v[5], v[6], true)
    }

    fn layer_loss(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let (y, _) = layer_vars(t, v)?;
        let y = t.tanh(y)?;
        let sq = t.mul(y, y)?;
        t.sum(sq)
    }

    #[test]
    fn param_count_formula() {
        let layer = MtmLayer::fresh(64, 64, 3, 64, 64, &mut Rng::new(1)).unwrap();
        let (main, offset) = mtm_param_count(&layer);
        assert_eq!(layer.head.param_count(), 64 * 18 * 9 + 18);
        assert_eq!(layer.head.param_count(), 10386);
        assert_eq!(offset, 10386 + 64 * 64 + 64);
        assert_eq!(main, 64 * 64 * 9 + 64 + 64 * 64 + 64);
        let one = MtmLayer::fresh(5, 5, 1, 4, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(one.head.c_out(), 2);
    }

    /// Shift-then-convolve on a zero canvas large enough that nothing falls
    /// off: place x at the centre, move it by `-(sy, sx)`, convolve, crop.
    fn shift_then_conv(x: &Tensor, w: &KernelWeights, sy: i64, sx: i64) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let m = 1 + sy.unsigned_abs().max(sx.unsigned_abs()) as usize;
        let (ch, cw) = (h + 2 * m, wd + 2 * m);
        let mut canvas = Tensor::zeros(&[n, c, ch, cw]);
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..wd {
                    let ty = (y + m) as i64 - sy;
                    let tx = (xx + m) as i64 - sx;
                    canvas.data_mut()[(plane * ch + ty as usize) * cw + tx as usize] = x.data()[(plane * h + y) * wd + xx];
                }
            }
        }
        let full = conv2d(&canvas, w, &spec()).unwrap();
        let co = w.c_out();
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for plane in 0..n * co {
            for y in 0..h {
                for xx in 0..wd {
                    out.data_mut()[(plane * h + y) * wd + xx] = full.data()[(plane * ch + y + m) * cw + xx + m];
                }
            }
        }
        out
    }

    #[test]
    fn integer_offsets_equal_shifted_conv() {
        let x = rand(&[2, 2, 5, 6], 40);
        let w = kernel(3, 2, 41);
        for (sy, sx) in [(0, 1), (-2, 1), (3, -1), (0, 0)] {
            let off = OffsetField::constant(2, 3, 5, 6, sy as f64, sx as f64);
            let a = deform_conv2d(&x, &w, &off, &spec()).unwrap();
            assert_eq!(a, shift_then_conv(&x, &w, sy, sx));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn zero_offset_equivalence(seed in 0u64..10_000, n in 1usize..3, c in 1usize..5, h in 1usize..7, w in 1usize..7) {
            let layer = MtmLayer::fresh(c, c + 1, 3, 6, 6, &mut Rng::new(seed)).unwrap();
            let x = rand(&[n, c, h, w], seed + 1);
            let ms = styles(n, c, seed + 2);
            let os = styles(n, c, seed + 5);
            let (y, _) = mtm_forward(&layer, &x, &ms, &os).unwrap();
            let r = modulated_conv2d(&x, &layer.main, &ms, &spec()).unwrap();
            prop_assert!(y.max_abs_diff(&r).unwrap() <= 1e-12);
        }

        #[test]
        fn translation_consistency(seed in 0u64..10_000, sy in -3i64..4, sx in -3i64..4) {
            let x = rand(&[1, 2, 5, 5], seed);
            let w = kernel(2, 2, seed + 1);
            let off = OffsetField::constant(1, 3, 5, 5, sy as f64, sx as f64);
            let a = deform_conv2d(&x, &w, &off, &spec()).unwrap();
            prop_assert_eq!(a, shift_then_conv(&x, &w, sy, sx));
        }
    }
}
