//! Differentiable operations and their backward rules.

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels;
use crate::tensor::{self, Tensor};

/// `(outer, mid, inner)` view of a tensor around axis 1.
fn mid_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("axis-1 operation needs rank >= 2, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    fn unary(&self, v: Var) -> Result<usize> {
        self.check(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_map(self.val(ib), |x, y| x + y)?;
        self.record(Op::Add(ia, ib), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_map(self.val(ib), |x, y| x - y)?;
        self.record(Op::Sub(ia, ib), value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_map(self.val(ib), |x, y| x * y)?;
        self.record(Op::Mul(ia, ib), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(|x| x * c);
        self.record(Op::Scale(ia, c), value)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(|x| x + c);
        self.record(Op::AddScalar(ia), value)
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = Tensor::scalar(self.val(ia).sum());
        self.record(Op::Sum(ia), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Repeats a one-element tensor over `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.unary(a)?;
        let v = self.val(ia).item()?;
        self.record(Op::Broadcast(ia), Tensor::full(shape, v))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = tensor::leaky_relu(self.val(ia), slope);
        self.record(Op::LeakyRelu(ia, slope), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(f64::tanh);
        self.record(Op::Tanh(ia), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(sigmoid);
        self.record(Op::Sigmoid(ia), value)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(softplus);
        self.record(Op::Softplus(ia), value)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(f64::sin);
        self.record(Op::Sin(ia), value)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).map(f64::cos);
        self.record(Op::Cos(ia), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.unary(a)?;
        let value = self.val(ia).reshape(shape)?;
        self.record(Op::Reshape(ia), value)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.val(ia).dims2()?;
        let (k2, n) = self.val(ib).dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            kernels::MatView::row_major(self.val(ia).data(), m, k),
            self.val(ib).data(),
            n,
            &mut out,
            false,
        );
        self.record(Op::MatMul(ia, ib), Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let (r, c) = self.val(ia).dims2()?;
        let value = Tensor::new(vec![c, r], kernels::transpose(self.val(ia).data(), r, c))?;
        self.record(Op::Transpose(ia), value)
    }

    /// `(n, m) + (m)` applied to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (n, m) = self.val(ia).dims2()?;
        if self.val(ib).shape() != [m] {
            return Err(shape_err!("row bias {:?} for {n}x{m} input", self.val(ib).shape()));
        }
        let b = self.val(ib).data();
        let mut out = self.val(ia).data().to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.record(Op::AddRowBias(ia, ib), Tensor::new(vec![n, m], out)?)
    }

    /// Column sums of an `(n, m)` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.unary(a)?;
        let (_, m) = self.val(ia).dims2()?;
        let mut out = vec![0.0; m];
        for row in self.val(ia).data().chunks_exact(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.record(Op::SumRows(ia), Tensor::new(vec![m], out)?)
    }

    /// Repeats an `(m)` vector as `n` rows.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.unary(a)?;
        let v = self.val(ia);
        if v.rank() != 1 {
            return Err(shape_err!("broadcast_rows needs a vector, got {:?}", v.shape()));
        }
        let m = v.len();
        let data = v.data().repeat(n);
        self.record(Op::BroadcastRows(ia), Tensor::new(vec![n, m], data)?)
    }

    /// Adds a per-channel bias `(c)` to an `(n, c, h, w)` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (n, c, h, w) = self.val(ix).dims4()?;
        if self.val(ib).shape() != [c] {
            return Err(shape_err!("channel bias {:?} for {c} channels", self.val(ib).shape()));
        }
        let b = self.val(ib).data();
        let mut out = self.val(ix).data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(h * w).enumerate() {
            let bv = b[plane % c];
            for o in chunk {
                *o += bv;
            }
        }
        self.record(Op::AddChannelBias(ix, ib), Tensor::new(vec![n, c, h, w], out)?)
    }

    /// Per-channel sums over batch and space.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let ix = self.unary(x)?;
        let (_, c, h, w) = self.val(ix).dims4()?;
        let mut out = vec![0.0; c];
        for (plane, chunk) in self.val(ix).data().chunks_exact(h * w).enumerate() {
            out[plane % c] += chunk.iter().fold(0.0, |acc, v| acc + v);
        }
        self.record(Op::SumChannels(ix), Tensor::new(vec![c], out)?)
    }

    pub fn broadcast_channels(&mut self, b: Var, shape: &[usize]) -> Result<Var> {
        let ib = self.unary(b)?;
        let (n, c, h, w) = match *shape {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err!("broadcast_channels target must be rank 4, got {shape:?}")),
        };
        if self.val(ib).shape() != [c] {
            return Err(shape_err!("channel vector {:?} for {c} channels", self.val(ib).shape()));
        }
        let bv = self.val(ib).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for _ in 0..n {
            for &v in bv {
                out.extend(std::iter::repeat_n(v, h * w));
            }
        }
        self.record(Op::BroadcastChannels(ib), Tensor::new(shape.to_vec(), out)?)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let ix = self.unary(x)?;
        let value = tensor::upsample_nearest2x(self.val(ix))?;
        self.record(Op::Upsample2x(ix), value)
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let ix = self.unary(x)?;
        let value = tensor::avg_pool2x2(self.val(ix))?;
        self.record(Op::AvgPool2x2(ix), value)
    }

    /// Concatenation along axis 1 (columns of a matrix, channels of NCHW).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape().to_vec(), self.val(ib).shape().to_vec());
        let (oa, ma, na) = mid_view(&sa)?;
        let (ob, mb, nb) = mid_view(&sb)?;
        if oa != ob || na != nb || sa[2..] != sb[2..] {
            return Err(shape_err!("concat {sa:?} with {sb:?}"));
        }
        let (da, db) = (self.val(ia).data(), self.val(ib).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..oa {
            out.extend_from_slice(&da[o * ma * na..(o + 1) * ma * na]);
            out.extend_from_slice(&db[o * mb * na..(o + 1) * mb * na]);
        }
        let mut shape = sa.clone();
        shape[1] = ma + mb;
        self.record(Op::ConcatMid { a: ia, b: ib }, Tensor::new(shape, out)?)
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.unary(x)?;
        let s = self.val(ix).shape().to_vec();
        let (outer, mid, inner) = mid_view(&s)?;
        if start + len > mid {
            return Err(shape_err!("slice {start}+{len} of axis with {mid} entries"));
        }
        let d = self.val(ix).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * mid + start) * inner..(o * mid + start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        self.record(Op::SliceMid { x: ix, start }, Tensor::new(shape, out)?)
    }

    /// Zero-pads axis 1 to `total` entries with `x` placed at `start`.
    pub fn pad(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let ix = self.unary(x)?;
        let s = self.val(ix).shape().to_vec();
        let (outer, mid, inner) = mid_view(&s)?;
        if start + mid > total {
            return Err(shape_err!("pad {mid} entries at {start} into {total}"));
        }
        let d = self.val(ix).data();
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            out[(o * total + start) * inner..(o * total + start + mid) * inner]
                .copy_from_slice(&d[o * mid * inner..(o + 1) * mid * inner]);
        }
        let mut shape = s;
        shape[1] = total;
        self.record(Op::PadMid { x: ix, start }, Tensor::new(shape, out)?)
    }

    /// Selects entries of the leading axis: `out[i] = x[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.unary(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.is_empty() {
            return Err(shape_err!("gather on a scalar"));
        }
        let stride = self.val(ix).len() / s[0];
        let d = self.val(ix).data();
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= s[0] {
                return Err(shape_err!("gather index {i} out of {}", s[0]));
            }
            out.extend_from_slice(&d[i * stride..(i + 1) * stride]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        self.record(Op::Gather { x: ix, indices: indices.to_vec() }, Tensor::new(shape, out)?)
    }

    /// Adjoint of [`Tape::gather`]: `out[indices[i]] += x[i]`, with `n` rows.
    pub fn scatter_add(&mut self, x: Var, indices: &[usize], n: usize) -> Result<Var> {
        let ix = self.unary(x)?;
        let s = self.val(ix).shape().to_vec();
        if s.is_empty() || s[0] != indices.len() {
            return Err(shape_err!("scatter_add of {s:?} with {} indices", indices.len()));
        }
        let stride = self.val(ix).len() / s[0];
        let d = self.val(ix).data();
        let mut out = vec![0.0; n * stride];
        for (row, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(shape_err!("scatter index {i} out of {n}"));
            }
            for (o, &v) in out[i * stride..(i + 1) * stride].iter_mut().zip(&d[row * stride..(row + 1) * stride]) {
                *o += v;
            }
        }
        let mut shape = s;
        shape[0] = n;
        self.record(Op::ScatterAdd { x: ix, indices: indices.to_vec() }, Tensor::new(shape, out)?)
    }

    /// Zero-padded, stride-1 convolution with a batch-shared `(co,ci,k,k)`
    /// kernel. Twice differentiable.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let value = kernels::conv_forward(self.val(ix), self.val(iw))?;
        self.record(Op::Conv { x: ix, w: iw }, value)
    }

    /// Adjoint of [`Tape::conv2d`] in its input.
    pub fn conv_transpose2d(&mut self, g: Var, w: Var) -> Result<Var> {
        let (ig, iw) = (self.check(g)?, self.check(w)?);
        let value = kernels::conv_transpose(self.val(ig), self.val(iw))?;
        self.record(Op::ConvTranspose { g: ig, w: iw }, value)
    }

    /// Adjoint of [`Tape::conv2d`] in its kernel (summed over the batch).
    pub fn conv2d_weight_grad(&mut self, x: Var, g: Var, k: usize) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(g)?);
        let value = kernels::conv_weight_grad(self.val(ix), self.val(ig), k)?;
        self.record(Op::ConvWeightGrad { x: ix, g: ig }, value)
    }

    /// Convolution with a shared `(co,ci,k,k)` or per-sample `(n,co,ci,k,k)`
    /// kernel; with `offsets` the taps are displaced and bilinearly sampled.
    pub fn sampled_conv2d(&mut self, x: Var, w: Var, offsets: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let io = offsets.map(|o| self.check(o)).transpose()?;
        let value = kernels::sampled_conv_forward(self.val(ix), self.val(iw), io.map(|o| self.val(o)))?;
        self.record(Op::SampledConv { x: ix, w: iw, offsets: io }, value)
    }

    /// Per-sample kernels `(n,co,ci,k,k)` from a `(co,ci,k,k)` kernel and
    /// `(n,ci)` styles; demodulated per output channel when requested.
    pub fn modulate(&mut self, w: Var, styles: Var, eps: f64, demodulate: bool) -> Result<Var> {
        let (iw, is) = (self.check(w)?, self.check(styles)?);
        let (co, ci, k, k2) = self.val(iw).dims4()?;
        let (n, sc) = self.val(is).dims2()?;
        if sc != ci {
            return Err(shape_err!("styles have {sc} channels, kernel expects {ci}"));
        }
        let data = kernels::modulate(self.val(iw).data(), self.val(is).data(), n, co, ci, k * k2, eps, demodulate);
        let value = Tensor::new(vec![n, co, ci, k, k2], data)?;
        self.record(Op::Modulate { w: iw, s: is, eps, demodulate }, value)
    }

    /// Contributions of node `id` to each of its inputs.
    pub(super) fn backward_rule(&mut self, id: usize, op: &Op, g: Var, need: &[bool]) -> Result<Vec<Option<Var>>> {
        let me = self.var(id);
        let v = |tape: &Tape, i: usize| tape.var(i);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::Add(..) => vec![Some(g), Some(g)],
            Op::Sub(..) => vec![Some(g), Some(self.scale(g, -1.0)?)],
            Op::Mul(a, b) => {
                let ga = if need[0] { Some(self.mul(g, v(self, b))?) } else { None };
                let gb = if need[1] { Some(self.mul(g, v(self, a))?) } else { None };
                vec![ga, gb]
            }
            Op::Scale(_, c) => vec![Some(self.scale(g, c)?)],
            Op::AddScalar(..) => vec![Some(g)],
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                vec![Some(self.broadcast(g, &shape)?)]
            }
            Op::Broadcast(..) => vec![Some(self.sum(g)?)],
            Op::LeakyRelu(a, slope) => {
                let mask = self.val(a).map(|x| if x >= 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                vec![Some(self.mul(g, m)?)]
            }
            Op::Tanh(_) => {
                // d tanh = 1 - y^2
                let y2 = self.mul(me, me)?;
                let neg = self.scale(y2, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Sigmoid(_) => {
                let neg = self.scale(me, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(me, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(v(self, a))?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Sin(a) => {
                let c = self.cos(v(self, a))?;
                vec![Some(self.mul(g, c)?)]
            }
            Op::Cos(a) => {
                let s = self.sin(v(self, a))?;
                let gs = self.mul(g, s)?;
                vec![Some(self.scale(gs, -1.0)?)]
            }
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::MatMul(a, b) => {
                let ga = if need[0] {
                    let bt = self.transpose(v(self, b))?;
                    Some(self.matmul(g, bt)?)
                } else {
                    None
                };
                let gb = if need[1] {
                    let at = self.transpose(v(self, a))?;
                    Some(self.matmul(at, g)?)
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Transpose(_) => vec![Some(self.transpose(g)?)],
            Op::AddRowBias(..) => {
                let gb = if need[1] { Some(self.sum_rows(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::SumRows(a) => {
                let n = self.val(a).shape()[0];
                vec![Some(self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(..) => vec![Some(self.sum_rows(g)?)],
            Op::AddChannelBias(..) => {
                let gb = if need[1] { Some(self.sum_channels(g)?) } else { None };
                vec![Some(g), gb]
            }
            Op::SumChannels(a) => {
                let shape = self.val(a).shape().to_vec();
                vec![Some(self.broadcast_channels(g, &shape)?)]
            }
            Op::BroadcastChannels(..) => vec![Some(self.sum_channels(g)?)],
            Op::Upsample2x(_) => {
                let p = self.avg_pool2x2(g)?;
                vec![Some(self.scale(p, 4.0)?)]
            }
            Op::AvgPool2x2(_) => {
                let u = self.upsample2x(g)?;
                vec![Some(self.scale(u, 0.25)?)]
            }
            Op::ConcatMid { a, b } => {
                let (ma, mb) = (self.val(a).shape()[1], self.val(b).shape()[1]);
                let ga = if need[0] { Some(self.slice(g, 0, ma)?) } else { None };
                let gb = if need[1] { Some(self.slice(g, ma, mb)?) } else { None };
                vec![ga, gb]
            }
            Op::SliceMid { x, start } => {
                let total = self.val(x).shape()[1];
                vec![Some(self.pad(g, start, total)?)]
            }
            Op::PadMid { x, start } => {
                let len = self.val(x).shape()[1];
                vec![Some(self.slice(g, start, len)?)]
            }
            Op::Gather { x, ref indices } => {
                let n = self.val(x).shape()[0];
                vec![Some(self.scatter_add(g, indices, n)?)]
            }
            Op::ScatterAdd { ref indices, .. } => vec![Some(self.gather(g, indices)?)],
            Op::Conv { x, w } => {
                let k = self.val(w).shape()[2];
                let gx = if need[0] { Some(self.conv_transpose2d(g, v(self, w))?) } else { None };
                let gw = if need[1] { Some(self.conv2d_weight_grad(v(self, x), g, k)?) } else { None };
                vec![gx, gw]
            }
            Op::ConvTranspose { g: go, w } => {
                let k = self.val(w).shape()[2];
                let gg = if need[0] { Some(self.conv2d(g, v(self, w))?) } else { None };
                let gw = if need[1] { Some(self.conv2d_weight_grad(g, v(self, go), k)?) } else { None };
                vec![gg, gw]
            }
            Op::ConvWeightGrad { x, g: go } => {
                let gx = if need[0] { Some(self.conv_transpose2d(v(self, go), g)?) } else { None };
                let gg = if need[1] { Some(self.conv2d(v(self, x), g)?) } else { None };
                vec![gx, gg]
            }
            Op::SampledConv { x, w, offsets } => {
                let need_off = offsets.is_some() && need[2];
                let grads = kernels::sampled_conv_backward(
                    self.val(x),
                    self.val(w),
                    offsets.map(|o| self.val(o)),
                    &self.nodes[g.index()].value,
                    [need[0], need[1], need_off],
                )?;
                let mut out = vec![
                    grads.x.map(|t| self.constant(t)),
                    grads.w.map(|t| self.constant(t)),
                ];
                if offsets.is_some() {
                    out.push(grads.offsets.map(|t| self.constant(t)));
                }
                out
            }
            Op::Modulate { w, s, eps, demodulate } => {
                let (co, ci, k, k2) = self.val(w).dims4()?;
                let n = self.val(s).shape()[0];
                let (dw, ds) = kernels::modulate_backward(
                    self.val(w).data(),
                    self.val(s).data(),
                    self.nodes[g.index()].value.data(),
                    n,
                    co,
                    ci,
                    k * k2,
                    eps,
                    demodulate,
                );
                let dw = Tensor::new(vec![co, ci, k, k2], dw)?;
                let ds = Tensor::new(vec![n, ci], ds)?;
                vec![Some(self.constant(dw)), Some(self.constant(ds))]
            }
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` with a branch at zero so neither side overflows.
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}
