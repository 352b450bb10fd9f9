//! Low-level kernels shared by the plain operators and the tape.
//!
//! Every convolution is lowered to "gather columns, then multiply": the
//! gather is either the regular tap grid ([`im2col`]) or bilinear sampling
//! at displaced taps ([`SampleTable`]). Both feed the same [`gemm`], whose
//! per-output summation runs over (input channel, tap row, tap column) in
//! ascending order, starting from zero. That order is the documented
//! reduction order of every convolution in the crate.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Strided read-only view of a `rows x inner` matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub inner: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, inner: usize) -> Self {
        Self {
            data,
            rows,
            inner,
            row_stride: inner,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `inner x rows` matrix.
    pub fn transposed(data: &'a [f64], rows: usize, inner: usize) -> Self {
        Self {
            data,
            rows,
            inner,
            row_stride: 1,
            col_stride: rows,
        }
    }

    #[inline(always)]
    fn at(&self, r: usize, s: usize) -> f64 {
        self.data[r * self.row_stride + s * self.col_stride]
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[r, :] (+)= sum_s a[r, s] * b[s, :]` with `s` ascending.
///
/// `b` is row-major `a.inner x cols`; `out` is row-major `a.rows x cols`.
/// Each output element is accumulated in a register over the whole `s`
/// range, starting from zero (or the previous value when `accumulate`).
pub(crate) fn gemm(a: MatView<'_>, b: &[f64], cols: usize, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(b.len(), a.inner * cols);
    debug_assert_eq!(out.len(), a.rows * cols);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_avx2(a, b, cols, out, accumulate) };
            return;
        }
    }
    gemm_body(a, b, cols, out, accumulate);
}

/// Same code compiled with wider vectors. Multiplies and adds stay separate
/// instructions, so results match the portable path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: MatView<'_>, b: &[f64], cols: usize, out: &mut [f64], accumulate: bool) {
    gemm_body(a, b, cols, out, accumulate);
}

#[inline(always)]
fn gemm_body(a: MatView<'_>, b: &[f64], cols: usize, out: &mut [f64], accumulate: bool) {
    if !accumulate {
        out.fill(0.0);
    }
    // Pack A row-panels so the micro-kernel reads MR contiguous values per s.
    let mut panel = vec![0.0; MR * a.inner];
    let mut r = 0;
    while r < a.rows {
        let mr = MR.min(a.rows - r);
        for s in 0..a.inner {
            for i in 0..MR {
                panel[s * MR + i] = if i < mr { a.at(r + i, s) } else { 0.0 };
            }
        }
        let mut c = 0;
        while c + NR <= cols {
            micro_kernel(&panel, b, cols, c, &mut out[r * cols..], mr, a.inner);
            c += NR;
        }
        if c < cols {
            for i in 0..mr {
                let o = &mut out[(r + i) * cols..(r + i + 1) * cols];
                for (j, x) in o.iter_mut().enumerate().skip(c) {
                    let mut acc = *x;
                    for s in 0..a.inner {
                        acc += panel[s * MR + i] * b[s * cols + j];
                    }
                    *x = acc;
                }
            }
        }
        r += MR;
    }
}

#[inline(always)]
fn micro_kernel(panel: &[f64], b: &[f64], cols: usize, c: usize, out: &mut [f64], mr: usize, inner: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for (i, row) in acc.iter_mut().enumerate().take(mr) {
        row.copy_from_slice(&out[i * cols + c..i * cols + c + NR]);
    }
    for s in 0..inner {
        let bv: &[f64; NR] = b[s * cols + c..s * cols + c + NR].try_into().unwrap();
        let av: &[f64; MR] = panel[s * MR..s * MR + MR].try_into().unwrap();
        for i in 0..MR {
            for j in 0..NR {
                acc[i][j] += av[i] * bv[j];
            }
        }
    }
    for (i, row) in acc.iter().enumerate().take(mr) {
        out[i * cols + c..i * cols + c + NR].copy_from_slice(row);
    }
}

/// Row-major transpose of a `rows x cols` matrix.
pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of one sample's input planes and the (odd) kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }
    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
    /// Rows of the column matrix: `c * k * k`.
    pub fn col_rows(&self) -> usize {
        self.c * self.taps()
    }
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

/// Regular tap-grid gather: `cols[(i*k*k + t), p] = x[i, p + p_t]`, zero
/// outside the image.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let p = g.pixels();
    debug_assert_eq!(cols.len(), g.col_rows() * p);
    for i in 0..g.c {
        let plane = &x[i * p..(i + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[(i * g.taps() + ky * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut row[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    let (lo, hi) = valid_span(w, dx);
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose source column `x + shift` lies in `0..w`.
fn valid_span(w: isize, shift: isize) -> (usize, usize) {
    let lo = (-shift).clamp(0, w);
    let hi = (w - shift).clamp(lo, w);
    (lo as usize, hi as usize)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the planes.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (h, w, k, pad) = (g.h as isize, g.w as isize, g.k, g.pad());
    let p = g.pixels();
    for i in 0..g.c {
        let plane = &mut dx[i * p..(i + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[(i * g.taps() + ky * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let dx_ = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let (lo, hi) = valid_span(w, dx_);
                    let s0 = (sy * w + lo as isize + dx_) as usize;
                    let src = &row[(y * w) as usize + lo..(y * w) as usize + hi];
                    for (d, &v) in plane[s0..s0 + hi - lo].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Bilinear neighbourhood of one sampling point: four plane indices with
/// their interpolation weights and the weights' derivatives wrt the point.
///
/// Neighbours outside the image get index 0 and all-zero weights, which is
/// the zero-padding rule.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Neighbourhood {
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    pub d_qy: [f64; 4],
    pub d_qx: [f64; 4],
}

impl Neighbourhood {
    /// Neighbours are ordered (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1) with
    /// `y0 = floor(qy)`; the cell is closed on its lower edges, which fixes
    /// the one-sided derivative on the integer lattice.
    pub fn at(qy: f64, qx: f64, h: usize, w: usize) -> Self {
        let y0f = qy.floor();
        let x0f = qx.floor();
        let fy = qy - y0f;
        let fx = qx - x0f;
        let y0 = y0f as i64;
        let x0 = x0f as i64;
        let mut n = Self {
            idx: [0; 4],
            weight: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
            d_qy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
            d_qx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        };
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (j, &(yy, xx)) in corners.iter().enumerate() {
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                n.idx[j] = yy as usize * w + xx as usize;
            } else {
                n.weight[j] = 0.0;
                n.d_qy[j] = 0.0;
                n.d_qx[j] = 0.0;
            }
        }
        n
    }

    #[inline(always)]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        self.weight[0] * plane[self.idx[0]]
            + self.weight[1] * plane[self.idx[1]]
            + self.weight[2] * plane[self.idx[2]]
            + self.weight[3] * plane[self.idx[3]]
    }

    /// `(d value / d qy, d value / d qx)`.
    #[inline(always)]
    pub fn grad_q(&self, plane: &[f64]) -> (f64, f64) {
        let v = [
            plane[self.idx[0]],
            plane[self.idx[1]],
            plane[self.idx[2]],
            plane[self.idx[3]],
        ];
        (
            self.d_qy[0] * v[0] + self.d_qy[1] * v[1] + self.d_qy[2] * v[2] + self.d_qy[3] * v[3],
            self.d_qx[0] * v[0] + self.d_qx[1] * v[1] + self.d_qx[2] * v[2] + self.d_qx[3] * v[3],
        )
    }
}

/// Sampling points `p + p_t + offset_t(p)` for every tap and output pixel of
/// one sample, shared by all input channels.
pub(crate) struct SampleTable {
    geom: ConvGeom,
    cells: Vec<Neighbourhood>,
}

impl SampleTable {
    /// `offsets` is one sample's `(2*k*k, h, w)` field with `(dy, dx)` of tap
    /// `t` in channels `2t`, `2t+1`.
    pub fn new(offsets: &[f64], g: ConvGeom) -> Self {
        let p = g.pixels();
        let pad = g.pad() as f64;
        let mut cells = Vec::with_capacity(g.taps() * p);
        for t in 0..g.taps() {
            let ty = (t / g.k) as f64 - pad;
            let tx = (t % g.k) as f64 - pad;
            let oy = &offsets[2 * t * p..(2 * t + 1) * p];
            let ox = &offsets[(2 * t + 1) * p..(2 * t + 2) * p];
            for y in 0..g.h {
                for x in 0..g.w {
                    let pi = y * g.w + x;
                    let qy = y as f64 + ty + oy[pi];
                    let qx = x as f64 + tx + ox[pi];
                    cells.push(Neighbourhood::at(qy, qx, g.h, g.w));
                }
            }
        }
        Self { geom: g, cells }
    }

    /// Bilinear gather into the column matrix (same layout as [`im2col`]).
    pub fn gather(&self, x: &[f64], cols: &mut [f64]) {
        let g = self.geom;
        let p = g.pixels();
        let kk = g.taps();
        for i in 0..g.c {
            let plane = &x[i * p..(i + 1) * p];
            let block = &mut cols[i * kk * p..(i + 1) * kk * p];
            for (o, cell) in block.iter_mut().zip(&self.cells) {
                *o = cell.sample(plane);
            }
        }
    }

    /// Adjoint of [`SampleTable::gather`]: accumulates input gradients into
    /// `dx` and offset gradients into `doff` (same layout as the offsets).
    pub fn scatter(&self, x: &[f64], dcols: &[f64], dx: Option<&mut [f64]>, doff: Option<&mut [f64]>) {
        let g = self.geom;
        let p = g.pixels();
        let kk = g.taps();
        if let Some(dx) = dx {
            for i in 0..g.c {
                let plane = &mut dx[i * p..(i + 1) * p];
                let block = &dcols[i * kk * p..(i + 1) * kk * p];
                for (&gv, cell) in block.iter().zip(&self.cells) {
                    for j in 0..4 {
                        plane[cell.idx[j]] += cell.weight[j] * gv;
                    }
                }
            }
        }
        if let Some(doff) = doff {
            for i in 0..g.c {
                let plane = &x[i * p..(i + 1) * p];
                let block = &dcols[i * kk * p..(i + 1) * kk * p];
                for t in 0..kk {
                    for pi in 0..p {
                        let e = t * p + pi;
                        let (gy, gx) = self.cells[e].grad_q(plane);
                        doff[2 * t * p + pi] += block[e] * gy;
                        doff[(2 * t + 1) * p + pi] += block[e] * gx;
                    }
                }
            }
        }
    }
}

/// Per-sample modulated kernels: `w'[n,o,i,:] = s[n,i] * w[o,i,:]`, then
/// (if `demodulate`) divided by `sqrt(sum_{i,taps} w'^2 + eps)` per output
/// channel. Returns `(n, co, ci, kk)` row-major.
pub(crate) fn modulate(
    w: &[f64],
    styles: &[f64],
    n: usize,
    co: usize,
    ci: usize,
    kk: usize,
    eps: f64,
    demodulate: bool,
) -> Vec<f64> {
    let per = co * ci * kk;
    let mut out = vec![0.0; n * per];
    for b in 0..n {
        let s = &styles[b * ci..(b + 1) * ci];
        for o in 0..co {
            let dst = &mut out[b * per + o * ci * kk..b * per + (o + 1) * ci * kk];
            let src = &w[o * ci * kk..(o + 1) * ci * kk];
            for i in 0..ci {
                for t in 0..kk {
                    dst[i * kk + t] = s[i] * src[i * kk + t];
                }
            }
            if demodulate {
                let sq = dst.iter().fold(0.0, |acc, v| acc + v * v);
                let sigma = (sq + eps).sqrt();
                for v in dst.iter_mut() {
                    *v /= sigma;
                }
            }
        }
    }
    out
}

/// Gradient of [`modulate`] given the upstream gradient `grad` of the
/// modulated kernels; returns `(d w, d styles)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn modulate_backward(
    w: &[f64],
    styles: &[f64],
    grad: &[f64],
    n: usize,
    co: usize,
    ci: usize,
    kk: usize,
    eps: f64,
    demodulate: bool,
) -> (Vec<f64>, Vec<f64>) {
    let per = co * ci * kk;
    let mut dw = vec![0.0; per];
    let mut ds = vec![0.0; n * ci];
    let mut wp = vec![0.0; ci * kk];
    let mut dwp = vec![0.0; ci * kk];
    for b in 0..n {
        let s = &styles[b * ci..(b + 1) * ci];
        for o in 0..co {
            let src = &w[o * ci * kk..(o + 1) * ci * kk];
            let g = &grad[b * per + o * ci * kk..b * per + (o + 1) * ci * kk];
            for i in 0..ci {
                for t in 0..kk {
                    wp[i * kk + t] = s[i] * src[i * kk + t];
                }
            }
            if demodulate {
                // w'' = w'/sigma  =>  dw' = (g - w'' <g, w''>) / sigma
                let sq = wp.iter().fold(0.0, |acc, v| acc + v * v);
                let sigma = (sq + eps).sqrt();
                let dot = g
                    .iter()
                    .zip(&wp)
                    .fold(0.0, |acc, (gv, wv)| acc + gv * wv / sigma);
                for ((d, &gv), &wv) in dwp.iter_mut().zip(g).zip(&wp) {
                    *d = (gv - wv / sigma * dot) / sigma;
                }
            } else {
                dwp.copy_from_slice(g);
            }
            for i in 0..ci {
                for t in 0..kk {
                    let d = dwp[i * kk + t];
                    dw[o * ci * kk + i * kk + t] += d * s[i];
                    ds[b * ci + i] += d * src[i * kk + t];
                }
            }
        }
    }
    (dw, ds)
}

// ---------------------------------------------------------------------------
// Batch-level convolution routines on tensors.

fn kernel_size(w: &Tensor, ci: usize) -> Result<(usize, usize)> {
    let (co, wci, kh, kw) = w.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("kernel must be square with odd size, got {kh}x{kw}"));
    }
    if wci != ci {
        return Err(shape_err!("kernel expects {wci} input channels, input has {ci}"));
    }
    Ok((co, kh))
}

/// Regular convolution with a kernel shared across the batch:
/// `(n,ci,h,w) x (co,ci,k,k) -> (n,co,h,w)`.
pub(crate) fn conv_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, k) = kernel_size(w, ci)?;
    let g = ConvGeom { c: ci, h, w: wd, k };
    let p = g.pixels();
    let mut cols = vec![0.0; g.col_rows() * p];
    let mut out = vec![0.0; n * co * p];
    let wm = MatView::row_major(w.data(), co, g.col_rows());
    for b in 0..n {
        im2col(x.outer_slice(b), g, &mut cols);
        gemm(wm, &cols, p, &mut out[b * co * p..(b + 1) * co * p], false);
    }
    Tensor::new(vec![n, co, h, wd], out)
}

/// Transposed convolution (adjoint of [`conv_forward`] in its input):
/// `(n,co,h,w) x (co,ci,k,k) -> (n,ci,h,w)`.
pub(crate) fn conv_transpose(gy: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, co, h, wd) = gy.dims4()?;
    let (wco, ci, k, _) = w.dims4()?;
    if wco != co {
        return Err(shape_err!("transposed conv: kernel has {wco} outputs, gradient has {co} channels"));
    }
    let g = ConvGeom { c: ci, h, w: wd, k };
    let p = g.pixels();
    let mut dcols = vec![0.0; g.col_rows() * p];
    let mut out = vec![0.0; n * ci * p];
    let wt = MatView::transposed(w.data(), g.col_rows(), co);
    for b in 0..n {
        gemm(wt, gy.outer_slice(b), p, &mut dcols, false);
        col2im(&dcols, g, &mut out[b * ci * p..(b + 1) * ci * p]);
    }
    Tensor::new(vec![n, ci, h, wd], out)
}

/// Kernel gradient of [`conv_forward`], summed over the batch:
/// `(n,ci,h,w), (n,co,h,w) -> (co,ci,k,k)`.
pub(crate) fn conv_weight_grad(x: &Tensor, gy: &Tensor, k: usize) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4()?;
    let (gn, co, gh, gw) = gy.dims4()?;
    if (gn, gh, gw) != (n, h, wd) {
        return Err(shape_err!("weight grad: input {:?} vs gradient {:?}", x.shape(), gy.shape()));
    }
    let g = ConvGeom { c: ci, h, w: wd, k };
    let p = g.pixels();
    let j = g.col_rows();
    let mut cols = vec![0.0; j * p];
    let mut out = vec![0.0; co * j];
    for b in 0..n {
        im2col(x.outer_slice(b), g, &mut cols);
        let cols_t = transpose(&cols, j, p);
        gemm(MatView::row_major(gy.outer_slice(b), co, p), &cols_t, j, &mut out, b > 0);
    }
    Tensor::new(vec![co, ci, k, k], out)
}

/// Layout of the kernel operand of a sampled convolution.
fn sampled_kernel(w: &Tensor, n: usize, ci: usize) -> Result<(usize, usize, bool)> {
    match w.shape() {
        &[co, wci, kh, kw] => {
            if wci != ci || kh != kw || kh % 2 == 0 {
                return Err(shape_err!("kernel {:?} incompatible with {ci} input channels", w.shape()));
            }
            Ok((co, kh, false))
        }
        &[wn, co, wci, kh, kw] => {
            if wn != n || wci != ci || kh != kw || kh % 2 == 0 {
                return Err(shape_err!("per-sample kernel {:?} incompatible with batch {n} / {ci} channels", w.shape()));
            }
            Ok((co, kh, true))
        }
        s => Err(shape_err!("kernel must be rank 4 or 5, got {s:?}")),
    }
}

fn check_offsets(offsets: &Tensor, n: usize, k: usize, h: usize, w: usize) -> Result<()> {
    let want = [n, 2 * k * k, h, w];
    if offsets.shape() != want {
        return Err(shape_err!("offset field must be {want:?}, got {:?}", offsets.shape()));
    }
    Ok(())
}

/// Convolution whose columns are gathered either on the regular grid
/// (`offsets == None`) or by bilinear sampling at displaced taps. The kernel
/// is shared `(co,ci,k,k)` or per-sample `(n,co,ci,k,k)`.
pub(crate) fn sampled_conv_forward(x: &Tensor, w: &Tensor, offsets: Option<&Tensor>) -> Result<Tensor> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, k, per_sample) = sampled_kernel(w, n, ci)?;
    if let Some(off) = offsets {
        check_offsets(off, n, k, h, wd)?;
    }
    let g = ConvGeom { c: ci, h, w: wd, k };
    let p = g.pixels();
    let j = g.col_rows();
    let mut cols = vec![0.0; j * p];
    let mut out = vec![0.0; n * co * p];
    for b in 0..n {
        match offsets {
            Some(off) => SampleTable::new(off.outer_slice(b), g).gather(x.outer_slice(b), &mut cols),
            None => im2col(x.outer_slice(b), g, &mut cols),
        }
        let wb = if per_sample { w.outer_slice(b) } else { w.data() };
        gemm(MatView::row_major(wb, co, j), &cols, p, &mut out[b * co * p..(b + 1) * co * p], false);
    }
    Tensor::new(vec![n, co, h, wd], out)
}

/// Gradients of [`sampled_conv_forward`] wrt `(x, w, offsets)`; entries are
/// computed only where requested.
pub(crate) struct SampledConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub offsets: Option<Tensor>,
}

pub(crate) fn sampled_conv_backward(
    x: &Tensor,
    w: &Tensor,
    offsets: Option<&Tensor>,
    gy: &Tensor,
    need: [bool; 3],
) -> Result<SampledConvGrads> {
    let (n, ci, h, wd) = x.dims4()?;
    let (co, k, per_sample) = sampled_kernel(w, n, ci)?;
    if gy.shape() != [n, co, h, wd] {
        return Err(shape_err!("output gradient {:?} does not match output", gy.shape()));
    }
    let g = ConvGeom { c: ci, h, w: wd, k };
    let p = g.pixels();
    let j = g.col_rows();
    let [need_x, need_w, need_off] = need;
    let need_off = need_off && offsets.is_some();
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut doff = if need_off { offsets.map(|o| vec![0.0; o.len()]) } else { None };
    let mut cols = vec![0.0; j * p];
    let mut dcols = vec![0.0; j * p];
    for b in 0..n {
        let xb = x.outer_slice(b);
        let gb = gy.outer_slice(b);
        let table = offsets.map(|o| SampleTable::new(o.outer_slice(b), g));
        if let Some(dw) = dw.as_mut() {
            match &table {
                Some(t) => t.gather(xb, &mut cols),
                None => im2col(xb, g, &mut cols),
            }
            let cols_t = transpose(&cols, j, p);
            let gm = MatView::row_major(gb, co, p);
            if per_sample {
                gemm(gm, &cols_t, j, &mut dw[b * co * j..(b + 1) * co * j], false);
            } else {
                gemm(gm, &cols_t, j, dw, b > 0);
            }
        }
        if need_x || need_off {
            let wb = if per_sample { w.outer_slice(b) } else { w.data() };
            gemm(MatView::transposed(wb, j, co), gb, p, &mut dcols, false);
            let dxb = dx.as_mut().map(|d| &mut d[b * ci * p..(b + 1) * ci * p]);
            match &table {
                Some(t) => {
                    let per = 2 * g.taps() * p;
                    let doffb = doff.as_mut().map(|d| &mut d[b * per..(b + 1) * per]);
                    t.scatter(xb, &dcols, dxb, doffb);
                }
                None => {
                    if let Some(dxb) = dxb {
                        col2im(&dcols, g, dxb);
                    }
                }
            }
        }
    }
    Ok(SampledConvGrads {
        x: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        w: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        offsets: match (doff, offsets) {
            (Some(d), Some(o)) => Some(Tensor::new(o.shape().to_vec(), d)?),
            _ => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_order_exactly() {
        let (rows, inner, cols) = (7, 5, 9);
        let a: Vec<f64> = (0..rows * inner).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..inner * cols).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; rows * cols];
        gemm(MatView::row_major(&a, rows, inner), &b, cols, &mut out, false);
        for r in 0..rows {
            for c in 0..cols {
                let mut acc = 0.0;
                for s in 0..inner {
                    acc += a[r * inner + s] * b[s * cols + c];
                }
                assert_eq!(out[r * cols + c], acc);
            }
        }
        let at = transpose(&a, rows, inner);
        let mut out_t = vec![0.0; rows * cols];
        gemm(MatView::transposed(&at, rows, inner), &b, cols, &mut out_t, false);
        assert_eq!(out, out_t);
    }

    #[test]
    fn sample_table_zero_offsets_matches_im2col() {
        let g = ConvGeom { c: 2, h: 4, w: 5, k: 3 };
        let x: Vec<f64> = (0..g.c * g.pixels()).map(|v| v as f64 - 17.5).collect();
        let mut a = vec![0.0; g.col_rows() * g.pixels()];
        let mut b = vec![1.0; g.col_rows() * g.pixels()];
        im2col(&x, g, &mut a);
        SampleTable::new(&vec![0.0; 2 * g.taps() * g.pixels()], g).gather(&x, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn neighbourhood_zero_padding() {
        let n = Neighbourhood::at(-5.0, -5.0, 3, 3);
        assert_eq!(n.weight, [0.0; 4]);
    }
}
