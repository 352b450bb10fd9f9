//! Adversarial training with the non-saturating logistic loss, R1, Adam and
//! an EMA copy of the generator.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::deform::OffsetField;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{offset_stats, rffd, FeatureExtractor, MIN_SET_SIZE};
use crate::rng::{randn, Rng};
use crate::stylegen::{
    discriminate_var, motion_codes, synthesize, Bound, Discriminator, DiscriminatorConfig, GenOutput, Generator,
    GeneratorConfig, Params, SynthOptions,
};
use crate::tensor::Tensor;

/// Generation is split into chunks of this many samples.
pub const GEN_CHUNK: usize = 64;

pub const CSV_HEADER: &str = "step,loss_g,loss_d,r1,rffd,offset_mean_abs,offset_max_abs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Images per step; in video mode this counts frames, so a step sees
    /// `batch / frames` clips.
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub r1_gamma: f64,
    pub r1_every: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Generated and real images per RFFD evaluation.
    pub eval_samples: usize,
    pub video_mode: bool,
    pub frames: usize,
    /// Adds a discriminator on channel-stacked consecutive frame pairs.
    pub temporal_pairs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            steps: 1000,
            lr: 2.5e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            r1_gamma: 1.0,
            r1_every: 1,
            ema_decay: 0.995,
            seed: 0,
            eval_every: 100,
            eval_samples: 512,
            video_mode: false,
            frames: 4,
            temporal_pairs: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return bad(format!("r1_gamma must be non-negative, got {}", self.r1_gamma));
        }
        if self.r1_every == 0 {
            return bad("r1_every must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.eval_samples < MIN_SET_SIZE {
            return bad(format!("eval_samples must be at least {MIN_SET_SIZE}, got {}", self.eval_samples));
        }
        if self.video_mode {
            if self.frames == 0 || !self.batch.is_multiple_of(self.frames) {
                return bad(format!("batch {} must be a positive multiple of frames {}", self.batch, self.frames));
            }
            if self.temporal_pairs && self.frames < 2 {
                return bad("temporal pairs need at least 2 frames".into());
            }
        }
        Ok(())
    }

    /// Checks that the generator agrees on video mode and clip length.
    pub fn check_generator(&self, g: &GeneratorConfig) -> Result<()> {
        if self.video_mode != g.video {
            return Err(Error::Contract(format!(
                "train video_mode={} but generator video={}",
                self.video_mode, g.video
            )));
        }
        if self.video_mode && self.frames != g.frames {
            return Err(Error::Contract(format!(
                "train frames={} but generator frames={}",
                self.frames, g.frames
            )));
        }
        Ok(())
    }

    fn frames_per_clip(&self) -> usize {
        if self.video_mode {
            self.frames
        } else {
            1
        }
    }
}

/// Mean of `softplus(-logit)`.
pub fn loss_g_nonsat(fake_logits: &[f64]) -> f64 {
    mean(fake_logits.iter().map(|&t| softplus(-t)))
}

/// Mean `softplus(-real)` plus mean `softplus(fake)`.
pub fn loss_d(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    mean(real_logits.iter().map(|&t| softplus(-t))) + mean(fake_logits.iter().map(|&t| softplus(t)))
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    it.fold(0.0, |a, v| a + v) / n as f64
}

pub fn loss_g_var(tape: &mut Tape, fake_logits: Var) -> Result<Var> {
    let neg = tape.scale(fake_logits, -1.0)?;
    let sp = tape.softplus(neg)?;
    tape.mean(sp)
}

pub fn loss_d_var(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let neg = tape.scale(real_logits, -1.0)?;
    let a = tape.softplus(neg)?;
    let a = tape.mean(a)?;
    let b = tape.softplus(fake_logits)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

/// `(gamma/2) * mean_n sum (dD/dx)^2` for logits computed from the leaf `x`.
/// The input gradient is built with `create_graph`, so the penalty can be
/// differentiated again with respect to the discriminator parameters.
pub fn r1_penalty_with(tape: &mut Tape, x: Var, logits: Var, gamma: f64) -> Result<Var> {
    let n = tape.value(x)?.shape()[0];
    let total = tape.sum(logits)?;
    let grads = tape.backward(total, &[x], true)?;
    let g = grads
        .get(x)
        .ok_or_else(|| Error::Tape("input gradient missing".into()))?;
    if !tape.value(g)?.is_finite() {
        return Err(Error::Numeric("non-finite discriminator input gradient".into()));
    }
    let sq = tape.mul(g, g)?;
    let s = tape.sum(sq)?;
    tape.scale(s, gamma / (2.0 * n as f64))
}

/// R1 penalty of `disc` on `real` and its gradient for every discriminator
/// parameter.
pub fn r1_penalty(disc: &Discriminator, real: &Tensor, gamma: f64) -> Result<(f64, Params)> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &disc.params, true);
    let x = tape.leaf(real.clone());
    let logits = discriminate_var(&mut tape, &b, &disc.config, x)?;
    let p = r1_penalty_with(&mut tape, x, logits, gamma)?;
    let value = tape.value(p)?.item()?;
    let grads = grads_by_name(&mut tape, p, &b)?;
    Ok((value, grads))
}

fn grads_by_name(tape: &mut Tape, loss: Var, b: &Bound) -> Result<Params> {
    let names = b.names();
    let vars = b.vars();
    let grads = tape.backward(loss, &vars, false)?;
    let mut out = Params::new();
    for (name, v) in names.into_iter().zip(vars) {
        let g = grads
            .get(v)
            .ok_or_else(|| Error::Tape(format!("no gradient for {name}")))?;
        out.insert(name, tape.value(g)?.clone());
    }
    Ok(out)
}

/// Adam with bias correction, updating parameters in sorted-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`. Every parameter needs a
    /// gradient of the same shape.
    pub fn update(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
            return Err(shape_err!("gradient for unknown parameter {extra}"));
        }
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| shape_err!("missing gradient for {name}"))?;
            p.expect_same_shape(g)?;
        }
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((pi, mi), vi), &gi) in it {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `ema = decay * ema + (1 - decay) * current`.
pub fn ema_update(ema: &mut Params, current: &Params, decay: f64) -> Result<()> {
    if ema.len() != current.len() {
        return Err(shape_err!("EMA has {} tensors, model has {}", ema.len(), current.len()));
    }
    for (name, e) in ema.iter_mut() {
        let p = current
            .get(name)
            .ok_or_else(|| shape_err!("EMA parameter {name} missing from model"))?;
        e.expect_same_shape(p)?;
        for (ei, &pi) in e.data_mut().iter_mut().zip(p.data()) {
            *ei = decay * *ei + (1.0 - decay) * pi;
        }
    }
    Ok(())
}

/// Training images and the held-out reals used for RFFD. In video mode both
/// hold whole clips, stored clip-major.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub reals: Tensor,
    pub held_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub generator: Generator,
    pub ema: Params,
    /// Image discriminator (`d.*`) and, in video mode, temporal (`dt.*`)
    /// parameters in one map.
    pub disc: Params,
    pub disc_config: DiscriminatorConfig,
    pub temporal_config: Option<DiscriminatorConfig>,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl TrainState {
    pub fn init(gcfg: &GeneratorConfig, tcfg: &TrainConfig) -> Result<Self> {
        tcfg.validate()?;
        tcfg.check_generator(gcfg)?;
        let generator = Generator::init(gcfg.clone(), tcfg.seed)?;
        let disc_config = DiscriminatorConfig::image(gcfg);
        let mut disc = Discriminator::init(disc_config.clone(), tcfg.seed)?.params;
        let temporal_config = if tcfg.video_mode && tcfg.temporal_pairs {
            let cfg = DiscriminatorConfig::temporal(gcfg);
            disc.extend(Discriminator::init(cfg.clone(), tcfg.seed)?.params);
            Some(cfg)
        } else {
            None
        };
        Ok(Self {
            step: 0,
            ema: generator.params.clone(),
            generator,
            disc,
            disc_config,
            temporal_config,
            opt_g: Adam::from_config(tcfg),
            opt_d: Adam::from_config(tcfg),
        })
    }

    /// Generator, discriminator(s), all in one map.
    pub fn checkpoint_params(&self) -> Params {
        let mut out = self.generator.params.clone();
        out.extend(self.disc.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    pub fn ema_generator(&self) -> Generator {
        Generator {
            config: self.generator.config.clone(),
            params: self.ema.clone(),
        }
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_g: f64,
    pub loss_d: f64,
    /// Zero on steps without R1.
    pub r1: f64,
}

/// One metrics CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: f64,
    pub rffd: f64,
    pub offset_mean_abs: f64,
    pub offset_max_abs: f64,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss_g, self.loss_d, self.r1, self.rffd, self.offset_mean_abs, self.offset_max_abs
        )
    }
}

/// Latents for `clips` clips of `frames` frames, expanded to one row per
/// frame. Motion codes are drawn only for video generators.
pub fn sample_latents(rng: &mut Rng, cfg: &GeneratorConfig, clips: usize, frames: usize) -> Result<(Tensor, Option<Tensor>)> {
    let z = randn(&[clips, cfg.z_dim], rng)?;
    if !cfg.video {
        return Ok((z, None));
    }
    let mut zrows = Vec::with_capacity(clips * frames * cfg.z_dim);
    let mut mrows = Vec::with_capacity(clips * frames * cfg.m_dim);
    for c in 0..clips {
        let m = motion_codes(rng, frames, cfg.m_dim)?;
        for _ in 0..frames {
            zrows.extend_from_slice(z.outer_slice(c));
        }
        mrows.extend_from_slice(m.data());
    }
    Ok((
        Tensor::new(vec![clips * frames, cfg.z_dim], zrows)?,
        Some(Tensor::new(vec![clips * frames, cfg.m_dim], mrows)?),
    ))
}

/// Runs the generator in chunks of [`GEN_CHUNK`] rows and concatenates the
/// images; offset fields stay per chunk.
pub fn generate_chunked(g: &Generator, z: &Tensor, motion: Option<&Tensor>, opts: SynthOptions) -> Result<GenOutput> {
    let n = z.shape()[0];
    let mut images = vec![];
    let mut offsets = vec![];
    let mut main_styles = vec![];
    let mut start = 0;
    while start < n {
        let len = GEN_CHUNK.min(n - start);
        let zc = z.batch_range(start, len)?;
        let mc = motion.map(|m| m.batch_range(start, len)).transpose()?;
        let out = g.generate_full(&zc, mc.as_ref(), opts)?;
        images.push(out.image);
        offsets.extend(out.offsets);
        main_styles.extend(out.main_styles);
        start += len;
    }
    if images.is_empty() {
        return Err(Error::Contract("nothing to generate".into()));
    }
    Ok(GenOutput {
        image: Tensor::concat_batch(&images)?,
        offsets,
        main_styles,
    })
}

/// Rows of `t` at `indices`, in order.
pub fn select_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let mut data = Vec::with_capacity(indices.len() * t.len() / n.max(1));
    for &i in indices {
        if i >= n {
            return Err(shape_err!("row {i} out of range for {n} rows"));
        }
        data.extend_from_slice(t.outer_slice(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// Indices of frames `t` and `t + 1` for every consecutive pair of every
/// clip.
fn pair_indices(clips: usize, frames: usize) -> (Vec<usize>, Vec<usize>) {
    let mut a = vec![];
    let mut b = vec![];
    for c in 0..clips {
        for t in 0..frames.saturating_sub(1) {
            a.push(c * frames + t);
            b.push(c * frames + t + 1);
        }
    }
    (a, b)
}

fn frame_pairs(tape: &mut Tape, frames: Var, clips: usize, t: usize) -> Result<Var> {
    let (ia, ib) = pair_indices(clips, t);
    let a = tape.gather(frames, &ia)?;
    let b = tape.gather(frames, &ib)?;
    tape.concat(a, b)
}

/// Stateful training driver. [`train`] wraps it with evaluation and CSV
/// rows.
pub struct Trainer<'a> {
    pub gcfg: GeneratorConfig,
    pub tcfg: TrainConfig,
    pub state: TrainState,
    data: &'a TrainData,
    rng: Rng,
    extractor: FeatureExtractor,
    eval_latents: (Tensor, Option<Tensor>),
    probe: Probe,
}

/// Fixed batch used for the loss columns of the metrics CSV.
struct Probe {
    real: Tensor,
    z: Tensor,
    motion: Option<Tensor>,
}

impl<'a> Trainer<'a> {
    pub fn new(gcfg: &GeneratorConfig, tcfg: &TrainConfig, data: &'a TrainData) -> Result<Self> {
        let state = TrainState::init(gcfg, tcfg)?;
        let t = tcfg.frames_per_clip();
        for (what, set) in [("training", &data.reals), ("held-out", &data.held_out)] {
            let (n, c, h, w) = set.dims4()?;
            if c != gcfg.image_channels || h != gcfg.resolution || w != gcfg.resolution {
                return Err(shape_err!(
                    "{what} images are {c}x{h}x{w}, generator makes {}x{r}x{r}",
                    gcfg.image_channels,
                    r = gcfg.resolution
                ));
            }
            if n == 0 || n % t != 0 {
                return Err(Error::Contract(format!("{what} set of {n} frames is not whole {t}-frame clips")));
            }
        }
        if data.held_out.shape()[0] < MIN_SET_SIZE {
            return Err(Error::Contract(format!("held-out set needs at least {MIN_SET_SIZE} images")));
        }
        let eval_clips = tcfg.eval_samples.div_ceil(t);
        let eval_latents = sample_latents(&mut Rng::new(Rng::derive_seed(tcfg.seed, "eval")), gcfg, eval_clips, t)?;
        let mut probe_rng = Rng::new(Rng::derive_seed(tcfg.seed, "probe"));
        let clips = tcfg.batch / t;
        let real = real_batch(&mut probe_rng, &data.reals, clips, t)?;
        let (z, motion) = sample_latents(&mut probe_rng, gcfg, clips, t)?;
        Ok(Self {
            gcfg: gcfg.clone(),
            tcfg: tcfg.clone(),
            state,
            data,
            rng: Rng::new(Rng::derive_seed(tcfg.seed, "train")),
            extractor: FeatureExtractor::standard(gcfg.resolution)?,
            eval_latents,
            probe: Probe { real, z, motion },
        })
    }

    fn clips(&self) -> usize {
        self.tcfg.batch / self.tcfg.frames_per_clip()
    }

    /// One discriminator step followed by one generator step.
    pub fn step(&mut self) -> Result<StepLosses> {
        let t = self.tcfg.frames_per_clip();
        let clips = self.clips();
        let step = self.state.step;

        // Discriminator.
        let real = real_batch(&mut self.rng, &self.data.reals, clips, t)?;
        let (z, m) = sample_latents(&mut self.rng, &self.gcfg, clips, t)?;
        let fake = self.state.generator.generate_full(&z, m.as_ref(), SynthOptions::default())?.image;
        let with_r1 = step.is_multiple_of(self.tcfg.r1_every) && self.tcfg.r1_gamma > 0.0;
        let mut tape = Tape::new();
        let bd = Bound::new(&mut tape, &self.state.disc, true);
        let d = self.d_losses(&mut tape, &bd, &real, &fake, with_r1)?;
        let (loss_d, r1) = (tape.value(d.loss)?.item()?, d.r1_value(&tape)?);
        if !loss_d.is_finite() || !r1.is_finite() {
            return Err(self.diagnose("discriminator loss", &real, &fake));
        }
        let total = match d.r1 {
            Some(r) => {
                let r = tape.scale(r, self.tcfg.r1_every as f64)?;
                tape.add(d.loss, r)?
            }
            None => d.loss,
        };
        let grads = grads_by_name(&mut tape, total, &bd)?;
        self.state.opt_d.update(&mut self.state.disc, &grads)?;

        // Generator.
        let (z, m) = sample_latents(&mut self.rng, &self.gcfg, clips, t)?;
        let mut tape = Tape::new();
        let bg = Bound::new(&mut tape, &self.state.generator.params, true);
        let (loss, image) = self.g_loss(&mut tape, &bg, &z, m.as_ref())?;
        let loss_g = tape.value(loss)?.item()?;
        if !loss_g.is_finite() {
            let fake = tape.value(image)?.clone();
            return Err(self.diagnose("generator loss", &real, &fake));
        }
        let grads = grads_by_name(&mut tape, loss, &bg)?;
        self.state.opt_g.update(&mut self.state.generator.params, &grads)?;
        ema_update(&mut self.state.ema, &self.state.generator.params, self.tcfg.ema_decay)?;
        self.state.step += 1;
        Ok(StepLosses { loss_g, loss_d, r1 })
    }

    fn d_losses(&self, tape: &mut Tape, bd: &Bound, real: &Tensor, fake: &Tensor, with_r1: bool) -> Result<DLosses> {
        let t = self.tcfg.frames_per_clip();
        let clips = real.shape()[0] / t;
        let gamma = self.tcfg.r1_gamma;
        let x = if with_r1 {
            tape.leaf(real.clone())
        } else {
            tape.constant(real.clone())
        };
        let real_logits = discriminate_var(tape, bd, &self.state.disc_config, x)?;
        let mut r1 = if with_r1 {
            Some(r1_penalty_with(tape, x, real_logits, gamma)?)
        } else {
            None
        };
        let f = tape.constant(fake.clone());
        let fake_logits = discriminate_var(tape, bd, &self.state.disc_config, f)?;
        let mut loss = loss_d_var(tape, real_logits, fake_logits)?;
        if let Some(tc) = &self.state.temporal_config {
            let (ia, ib) = pair_indices(clips, t);
            let rp = concat_channels(&select_rows(real, &ia)?, &select_rows(real, &ib)?)?;
            let xp = if with_r1 { tape.leaf(rp) } else { tape.constant(rp) };
            let rl = discriminate_var(tape, bd, tc, xp)?;
            if with_r1 {
                let rt = r1_penalty_with(tape, xp, rl, gamma)?;
                r1 = Some(match r1 {
                    Some(r) => tape.add(r, rt)?,
                    None => rt,
                });
            }
            let fv = tape.constant(fake.clone());
            let fp = frame_pairs(tape, fv, clips, t)?;
            let fl = discriminate_var(tape, bd, tc, fp)?;
            let lt = loss_d_var(tape, rl, fl)?;
            loss = tape.add(loss, lt)?;
        }
        Ok(DLosses { loss, r1 })
    }

    fn g_loss(&self, tape: &mut Tape, bg: &Bound, z: &Tensor, m: Option<&Tensor>) -> Result<(Var, Var)> {
        let t = self.tcfg.frames_per_clip();
        let clips = z.shape()[0] / t;
        let bd = Bound::new(tape, &self.state.disc, false);
        let zv = tape.constant(z.clone());
        let mv = m.map(|m| tape.constant(m.clone()));
        let out = synthesize(tape, bg, &self.gcfg, zv, mv, SynthOptions::default())?;
        let logits = discriminate_var(tape, &bd, &self.state.disc_config, out.image)?;
        let mut loss = loss_g_var(tape, logits)?;
        if let Some(tc) = &self.state.temporal_config {
            let fp = frame_pairs(tape, out.image, clips, t)?;
            let fl = discriminate_var(tape, &bd, tc, fp)?;
            let lt = loss_g_var(tape, fl)?;
            loss = tape.add(loss, lt)?;
        }
        Ok((loss, out.image))
    }

    /// Probe-batch losses of the current networks plus RFFD and offset
    /// statistics of the EMA generator.
    pub fn evaluate(&self) -> Result<EvalRow> {
        let ema = self.state.ema_generator();
        let (z, m) = &self.eval_latents;
        let out = generate_chunked(&ema, z, m.as_ref(), SynthOptions::default())?;
        let samples = out.image.batch_range(0, self.tcfg.eval_samples)?;
        let rffd = rffd(&self.extractor, &samples, &self.data.held_out)?;
        let fields: Vec<OffsetField> = out.offsets.into_iter().map(|(_, f)| f).collect();
        let (offset_mean_abs, offset_max_abs) = if fields.is_empty() {
            (0.0, 0.0)
        } else {
            let s = offset_stats(&fields)?;
            (s.mean_abs, s.max_abs)
        };

        let probe = &self.probe;
        let fake = self.state.generator.generate_full(&probe.z, probe.motion.as_ref(), SynthOptions::default())?.image;
        let mut tape = Tape::new();
        let bd = Bound::new(&mut tape, &self.state.disc, false);
        let with_r1 = self.tcfg.r1_gamma > 0.0;
        let d = self.d_losses(&mut tape, &bd, &probe.real, &fake, with_r1)?;
        let loss_d = tape.value(d.loss)?.item()?;
        let r1 = d.r1_value(&tape)?;
        let mut tape = Tape::no_grad();
        let bg = Bound::new(&mut tape, &self.state.generator.params, false);
        let (lg, _) = self.g_loss(&mut tape, &bg, &probe.z, probe.motion.as_ref())?;
        let loss_g = tape.value(lg)?.item()?;
        Ok(EvalRow {
            step: self.state.step,
            loss_g,
            loss_d,
            r1,
            rffd,
            offset_mean_abs,
            offset_max_abs,
        })
    }

    fn diagnose(&self, what: &str, real: &Tensor, fake: &Tensor) -> Error {
        let mut s = format!("non-finite {what} at step {}\n", self.state.step);
        for (name, t) in [("real batch", real), ("fake batch", fake)] {
            let (lo, hi, sum) = t
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(a, b, c), &v| (a.min(v), b.max(v), c + v));
            let _ = writeln!(s, "{name}: shape {:?} min {lo} max {hi} mean {}", t.shape(), sum / t.len() as f64);
        }
        s.push_str("parameter norms:\n");
        for (name, t) in self.state.generator.params.iter().chain(&self.state.disc) {
            let _ = writeln!(s, "  {name} {}", t.norm());
        }
        Error::Numeric(s)
    }
}

struct DLosses {
    loss: Var,
    r1: Option<Var>,
}

impl DLosses {
    fn r1_value(&self, tape: &Tape) -> Result<f64> {
        match self.r1 {
            Some(r) => tape.value(r)?.item(),
            None => Ok(0.0),
        }
    }
}

fn real_batch(rng: &mut Rng, reals: &Tensor, clips: usize, frames: usize) -> Result<Tensor> {
    let available = reals.shape()[0] / frames;
    let mut rows = Vec::with_capacity(clips * frames);
    for _ in 0..clips {
        let c = rng.below(available);
        rows.extend((0..frames).map(|t| c * frames + t));
    }
    select_rows(reals, &rows)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.concat(av, bv)?;
    Ok(tape.value(c)?.clone())
}

/// Runs `tcfg.steps` steps, evaluating at step 0 and every `eval_every`
/// steps. `observer` sees each row with the state it was computed from and
/// may abort by returning an error.
pub fn train(
    gcfg: &GeneratorConfig,
    tcfg: &TrainConfig,
    data: &TrainData,
    observer: &mut dyn FnMut(&EvalRow, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<EvalRow>)> {
    let mut trainer = Trainer::new(gcfg, tcfg, data)?;
    let mut rows = vec![];
    loop {
        if trainer.state.step % tcfg.eval_every == 0 {
            let row = trainer.evaluate()?;
            observer(&row, &trainer.state)?;
            rows.push(row);
        }
        if trainer.state.step >= tcfg.steps {
            break;
        }
        trainer.step()?;
    }
    Ok((trainer.state, rows))
}

/// Header plus rows, LF-terminated.
pub fn metrics_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}
