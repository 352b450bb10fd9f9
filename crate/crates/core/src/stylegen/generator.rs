use super::{check_rows, dense, init_params, param_count, scaled, Bound, GeneratorConfig, Params, LRELU_SLOPE};
use crate::autodiff::{Tape, Var};
use crate::conv::{modulated_conv, DEMOD_EPS};
use crate::deform::{mtm_conv, MtmVars, OffsetField};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    /// When false every MTM layer samples with zero offsets.
    pub offsets_enabled: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { offsets_enabled: true }
    }
}

/// Taped generator output with the per-layer offsets and conv0 main styles.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub image: Var,
    pub offsets: Vec<(String, Var)>,
    pub main_styles: Vec<(String, Var)>,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub image: Tensor,
    pub offsets: Vec<(String, OffsetField)>,
    pub main_styles: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: Params,
}

impl Generator {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.param_specs(), seed)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a generator from the `g.*` entries of a parameter map.
    pub fn from_params(params: &Params) -> Result<Self> {
        let own: Params = params
            .iter()
            .filter(|(k, _)| k.starts_with("g."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let config = GeneratorConfig::infer(&own)?;
        Ok(Self { config, params: own })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params, "g.")
    }

    /// Parameters of the offset branches (heads and their style affines).
    pub fn offset_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.contains(".offset."))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Names of the MTM layers, e.g. `g.b8.conv0`.
    pub fn mtm_layers(&self) -> Vec<String> {
        self.config
            .resolutions()
            .into_iter()
            .filter(|&r| self.config.uses_mtm(r))
            .map(|r| format!("g.b{r}.conv0"))
            .collect()
    }

    /// `(n, z_dim)` latents to `(n, w_dim)`.
    pub fn mapping(&self, z: &Tensor) -> Result<Tensor> {
        check_rows(z, self.config.z_dim, "latent batch")?;
        let mut tape = Tape::no_grad();
        let b = Bound::new(&mut tape, &self.params, false);
        let zv = tape.constant(z.clone());
        let w = mapping_var(&mut tape, &b, zv)?;
        Ok(tape.value(w)?.clone())
    }

    /// One synthesis block on plain tensors. `use_mtm` requires the block to
    /// own MTM parameters.
    pub fn synthesis_block(&self, res: usize, feat: &Tensor, w: &Tensor, use_mtm: bool) -> Result<Tensor> {
        if use_mtm && !self.config.uses_mtm(res) {
            return Err(Error::Contract(format!("block {res} has no MTM layer")));
        }
        check_rows(w, self.config.w_dim, "w batch")?;
        let mut tape = Tape::no_grad();
        let b = Bound::new(&mut tape, &self.params, false);
        let fv = tape.constant(feat.clone());
        let wv = tape.constant(w.clone());
        let ol = self.offset_latent(&mut tape, wv, None)?;
        let out = synthesis_block_var(&mut tape, &b, res, fv, wv, ol, use_mtm, SynthOptions::default())?;
        Ok(tape.value(out.0)?.clone())
    }

    /// Images in `[-1, 1]` for `(n, z_dim)` latents.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.generate_full(z, None, SynthOptions::default())?.image)
    }

    /// Images plus diagnostics. `motion` is `(n, m_dim)` and only accepted
    /// in video mode; video generators without it use zero motion.
    pub fn generate_full(&self, z: &Tensor, motion: Option<&Tensor>, opts: SynthOptions) -> Result<GenOutput> {
        let n = check_rows(z, self.config.z_dim, "latent batch")?;
        let mut tape = Tape::no_grad();
        let b = Bound::new(&mut tape, &self.params, false);
        let zv = tape.constant(z.clone());
        let mv = match motion {
            Some(m) => {
                if check_rows(m, self.config.m_dim, "motion batch")? != n {
                    return Err(shape_err!("motion batch does not match {n} latents"));
                }
                Some(tape.constant(m.clone()))
            }
            None => None,
        };
        let out = synthesize(&mut tape, &b, &self.config, zv, mv, opts)?;
        let k = self.config.kernel;
        let mut offsets = vec![];
        for (name, v) in &out.offsets {
            offsets.push((name.clone(), OffsetField::new(tape.value(*v)?.clone(), k)?));
        }
        let mut main_styles = vec![];
        for (name, v) in &out.main_styles {
            main_styles.push((name.clone(), tape.value(*v)?.clone()));
        }
        Ok(GenOutput {
            image: tape.value(out.image)?.clone(),
            offsets,
            main_styles,
        })
    }

    /// Clips for `(B, z_dim)` content latents and one `(T, m_dim)` motion
    /// sequence per clip; frames come back clip-major as `(B*T, c, R, R)`.
    pub fn generate_video(&self, z: &Tensor, motion: &[Tensor], opts: SynthOptions) -> Result<GenOutput> {
        if !self.config.video {
            return Err(Error::Contract("generator was not built for video".into()));
        }
        let clips = check_rows(z, self.config.z_dim, "latent batch")?;
        if motion.len() != clips {
            return Err(shape_err!("{} motion sequences for {clips} clips", motion.len()));
        }
        let t = motion.first().map_or(0, |m| m.shape()[0]);
        if t == 0 {
            return Err(Error::Contract("a clip needs at least one frame".into()));
        }
        let mut rows = Vec::with_capacity(clips * t);
        let mut mdata = Vec::with_capacity(clips * t * self.config.m_dim);
        for (c, m) in motion.iter().enumerate() {
            if check_rows(m, self.config.m_dim, "motion sequence")? != t {
                return Err(shape_err!("all clips must have {t} frames"));
            }
            mdata.extend_from_slice(m.data());
            rows.extend(std::iter::repeat_n(c, t));
        }
        let zrep = gather_rows(z, &rows)?;
        let m = Tensor::new(vec![clips * t, self.config.m_dim], mdata)?;
        self.generate_full(&zrep, Some(&m), opts)
    }

    fn offset_latent(&self, tape: &mut Tape, w: Var, motion: Option<Var>) -> Result<Var> {
        offset_latent(tape, &self.config, w, motion)
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(t.clone());
    let g = tape.gather(v, rows)?;
    Ok(tape.value(g)?.clone())
}

/// Smoothed random walk `m_0 ~ N(0, I)`, `m_{t+1} = 0.9 m_t + 0.1 xi_t`, as
/// a `(frames, m_dim)` tensor.
pub fn motion_codes(rng: &mut Rng, frames: usize, m_dim: usize) -> Result<Tensor> {
    if frames == 0 || m_dim == 0 {
        return Err(shape_err!("motion codes need frames >= 1 and m_dim >= 1"));
    }
    let mut data = Vec::with_capacity(frames * m_dim);
    let mut m: Vec<f64> = (0..m_dim).map(|_| rng.normal()).collect();
    data.extend_from_slice(&m);
    for _ in 1..frames {
        for v in m.iter_mut() {
            *v = 0.9 * *v + 0.1 * rng.normal();
        }
        data.extend_from_slice(&m);
    }
    Tensor::new(vec![frames, m_dim], data)
}

pub(crate) fn mapping_var(tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
    let h = dense(tape, z, b.get("g.mapping.fc0.weight")?, b.get("g.mapping.fc0.bias")?)?;
    let h = tape.leaky_relu(h, LRELU_SLOPE)?;
    let w = dense(tape, h, b.get("g.mapping.fc1.weight")?, b.get("g.mapping.fc1.bias")?)?;
    tape.leaky_relu(w, LRELU_SLOPE)
}

fn offset_latent(tape: &mut Tape, cfg: &GeneratorConfig, w: Var, motion: Option<Var>) -> Result<Var> {
    if !cfg.video {
        if motion.is_some() {
            return Err(Error::Contract("motion codes given to an image generator".into()));
        }
        return Ok(w);
    }
    let m = match motion {
        Some(m) => m,
        None => {
            let n = tape.value(w)?.shape()[0];
            tape.constant(Tensor::zeros(&[n, cfg.m_dim]))
        }
    };
    tape.concat(w, m)
}

/// Upsample (except at 4x4), conv0 (MTM or modulated), lrelu, conv1
/// (modulated), lrelu. Returns the features, the offsets used by an MTM
/// conv0, and conv0's main styles.
#[allow(clippy::too_many_arguments)]
pub(crate) fn synthesis_block_var(
    tape: &mut Tape,
    b: &Bound,
    res: usize,
    feat: Var,
    w: Var,
    offset_latent: Var,
    use_mtm: bool,
    opts: SynthOptions,
) -> Result<(Var, Option<Var>, Var)> {
    let x = if res > 4 { tape.upsample2x(feat)? } else { feat };
    let p0 = format!("g.b{res}.conv0");
    let s0 = dense(tape, w, b.get(&format!("{p0}.affine.weight"))?, b.get(&format!("{p0}.affine.bias"))?)?;
    let w0 = b.get(&format!("{p0}.weight"))?;
    let bias0 = b.get(&format!("{p0}.bias"))?;
    let (y, off) = if use_mtm {
        let os = dense(
            tape,
            offset_latent,
            b.get(&format!("{p0}.offset.affine.weight"))?,
            b.get(&format!("{p0}.offset.affine.bias"))?,
        )?;
        let vars = MtmVars {
            weight: w0,
            bias: Some(bias0),
            head_weight: b.get(&format!("{p0}.offset.weight"))?,
            head_bias: Some(b.get(&format!("{p0}.offset.bias"))?),
        };
        let (y, off) = mtm_conv(tape, x, &vars, s0, os, opts.offsets_enabled)?;
        (y, Some(off))
    } else {
        (modulated_conv(tape, x, w0, s0, Some(bias0), DEMOD_EPS)?, None)
    };
    let y = tape.leaky_relu(y, LRELU_SLOPE)?;
    let p1 = format!("g.b{res}.conv1");
    let s1 = dense(tape, w, b.get(&format!("{p1}.affine.weight"))?, b.get(&format!("{p1}.affine.bias"))?)?;
    let y = modulated_conv(tape, y, b.get(&format!("{p1}.weight"))?, s1, Some(b.get(&format!("{p1}.bias"))?), DEMOD_EPS)?;
    let y = tape.leaky_relu(y, LRELU_SLOPE)?;
    Ok((y, off, s0))
}

/// Full generator on a tape: mapping, constant input, blocks, 1x1 toRGB,
/// tanh.
pub fn synthesize(tape: &mut Tape, b: &Bound, cfg: &GeneratorConfig, z: Var, motion: Option<Var>, opts: SynthOptions) -> Result<SynthOutput> {
    let w = mapping_var(tape, b, z)?;
    let n = tape.value(z)?.shape()[0];
    let ol = offset_latent(tape, cfg, w, motion)?;
    let mut x = tape.gather(b.get("g.const")?, &vec![0; n])?;
    let mut offsets = vec![];
    let mut main_styles = vec![];
    for res in cfg.resolutions() {
        let (y, off, s0) = synthesis_block_var(tape, b, res, x, w, ol, cfg.uses_mtm(res), opts)?;
        if let Some(off) = off {
            offsets.push((format!("g.b{res}.conv0"), off));
        }
        main_styles.push((format!("g.b{res}.conv0"), s0));
        x = y;
    }
    let rgb_w = b.get("g.torgb.weight")?;
    let c = tape.value(rgb_w)?.shape()[1];
    let ws = scaled(tape, rgb_w, c)?;
    let y = tape.conv2d(x, ws)?;
    let y = tape.add_channel_bias(y, b.get("g.torgb.bias")?)?;
    let image = tape.tanh(y)?;
    Ok(SynthOutput {
        image,
        offsets,
        main_styles,
    })
}
