//! Toy style-based generator and discriminator.
//!
//! Parameters live in name-keyed maps (`g.*` for the generator, `d.*` and
//! `dt.*` for the image and temporal discriminators). Weights are stored
//! unit-variance and scaled by `1/sqrt(fan_in)` when used.

mod discriminator;
pub(crate) mod generator;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::{randn, Rng};
use crate::tensor::Tensor;

pub use discriminator::{discriminate_var, Discriminator, DiscriminatorConfig};
pub use generator::{motion_codes, synthesize, GenOutput, Generator, SynthOptions, SynthOutput};

/// Named parameter tensors, iterated in sorted order.
pub type Params = BTreeMap<String, Tensor>;

pub const LRELU_SLOPE: f64 = 0.2;

/// Resolution groups for MTM placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Low,
    Mid,
    High,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Low, Group::Mid, Group::High];

    /// low = {4, 8}, mid = {16}, high = {32} and above.
    pub fn of_resolution(res: usize) -> Group {
        match res {
            0..=8 => Group::Low,
            9..=16 => Group::Mid,
            _ => Group::High,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Low => "low",
            Group::Mid => "mid",
            Group::High => "high",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Group::Low),
            "mid" => Ok(Group::Mid),
            "high" => Ok(Group::High),
            other => Err(Error::Contract(format!("unknown MTM group {other:?}"))),
        }
    }
}

/// Formats a group set as `low+mid`, or `none` when empty.
pub fn groups_label(groups: &BTreeSet<Group>) -> String {
    if groups.is_empty() {
        "none".to_string()
    } else {
        groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Final resolution; blocks run at 4, 8, ..., resolution.
    pub resolution: usize,
    /// Channel width of each block, lowest resolution first.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    pub w_dim: usize,
    pub m_dim: usize,
    pub mtm_groups: BTreeSet<Group>,
    /// Offset styles take `concat(w, m_t)` instead of `w`.
    pub video: bool,
    pub frames: usize,
    pub image_channels: usize,
    pub kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: vec![64; 4],
            z_dim: 64,
            w_dim: 64,
            m_dim: 16,
            mtm_groups: BTreeSet::new(),
            video: false,
            frames: 4,
            image_channels: 1,
            kernel: 3,
        }
    }
}

impl GeneratorConfig {
    /// Default dimensions at `resolution` with a flat channel width.
    pub fn flat(resolution: usize, channels: usize) -> Self {
        let mut c = Self {
            resolution,
            ..Self::default()
        };
        c.channels = vec![channels; c.resolutions().len()];
        c
    }

    pub fn with_groups(mut self, groups: &[Group]) -> Self {
        self.mtm_groups = groups.iter().copied().collect();
        self
    }

    pub fn resolutions(&self) -> Vec<usize> {
        let mut r = vec![];
        let mut res = 4;
        while res <= self.resolution {
            r.push(res);
            res *= 2;
        }
        r
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return bad(format!("resolution must be a power of two >= 4, got {}", self.resolution));
        }
        if self.channels.len() != self.resolutions().len() {
            return bad(format!(
                "{} channel widths for {} blocks",
                self.channels.len(),
                self.resolutions().len()
            ));
        }
        if self.channels.contains(&0) || self.z_dim == 0 || self.w_dim == 0 || self.image_channels == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.video && (self.m_dim == 0 || self.frames == 0) {
            return bad("video mode needs m_dim >= 1 and frames >= 1".into());
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    pub fn uses_mtm(&self, res: usize) -> bool {
        self.mtm_groups.contains(&Group::of_resolution(res))
    }

    pub fn offset_latent_dim(&self) -> usize {
        if self.video {
            self.w_dim + self.m_dim
        } else {
            self.w_dim
        }
    }

    /// Every generator parameter with its shape and initializer.
    pub fn param_specs(&self) -> BTreeMap<String, ParamSpec> {
        let mut m = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, init: Init| {
            m.insert(name, ParamSpec { shape, init });
        };
        let (z, w, k) = (self.z_dim, self.w_dim, self.kernel);
        put("g.mapping.fc0.weight".into(), vec![z, w], Init::Normal);
        put("g.mapping.fc0.bias".into(), vec![w], Init::Zeros);
        put("g.mapping.fc1.weight".into(), vec![w, w], Init::Normal);
        put("g.mapping.fc1.bias".into(), vec![w], Init::Zeros);
        put("g.const".into(), vec![1, self.channels[0], 4, 4], Init::Normal);
        let mut c_prev = self.channels[0];
        for (i, res) in self.resolutions().into_iter().enumerate() {
            let c = self.channels[i];
            for (conv, ci) in [("conv0", c_prev), ("conv1", c)] {
                let p = format!("g.b{res}.{conv}");
                put(format!("{p}.weight"), vec![c, ci, k, k], Init::Normal);
                put(format!("{p}.bias"), vec![c], Init::Zeros);
                put(format!("{p}.affine.weight"), vec![w, ci], Init::Normal);
                put(format!("{p}.affine.bias"), vec![ci], Init::Ones);
                if conv == "conv0" && self.uses_mtm(res) {
                    let o = 2 * k * k;
                    put(format!("{p}.offset.weight"), vec![o, ci, k, k], Init::Zeros);
                    put(format!("{p}.offset.bias"), vec![o], Init::Zeros);
                    put(format!("{p}.offset.affine.weight"), vec![self.offset_latent_dim(), ci], Init::Normal);
                    put(format!("{p}.offset.affine.bias"), vec![ci], Init::Ones);
                }
            }
            c_prev = c;
        }
        put("g.torgb.weight".into(), vec![self.image_channels, c_prev, 1, 1], Init::Normal);
        put("g.torgb.bias".into(), vec![self.image_channels], Init::Zeros);
        m
    }

    /// Infers the configuration from generator parameter names and shapes,
    /// then checks that the inferred layout matches exactly.
    pub fn infer(params: &Params) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let fc0 = get("g.mapping.fc0.weight")?.shape().to_vec();
        let rgb = get("g.torgb.weight")?.shape().to_vec();
        if fc0.len() != 2 || rgb.len() != 4 {
            return Err(Error::Checkpoint("malformed mapping or toRGB weight".into()));
        }
        let mut cfg = GeneratorConfig {
            z_dim: fc0[0],
            w_dim: fc0[1],
            image_channels: rgb[0],
            mtm_groups: BTreeSet::new(),
            ..Self::default()
        };
        let mut res = 4;
        let mut channels = vec![];
        let mut offset_dim = None;
        while let Some(wt) = params.get(&format!("g.b{res}.conv1.weight")) {
            channels.push(wt.shape()[0]);
            cfg.kernel = wt.shape()[2];
            if let Some(a) = params.get(&format!("g.b{res}.conv0.offset.affine.weight")) {
                cfg.mtm_groups.insert(Group::of_resolution(res));
                offset_dim = Some(a.shape()[0]);
            }
            cfg.resolution = res;
            res *= 2;
        }
        if channels.is_empty() {
            return Err(Error::Checkpoint("no synthesis blocks found".into()));
        }
        cfg.channels = channels;
        if let Some(d) = offset_dim {
            if d > cfg.w_dim {
                cfg.video = true;
                cfg.m_dim = d - cfg.w_dim;
            }
        }
        let specs = cfg.param_specs();
        let own: Vec<&String> = params.keys().filter(|k| k.starts_with("g.")).collect();
        if own.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "generator has {} tensors, layout implies {}",
                own.len(),
                specs.len()
            )));
        }
        for (name, spec) in &specs {
            let t = get(name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {:?}", t.shape(), spec.shape)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Materializes parameters; each normal tensor draws from its own stream
/// seeded by `(seed, name)`, so adding layers never perturbs the others.
pub fn init_params(specs: &BTreeMap<String, ParamSpec>, seed: u64) -> Result<Params> {
    let mut out = Params::new();
    for (name, spec) in specs {
        let t = match spec.init {
            Init::Normal => randn(&spec.shape, &mut Rng::new(Rng::derive_seed(seed, name)))?,
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::full(&spec.shape, 1.0),
        };
        out.insert(name.clone(), t);
    }
    Ok(out)
}

pub fn param_count(params: &Params, prefix: &str) -> usize {
    params
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, t)| t.len())
        .sum()
}

/// Parameters placed on a tape, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Leaves when `trainable`, constants otherwise.
    pub fn new(tape: &mut Tape, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().copied().collect()
    }
}

/// Weight scaled by `1/sqrt(fan_in)`.
pub(crate) fn scaled(tape: &mut Tape, w: Var, fan_in: usize) -> Result<Var> {
    tape.scale(w, 1.0 / (fan_in as f64).sqrt())
}

/// `x . W / sqrt(in) + b` for `(n, in)` inputs and `(in, out)` weights.
pub(crate) fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let fan_in = tape.value(w)?.shape()[0];
    let ws = scaled(tape, w, fan_in)?;
    let y = tape.matmul(x, ws)?;
    tape.add_row_bias(y, b)
}

/// Equalized 3x3 (or kxk) plain convolution with bias.
pub(crate) fn conv_layer(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.value(w)?.shape().to_vec();
    let ws = scaled(tape, w, s[1] * s[2] * s[3])?;
    let y = tape.conv2d(x, ws)?;
    tape.add_channel_bias(y, b)
}

pub(crate) fn check_rows(t: &Tensor, cols: usize, what: &str) -> Result<usize> {
    let (n, c) = t.dims2()?;
    if c != cols {
        return Err(shape_err!("{what} must have {cols} columns, got {c}"));
    }
    Ok(n)
}

#[cfg(test)]
mod tests;
