use std::collections::BTreeMap;

use super::{conv_layer, dense, init_params, param_count, Bound, GeneratorConfig, Init, ParamSpec, Params, LRELU_SLOPE};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub channels: usize,
    pub in_channels: usize,
    /// Parameter name prefix, `d` or `dt`.
    pub prefix: String,
}

impl DiscriminatorConfig {
    /// Image discriminator matched to a generator; width is the widest
    /// generator block.
    pub fn image(g: &GeneratorConfig) -> Self {
        Self {
            resolution: g.resolution,
            channels: g.channels.iter().copied().max().unwrap_or(1),
            in_channels: g.image_channels,
            prefix: "d".into(),
        }
    }

    /// Sees two consecutive frames stacked along channels.
    pub fn temporal(g: &GeneratorConfig) -> Self {
        Self {
            in_channels: 2 * g.image_channels,
            prefix: "dt".into(),
            ..Self::image(g)
        }
    }

    fn levels(&self) -> Vec<usize> {
        let mut r = vec![];
        let mut res = self.resolution;
        while res >= 4 {
            r.push(res);
            res /= 2;
        }
        r
    }

    pub fn param_specs(&self) -> BTreeMap<String, ParamSpec> {
        let (p, c) = (&self.prefix, self.channels);
        let mut m = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, init: Init| {
            m.insert(name, ParamSpec { shape, init });
        };
        put(format!("{p}.fromrgb.weight"), vec![c, self.in_channels, 3, 3], Init::Normal);
        put(format!("{p}.fromrgb.bias"), vec![c], Init::Zeros);
        for res in self.levels() {
            put(format!("{p}.b{res}.conv.weight"), vec![c, c, 3, 3], Init::Normal);
            put(format!("{p}.b{res}.conv.bias"), vec![c], Init::Zeros);
        }
        put(format!("{p}.fc.weight"), vec![c * 16, 1], Init::Normal);
        put(format!("{p}.fc.bias"), vec![1], Init::Zeros);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: Params,
}

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.resolution < 4 || !config.resolution.is_power_of_two() || config.channels == 0 {
            return Err(Error::Contract(format!("invalid discriminator config {config:?}")));
        }
        let params = init_params(&config.param_specs(), seed)?;
        Ok(Self { config, params })
    }

    /// Takes the entries under the config's prefix and checks their shapes.
    pub fn from_params(config: DiscriminatorConfig, params: &Params) -> Result<Self> {
        let mut own = Params::new();
        for (name, spec) in config.param_specs() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name} has shape {:?}, expected {:?}", t.shape(), spec.shape)));
            }
            own.insert(name, t.clone());
        }
        Ok(Self { config, params: own })
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params, &format!("{}.", self.config.prefix))
    }

    /// One logit per sample.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let b = Bound::new(&mut tape, &self.params, false);
        let xv = tape.constant(x.clone());
        let y = discriminate_var(&mut tape, &b, &self.config, xv)?;
        Ok(tape.value(y)?.clone())
    }
}

/// conv3x3 + lrelu stacks with 2x2 mean-pool down to 4x4, then dense to a
/// scalar per sample. Built only from twice-differentiable ops.
pub fn discriminate_var(tape: &mut Tape, b: &Bound, cfg: &DiscriminatorConfig, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x)?.dims4()?;
    if c != cfg.in_channels || h != cfg.resolution || w != cfg.resolution {
        return Err(shape_err!(
            "discriminator expects {}x{r}x{r} inputs, got {c}x{h}x{w}",
            cfg.in_channels,
            r = cfg.resolution
        ));
    }
    let p = &cfg.prefix;
    let mut y = conv_layer(tape, x, b.get(&format!("{p}.fromrgb.weight"))?, b.get(&format!("{p}.fromrgb.bias"))?)?;
    y = tape.leaky_relu(y, LRELU_SLOPE)?;
    for res in cfg.levels() {
        y = conv_layer(tape, y, b.get(&format!("{p}.b{res}.conv.weight"))?, b.get(&format!("{p}.b{res}.conv.bias"))?)?;
        y = tape.leaky_relu(y, LRELU_SLOPE)?;
        if res > 4 {
            y = tape.avg_pool2x2(y)?;
        }
    }
    let flat = tape.reshape(y, &[n, cfg.channels * 16])?;
    let logit = dense(tape, flat, b.get(&format!("{p}.fc.weight"))?, b.get(&format!("{p}.fc.bias"))?)?;
    tape.reshape(logit, &[n])
}
