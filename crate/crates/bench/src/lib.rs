//! Inputs shared by the benchmarks.

use mtm_core::data::sample_dataset;
use mtm_core::stylegen::{GeneratorConfig, Group};
use mtm_core::train::{TrainConfig, TrainData};
use mtm_core::{randn, ConvSpec, KernelWeights, OffsetField, Result, Rng, Tensor};

pub struct ConvCase {
    pub x: Tensor,
    pub kernel: KernelWeights,
    /// Fractional offsets in (-1.5, 1.5).
    pub offsets: OffsetField,
    pub spec: ConvSpec,
}

/// A 3x3 convolution over `n` images of `c` channels at `res` x `res`.
pub fn conv_case(n: usize, c: usize, res: usize, seed: u64) -> Result<ConvCase> {
    let mut rng = Rng::new(seed);
    let x = randn(&[n, c, res, res], &mut rng)?;
    let weight = randn(&[c, c, 3, 3], &mut rng)?.map(|v| v / (9.0 * c as f64).sqrt());
    let kernel = KernelWeights::new(weight, Some(Tensor::zeros(&[c])))?;
    let len = n * 18 * res * res;
    let field = Tensor::new(vec![n, 18, res, res], (0..len).map(|_| rng.uniform(-1.5, 1.5)).collect())?;
    Ok(ConvCase {
        x,
        kernel,
        offsets: OffsetField::new(field, 3)?,
        spec: ConvSpec::new(3)?,
    })
}

/// Narrow 16x16 generator with MTM in `groups`, its training settings and a
/// small dataset.
pub fn train_case(groups: &[Group]) -> Result<(GeneratorConfig, TrainConfig, TrainData)> {
    let g = GeneratorConfig::flat(16, 16).with_groups(groups);
    let t = TrainConfig {
        batch: 16,
        ..TrainConfig::default()
    };
    let data = TrainData {
        reals: sample_dataset(256, 0, 16)?.images,
        held_out: sample_dataset(t.eval_samples, 1, 16)?.images,
    };
    Ok((g, t, data))
}
