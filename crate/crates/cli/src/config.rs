use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mtm_core::stylegen::GeneratorConfig;
use mtm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Dataset section of a run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Images, or clips in video mode.
    pub n: usize,
    pub resolution: usize,
    pub video: bool,
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 2048,
            resolution: 32,
            video: false,
            frames: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    /// Checks each section and that the sections agree on resolution, video
    /// mode and clip length.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.train.check_generator(&self.generator)?;
        let d = &self.data;
        if d.n == 0 {
            bail!("data.n must be at least 1");
        }
        if d.resolution != self.generator.resolution {
            bail!(
                "data.resolution {} differs from generator.resolution {}",
                d.resolution,
                self.generator.resolution
            );
        }
        if d.video != self.generator.video {
            bail!("data.video {} differs from generator.video {}", d.video, self.generator.video);
        }
        if d.video && d.frames != self.generator.frames {
            bail!("data.frames {} differs from generator.frames {}", d.frames, self.generator.frames);
        }
        Ok(())
    }

    /// `--out` wins over `out_dir`.
    pub fn out_dir(&self, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
        match (flag, &self.out_dir) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(p.clone()),
            (None, None) => bail!("no output directory: set out_dir or pass --out"),
        }
    }
}
