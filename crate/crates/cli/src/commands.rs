use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use mtm_core::checkpoint;
use mtm_core::data::{sample_clips, sample_dataset, HELD_OUT_SEED_OFFSET};
use mtm_core::gradsuite::{self, GradCheck, Scope};
use mtm_core::metrics::{mean_pairwise_l2, rffd, FeatureExtractor};
use mtm_core::ppm;
use mtm_core::stylegen::{groups_label, motion_codes, Generator, GeneratorConfig, Group, SynthOptions};
use mtm_core::train::{generate_chunked, metrics_csv, sample_latents, train, TrainData, Trainer, CSV_HEADER};
use mtm_core::{randn, Rng, Tensor};

use crate::config::RunConfig;
use crate::{
    AblateArgs, CmdResult, Command, ConfigArgs, DumpArgs, ExitStatus, Failure, GradcheckArgs, MetricsArgs, SampleArgs,
    ScopeArg,
};

pub fn run(cmd: &Command, stdout: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::GenData(a) => gen_data(a, stdout),
        Command::Train(a) => train_cmd(a, stdout),
        Command::Sample(a) => sample(a),
        Command::Gradcheck(a) => gradcheck(a, stdout),
        Command::Metrics(a) => metrics(a, stdout),
        Command::AblateOffsets(a) => ablate(a, stdout),
        Command::DumpOffsets(a) => dump_offsets(a),
        Command::Bench(a) => bench_cmd(a, stdout),
    }
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig, Failure> {
    RunConfig::load(&a.config).map_err(Failure::config)
}

fn prepare_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::config)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::config)
}

fn emit(stdout: &mut dyn Write, text: &str) -> CmdResult {
    stdout.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a generator from a checkpoint; any `g.*` map works, so both the
/// full and the EMA checkpoint are accepted.
pub fn load_generator(path: &Path) -> Result<Generator, Failure> {
    let params = checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(Failure::checkpoint)?;
    Generator::from_params(&params)
        .with_context(|| format!("{} does not hold a generator", path.display()))
        .map_err(Failure::checkpoint)
}

/// `n` samples; video generators get one motion sequence per clip and
/// return `clips * frames` images.
fn sample_images(g: &Generator, clips: usize, seed: u64, opts: SynthOptions) -> Result<(Tensor, Vec<Tensor>), Failure> {
    let frames = if g.config.video { g.config.frames } else { 1 };
    let (z, m) = sample_latents(&mut Rng::new(seed), &g.config, clips, frames)?;
    let out = generate_chunked(g, &z, m.as_ref(), opts)?;
    let mut fields = vec![];
    for (_, f) in out.offsets {
        fields.push(f.into_tensor());
    }
    Ok((out.image, fields))
}

fn gen_data(a: &ConfigArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(a)?;
    let out = cfg.out_dir(a.out.as_deref()).map_err(Failure::config)?;
    let d = &cfg.data;
    let seed = a.seed.unwrap_or(d.seed);
    let dir = out.join("images");
    prepare_dir(&dir)?;
    let mut csv = String::new();
    let (images, cols) = if d.video {
        let (frames, clips) = sample_clips(d.n, seed, d.frames, d.resolution)?;
        csv.push_str("clip,cy,cx,theta0,theta1,length,radius,omega0,omega1,vy,vx\n");
        for (i, c) in clips.iter().enumerate() {
            let (p, m) = (c.pose, c.motion);
            let _ = writeln!(
                csv,
                "{i},{},{},{},{},{},{},{},{},{},{}",
                p.cy, p.cx, p.theta0, p.theta1, p.length, p.radius, m.omega0, m.omega1, m.vy, m.vx
            );
            for t in 0..d.frames {
                let img = frames.batch_range(i * d.frames + t, 1)?;
                ppm::write(&dir.join(format!("{i:05}_{t:02}.ppm")), &img)?;
            }
        }
        (frames, d.frames)
    } else {
        let ds = sample_dataset(d.n, seed, d.resolution)?;
        csv.push_str("index,cy,cx,theta0,theta1,length,radius\n");
        for (i, p) in ds.poses.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{},{},{},{},{}", p.cy, p.cx, p.theta0, p.theta1, p.length, p.radius);
            ppm::write(&dir.join(format!("{i:05}.ppm")), &ds.images.batch_range(i, 1)?)?;
        }
        (ds.images, 8)
    };
    write_file(&out.join("poses.csv"), &csv)?;
    let shown = images.shape()[0].min(64 - 64 % cols);
    let grid = ppm::grid_with_columns(&images.batch_range(0, shown.max(1))?, cols)?;
    ppm::write(&out.join("grid.ppm"), &grid)?;
    emit(stdout, &format!("wrote {} images to {}\n", images.shape()[0], dir.display()))
}

fn train_cmd(a: &ConfigArgs, stdout: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(a)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let out = cfg.out_dir(a.out.as_deref()).map_err(Failure::config)?;
    prepare_dir(&out.join("samples"))?;
    write_file(
        &out.join("config.json"),
        serde_json::to_string_pretty(&cfg).map_err(Failure::config)?,
    )?;
    let data = training_data(&cfg)?;
    let (g, t) = (&cfg.generator, &cfg.train);

    let frames = if g.video { g.frames } else { 1 };
    let clips = if g.video { 4 } else { 16 };
    let (grid_z, grid_m) = sample_latents(&mut Rng::new(Rng::derive_seed(t.seed, "grid")), g, clips, frames)?;
    let csv_path = out.join("metrics.csv");
    write_file(&csv_path, format!("{CSV_HEADER}\n"))?;
    let mut observer = |row: &mtm_core::train::EvalRow, state: &mtm_core::train::TrainState| -> mtm_core::Result<()> {
        let mut f = fs::OpenOptions::new().append(true).open(&csv_path)?;
        writeln!(f, "{}", row.to_csv())?;
        let img = state.ema_generator().generate_full(&grid_z, grid_m.as_ref(), SynthOptions::default())?.image;
        let grid = ppm::grid_with_columns(&img, if frames > 1 { frames } else { 4 })?;
        ppm::write(&out.join("samples").join(format!("step_{:06}.ppm", row.step)), &grid)
    };
    let (state, rows) = match train(g, t, &data, &mut observer) {
        Ok(r) => r,
        Err(mtm_core::Error::Numeric(msg)) => {
            write_file(&out.join("nan_dump.txt"), &msg)?;
            let first = msg.lines().next().unwrap_or_default().to_string();
            return Err(Failure::new(
                ExitStatus::Numeric,
                anyhow!("{first} (diagnostics in {})", out.join("nan_dump.txt").display()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&csv_path, metrics_csv(&rows))?;
    checkpoint::save(&out.join("checkpoint.ckpt"), &state.checkpoint_params())?;
    checkpoint::save(&out.join("ema.ckpt"), &state.ema)?;
    emit(stdout, &format!("trained {} steps, outputs in {}\n", state.step, out.display()))
}

/// Training reals from `data`, held-out reals from the offset seed. Video
/// configs use whole clips for both.
pub(crate) fn training_data(cfg: &RunConfig) -> Result<TrainData, Failure> {
    let d = &cfg.data;
    let held_seed = d.seed.wrapping_add(HELD_OUT_SEED_OFFSET);
    let n_eval = cfg.train.eval_samples;
    Ok(if d.video {
        TrainData {
            reals: sample_clips(d.n, d.seed, d.frames, d.resolution)?.0,
            held_out: sample_clips(n_eval.div_ceil(d.frames), held_seed, d.frames, d.resolution)?.0,
        }
    } else {
        TrainData {
            reals: sample_dataset(d.n, d.seed, d.resolution)?.images,
            held_out: sample_dataset(n_eval, held_seed, d.resolution)?.images,
        }
    })
}

fn sample(a: &SampleArgs) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::config(anyhow!("--n must be at least 1")));
    }
    let g = load_generator(&a.checkpoint)?;
    prepare_dir(&a.out)?;
    let (images, _) = sample_images(&g, a.n as usize, a.seed, SynthOptions::default())?;
    let cols = if g.config.video { g.config.frames } else { ppm_columns(a.n as usize) };
    ppm::write(&a.out.join("samples.ppm"), &ppm::grid_with_columns(&images, cols)?)?;
    Ok(())
}

fn ppm_columns(n: usize) -> usize {
    (1..=n).find(|k| k * k >= n).unwrap_or(1)
}

fn gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write) -> CmdResult {
    let scope = match a.scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Full => Scope::Full,
    };
    gradcheck_with(&gradsuite::checks(scope), a.seed, a.out.as_deref(), stdout)
}

/// Runs `list`, prints the report, and fails with the gradcheck status if
/// any check reaches the tolerance.
pub fn gradcheck_with(list: &[GradCheck], seed: u64, out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let results = gradsuite::run_checks(list, seed).map_err(|e| Failure::new(ExitStatus::Gradcheck, e))?;
    let report = gradsuite::report_csv(&results);
    emit(stdout, &report)?;
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_file(&dir.join("gradcheck.csv"), &report)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            ExitStatus::Gradcheck,
            anyhow!("gradient check failed for {}", failed.join(", ")),
        ))
    }
}

/// A directory of PPMs, a checkpoint (sampled `n` times from `seed`) or
/// `data:SEED:RESOLUTION`.
fn load_set(spec: &str, n: usize, seed: u64) -> Result<Tensor, Failure> {
    if let Some(rest) = spec.strip_prefix("data:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let parsed = match parts.as_slice() {
            [s, r] => s.parse::<u64>().ok().zip(r.parse::<usize>().ok()),
            _ => None,
        };
        let (s, r) = parsed.ok_or_else(|| Failure::config(anyhow!("expected data:SEED:RESOLUTION, got {spec}")))?;
        return Ok(sample_dataset(n, s, r)?.images);
    }
    let path = Path::new(spec);
    if path.is_dir() {
        return read_ppm_dir(path);
    }
    if !path.exists() {
        return Err(Failure::config(anyhow!("image set {spec} does not exist")));
    }
    let g = load_generator(path)?;
    let frames = if g.config.video { g.config.frames } else { 1 };
    let (images, _) = sample_images(&g, n.div_ceil(frames), seed, SynthOptions::default())?;
    Ok(images.batch_range(0, n)?)
}

fn read_ppm_dir(dir: &Path) -> Result<Tensor, Failure> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    let mut parts = vec![];
    for f in &files {
        let bytes = fs::read(f)?;
        let (w, h, rgb) = ppm::decode(&bytes).map_err(|e| Failure::config(anyhow!("{}: {e}", f.display())))?;
        let grey: Vec<f64> = rgb.chunks_exact(3).map(|p| p[0] as f64 / 255.0 * 2.0 - 1.0).collect();
        parts.push(Tensor::new(vec![1, 1, h, w], grey)?);
    }
    if parts.is_empty() {
        return Err(Failure::config(anyhow!("no .ppm files in {}", dir.display())));
    }
    Tensor::concat_batch(&parts).map_err(|e| Failure::config(anyhow!("{}: {e}", dir.display())))
}

fn metrics(a: &MetricsArgs, stdout: &mut dyn Write) -> CmdResult {
    let n = a.n as usize;
    let set_a = load_set(&a.set_a, n, a.seed)?;
    let set_b = load_set(&a.set_b, n, a.seed)?;
    let res = set_a.shape()[2];
    if set_b.shape()[2..] != set_a.shape()[2..] {
        return Err(Failure::config(anyhow!(
            "sets have different image sizes {:?} and {:?}",
            &set_a.shape()[1..],
            &set_b.shape()[1..]
        )));
    }
    let d = rffd(&FeatureExtractor::standard(res)?, &set_a, &set_b)?;
    emit(
        stdout,
        &format!("{},{},{},{},{}\n", a.set_a, a.set_b, set_a.shape()[0], set_b.shape()[0], d),
    )
}

fn ablate(a: &AblateArgs, stdout: &mut dyn Write) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::config(anyhow!("--n must be at least 1")));
    }
    let g = load_generator(&a.checkpoint)?;
    if g.mtm_layers().is_empty() {
        return Err(Failure::checkpoint(anyhow!(
            "{} has no MTM layers to ablate",
            a.checkpoint.display()
        )));
    }
    prepare_dir(&a.out)?;
    let n = a.n as usize;
    let frames = if g.config.video { g.config.frames } else { 1 };
    let clips = n.div_ceil(frames);
    let (trained, _) = sample_images(&g, clips, a.seed, SynthOptions::default())?;
    let (zeroed, _) = sample_images(&g, clips, a.seed, SynthOptions { offsets_enabled: false })?;
    let (trained, zeroed) = (trained.batch_range(0, n)?, zeroed.batch_range(0, n)?);
    let res = g.config.resolution;
    let held = sample_dataset(n, a.data_seed.wrapping_add(HELD_OUT_SEED_OFFSET), res)?.images;
    let ext = FeatureExtractor::standard(res)?;
    let line = format!(
        "{},{},{},{}",
        rffd(&ext, &trained, &held)?,
        rffd(&ext, &zeroed, &held)?,
        mean_pairwise_l2(&trained)?,
        mean_pairwise_l2(&zeroed)?
    );
    let csv = format!("rffd_trained,rffd_zeroed,pairwise_l2_trained,pairwise_l2_zeroed\n{line}\n");
    write_file(&a.out.join("ablation.csv"), &csv)?;
    let shown = n.min(64);
    ppm::write_grid(&a.out.join("trained.ppm"), &trained.batch_range(0, shown)?)?;
    ppm::write_grid(&a.out.join("zeroed.ppm"), &zeroed.batch_range(0, shown)?)?;
    emit(stdout, &csv)
}

fn dump_offsets(a: &DumpArgs) -> CmdResult {
    let g = load_generator(&a.checkpoint)?;
    let layers = g.mtm_layers();
    if !layers.contains(&a.layer) {
        return Err(Failure::checkpoint(anyhow!(
            "{} is not an MTM layer of this checkpoint (MTM layers: {})",
            a.layer,
            if layers.is_empty() { "none".to_string() } else { layers.join(", ") }
        )));
    }
    prepare_dir(&a.out)?;
    let mut rng = Rng::new(a.seed);
    let z = randn(&[1, g.config.z_dim], &mut rng)?;
    let m = if g.config.video {
        Some(motion_codes(&mut rng, 1, g.config.m_dim)?)
    } else {
        None
    };
    let out = g.generate_full(&z, m.as_ref(), SynthOptions::default())?;
    let field = out
        .offsets
        .into_iter()
        .find(|(name, _)| *name == a.layer)
        .map(|(_, f)| f)
        .ok_or_else(|| Failure::checkpoint(anyhow!("layer {} produced no offsets", a.layer)))?;
    let k = field.k();
    let (_, _, h, w) = field.tensor().dims4()?;
    let mut csv = String::from("batch,tap,y,x,dy,dx\n");
    let mut mags = vec![0.0; k * k * h * w];
    for t in 0..k * k {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = field.at(0, t, y, x);
                let _ = writeln!(csv, "0,{t},{y},{x},{dy},{dx}");
                mags[(t * h + y) * w + x] = (dy * dy + dx * dx).sqrt();
            }
        }
    }
    write_file(&a.out.join("offsets.csv"), &csv)?;
    let max = mags.iter().fold(0.0f64, |m, &v| m.max(v));
    let scaled: Vec<f64> = mags
        .iter()
        .map(|&v| if max > 0.0 { 2.0 * v / max - 1.0 } else { -1.0 })
        .collect();
    let heat = Tensor::new(vec![k * k, 1, h, w], scaled)?;
    for t in 0..k * k {
        ppm::write(&a.out.join(format!("heat_tap{t}.ppm")), &heat.batch_range(t, 1)?)?;
    }
    ppm::write(&a.out.join("heat_grid.ppm"), &ppm::grid_with_columns(&heat, k)?)?;
    Ok(())
}

/// One row of the step benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub groups: String,
    pub ms_per_step: f64,
    pub param_count: usize,
}

pub const BENCH_PLACEMENTS: [&[Group]; 4] = [
    &[],
    &[Group::Low],
    &[Group::Low, Group::Mid],
    &[Group::Low, Group::Mid, Group::High],
];

/// Mean wall-clock time per training step over `steps` steps after
/// `warmup` untimed ones, for each MTM placement.
pub fn bench(cfg: &RunConfig, warmup: usize, steps: usize) -> Result<Vec<BenchRow>, Failure> {
    let data = training_data(cfg)?;
    let mut rows = vec![];
    for groups in BENCH_PLACEMENTS {
        let g = GeneratorConfig {
            mtm_groups: groups.iter().copied().collect(),
            ..cfg.generator.clone()
        };
        let mut trainer = Trainer::new(&g, &cfg.train, &data)?;
        for _ in 0..warmup {
            trainer.step()?;
        }
        let start = Instant::now();
        for _ in 0..steps {
            trainer.step()?;
        }
        let ms = start.elapsed().as_secs_f64() * 1000.0 / steps.max(1) as f64;
        rows.push(BenchRow {
            groups: groups_label(&g.mtm_groups),
            ms_per_step: ms,
            param_count: trainer.state.generator.param_count(),
        });
    }
    Ok(rows)
}

fn bench_cmd(a: &ConfigArgs, stdout: &mut dyn Write) -> CmdResult {
    let mut cfg = load_config(a)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let rows = bench(&cfg, 10, 50)?;
    let mut csv = String::from("groups,ms_per_step,param_count\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.3},{}", r.groups, r.ms_per_step, r.param_count);
    }
    if let Some(out) = a.out.as_deref().or(cfg.out_dir.as_deref()) {
        prepare_dir(out)?;
        write_file(&out.join("bench.csv"), &csv)?;
    }
    emit(stdout, &csv)?;
    let base = rows[0].ms_per_step;
    for r in &rows[1..] {
        eprintln!("time ratio {} / none: {:.2}", r.groups, r.ms_per_step / base);
    }
    Ok(())
}
