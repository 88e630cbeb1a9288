//! `pyrocast` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! error.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use pyrocast::ca::CaModel;
use pyrocast::checkpoint::Checkpoint;
use pyrocast::config::{file_sha256, RunConfig};
use pyrocast::dataset::{
    binarize, export_png, load_dataset, load_frames, load_manifest, make_ensemble_dataset, make_training_dataset,
    save_dataset, save_frames, save_manifest, save_trajectory, DatasetKind,
};
use pyrocast::diffusion::{ensemble_predict, DiffusionConfig};
use pyrocast::evaluate::evaluate_models;
use pyrocast::rng;
use pyrocast::terrain::{save_terrain, terrain_to_text};
use pyrocast::train::Trainer;
use pyrocast::unet::{ModelKind, UNet};

#[derive(Parser, Debug)]
#[command(name = "pyrocast", version, about = "Wildfire spread simulation and diffusion-based ensemble forecasting")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, short, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides `master_seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "PYROCAST_THREADS")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one CA simulation and write its trajectory.
    Simulate(SimulateArgs),
    /// Generate a training or ensemble dataset.
    Dataset(DatasetArgs),
    /// Train the diffusion model or the deterministic baseline.
    Train(TrainArgs),
    /// Draw an ensemble forecast for one condition frame.
    Sample(SampleArgs),
    /// Compare the diffusion ensemble with the baseline on an ensemble dataset.
    Eval(EvalArgs),
    /// Print the network layer table and parameter count.
    DescribeNet(DescribeArgs),
    /// Write the configured terrain to a file.
    GenTerrain(GenTerrainArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Ignition cell as `row,col`; repeatable. Defaults to one random
    /// burnable cell.
    #[arg(long, value_parser = parse_cell)]
    ignite: Vec<(usize, usize)>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Export every K-th frame as PNG (0 disables).
    #[arg(long, default_value_t = 0)]
    png_every: usize,
    /// Trajectory file; defaults to `<output_dir>/trajectory.pctr`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Train,
    Ensemble,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Train)]
    kind: KindArg,
    /// Number of trajectories.
    #[arg(long)]
    n: Option<usize>,
    /// Continuations per ensemble target.
    #[arg(long)]
    m: Option<usize>,
    /// Training manifest whose samples the ensemble set must avoid;
    /// defaults to `<output_dir>/train.manifest` when it exists.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Dataset file; the manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Diffusion,
    Deterministic,
}

impl ModelArg {
    fn kind(self) -> ModelKind {
        match self {
            ModelArg::Diffusion => ModelKind::Diffusion,
            ModelArg::Deterministic => ModelKind::Deterministic,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Diffusion)]
    model: ModelArg,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Total step budget (overrides `train.steps`).
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the existing checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Stop early once the loss plateaus (see the `plateau` section).
    #[arg(long)]
    until_plateau: bool,
    /// Checkpoint file; defaults to `<output_dir>/<model>.ckpt`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Frame-stack file holding the condition frame.
    #[arg(long)]
    condition: PathBuf,
    /// Index of the condition frame within the file.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Ensemble size.
    #[arg(long = "M", short = 'M')]
    members: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Sampling steps.
    #[arg(long = "S", short = 'S')]
    sampling_steps: Option<usize>,
    /// Skip PNG export.
    #[arg(long)]
    no_png: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    diffusion_ckpt: PathBuf,
    #[arg(long)]
    baseline_ckpt: PathBuf,
    /// Ensemble dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "M", short = 'M')]
    members: Option<usize>,
    #[arg(long = "S", short = 'S')]
    sampling_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Describe the single-channel baseline variant.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct GenTerrainArgs {
    /// Output file; defaults to `<output_dir>/terrain.pcst`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the text format instead of the binary one.
    #[arg(long)]
    text: bool,
}

fn parse_cell(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    Ok((
        r.trim().parse().map_err(|e| format!("row: {e}"))?,
        c.trim().parse().map_err(|e| format!("col: {e}"))?,
    ))
}

/// Maps an error to its exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    use pyrocast::Error as E;
    match err.downcast_ref::<E>() {
        Some(
            E::InvalidConfig(_)
            | E::InvalidScheduleBounds(_)
            | E::InvalidEnsembleSize(_)
            | E::IgnitionOnUnburnable(_)
            | E::IgnitionOutOfBounds(_)
            | E::NonAdjacentCells { .. },
        ) => 2,
        Some(_) => 3,
        None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    let config_inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a, &config_inputs),
        Command::Dataset(a) => dataset(&cfg, a, &config_inputs),
        Command::Train(a) => train(&cfg, a, &config_inputs),
        Command::Sample(a) => sample(&cfg, a, &config_inputs),
        Command::Eval(a) => eval(&cfg, a, &config_inputs),
        Command::DescribeNet(a) => describe(&cfg, a),
        Command::GenTerrain(a) => gen_terrain(&cfg, a, &config_inputs),
    }
}

fn echo(cfg: &RunConfig, dir: &Path, config_inputs: &[PathBuf], inputs: &[&Path]) -> Result<()> {
    let mut all: Vec<&Path> = config_inputs.iter().map(PathBuf::as_path).collect();
    all.extend_from_slice(inputs);
    cfg.echo(dir, &all)?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(cfg: &RunConfig, a: SimulateArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let terrain = cfg.terrain()?;
    let model = CaModel::new(&terrain, cfg.ca)?;
    let ignition: Vec<usize> = if a.ignite.is_empty() {
        let burnable = terrain.burnable_cells();
        if burnable.is_empty() {
            return Err(pyrocast::Error::NoBurnableCells.into());
        }
        let mut r = rng::stream(rng::derive_seed(cfg.master_seed, 0x5100));
        vec![burnable[r.gen_range(0..burnable.len())]]
    } else {
        let mut cells = Vec::new();
        for (r, c) in a.ignite {
            if r >= terrain.height || c >= terrain.width {
                return Err(pyrocast::Error::IgnitionOutOfBounds(r.saturating_mul(terrain.width).saturating_add(c)).into());
            }
            cells.push(r * terrain.width + c);
        }
        cells
    };
    let traj = model.simulate(&ignition, a.steps, rng::derive_seed(cfg.master_seed, 0x5101))?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("trajectory.pctr"));
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    save_trajectory(&out, &traj)?;
    if a.png_every > 0 {
        for (t, s) in traj.states.iter().enumerate().step_by(a.png_every) {
            export_png(&binarize(s), &dir.join(format!("frame_{t:04}.png")))?;
        }
    }
    echo(cfg, &dir, config_inputs, &[])?;
    println!(
        "wrote {} ({} frames, {} cells burnt or burning at the end)",
        out.display(),
        traj.states.len(),
        traj.states.last().map_or(0, |s| s.fire_count())
    );
    Ok(())
}

fn dataset(cfg: &RunConfig, a: DatasetArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let terrain = cfg.terrain()?;
    let (kind, mut dcfg) = match a.kind {
        KindArg::Train => (DatasetKind::Train, cfg.dataset.train()),
        KindArg::Ensemble => (DatasetKind::Ensemble, cfg.dataset.ensemble()),
    };
    if let Some(n) = a.n {
        dcfg.n_samples = n;
    }
    if let Some(m) = a.m {
        if kind == DatasetKind::Train {
            anyhow::bail!(pyrocast::Error::InvalidConfig("--m only applies to ensemble datasets".into()));
        }
        dcfg.ensemble_size = m;
    }
    let out = a
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("{}.pcds", kind.as_str())));
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    let mut inputs: Vec<PathBuf> = Vec::new();
    let (ds, manifest) = match kind {
        DatasetKind::Train => make_training_dataset(&terrain, &cfg.ca, &dcfg, cfg.master_seed)?,
        DatasetKind::Ensemble => {
            let exclude_path = a.exclude.or_else(|| {
                let p = cfg.output_dir.join("train.manifest");
                p.exists().then_some(p)
            });
            let exclude = match &exclude_path {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_manifest(p)?)
                }
                None => None,
            };
            make_ensemble_dataset(&terrain, &cfg.ca, &dcfg, cfg.master_seed, exclude.as_ref())?
        }
    };
    save_dataset(&out, &ds)?;
    let manifest_path = out.with_extension("manifest");
    save_manifest(&manifest_path, &manifest)?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    echo(cfg, &dir, config_inputs, &refs)?;
    println!(
        "wrote {} ({} pairs from {} trajectories) and {}",
        out.display(),
        ds.len(),
        manifest.samples.len(),
        manifest_path.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, a: TrainArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let kind = a.model.kind();
    let mut tcfg = cfg.train;
    if let Some(s) = a.steps {
        tcfg.steps = s;
    }
    let ckpt_path = a
        .ckpt
        .unwrap_or_else(|| cfg.output_dir.join(format!("{}.ckpt", kind.as_str())));
    let dir = parent_dir(&ckpt_path);
    create_dir(&dir)?;
    let mut trainer = if a.resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.kind != kind {
            anyhow::bail!(pyrocast::Error::CheckpointMismatch(format!(
                "{} holds a {} model",
                ckpt_path.display(),
                ck.kind.as_str()
            )));
        }
        ck.into_trainer(&tcfg)?
    } else {
        let net = match kind {
            ModelKind::Diffusion => cfg.net.clone(),
            ModelKind::Deterministic => cfg.net.baseline(),
        };
        Trainer::new(kind, &net, cfg.diffusion, &tcfg, rng::derive_seed(cfg.master_seed, 0x7400 + kind as u64))?
    };
    let log_path = ckpt_path.with_extension("loss.tsv");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let save = |t: &Trainer| -> Result<()> {
        Checkpoint::from_trainer(t, true).save(&ckpt_path)?;
        Ok(())
    };
    let start = trainer.step;
    let mut on_step = |t: &Trainer, loss: f64| -> Result<()> {
        writeln!(log, "{}\t{loss:.6e}", t.step)?;
        if tcfg.log_every > 0 && t.step.is_multiple_of(tcfg.log_every) {
            log::info!("step {} loss {loss:.5}", t.step);
        }
        if tcfg.checkpoint_every > 0 && t.step.is_multiple_of(tcfg.checkpoint_every) {
            save(t)?;
        }
        Ok(())
    };
    if a.until_plateau {
        let plateau = pyrocast::train::Plateau {
            max_steps: tcfg.steps,
            ..cfg.plateau
        };
        let out = trainer.train_until_plateau(&data, &plateau, |t, loss| {
            on_step(t, loss).map_err(|e| pyrocast::Error::InvalidConfig(format!("{e:#}")))
        })?;
        if out.plateaued {
            println!("loss plateaued at step {} (window mean {:.5})", out.steps, out.window_mean);
        }
    } else {
        while trainer.step < tcfg.steps {
            let loss = trainer.train_step(&data)?;
            on_step(&trainer, loss)?;
        }
    }
    save(&trainer)?;
    echo(cfg, &dir, config_inputs, &[&a.data])?;
    println!(
        "trained {} model from step {start} to {}; wrote {}",
        kind.as_str(),
        trainer.step,
        ckpt_path.display()
    );
    Ok(())
}

fn sample(cfg: &RunConfig, a: SampleArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    if ck.kind != ModelKind::Diffusion {
        anyhow::bail!(pyrocast::Error::CheckpointMismatch("sampling needs a diffusion checkpoint".into()));
    }
    let frames = load_frames(&a.condition)?;
    let cond = frames.get(a.frame).ok_or_else(|| {
        pyrocast::Error::InvalidConfig(format!("{} holds {} frames, index {} requested", a.condition.display(), frames.len(), a.frame))
    })?;
    if cond.width != ck.net.image_size || cond.height != ck.net.image_size {
        anyhow::bail!(pyrocast::Error::CheckpointMismatch(format!(
            "checkpoint expects {0}x{0} frames, condition is {1}x{2}",
            ck.net.image_size, cond.height, cond.width
        )));
    }
    let dcfg = DiffusionConfig {
        eta: a.eta.unwrap_or(ck.diffusion.eta),
        sampling_steps: a.sampling_steps.unwrap_or(ck.diffusion.sampling_steps),
        ..ck.diffusion
    };
    let schedule = dcfg.schedule()?;
    dcfg.validate()?;
    let m = a.members.unwrap_or(cfg.eval.ensemble_size);
    let model = ck.denoiser()?;
    let pred = ensemble_predict(
        &model,
        cond,
        m,
        &dcfg,
        &schedule,
        rng::derive_seed(cfg.master_seed, 0x5A00),
        cfg.eval.batch_size,
    )?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    save_frames(&dir.join("members.pcfs"), &pred.members)?;
    save_frames(&dir.join("mean.pcfs"), std::slice::from_ref(&pred.mean))?;
    if !a.no_png {
        export_png(&pred.mean, &dir.join("mean.png"))?;
        for (i, f) in pred.members.iter().enumerate() {
            export_png(f, &dir.join(format!("member_{i:03}.png")))?;
        }
    }
    echo(cfg, dir, config_inputs, &[&a.ckpt, &a.condition])?;
    println!("wrote {m} members and their mean to {}", dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let dck = Checkpoint::load(&a.diffusion_ckpt)?;
    let bck = Checkpoint::load(&a.baseline_ckpt)?;
    let data = load_dataset(&a.data)?;
    let mut ecfg = cfg.eval.clone();
    if let Some(m) = a.members {
        ecfg.ensemble_size = m;
    }
    if let Some(s) = a.sampling_steps {
        ecfg.sampling_steps = s;
    }
    let (report, ensembles, base) = evaluate_models(&dck, &bck, &data, &ecfg, rng::derive_seed(cfg.master_seed, 0xE000), |i| {
        log::info!("evaluated pair {}", i + 1)
    })?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let mut header = vec![("config_hash".to_string(), cfg.hash_hex())];
    for (label, p) in [("diffusion_ckpt", &a.diffusion_ckpt), ("baseline_ckpt", &a.baseline_ckpt), ("data", &a.data)] {
        header.push((label.to_string(), format!("{} sha256={}", p.display(), file_sha256(p)?)));
    }
    std::fs::write(dir.join("report.txt"), report.to_text(&header)).context("writing report.txt")?;
    std::fs::write(dir.join("report.tsv"), report.to_tsv()).context("writing report.tsv")?;
    for (i, p) in report.pairs.iter().enumerate().take(ecfg.mismatch_pngs) {
        for (model, sweep) in [("diffusion", &p.diffusion_sweep), ("baseline", &p.baseline_sweep)] {
            if let Some(r) = sweep
                .results
                .iter()
                .find(|r| (r.threshold - ecfg.mismatch_threshold).abs() < 1e-12)
            {
                r.export_png(&dir.join(format!("mismatch_{model}_{i:03}.png")))?;
            }
        }
        export_png(&ensembles[i].mean, &dir.join(format!("pred_diffusion_{i:03}.png")))?;
        export_png(&base[i], &dir.join(format!("pred_baseline_{i:03}.png")))?;
        export_png(&data.pairs[i].target, &dir.join(format!("target_{i:03}.png")))?;
    }
    echo(cfg, dir, config_inputs, &[&a.diffusion_ckpt, &a.baseline_ckpt, &a.data])?;
    println!(
        "diffusion (M={}) mse {:.5} ssim {:.4} | baseline mse {:.5} ssim {:.4} | report in {}",
        report.ensemble_size,
        report.diffusion.mse,
        report.diffusion.ssim,
        report.baseline.mse,
        report.baseline.ssim,
        dir.display()
    );
    Ok(())
}

fn describe(cfg: &RunConfig, a: DescribeArgs) -> Result<()> {
    let net = if a.baseline { cfg.net.baseline() } else { cfg.net.clone() };
    let (unet, _) = UNet::build::<f32>(&net, 0)?;
    print!("{}", unet.describe());
    Ok(())
}

fn gen_terrain(cfg: &RunConfig, a: GenTerrainArgs, config_inputs: &[PathBuf]) -> Result<()> {
    let t = cfg.terrain()?;
    let out = a.out.unwrap_or_else(|| {
        cfg.output_dir
            .join(if a.text { "terrain.txt" } else { "terrain.pcst" })
    });
    let dir = parent_dir(&out);
    create_dir(&dir)?;
    if a.text {
        std::fs::write(&out, terrain_to_text(&t)).with_context(|| format!("writing {}", out.display()))?;
    } else {
        save_terrain(&out, &t)?;
    }
    echo(cfg, &dir, config_inputs, &[])?;
    println!("wrote {} ({}x{})", out.display(), t.height, t.width);
    Ok(())
}
