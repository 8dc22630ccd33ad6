use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nmvs_core::objective::serialize_metric;
use nmvs_core::renderer::render;
use nmvs_core::scene_io::{self, generate_toy_scene, Primitive, SceneDataset, Split, ToySceneSpec};
use nmvs_core::trainer::{self, ablation_variants, Checkpoint, TrainConfig, TrainOptions};
use nmvs_core::view_select::{classify_configuration, select_views, ViewConfiguration, ViewSelection};
use nmvs_core::Error;

/// Overrides the training seed from the configuration file when set.
const SEED_ENV: &str = "NEURALMVS_SEED";

#[derive(Parser)]
#[command(name = "nmvs", version, about = "Sparse-view novel view synthesis with a learned sphere tracer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground-truth depth.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SceneKind::Sphere)]
        scene: SceneKind,
        #[arg(long, default_value_t = 20)]
        views: usize,
        /// Image size as WxH.
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long, value_enum, default_value_t = Rig::Hemisphere)]
        config: Rig,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a scene.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, keeping its optimiser state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one view of a scene with a trained model.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute PSNR, SSIM and loss over a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Metrics JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the three source views chosen for a target view.
    SelectViews {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the complete model and its ablations and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    Sphere,
    Plane,
    TwoSpheres,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rig {
    Hemisphere,
    FrontoParallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size '{v}': {e}"));
    Ok((parse(w)?, parse(h)?))
}

/// Failure of a command, split by exit code.
enum Failure {
    /// Bad flags, missing files or invalid input: exit 1.
    Usage(anyhow::Error),
    /// Failure while running: exit 2.
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::InvalidConfig(_) | Error::Load { .. } => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<Vec<PathBuf>, Failure>;

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!("{what} not found: {}", path.display())))
    }
}

fn load_data(dir: &Path) -> Result<SceneDataset, Failure> {
    require(dir, "data directory")?;
    Ok(scene_io::load_scene(dir)?)
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    require(path, "config file")?;
    let mut cfg = TrainConfig::from_json_file(path)?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|e| Failure::Usage(anyhow!("{SEED_ENV}='{seed}' is not an integer: {e}")))?;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require(path, "checkpoint")?;
    Checkpoint::load(path).map_err(|e| Failure::Usage(e.into()))
}

fn check_index(dataset: &SceneDataset, i: usize) -> Result<(), Failure> {
    if i < dataset.views.len() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!(
            "view index {i} out of range (scene has {} views)",
            dataset.views.len()
        )))
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<PathBuf, Failure> {
    let mut text = serde_json::to_string_pretty(value).context("serialising output")?;
    text.push('\n');
    scene_io::write_bytes(path, text.as_bytes())?;
    Ok(path.to_path_buf())
}

fn make_toy(out: &Path, scene: SceneKind, views: usize, res: (usize, usize), rig: Rig, seed: u64) -> CmdResult {
    let spec = ToySceneSpec {
        primitive: match scene {
            SceneKind::Sphere => Primitive::Sphere,
            SceneKind::Plane => Primitive::Plane,
            SceneKind::TwoSpheres => Primitive::TwoSpheres,
        },
        num_views: views,
        configuration: match rig {
            Rig::Hemisphere => ViewConfiguration::Hemisphere,
            Rig::FrontoParallel => ViewConfiguration::FrontoParallel,
        },
        width: res.0,
        height: res.1,
        seed,
        ..Default::default()
    };
    spec.validate()?;
    generate_toy_scene(&spec, Some(out))?;
    Ok(vec![out.join("cameras.json")])
}

fn train(data: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let dataset = load_data(data)?;
    let cfg = load_config(config)?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
    };
    let outcome = match resume {
        Some(p) => trainer::resume(&load_checkpoint(p)?, &dataset, &cfg, &opts)?,
        None => trainer::train(&dataset, &cfg, &opts)?,
    };
    let cfg_out = write_json(&cfg, &out.join("config.json"))?;
    if let Some(last) = outcome.history.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.loss);
    }
    Ok(vec![out.join("checkpoint.bin"), out.join("history.jsonl"), cfg_out])
}

fn render_view(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    check_index(&dataset, index)?;
    let model = ckpt.model()?;
    let sources: Vec<usize> = dataset
        .ids(Split::Train)
        .into_iter()
        .filter(|&i| i != index)
        .collect();
    let output = render(&model, &dataset, &dataset.views[index].camera, &sources)?;
    Ok(scene_io::write_render(&output, out, &format!("view{index:03}"))?)
}

fn eval(checkpoint: &Path, data: &Path, split: SplitArg, out: &Path) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let report = trainer::evaluate(&ckpt, &dataset, split, None)?;
    println!("psnr_mean {:.3} ssim_mean {:.4}", report.psnr_mean, report.ssim_mean);
    trainer::write_metrics(&report, out)?;
    Ok(vec![out.to_path_buf()])
}

#[derive(Serialize)]
struct Selection {
    target_index: usize,
    configuration: ViewConfiguration,
    view_ids: [usize; 3],
    weights: [f64; 3],
}

fn select(data: &Path, target: usize, out: &Path) -> CmdResult {
    let dataset = load_data(data)?;
    check_index(&dataset, target)?;
    let candidates: Vec<_> = dataset
        .ids(Split::Train)
        .into_iter()
        .filter(|&i| i != target)
        .map(|i| (i, dataset.views[i].camera.center()))
        .collect();
    let centers: Vec<_> = candidates.iter().map(|c| c.1).collect();
    let configuration = classify_configuration(&centers)?;
    let ws = select_views(&candidates, &dataset.views[target].camera.center(), ViewSelection::Delaunay)?;
    let sel = Selection {
        target_index: target,
        configuration,
        view_ids: ws.view_ids,
        weights: ws.weights,
    };
    println!("{:?} {:?}", sel.view_ids, sel.weights);
    Ok(vec![write_json(&sel, out)?])
}

#[derive(Serialize)]
struct AblationRow {
    #[serde(serialize_with = "serialize_metric")]
    psnr: f64,
    ssim: f64,
    loss: f64,
    steps: usize,
}

fn ablate(data: &Path, config: &Path, out: &Path) -> CmdResult {
    let dataset = load_data(data)?;
    let base = load_config(config)?;
    let eval_split = if dataset.ids(Split::Test).is_empty() {
        Split::Train
    } else {
        Split::Test
    };
    let mut rows = serde_json::Map::new();
    let mut written = Vec::new();
    for (name, cfg) in ablation_variants(&base) {
        log::info!("ablation variant {name}");
        let dir = out.join(name);
        let outcome = trainer::train(&dataset, &cfg, &TrainOptions { out_dir: Some(dir.clone()) })?;
        let report = trainer::evaluate(&outcome.checkpoint, &dataset, eval_split, None)?;
        println!("{name:12} psnr {:.3} ssim {:.4}", report.psnr_mean, report.ssim_mean);
        let row = AblationRow {
            psnr: report.psnr_mean,
            ssim: report.ssim_mean,
            loss: report.loss_mean,
            steps: cfg.steps,
        };
        rows.insert(name.to_string(), serde_json::to_value(row).context("serialising row")?);
        written.push(dir.join("checkpoint.bin"));
    }
    written.push(write_json(&rows, &out.join("ablation.json"))?);
    Ok(written)
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::MakeToy {
            out,
            scene,
            views,
            res,
            config,
            seed,
        } => make_toy(&out, scene, views, res, config, seed),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => train(&data, &config, &out, resume.as_deref()),
        Command::Render {
            checkpoint,
            data,
            view_index,
            out,
        } => render_view(&checkpoint, &data, view_index, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, split, &out),
        Command::SelectViews {
            data,
            target_index,
            out,
        } => select(&data, target_index, &out),
        Command::Ablate { data, config, out } => ablate(&data, &config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
