use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sctn::config::RunConfig;
use sctn::io::{self, FlowField};
use sctn::model::Sctn;
use sctn::train::{self, Trainer};
use sctn::{checkpoint, gradcheck, losses, synth};

#[derive(Parser)]
#[command(name = "sctn", about = "Scene flow from point cloud pairs", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scene seed (gen) or the training seed (train).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override such as `ot.epsilon=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset and its manifest.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and write a checkpoint, `<out>.best` and `<out>.log`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-scene metrics CSV and the aggregate.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the flow of one scene file.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the scene path with extension `.sff`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference checks of every differentiable stage.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Error-colored PLY of a scene and a predicted flow.
    ExportPly {
        #[arg(long)]
        data: PathBuf,
        /// Flow file from `infer`.
        #[arg(long, conflicts_with = "checkpoint")]
        flow: Option<PathBuf>,
        /// Predict the flow instead of reading one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Check(_) => 4,
        }
    }
}

type Outcome = Result<(), Failure>;

fn data<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Data(e.into()))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.set).map_err(|e| Failure::Usage(e.into()))?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    eprintln!("{}", cfg.canonical_json());
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Sctn, Failure> {
    let mut model = Sctn::new(&cfg.model(), 0).map_err(|e| Failure::Usage(e.into()))?;
    data(checkpoint::load(&mut model, path).with_context(|| format!("loading {}", path.display())))?;
    Ok(model)
}

fn gen(out: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    echo(&cfg);
    data(synth::generate_dataset(&cfg.scene, cfg.scenes, out))?;
    println!("wrote {} scenes to {}", cfg.scenes, out.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(data_path: &Path, out: &Path, common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    echo(&cfg);
    let scenes = data(io::load_manifest(&io::resolve_manifest(data_path)))?;
    let model = Sctn::new(&cfg.model(), cfg.train.seed).map_err(|e| Failure::Usage(e.into()))?;
    let mut trainer = data(Trainer::new(model, cfg.train.clone(), cfg.fsc.clone(), &scenes))?;
    println!("epoch\tstage\tEs\tEc\tlr\tepe3d");
    data(trainer.run(|e| println!("{}", e.line())))?;
    data(train::save_checkpoints(&mut trainer, out))?;
    let log = with_suffix(out, ".log");
    data(std::fs::write(&log, train::log_text(&trainer.log)).with_context(|| log.display().to_string()))?;
    Ok(())
}

fn eval_cmd(data_path: &Path, ckpt: &Path, out: Option<&Path>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    echo(&cfg);
    let model = load_model(&cfg, ckpt)?;
    let scenes = data(io::load_manifest(&io::resolve_manifest(data_path)))?;
    let (agg, rows) = data(train::evaluate(&model, &scenes))?;
    let csv = losses::metrics_csv(&rows);
    match out {
        Some(p) => data(std::fs::write(p, csv).with_context(|| p.display().to_string()))?,
        None => print!("{csv}"),
    }
    println!(
        "aggregate epe3d {:.6} acc3ds {:.6} acc3dr {:.6} outliers {:.6}",
        agg.epe3d, agg.acc3ds, agg.acc3dr, agg.outliers
    );
    Ok(())
}

fn predict(model: &Sctn, scene: &io::ScenePair) -> Result<FlowField, Failure> {
    let pred = data(model.predict(scene.p.points(), scene.q.points()))?;
    data(FlowField::new(pred.flow.to_points()))
}

fn infer(scene_path: &Path, ckpt: &Path, out: Option<&Path>, common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    echo(&cfg);
    let model = load_model(&cfg, ckpt)?;
    let scene = data(io::load_scene(scene_path))?;
    let flow = predict(&model, &scene)?;
    let out = out.map_or_else(|| scene_path.with_extension("sff"), Path::to_path_buf);
    data(io::save_flow(&flow, &out))?;
    println!("wrote {} flow vectors to {}", flow.len(), out.display());
    Ok(())
}

fn gradcheck_cmd(common: &Common) -> Outcome {
    let results = gradcheck::run_suite(common.seed.unwrap_or(0));
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<28} max error {:.3e}  {}",
            r.name,
            r.max_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn export_ply(scene_path: &Path, flow: Option<&Path>, ckpt: Option<&Path>, out: &Path, common: &Common) -> Outcome {
    let scene = data(io::load_scene(scene_path))?;
    let flow = match (flow, ckpt) {
        (Some(f), _) => data(io::load_flow(f))?,
        (None, Some(c)) => {
            let cfg = load_config(common)?;
            predict(&load_model(&cfg, c)?, &scene)?
        }
        (None, None) => {
            return Err(Failure::Usage(anyhow::anyhow!(
                "export-ply needs --flow or --checkpoint"
            )))
        }
    };
    data(io::export_error_ply(&scene, &flow, out))?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match &cli.cmd {
        Cmd::Gen { out, common } => gen(out, common),
        Cmd::Train { data, out, common } => train_cmd(data, out, common),
        Cmd::Eval {
            data,
            checkpoint,
            out,
            common,
        } => eval_cmd(data, checkpoint, out.as_deref(), common),
        Cmd::Infer {
            data,
            checkpoint,
            out,
            common,
        } => infer(data, checkpoint, out.as_deref(), common),
        Cmd::Gradcheck { common } => gradcheck_cmd(common),
        Cmd::ExportPly {
            data,
            flow,
            checkpoint,
            out,
            common,
        } => export_ply(data, flow.as_deref(), checkpoint.as_deref(), out, common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) => eprintln!("error: {e:#}"),
                Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Check(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
