use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use slider_forge::config::AppConfig;
use slider_forge::engine::{parse_slider_arg, SliderEngine};
use slider_forge::eval::{ablation_summary, evaluate_checkpoint, run_ablation, AblationArm, EvalReport};
use slider_forge::image_io::write_png;
use slider_forge::trainer::{load_checkpoint, save_checkpoint, train_slider_with};
use slider_forge::{service, Result};

#[derive(Parser)]
#[command(name = "slider-forge", version, about = "Train, evaluate and serve low-rank concept sliders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a slider and write its checkpoint and loss history.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render base and edited images for one prompt and seed.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        prompt: String,
        /// NAME:SCALE, repeatable.
        #[arg(long = "slider", allow_hyphen_values = true)]
        sliders: Vec<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a slider over the configured scale grid, or run the loss ablation.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Required unless --ablation is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ablation: bool,
        /// Report directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the JSON API over the configured checkpoint directory.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => train(&AppConfig::load(&config)?),
        Command::Generate { config, checkpoints, prompt, sliders, seed, out, steps } => {
            let cfg = AppConfig::load(&config)?;
            let mut engine = SliderEngine::new(&cfg)?;
            for path in &checkpoints {
                engine.load_checkpoint(path)?;
            }
            let sliders = sliders.iter().map(|s| parse_slider_arg(s)).collect::<Result<Vec<_>>>()?;
            let generation = engine.generate(&prompt, seed, steps, &sliders, true)?;
            std::fs::create_dir_all(&out)?;
            write_png(&out.join("base.png"), generation.base.as_ref().expect("base requested"))?;
            write_png(&out.join("edited.png"), &generation.edited)?;
            println!("wrote {} and {}", out.join("base.png").display(), out.join("edited.png").display());
            Ok(())
        }
        Command::Eval { config, checkpoint, ablation, out } => {
            let cfg = AppConfig::load(&config)?;
            eval(&cfg, checkpoint.as_deref(), ablation, out)
        }
        Command::Serve { config, port } => {
            let cfg = AppConfig::load(&config)?;
            let mut engine = SliderEngine::new(&cfg)?;
            let dir = cfg.checkpoint_dir();
            if dir.is_dir() {
                engine.load_dir(&dir)?;
            } else {
                log::warn!("checkpoint directory {} does not exist; serving the base model only", dir.display());
            }
            log::info!("loaded {} slider(s): {:?}", engine.slider_names().len(), engine.slider_names());
            let port = port.unwrap_or(cfg.serve.port);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(service::serve(Arc::new(engine), &cfg.serve.host, port))?;
            Ok(())
        }
    }
}

fn train(cfg: &AppConfig) -> Result<()> {
    let every = cfg.training.eval_every as u64;
    let checkpoint = train_slider_with(cfg, |r| {
        if r.step % every == 0 {
            log::info!("step {}: triplet {:.6} total {:.6}", r.step, r.triplet, r.total);
        }
    })?;
    let path = cfg.checkpoint_path();
    save_checkpoint(&checkpoint, &path)?;
    let history_path = with_suffix(&path, ".history.csv");
    std::fs::write(&history_path, checkpoint.history().to_csv())?;

    let last = checkpoint.history().last().expect("at least one step");
    let opt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.6}"));
    println!("checkpoint: {}", path.display());
    println!("history: {}", history_path.display());
    println!(
        "final step {}: triplet {:.6}, perceptual {}, adversarial {}, discriminator {}, total {:.6}",
        last.step,
        last.triplet,
        opt(last.perceptual),
        opt(last.adversarial),
        opt(last.discriminator),
        last.total
    );
    Ok(())
}

fn eval(cfg: &AppConfig, checkpoint: Option<&Path>, ablation: bool, out: Option<PathBuf>) -> Result<()> {
    let out = match (out, checkpoint) {
        (Some(dir), _) => dir,
        (None, Some(ck)) => ck.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => cfg.checkpoint_dir(),
    };
    std::fs::create_dir_all(&out)?;
    if ablation {
        if let Some(path) = checkpoint {
            load_checkpoint(path)?.check_compatible(cfg)?;
        }
        let results = run_ablation(cfg, &AblationArm::ALL)?;
        for r in &results {
            let slug: Vec<&str> = r.arm.label().split(|c: char| !c.is_ascii_alphanumeric()).filter(|s| !s.is_empty()).collect();
            let stem = format!("ablation-{}", slug.join("-"));
            write_report(cfg, &r.report, &out, &stem)?;
        }
        write_report(cfg, &ablation_summary(cfg, &results), &out, "ablation-summary")?;
    } else {
        let Some(path) = checkpoint else {
            return Err(slider_forge::Error::InvalidArgument {
                field: "checkpoint".into(),
                message: "required unless --ablation is given".into(),
            });
        };
        let ck = load_checkpoint(path)?;
        let report = evaluate_checkpoint(cfg, &ck)?;
        write_report(cfg, &report, &out, &format!("{}.eval", ck.name()))?;
    }
    Ok(())
}

fn write_report(cfg: &AppConfig, report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    let mut report = report.clone();
    if cfg.eval.include_timestamp {
        let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        report.meta.timestamp = Some(format!("unix:{secs}"));
    }
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report.to_table())?;
    std::fs::write(dir.join(format!("{stem}.json")), report.to_json())?;
    println!("wrote {}", txt.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
