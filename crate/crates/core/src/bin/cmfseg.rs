use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmfseg::cli::{
    cmd_evaluate, cmd_fit_prior, cmd_oracle, cmd_phantom, cmd_segment, cmd_training_set, OutDir, SegmentArgs,
    SliceSpec,
};
use cmfseg::config::RunConfig;
use cmfseg::kv::KeyValues;
use cmfseg::{Error, Result};

/// Continuous max-flow segmentation with statistical shape priors.
#[derive(Parser, Debug)]
#[command(name = "cmfseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override `key=value`; repeatable, applied after the file in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom: ground truth, activity, noisy volume, probability map.
    Phantom {
        /// Write this many defect-free training masks instead.
        #[arg(long, value_name = "N")]
        training: Option<usize>,
    },
    /// Fit a shape model to binary masks.
    FitPrior {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
        /// `gaussian` or `kde` (overrides `fit.kind`).
        #[arg(long)]
        kind: Option<String>,
        /// Overrides `fit.modes`.
        #[arg(long)]
        modes: Option<usize>,
    },
    /// Segment a probability map, with a shape prior when a model is given.
    Segment {
        prob: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Background volume of the overlay (default: the probability map).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Render an overlay of slice `AXIS[:INDEX]` (middle slice by default).
        #[arg(long, value_name = "AXIS[:INDEX]")]
        overlay: Option<String>,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
    },
    /// Exact discrete min-cut of a small probability map.
    #[command(hide = true)]
    Oracle { prob: PathBuf },
}

fn overrides(common: &Common, command: &Command) -> Result<KeyValues> {
    let mut kv = KeyValues::new();
    for item in &common.set {
        let Some((k, v)) = item.split_once('=') else {
            return Err(Error::Invalid {
                module: "cli",
                msg: format!("--set expects KEY=VALUE, got {item:?}"),
            });
        };
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed.to_string());
    }
    if let Command::FitPrior { kind, modes, .. } = command {
        if let Some(k) = kind {
            kv.set("fit.kind", k.as_str());
        }
        if let Some(m) = modes {
            kv.set("fit.modes", m.to_string());
        }
    }
    Ok(kv)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Invalid {
                module: "cli",
                msg: "--threads must be ≥ 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid {
                module: "cli",
                msg: e.to_string(),
            })?;
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides(common, &cli.command)?)?;
    println!("# resolved configuration");
    print!("{}", cfg.to_kv().to_text());
    let Some(dir) = &common.out else {
        return Err(Error::Invalid {
            module: "cli",
            msg: "--out <dir> is required".into(),
        });
    };
    let out = OutDir::new(dir, common.force);

    match &cli.command {
        Command::Phantom { training: None } => {
            for p in cmd_phantom(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Phantom { training: Some(n) } => {
            for p in cmd_training_set(&cfg, *n, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::FitPrior { masks, .. } => {
            let (model, path) = cmd_fit_prior(&cfg, masks, &out)?;
            println!("N = {}", model.n_samples());
            println!("m = {}", model.rank());
            println!("eigenvalues = {:?}", model.eigenvalues());
            println!("lambda_perp = {}", model.lambda_perp());
            match model.sigma() {
                Some(s) => println!("sigma = {s}"),
                None => println!("sigma = none"),
            }
            println!("wrote {}", path.display());
        }
        Command::Segment {
            prob,
            model,
            image,
            overlay,
        } => {
            let args = SegmentArgs {
                prob: prob.clone(),
                model: model.clone(),
                image: image.clone(),
                overlay: overlay.as_deref().map(str::parse::<SliceSpec>).transpose()?,
            };
            let res = cmd_segment(&cfg, &args, &out)?;
            println!("foreground voxels: plain {} final {}", res.plain.count_nonzero(), res.mask.count_nonzero());
            for r in &res.trace {
                println!(
                    "outer {}: cut {:.6} shape {:.6} objective {:.6} ({} cmf iterations)",
                    r.iter, r.cut_energy, r.shape_energy, r.objective, r.cmf_iters
                );
            }
            for p in &res.files {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate { pred, gt } => {
            let (report, path) = cmd_evaluate(pred, gt, &out)?;
            let m = report.mean;
            println!(
                "mean over {} cases: precision {:.4} recall {:.4} iou {:.4} dice {:.4} accuracy {:.4}",
                report.cases.len(),
                m.precision,
                m.recall,
                m.iou,
                m.dice,
                m.accuracy
            );
            println!("wrote {}", path.display());
        }
        Command::Oracle { prob } => {
            let (value, path) = cmd_oracle(&cfg, prob, &out)?;
            println!("min cut = {value}");
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR: cli: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {}: {}", e.module(), e.to_string().replace('\n', " "));
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
