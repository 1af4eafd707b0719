use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};
use glasskit::config::RunConfig;
use glasskit::data::{generate_dataset, Dataset, DatasetManifest, SceneConfig};
use glasskit::error::{Error, ErrorClass, Result};
use glasskit::io::{load_grey, load_image, load_mask, save_grey, write_gldt};
use glasskit::labelkit::decouple;
use glasskit::maps::PredictionMap;
use glasskit::metrics::{evaluate_dataset, MetricsReport};
use glasskit::network::GlassNet;
use glasskit::neural::checkpoint::Checkpoint;
use glasskit::neural::Real;
use glasskit::trainer::{predict_image, train, Precision, TrainSetup};
use glasskit::{gradcheck, par};

/// Glass detection toolkit.
#[derive(Debug, Parser)]
#[command(name = "glasskit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (images/, masks/, manifest.txt).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split every mask in a directory into boundary and interior labels.
    Decouple {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a directory of probability maps against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; JSON if the name ends in .json, else key: value lines.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the probability map of one image as an 8-bit PNG.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "no PNG files"));
    }
    Ok(files)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let cfg = SceneConfig {
        size,
        seed,
        ..SceneConfig::default()
    };
    let manifest = generate_dataset(out, count, &cfg)?;
    println!("wrote {} scenes to {}", manifest.len(), out.display());
    Ok(())
}

fn decouple_dir(gt: &Path, out: &Path) -> Result<()> {
    let files = png_files(gt)?;
    for sub in ["bl", "dl"] {
        create_dir(&out.join(sub))?;
    }
    for path in &files {
        let labels = decouple(&load_mask(path)?);
        let name = path.file_name().unwrap_or_default();
        let stem = Path::new(name).with_extension("gldt");
        for (sub, map) in [("bl", &labels.interior), ("dl", &labels.boundary)] {
            save_grey(&out.join(sub).join(name), map)?;
            write_gldt(&out.join(sub).join(&stem), map)?;
        }
    }
    println!("decoupled {} masks into {}", files.len(), out.display());
    Ok(())
}

fn train_run<T: Real>(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(data)?;
    let (train_m, val_m) = manifest.split(cfg.data.val_fraction)?;
    let size = cfg.net.input_size;
    let train_set = Dataset::load(&train_m, size, cfg.data.cache)?;
    let val_set = if val_m.is_empty() {
        None
    } else {
        Some(Dataset::load(&val_m, size, cfg.data.cache)?)
    };
    create_dir(out)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut net = GlassNet::<T>::new(cfg.net.clone(), cfg.train.init_seed())?;
    let setup = TrainSetup {
        train: &train_set,
        val: val_set.as_ref(),
        out_dir: Some(out),
        augment: cfg.data.augment,
    };
    let outcome = train(&mut net, &setup, &cfg.train, &mut |line| println!("{line}"))?;
    if let Some(best) = outcome.best {
        println!("best iter {} iou {:.4}", best.iter, best.report.iou);
    }
    Ok(())
}

fn report_json(r: &MetricsReport) -> String {
    let doc = serde_json::json!({
        "acc": r.acc,
        "iou": r.iou,
        "fbeta": r.f_beta,
        "mae": r.mae,
        "ber": r.ber,
        "n_images": r.image_count,
    });
    format!("{doc:#}\n")
}

fn eval_dirs(pred: &Path, gt: &Path, report: Option<&Path>) -> Result<()> {
    let mut pairs = Vec::new();
    for gt_path in png_files(gt)? {
        let pred_path = pred.join(gt_path.file_name().unwrap_or_default());
        let p = PredictionMap::new(load_grey(&pred_path)?)?;
        pairs.push((p, load_mask(&gt_path)?));
    }
    let r = evaluate_dataset(&pairs)?;
    print!("{}", r.format_table());
    if let Some(path) = report {
        let text = if path.extension().is_some_and(|x| x == "json") {
            report_json(&r)
        } else {
            r.to_key_value()
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn predict(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let net = GlassNet::<f32>::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let pred = predict_image(&net, &load_image(image)?)?;
    save_grey(out, pred.map())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let results = gradcheck::run_suite(seed)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    for r in &results {
        println!("{r}");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, count, size, seed } => synth(&out, count, size, seed),
        Command::Decouple { gt, out } => decouple_dir(&gt, &out),
        Command::Train { data, config, out } => {
            let cfg = RunConfig::load(&config)?;
            match cfg.train.precision {
                Precision::F32 => train_run::<f32>(&cfg, &data, &out),
                Precision::F64 => train_run::<f64>(&cfg, &data, &out),
            }
        }
        Command::Eval { pred, gt, report } => eval_dirs(&pred, &gt, report.as_deref()),
        Command::Predict { ckpt, image, out } => predict(&ckpt, &image, &out),
        Command::Gradcheck { seed } => run_gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return ExitCode::from(1);
        }
    };
    if let Some(n) = std::env::var("GLASSKIT_THREADS").ok().and_then(|v| v.parse().ok()) {
        par::init_threads(n);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Io => 2,
                ErrorClass::Validation => 3,
            })
        }
    }
}
