//! `cmrlab`: generate data, train, evaluate and benchmark from the shell.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmrlab::bench::{export_error_maps, run_bench};
use cmrlab::config::ExperimentConfig;
use cmrlab::kspace::{gen_dataset, load_dataset, simulate_dataset, Dataset, MaskPattern};
use cmrlab::metrics::{aggregate_csv, per_image_csv, write_text};
use cmrlab::trainer::{evaluate, load_model, save_checkpoint, TrainLog, Trainer};
use cmrlab::unet::model_param_count;
use cmrlab::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cmrlab", version, about = "Undersampled cardiac MRI reconstruction laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts. Flags override the config file, which
/// overrides the built-in defaults.
#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config [default: built-in defaults]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation and training [default: from config, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: from config, 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Attention kind: none, simam, se, cbam, gct, l2norm, hadamard, cmratt [default: from config, none]
    #[arg(long)]
    attention: Option<String>,
    /// Acceleration factor R [default: from config, 4]
    #[arg(long)]
    accel: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate undersampled phantom pairs into a dataset directory
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of training pairs [default: from config, 200]
        #[arg(long)]
        count: Option<usize>,
        /// Number of held-out pairs [default: from config, 50]
        #[arg(long)]
        test_count: Option<usize>,
        /// Image size, a power of two [default: from config, 64]
        #[arg(long)]
        size: Option<usize>,
        /// Central fully sampled lines [default: from config, 16]
        #[arg(long)]
        acs: Option<usize>,
        /// Use random instead of equispaced line selection [default: false]
        #[arg(long)]
        random_mask: bool,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and save a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: simulate in memory from the config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint, loss curve and metrics
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: simulate in memory from the config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score [default: test]
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory for the metric CSVs
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and rank every configured attention kind
    Bench {
        #[command(flatten)]
        common: Common,
        /// Dataset directory [default: simulate in memory from the config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Path of the ranked CSV table; sibling files go next to it
        #[arg(long)]
        out: PathBuf,
    },
    /// Print total and attention parameter counts
    Params {
        #[command(flatten)]
        common: Common,
        /// Count at the base-32, depth-4, 256x256 reference configuration [default: false]
        #[arg(long)]
        reference: bool,
    },
    /// Write prediction, target and normalised error maps as PGM images
    ExportMaps {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory [default: simulate in memory from the config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to export [default: test]
        #[arg(long, default_value = "test")]
        split: String,
        /// Export at most this many images [default: all]
        #[arg(long)]
        limit: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = &common.attention {
        cfg.model.attention = a.clone();
    }
    if let Some(r) = common.accel {
        cfg.data.accel = r;
    }
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>, split: &str) -> Result<Dataset> {
    match dir {
        Some(d) => load_dataset(d, split),
        None => {
            let count = if split == "train" { cfg.data.count } else { cfg.data.test_count };
            if count == 0 {
                return Err(Error::Config(format!("no '{split}' items configured")));
            }
            simulate_dataset(&cfg.data, split, count)
        }
    }
}

fn check_size(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if let Some((h, w)) = data.image_size() {
        if (h, w) != (cfg.data.size, cfg.data.size) {
            return Err(Error::Config(format!(
                "dataset images are {h}x{w} but data.size is {}",
                cfg.data.size
            )));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            common,
            count,
            test_count,
            size,
            acs,
            random_mask,
            out,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(c) = count {
                cfg.data.count = c;
            }
            if let Some(c) = test_count {
                cfg.data.test_count = c;
            }
            if let Some(s) = size {
                cfg.data.size = s;
            }
            if let Some(a) = acs {
                cfg.data.acs = a;
            }
            if random_mask {
                cfg.data.pattern = MaskPattern::Random;
            }
            cfg.validate()?;
            let manifest = gen_dataset(&cfg.data, &out)?;
            cfg.save_to_dir(&out)?;
            eprintln!(
                "wrote {} pairs to {} (mean effective acceleration {:.3})",
                manifest.items.len(),
                out.display(),
                manifest.effective_accel
            );
        }
        Command::Train { common, data, out } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let train = dataset(&cfg, data.as_deref(), "train")?;
            check_size(&cfg, &train)?;
            let test = dataset(&cfg, data.as_deref(), "test").ok();
            let mut trainer = Trainer::new(&cfg.unet()?, &cfg.train)?;
            let mut log = TrainLog::default();
            let eval = test.as_ref().map(|t| (t, &cfg.metrics));
            trainer.fit(&train, eval, &mut log)?;
            for e in &log.evals {
                eprintln!("epoch {}: test ssim {:.6} psnr {:.3}", e.epoch, e.ssim, e.psnr);
            }
            cfg.save_to_dir(&out)?;
            save_checkpoint(&trainer, &out.join("checkpoint"))?;
            write_text(&out.join("loss.csv"), &log.loss_csv())?;
            if let Some(test) = &test {
                let report = evaluate(&trainer.model, test, &cfg.metrics)?;
                write_text(&out.join("metrics.csv"), &aggregate_csv(&[report.model.clone(), report.zero_filled]))?;
                write_text(&out.join("per_image.csv"), &per_image_csv(&report.model))?;
                eprintln!("test ssim {:.6} psnr {:.3}", report.model.ssim, report.model.psnr);
            }
            eprintln!("trained {} steps; outputs in {}", trainer.state.step, out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = resolve(&common)?;
            let model = load_model(&checkpoint)?;
            let set = dataset(&cfg, data.as_deref(), &split)?;
            let report = evaluate(&model, &set, &cfg.metrics)?;
            cfg.save_to_dir(&out)?;
            write_text(&out.join("metrics.csv"), &aggregate_csv(&[report.model.clone(), report.zero_filled.clone()]))?;
            write_text(&out.join("per_image.csv"), &per_image_csv(&report.model))?;
            write_text(&out.join("per_image_zero_filled.csv"), &per_image_csv(&report.zero_filled))?;
            println!(
                "{}: psnr {:.6} mse {:.6} ssim {:.6} ({} images, ssim {})",
                report.model.method,
                report.model.psnr,
                report.model.mse,
                report.model.ssim,
                report.model.rows.len(),
                report.model.ssim_mode
            );
        }
        Command::Bench { common, data, out } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let spec = cfg.bench_spec()?;
            let train = dataset(&cfg, data.as_deref(), "train")?;
            check_size(&cfg, &train)?;
            let test = dataset(&cfg, data.as_deref(), "test")?;
            let table = run_bench(&spec, &train, &test, &|r| match &r.outcome {
                Ok(m) => eprintln!("{} seed {}: ssim {:.6}", r.method, r.seed, m.ssim),
                Err(e) => eprintln!("{} seed {}: failed: {e}", r.method, r.seed),
            })?;
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.save_to_dir(dir)?;
            table.write(dir, Some(&out))?;
            print!("{}", table.csv());
        }
        Command::Params { common, reference } => {
            let mut cfg = resolve(&common)?;
            if reference {
                cfg.model.base_channels = 32;
                cfg.model.depth = 4;
                cfg.data.size = 256;
            }
            let unet = cfg.unet()?;
            let model = cmrlab::unet::build_unet(&unet, &cmrlab::RngStream::new(0, "count"))?;
            let (total, overhead) = model_param_count(&model);
            println!("attention={} total={total} overhead={overhead}", unet.attention.name());
        }
        Command::ExportMaps {
            common,
            checkpoint,
            data,
            split,
            limit,
            out,
        } => {
            let cfg = resolve(&common)?;
            let model = load_model(&checkpoint)?;
            let set = dataset(&cfg, data.as_deref(), &split)?;
            let maps = export_error_maps(&model, &set, &out, limit)?;
            cfg.save_to_dir(&out)?;
            let mut summary = String::from("id,model_mae,input_mae\n");
            for m in &maps {
                summary.push_str(&format!("{},{:.6},{:.6}\n", m.id, m.model_mae, m.input_mae));
            }
            write_text(&out.join("summary.csv"), &summary)?;
            eprintln!("wrote maps for {} images to {}", maps.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
