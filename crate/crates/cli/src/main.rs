use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use befunet::config::RunConfig;
use befunet::data::{generate_synthetic, write_corpus, Manifest, Sample, SyntheticConfig};
use befunet::gradsuite;
use befunet::lcaf::attention_cost;
use befunet::model::Model;
use befunet::pnm;
use befunet::train::{evaluate_model, train};

#[derive(Parser)]
#[command(name = "befunet", version, about = "Train and evaluate the BEFUnet segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config; writes metrics.csv and best.ckpt to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest and print the metric report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment one PPM image into a PGM of class indices.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or one of: tensor, edge, body, lcaf, dlf, losses, model.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Random instances per elementary operation.
        #[arg(long, default_value_t = 5)]
        trials: u64,
    },
    /// Multiply-add counts of global and local cross-attention.
    Flops {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        h: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        w: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        c: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        hl: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        wl: u64,
        /// Print the projection and attention terms separately.
        #[arg(long)]
        verbose: bool,
    },
    /// Write a synthetic corpus with train and val manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Share of samples written to the val split.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Average five jittered boundary drawings into soft edge targets.
        #[arg(long)]
        fractional_edges: bool,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

/// Manifest paths in a config resolve against the config's directory.
fn config_relative(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn load_manifest(path: &Path, classes: usize) -> Result<Vec<Sample>> {
    let samples = Manifest::load(path)
        .and_then(|m| m.load_samples())
        .with_context(|| format!("loading manifest {}", path.display()))?;
    if let Some(c) = samples.iter().flat_map(|s| s.mask.iter()).find(|&&c| c as usize >= classes) {
        bail!(befunet::Error::Config(format!(
            "{} contains class {c} but the model has {classes} classes",
            path.display()
        )));
    }
    Ok(samples)
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let k = cfg.model.num_classes;
    let train_path = cfg
        .train_manifest
        .as_ref()
        .context("config has no train_manifest; run gen-data first")?;
    let train_set = load_manifest(&config_relative(config, train_path), k)?;
    let val_set = match &cfg.val_manifest {
        Some(p) => load_manifest(&config_relative(config, p), k)?,
        None => Vec::new(),
    };
    let out = out.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let log_path = out.join("metrics.csv");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let ckpt = out.join("best.ckpt");
    let mut model = Model::<f32>::new(&cfg.model, cfg.train.seed)?;
    let outcome = train(&mut model, &cfg.train, &train_set, &val_set, |records, improved, m| {
        for r in records {
            writeln!(log, "{}", r.csv())?;
            println!("{}", r.csv());
        }
        if improved {
            m.save(&ckpt)?;
        }
        Ok(())
    })?;
    if val_set.is_empty() {
        outcome.best.save(&ckpt)?;
    }
    println!("best val dice {:.4}; checkpoint {}", outcome.best_val_dice, ckpt.display());
    Ok(())
}

fn cmd_eval(config: &Path, checkpoint: &Path, manifest: &Path, report: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::<f32>::load(&cfg.model, checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let samples = load_manifest(manifest, cfg.model.num_classes)?;
    let table = evaluate_model(&model, &samples)?;
    let text = table.report();
    print!("{text}");
    if let Some(path) = report {
        fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_infer(config: &Path, checkpoint: &Path, image: &Path, output: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model = Model::<f32>::load(&cfg.model, checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let img = pnm::read_image::<f32>(image).with_context(|| format!("reading {}", image.display()))?;
    let mask = model.segment(&img)?;
    pnm::write_mask(output, img.shape()[0], img.shape()[1], &mask)?;
    Ok(())
}

fn cmd_gradcheck(module: &str, eps: f64, tol: f64, trials: u64) -> Result<()> {
    let results = gradsuite::run(module, eps, trials)?;
    let mut failed = 0;
    for r in &results {
        let ok = r.passed(tol);
        failed += usize::from(!ok);
        println!(
            "{} {}/{}: {} entries, max rel error {:.3e}{}",
            if ok { "PASS" } else { "FAIL" },
            r.module,
            r.name,
            r.report.checked,
            r.report.max_rel_error,
            if ok { String::new() } else { format!(" at {}", r.report.worst) }
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_flops(h: u64, w: u64, c: u64, hl: u64, wl: u64, verbose: bool) -> Result<()> {
    if hl > h || wl > w {
        bail!("window {hl}x{wl} exceeds the {h}x{w} grid");
    }
    let (gca, lca) = attention_cost(h, w, c, hl, wl);
    println!("gca={gca} lca={lca} ratio={:?}", lca as f64 / gca as f64);
    if verbose {
        let proj = 4 * h * w * c * c;
        println!("gca: projections={proj} attention={}", gca - proj);
        println!("lca: projections={proj} attention={}", lca - proj);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(out: &Path, count: usize, h: usize, w: usize, k: usize, seed: u64, val_fraction: f64, fractional: bool) -> Result<()> {
    if !(0.0..1.0).contains(&val_fraction) {
        bail!("val-fraction must lie in [0, 1)");
    }
    let mut cfg = SyntheticConfig::new(count, h, w, k, seed);
    if fractional {
        cfg = cfg.fractional();
    }
    let samples = generate_synthetic(&cfg)?;
    let n_val = (count as f64 * val_fraction).round() as usize;
    let (train_set, val_set) = samples.split_at(count - n_val);
    let t = write_corpus(out, "train", Some(seed), train_set)?;
    println!("wrote {} samples to {}", train_set.len(), t.display());
    if !val_set.is_empty() {
        let v = write_corpus(out, "val", Some(seed), val_set)?;
        println!("wrote {} samples to {}", val_set.len(), v.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Eval { config, checkpoint, manifest, report } => cmd_eval(&config, &checkpoint, &manifest, report),
        Command::Infer { config, checkpoint, image, output } => cmd_infer(&config, &checkpoint, &image, &output),
        Command::Gradcheck { module, eps, tol, trials } => cmd_gradcheck(&module, eps, tol, trials),
        Command::Flops { h, w, c, hl, wl, verbose } => cmd_flops(h, w, c, hl, wl, verbose),
        Command::GenData { out, count, height, width, classes, seed, val_fraction, fractional_edges } => {
            cmd_gen_data(&out, count, height, width, classes, seed, val_fraction, fractional_edges)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
