//! `contrawr`: synthetic data, pretext training, linear probing and the
//! comparison table from one binary.
//!
//! Configuration is layered: built-in defaults, then `--config FILE`, then
//! any `--section.key value` overrides, then command flags, then `--seed`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use contrawr::augment::apply_method;
use contrawr::experiment::{ablate, compare, untrained_encoder, Sweep};
use contrawr::probe::{embed, evaluate, export_embeddings, fit_logistic, report};
use contrawr::signals::{clip_amplitude, generate_synthetic_dataset, save_epoch_file, split_subjects};
use contrawr::spectral::Stft;
use contrawr::store::{read_dataset_dir, verify_dataset_dir, write_dataset_dir};
use contrawr::training::{run_pretext, stream_rng};
use contrawr::{Arm, Checkpoint, Dataset, EmbeddingSet, Error, Method, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "contrawr", version, about = "Contrastive EEG representation learning")]
struct Cli {
    /// INI config file merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds the synthetic data, the subject split and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory (EPOC1 files + manifest.csv).
    Synth {
        /// Check the dataset already in --out instead of writing one.
        #[arg(long)]
        verify: bool,
    },
    /// Train the dual networks on the pretext group.
    Pretext {
        /// Dataset directory. Synthesised from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fit the logistic-regression probe on frozen embeddings.
    Probe {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "untrained", conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Probe a freshly initialised encoder.
        #[arg(long)]
        untrained: bool,
        /// Write training and test embeddings as CSV.
        #[arg(long)]
        export_embeddings: Option<PathBuf>,
    },
    /// Write before/after EPOC1 pairs for each augmentation.
    AugmentDemo {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which epoch of the dataset to augment.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Probe accuracy of every method over several seeds, as a markdown table.
    Compare {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also run ablation sweeps: sigma, temperature, delta, batch (all when empty).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        ablate: Option<Vec<String>>,
    },
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let name = arg.strip_prefix("--").unwrap_or("");
        let key = name.split('=').next().unwrap_or("");
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match name.split_once('=') {
            Some((_, v)) => v.to_string(),
            None => it
                .next()
                .ok_or_else(|| Error::Config {
                    key: key.to_string(),
                    message: "override needs a value".into(),
                })?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

fn build_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    match &cli.command {
        Command::Pretext { variant, epochs, .. } => {
            if let Some(v) = variant {
                cfg.set("loss.variant", v)?;
            }
            if let Some(n) = epochs {
                cfg.train.epochs = *n;
            }
        }
        _ => {}
    }
    if let Some(s) = cli.seed {
        cfg.synth.seed = s;
        cfg.split.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(data: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    Ok(match data {
        Some(dir) => read_dataset_dir(dir)?,
        None => generate_synthetic_dataset(&cfg.synth)?,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(cfg: &RunConfig, out: &Path, verify: bool) -> Result<()> {
    if verify {
        let n = verify_dataset_dir(out)?;
        println!("{n} epochs verified in {}", out.display());
        return Ok(());
    }
    let ds = generate_synthetic_dataset(&cfg.synth)?;
    let manifest = write_dataset_dir(&ds, out)?;
    write_text(&out.join("config.ini"), &cfg.to_ini())?;
    println!(
        "wrote {} epochs from {} subjects to {}",
        manifest.rows.len(),
        ds.subjects().len(),
        out.display()
    );
    Ok(())
}

fn pretext(cfg: &RunConfig, out: &Path, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let split = split_subjects(&ds, cfg.split.ratios, cfg.split.seed)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    write_text(&out.join("config.ini"), &cfg.to_ini())?;
    let outcome = run_pretext(&split, cfg, Some(out), resume)?;
    for row in &outcome.log {
        println!("epoch {} loss {:.6} ({:.1} s)", row.epoch, row.mean_loss, row.wall_seconds);
    }
    if let Some(p) = &outcome.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn concat(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<EmbeddingSet> {
    let join = |x: &[_], y: &[_]| [x, y].concat();
    Ok(EmbeddingSet::new(
        join(&a.embeddings, &b.embeddings),
        a.dim,
        [a.labels.as_slice(), &b.labels].concat(),
        [a.subject_ids.as_slice(), &b.subject_ids].concat(),
    )?)
}

fn probe(
    cfg: &RunConfig,
    out: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    export: Option<&Path>,
) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let split = split_subjects(&ds, cfg.split.ratios, cfg.split.seed)?;
    let (encoder, source) = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            ckpt.check_compatible(cfg)?;
            (ckpt.state.online.encoder, p.display().to_string())
        }
        None => (untrained_encoder(&split, cfg)?, "untrained".to_string()),
    };
    let stft = Stft::new(cfg.stft)?;
    let train = embed(&encoder, split.training.epochs(), &stft)?;
    let test = embed(&encoder, split.test.epochs(), &stft)?;
    let model = fit_logistic(&train, cfg.probe.max_iter, cfg.probe.l2, cfg.probe.standardize)?;
    let eval = evaluate(&model, &test)?;
    let text = format!(
        "encoder: {source}\ntrain_epochs: {}\ntest_epochs: {}\n{}\n# config\n{}",
        train.len(),
        test.len(),
        report(&model, &eval),
        cfg.to_ini()
    );
    let path = out.join("probe_report.txt");
    write_text(&path, &text)?;
    println!("accuracy {:.4} ({})", eval.accuracy, path.display());
    if let Some(p) = export {
        export_embeddings(&concat(&train, &test)?, p)?;
        println!("embeddings: {}", p.display());
    }
    Ok(())
}

fn augment_demo(cfg: &RunConfig, out: &Path, data: Option<&Path>, index: usize) -> Result<()> {
    let ds = load_data(data, cfg)?;
    let epoch = ds.epochs().get(index).ok_or_else(|| Error::Config {
        key: "index".into(),
        message: format!("dataset has {} epochs", ds.len()),
    })?;
    let policy = &cfg.augment;
    policy.validate(epoch.channels(), epoch.sample_rate_hz as f64)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (i, method) in Method::ALL.into_iter().enumerate() {
        let mut rng = stream_rng(cfg.train.seed, 0xde, index as u64, i as u64);
        let after = clip_amplitude(&apply_method(epoch, method, policy, &mut rng)?, policy.clip_bound)?;
        save_epoch_file(epoch, &out.join(format!("{method}_before.epc")))?;
        save_epoch_file(&after, &out.join(format!("{method}_after.epc")))?;
        let change = epoch
            .samples()
            .iter()
            .zip(after.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("{method}: max |after - before| = {change:.6}");
    }
    Ok(())
}

fn run_compare(
    cfg: &RunConfig,
    out: &Path,
    data: Option<&Path>,
    n_seeds: u64,
    base: u64,
    sweeps: Option<&[String]>,
) -> Result<()> {
    if n_seeds == 0 {
        return Err(Error::Config {
            key: "seeds".into(),
            message: "need at least one seed".into(),
        }
        .into());
    }
    let ds = load_data(data, cfg)?;
    let seeds: Vec<u64> = (base..base + n_seeds).collect();
    let table = compare(&ds, cfg, &Arm::TABLE, &seeds, |c| {
        eprintln!("{} seed {}: {:.4} ({:.1} s)", c.arm, c.seed, c.evaluation.accuracy, c.wall_seconds)
    })?;
    let mut md = table.to_markdown();
    if let Some(names) = sweeps {
        let names: Vec<&str> = if names.is_empty() {
            vec!["sigma", "temperature", "delta", "batch"]
        } else {
            names.iter().map(String::as_str).collect()
        };
        let sweeps = names.into_iter().map(Sweep::named).collect::<contrawr::Result<Vec<_>>>()?;
        let grid = ablate(&ds, cfg, &sweeps, &seeds, |label, c| {
            eprintln!("{label} seed {}: {:.4}", c.seed, c.evaluation.accuracy)
        })?;
        md.push('\n');
        md.push_str(&grid.to_markdown());
    }
    md.push_str("\n<details><summary>config</summary>\n\n```ini\n");
    md.push_str(&cfg.to_ini());
    md.push_str("```\n</details>\n");
    let path = out.join("compare.md");
    write_text(&path, &md)?;
    print!("{md}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Parameter(_) | Error::Compatibility(_)) => 2,
        Some(Error::Format { .. } | Error::Split(_) | Error::DegenerateData(_) | Error::Io { .. }) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = build_config(&cli, overrides)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth { verify } => synth(&cfg, out, *verify),
        Command::Pretext { data, resume, .. } => pretext(&cfg, out, data.as_deref(), resume.as_deref()),
        Command::Probe {
            data,
            checkpoint,
            export_embeddings,
            ..
        } => probe(&cfg, out, data.as_deref(), checkpoint.as_deref(), export_embeddings.as_deref()),
        Command::AugmentDemo { data, index } => augment_demo(&cfg, out, data.as_deref(), *index),
        Command::Compare { data, seeds, ablate } => {
            run_compare(&cfg, out, data.as_deref(), *seeds, cli.seed.unwrap_or(0), ablate.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
