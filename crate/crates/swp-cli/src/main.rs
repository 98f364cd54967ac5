//! `swp`: train stripe-prunable networks, threshold them, export and run the
//! sparse inference model, and drive the comparison/ablation experiments.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swp_core::checkpoint::{load_checkpoint, save_checkpoint};
use swp_core::data::{load_dataset, make_batch, synth, DatasetKind, DatasetSource};
use swp_core::export::{export_model, verify_export};
use swp_core::format::{load_model, save_model};
use swp_core::net::Network;
use swp_core::prune::{cost_report, shape_histogram};
use swp_core::sparsity::{apply_threshold, SparsityConfig, SparsityMode};
use swp_core::stripe::run_model;
use swp_core::train::{
    ablation_csv, ablation_grid, compare_modes, epoch_csv, parse_config, sweep_csv, train, Arch,
    TrainConfig,
};
use swp_core::{Error, Tensor4};

#[derive(Parser)]
#[command(name = "swp", version, about = "Stripe-wise pruning toolkit")]
struct Cli {
    /// RNG seed for initialization, shuffling and augmentation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory holding the dataset files.
    #[arg(long, global = true, default_value = "data")]
    data_dir: PathBuf,
    /// Output directory (training artifacts) or file (export/report).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "tiny-vgg")]
    arch: String,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Sparsity penalty weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Freeze threshold applied at each epoch end.
    #[arg(long)]
    delta: Option<f64>,
    /// standard | shape-only | control
    #[arg(long)]
    mode: Option<String>,
    /// stripe | group | lasso-weights
    #[arg(long)]
    sparsity_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate drops 10x.
    #[arg(long)]
    milestones: Option<String>,
    /// Cap on training records (0 = all).
    #[arg(long)]
    train_limit: Option<usize>,
    /// Cap on test records (0 = all).
    #[arg(long)]
    test_limit: Option<usize>,
    /// Enable random crop (pad 4) and, on CIFAR-10, horizontal flip.
    #[arg(long)]
    augment: bool,
    /// Extra penalty-free epochs after the main schedule.
    #[arg(long, value_name = "N")]
    finetune: Option<usize>,
    /// Write a synthetic MNIST-format dataset of N train records into
    /// --data-dir first (test split is N/5, floor 10).
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with a learnable filter skeleton.
    Train(TrainArgs),
    /// Apply the freeze threshold to a trained checkpoint.
    Prune {
        /// Checkpoint produced by `train` (model.swpc).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: f64,
        /// stripe | group | lasso-weights
        #[arg(long, default_value = "stripe")]
        sparsity_mode: String,
    },
    /// Convert a checkpoint into a stripe inference model (.swpm).
    Export {
        #[arg(long)]
        model: PathBuf,
        /// Keep fully-pruned filters as zero channels instead of removing
        /// them.
        #[arg(long)]
        no_compact: bool,
    },
    /// Run an exported model over the test split and report accuracy.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Cap on test records (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Time the dense and stripe kernels across a sparsity grid.
    Bench {
        /// Comma-separated fractions of stripes removed.
        #[arg(long, default_value = "0.0,0.25,0.5,0.75,0.9")]
        sparsities: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Train once per (alpha, delta) pair and tabulate cost vs accuracy.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated alpha values.
        #[arg(long)]
        alphas: String,
        /// Comma-separated delta values.
        #[arg(long)]
        deltas: String,
    },
    /// Compare stripe, group, and lasso-weights regularizers on one budget.
    Compare {
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated thresholds swept after training.
        #[arg(long, default_value = "0.01,0.05,0.1,0.2")]
        deltas: String,
    },
    /// Print the parameter/FLOP accounting of an exported model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Emit `layer.metric value` lines instead of the table.
        #[arg(long)]
        machine: bool,
        /// Also print the per-layer stripe shape histogram.
        #[arg(long)]
        histogram: bool,
    },
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} value '{}'", p.trim())))
        })
        .collect()
}

fn build_train_config(cli: &Cli, args: &TrainArgs) -> Result<TrainConfig, Error> {
    let arch: Arch = args.arch.parse()?;
    let dataset: DatasetKind = args.dataset.parse()?;
    let mut cfg = TrainConfig::desk(arch, dataset, &cli.data_dir);
    cfg.seed = cli.seed;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg = parse_config(&text, cfg)?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(m) = &args.milestones {
        cfg.milestones = m
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad milestone '{}'", p.trim())))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(t) = args.train_limit {
        cfg.train_limit = t;
    }
    if let Some(t) = args.test_limit {
        cfg.test_limit = t;
    }
    if args.augment {
        cfg.augment = true;
    }
    if let Some(f) = args.finetune {
        cfg.finetune_epochs = f;
    }
    if let Some(m) = &args.mode {
        cfg.mode = m.parse()?;
    }
    let alpha = args.alpha.unwrap_or(cfg.sparsity.alpha);
    let delta = args.delta.unwrap_or(cfg.sparsity.delta);
    let mode = match &args.sparsity_mode {
        Some(m) => m.parse::<SparsityMode>()?,
        None => cfg.sparsity.mode,
    };
    cfg.sparsity = SparsityConfig::new(alpha, delta, mode)?;
    cfg.validate()?;
    Ok(cfg)
}

fn maybe_synthesize(cfg: &TrainConfig, synth_n: Option<usize>) -> Result<(), Error> {
    if let Some(n) = synth_n {
        if cfg.dataset != DatasetKind::Mnist {
            return Err(Error::Config("--synth only produces MNIST-format data".into()));
        }
        synth::write_synthetic_mnist(&cfg.data_dir, n, (n / 5).max(10), cfg.seed)?;
    }
    Ok(())
}

fn write_out(dir: &PathBuf, name: &str, contents: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn infer_accuracy(
    model: &swp_core::stripe::StripeModel,
    dataset: DatasetKind,
    data_dir: &PathBuf,
    limit: usize,
) -> Result<f64, Error> {
    let source = {
        let mut s = DatasetSource::new(dataset, data_dir);
        s.augment.crop_pad4 = false;
        s.augment.hflip = false;
        s
    };
    let mut ds = load_dataset(&source)?;
    if limit > 0 {
        ds.test.truncate(limit);
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.test.len()).collect();
    for chunk in indices.chunks(64) {
        let (x, labels) = make_batch(&ds.test, chunk, &source.mean, &source.std, None);
        let logits = run_model(model, &x)?;
        for (b, &label) in labels.iter().enumerate() {
            if swp_core::aux::argmax_row(logits.row(b)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.test.len().max(1) as f64)
}

fn sample_batch(net: &Network) -> Tensor4 {
    let (c, h, w) = net.in_shape;
    let data = (0..2 * c * h * w).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
    Tensor4::from_vec(2, c, h, w, data)
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train(args) => {
            let cfg = build_train_config(&cli, args)?;
            maybe_synthesize(&cfg, args.synth)?;
            let outcome = train(&cfg)?;
            let csv = epoch_csv(&outcome.rows);
            let csv_path = write_out(&cli.out, "metrics.csv", &csv)?;
            let ckpt = cli.out.join("model.swpc");
            save_checkpoint(&outcome.net, &ckpt)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "epoch {}: loss {:.4}, penalty {:.4}, test_acc {:.4}, frozen {}/{}",
                    last.epoch,
                    last.data_loss,
                    last.penalty,
                    last.test_acc,
                    last.frozen_stripes,
                    outcome.net.total_stripe_count()
                );
            }
            println!("metrics: {}", csv_path.display());
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Prune { model, delta, sparsity_mode } => {
            let mut net = load_checkpoint(model)?;
            let cfg = SparsityConfig::new(0.0, *delta, sparsity_mode.parse()?)?;
            let newly = apply_threshold(&mut net, &cfg);
            fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
            let out = cli.out.join("model.swpc");
            save_checkpoint(&net, &out)?;
            println!(
                "froze {newly} new stripes ({}/{} total); wrote {}",
                net.frozen_stripe_count(),
                net.total_stripe_count(),
                out.display()
            );
        }
        Command::Export { model, no_compact } => {
            let mut net = load_checkpoint(model)?;
            let sample = sample_batch(&net);
            let diff = verify_export(&mut net, &sample, 1e-8)?;
            let exported = export_model(&net, !no_compact);
            fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
            let out = cli.out.join("model.swpm");
            save_model(&exported, &out)?;
            println!("fold check max logit diff {diff:.3e}; wrote {}", out.display());
        }
        Command::Infer { model, dataset, limit } => {
            let m = load_model(model)?;
            let acc = infer_accuracy(&m, dataset.parse()?, &cli.data_dir, *limit)?;
            println!("test_acc {acc:.4}");
        }
        Command::Bench { sparsities, reps } => {
            let grid = parse_list(sparsities, "sparsity")?;
            let cfg = swp_core::bench::BenchConfig {
                reps: *reps,
                seed: cli.seed,
                ..Default::default()
            };
            let rows = swp_core::bench::run_bench(&cfg, &grid);
            let csv = swp_core::bench::bench_csv(&rows);
            print!("{csv}");
            if rows.iter().any(|r| !r.checksum_ok) {
                return Err(Error::Config("kernel outputs disagreed beyond 1e-6".into()));
            }
        }
        Command::Ablate { train: targs, alphas, deltas } => {
            let cfg = build_train_config(&cli, targs)?;
            maybe_synthesize(&cfg, targs.synth)?;
            let alphas = parse_list(alphas, "alpha")?;
            let deltas = parse_list(deltas, "delta")?;
            if alphas.is_empty() || deltas.is_empty() {
                return Err(Error::Config("alphas and deltas must be non-empty".into()));
            }
            let rows = ablation_grid(&cfg, &alphas, &deltas)?;
            let csv = ablation_csv(&rows);
            print!("{csv}");
            write_out(&cli.out, "ablation.csv", &csv)?;
        }
        Command::Compare { train: targs, deltas } => {
            let cfg = build_train_config(&cli, targs)?;
            maybe_synthesize(&cfg, targs.synth)?;
            let deltas = parse_list(deltas, "delta")?;
            let rows = compare_modes(&cfg, &deltas)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            for r in &rows {
                if r.zeroed_layers > 0 {
                    println!(
                        "# note: {} at delta {} leaves {} conv layer(s) with zero stripes",
                        r.mode.as_str(),
                        r.delta,
                        r.zeroed_layers
                    );
                }
            }
            write_out(&cli.out, "compare.csv", &csv)?;
        }
        Command::Report { model, machine, histogram } => {
            let m = load_model(model)?;
            let report = cost_report(&m, (m.in_h, m.in_w));
            if *machine {
                print!("{}", report.machine_lines());
            } else {
                print!("{}", report.text_table());
            }
            if *histogram {
                for (li, hist) in shape_histogram(&m).iter().enumerate() {
                    println!("layer {li} stripe shapes (mask: frequency):");
                    for (mask, freq) in hist {
                        println!("  {mask:09b}: {freq}");
                    }
                }
            }
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Integrity { .. }
        | Error::DataFormat { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
