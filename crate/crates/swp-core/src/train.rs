//! The training loop: seeded SGD with momentum, the sparsity penalty, the
//! per-epoch threshold-freeze pass, and the experiment drivers built on top
//! (ablation grid, regularizer comparison).

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aux::{argmax_row, softmax_xent};
use crate::data::{load_dataset, make_batch, Dataset, DatasetKind, DatasetSource, Split};
use crate::error::{Error, Result};
use crate::export::export_model;
use crate::net::{tiny_resnet, tiny_vgg, Network, UpdateMask};
use crate::prune::cost_report;
use crate::sparsity::{
    accumulate_penalty_grads, apply_threshold, penalty_value, SparsityConfig, SparsityMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    TinyVgg,
    TinyResnet,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::TinyVgg => "tiny-vgg",
            Arch::TinyResnet => "tiny-resnet",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "tiny-vgg" => Ok(Arch::TinyVgg),
            "tiny-resnet" => Ok(Arch::TinyResnet),
            other => Err(Error::Config(format!("unknown arch '{other}'"))),
        }
    }
}

/// `standard` trains weights and skeleton; `shape-only` freezes the conv
/// weights at initialization and trains the skeleton (plus norm/head);
/// `control` freezes every parameter and only measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    ShapeOnly,
    Control,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Standard => "standard",
            TrainMode::ShapeOnly => "shape-only",
            TrainMode::Control => "control",
        }
    }

    fn mask(&self) -> UpdateMask {
        match self {
            TrainMode::Standard => UpdateMask::ALL,
            TrainMode::ShapeOnly => UpdateMask::SHAPE_ONLY,
            TrainMode::Control => UpdateMask::NONE,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<TrainMode> {
        match s {
            "standard" => Ok(TrainMode::Standard),
            "shape-only" => Ok(TrainMode::ShapeOnly),
            "control" => Ok(TrainMode::Control),
            other => Err(Error::Config(format!("unknown train mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Arch,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch indices at which the learning rate drops by 10x.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sparsity: SparsityConfig,
    pub seed: u64,
    pub mode: TrainMode,
    /// Cap on training records (0 = all).
    pub train_limit: usize,
    /// Cap on test records (0 = all).
    pub test_limit: usize,
    pub augment: bool,
    /// Extra epochs after the main loop with the penalty off, letting the
    /// surviving stripes recover.
    pub finetune_epochs: usize,
}

impl TrainConfig {
    pub fn desk(arch: Arch, dataset: DatasetKind, data_dir: impl Into<PathBuf>) -> TrainConfig {
        TrainConfig {
            arch,
            dataset,
            data_dir: data_dir.into(),
            epochs: 20,
            batch_size: 64,
            lr: 0.1,
            milestones: vec![10, 15],
            momentum: 0.9,
            weight_decay: 1e-4,
            sparsity: SparsityConfig::new(1e-5, 0.05, SparsityMode::Stripe).unwrap(),
            seed: 0,
            mode: TrainMode::Standard,
            train_limit: 0,
            test_limit: 0,
            augment: false,
            finetune_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config("milestones must be strictly increasing".into()));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub data_loss: f64,
    pub penalty: f64,
    pub test_acc: f64,
    pub frozen_stripes: usize,
}

pub fn epoch_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,data_loss,penalty,test_acc,frozen_stripes\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.4},{}",
            r.epoch, r.data_loss, r.penalty, r.test_acc, r.frozen_stripes
        );
    }
    out
}

pub struct TrainOutcome {
    pub net: Network,
    pub rows: Vec<EpochRow>,
}

fn build_network(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Network {
    let (h, w) = cfg.dataset.image_hw();
    let in_shape = (cfg.dataset.channels(), h, w);
    let mut net = match cfg.arch {
        Arch::TinyVgg => tiny_vgg(in_shape, cfg.dataset.classes(), rng),
        Arch::TinyResnet => tiny_resnet(in_shape, cfg.dataset.classes(), rng),
    };
    if cfg.sparsity.mode == SparsityMode::Group {
        net.for_each_conv_mut(&mut |cv| cv.layer.skeleton.shared = true);
    }
    net
}

pub fn evaluate(net: &mut Network, split: &Split, source: &DatasetSource, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(batch) {
        let (x, labels) = make_batch(split, chunk, &source.mean, &source.std, None);
        let logits = net.forward(&x, false)?;
        for (b, &label) in labels.iter().enumerate() {
            if argmax_row(logits.row(b)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

fn run_epochs(
    net: &mut Network,
    ds: &Dataset,
    source: &DatasetSource,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    rows: &mut Vec<EpochRow>,
    epochs: usize,
    epoch_base: usize,
    sparsity: &SparsityConfig,
) -> Result<()> {
    let mask = cfg.mode.mask();
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for e in 0..epochs {
        let epoch = epoch_base + e;
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let aug = if cfg.augment { Some((&source.augment, &mut *rng)) } else { None };
            let (x, labels) = make_batch(&ds.train, chunk, &source.mean, &source.std, aug);
            let logits = net.forward(&x, true)?;
            let (loss, d_logits) = softmax_xent(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss;
            batches += 1;
            net.zero_grads();
            net.backward(&d_logits)?;
            accumulate_penalty_grads(net, sparsity);
            net.sgd_step(lr, cfg.momentum, cfg.weight_decay, mask);
        }
        apply_threshold(net, sparsity);
        let penalty = penalty_value(net, sparsity);
        let test_acc = evaluate(net, &ds.test, source, cfg.batch_size)?;
        rows.push(EpochRow {
            epoch,
            data_loss: loss_sum / batches.max(1) as f64,
            penalty,
            test_acc,
            frozen_stripes: net.frozen_stripe_count(),
        });
    }
    Ok(())
}

/// Train from scratch under `cfg`. Fully deterministic for a fixed config:
/// initialization, shuffling and augmentation all draw from one seeded
/// stream.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut source = DatasetSource::new(cfg.dataset, &cfg.data_dir);
    if !cfg.augment {
        source.augment.crop_pad4 = false;
        source.augment.hflip = false;
    }
    let mut ds = load_dataset(&source)?;
    if cfg.train_limit > 0 {
        ds.train.truncate(cfg.train_limit);
    }
    if cfg.test_limit > 0 {
        ds.test.truncate(cfg.test_limit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_network(cfg, &mut rng);
    let mut rows = Vec::new();
    run_epochs(
        &mut net, &ds, &source, cfg, &mut rng, &mut rows, cfg.epochs, 0, &cfg.sparsity,
    )?;
    if cfg.finetune_epochs > 0 {
        let relaxed = SparsityConfig::new(0.0, cfg.sparsity.delta, cfg.sparsity.mode)?;
        run_epochs(
            &mut net,
            &ds,
            &source,
            cfg,
            &mut rng,
            &mut rows,
            cfg.finetune_epochs,
            cfg.epochs,
            &relaxed,
        )?;
    }
    Ok(TrainOutcome { net, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub delta: f64,
    pub params: u64,
    pub flops: u64,
    pub accuracy: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("alpha,delta,params,flops,accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:e},{},{},{},{:.4}",
            r.alpha, r.delta, r.params, r.flops, r.accuracy
        );
    }
    out
}

fn model_cost(net: &Network, cfg: &TrainConfig) -> (u64, u64) {
    let model = export_model(net, false);
    let (h, w) = cfg.dataset.image_hw();
    let report = cost_report(&model, (h, w));
    (report.reported_params(), report.total_flops)
}

/// One full training run per (α, δ) pair, same seed throughout, reporting
/// the final cost and accuracy of each run.
pub fn ablation_grid(base: &TrainConfig, alphas: &[f64], deltas: &[f64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &delta in deltas {
            let mut cfg = base.clone();
            cfg.sparsity = SparsityConfig::new(alpha, delta, base.sparsity.mode)?;
            let outcome = train(&cfg)?;
            let (params, flops) = model_cost(&outcome.net, &cfg);
            let accuracy = outcome.rows.last().map(|r| r.test_acc).unwrap_or(0.0);
            rows.push(AblationRow { alpha, delta, params, flops, accuracy });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: SparsityMode,
    pub delta: f64,
    pub params: u64,
    pub flops: u64,
    pub accuracy: f64,
    /// Conv layers left with zero stripes at this threshold; group and
    /// filter-level regularizers can wipe out whole layers where stripe
    /// pruning keeps them alive.
    pub zeroed_layers: usize,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mode,delta,params,flops,accuracy,zeroed_layers\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{}",
            r.mode.as_str(),
            r.delta,
            r.params,
            r.flops,
            r.accuracy,
            r.zeroed_layers
        );
    }
    out
}

fn zeroed_conv_layers(net: &Network) -> usize {
    let mut count = 0;
    net.for_each_conv(&mut |cv| {
        if cv.layer.skeleton.frozen_count() == cv.layer.skeleton.values.len() {
            count += 1;
        }
    });
    count
}

/// Train once per regularizer with identical seed and schedule, then sweep
/// ascending thresholds on each trained network (freezing is monotone in δ,
/// so the sweep applies thresholds cumulatively).
pub fn compare_modes(base: &TrainConfig, deltas: &[f64]) -> Result<Vec<SweepRow>> {
    let mut sorted: Vec<f64> = deltas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::new();
    for mode in [SparsityMode::Stripe, SparsityMode::Group, SparsityMode::LassoWeights] {
        let mut cfg = base.clone();
        cfg.sparsity = SparsityConfig::new(base.sparsity.alpha, 0.0, mode)?;
        let mut outcome = train(&cfg)?;
        for &delta in &sorted {
            let sweep = SparsityConfig::new(0.0, delta, mode)?;
            apply_threshold(&mut outcome.net, &sweep);
            let (params, flops) = model_cost(&outcome.net, &cfg);
            let source = {
                let mut s = DatasetSource::new(cfg.dataset, &cfg.data_dir);
                s.augment.crop_pad4 = false;
                s.augment.hflip = false;
                s
            };
            let mut ds = load_dataset(&source)?;
            if cfg.test_limit > 0 {
                ds.test.truncate(cfg.test_limit);
            }
            let accuracy = evaluate(&mut outcome.net, &ds.test, &source, cfg.batch_size)?;
            rows.push(SweepRow {
                mode,
                delta,
                params,
                flops,
                accuracy,
                zeroed_layers: zeroed_conv_layers(&outcome.net),
            });
        }
    }
    Ok(rows)
}

/// Flat `key = value` config files; `#` starts a comment. Unknown keys are
/// rejected so typos fail loudly.
pub fn parse_config(text: &str, defaults: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = defaults;
    let mut alpha = cfg.sparsity.alpha;
    let mut delta = cfg.sparsity.delta;
    let mut mode = cfg.sparsity.mode;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
        match key {
            "arch" => cfg.arch = value.parse()?,
            "dataset" => cfg.dataset = value.parse()?,
            "data_dir" => cfg.data_dir = value.into(),
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad("number"))?,
            "milestones" => {
                cfg.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|_| bad("milestone list")))
                    .collect::<Result<_>>()?;
            }
            "momentum" => cfg.momentum = value.parse().map_err(|_| bad("number"))?,
            "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("number"))?,
            "alpha" => alpha = value.parse().map_err(|_| bad("number"))?,
            "delta" => delta = value.parse().map_err(|_| bad("number"))?,
            "sparsity_mode" => mode = value.parse()?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            "train_mode" => cfg.mode = value.parse()?,
            "train_limit" => cfg.train_limit = value.parse().map_err(|_| bad("integer"))?,
            "test_limit" => cfg.test_limit = value.parse().map_err(|_| bad("integer"))?,
            "augment" => cfg.augment = value.parse().map_err(|_| bad("bool"))?,
            "finetune_epochs" => cfg.finetune_epochs = value.parse().map_err(|_| bad("integer"))?,
            other => {
                return Err(Error::Config(format!("line {}: unknown key '{other}'", lineno + 1)))
            }
        }
    }
    cfg.sparsity = SparsityConfig::new(alpha, delta, mode)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::write_synthetic_mnist;

    fn tiny_cfg(dir: &std::path::Path) -> TrainConfig {
        let mut cfg = TrainConfig::desk(Arch::TinyVgg, DatasetKind::Mnist, dir);
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.lr = 0.05;
        cfg.milestones = vec![1];
        cfg.train_limit = 48;
        cfg.test_limit = 32;
        cfg
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_mnist(dir.path(), 48, 32, 5).unwrap();
        let cfg = tiny_cfg(dir.path());
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        let mut wa = Vec::new();
        a.net.for_each_conv(&mut |cv| wa.extend_from_slice(cv.layer.weight.data()));
        let mut wb = Vec::new();
        b.net.for_each_conv(&mut |cv| wb.extend_from_slice(cv.layer.weight.data()));
        assert_eq!(wa, wb);
    }

    #[test]
    fn loss_decreases_on_tiny_subset() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_mnist(dir.path(), 48, 32, 6).unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.epochs = 3;
        cfg.milestones = vec![];
        let out = train(&cfg).unwrap();
        assert!(out.rows.last().unwrap().data_loss < out.rows[0].data_loss);
    }

    #[test]
    fn control_mode_never_moves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_mnist(dir.path(), 32, 16, 7).unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.epochs = 1;
        cfg.milestones = vec![];
        cfg.mode = TrainMode::Control;
        cfg.sparsity = SparsityConfig::new(0.0, 0.0, SparsityMode::Stripe).unwrap();
        let out = train(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = build_network(&cfg, &mut rng);
        let mut got = Vec::new();
        out.net.for_each_conv(&mut |cv| got.extend_from_slice(cv.layer.weight.data()));
        let mut init = Vec::new();
        fresh.for_each_conv(&mut |cv| init.extend_from_slice(cv.layer.weight.data()));
        assert_eq!(got, init);
    }

    #[test]
    fn milestone_validation_rejects_bad_schedules() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::desk(Arch::TinyVgg, DatasetKind::Mnist, dir.path());
        cfg.milestones = vec![3, 3];
        assert!(cfg.validate().is_err());
        cfg.milestones = vec![cfg.epochs];
        assert!(cfg.validate().is_err());
        cfg.milestones = vec![2, 5];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn lr_schedule_drops_tenfold_at_milestones() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::desk(Arch::TinyVgg, DatasetKind::Mnist, dir.path());
        cfg.lr = 0.1;
        cfg.milestones = vec![5, 8];
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(5) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let defaults = TrainConfig::desk(Arch::TinyVgg, DatasetKind::Mnist, dir.path());
        let text = "\
# experiment
arch = tiny-resnet
epochs = 4
milestones = 2, 3
lr = 0.02
alpha = 1e-4
delta = 0.1
sparsity_mode = group
train_mode = shape-only
augment = true
";
        let cfg = parse_config(text, defaults).unwrap();
        assert_eq!(cfg.arch, Arch::TinyResnet);
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.milestones, vec![2, 3]);
        assert_eq!(cfg.sparsity.alpha, 1e-4);
        assert_eq!(cfg.sparsity.mode, SparsityMode::Group);
        assert_eq!(cfg.mode, TrainMode::ShapeOnly);
        assert!(cfg.augment);
    }

    #[test]
    fn config_unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let defaults = TrainConfig::desk(Arch::TinyVgg, DatasetKind::Mnist, dir.path());
        assert!(parse_config("epoch = 3\n", defaults).is_err());
    }

    #[test]
    fn csv_shapes() {
        let rows = vec![EpochRow {
            epoch: 0,
            data_loss: 2.3,
            penalty: 1.0,
            test_acc: 0.5,
            frozen_stripes: 3,
        }];
        let csv = epoch_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,data_loss,penalty,test_acc,frozen_stripes");
        assert!(lines.next().unwrap().starts_with("0,2.3"));
    }
}
