//! Training experiments on the real datasets. They read the data from
//! `$PATHNET_DATA` (or `data/` in the workspace) and fail when it is absent.

use std::path::PathBuf;

use pathnet::container::SavedModel;
use pathnet::data::LabeledDataset;
use pathnet::net::Network;
use pathnet_cli::config::*;
use pathnet_cli::run::{self, EpochMetrics, LoopOptions};
use pathnet_cli::{ExperimentConfig, Failure};

use crate::Outcome;

pub fn data_root() -> PathBuf {
    std::env::var_os("PATHNET_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// Settings shared by the MNIST-sized runs: 784-300-300-10, cross-entropy,
/// momentum SGD with one learning-rate drop.
pub fn mnist_config(dataset: DatasetName) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.dataset = dataset;
    cfg.data.root = data_root();
    cfg.model.sizes = vec![784, 300, 300, 10];
    cfg.train.epochs = 15;
    cfg.train.lr = 0.01;
    cfg.train.milestones = vec![(10, 0.1)];
    cfg.train.momentum = 0.9;
    cfg.train.batch_size = 32;
    cfg
}

fn pseudo(mut cfg: ExperimentConfig, per_pixel: usize) -> ExperimentConfig {
    cfg.topology.mode = TopologyMode::Pseudo;
    cfg.topology.paths_per_input = per_pixel;
    cfg
}

pub struct Datasets {
    mnist: Option<Result<(LabeledDataset, LabeledDataset), Failure>>,
    dense_mnist: Option<Result<(Network<f32>, f64), Failure>>,
}

impl Datasets {
    pub fn new() -> Self {
        Self { mnist: None, dense_mnist: None }
    }

    fn mnist(&mut self) -> Result<&(LabeledDataset, LabeledDataset), Failure> {
        self.mnist
            .get_or_insert_with(|| run::load_data(&mnist_config(DatasetName::Mnist)))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// The fully connected MNIST network and its test accuracy, trained once.
    fn dense_mnist(&mut self) -> Result<(Network<f32>, f64), Failure> {
        if self.dense_mnist.is_none() {
            let r = self.mnist().cloned().and_then(|(train, test)| {
                let (model, rows) = train_model(&mnist_config(DatasetName::Mnist), &train, &test)?;
                let SavedModel::Mlp(net) = model else { unreachable!() };
                Ok((net, final_accuracy(&rows)))
            });
            self.dense_mnist = Some(r);
        }
        self.dense_mnist.clone().unwrap()
    }
}

fn progress(tag: &str) -> impl FnMut(&EpochMetrics) + '_ {
    move |m| eprintln!("    [{tag}] epoch {:>3} acc {:.2}%", m.epoch, 100.0 * m.test_accuracy)
}

fn train_model(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(SavedModel<f32>, Vec<EpochMetrics>), Failure> {
    let topology = run::build_topology(cfg)?;
    let mut model = run::build_model(cfg, topology.as_ref())?;
    let tag = format!("{:?} {:?}", cfg.topology.mode, cfg.train.init);
    let rows = run::fit_saved(&mut model, &run::train_plan(cfg), LoopOptions::from_config(cfg), train, test, progress(&tag))?;
    Ok((model, rows))
}

fn final_accuracy(rows: &[EpochMetrics]) -> f64 {
    100.0 * rows.last().map_or(0.0, |r| r.test_accuracy)
}

fn accuracy_of(cfg: &ExperimentConfig, data: &(LabeledDataset, LabeledDataset)) -> Result<f64, Failure> {
    Ok(final_accuracy(&train_model(cfg, &data.0, &data.1)?.1))
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn missing(e: Failure) -> Outcome {
    Outcome::fail(format!("{e}"))
}

/// MNIST accuracy at 8 and 128 paths per pixel and the dense baseline.
pub fn mnist_reproduction(d: &mut Datasets) -> Outcome {
    let data = match d.mnist() {
        Ok(v) => v.clone(),
        Err(e) => return missing(e),
    };
    let base = mnist_config(DatasetName::Mnist);
    let mut notes = Vec::new();
    let mut ok = true;
    for (k, target) in [(8, 92.81), (128, 97.85)] {
        match accuracy_of(&pseudo(base.clone(), k), &data) {
            Ok(acc) => {
                ok &= within(acc, target, 1.5);
                notes.push(format!("{k} paths/pixel {acc:.2}% (target {target} +-1.5)"));
            }
            Err(e) => return missing(e),
        }
    }
    match d.dense_mnist() {
        Ok((_, acc)) => {
            ok &= within(acc, 98.24, 0.5);
            notes.push(format!("dense {acc:.2}% (target 98.24 +-0.5)"));
        }
        Err(e) => return missing(e),
    }
    Outcome::new(ok, notes.join(", "))
}

pub fn fashion_reproduction(_d: &mut Datasets) -> Outcome {
    let cfg = pseudo(mnist_config(DatasetName::FashionMnist), 128);
    let data = match run::load_data(&cfg) {
        Ok(v) => v,
        Err(e) => return missing(e),
    };
    match accuracy_of(&cfg, &data) {
        Ok(acc) => Outcome::new(within(acc, 89.27, 1.5), format!("128 paths/pixel {acc:.2}% (target 89.27 +-1.5)")),
        Err(e) => missing(e),
    }
}

/// Quasi against pseudo paths on 784-256-256-10 with equal path counts. The
/// 784 inputs and 10 outputs are not powers of 2, so both topologies connect
/// the boundary layers fully and route the paths through the hidden layers.
pub fn quasi_pseudo_parity(d: &mut Datasets) -> Outcome {
    let data = match d.mnist() {
        Ok(v) => v.clone(),
        Err(e) => return missing(e),
    };
    let mut cfg = mnist_config(DatasetName::Mnist);
    cfg.model.sizes = vec![784, 256, 256, 10];
    cfg.topology.boundary = Boundary::FullyConnected;
    cfg.topology.paths = 8192;
    let mut accs = Vec::new();
    for mode in [TopologyMode::Quasi, TopologyMode::Pseudo] {
        cfg.topology.mode = mode;
        match accuracy_of(&cfg, &data) {
            Ok(a) => accs.push(a),
            Err(e) => return missing(e),
        }
    }
    let gap = (accs[0] - accs[1]).abs();
    Outcome::new(gap < 1.5, format!("quasi {:.2}%, pseudo {:.2}%, gap {gap:.2} (< 1.5)", accs[0], accs[1]))
}

/// Constant positive initialization, 5 epochs: the dense net cannot break
/// the symmetry, the path-sparse one can.
pub fn constant_init_contrast(_d: &mut Datasets) -> Outcome {
    let mut cfg = mnist_config(DatasetName::Mnist);
    cfg.train.epochs = 5;
    cfg.train.milestones.clear();
    cfg.train.init = InitKind::Positive;
    // Without normalization layers an all-positive constant compounds with
    // depth; unit L1 norm per neuron keeps the initial logits bounded.
    cfg.train.normalize_init_p = 1.0;
    cfg.train.lr = 0.1;
    cfg.data.standardize = true;
    let data = match run::load_data(&cfg) {
        Ok(v) => v,
        Err(e) => return missing(e),
    };
    let dense = match train_allowing_divergence(&cfg, &data) {
        Ok(a) => a,
        Err(e) => return missing(e),
    };
    let sparse = match train_allowing_divergence(&pseudo(cfg, 32), &data) {
        Ok(a) => a,
        Err(e) => return missing(e),
    };
    let ok = within(dense, 10.0, 2.0) && sparse > 85.0;
    Outcome::new(ok, format!("dense {dense:.2}% (10 +-2), sparse 32 paths/pixel {sparse:.2}% (> 85)"))
}

/// Test accuracy after training; a run whose loss leaves the finite range is
/// stopped and scored with the weights of its last finite step.
fn train_allowing_divergence(cfg: &ExperimentConfig, data: &(LabeledDataset, LabeledDataset)) -> Result<f64, Failure> {
    let topology = run::build_topology(cfg)?;
    let mut model = run::build_model(cfg, topology.as_ref())?;
    match run::fit_saved(&mut model, &run::train_plan(cfg), LoopOptions::from_config(cfg), &data.0, &data.1, progress("const")) {
        Ok(rows) => Ok(final_accuracy(&rows)),
        Err(Failure::Numeric(_)) => Ok(100.0 * run::evaluate_saved(&model, &data.1, cfg.train.eval_batch)?.accuracy),
        Err(e) => Err(e),
    }
}

/// Sign-along-path initialization with frozen signs against the same
/// network trained unconstrained.
pub fn sign_frozen_training(d: &mut Datasets) -> Outcome {
    let data = match d.mnist() {
        Ok(v) => v.clone(),
        Err(e) => return missing(e),
    };
    let mut cfg = pseudo(mnist_config(DatasetName::Mnist), 32);
    cfg.train.init = InitKind::AlongPath;
    cfg.topology.sign = SignKind::Ratio;
    cfg.topology.sign_ratio = 0.5;
    let free = match accuracy_of(&cfg, &data) {
        Ok(a) => a,
        Err(e) => return missing(e),
    };
    cfg.train.sign_frozen = true;
    let topology = match run::build_topology(&cfg) {
        Ok(t) => t,
        Err(e) => return missing(e),
    };
    let Ok(SavedModel::Mlp(mut net)) = run::build_model(&cfg, topology.as_ref()) else {
        return Outcome::fail("could not build the sparse network".into());
    };
    let mut steps = 0usize;
    let mut violations = 0usize;
    let rows = run::fit(
        &mut net,
        &run::train_plan(&cfg),
        LoopOptions::from_config(&cfg),
        &data.0,
        &data.1,
        |n| {
            steps += 1;
            violations += run::sign_violations(n);
            Ok(())
        },
        progress("frozen"),
    );
    let frozen = match rows {
        Ok(r) => final_accuracy(&r),
        Err(e) => return missing(e),
    };
    let ok = violations == 0 && steps > 0 && free - frozen <= 5.0;
    Outcome::new(
        ok,
        format!("{violations} sign violations over {steps} steps; frozen {frozen:.2}%, unfrozen {free:.2}% (within 5)"),
    )
}

/// Proportional path sampling of 10% of the edges of the trained dense net.
pub fn prune_reproduction(d: &mut Datasets) -> Outcome {
    let (dense, dense_acc) = match d.dense_mnist() {
        Ok(v) => v,
        Err(e) => return missing(e),
    };
    let test = match d.mnist() {
        Ok(v) => v.1.clone(),
        Err(e) => return missing(e),
    };
    let mut cfg = mnist_config(DatasetName::Mnist);
    cfg.prune.fraction = 0.1;
    match run::prune_network(&cfg, &dense, &test) {
        Ok(p) => {
            let (a, b) = (100.0 * p.dense_accuracy, 100.0 * p.pruned_accuracy);
            let frac = p.unique_edges as f64 / p.dense_edges as f64;
            debug_assert!((a - dense_acc).abs() < 1e-9);
            Outcome::new(
                a - b < 1.5,
                format!("{} paths keep {:.2}% of edges; dense {a:.2}%, sampled {b:.2}% (loss < 1.5)", p.paths, 100.0 * frac),
            )
        }
        Err(e) => missing(e),
    }
}

/// 15 epochs of the channel-sparse CIFAR-10 network.
pub fn cifar_short_run(_d: &mut Datasets) -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.data.dataset = DatasetName::Cifar10;
    cfg.data.root = data_root();
    cfg.data.standardize = true;
    cfg.model.architecture = Architecture::Cnn;
    cfg.topology.mode = TopologyMode::Quasi;
    cfg.topology.boundary = Boundary::FullyConnected;
    cfg.topology.paths = 1024;
    cfg.topology.skip_bad_dims = true;
    cfg.train.epochs = 15;
    cfg.train.lr = 0.1;
    cfg.train.momentum = 0.9;
    cfg.train.weight_decay = 1e-4;
    cfg.train.batch_size = 128;
    cfg.train.augment_flip = true;
    cfg.train.augment_crop = 4;
    let data = match run::load_data(&cfg) {
        Ok(v) => v,
        Err(e) => return missing(e),
    };
    let rows = match train_model(&cfg, &data.0, &data.1) {
        Ok((_, r)) => r,
        Err(e) => return missing(e),
    };
    let acc: Vec<f64> = rows.iter().map(|r| 100.0 * r.test_accuracy).collect();
    let slope = trend(&acc);
    let last = *acc.last().unwrap();
    Outcome::new(slope > 0.0 && last >= 50.0, format!("final {last:.2}% (>= 50), accuracy trend {slope:+.3} points/epoch (> 0)"))
}

/// Least-squares slope of `y` over its index.
fn trend(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        sxy += (i as f64 - mx) * (v - my);
        sxx += (i as f64 - mx).powi(2);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
