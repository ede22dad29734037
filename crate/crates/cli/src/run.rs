//! Experiment plumbing: topology and model construction from a config,
//! dataset loading, the training loop and its CSV outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pathnet::container::{self, SavedModel};
use pathnet::conv::{self, ChannelPaths, ConvNet, Shape};
use pathnet::data::{self, Augment, DatasetKind, LabeledDataset, Split};
use pathnet::net::{
    self, Connections, EvalResult, InitMode, Loss, LrSchedule, Model, Network, Sgd, TrainPlan, WInit,
};
use pathnet::prune::{self, PathSampler, Reweight};
use pathnet::qmc::GeneratorMatrixSet;
use pathnet::topology::{self, BoundaryMode, LayerSpec, PathCount, PathTopology, SignPolicy};

use crate::config::*;
use crate::error::Failure;

pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const MODEL_FILE: &str = "model.pnmd";
pub const TOPOLOGY_FILE: &str = "topology.pntp";
pub const PRUNED_MODEL_FILE: &str = "pruned.pnmd";
pub const PRUNE_FILE: &str = "prune.csv";
pub const ANALYSIS_FILE: &str = "analysis.txt";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn boundary(b: Boundary) -> BoundaryMode {
    match b {
        Boundary::Paths => BoundaryMode::Paths,
        Boundary::FullyConnected => BoundaryMode::FullyConnected,
    }
}

fn loss(l: LossKind) -> Loss {
    match l {
        LossKind::CrossEntropy => Loss::SoftmaxCrossEntropy,
        LossKind::Squared => Loss::SquaredError,
    }
}

/// Layer sizes the topology is traced over: the MLP sizes, or the channel
/// counts of the convolutional preset.
pub fn topology_layers(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.model.architecture {
        Architecture::Mlp => cfg.model.sizes.clone(),
        Architecture::Cnn => conv::preset_channels(cfg.model.width),
    }
}

fn sign_policy(t: &TopologyConfig) -> SignPolicy {
    match t.sign {
        SignKind::Positive => SignPolicy::AllPositive,
        SignKind::EvenOdd => SignPolicy::EvenOdd,
        SignKind::Ratio => SignPolicy::Ratio(t.sign_ratio),
        SignKind::Sobol => SignPolicy::SobolDimension(t.sign_dim),
    }
}

/// The path topology described by the config; `None` for dense models.
pub fn build_topology(cfg: &ExperimentConfig) -> Result<Option<PathTopology>, Failure> {
    let t = &cfg.topology;
    if t.mode == TopologyMode::Dense {
        return Ok(None);
    }
    let gm = GeneratorMatrixSet::joe_kuo();
    let layers = LayerSpec::new(topology_layers(cfg), boundary(t.boundary), boundary(t.boundary))?;
    let count = if t.paths > 0 { PathCount::Total(t.paths) } else { PathCount::PerInput(t.paths_per_input) };
    let p = count.resolve(&layers);
    let generated = match (t.mode, cfg.model.architecture) {
        (TopologyMode::Pseudo, Architecture::Mlp) => topology::generate_pseudo_paths(layers, p, t.seed)?,
        (TopologyMode::Quasi, Architecture::Mlp) => {
            if t.skip_bad_dims && t.dims.is_empty() {
                topology::generate_quasi_skipping(layers, p, gm, t.start_dim, t.scramble_seed)?
            } else {
                let dims = if t.dims.is_empty() { topology::sequential_dims(&layers, t.start_dim) } else { t.dims.clone() };
                topology::generate_quasi_paths(layers, p, gm, &dims, t.scramble_seed)?
            }
        }
        (mode, Architecture::Cnn) => {
            let generator = match mode {
                TopologyMode::Pseudo => ChannelPaths::Pseudo { seed: t.seed },
                _ if t.skip_bad_dims && t.dims.is_empty() => {
                    ChannelPaths::QuasiSkipping { start_dim: t.start_dim, scramble_seed: t.scramble_seed }
                }
                _ => ChannelPaths::Quasi {
                    dims: if t.dims.is_empty() { topology::sequential_dims(&layers, t.start_dim) } else { t.dims.clone() },
                    scramble_seed: t.scramble_seed,
                },
            };
            conv::trace_conv_paths(layers.sizes(), p, &generator, layers.input_mode(), gm)?
        }
        (TopologyMode::Dense, _) => unreachable!(),
    };
    Ok(Some(topology::assign_signs(generated, sign_policy(t), Some(gm))?))
}

pub fn train_plan(cfg: &ExperimentConfig) -> TrainPlan {
    let t = &cfg.train;
    let init = match t.init {
        InitKind::Uniform => InitMode::UniformRandom { seed: t.init_seed },
        InitKind::Positive => InitMode::ConstantPositive,
        InitKind::Alternating => InitMode::ConstantAlternatingSign,
        InitKind::RandomSign => InitMode::ConstantRandomSign { seed: t.init_seed },
        InitKind::AlongPath => InitMode::ConstantSignAlongPath,
    };
    TrainPlan {
        schedule: LrSchedule { initial: t.lr, milestones: t.milestones.clone() },
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        epochs: t.epochs,
        batch_size: t.batch_size,
        init,
        winit: match t.winit {
            WInitKind::Glorot => WInit::Glorot,
            WInitKind::Wide => WInit::Wide,
        },
        sign_frozen: t.sign_frozen,
        loss: loss(cfg.model.loss),
        deterministic: t.deterministic,
        shuffle_seed: t.shuffle_seed,
    }
}

/// An initialized model on `topology`, ready for training.
pub fn build_model(cfg: &ExperimentConfig, topology: Option<&PathTopology>) -> Result<SavedModel<f32>, Failure> {
    let plan = train_plan(cfg);
    match cfg.model.architecture {
        Architecture::Mlp => {
            let mut net = match topology {
                Some(t) => Network::from_topology(t, cfg.model.bias, plan.loss),
                None => Network::dense(&cfg.model.sizes, cfg.model.bias, plan.loss)?,
            };
            net::init_weights(&mut net, plan.init, plan.winit);
            if cfg.train.normalize_init_p > 0.0 {
                net::normalize_init(&mut net, cfg.train.normalize_init_p);
            }
            Ok(SavedModel::Mlp(net))
        }
        Architecture::Cnn => {
            if cfg.model.loss != LossKind::CrossEntropy {
                return Err(Failure::Config("the convolutional preset is trained with cross-entropy".into()));
            }
            let mut net = conv::cifar_preset::<f32>(cfg.model.width, topology)?;
            conv::init_conv_weights(&mut net, plan.init, plan.winit);
            Ok(SavedModel::Conv(net))
        }
    }
}

fn dataset_kind(name: DatasetName) -> Option<DatasetKind> {
    match name {
        DatasetName::Mnist => Some(DatasetKind::Mnist),
        DatasetName::FashionMnist => Some(DatasetKind::FashionMnist),
        DatasetName::Cifar10 => Some(DatasetKind::Cifar10),
        DatasetName::Synthetic => None,
    }
}

/// Training and test split, truncated and standardized as configured.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset), Failure> {
    let d = &cfg.data;
    let (mut train, mut test) = match dataset_kind(d.dataset) {
        Some(kind) => {
            let root = cfg.data_root();
            (data::load_dataset(kind, &root, Split::Train)?, data::load_dataset(kind, &root, Split::Test)?)
        }
        None => {
            let [c, h, w] = d.synthetic_shape;
            let shape = Shape::new(c, h, w);
            (
                data::synthetic_dataset(d.synthetic_train, shape, d.synthetic_seed, Split::Train),
                data::synthetic_dataset(d.synthetic_test, shape, d.synthetic_seed, Split::Test),
            )
        }
    };
    if d.train_limit > 0 && d.train_limit < train.len() {
        train = train.take(d.train_limit);
    }
    if d.test_limit > 0 && d.test_limit < test.len() {
        test = test.take(d.test_limit);
    }
    if d.standardize {
        let stats = train.statistics();
        train.normalize(&stats);
        test.normalize(&stats);
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub nonzero_weights: usize,
    /// `1 - nonzero / dense-equivalent weights`, in percent.
    pub sparsity: f64,
    pub seconds: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,test_accuracy,nonzero_weights,sparsity\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.4},{},{:.4}", r.epoch, r.train_loss, r.test_loss, 100.0 * r.test_accuracy, r.nonzero_weights, r.sparsity)
            .unwrap();
    }
    s
}

pub fn timings_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,wall_seconds\n");
    for r in rows {
        writeln!(s, "{},{:.3}", r.epoch, r.seconds).unwrap();
    }
    s
}

pub fn sparsity<M: Model<f32>>(model: &M) -> f64 {
    100.0 * (1.0 - model.nonzero_weight_count() as f64 / model.dense_weight_count() as f64)
}

pub fn evaluate_on<M: Model<f32>>(model: &M, ds: &LabeledDataset, batch: usize) -> Result<EvalResult, Failure> {
    Ok(net::evaluate(model, ds.iter(), batch.max(1))?)
}

/// Options of the training loop besides the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopOptions {
    pub augment: Augment,
    pub eval_batch: usize,
}

impl LoopOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            augment: Augment { flip: cfg.train.augment_flip, crop_pad: cfg.train.augment_crop },
            eval_batch: cfg.train.eval_batch,
        }
    }
}

/// Runs `plan.epochs` epochs of mini-batch SGD, evaluating on `test`
/// after each. `after_step` sees the model after every optimizer step and
/// may abort the run.
pub fn fit<M: Model<f32>>(
    model: &mut M,
    plan: &TrainPlan,
    opts: LoopOptions,
    train: &LabeledDataset,
    test: &LabeledDataset,
    mut after_step: impl FnMut(&M) -> Result<(), Failure>,
    mut after_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, Failure> {
    plan.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Failure::Data("training and test sets must not be empty".into()));
    }
    let mut opt = Sgd::from_plan(model, plan);
    let mut rows = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let start = Instant::now();
        let lr = plan.schedule.rate(epoch);
        let mut total = 0.0f64;
        for batch in data::epoch_batches(train, plan.batch_size, opts.augment, plan.shuffle_seed, epoch) {
            total += net::train_batch(model, &mut opt, &batch.inputs(), &batch.labels, lr)? as f64;
            after_step(model)?;
        }
        let eval = evaluate_on(model, test, opts.eval_batch)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            test_loss: eval.mean_loss,
            test_accuracy: eval.accuracy,
            nonzero_weights: model.nonzero_weight_count(),
            sparsity: sparsity(model),
            seconds: start.elapsed().as_secs_f64(),
        };
        after_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Counts sparse weights whose sign disagrees with their slot sign.
pub fn sign_violations(net: &Network<f32>) -> usize {
    net.transitions()
        .iter()
        .map(|t| match &t.connections {
            Connections::Sparse { sign, .. } => t.weights.iter().zip(sign).filter(|(&w, &s)| w * f32::from(s) < 0.0).count(),
            Connections::Dense => 0,
        })
        .sum()
}

pub fn fit_saved(
    model: &mut SavedModel<f32>,
    plan: &TrainPlan,
    opts: LoopOptions,
    train: &LabeledDataset,
    test: &LabeledDataset,
    after_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, Failure> {
    match model {
        SavedModel::Mlp(n) => fit(n, plan, opts, train, test, |_| Ok(()), after_epoch),
        SavedModel::Conv(c) => fit(c, plan, opts, train, test, |_| Ok(()), after_epoch),
    }
}

pub fn evaluate_saved(model: &SavedModel<f32>, ds: &LabeledDataset, batch: usize) -> Result<EvalResult, Failure> {
    match model {
        SavedModel::Mlp(n) => evaluate_on(n, ds, batch),
        SavedModel::Conv(c) => evaluate_on::<ConvNet<f32>>(c, ds, batch),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(io(path))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io(dir))
}

/// Artifacts of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SavedModel<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub dir: PathBuf,
}

/// `train`: builds the model, trains it and writes the resolved config,
/// metrics, timings, topology and model container into the output
/// directory.
pub fn cmd_train(cfg: &ExperimentConfig, mut progress: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome, Failure> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let (train, test) = load_data(cfg)?;
    let topology = build_topology(cfg)?;
    if let Some(t) = &topology {
        container::save_topology(&dir.join(TOPOLOGY_FILE), t, true)?;
    }
    let mut model = build_model(cfg, topology.as_ref())?;
    let metrics = fit_saved(&mut model, &train_plan(cfg), LoopOptions::from_config(cfg), &train, &test, &mut progress)?;
    write(&dir.join(METRICS_FILE), metrics_csv(&metrics))?;
    write(&dir.join(TIMINGS_FILE), timings_csv(&metrics))?;
    if cfg.output.save_model {
        container::save_model(&dir.join(MODEL_FILE), &model)?;
    }
    Ok(TrainOutcome { model, metrics, dir })
}

/// `gen-topology`: writes the topology container and returns its path.
pub fn cmd_gen_topology(cfg: &ExperimentConfig) -> Result<(PathTopology, PathBuf), Failure> {
    let t = build_topology(cfg)?.ok_or_else(|| Failure::Config("topology.mode is dense; nothing to generate".into()))?;
    create_dir(&cfg.output.dir)?;
    cfg.write_resolved(&cfg.output.dir)?;
    let path = cfg.output.dir.join(TOPOLOGY_FILE);
    container::save_topology(&path, &t, true)?;
    Ok((t, path))
}

/// `eval`: accuracy and mean loss of a saved model on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, model_path: &Path) -> Result<EvalResult, Failure> {
    let model = container::load_model::<f32>(model_path)?;
    let (_, test) = load_data(cfg)?;
    evaluate_saved(&model, &test, cfg.train.eval_batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub paths: usize,
    pub unique_edges: usize,
    pub dense_edges: usize,
    pub dense_accuracy: f64,
    pub pruned_accuracy: f64,
    pub network: Network<f32>,
}

fn sampler(p: &PruneConfig) -> PathSampler {
    match p.sampler {
        SamplerKind::Pseudo => PathSampler::Pseudo { seed: p.seed },
        SamplerKind::Sobol => PathSampler::Sobol { scramble_seed: p.scramble_seed },
    }
}

/// Unique edges of the network sampled along `paths` paths.
fn sampled_edges(dense: &Network<f32>, paths: usize, s: PathSampler) -> Result<usize, Failure> {
    let t = prune::sample_paths(dense, paths, s, GeneratorMatrixSet::joe_kuo())?;
    Ok(topology::coalesce_edges(&t).nonzero_weight_count())
}

/// Smallest path count whose sampled network keeps at least `fraction` of
/// the dense edges. Paths are drawn in order, so the unique edge count
/// grows with the path count.
pub fn paths_for_fraction(dense: &Network<f32>, fraction: f64, s: PathSampler) -> Result<usize, Failure> {
    let dense_edges = dense.dense_weight_count();
    let target = (fraction * dense_edges as f64).ceil() as usize;
    let mut hi = 1usize;
    while sampled_edges(dense, hi, s)? < target {
        if hi > 1 << 30 {
            return Err(Failure::Numeric(format!("no path count reaches {target} edges")));
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if sampled_edges(dense, mid, s)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Samples a sparse network from a trained dense one and scores both.
pub fn prune_network(
    cfg: &ExperimentConfig,
    dense: &Network<f32>,
    test: &LabeledDataset,
) -> Result<PruneOutcome, Failure> {
    if dense.is_sparse() {
        return Err(Failure::Config("prune needs a fully connected model".into()));
    }
    let s = sampler(&cfg.prune);
    let paths = if cfg.prune.paths > 0 { cfg.prune.paths } else { paths_for_fraction(dense, cfg.prune.fraction, s)? };
    let reweight = match cfg.prune.reweight {
        ReweightKind::Keep => Reweight::Keep,
        ReweightKind::Multiplicity => Reweight::Multiplicity,
    };
    let pruned = prune::sample_sparse(dense, paths, s, reweight, GeneratorMatrixSet::joe_kuo())?;
    Ok(PruneOutcome {
        paths,
        unique_edges: pruned.unique_edges,
        dense_edges: pruned.dense_edges,
        dense_accuracy: evaluate_on(dense, test, cfg.train.eval_batch)?.accuracy,
        pruned_accuracy: evaluate_on(&pruned.net, test, cfg.train.eval_batch)?.accuracy,
        network: pruned.net,
    })
}

/// `prune`: samples the saved dense model and writes the pruned model and
/// a one-row summary.
pub fn cmd_prune(cfg: &ExperimentConfig, model_path: &Path) -> Result<PruneOutcome, Failure> {
    let SavedModel::Mlp(dense) = container::load_model::<f32>(model_path)? else {
        return Err(Failure::Config("prune supports fully connected models only".into()));
    };
    let (_, test) = load_data(cfg)?;
    let out = prune_network(cfg, &dense, &test)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    cfg.write_resolved(dir)?;
    container::save_model(&dir.join(PRUNED_MODEL_FILE), &SavedModel::Mlp(out.network.clone()))?;
    write(
        &dir.join(PRUNE_FILE),
        format!(
            "paths,unique_edges,dense_edges,fraction,dense_accuracy,pruned_accuracy\n{},{},{},{:.6},{:.4},{:.4}\n",
            out.paths,
            out.unique_edges,
            out.dense_edges,
            out.unique_edges as f64 / out.dense_edges as f64,
            100.0 * out.dense_accuracy,
            100.0 * out.pruned_accuracy
        ),
    )?;
    Ok(out)
}

/// `analyze`: the report for a saved topology, or for the one the config
/// describes.
pub fn cmd_analyze(cfg: &ExperimentConfig, topology_path: Option<&Path>) -> Result<String, Failure> {
    let t = match topology_path {
        Some(p) => container::load_topology(p, Some(GeneratorMatrixSet::joe_kuo()))?,
        None => build_topology(cfg)?.ok_or_else(|| Failure::Config("topology.mode is dense; nothing to analyze".into()))?,
    };
    let report = crate::analyze::analyze(&t)?.render();
    if topology_path.is_none() {
        create_dir(&cfg.output.dir)?;
        write(&cfg.output.dir.join(ANALYSIS_FILE), &report)?;
    }
    Ok(report)
}
