//! Quantizing a trained dense network into paths.
//!
//! After rescaling every neuron to unit L1 norm of its incoming weights, the
//! magnitudes of those weights partition the unit interval. Paths start at
//! the outputs and walk back to the inputs, picking each predecessor by
//! inverting the partition at a uniform or Sobol' sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::net::{Connections, NetError, Network};
use crate::qmc::{self, GeneratorMatrixSet};
use crate::real::Real;
use crate::topology::{Generation, LayerSpec, PathTopology, TopologyError};

/// Tolerance on the unit L1 norm expected by [`build_partition`].
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("the network to prune must be fully connected")]
    NotDense,
    #[error("weights have L1 norm {0}, expected 1")]
    NotNormalized(f64),
    #[error("a partition needs at least one weight")]
    Empty,
    #[error("sampling needs at least one path")]
    NoPaths,
    #[error("{needed} sampling dimensions needed, {available} available")]
    DimensionExhausted { needed: usize, available: usize },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A dense network whose neurons have unit L1 norm of incoming weights.
#[derive(Debug, Clone, PartialEq)]
pub struct L1Renormalized<R> {
    pub net: Network<R>,
    /// Factor restoring each output of the original network.
    pub output_scale: Vec<R>,
    /// `(layer, neuron)` pairs whose incoming weights are all zero.
    pub dead: Vec<(usize, usize)>,
}

impl<R: Real> L1Renormalized<R> {
    /// Linear outputs of the original network.
    pub fn logits(&self, input: &[R]) -> Result<Vec<R>, NetError> {
        let fw = self.net.forward(input)?;
        Ok(fw.logits().iter().zip(&self.output_scale).map(|(&z, &s)| z * s).collect())
    }
}

/// Divides the incoming weights and bias of every neuron by their L1 norm
/// and multiplies the factor into the neuron's outgoing weights. The
/// factors of the last layer become `output_scale`. ReLU's positive
/// homogeneity keeps the network function unchanged.
pub fn l1_renormalize<R: Real>(dense: &Network<R>) -> Result<L1Renormalized<R>, PruneError> {
    if dense.is_sparse() {
        return Err(PruneError::NotDense);
    }
    let mut net = dense.clone();
    let sizes = net.sizes().to_vec();
    let last = sizes.len() - 1;
    let mut dead = Vec::new();
    let mut factors = vec![R::one(); sizes[1]];
    for l in 1..=last {
        let n_in = sizes[l - 1];
        let mut f = vec![R::one(); sizes[l]];
        {
            let t = net.transition_mut(l);
            for (j, row) in t.weights.chunks_exact_mut(n_in).enumerate() {
                let norm: R = row.iter().map(|w| w.abs()).sum();
                if norm == R::zero() {
                    dead.push((l, j));
                    continue;
                }
                f[j] = norm;
                row.iter_mut().for_each(|w| *w /= norm);
            }
        }
        if let Some(b) = net.bias_mut() {
            for (v, &s) in b[l - 1].iter_mut().zip(&f) {
                *v /= s;
            }
        }
        if l < last {
            let t = net.transition_mut(l + 1);
            for row in t.weights.chunks_exact_mut(sizes[l]) {
                for (w, &s) in row.iter_mut().zip(&f) {
                    *w *= s;
                }
            }
        }
        factors = f;
    }
    Ok(L1Renormalized { net, output_scale: factors, dead })
}

/// Cumulative magnitudes of one neuron's incoming weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPartition {
    /// `P_1 <= .. <= P_n = 1`; segment `k` is `[P_k - |w_k|, P_k)`.
    pub cumulative: Vec<f64>,
    pub sign: Vec<i8>,
}

impl WeightPartition {
    /// Index of the segment containing `x`, i.e. the first `k` with
    /// `x < P_k`. Values at or beyond 1 select the last nonempty segment.
    pub fn invert(&self, x: f64) -> usize {
        let k = self.cumulative.partition_point(|&p| p <= x);
        if k < self.cumulative.len() {
            return k;
        }
        let top = *self.cumulative.last().unwrap();
        self.cumulative.partition_point(|&p| p < top)
    }
}

pub fn build_partition(weights: &[f64]) -> Result<WeightPartition, PruneError> {
    if weights.is_empty() {
        return Err(PruneError::Empty);
    }
    let norm: f64 = weights.iter().map(|w| w.abs()).sum();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(PruneError::NotNormalized(norm));
    }
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w.abs();
            acc
        })
        .collect();
    // absorb rounding so that the last value is exactly 1
    let total = acc;
    cumulative.iter_mut().for_each(|p| *p /= total);
    *cumulative.last_mut().unwrap() = 1.0;
    let sign = weights.iter().map(|&w| if w < 0.0 { -1 } else { 1 }).collect();
    Ok(WeightPartition { cumulative, sign })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathSampler {
    Pseudo { seed: u64 },
    /// Sobol' dimensions `1..=L` of the matrices scrambled with the seed;
    /// step `s` of path `p` uses component `s + 1` of point `p`.
    Sobol { scramble_seed: u64 },
}

/// Weight carried by a sampled edge shared by `m` paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reweight {
    /// The trained weight.
    Keep,
    /// `m` times the trained weight.
    Multiplicity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned<R> {
    pub net: Network<R>,
    pub unique_edges: usize,
    pub dense_edges: usize,
}

impl<R> Pruned<R> {
    /// Unique sampled edges over dense edges.
    pub fn fraction(&self) -> f64 {
        self.unique_edges as f64 / self.dense_edges as f64
    }
}

/// Traces `num_paths` paths backwards from the outputs, visited round-robin,
/// sampling each predecessor proportionally to the normalized weight
/// magnitudes. Neurons without incoming weight choose uniformly.
pub fn sample_paths<R: Real>(
    dense: &Network<R>,
    num_paths: usize,
    sampler: PathSampler,
    gm: &GeneratorMatrixSet,
) -> Result<PathTopology, PruneError> {
    if num_paths == 0 {
        return Err(PruneError::NoPaths);
    }
    let renorm = l1_renormalize(dense)?;
    let sizes = renorm.net.sizes().to_vec();
    let last = sizes.len() - 1;
    // partitions[l - 1][j] over the inputs of neuron j in layer l
    let partitions: Vec<Vec<Option<WeightPartition>>> = (1..=last)
        .map(|l| {
            let t = renorm.net.transition(l);
            t.weights
                .chunks_exact(t.n_in)
                .map(|row| {
                    // unit norm up to the rounding of R; remove that in f64
                    let norm: f64 = row.iter().map(|w| w.f64().abs()).sum();
                    if norm == 0.0 {
                        return Ok(None);
                    }
                    let row: Vec<f64> = row.iter().map(|w| w.f64() / norm).collect();
                    build_partition(&row).map(Some)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut index = vec![vec![0u32; num_paths]; sizes.len()];
    let mut draw: Box<dyn FnMut(usize, usize) -> f64> = match sampler {
        PathSampler::Pseudo { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Box::new(move |_, _| rng.gen::<f64>())
        }
        PathSampler::Sobol { scramble_seed } => {
            if gm.max_dimension() < last + 1 {
                return Err(PruneError::DimensionExhausted { needed: last + 1, available: gm.max_dimension() });
            }
            if num_paths as u64 > 1 << 32 {
                return Err(TopologyError::TooManyPaths(num_paths as u64).into());
            }
            let scrambled = qmc::scramble(gm, scramble_seed);
            Box::new(move |p, step| qmc::to_unit(scrambled.matrices()[step + 1].apply(p as u32)))
        }
    };
    for p in 0..num_paths {
        let mut j = p % sizes[last];
        index[last][p] = j as u32;
        for (step, l) in (1..=last).rev().enumerate() {
            let x = draw(p, step);
            let i = match &partitions[l - 1][j] {
                Some(part) => part.invert(x),
                None => ((x * sizes[l - 1] as f64) as usize).min(sizes[l - 1] - 1),
            };
            index[l - 1][p] = i as u32;
            j = i;
        }
    }
    Ok(PathTopology::from_indices(LayerSpec::paths(sizes)?, index, Generation::Explicit)?)
}

/// The sparse network on the sampled paths, with weights taken from the
/// trained dense network and biases copied.
pub fn sample_sparse<R: Real>(
    dense: &Network<R>,
    num_paths: usize,
    sampler: PathSampler,
    reweight: Reweight,
    gm: &GeneratorMatrixSet,
) -> Result<Pruned<R>, PruneError> {
    let topology = sample_paths(dense, num_paths, sampler, gm)?;
    let mut net = Network::from_topology(&topology, dense.bias().is_some(), dense.loss_kind());
    for l in 1..dense.num_layers() {
        let source = dense.transition(l).weights.clone();
        let n_in = dense.transition(l).n_in;
        let t = net.transition_mut(l);
        let Connections::Sparse { from, to, multiplicity, .. } = &t.connections else {
            unreachable!("sampled topologies address every layer")
        };
        let w: Vec<R> = (0..t.weights.len())
            .map(|s| {
                let trained = source[to[s] as usize * n_in + from[s] as usize];
                match reweight {
                    Reweight::Keep => trained,
                    Reweight::Multiplicity => R::of(multiplicity[s] as f64) * trained,
                }
            })
            .collect();
        t.weights = w;
    }
    if let (Some(dst), Some(src)) = (net.bias_mut(), dense.bias()) {
        for (d, s) in dst.iter_mut().zip(src) {
            d.copy_from_slice(s);
        }
    }
    let unique_edges = net.transitions().iter().map(|t| t.weights.len()).sum();
    let dense_edges = dense.transitions().iter().map(|t| t.weights.len()).sum();
    Ok(Pruned { net, unique_edges, dense_edges })
}
