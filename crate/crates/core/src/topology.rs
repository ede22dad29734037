//! Path topologies: the index table `index[l][p]` that places path `p` on
//! one neuron of every path-addressed layer `l`.
//!
//! Consecutive path-addressed layers are linked by the path edges. Layers
//! that are not path-addressed (a non power-of-2 input or output layer in
//! quasi mode, say) are fully connected to their neighbour instead.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qmc::{self, GeneratorMatrixSet, QmcError};

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("a network needs at least two layers, got {0}")]
    TooFewLayers(usize),
    #[error("layer {0} has no neurons")]
    EmptyLayer(usize),
    #[error("no layer is addressed by paths")]
    NoPathLayers,
    #[error("a topology needs at least one path")]
    NoPaths,
    #[error("{0} paths exceed the 32-bit index range of the sequence")]
    TooManyPaths(u64),
    #[error("layer {layer} has {size} neurons; quasi-random paths need a power of 2")]
    NotPowerOfTwo { layer: usize, size: usize },
    #[error("expected {expected} dimensions (one per path-addressed layer), got {got}")]
    DimensionCount { expected: usize, got: usize },
    #[error("dimension {dimension} exceeds the {available} available dimensions")]
    DimensionExhausted { dimension: usize, available: usize },
    #[error("no duplicate-free dimension found for layer {layer}; best assignment {best:?} leaves {duplicates} duplicate edges")]
    NoConflictFreeAssignment { layer: usize, best: DimensionAssignment, duplicates: usize },
    #[error("ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("sign policy needs generator matrices")]
    MissingMatrices,
    #[error("block size {block} must be a power of 2 no larger than the {paths} paths")]
    InvalidBlockSize { block: usize, paths: usize },
    #[error("index {value} out of range for layer {layer} of size {size}")]
    IndexOutOfRange { layer: usize, value: u32, size: usize },
    #[error("index table has {got} rows or columns where {expected} were expected")]
    TableShape { expected: usize, got: usize },
    #[error(transparent)]
    Qmc(#[from] QmcError),
}

/// How a boundary layer is attached to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryMode {
    Paths,
    FullyConnected,
}

/// Neurons per layer plus the attachment of the first and last layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    sizes: Vec<usize>,
    input_mode: BoundaryMode,
    output_mode: BoundaryMode,
}

impl LayerSpec {
    pub fn new(sizes: Vec<usize>, input_mode: BoundaryMode, output_mode: BoundaryMode) -> Result<Self, TopologyError> {
        if sizes.len() < 2 {
            return Err(TopologyError::TooFewLayers(sizes.len()));
        }
        if let Some(l) = sizes.iter().position(|&n| n == 0) {
            return Err(TopologyError::EmptyLayer(l));
        }
        let spec = Self { sizes, input_mode, output_mode };
        if spec.first_path_layer() > spec.last_path_layer() {
            return Err(TopologyError::NoPathLayers);
        }
        Ok(spec)
    }

    /// Every layer addressed by paths.
    pub fn paths(sizes: Vec<usize>) -> Result<Self, TopologyError> {
        Self::new(sizes, BoundaryMode::Paths, BoundaryMode::Paths)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_mode(&self) -> BoundaryMode {
        self.input_mode
    }

    pub fn output_mode(&self) -> BoundaryMode {
        self.output_mode
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn first_path_layer(&self) -> usize {
        match self.input_mode {
            BoundaryMode::Paths => 0,
            BoundaryMode::FullyConnected => 1,
        }
    }

    pub fn last_path_layer(&self) -> usize {
        let last = self.sizes.len() - 1;
        match self.output_mode {
            BoundaryMode::Paths => last,
            BoundaryMode::FullyConnected => last - 1,
        }
    }

    pub fn path_layers(&self) -> RangeInclusive<usize> {
        self.first_path_layer()..=self.last_path_layer()
    }

    pub fn num_path_layers(&self) -> usize {
        self.last_path_layer() + 1 - self.first_path_layer()
    }

    /// Whether transition `t` (layer `t - 1` to layer `t`) runs along paths.
    pub fn is_path_transition(&self, t: usize) -> bool {
        t >= 1 && t - 1 >= self.first_path_layer() && t <= self.last_path_layer()
    }

    /// Size of the equivalent fully connected network.
    pub fn dense_weight_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

/// Total paths, or paths per input unit (`P = n_0 * k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathCount {
    Total(usize),
    PerInput(usize),
}

impl PathCount {
    pub fn resolve(self, layers: &LayerSpec) -> usize {
        match self {
            PathCount::Total(p) => p,
            PathCount::PerInput(k) => layers.sizes[0] * k,
        }
    }
}

/// How the index table was produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Generation {
    Pseudo { seed: u64 },
    Quasi { dims: Vec<usize>, scramble_seed: u64, skipped: Vec<usize> },
    /// Paths given explicitly, e.g. sampled from a trained network.
    Explicit,
}

/// Sign assigned to the weights along each path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignPolicy {
    AllPositive,
    EvenOdd,
    /// Path `p` is positive iff `p < r * P`.
    Ratio(f64),
    /// Path `p` is positive iff component `j` of point `p` is below 1/2.
    SobolDimension(usize),
}

/// The whole network graph as a table of neuron indices per path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTopology {
    layers: LayerSpec,
    num_paths: usize,
    /// `index[l - first_path_layer][p]`.
    index: Vec<Vec<u32>>,
    sign: Vec<i8>,
    generation: Generation,
    sign_policy: SignPolicy,
}

fn check_path_count(num_paths: usize) -> Result<(), TopologyError> {
    if num_paths == 0 {
        return Err(TopologyError::NoPaths);
    }
    if num_paths as u64 > 1 << 32 {
        return Err(TopologyError::TooManyPaths(num_paths as u64));
    }
    Ok(())
}

impl PathTopology {
    /// Builds a topology from an explicit index table, one row per
    /// path-addressed layer.
    pub fn from_indices(layers: LayerSpec, index: Vec<Vec<u32>>, generation: Generation) -> Result<Self, TopologyError> {
        if index.len() != layers.num_path_layers() {
            return Err(TopologyError::TableShape { expected: layers.num_path_layers(), got: index.len() });
        }
        let num_paths = index[0].len();
        check_path_count(num_paths)?;
        for (row, l) in index.iter().zip(layers.path_layers()) {
            if row.len() != num_paths {
                return Err(TopologyError::TableShape { expected: num_paths, got: row.len() });
            }
            let size = layers.sizes[l];
            if let Some(&value) = row.iter().find(|&&v| v as usize >= size) {
                return Err(TopologyError::IndexOutOfRange { layer: l, value, size });
            }
        }
        Ok(Self {
            layers,
            num_paths,
            index,
            sign: vec![1; num_paths],
            generation,
            sign_policy: SignPolicy::AllPositive,
        })
    }

    pub fn layers(&self) -> &LayerSpec {
        &self.layers
    }

    pub fn num_paths(&self) -> usize {
        self.num_paths
    }

    pub fn generation(&self) -> &Generation {
        &self.generation
    }

    pub fn sign_policy(&self) -> SignPolicy {
        self.sign_policy
    }

    /// Neuron indices of all paths in absolute layer `layer`.
    pub fn layer_indices(&self, layer: usize) -> &[u32] {
        &self.index[layer - self.layers.first_path_layer()]
    }

    pub fn index(&self, layer: usize, path: usize) -> u32 {
        self.layer_indices(layer)[path]
    }

    pub fn table(&self) -> &[Vec<u32>] {
        &self.index
    }

    pub fn signs(&self) -> &[i8] {
        &self.sign
    }

    pub fn sign(&self, path: usize) -> i8 {
        self.sign[path]
    }

    pub(crate) fn set_generation(&mut self, generation: Generation) {
        self.generation = generation;
    }

    pub(crate) fn set_signs(&mut self, sign: Vec<i8>, policy: SignPolicy) {
        debug_assert_eq!(sign.len(), self.num_paths);
        self.sign = sign;
        self.sign_policy = policy;
    }

    /// Number of paths through each neuron of `layer`.
    pub fn valence(&self, layer: usize) -> Vec<usize> {
        let mut counts = vec![0; self.layers.sizes[layer]];
        for &i in self.layer_indices(layer) {
            counts[i as usize] += 1;
        }
        counts
    }

    /// Recomputes the table of a quasi-random topology from its generation
    /// record.
    pub fn recompute(&self, gm: &GeneratorMatrixSet) -> Result<Option<Vec<Vec<u32>>>, TopologyError> {
        match &self.generation {
            Generation::Quasi { dims, scramble_seed, .. } => {
                let t = generate_quasi_paths(self.layers.clone(), self.num_paths, gm, dims, *scramble_seed)?;
                Ok(Some(t.index))
            }
            _ => Ok(None),
        }
    }
}

/// Independent uniform indices from a seeded ChaCha8 stream, drawn layer by
/// layer and path by path.
pub fn generate_pseudo_paths(layers: LayerSpec, num_paths: usize, seed: u64) -> Result<PathTopology, TopologyError> {
    check_path_count(num_paths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = layers
        .path_layers()
        .map(|l| {
            let n = layers.sizes[l] as u32;
            (0..num_paths).map(|_| rng.gen_range(0..n)).collect()
        })
        .collect();
    PathTopology::from_indices(layers, index, Generation::Pseudo { seed })
}

fn check_quasi_layers(layers: &LayerSpec) -> Result<(), TopologyError> {
    for l in layers.path_layers() {
        let size = layers.sizes[l];
        if !size.is_power_of_two() {
            return Err(TopologyError::NotPowerOfTwo { layer: l, size });
        }
    }
    Ok(())
}

fn quasi_column(gm: &GeneratorMatrixSet, dim: usize, n: usize, num_paths: usize) -> Result<Vec<u32>, TopologyError> {
    let c = gm.matrix(dim).map_err(|_| TopologyError::DimensionExhausted { dimension: dim, available: gm.max_dimension() })?;
    Ok((0..num_paths).map(|p| qmc::scale_to(c.apply(p as u32), n) as u32).collect())
}

/// Links path `p` to neuron `floor(n_l * x_p^(dims[l]))` of every
/// path-addressed layer, using the matrices scrambled with `scramble_seed`.
pub fn generate_quasi_paths(
    layers: LayerSpec,
    num_paths: usize,
    gm: &GeneratorMatrixSet,
    dims: &[usize],
    scramble_seed: u64,
) -> Result<PathTopology, TopologyError> {
    check_path_count(num_paths)?;
    check_quasi_layers(&layers)?;
    if dims.len() != layers.num_path_layers() {
        return Err(TopologyError::DimensionCount { expected: layers.num_path_layers(), got: dims.len() });
    }
    let scrambled = qmc::scramble(gm, scramble_seed);
    let index = layers
        .path_layers()
        .zip(dims)
        .map(|(l, &d)| quasi_column(&scrambled, d, layers.sizes[l], num_paths))
        .collect::<Result<Vec<_>, _>>()?;
    let generation = Generation::Quasi { dims: dims.to_vec(), scramble_seed, skipped: Vec::new() };
    PathTopology::from_indices(layers, index, generation)
}

/// Number of paths whose edge `(from[p], to[p])` repeats an earlier path.
pub fn duplicate_edges(from: &[u32], to: &[u32], to_size: usize) -> usize {
    let mut keys: Vec<u64> = from.iter().zip(to).map(|(&i, &j)| i as u64 * to_size as u64 + j as u64).collect();
    keys.sort_unstable();
    keys.dedup();
    from.len() - keys.len()
}

/// Dimensions chosen per path-addressed layer and the candidates passed over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DimensionAssignment {
    pub dims: Vec<usize>,
    pub skipped: Vec<usize>,
}

/// Greedily assigns consecutive dimensions, starting at `start_dim`, to the
/// path-addressed layers. A candidate is skipped when it would put two paths
/// on the same edge although the transition has room for all paths.
pub fn detect_bad_dimensions(
    layers: &LayerSpec,
    num_paths: usize,
    gm: &GeneratorMatrixSet,
    start_dim: usize,
) -> Result<DimensionAssignment, TopologyError> {
    check_path_count(num_paths)?;
    check_quasi_layers(layers)?;
    let path_layers: Vec<usize> = layers.path_layers().collect();
    let mut assignment = DimensionAssignment { dims: vec![start_dim], skipped: Vec::new() };
    let mut previous = quasi_column(gm, start_dim, layers.sizes[path_layers[0]], num_paths)?;
    let mut next = start_dim + 1;
    for &l in &path_layers[1..] {
        let n = layers.sizes[l];
        let cells = layers.sizes[l - 1] * n;
        let mut best: Option<(usize, usize, Vec<u32>)> = None;
        loop {
            if next >= gm.max_dimension() {
                let (duplicates, dim, column) = match best {
                    Some(b) => b,
                    None => return Err(TopologyError::DimensionExhausted { dimension: next, available: gm.max_dimension() }),
                };
                let mut best_assignment = assignment.clone();
                best_assignment.dims.push(dim);
                best_assignment.skipped.retain(|&s| s != dim);
                let _ = column;
                return Err(TopologyError::NoConflictFreeAssignment { layer: l, best: best_assignment, duplicates });
            }
            let candidate = next;
            next += 1;
            let column = quasi_column(gm, candidate, n, num_paths)?;
            if num_paths > cells {
                assignment.dims.push(candidate);
                previous = column;
                break;
            }
            let duplicates = duplicate_edges(&previous, &column, n);
            if duplicates == 0 {
                assignment.dims.push(candidate);
                previous = column;
                break;
            }
            assignment.skipped.push(candidate);
            if best.as_ref().map_or(true, |b| duplicates < b.0) {
                best = Some((duplicates, candidate, column));
            }
        }
    }
    Ok(assignment)
}

/// Quasi-random paths with bad dimensions skipped, searching the scrambled
/// matrices from `start_dim` on. The skip list is recorded in the topology.
pub fn generate_quasi_skipping(
    layers: LayerSpec,
    num_paths: usize,
    gm: &GeneratorMatrixSet,
    start_dim: usize,
    scramble_seed: u64,
) -> Result<PathTopology, TopologyError> {
    let scrambled = qmc::scramble(gm, scramble_seed);
    let assignment = detect_bad_dimensions(&layers, num_paths, &scrambled, start_dim)?;
    let mut t = generate_quasi_paths(layers, num_paths, gm, &assignment.dims, scramble_seed)?;
    t.generation = Generation::Quasi { dims: assignment.dims, scramble_seed, skipped: assignment.skipped };
    Ok(t)
}

/// Consecutive dimensions `start_dim, start_dim + 1, ..` without skipping.
pub fn sequential_dims(layers: &LayerSpec, start_dim: usize) -> Vec<usize> {
    (start_dim..start_dim + layers.num_path_layers()).collect()
}

/// Assigns one sign per path.
pub fn assign_signs(
    mut t: PathTopology,
    policy: SignPolicy,
    gm: Option<&GeneratorMatrixSet>,
) -> Result<PathTopology, TopologyError> {
    let n = t.num_paths;
    let sign: Vec<i8> = match policy {
        SignPolicy::AllPositive => vec![1; n],
        SignPolicy::EvenOdd => (0..n).map(|p| if p % 2 == 0 { 1 } else { -1 }).collect(),
        SignPolicy::Ratio(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(TopologyError::InvalidRatio(r));
            }
            let positive = r * n as f64;
            (0..n).map(|p| if (p as f64) < positive { 1 } else { -1 }).collect()
        }
        SignPolicy::SobolDimension(j) => {
            let c = gm.ok_or(TopologyError::MissingMatrices)?.matrix(j)?;
            (0..n).map(|p| if c.apply(p as u32) < 1 << 31 { 1 } else { -1 }).collect()
        }
    };
    t.set_signs(sign, policy);
    Ok(t)
}

/// One coalesced edge of a path transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
    /// Number of paths running along the edge.
    pub multiplicity: u32,
    /// First path referencing the edge; its sign is the sign of the slot.
    pub owner: u32,
}

/// Unique edges of one path transition, in order of first reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionSlots {
    /// Absolute index of the target layer.
    pub layer: usize,
    pub edges: Vec<Edge>,
    pub path_to_slot: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSlots {
    pub transitions: Vec<TransitionSlots>,
}

impl EdgeSlots {
    pub fn nonzero_weight_count(&self) -> usize {
        self.transitions.iter().map(|t| t.edges.len()).sum()
    }

    pub fn transition(&self, layer: usize) -> Option<&TransitionSlots> {
        self.transitions.iter().find(|t| t.layer == layer)
    }
}

/// Gives every distinct `(from, to)` pair of a transition one slot; paths
/// referencing the same pair share it.
pub fn coalesce_edges(t: &PathTopology) -> EdgeSlots {
    let layers = t.layers();
    let transitions = layers
        .path_layers()
        .skip(1)
        .map(|l| {
            let from = t.layer_indices(l - 1);
            let to = t.layer_indices(l);
            let mut lookup: HashMap<(u32, u32), u32> = HashMap::with_capacity(t.num_paths);
            let mut edges: Vec<Edge> = Vec::new();
            let path_to_slot = (0..t.num_paths)
                .map(|p| {
                    let slot = *lookup.entry((from[p], to[p])).or_insert_with(|| {
                        edges.push(Edge { from: from[p], to: to[p], multiplicity: 0, owner: p as u32 });
                        (edges.len() - 1) as u32
                    });
                    edges[slot as usize].multiplicity += 1;
                    slot
                })
                .collect();
            TransitionSlots { layer: l, edges, path_to_slot }
        })
        .collect();
    EdgeSlots { transitions }
}

/// Collisions of one layer within contiguous blocks of paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerConflicts {
    pub layer: usize,
    pub blocks: usize,
    /// Blocks in which some neuron is referenced twice.
    pub conflicting_blocks: usize,
    /// Sum over blocks of `block length - distinct neurons`.
    pub collisions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictReport {
    pub block_size: usize,
    pub layers: Vec<LayerConflicts>,
}

impl ConflictReport {
    pub fn total_collisions(&self) -> usize {
        self.layers.iter().map(|l| l.collisions).sum()
    }

    pub fn conflicting_blocks(&self) -> usize {
        self.layers.iter().map(|l| l.conflicting_blocks).sum()
    }
}

/// Checks, for every contiguous block of `block_size` paths and every
/// path-addressed layer, whether the referenced neurons are pairwise
/// distinct (a bank-conflict-free access).
pub fn check_block_conflicts(t: &PathTopology, block_size: usize) -> Result<ConflictReport, TopologyError> {
    if block_size == 0 || !block_size.is_power_of_two() || block_size > t.num_paths {
        return Err(TopologyError::InvalidBlockSize { block: block_size, paths: t.num_paths });
    }
    let layers = t
        .layers()
        .path_layers()
        .map(|l| {
            let mut seen = vec![u32::MAX; t.layers().sizes()[l]];
            let mut report = LayerConflicts { layer: l, blocks: 0, conflicting_blocks: 0, collisions: 0 };
            for (b, block) in t.layer_indices(l).chunks(block_size).enumerate() {
                let mut collisions = 0;
                for &i in block {
                    if seen[i as usize] == b as u32 {
                        collisions += 1;
                    }
                    seen[i as usize] = b as u32;
                }
                report.blocks += 1;
                report.collisions += collisions;
                if collisions > 0 {
                    report.conflicting_blocks += 1;
                }
            }
            report
        })
        .collect();
    Ok(ConflictReport { block_size, layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm() -> GeneratorMatrixSet {
        GeneratorMatrixSet::joe_kuo_dims(64).unwrap()
    }

    fn pairwise_duplicates(from: &[u32], to: &[u32]) -> usize {
        (0..from.len()).filter(|&q| (0..q).any(|p| from[p] == from[q] && to[p] == to[q])).count()
    }

    #[test]
    fn layer_spec_validation() {
        assert_eq!(LayerSpec::paths(vec![4]), Err(TopologyError::TooFewLayers(1)));
        assert_eq!(LayerSpec::paths(vec![4, 0]), Err(TopologyError::EmptyLayer(1)));
        assert_eq!(
            LayerSpec::new(vec![3, 10], BoundaryMode::FullyConnected, BoundaryMode::FullyConnected),
            Err(TopologyError::NoPathLayers)
        );
        let spec = LayerSpec::new(vec![784, 256, 256, 10], BoundaryMode::FullyConnected, BoundaryMode::FullyConnected).unwrap();
        assert_eq!(spec.path_layers(), 1..=2);
        assert!(!spec.is_path_transition(1));
        assert!(spec.is_path_transition(2));
        assert!(!spec.is_path_transition(3));
        assert_eq!(PathCount::PerInput(8).resolve(&spec), 6272);
    }

    #[test]
    fn pseudo_single_path_in_range() {
        let t = generate_pseudo_paths(LayerSpec::paths(vec![5, 7, 3]).unwrap(), 1, 3).unwrap();
        assert_eq!(t.table().len(), 3);
        for (l, row) in t.table().iter().enumerate() {
            assert_eq!(row.len(), 1);
            assert!((row[0] as usize) < t.layers().sizes()[l]);
        }
        assert_eq!(generate_pseudo_paths(LayerSpec::paths(vec![5, 7]).unwrap(), 0, 3), Err(TopologyError::NoPaths));
    }

    #[test]
    fn pseudo_is_deterministic() {
        let spec = LayerSpec::paths(vec![16, 32, 8]).unwrap();
        let a = generate_pseudo_paths(spec.clone(), 500, 42).unwrap();
        let b = generate_pseudo_paths(spec.clone(), 500, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.table(), generate_pseudo_paths(spec, 500, 43).unwrap().table());
    }

    #[test]
    fn pseudo_histogram_is_uniform() {
        let paths = 100_000;
        let t = generate_pseudo_paths(LayerSpec::paths(vec![4, 4]).unwrap(), paths, 7).unwrap();
        let expected = paths as f64 / 4.0;
        let sigma = (paths as f64 * 0.25 * 0.75).sqrt();
        for l in 0..2 {
            for count in t.valence(l) {
                assert!((count as f64 - expected).abs() < 4.0 * sigma, "{count}");
            }
        }
    }

    #[test]
    fn quasi_small_example() {
        let t = generate_quasi_paths(LayerSpec::paths(vec![4, 4]).unwrap(), 4, &gm(), &[0, 1], 0).unwrap();
        assert_eq!(t.layer_indices(0), &[0, 2, 1, 3]);
    }

    #[test]
    fn quasi_constant_valence() {
        let t = generate_quasi_paths(LayerSpec::paths(vec![8, 8, 8]).unwrap(), 16, &gm(), &[1, 2, 3], 0).unwrap();
        for l in 0..3 {
            assert_eq!(t.valence(l), vec![2; 8]);
        }
    }

    #[test]
    fn quasi_full_permutation() {
        let t = generate_quasi_paths(LayerSpec::paths(vec![32; 5]).unwrap(), 32, &gm(), &[0, 1, 2, 3, 4], 0).unwrap();
        for row in t.table() {
            let mut sorted = row.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn quasi_rejects_bad_input() {
        let spec = LayerSpec::paths(vec![8, 6]).unwrap();
        assert_eq!(
            generate_quasi_paths(spec, 8, &gm(), &[0, 1], 0),
            Err(TopologyError::NotPowerOfTwo { layer: 1, size: 6 })
        );
        let spec = LayerSpec::paths(vec![8, 8]).unwrap();
        assert_eq!(
            generate_quasi_paths(spec.clone(), 8, &gm(), &[0], 0),
            Err(TopologyError::DimensionCount { expected: 2, got: 1 })
        );
        assert_eq!(
            generate_quasi_paths(spec, 8, &gm(), &[0, 64], 0),
            Err(TopologyError::DimensionExhausted { dimension: 64, available: 64 })
        );
        // non power-of-2 boundary layers are fine when fully connected
        let spec = LayerSpec::new(vec![784, 256, 256, 10], BoundaryMode::FullyConnected, BoundaryMode::FullyConnected).unwrap();
        assert!(generate_quasi_paths(spec, 1024, &gm(), &[1, 2], 0).is_ok());
    }

    #[test]
    fn quasi_recomputable() {
        let spec = LayerSpec::paths(vec![16, 32, 64]).unwrap();
        let t = generate_quasi_skipping(spec, 256, &gm(), 1, 1174).unwrap();
        assert_eq!(t.recompute(&gm()).unwrap().unwrap(), t.table());
        let p = generate_pseudo_paths(LayerSpec::paths(vec![4, 4]).unwrap(), 8, 1).unwrap();
        assert_eq!(p.recompute(&gm()).unwrap(), None);
    }

    #[test]
    fn skipping_removes_duplicates() {
        for (sizes, paths) in [(vec![16, 16, 16, 16], 128), (vec![8, 16, 32], 64), (vec![32, 32, 32], 512)] {
            let spec = LayerSpec::paths(sizes).unwrap();
            let a = detect_bad_dimensions(&spec, paths, &gm(), 1).unwrap();
            let t = generate_quasi_paths(spec.clone(), paths, &gm(), &a.dims, 0).unwrap();
            for l in 1..spec.num_layers() {
                let dup = pairwise_duplicates(t.layer_indices(l - 1), t.layer_indices(l));
                assert_eq!(dup, 0);
                assert_eq!(duplicate_edges(t.layer_indices(l - 1), t.layer_indices(l), spec.sizes()[l]), 0);
            }
            for s in &a.skipped {
                assert!(!a.dims.contains(s));
            }
        }
    }

    #[test]
    fn skip_over_duplicating_dimension() {
        // Search for a pair of dimensions (j, j + 1) where j + 1 duplicates
        // against j and j + 2 does not; the detector must skip exactly j + 1.
        let spec = LayerSpec::paths(vec![16, 16]).unwrap();
        let paths = 64;
        let g = gm();
        let column = |d: usize| quasi_column(&g, d, 16, paths).unwrap();
        let start = (1..60)
            .find(|&j| {
                pairwise_duplicates(&column(j), &column(j + 1)) > 0 && pairwise_duplicates(&column(j), &column(j + 2)) == 0
            })
            .expect("a duplicating neighbour exists among the first dimensions");
        let a = detect_bad_dimensions(&spec, paths, &g, start).unwrap();
        assert_eq!(a.dims, vec![start, start + 2]);
        assert_eq!(a.skipped, vec![start + 1]);
    }

    #[test]
    fn skipping_adds_weights_to_the_channel_topology() {
        let spec = LayerSpec::new(vec![3, 16, 32, 32, 64, 64, 10], BoundaryMode::FullyConnected, BoundaryMode::FullyConnected).unwrap();
        let plain = generate_quasi_paths(spec.clone(), 1024, &gm(), &sequential_dims(&spec, 1), 0).unwrap();
        let skipping = generate_quasi_skipping(spec, 1024, &gm(), 1, 0).unwrap();
        let (a, b) = (coalesce_edges(&plain).nonzero_weight_count(), coalesce_edges(&skipping).nonzero_weight_count());
        assert!(b > a, "{b} <= {a}");
        // every transition at its cap min(P, n_{l-1} n_l)
        assert_eq!(b, 512 + 3 * 1024);
    }

    #[test]
    fn no_skipping_beyond_capacity() {
        let spec = LayerSpec::paths(vec![4, 4]).unwrap();
        let a = detect_bad_dimensions(&spec, 64, &gm(), 1).unwrap();
        assert_eq!(a.dims, vec![1, 2]);
        assert!(a.skipped.is_empty());
    }

    #[test]
    fn exhaustion_reports_best() {
        let spec = LayerSpec::paths(vec![2, 2]).unwrap();
        let small = GeneratorMatrixSet::joe_kuo_dims(3).unwrap();
        // 4 paths fill all 4 cells only if the pair is a perfect grid
        match detect_bad_dimensions(&spec, 4, &small, 0) {
            Ok(a) => assert_eq!(a.dims.len(), 2),
            Err(TopologyError::NoConflictFreeAssignment { best, .. }) => assert_eq!(best.dims.len(), 2),
            Err(e) => panic!("{e}"),
        }
        let tiny = GeneratorMatrixSet::joe_kuo_dims(2).unwrap();
        // dims 0 and 1 agree on the first two points, so 4 paths over 2x2 collide
        let r = detect_bad_dimensions(&LayerSpec::paths(vec![2, 2]).unwrap(), 4, &tiny, 1);
        assert!(matches!(r, Err(TopologyError::DimensionExhausted { .. })));
    }

    #[test]
    fn signs() {
        let t = generate_pseudo_paths(LayerSpec::paths(vec![4, 4]).unwrap(), 8, 0).unwrap();
        let even = assign_signs(t.clone(), SignPolicy::EvenOdd, None).unwrap();
        assert_eq!(even.signs(), &[1, -1, 1, -1, 1, -1, 1, -1]);
        let all = assign_signs(t.clone(), SignPolicy::Ratio(1.0), None).unwrap();
        assert!(all.signs().iter().all(|&s| s == 1));
        let quarter = assign_signs(t.clone(), SignPolicy::Ratio(0.25), None).unwrap();
        assert_eq!(quarter.signs(), &[1, 1, -1, -1, -1, -1, -1, -1]);
        assert_eq!(assign_signs(t.clone(), SignPolicy::Ratio(1.5), None), Err(TopologyError::InvalidRatio(1.5)));
        assert_eq!(assign_signs(t.clone(), SignPolicy::SobolDimension(0), None), Err(TopologyError::MissingMatrices));
        let t = generate_pseudo_paths(LayerSpec::paths(vec![4, 4]).unwrap(), 64, 0).unwrap();
        for j in [0, 5] {
            let s = assign_signs(t.clone(), SignPolicy::SobolDimension(j), Some(&gm())).unwrap();
            assert_eq!(s.signs().iter().filter(|&&s| s == 1).count(), 32);
        }
    }

    #[test]
    fn half_split_balances_each_neuron() {
        let spec = LayerSpec::paths(vec![16, 16, 16]).unwrap();
        let t = generate_quasi_paths(spec, 64, &gm(), &[1, 2, 3], 0).unwrap();
        let t = assign_signs(t, SignPolicy::Ratio(0.5), None).unwrap();
        for l in 0..3 {
            let mut sum = vec![0i32; 16];
            for p in 0..64 {
                sum[t.index(l, p) as usize] += t.sign(p) as i32;
            }
            assert!(sum.iter().all(|&s| s == 0), "layer {l}: {sum:?}");
        }
    }

    #[test]
    fn coalesce_examples() {
        let spec = LayerSpec::paths(vec![4, 4, 4]).unwrap();
        let t = PathTopology::from_indices(spec.clone(), vec![vec![0, 1, 2], vec![1, 2, 3], vec![3, 0, 1]], Generation::Explicit).unwrap();
        let slots = coalesce_edges(&t);
        assert_eq!(slots.nonzero_weight_count(), 6);

        let t = PathTopology::from_indices(spec, vec![vec![0, 1, 0], vec![1, 2, 1], vec![3, 0, 3]], Generation::Explicit).unwrap();
        let slots = coalesce_edges(&t);
        assert_eq!(slots.nonzero_weight_count(), 4);
        for tr in &slots.transitions {
            assert_eq!(tr.path_to_slot[0], tr.path_to_slot[2]);
            assert_eq!(tr.edges[tr.path_to_slot[0] as usize].multiplicity, 2);
            assert_eq!(tr.edges.iter().map(|e| e.multiplicity).sum::<u32>(), 3);
        }
    }

    #[test]
    fn block_conflicts() {
        let spec = LayerSpec::paths(vec![64, 64, 64]).unwrap();
        let q = generate_quasi_paths(spec.clone(), 256, &gm(), &[3, 4, 5], 0).unwrap();
        assert_eq!(check_block_conflicts(&q, 64).unwrap().total_collisions(), 0);
        assert_eq!(check_block_conflicts(&q, 1).unwrap().total_collisions(), 0);
        let p = generate_pseudo_paths(LayerSpec::paths(vec![256, 256]).unwrap(), 256, 9).unwrap();
        assert!(check_block_conflicts(&p, 256).unwrap().total_collisions() > 0);
        assert!(check_block_conflicts(&p, 3).is_err());
        assert!(check_block_conflicts(&p, 512).is_err());
    }

    #[test]
    fn explicit_table_validation() {
        let spec = LayerSpec::paths(vec![2, 2]).unwrap();
        assert_eq!(
            PathTopology::from_indices(spec.clone(), vec![vec![0, 1], vec![2, 0]], Generation::Explicit),
            Err(TopologyError::IndexOutOfRange { layer: 1, value: 2, size: 2 })
        );
        assert_eq!(
            PathTopology::from_indices(spec, vec![vec![0, 1], vec![1]], Generation::Explicit),
            Err(TopologyError::TableShape { expected: 2, got: 1 })
        );
    }
}
