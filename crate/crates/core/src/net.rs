//! Feed-forward networks whose transitions are either fully connected or
//! sparse along coalesced path edges, with backpropagation and momentum SGD.
//!
//! Paths crossing the same neuron pair share one slot, which holds the
//! matrix entry of that edge: it contributes `w * a_i` once, however many
//! paths reference it, and its gradient is the dense one, `delta_j * a_i`.
//! The equivalent dense matrix has `w` at every slot position and zeros
//! elsewhere.
//!
//! Hidden units are ReLU; input values pass unchanged; the output layer is
//! linear, with the loss deciding whether a softmax is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::real::Real;
use crate::topology::{coalesce_edges, PathTopology};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has {got} values, the network expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("target has {got} values, the network has {expected} outputs")]
    TargetSize { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("forward state does not belong to this network")]
    ForwardMismatch,
    #[error("gradient buffers do not match the parameters")]
    GradientShape,
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error("non-finite loss encountered")]
    NonFinite,
    #[error("invalid training plan: {0}")]
    InvalidPlan(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Loss {
    /// `0.5 * |a - d|^2` on the linear output.
    SquaredError,
    /// Cross-entropy of the softmax of the output.
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Output rule applied to the last layer.
    pub fn output<R: Real>(self, z: &[R]) -> Vec<R> {
        match self {
            Loss::SquaredError => z.to_vec(),
            Loss::SoftmaxCrossEntropy => softmax(z),
        }
    }

    /// Loss value, writing dLoss/dz into `delta`.
    pub fn value_and_delta<R: Real>(self, z: &[R], target: &[R], delta: &mut [R]) -> R {
        match self {
            Loss::SquaredError => {
                let mut loss = R::zero();
                for ((d, &a), &t) in delta.iter_mut().zip(z).zip(target) {
                    *d = a - t;
                    loss += *d * *d;
                }
                loss * R::of(0.5)
            }
            Loss::SoftmaxCrossEntropy => {
                let max = z.iter().copied().fold(R::neg_infinity(), R::max);
                let sum: R = z.iter().map(|&v| (v - max).exp()).sum();
                let log_sum = sum.ln() + max;
                let mut loss = R::zero();
                for ((d, &v), &t) in delta.iter_mut().zip(z).zip(target) {
                    *d = (v - log_sum).exp() - t;
                    if t != R::zero() {
                        loss -= t * (v - log_sum);
                    }
                }
                loss
            }
        }
    }
}

pub fn softmax<R: Real>(z: &[R]) -> Vec<R> {
    let max = z.iter().copied().fold(R::neg_infinity(), R::max);
    let e: Vec<R> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: R = e.iter().copied().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub fn one_hot<R: Real>(label: usize, classes: usize) -> Vec<R> {
    let mut v = vec![R::zero(); classes];
    v[label] = R::one();
    v
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<R: Real>(v: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub enum Connections {
    /// Row-major `n_out x n_in` weights.
    Dense,
    /// One weight per coalesced edge, in slot order.
    Sparse { from: Vec<u32>, to: Vec<u32>, multiplicity: Vec<u32>, sign: Vec<i8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<R> {
    pub n_in: usize,
    pub n_out: usize,
    pub connections: Connections,
    pub weights: Vec<R>,
}

impl<R: Real> Transition<R> {
    pub fn dense(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, connections: Connections::Dense, weights: vec![R::zero(); n_in * n_out] }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.connections, Connections::Sparse { .. })
    }

    /// Multiply-accumulates per forward pass.
    pub fn mac_count(&self) -> usize {
        self.weights.len()
    }

    /// Number of distinct incoming edges per target neuron.
    pub fn fan_in(&self) -> Vec<usize> {
        match &self.connections {
            Connections::Dense => vec![self.n_in; self.n_out],
            Connections::Sparse { to, .. } => count(to, self.n_out),
        }
    }

    /// Number of distinct outgoing edges per source neuron.
    pub fn fan_out(&self) -> Vec<usize> {
        match &self.connections {
            Connections::Dense => vec![self.n_out; self.n_in],
            Connections::Sparse { from, .. } => count(from, self.n_in),
        }
    }

    /// Target neuron of every weight, in storage order.
    pub fn targets(&self) -> Vec<u32> {
        match &self.connections {
            Connections::Dense => (0..self.n_out).flat_map(|j| std::iter::repeat(j as u32).take(self.n_in)).collect(),
            Connections::Sparse { to, .. } => to.clone(),
        }
    }

    /// Source neuron of every weight, in storage order.
    pub fn sources(&self) -> Vec<u32> {
        match &self.connections {
            Connections::Dense => (0..self.n_out).flat_map(|_| 0..self.n_in as u32).collect(),
            Connections::Sparse { from, .. } => from.clone(),
        }
    }

    /// The equivalent row-major dense matrix.
    pub fn to_dense_matrix(&self) -> Vec<R> {
        match &self.connections {
            Connections::Dense => self.weights.clone(),
            Connections::Sparse { from, to, .. } => {
                let mut m = vec![R::zero(); self.n_in * self.n_out];
                for s in 0..self.weights.len() {
                    m[to[s] as usize * self.n_in + from[s] as usize] = self.weights[s];
                }
                m
            }
        }
    }

    fn forward(&self, a: &[R], z: &mut [R]) {
        match &self.connections {
            Connections::Dense => {
                for (zj, row) in z.iter_mut().zip(self.weights.chunks_exact(self.n_in)) {
                    for (&w, &x) in row.iter().zip(a) {
                        *zj += w * x;
                    }
                }
            }
            Connections::Sparse { from, to, .. } => {
                for s in 0..self.weights.len() {
                    let x = a[from[s] as usize];
                    if x != R::zero() {
                        z[to[s] as usize] += self.weights[s] * x;
                    }
                }
            }
        }
    }

    /// Accumulates weight gradients and, if requested, the error sent back
    /// to the sources (before gating).
    fn backward(&self, a: &[R], delta: &[R], grad: &mut [R], back: Option<&mut [R]>) {
        match &self.connections {
            Connections::Dense => {
                for (&d, g) in delta.iter().zip(grad.chunks_exact_mut(self.n_in)) {
                    if d == R::zero() {
                        continue;
                    }
                    for (gi, &x) in g.iter_mut().zip(a) {
                        *gi += d * x;
                    }
                }
                if let Some(back) = back {
                    for (row, &d) in self.weights.chunks_exact(self.n_in).zip(delta) {
                        if d == R::zero() {
                            continue;
                        }
                        for (b, &w) in back.iter_mut().zip(row) {
                            *b += w * d;
                        }
                    }
                }
            }
            Connections::Sparse { from, to, .. } => {
                let mut back = back;
                for s in 0..self.weights.len() {
                    let d = delta[to[s] as usize];
                    if d == R::zero() {
                        continue;
                    }
                    let i = from[s] as usize;
                    grad[s] += d * a[i];
                    if let Some(back) = back.as_deref_mut() {
                        back[i] += self.weights[s] * d;
                    }
                }
            }
        }
    }
}

fn count(indices: &[u32], n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for &i in indices {
        c[i as usize] += 1;
    }
    c
}

/// Pre-activations `z` and activations `a` of every layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward<R> {
    pub z: Vec<Vec<R>>,
    pub a: Vec<Vec<R>>,
}

impl<R: Real> Forward<R> {
    /// Linear output of the last layer.
    pub fn logits(&self) -> &[R] {
        self.z.last().expect("at least two layers")
    }
}

/// Trainable parameters of one group, viewed for an optimizer step.
pub struct ParamGroup<'a, R> {
    pub values: &'a mut [R],
    /// Fixed sign per block of `sign_block` consecutive values.
    pub sign: Option<&'a [i8]>,
    pub sign_block: usize,
    pub decay: bool,
}

/// Interface shared by the fully connected and convolutional models for the
/// optimizer and training loop.
pub trait Model<R: Real> {
    fn input_len(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn loss(&self) -> Loss;

    /// Zeroed gradient buffers, one per parameter group.
    fn zero_grads(&self) -> Vec<Vec<R>>;

    /// Adds the gradient of the summed loss over a batch; returns the
    /// summed loss.
    fn accumulate_batch(&mut self, inputs: &[&[R]], labels: &[usize], grads: &mut [Vec<R>]) -> Result<R, NetError>;

    /// Linear outputs in inference mode.
    fn logits_batch(&self, inputs: &[&[R]]) -> Result<Vec<Vec<R>>, NetError>;

    fn param_groups(&mut self) -> Vec<ParamGroup<'_, R>>;

    /// Multiply-accumulates per sample in a forward pass.
    fn mac_count(&self) -> usize;

    /// Parameters that are structurally present (weights, biases and
    /// normalization parameters).
    fn nonzero_weight_count(&self) -> usize;

    /// Weights of the fully connected network with the same layers.
    fn dense_weight_count(&self) -> usize;
}

/// A feed-forward network of dense and path-sparse transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<R> {
    sizes: Vec<usize>,
    transitions: Vec<Transition<R>>,
    bias: Option<Vec<Vec<R>>>,
    loss: Loss,
    topology: Option<PathTopology>,
}

/// A network built from a path topology.
pub type SparsePathNetwork<R> = Network<R>;
/// A fully connected network.
pub type DenseNetwork<R> = Network<R>;

impl<R: Real> Network<R> {
    pub fn dense(sizes: &[usize], bias: bool, loss: Loss) -> Result<Self, NetError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::InvalidNetwork(format!("layer sizes {sizes:?}")));
        }
        let transitions = sizes.windows(2).map(|w| Transition::dense(w[0], w[1])).collect();
        Ok(Self::assemble(sizes.to_vec(), transitions, bias, loss, None))
    }

    /// Sparse transitions along the coalesced path edges; transitions not
    /// addressed by paths are fully connected.
    pub fn from_topology(t: &PathTopology, bias: bool, loss: Loss) -> Self {
        let sizes = t.layers().sizes().to_vec();
        let slots = coalesce_edges(t);
        let transitions = (1..sizes.len())
            .map(|l| match slots.transition(l) {
                Some(ts) => Transition {
                    n_in: sizes[l - 1],
                    n_out: sizes[l],
                    weights: vec![R::zero(); ts.edges.len()],
                    connections: Connections::Sparse {
                        from: ts.edges.iter().map(|e| e.from).collect(),
                        to: ts.edges.iter().map(|e| e.to).collect(),
                        multiplicity: ts.edges.iter().map(|e| e.multiplicity).collect(),
                        sign: ts.edges.iter().map(|e| t.sign(e.owner as usize)).collect(),
                    },
                },
                None => Transition::dense(sizes[l - 1], sizes[l]),
            })
            .collect();
        Self::assemble(sizes, transitions, bias, loss, Some(t.clone()))
    }

    /// Builds a network from explicit transitions, checking their shapes.
    pub fn from_parts(
        sizes: Vec<usize>,
        transitions: Vec<Transition<R>>,
        bias: Option<Vec<Vec<R>>>,
        loss: Loss,
        topology: Option<PathTopology>,
    ) -> Result<Self, NetError> {
        if sizes.len() < 2 || transitions.len() != sizes.len() - 1 {
            return Err(NetError::InvalidNetwork("transition count does not match layers".into()));
        }
        for (l, t) in transitions.iter().enumerate() {
            if t.n_in != sizes[l] || t.n_out != sizes[l + 1] {
                return Err(NetError::InvalidNetwork(format!("transition {} has shape {}x{}", l + 1, t.n_out, t.n_in)));
            }
            let ok = match &t.connections {
                Connections::Dense => t.weights.len() == t.n_in * t.n_out,
                Connections::Sparse { from, to, multiplicity, sign } => {
                    let n = t.weights.len();
                    from.len() == n
                        && to.len() == n
                        && multiplicity.len() == n
                        && sign.len() == n
                        && from.iter().all(|&i| (i as usize) < t.n_in)
                        && to.iter().all(|&j| (j as usize) < t.n_out)
                }
            };
            if !ok {
                return Err(NetError::InvalidNetwork(format!("transition {} has inconsistent slots", l + 1)));
            }
        }
        if let Some(b) = &bias {
            if b.len() != sizes.len() - 1 || b.iter().zip(&sizes[1..]).any(|(b, &n)| b.len() != n) {
                return Err(NetError::InvalidNetwork("bias shape".into()));
            }
        }
        Ok(Self { sizes, transitions, bias, loss, topology })
    }

    fn assemble(sizes: Vec<usize>, transitions: Vec<Transition<R>>, bias: bool, loss: Loss, topology: Option<PathTopology>) -> Self {
        let bias = bias.then(|| sizes[1..].iter().map(|&n| vec![R::zero(); n]).collect());
        Self { sizes, transitions, bias, loss, topology }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn transitions(&self) -> &[Transition<R>] {
        &self.transitions
    }

    pub fn transitions_mut(&mut self) -> &mut [Transition<R>] {
        &mut self.transitions
    }

    /// Transition into layer `l` (1-based).
    pub fn transition(&self, l: usize) -> &Transition<R> {
        &self.transitions[l - 1]
    }

    pub fn transition_mut(&mut self, l: usize) -> &mut Transition<R> {
        &mut self.transitions[l - 1]
    }

    pub fn bias(&self) -> Option<&[Vec<R>]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [Vec<R>]> {
        self.bias.as_deref_mut()
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn set_loss(&mut self, loss: Loss) {
        self.loss = loss;
    }

    pub fn topology(&self) -> Option<&PathTopology> {
        self.topology.as_ref()
    }

    pub fn is_sparse(&self) -> bool {
        self.transitions.iter().any(|t| t.is_sparse())
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    /// The fully connected network computing the same function.
    pub fn dense_equivalent(&self) -> Network<R> {
        let transitions = self
            .transitions
            .iter()
            .map(|t| Transition { n_in: t.n_in, n_out: t.n_out, connections: Connections::Dense, weights: t.to_dense_matrix() })
            .collect();
        Network { sizes: self.sizes.clone(), transitions, bias: self.bias.clone(), loss: self.loss, topology: None }
    }

    pub fn forward(&self, input: &[R]) -> Result<Forward<R>, NetError> {
        if input.len() != self.sizes[0] {
            return Err(NetError::InputSize { expected: self.sizes[0], got: input.len() });
        }
        let last = self.sizes.len() - 1;
        let mut z = Vec::with_capacity(self.sizes.len());
        let mut a = Vec::with_capacity(self.sizes.len());
        z.push(input.to_vec());
        a.push(input.to_vec());
        for l in 1..=last {
            let mut zl = match &self.bias {
                Some(b) => b[l - 1].clone(),
                None => vec![R::zero(); self.sizes[l]],
            };
            self.transitions[l - 1].forward(&a[l - 1], &mut zl);
            let al = if l == last { zl.clone() } else { zl.iter().map(|&v| v.max(R::zero())).collect() };
            z.push(zl);
            a.push(al);
        }
        Ok(Forward { z, a })
    }

    /// Output after the loss's output rule.
    pub fn predict(&self, input: &[R]) -> Result<Vec<R>, NetError> {
        Ok(self.loss.output(self.forward(input)?.logits()))
    }

    /// Adds the gradients of the loss against `target` to `grads` (laid out
    /// as [`Model::zero_grads`]) and returns the loss.
    pub fn backward(&self, fw: &Forward<R>, target: &[R], grads: &mut [Vec<R>]) -> Result<R, NetError> {
        let last = self.sizes.len() - 1;
        if fw.z.len() != self.sizes.len() || fw.z.iter().zip(&self.sizes).any(|(z, &n)| z.len() != n) {
            return Err(NetError::ForwardMismatch);
        }
        if target.len() != self.sizes[last] {
            return Err(NetError::TargetSize { expected: self.sizes[last], got: target.len() });
        }
        if grads.len() != self.group_count() {
            return Err(NetError::GradientShape);
        }
        let mut delta = vec![R::zero(); self.sizes[last]];
        let loss = self.loss.value_and_delta(&fw.z[last], target, &mut delta);
        let (wgrads, bgrads) = grads.split_at_mut(self.transitions.len());
        for l in (1..=last).rev() {
            let t = &self.transitions[l - 1];
            if wgrads[l - 1].len() != t.weights.len() {
                return Err(NetError::GradientShape);
            }
            if self.bias.is_some() {
                for (g, &d) in bgrads[l - 1].iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            if l > 1 {
                let mut back = vec![R::zero(); self.sizes[l - 1]];
                t.backward(&fw.a[l - 1], &delta, &mut wgrads[l - 1], Some(&mut back));
                for (b, &z) in back.iter_mut().zip(&fw.z[l - 1]) {
                    if z <= R::zero() {
                        *b = R::zero();
                    }
                }
                delta = back;
            } else {
                t.backward(&fw.a[0], &delta, &mut wgrads[0], None);
            }
        }
        Ok(loss)
    }

    fn group_count(&self) -> usize {
        self.transitions.len() * if self.bias.is_some() { 2 } else { 1 }
    }

    /// Loss of one example.
    pub fn loss_of(&self, input: &[R], target: &[R]) -> Result<R, NetError> {
        let fw = self.forward(input)?;
        let mut delta = vec![R::zero(); target.len()];
        Ok(self.loss.value_and_delta(fw.logits(), target, &mut delta))
    }
}

impl<R: Real> Model<R> for Network<R> {
    fn input_len(&self) -> usize {
        self.sizes[0]
    }

    fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn loss(&self) -> Loss {
        self.loss
    }

    fn zero_grads(&self) -> Vec<Vec<R>> {
        let mut g: Vec<Vec<R>> = self.transitions.iter().map(|t| vec![R::zero(); t.weights.len()]).collect();
        if let Some(b) = &self.bias {
            g.extend(b.iter().map(|b| vec![R::zero(); b.len()]));
        }
        g
    }

    fn accumulate_batch(&mut self, inputs: &[&[R]], labels: &[usize], grads: &mut [Vec<R>]) -> Result<R, NetError> {
        let classes = self.num_classes();
        let mut total = R::zero();
        for (x, &label) in inputs.iter().zip(labels) {
            if label >= classes {
                return Err(NetError::Label { label, classes });
            }
            let fw = self.forward(x)?;
            total += self.backward(&fw, &one_hot(label, classes), grads)?;
        }
        Ok(total)
    }

    fn logits_batch(&self, inputs: &[&[R]]) -> Result<Vec<Vec<R>>, NetError> {
        inputs.iter().map(|x| Ok(self.forward(x)?.z.pop().unwrap())).collect()
    }

    fn param_groups(&mut self) -> Vec<ParamGroup<'_, R>> {
        let mut groups: Vec<ParamGroup<'_, R>> = self
            .transitions
            .iter_mut()
            .map(|t| {
                let sign = match &t.connections {
                    Connections::Sparse { sign, .. } => Some(sign.as_slice()),
                    Connections::Dense => None,
                };
                ParamGroup { values: &mut t.weights, sign, sign_block: 1, decay: true }
            })
            .collect();
        if let Some(b) = &mut self.bias {
            groups.extend(b.iter_mut().map(|b| ParamGroup { values: b, sign: None, sign_block: 1, decay: false }));
        }
        groups
    }

    fn mac_count(&self) -> usize {
        self.transitions.iter().map(|t| t.mac_count()).sum()
    }

    fn nonzero_weight_count(&self) -> usize {
        self.mac_count()
    }

    fn dense_weight_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    UniformRandom { seed: u64 },
    ConstantPositive,
    /// Sign alternates with the parity of the source neuron: odd indices
    /// positive, even indices negative.
    ConstantAlternatingSign,
    ConstantRandomSign { seed: u64 },
    /// Sign of the path owning each slot; fully connected transitions stay
    /// positive.
    ConstantSignAlongPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WInit {
    /// `6 / sqrt(fan_in + fan_out)`.
    Wide,
    /// `sqrt(6 / (fan_in + fan_out))`.
    Glorot,
}

impl WInit {
    pub fn value(self, fan_in: usize, fan_out: usize) -> f64 {
        let f = (fan_in + fan_out) as f64;
        match self {
            WInit::Wide => 6.0 / f.sqrt(),
            WInit::Glorot => (6.0 / f).sqrt(),
        }
    }
}

/// Per weight, the `w_init` of its target neuron, whose fan-out is taken
/// from the next transition (zero for outputs).
fn init_magnitudes(transitions: &[(Vec<u32>, Vec<usize>, Option<Vec<usize>>)], winit: WInit) -> Vec<Vec<f64>> {
    transitions
        .iter()
        .map(|(targets, fan_in, fan_out)| {
            targets
                .iter()
                .map(|&j| {
                    let out = fan_out.as_ref().map_or(0, |f| f[j as usize]);
                    winit.value(fan_in[j as usize], out)
                })
                .collect()
        })
        .collect()
}

/// Initializes all weights by `mode`; biases are set to 0.
pub fn init_weights<R: Real>(net: &mut Network<R>, mode: InitMode, winit: WInit) {
    let n = net.transitions.len();
    let fans: Vec<(Vec<u32>, Vec<usize>, Option<Vec<usize>>)> = (0..n)
        .map(|l| {
            let t = &net.transitions[l];
            (t.targets(), t.fan_in(), (l + 1 < n).then(|| net.transitions[l + 1].fan_out()))
        })
        .collect();
    let magnitudes = init_magnitudes(&fans, winit);
    let mut rng = match mode {
        InitMode::UniformRandom { seed } | InitMode::ConstantRandomSign { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    for (t, mags) in net.transitions.iter_mut().zip(magnitudes) {
        let sources = t.sources();
        let path_sign = match &t.connections {
            Connections::Sparse { sign, .. } => Some(sign.clone()),
            Connections::Dense => None,
        };
        for (s, (w, m)) in t.weights.iter_mut().zip(mags).enumerate() {
            let v = match mode {
                InitMode::UniformRandom { .. } => rng.as_mut().unwrap().gen_range(-m..m),
                InitMode::ConstantPositive => m,
                InitMode::ConstantAlternatingSign => {
                    if sources[s] % 2 == 1 {
                        m
                    } else {
                        -m
                    }
                }
                InitMode::ConstantRandomSign { .. } => {
                    if rng.as_mut().unwrap().gen::<bool>() {
                        m
                    } else {
                        -m
                    }
                }
                InitMode::ConstantSignAlongPath => path_sign.as_ref().map_or(m, |sg| sg[s] as f64 * m),
            };
            *w = R::of(v);
        }
    }
    if let Some(b) = &mut net.bias {
        for b in b.iter_mut() {
            b.iter_mut().for_each(|v| *v = R::zero());
        }
    }
}

/// Sets the magnitude of every weight into a neuron with `v` incoming edges
/// to `v^(-1/p)`, keeping signs, so the neuron's weights have unit p-norm.
/// Returns `(layer, neuron)` of neurons without incoming edges.
pub fn normalize_init<R: Real>(net: &mut Network<R>, p: f64) -> Vec<(usize, usize)> {
    let mut isolated = Vec::new();
    for (l, t) in net.transitions.iter_mut().enumerate() {
        let fan_in = t.fan_in();
        isolated.extend(fan_in.iter().enumerate().filter(|(_, &v)| v == 0).map(|(j, _)| (l + 1, j)));
        let targets = t.targets();
        for (w, j) in t.weights.iter_mut().zip(targets) {
            let v = fan_in[j as usize] as f64;
            let sign = if *w < R::zero() { -1.0 } else { 1.0 };
            *w = R::of(sign * v.powf(-1.0 / p));
        }
    }
    isolated
}

/// Learning rate multiplied by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, milestones: Vec::new() }
    }

    /// Rate for 0-based `epoch`.
    pub fn rate(&self, epoch: usize) -> f64 {
        self.milestones.iter().filter(|(e, _)| *e <= epoch).fold(self.initial, |lr, (_, f)| lr * f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init: InitMode,
    pub winit: WInit,
    pub sign_frozen: bool,
    pub loss: Loss,
    pub deterministic: bool,
    /// Seed of the example order.
    pub shuffle_seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::constant(0.01),
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 32,
            init: InitMode::UniformRandom { seed: 1 },
            winit: WInit::Glorot,
            sign_frozen: false,
            loss: Loss::SoftmaxCrossEntropy,
            deterministic: true,
            shuffle_seed: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.schedule.initial > 0.0) {
            return Err(NetError::InvalidPlan(format!("learning rate {} must be positive", self.schedule.initial)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::InvalidPlan(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(NetError::InvalidPlan("negative weight decay".into()));
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidPlan("batch size must be at least 1".into()));
        }
        if self.schedule.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(NetError::InvalidPlan("milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Momentum SGD with weight decay and optional sign projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<R> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub sign_frozen: bool,
    velocity: Vec<Vec<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new<M: Model<R>>(model: &M, momentum: f64, weight_decay: f64, sign_frozen: bool) -> Self {
        Self { momentum, weight_decay, sign_frozen, velocity: model.zero_grads() }
    }

    pub fn from_plan<M: Model<R>>(model: &M, plan: &TrainPlan) -> Self {
        Self::new(model, plan.momentum, plan.weight_decay, plan.sign_frozen)
    }

    /// `v = mu v + g + wd w; w -= lr v`, then `w = s max(0, s w)` for
    /// signed groups when frozen.
    pub fn step(&mut self, groups: Vec<ParamGroup<'_, R>>, grads: &[Vec<R>], lr: f64) -> Result<(), NetError> {
        if groups.len() != grads.len() || groups.len() != self.velocity.len() {
            return Err(NetError::GradientShape);
        }
        let mu = R::of(self.momentum);
        let wd = R::of(self.weight_decay);
        let lr = R::of(lr);
        for ((group, g), v) in groups.into_iter().zip(grads).zip(&mut self.velocity) {
            if group.values.len() != g.len() || v.len() != g.len() {
                return Err(NetError::GradientShape);
            }
            for ((w, &g), v) in group.values.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = if group.decay { g + wd * *w } else { g };
                *v = mu * *v + g;
                *w -= lr * *v;
            }
            if self.sign_frozen {
                if let Some(sign) = group.sign {
                    for (block, &s) in group.values.chunks_mut(group.sign_block).zip(sign) {
                        let s = R::of(s as f64);
                        for w in block {
                            *w = s * (s * *w).max(R::zero());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One optimizer step on the mean gradient of a batch; returns the summed
/// loss.
pub fn train_batch<R: Real, M: Model<R>>(
    model: &mut M,
    opt: &mut Sgd<R>,
    inputs: &[&[R]],
    labels: &[usize],
    lr: f64,
) -> Result<R, NetError> {
    let mut grads = model.zero_grads();
    let loss = model.accumulate_batch(inputs, labels, &mut grads)?;
    if !loss.is_finite() {
        return Err(NetError::NonFinite);
    }
    let scale = R::one() / R::of(inputs.len() as f64);
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    opt.step(model.param_groups(), &grads, lr)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub count: usize,
}

/// Accuracy (argmax, lowest index on ties) and mean loss, in batches of
/// `batch` examples.
pub fn evaluate<'a, R: Real, M: Model<R>>(
    model: &M,
    examples: impl IntoIterator<Item = (&'a [R], usize)>,
    batch: usize,
) -> Result<EvalResult, NetError> {
    let classes = model.num_classes();
    let loss_kind = model.loss();
    let mut correct = 0usize;
    let mut count = 0usize;
    let mut loss = 0.0f64;
    let mut inputs: Vec<&[R]> = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    let mut flush = |inputs: &mut Vec<&[R]>, labels: &mut Vec<usize>| -> Result<(), NetError> {
        if inputs.is_empty() {
            return Ok(());
        }
        let logits = model.logits_batch(inputs)?;
        let mut delta = vec![R::zero(); classes];
        for (z, &label) in logits.iter().zip(labels.iter()) {
            if label >= classes {
                return Err(NetError::Label { label, classes });
            }
            if argmax(z) == label {
                correct += 1;
            }
            loss += loss_kind.value_and_delta(z, &one_hot(label, classes), &mut delta).f64();
            count += 1;
        }
        inputs.clear();
        labels.clear();
        Ok(())
    };
    for (x, y) in examples {
        inputs.push(x);
        labels.push(y);
        if inputs.len() == batch.max(1) {
            flush(&mut inputs, &mut labels)?;
        }
    }
    flush(&mut inputs, &mut labels)?;
    if count == 0 {
        return Err(NetError::EmptyDataset);
    }
    Ok(EvalResult { accuracy: correct as f64 / count as f64, mean_loss: loss / count as f64, count })
}
