//! Versioned binary containers for topologies and trained models.
//!
//! All integers and floats are little-endian. A topology container holds
//! the layer sizes, path count, generation record, the sign bit vector (set
//! bit = negative path) and, optionally, the index table as `u32` rows. A
//! quasi-random topology saved without the table is regenerated on load.
//!
//! A model container embeds its topology container, if any, followed by the
//! weights as `f32` in slot order. Convolution slices are written in
//! (transition, slot, row, column) order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::conv::{BatchNorm, Conv2d, ConvLayerSpec, ConvNet, Layer, Shape};
use crate::net::{Connections, Loss, NetError, Network, Transition};
use crate::qmc::GeneratorMatrixSet;
use crate::real::Real;
use crate::topology::{
    generate_quasi_paths, BoundaryMode, Generation, LayerSpec, PathTopology, SignPolicy, TopologyError,
};

pub const TOPOLOGY_MAGIC: &[u8; 4] = b"PNTP";
pub const MODEL_MAGIC: &[u8; 4] = b"PNMD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a {expected} container")]
    BadMagic { expected: &'static str },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid container: {0}")]
    Invalid(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("container lengths fit in 32 bits"));
    }

    fn u32s(&mut self, v: &[u32]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }

    fn reals<R: Real>(&mut self, v: &[R]) {
        self.len(v.len());
        for &x in v {
            self.buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, ContainerError> {
        Ok(self.u32()? as usize)
    }

    fn u32s(&mut self) -> Result<Vec<u32>, ContainerError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(4).ok_or(ContainerError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn reals<R: Real>(&mut self) -> Result<Vec<R>, ContainerError> {
        let n = self.len()?;
        let raw = self.take(n.checked_mul(4).ok_or(ContainerError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(4).map(|c| R::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect())
    }

    fn bytes(&mut self) -> Result<&'a [u8], ContainerError> {
        let n = usize::try_from(self.u64()?).map_err(|_| ContainerError::Truncated(self.pos))?;
        self.take(n)
    }

    fn header(&mut self, magic: &[u8; 4], name: &'static str) -> Result<(), ContainerError> {
        if self.take(4).map_err(|_| ContainerError::BadMagic { expected: name })? != magic {
            return Err(ContainerError::BadMagic { expected: name });
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(ContainerError::Version(v)),
        }
    }

    fn finish(&self) -> Result<(), ContainerError> {
        if self.pos != self.buf.len() {
            return Err(ContainerError::Invalid(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn mode_byte(m: BoundaryMode) -> u8 {
    match m {
        BoundaryMode::Paths => 0,
        BoundaryMode::FullyConnected => 1,
    }
}

fn byte_mode(b: u8) -> Result<BoundaryMode, ContainerError> {
    match b {
        0 => Ok(BoundaryMode::Paths),
        1 => Ok(BoundaryMode::FullyConnected),
        _ => Err(ContainerError::Invalid(format!("boundary mode {b}"))),
    }
}

fn to_u32s(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&x| x as u32).collect()
}

fn to_usizes(v: Vec<u32>) -> Vec<usize> {
    v.into_iter().map(|x| x as usize).collect()
}

/// Serializes a topology; `with_table = false` stores only the generation
/// record and is accepted for quasi-random topologies only.
pub fn write_topology(t: &PathTopology, with_table: bool) -> Result<Vec<u8>, ContainerError> {
    let quasi = matches!(t.generation(), Generation::Quasi { .. });
    if !with_table && !quasi {
        return Err(ContainerError::Invalid("only quasi-random topologies can omit the index table".into()));
    }
    let mut w = Writer::default();
    w.buf.extend_from_slice(TOPOLOGY_MAGIC);
    w.u32(VERSION);
    w.u32s(&to_u32s(t.layers().sizes()));
    w.u8(mode_byte(t.layers().input_mode()));
    w.u8(mode_byte(t.layers().output_mode()));
    w.u64(t.num_paths() as u64);
    match t.generation() {
        Generation::Pseudo { seed } => {
            w.u8(0);
            w.u64(*seed);
        }
        Generation::Quasi { dims, scramble_seed, skipped } => {
            w.u8(1);
            w.u64(*scramble_seed);
            w.u32s(&to_u32s(dims));
            w.u32s(&to_u32s(skipped));
        }
        Generation::Explicit => w.u8(2),
    }
    match t.sign_policy() {
        SignPolicy::AllPositive => w.u8(0),
        SignPolicy::EvenOdd => w.u8(1),
        SignPolicy::Ratio(r) => {
            w.u8(2);
            w.f64(r);
        }
        SignPolicy::SobolDimension(j) => {
            w.u8(3);
            w.u32(j as u32);
        }
    }
    let mut bits = vec![0u8; t.num_paths().div_ceil(8)];
    for (p, &s) in t.signs().iter().enumerate() {
        if s < 0 {
            bits[p / 8] |= 1 << (p % 8);
        }
    }
    w.buf.extend_from_slice(&bits);
    w.u8(with_table as u8);
    if with_table {
        for row in t.table() {
            row.iter().for_each(|&v| w.u32(v));
        }
    }
    Ok(w.buf)
}

/// Parses a topology container. Tables omitted at write time are
/// recomputed from `gm`, or the bundled matrices when `gm` is `None`.
pub fn read_topology(bytes: &[u8], gm: Option<&GeneratorMatrixSet>) -> Result<PathTopology, ContainerError> {
    let mut r = Reader::new(bytes);
    r.header(TOPOLOGY_MAGIC, "topology")?;
    let t = read_topology_body(&mut r, gm)?;
    r.finish()?;
    Ok(t)
}

fn read_topology_body(r: &mut Reader<'_>, gm: Option<&GeneratorMatrixSet>) -> Result<PathTopology, ContainerError> {
    let sizes = to_usizes(r.u32s()?);
    let input = byte_mode(r.u8()?)?;
    let output = byte_mode(r.u8()?)?;
    let layers = LayerSpec::new(sizes, input, output)?;
    let num_paths = usize::try_from(r.u64()?).map_err(|_| ContainerError::Invalid("path count".into()))?;
    let generation = match r.u8()? {
        0 => Generation::Pseudo { seed: r.u64()? },
        1 => {
            let scramble_seed = r.u64()?;
            let dims = to_usizes(r.u32s()?);
            let skipped = to_usizes(r.u32s()?);
            Generation::Quasi { dims, scramble_seed, skipped }
        }
        2 => Generation::Explicit,
        b => return Err(ContainerError::Invalid(format!("generation mode {b}"))),
    };
    let policy = match r.u8()? {
        0 => SignPolicy::AllPositive,
        1 => SignPolicy::EvenOdd,
        2 => SignPolicy::Ratio(r.f64()?),
        3 => SignPolicy::SobolDimension(r.u32()? as usize),
        b => return Err(ContainerError::Invalid(format!("sign policy {b}"))),
    };
    let bits = r.take(num_paths.div_ceil(8))?;
    let signs: Vec<i8> = (0..num_paths).map(|p| if bits[p / 8] >> (p % 8) & 1 == 1 { -1 } else { 1 }).collect();
    let with_table = r.u8()? == 1;
    let mut t = if with_table {
        let index = (0..layers.num_path_layers())
            .map(|_| {
                let raw = r.take(num_paths.checked_mul(4).ok_or(ContainerError::Truncated(r.pos))?)?;
                Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
            })
            .collect::<Result<Vec<Vec<u32>>, ContainerError>>()?;
        PathTopology::from_indices(layers, index, generation)?
    } else {
        let Generation::Quasi { dims, scramble_seed, .. } = &generation else {
            return Err(ContainerError::Invalid("index table missing".into()));
        };
        let gm = gm.unwrap_or_else(|| GeneratorMatrixSet::joe_kuo());
        let mut t = generate_quasi_paths(layers, num_paths, gm, dims, *scramble_seed)?;
        t.set_generation(generation.clone());
        t
    };
    t.set_signs(signs, policy);
    Ok(t)
}

pub fn save_topology(path: &Path, t: &PathTopology, with_table: bool) -> Result<(), ContainerError> {
    write_file(path, &write_topology(t, with_table)?)
}

pub fn load_topology(path: &Path, gm: Option<&GeneratorMatrixSet>) -> Result<PathTopology, ContainerError> {
    read_topology(&read(path)?, gm)
}

fn read(path: &Path) -> Result<Vec<u8>, ContainerError> {
    fs::read(path).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    fs::write(path, bytes).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
}

/// A model of either kind, as stored in a model container.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel<R> {
    Mlp(Network<R>),
    Conv(ConvNet<R>),
}

fn loss_byte(l: Loss) -> u8 {
    match l {
        Loss::SquaredError => 0,
        Loss::SoftmaxCrossEntropy => 1,
    }
}

fn byte_loss(b: u8) -> Result<Loss, ContainerError> {
    match b {
        0 => Ok(Loss::SquaredError),
        1 => Ok(Loss::SoftmaxCrossEntropy),
        _ => Err(ContainerError::Invalid(format!("loss {b}"))),
    }
}

fn write_optional_topology(w: &mut Writer, t: Option<&PathTopology>) -> Result<(), ContainerError> {
    match t {
        Some(t) => {
            w.u8(1);
            w.bytes(&write_topology(t, true)?);
        }
        None => w.u8(0),
    }
    Ok(())
}

fn read_optional_topology(r: &mut Reader<'_>) -> Result<Option<PathTopology>, ContainerError> {
    Ok(match r.u8()? {
        0 => None,
        _ => Some(read_topology(r.bytes()?, None)?),
    })
}

fn write_signs(w: &mut Writer, sign: &[i8]) {
    w.len(sign.len());
    w.buf.extend(sign.iter().map(|&s| s as u8));
}

fn read_signs(r: &mut Reader<'_>) -> Result<Vec<i8>, ContainerError> {
    let n = r.len()?;
    Ok(r.take(n)?.iter().map(|&b| b as i8).collect())
}

pub fn write_model<R: Real>(model: &SavedModel<R>) -> Result<Vec<u8>, ContainerError> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(VERSION);
    match model {
        SavedModel::Mlp(net) => {
            w.u8(0);
            w.u8(loss_byte(net.loss_kind()));
            w.u32s(&to_u32s(net.sizes()));
            write_optional_topology(&mut w, net.topology())?;
            for t in net.transitions() {
                match &t.connections {
                    Connections::Dense => w.u8(0),
                    Connections::Sparse { from, to, multiplicity, sign } => {
                        w.u8(1);
                        w.u32s(from);
                        w.u32s(to);
                        w.u32s(multiplicity);
                        write_signs(&mut w, sign);
                    }
                }
                w.reals(&t.weights);
            }
            match net.bias() {
                Some(b) => {
                    w.u8(1);
                    b.iter().for_each(|b| w.reals(b));
                }
                None => w.u8(0),
            }
        }
        SavedModel::Conv(net) => {
            w.u8(1);
            let s = net.input_shape();
            w.u32s(&[s.c as u32, s.h as u32, s.w as u32]);
            w.u8(loss_byte(crate::net::Model::loss(net)));
            write_optional_topology(&mut w, net.topology())?;
            w.len(net.layers().len());
            for layer in net.layers() {
                match layer {
                    Layer::Conv(c) => {
                        w.u8(0);
                        let sp = c.spec;
                        w.u32s(&to_u32s(&[sp.c_in, sp.c_out, sp.kh, sp.kw, sp.stride, sp.pad]));
                        w.u8(c.dense as u8);
                        w.u32s(&c.from);
                        w.u32s(&c.to);
                        w.u32s(&c.multiplicity);
                        match &c.sign {
                            Some(s) => {
                                w.u8(1);
                                write_signs(&mut w, s);
                            }
                            None => w.u8(0),
                        }
                        w.reals(&c.weights);
                        match &c.bias {
                            Some(b) => {
                                w.u8(1);
                                w.reals(b);
                            }
                            None => w.u8(0),
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        w.u8(1);
                        w.f64(bn.eps);
                        w.f64(bn.momentum);
                        w.reals(&bn.scale);
                        w.reals(&bn.shift);
                        w.reals(&bn.running_mean);
                        w.reals(&bn.running_var);
                    }
                    Layer::Relu => w.u8(2),
                    Layer::MaxPool(k) => {
                        w.u8(3);
                        w.len(*k);
                    }
                    Layer::GlobalAvgPool => w.u8(4),
                }
            }
        }
    }
    Ok(w.buf)
}

pub fn read_model<R: Real>(bytes: &[u8]) -> Result<SavedModel<R>, ContainerError> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC, "model")?;
    let model = match r.u8()? {
        0 => {
            let loss = byte_loss(r.u8()?)?;
            let sizes = to_usizes(r.u32s()?);
            if sizes.len() < 2 {
                return Err(ContainerError::Invalid("fewer than two layers".into()));
            }
            let topology = read_optional_topology(&mut r)?;
            let mut transitions = Vec::with_capacity(sizes.len() - 1);
            for l in 1..sizes.len() {
                let connections = match r.u8()? {
                    0 => Connections::Dense,
                    1 => Connections::Sparse { from: r.u32s()?, to: r.u32s()?, multiplicity: r.u32s()?, sign: read_signs(&mut r)? },
                    b => return Err(ContainerError::Invalid(format!("transition kind {b}"))),
                };
                transitions.push(Transition { n_in: sizes[l - 1], n_out: sizes[l], connections, weights: r.reals()? });
            }
            let bias = match r.u8()? {
                0 => None,
                _ => Some((1..sizes.len()).map(|_| r.reals()).collect::<Result<Vec<_>, _>>()?),
            };
            SavedModel::Mlp(Network::from_parts(sizes, transitions, bias, loss, topology)?)
        }
        1 => {
            let s = r.u32s()?;
            if s.len() != 3 {
                return Err(ContainerError::Invalid("input shape".into()));
            }
            let input = Shape::new(s[0] as usize, s[1] as usize, s[2] as usize);
            let loss = byte_loss(r.u8()?)?;
            let topology = read_optional_topology(&mut r)?;
            let n = r.len()?;
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                layers.push(match r.u8()? {
                    0 => {
                        let sp = to_usizes(r.u32s()?);
                        if sp.len() != 6 {
                            return Err(ContainerError::Invalid("convolution spec".into()));
                        }
                        let spec = ConvLayerSpec { c_in: sp[0], c_out: sp[1], kh: sp[2], kw: sp[3], stride: sp[4], pad: sp[5] };
                        let dense = r.u8()? == 1;
                        let (from, to, multiplicity) = (r.u32s()?, r.u32s()?, r.u32s()?);
                        let sign = if r.u8()? == 1 { Some(read_signs(&mut r)?) } else { None };
                        let weights = r.reals()?;
                        let bias = if r.u8()? == 1 { Some(r.reals()?) } else { None };
                        let slots = from.len();
                        let consistent = to.len() == slots
                            && multiplicity.len() == slots
                            && sign.as_ref().map_or(true, |s| s.len() == slots)
                            && weights.len() == slots * spec.slice_len()
                            && bias.as_ref().map_or(true, |b| b.len() == spec.c_out)
                            && from.iter().all(|&i| (i as usize) < spec.c_in)
                            && to.iter().all(|&o| (o as usize) < spec.c_out);
                        if !consistent {
                            return Err(ContainerError::Invalid("convolution slots".into()));
                        }
                        Layer::Conv(Conv2d { spec, dense, from, to, multiplicity, sign, weights, bias })
                    }
                    1 => {
                        let eps = r.f64()?;
                        let momentum = r.f64()?;
                        let bn = BatchNorm { scale: r.reals()?, shift: r.reals()?, running_mean: r.reals()?, running_var: r.reals()?, eps, momentum };
                        let c = bn.scale.len();
                        if bn.shift.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
                            return Err(ContainerError::Invalid("batch norm parameters".into()));
                        }
                        Layer::BatchNorm(bn)
                    }
                    2 => Layer::Relu,
                    3 => Layer::MaxPool(r.len()?),
                    4 => Layer::GlobalAvgPool,
                    b => return Err(ContainerError::Invalid(format!("layer kind {b}"))),
                });
            }
            SavedModel::Conv(ConvNet::new(input, layers, loss, topology)?)
        }
        b => return Err(ContainerError::Invalid(format!("model kind {b}"))),
    };
    r.finish()?;
    Ok(model)
}

pub fn save_model<R: Real>(path: &Path, model: &SavedModel<R>) -> Result<(), ContainerError> {
    write_file(path, &write_model(model)?)
}

pub fn load_model<R: Real>(path: &Path) -> Result<SavedModel<R>, ContainerError> {
    read_model(&read(path)?)
}
