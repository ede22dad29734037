//! Radical inversion and the Sobol' sequence over F2.
//!
//! A generator matrix is stored as 32 column vectors. Column `k` multiplies
//! digit `k` of the index (least significant first); the resulting 32-bit
//! word is read as a binary fraction with the most significant bit worth
//! 1/2. In matrix terms, entry `(r, k)` is bit `31 - r` of column `k`, so the
//! identity generator matrix (dimension 0) acts as bit reversal.
//!
//! All values are exact: a component is the numerator `x` of `x / 2^32`.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of digits in indices, fractions and matrix columns.
pub const WORD_BITS: usize = 32;

const BUNDLED_DIRECTION_NUMBERS: &str = include_str!("../data/new-joe-kuo-6.4096");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QmcError {
    #[error("radical inverse base must be at least 2, got {0}")]
    InvalidBase(u32),
    #[error("dimension {dimension} out of range (matrix set has {available} dimensions)")]
    DimensionOutOfRange { dimension: usize, available: usize },
    #[error("malformed direction-number line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("direction number m_{k} = {value} on line {line} is not odd")]
    EvenDirectionNumber { line: usize, k: usize, value: u64 },
    #[error("dimension index {found} on line {line} does not follow {previous}")]
    NonMonotoneDimension { line: usize, previous: u64, found: u64 },
    #[error("matrix for dimension {0} is singular over F2")]
    SingularMatrix(usize),
    #[error("index {0} does not fit into {WORD_BITS} bits")]
    IndexOverflow(u64),
    #[error("block size 2^{0} exceeds {WORD_BITS} bits")]
    BlockTooLarge(u32),
}

/// Where a generator matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatrixSource {
    Identity,
    DirectionNumbers,
    Scrambled(u64),
}

/// A 32x32 matrix over F2 used to generate one Sobol' component.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GeneratorMatrix {
    dimension: usize,
    columns: [u32; WORD_BITS],
    source: MatrixSource,
}

impl GeneratorMatrix {
    /// The identity matrix, which turns the Sobol' construction into the
    /// van der Corput sequence.
    pub fn identity(dimension: usize) -> Self {
        let mut columns = [0u32; WORD_BITS];
        for (k, c) in columns.iter_mut().enumerate() {
            *c = 1 << (31 - k);
        }
        Self { dimension, columns, source: MatrixSource::Identity }
    }

    pub fn from_columns(dimension: usize, columns: [u32; WORD_BITS], source: MatrixSource) -> Self {
        Self { dimension, columns, source }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn columns(&self) -> &[u32; WORD_BITS] {
        &self.columns
    }

    pub fn source(&self) -> MatrixSource {
        self.source
    }

    /// Entry in row `r` (output digit, most significant first) and column
    /// `k` (input digit, least significant first).
    pub fn entry(&self, r: usize, k: usize) -> bool {
        (self.columns[k] >> (31 - r)) & 1 == 1
    }

    /// Multiplies the matrix with the digit vector of `i`.
    #[inline]
    pub fn apply(&self, mut i: u32) -> u32 {
        let mut x = 0u32;
        let mut k = 0;
        while i != 0 {
            if i & 1 == 1 {
                x ^= self.columns[k]; // parallel addition of column k
            }
            i >>= 1;
            k += 1;
        }
        x
    }

    /// Multiplies the matrix with a vector stored in output convention,
    /// i.e. entry `r` in bit `31 - r`.
    #[inline]
    fn apply_vector(&self, v: u32) -> u32 {
        self.apply(v.reverse_bits())
    }

    /// Matrix product `self * rhs` over F2.
    pub fn mul(&self, rhs: &GeneratorMatrix) -> GeneratorMatrix {
        let mut columns = [0u32; WORD_BITS];
        for (k, c) in columns.iter_mut().enumerate() {
            *c = self.apply_vector(rhs.columns[k]);
        }
        GeneratorMatrix { dimension: self.dimension, columns, source: self.source }
    }

    pub fn is_identity(&self) -> bool {
        self.columns.iter().enumerate().all(|(k, &c)| c == 1 << (31 - k))
    }

    fn rows(&self) -> [u32; WORD_BITS] {
        let mut rows = [0u32; WORD_BITS];
        for (k, &c) in self.columns.iter().enumerate() {
            for (r, row) in rows.iter_mut().enumerate() {
                if (c >> (31 - r)) & 1 == 1 {
                    *row |= 1 << k;
                }
            }
        }
        rows
    }

    fn from_rows(dimension: usize, rows: &[u32; WORD_BITS], source: MatrixSource) -> Self {
        let mut columns = [0u32; WORD_BITS];
        for (r, &row) in rows.iter().enumerate() {
            for (k, c) in columns.iter_mut().enumerate() {
                if (row >> k) & 1 == 1 {
                    *c |= 1 << (31 - r);
                }
            }
        }
        Self { dimension, columns, source }
    }
}

/// Inverts a generator matrix over F2 by Gauss-Jordan elimination.
pub fn invert_matrix(c: &GeneratorMatrix) -> Result<GeneratorMatrix, QmcError> {
    let mut rows = c.rows();
    let mut inv = [0u32; WORD_BITS];
    for (r, row) in inv.iter_mut().enumerate() {
        *row = 1 << r;
    }
    for col in 0..WORD_BITS {
        let pivot = (col..WORD_BITS)
            .find(|&r| (rows[r] >> col) & 1 == 1)
            .ok_or(QmcError::SingularMatrix(c.dimension))?;
        rows.swap(col, pivot);
        inv.swap(col, pivot);
        for r in 0..WORD_BITS {
            if r != col && (rows[r] >> col) & 1 == 1 {
                rows[r] ^= rows[col];
                inv[r] ^= inv[col];
            }
        }
    }
    Ok(GeneratorMatrix::from_rows(c.dimension, &inv, c.source))
}

/// Generator matrices for dimensions `0..s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorMatrixSet {
    matrices: Vec<GeneratorMatrix>,
}

impl GeneratorMatrixSet {
    /// A set holding only dimension 0.
    pub fn van_der_corput() -> Self {
        Self { matrices: vec![GeneratorMatrix::identity(0)] }
    }

    /// The Joe-Kuo `new-joe-kuo-6` direction numbers shipped with the
    /// crate, 4096 dimensions.
    pub fn joe_kuo() -> &'static GeneratorMatrixSet {
        static SET: OnceLock<GeneratorMatrixSet> = OnceLock::new();
        SET.get_or_init(|| {
            parse_direction_numbers(BUNDLED_DIRECTION_NUMBERS)
                .expect("bundled direction numbers are well formed")
        })
    }

    /// The first `dims` dimensions of the bundled set.
    pub fn joe_kuo_dims(dims: usize) -> Result<GeneratorMatrixSet, QmcError> {
        let all = Self::joe_kuo();
        if dims > all.max_dimension() {
            return Err(QmcError::DimensionOutOfRange { dimension: dims - 1, available: all.max_dimension() });
        }
        Ok(GeneratorMatrixSet { matrices: all.matrices[..dims].to_vec() })
    }

    pub fn max_dimension(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[GeneratorMatrix] {
        &self.matrices
    }

    pub fn matrix(&self, j: usize) -> Result<&GeneratorMatrix, QmcError> {
        self.matrices
            .get(j)
            .ok_or(QmcError::DimensionOutOfRange { dimension: j, available: self.matrices.len() })
    }

    /// Component `j` of point `i` as the numerator of `x / 2^32`.
    #[inline]
    pub fn component(&self, i: u32, j: usize) -> Result<u32, QmcError> {
        Ok(self.matrix(j)?.apply(i))
    }

    pub fn point(&self, i: u32, dims: &[usize]) -> Result<SequencePoint, QmcError> {
        let components = dims.iter().map(|&j| self.component(i, j)).collect::<Result<_, _>>()?;
        Ok(SequencePoint { index: i as u64, components })
    }
}

/// One point of the sequence restricted to a list of dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePoint {
    pub index: u64,
    /// Numerators `k` of the fractions `k / 2^32`.
    pub components: Vec<u32>,
}

impl SequencePoint {
    pub fn fraction(&self, c: usize) -> f64 {
        to_unit(self.components[c])
    }
}

/// Converts a 32-bit numerator to the fraction it represents.
#[inline]
pub fn to_unit(x: u32) -> f64 {
    x as f64 * (1.0 / 4_294_967_296.0)
}

/// `floor(n * x / 2^32)`: the neuron a fraction selects among `n` units.
#[inline]
pub fn scale_to(x: u32, n: usize) -> usize {
    ((x as u64 * n as u64) >> 32) as usize
}

/// Radical inverse of `i` in base `b` as an exact fraction `(num, den)`.
pub fn radical_inverse_exact(mut i: u64, b: u32) -> Result<(u128, u128), QmcError> {
    if b < 2 {
        return Err(QmcError::InvalidBase(b));
    }
    let b = b as u128;
    let mut num = 0u128;
    let mut den = 1u128;
    while i != 0 {
        let digit = i as u128 % b;
        i /= b as u64;
        num = num * b + digit;
        den *= b;
    }
    Ok((num, den))
}

/// The van der Corput radical inverse `Phi_b(i)`.
pub fn radical_inverse(i: u64, b: u32) -> Result<f64, QmcError> {
    let (num, den) = radical_inverse_exact(i, b)?;
    Ok(num as f64 / den as f64)
}

/// Component `j` of the `i`-th Sobol' point, as a fraction.
pub fn sobol_component(i: u32, j: usize, gm: &GeneratorMatrixSet) -> Result<f64, QmcError> {
    gm.component(i, j).map(to_unit)
}

/// Maps Sobol' values of one dimension back to their indices.
#[derive(Debug, Clone)]
pub struct SobolInverse {
    inverse: GeneratorMatrix,
}

impl SobolInverse {
    pub fn new(gm: &GeneratorMatrixSet, j: usize) -> Result<Self, QmcError> {
        Ok(Self { inverse: invert_matrix(gm.matrix(j)?)? })
    }

    /// The index `i` whose component equals the numerator `x`.
    #[inline]
    pub fn index_of(&self, x: u32) -> u32 {
        self.inverse.apply_vector(x).reverse_bits()
    }
}

/// Index whose component `j` equals the numerator `x`.
pub fn sobol_inverse(x: u32, j: usize, gm: &GeneratorMatrixSet) -> Result<u32, QmcError> {
    Ok(SobolInverse::new(gm, j)?.index_of(x))
}

/// `floor(2^m x_i)` for the `k`-th contiguous block of `2^m` indices.
pub fn permutation_block(j: usize, k: u64, m: u32, gm: &GeneratorMatrixSet) -> Result<Vec<u32>, QmcError> {
    if m as usize > WORD_BITS {
        return Err(QmcError::BlockTooLarge(m));
    }
    let matrix = gm.matrix(j)?;
    let len = 1u64 << m;
    let start = k.checked_mul(len).ok_or(QmcError::IndexOverflow(u64::MAX))?;
    let last = start + (len - 1);
    if last > u32::MAX as u64 {
        return Err(QmcError::IndexOverflow(last));
    }
    Ok((start..=last)
        .map(|i| {
            let x = matrix.apply(i as u32);
            if m == 0 {
                0
            } else {
                x >> (32 - m)
            }
        })
        .collect())
}

/// Parses direction numbers in the Joe-Kuo layout: a header line, then one
/// line `d s a m_1 .. m_s` per dimension, starting with `d = 2`.
pub fn parse_direction_numbers(text: &str) -> Result<GeneratorMatrixSet, QmcError> {
    let mut matrices = vec![GeneratorMatrix::identity(0)];
    let mut previous = 1u64;
    for (n, line) in text.lines().enumerate().skip(1) {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let malformed = |reason: &str| QmcError::MalformedLine { line: line_no, reason: reason.to_string() };
        let values = fields
            .iter()
            .map(|f| f.parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(&e.to_string()))?;
        if values.len() < 4 {
            return Err(malformed("expected `d s a m_1 .. m_s`"));
        }
        let (d, s, a) = (values[0], values[1], values[2]);
        if d != previous + 1 {
            return Err(QmcError::NonMonotoneDimension { line: line_no, previous, found: d });
        }
        if s == 0 || s as usize >= WORD_BITS {
            return Err(malformed("polynomial degree out of range"));
        }
        let s = s as usize;
        if values.len() != 3 + s {
            return Err(malformed(&format!("expected {s} direction numbers, found {}", values.len() - 3)));
        }
        if a >= 1 << (s - 1) {
            return Err(malformed("polynomial coefficient does not fit the degree"));
        }
        let initial = &values[3..];
        for (k, &m) in initial.iter().enumerate() {
            if m % 2 == 0 {
                return Err(QmcError::EvenDirectionNumber { line: line_no, k: k + 1, value: m });
            }
            if m >= 1 << (k + 1) {
                return Err(malformed(&format!("m_{} = {m} is not below 2^{}", k + 1, k + 1)));
            }
        }
        let m = extend_direction_numbers(s, a, initial);
        let mut columns = [0u32; WORD_BITS];
        for (k, c) in columns.iter_mut().enumerate() {
            *c = (m[k] << (WORD_BITS - 1 - k)) as u32;
        }
        matrices.push(GeneratorMatrix::from_columns(matrices.len(), columns, MatrixSource::DirectionNumbers));
        previous = d;
    }
    Ok(GeneratorMatrixSet { matrices })
}

/// Extends `m_1 .. m_s` to 32 direction numbers with the recurrence of the
/// primitive polynomial of degree `s` and inner coefficients `a`.
fn extend_direction_numbers(s: usize, a: u64, initial: &[u64]) -> [u64; WORD_BITS] {
    let mut m = [0u64; WORD_BITS];
    m[..s].copy_from_slice(initial);
    for k in s..WORD_BITS {
        let mut v = m[k - s] ^ (m[k - s] << s);
        for t in 1..s {
            if (a >> (s - 1 - t)) & 1 == 1 {
                v ^= m[k - t] << t;
            }
        }
        m[k] = v;
    }
    m
}

/// Linear matrix scrambling: every dimension `j >= 1` is left-multiplied by
/// a seeded random lower triangular matrix with unit diagonal. Seed 0 leaves
/// the set unchanged.
pub fn scramble(gm: &GeneratorMatrixSet, seed: u64) -> GeneratorMatrixSet {
    if seed == 0 {
        return gm.clone();
    }
    let matrices = gm
        .matrices
        .iter()
        .map(|c| {
            if c.dimension == 0 {
                return c.clone();
            }
            let lower = random_lower_triangular(seed, c.dimension);
            let mut scrambled = lower.mul(c);
            scrambled.dimension = c.dimension;
            scrambled.source = MatrixSource::Scrambled(seed);
            scrambled
        })
        .collect();
    GeneratorMatrixSet { matrices }
}

fn random_lower_triangular(seed: u64, dimension: usize) -> GeneratorMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(dimension as u64);
    let mut columns = [0u32; WORD_BITS];
    for (c, col) in columns.iter_mut().enumerate() {
        let diagonal = 1u32 << (31 - c);
        *col = diagonal | (rng.gen::<u32>() & (diagonal - 1));
    }
    GeneratorMatrix::from_columns(dimension, columns, MatrixSource::Scrambled(seed))
}
