//! CSV dumps of Sobol' points and permutation blocks, and their inverse.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use pathnet::qmc::{self, GeneratorMatrixSet, SobolInverse};

use crate::error::Failure;

#[derive(Debug, Clone, PartialEq)]
pub struct SobolOptions {
    pub dims: usize,
    /// Rows to print; `None` prints one block (or 16 points).
    pub count: Option<u64>,
    /// Print `floor(2^m x)` instead of the fraction.
    pub block_log2: Option<u32>,
    pub scramble_seed: u64,
    /// Direction numbers in the Joe-Kuo layout instead of the bundled set.
    pub matrix_file: Option<PathBuf>,
}

impl SobolOptions {
    pub fn matrices(&self) -> Result<GeneratorMatrixSet, Failure> {
        let base = match &self.matrix_file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                qmc::parse_direction_numbers(&text)?
            }
            None => GeneratorMatrixSet::joe_kuo().clone(),
        };
        if self.dims == 0 || self.dims > base.max_dimension() {
            return Err(Failure::Config(format!("--dims must lie in 1..={}", base.max_dimension())));
        }
        if let Some(m) = self.block_log2 {
            if m > 32 {
                return Err(Failure::Config("--block-log2 must be at most 32".into()));
            }
        }
        Ok(qmc::scramble(&base, self.scramble_seed))
    }

    fn header(&self) -> String {
        let mut h = String::from("index");
        for j in 0..self.dims {
            if self.block_log2.is_some() {
                h.push_str(&format!(",p{j}"));
            } else {
                h.push_str(&format!(",x{j}"));
            }
        }
        h
    }
}

/// Writes `index,x0,..` rows (fractions, printed exactly) or `index,p0,..`
/// rows (block values `floor(2^m x)`).
pub fn write_points(opts: &SobolOptions, out: &mut impl Write) -> Result<(), Failure> {
    let gm = opts.matrices()?;
    let count = opts.count.unwrap_or(match opts.block_log2 {
        Some(m) => 1u64 << m,
        None => 16,
    });
    if count > 1 << 32 {
        return Err(Failure::Config("--count exceeds the 2^32 points of a 32-bit sequence".into()));
    }
    writeln!(out, "{}", opts.header())?;
    let mut line = String::new();
    for i in 0..count {
        line.clear();
        line.push_str(&i.to_string());
        for m in &gm.matrices()[..opts.dims] {
            let x = m.apply(i as u32);
            match opts.block_log2 {
                Some(0) => line.push_str(",0"),
                Some(b) => line.push_str(&format!(",{}", x >> (32 - b))),
                None => line.push_str(&format!(",{}", qmc::to_unit(x))),
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads rows written by [`write_points`] and writes the index recovered
/// from each column, `index,i0,..`.
pub fn write_inverse(opts: &SobolOptions, input: impl BufRead, out: &mut impl Write) -> Result<(), Failure> {
    let gm = opts.matrices()?;
    let inverses = (0..opts.dims).map(|j| SobolInverse::new(&gm, j)).collect::<Result<Vec<_>, _>>()?;
    let mut blocks: HashMap<(usize, u64), Vec<u32>> = HashMap::new();
    let mut header = String::from("index");
    for j in 0..opts.dims {
        header.push_str(&format!(",i{j}"));
    }
    writeln!(out, "{header}")?;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != opts.dims + 1 {
            return Err(Failure::Data(format!("line {}: expected {} fields", n + 1, opts.dims + 1)));
        }
        let bad = |what: &str| Failure::Data(format!("line {}: bad {what}", n + 1));
        let index: u64 = fields[0].parse().map_err(|_| bad("index"))?;
        let mut row = index.to_string();
        for (j, field) in fields[1..].iter().enumerate() {
            let recovered = match opts.block_log2 {
                None => {
                    let x: f64 = field.parse().map_err(|_| bad("value"))?;
                    if !(0.0..1.0).contains(&x) {
                        return Err(bad("value"));
                    }
                    inverses[j].index_of((x * 4_294_967_296.0) as u32) as u64
                }
                Some(m) => {
                    let v: u32 = field.parse().map_err(|_| bad("value"))?;
                    let k = index >> m;
                    let block = match blocks.entry((j, k)) {
                        std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            let perm = qmc::permutation_block(j, k, m, &gm)?;
                            let mut inv = vec![u32::MAX; perm.len()];
                            for (r, &p) in perm.iter().enumerate() {
                                inv[p as usize] = r as u32;
                            }
                            e.insert(inv)
                        }
                    };
                    let r = *block.get(v as usize).ok_or_else(|| bad("value"))?;
                    (k << m) + r as u64
                }
            };
            row.push_str(&format!(",{recovered}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(dims: usize, count: Option<u64>, block: Option<u32>) -> SobolOptions {
        SobolOptions { dims, count, block_log2: block, scramble_seed: 0, matrix_file: None }
    }

    fn run(o: &SobolOptions) -> String {
        let mut out = Vec::new();
        write_points(o, &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn block_of_sixteen_is_the_bit_reversal_permutation() {
        let text = run(&opts(1, None, Some(4)));
        let values: Vec<u32> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(values, [0, 8, 4, 12, 2, 10, 6, 14, 1, 9, 5, 13, 3, 11, 7, 15]);
    }

    #[test]
    fn zero_count_writes_only_the_header() {
        assert_eq!(run(&opts(3, Some(0), None)), "index,x0,x1,x2\n");
    }

    #[test]
    fn inverse_recovers_indices() {
        for block in [None, Some(5)] {
            let mut o = opts(4, Some(200), block);
            o.scramble_seed = 9;
            let dump = run(&o);
            let mut out = Vec::new();
            write_inverse(&o, dump.as_bytes(), &mut out).unwrap();
            for (i, line) in String::from_utf8(out).unwrap().lines().skip(1).enumerate() {
                let f: Vec<u64> = line.split(',').map(|v| v.parse().unwrap()).collect();
                assert!(f.iter().all(|&v| v == i as u64), "{line}");
            }
        }
    }

    #[test]
    fn bad_dims_are_config_errors() {
        assert!(matches!(opts(0, None, None).matrices(), Err(Failure::Config(_))));
    }
}
