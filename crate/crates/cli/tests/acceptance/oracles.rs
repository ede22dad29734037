//! Reference computations written independently of the library: Sobol'
//! direction integers from the raw table, F2 products on column words, a
//! zero-filled dense MLP and a direct convolution.

use pathnet::net::Loss;

/// Direction integers `V_1..V_32` of every dimension, built with the
/// Joe-Kuo recurrence from the raw `d s a m_1 .. m_s` table.
pub fn direction_integers(table: &str, dims: usize) -> Vec<[u32; 32]> {
    let mut out = Vec::with_capacity(dims);
    let mut first = [0u32; 32];
    for (k, v) in first.iter_mut().enumerate() {
        *v = 1 << (31 - k);
    }
    out.push(first);
    for line in table.lines().skip(1) {
        if out.len() == dims {
            break;
        }
        let f: Vec<u64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        if f.is_empty() {
            continue;
        }
        let (s, a) = (f[1] as usize, f[2]);
        let m = &f[3..3 + s];
        let mut v = [0u32; 32];
        for k in 0..32 {
            if k < s {
                v[k] = (m[k] as u32) << (31 - k);
            } else {
                let mut x = v[k - s] ^ (v[k - s] >> s);
                for r in 1..s {
                    if (a >> (s - 1 - r)) & 1 == 1 {
                        x ^= v[k - r];
                    }
                }
                v[k] = x;
            }
        }
        out.push(v);
    }
    assert_eq!(out.len(), dims, "table has fewer dimensions than requested");
    out
}

/// Numerator of component `i` from direction integers (no Gray code).
pub fn sobol_point(v: &[u32; 32], i: u32) -> u32 {
    (0..32).filter(|b| i >> b & 1 == 1).fold(0, |x, b| x ^ v[b])
}

/// `A x` for a column-word matrix, with vector component `r` stored in bit
/// `31 - r`.
pub fn f2_apply(a: &[u32; 32], x: u32) -> u32 {
    (0..32).filter(|r| x >> (31 - r) & 1 == 1).fold(0, |acc, r| acc ^ a[r])
}

pub fn f2_mul(a: &[u32; 32], b: &[u32; 32]) -> [u32; 32] {
    let mut c = [0u32; 32];
    for k in 0..32 {
        c[k] = f2_apply(a, b[k]);
    }
    c
}

pub fn f2_is_identity(a: &[u32; 32]) -> bool {
    (0..32).all(|k| a[k] == 1 << (31 - k))
}

/// Result of one dense forward and backward pass.
pub struct DensePass {
    pub loss: f64,
    pub logits: Vec<f64>,
    /// `gw[l][j * n_in + i]`
    pub gw: Vec<Vec<f64>>,
    pub gb: Vec<Vec<f64>>,
}

/// Fully connected ReLU network with zero-filled `w[l][j * n_in + i]`.
pub struct DenseMlp {
    pub sizes: Vec<usize>,
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl DenseMlp {
    pub fn pass(&self, x: &[f64], target: &[f64], loss: Loss) -> DensePass {
        let last = self.sizes.len() - 1;
        let mut a = vec![x.to_vec()];
        let mut z = vec![x.to_vec()];
        for l in 1..=last {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let mut zl = vec![0.0; n_out];
            for j in 0..n_out {
                let mut s = self.b[l - 1][j];
                for i in 0..n_in {
                    s += self.w[l - 1][j * n_in + i] * a[l - 1][i];
                }
                zl[j] = s;
            }
            let al = if l == last { zl.clone() } else { zl.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() };
            z.push(zl);
            a.push(al);
        }
        let out = &z[last];
        let (value, mut delta) = match loss {
            Loss::SquaredError => {
                let d: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
                (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
            }
            Loss::SoftmaxCrossEntropy => {
                let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = out.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / s).collect();
                let value = -target.iter().zip(&p).map(|(t, p)| t * p.ln()).sum::<f64>();
                (value, p.iter().zip(target).map(|(p, t)| p - t).collect())
            }
        };
        let mut gw = vec![Vec::new(); last];
        let mut gb = vec![Vec::new(); last];
        for l in (1..=last).rev() {
            let (n_in, n_out) = (self.sizes[l - 1], self.sizes[l]);
            let mut g = vec![0.0; n_in * n_out];
            for j in 0..n_out {
                for i in 0..n_in {
                    g[j * n_in + i] = delta[j] * a[l - 1][i];
                }
            }
            gw[l - 1] = g;
            gb[l - 1] = delta.clone();
            if l > 1 {
                let mut back = vec![0.0; n_in];
                for i in 0..n_in {
                    let mut s = 0.0;
                    for j in 0..n_out {
                        s += self.w[l - 1][j * n_in + i] * delta[j];
                    }
                    back[i] = if z[l - 1][i] > 0.0 { s } else { 0.0 };
                }
                delta = back;
            }
        }
        DensePass { loss: value, logits: out.clone(), gw, gb }
    }
}

/// Geometry of a direct convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn input_at(&self, b: usize, i: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            return None;
        }
        Some(((b * self.c_in + i) * self.h + iy as usize) * self.w + ix as usize)
    }

    /// `y = bias + K * x` with kernel `K[o][i][ky][kx]`.
    pub fn forward(&self, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let mut y = vec![0.0; self.n * self.c_out * oh * ow];
        for b in 0..self.n {
            for o in 0..self.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias.map_or(0.0, |v| v[o]);
                        for i in 0..self.c_in {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    if let Some(xi) = self.input_at(b, i, oy, ox, ky, kx) {
                                        s += kernel[((o * self.c_in + i) * self.k + ky) * self.k + kx] * x[xi];
                                    }
                                }
                            }
                        }
                        y[((b * self.c_out + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    /// Kernel, bias and input gradients for output gradient `dy`.
    pub fn backward(&self, x: &[f64], kernel: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (oh, ow) = self.out_hw();
        let mut gk = vec![0.0; kernel.len()];
        let mut gb = vec![0.0; self.c_out];
        let mut dx = vec![0.0; x.len()];
        for b in 0..self.n {
            for o in 0..self.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = dy[((b * self.c_out + o) * oh + oy) * ow + ox];
                        gb[o] += d;
                        for i in 0..self.c_in {
                            for ky in 0..self.k {
                                for kx in 0..self.k {
                                    if let Some(xi) = self.input_at(b, i, oy, ox, ky, kx) {
                                        let ki = ((o * self.c_in + i) * self.k + ky) * self.k + kx;
                                        gk[ki] += d * x[xi];
                                        dx[xi] += d * kernel[ki];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (gk, gb, dx)
    }
}

/// `max |a - b| / max(max |b|, floor)`.
pub fn rel_inf(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().chain(a).fold(floor, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Number of paths whose edge repeats an earlier path, by pairwise
/// comparison.
pub fn brute_force_duplicates(from: &[u32], to: &[u32]) -> usize {
    (0..from.len()).filter(|&q| (0..q).any(|p| from[p] == from[q] && to[p] == to[q])).count()
}

/// Collisions of contiguous blocks: per block, its length minus the number
/// of distinct entries.
pub fn block_collisions(indices: &[u32], block: usize) -> usize {
    indices
        .chunks(block)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v.dedup();
            c.len() - v.len()
        })
        .sum()
}
