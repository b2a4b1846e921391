//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the autodiff engine or the metric code under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xraygan::autograd::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * normal(rng)).collect())
}

// ---------- encoder, written out with plain loops ----------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Lstm<'a> {
    w_ih: &'a Tensor,
    w_hh: &'a Tensor,
    bias: &'a Tensor,
}

impl<'a> Lstm<'a> {
    fn from(p: &'a BTreeMap<String, Tensor>, name: &str) -> Self {
        Self {
            w_ih: &p[&format!("{name}.w_ih")],
            w_hh: &p[&format!("{name}.w_hh")],
            bias: &p[&format!("{name}.bias")],
        }
    }

    fn run(&self, xs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
        let input = self.w_ih.shape()[0];
        let h_dim = self.w_hh.shape()[0];
        let g4 = 4 * h_dim;
        let (wi, wh, b) = (self.w_ih.data(), self.w_hh.data(), self.bias.data());
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut out = vec![Vec::new(); xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let mut z = vec![0.0; g4];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut s = b[j];
                for k in 0..input {
                    s += xs[t][k] * wi[k * g4 + j];
                }
                for k in 0..h_dim {
                    s += h[k] * wh[k * g4 + j];
                }
                *zj = s;
            }
            for k in 0..h_dim {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h_dim + k]);
                let g = z[2 * h_dim + k].tanh();
                let o = sigmoid(z[3 * h_dim + k]);
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
            out[t] = h.clone();
        }
        out
    }
}

fn bidirectional(p: &BTreeMap<String, Tensor>, fwd: &str, bwd: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = Lstm::from(p, fwd).run(xs, false);
    let b = Lstm::from(p, bwd).run(xs, true);
    f.into_iter()
        .zip(b)
        .map(|(mut a, b)| {
            a.extend(b);
            a
        })
        .collect()
}

fn attend(p: &BTreeMap<String, Tensor>, name: &str, hs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let w = &p[&format!("{name}.w")];
    let b = p[&format!("{name}.b")].data();
    let v = p[&format!("{name}.v")].data();
    let (d, a) = (w.shape()[0], w.shape()[1]);
    let scores: Vec<f64> = hs
        .iter()
        .map(|h| {
            (0..a)
                .map(|j| {
                    let u: f64 = (0..d).map(|k| h[k] * w.data()[k * a + j]).sum::<f64>() + b[j];
                    v[j] * u.tanh()
                })
                .sum()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|x| x / z).collect();
    let mut pooled = vec![0.0; d];
    for (h, al) in hs.iter().zip(&alpha) {
        for k in 0..d {
            pooled[k] += al * h[k];
        }
    }
    (pooled, alpha)
}

pub struct OracleEncoding {
    pub c: Vec<f64>,
    pub word_attention: Vec<Vec<f64>>,
    pub sentence_attention: Vec<f64>,
}

/// Reference report encoding from named parameters; PAD (id 0) is skipped.
pub fn encode_oracle(sentences: &[Vec<u32>], p: &BTreeMap<String, Tensor>) -> OracleEncoding {
    let emb = &p["embedding"];
    let e_dim = emb.shape()[1];
    let mut sent_vecs = Vec::new();
    let mut word_attention = Vec::new();
    for s in sentences {
        let xs: Vec<Vec<f64>> = s
            .iter()
            .filter(|&&t| t != 0)
            .map(|&t| emb.data()[t as usize * e_dim..(t as usize + 1) * e_dim].to_vec())
            .collect();
        let hs = bidirectional(p, "word_fwd", "word_bwd", &xs);
        let (v, a) = attend(p, "word_attention", &hs);
        sent_vecs.push(v);
        word_attention.push(a);
    }
    let hs = bidirectional(p, "sent_fwd", "sent_bwd", &sent_vecs);
    let (c, sentence_attention) = attend(p, "sent_attention", &hs);
    OracleEncoding {
        c,
        word_attention,
        sentence_attention,
    }
}

// ---------- dense linear algebra for the FID oracle ----------

pub type Mat = Vec<Vec<f64>>;

pub fn identity(n: usize) -> Mat {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .zip(identity(n))
        .map(|(r, e)| r.iter().cloned().chain(e).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        assert!(d.abs() > 1e-300, "singular matrix");
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot = m[col].clone();
                    m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root by the Denman-Beavers iteration (no eigensolver).
pub fn sqrtm(a: &Mat) -> Mat {
    let n = a.len();
    let (mut y, mut z) = (a.clone(), identity(n));
    for _ in 0..100 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect())
            .collect();
        let nz: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect())
            .collect();
        let delta: f64 = ny
            .iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum();
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

pub fn mean_cov(x: &[Vec<f64>]) -> (Vec<f64>, Mat) {
    let (n, d) = (x.len() as f64, x[0].len());
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| x.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1.0))
                .collect()
        })
        .collect();
    (mu, cov)
}

/// Fréchet distance using `Tr sqrt(Sa Sb)` from Denman-Beavers on the raw product.
pub fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, sa) = mean_cov(a);
    let (mb, sb) = mean_cov(b);
    let root = sqrtm(&matmul(&sa, &sb));
    let tr = |m: &Mat| (0..m.len()).map(|i| m[i][i]).sum::<f64>();
    let d2: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    d2 + tr(&sa) + tr(&sb) - 2.0 * tr(&root)
}
