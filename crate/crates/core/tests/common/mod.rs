//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::Arc;

use scdma::channel::channel_gain;
use scdma::detect_pg::{stpg_forward, DetectorParams};
use scdma::rng::SimRng;
use scdma::signature::{gallager_mask, MaskMatrix, SignatureMatrix};
use scdma::train::mse_loss;

/// Row-major dense copy of `a`.
pub fn dense(a: &SignatureMatrix) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; a.n()]; a.m()];
    for (&(j, i), &w) in a.mask().edges().iter().zip(a.weights()) {
        d[j][i] = w;
    }
    d
}

pub fn dense_apply(d: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// All `2^n` sign vectors; bit `i` of the index set means `x_i = -1`.
pub fn sign_vector(n: usize, index: usize) -> Vec<f64> {
    (0..n).map(|i| if index >> i & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exact posterior LLRs `log P(x_i=+1|y)/P(x_i=-1|y)` under a uniform prior
/// and unit-variance Gaussian noise, by enumeration.
pub fn posterior_llrs(a: &SignatureMatrix, y: &[f64], n0: f64) -> Vec<f64> {
    let n = a.n();
    let c = channel_gain(n0, a.k()).unwrap();
    let d = dense(a);
    let mut log_like = Vec::with_capacity(1 << n);
    for idx in 0..1usize << n {
        let x = sign_vector(n, idx);
        let ax = dense_apply(&d, &x);
        let dist: f64 = y.iter().zip(&ax).map(|(y, v)| (y - c * v).powi(2)).sum();
        log_like.push(-0.5 * dist);
    }
    (0..n)
        .map(|i| {
            let (mut plus, mut minus) = (Vec::new(), Vec::new());
            for (idx, &l) in log_like.iter().enumerate() {
                if idx >> i & 1 == 1 {
                    minus.push(l);
                } else {
                    plus.push(l);
                }
            }
            log_sum_exp(&plus) - log_sum_exp(&minus)
        })
        .collect()
}

/// Random bipartite tree over users and chips, grown by attaching new nodes
/// to random existing ones. Chips hold at most `max_chip_degree` users.
pub fn random_tree_mask(rng: &mut SimRng, n: usize, max_chip_degree: usize) -> MaskMatrix {
    // Nodes: (is_user, index). Start from user 0.
    let mut nodes: Vec<(bool, usize)> = vec![(true, 0)];
    let mut chip_degree: Vec<usize> = Vec::new();
    let mut edges = Vec::new();
    let mut users = 1;
    while users < n {
        let (is_user, idx) = nodes[rng.below(nodes.len())];
        if is_user {
            let chip = chip_degree.len();
            chip_degree.push(1);
            edges.push((chip, idx));
            nodes.push((false, chip));
        } else if chip_degree[idx] < max_chip_degree {
            chip_degree[idx] += 1;
            edges.push((idx, users));
            nodes.push((true, users));
            users += 1;
        }
    }
    // A few single-user chips keep every user observed more than once.
    for user in 0..n {
        if rng.below(2) == 0 {
            let chip = chip_degree.len();
            chip_degree.push(1);
            edges.push((chip, user));
        }
    }
    MaskMatrix::irregular(chip_degree.len(), n, edges).unwrap()
}

/// Diameter of the factor graph in edges.
pub fn factor_graph_diameter(mask: &MaskMatrix) -> usize {
    let (m, n) = (mask.m(), mask.n());
    let mut adj = vec![Vec::new(); m + n];
    for &(j, i) in mask.edges() {
        adj[i].push(n + j);
        adj[n + j].push(i);
    }
    let bfs = |start: usize| {
        let mut dist = vec![usize::MAX; m + n];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        let far = (0..m + n).max_by_key(|&v| dist[v]).unwrap();
        (far, dist[far])
    };
    let (far, _) = bfs(0);
    bfs(far).1
}

/// Regular Gallager-masked matrix with weights uniform in `±[0.5, 1.5]`,
/// dimensions drawn with `n <= max_n`, `m <= max_m` and integral column weight.
pub fn random_small_signature(rng: &mut SimRng, max_n: usize, max_m: usize) -> SignatureMatrix {
    loop {
        let n = 2 + rng.below(max_n - 1);
        let m = 2 + rng.below(max_m - 1);
        let k = 1 + rng.below(n.min(4));
        if !(k * m).is_multiple_of(n) || k * m / n > m {
            continue;
        }
        let Ok(mask) = gallager_mask(m, n, k, rng.next_u64()) else {
            continue;
        };
        let mask = Arc::new(mask);
        let weights = (0..mask.num_edges())
            .map(|_| {
                let mag = 0.5 + rng.uniform();
                if rng.below(2) == 0 {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        return SignatureMatrix::new(mask, weights).unwrap();
    }
}

/// Loss of the unrolled detector as a function of everything trainable.
/// With `through_channel`, `y = c·A·x + w` is rebuilt from the weights.
pub struct LossProbe<'a> {
    pub a: &'a SignatureMatrix,
    pub x: &'a [f64],
    pub w: &'a [f64],
    pub y: &'a [f64],
    pub n0: f64,
    pub through_channel: bool,
}

impl LossProbe<'_> {
    pub fn loss(&self, weights: &[f64], params: &DetectorParams) -> f64 {
        let a = SignatureMatrix::new(self.a.shared_mask(), weights.to_vec()).unwrap();
        let y = if self.through_channel {
            let c = channel_gain(self.n0, a.k()).unwrap();
            a.apply(self.x)
                .unwrap()
                .iter()
                .zip(self.w)
                .map(|(v, w)| c * v + w)
                .collect()
        } else {
            self.y.to_vec()
        };
        mse_loss(&stpg_forward(&a, &y, self.n0, params).unwrap(), self.x).unwrap()
    }

    /// Central differences over gamma_raw, alpha and (optionally) weights,
    /// in that order.
    pub fn finite_differences(&self, params: &DetectorParams, with_weights: bool, h: f64) -> Vec<f64> {
        let w0 = self.a.weights().to_vec();
        let mut out = Vec::new();
        for t in 0..params.depth() {
            let mut p = params.clone();
            p.gamma_raw[t] += h;
            let up = self.loss(&w0, &p);
            p.gamma_raw[t] -= 2.0 * h;
            let down = self.loss(&w0, &p);
            out.push((up - down) / (2.0 * h));
        }
        let mut p = params.clone();
        p.alpha += h;
        let up = self.loss(&w0, &p);
        p.alpha -= 2.0 * h;
        let down = self.loss(&w0, &p);
        out.push((up - down) / (2.0 * h));
        if with_weights {
            for e in 0..w0.len() {
                let mut w = w0.clone();
                w[e] += h;
                let up = self.loss(&w, params);
                w[e] -= 2.0 * h;
                let down = self.loss(&w, params);
                out.push((up - down) / (2.0 * h));
            }
        }
        out
    }
}

/// `|a - b| <= max(rel * max(|a|, |b|), abs)`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(abs)
}
