//! Sparse signature matrices `A = H ⊙ W`.
//!
//! The mask `H` is stored as an edge list with row-major and column-major
//! adjacency indexes; the weights `W` are stored edge-aligned, so a signature
//! matrix never materialises its zeros.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::OpCount;
use crate::rng::SimRng;

/// Maximum number of full socket shuffles tried by [`gallager_mask`].
pub const MAX_SHUFFLES: usize = 1000;

/// Sink for arithmetic operation counts. `()` discards them.
pub trait Tally {
    fn adds(&mut self, count: u64);
    fn mults(&mut self, count: u64);
}

impl Tally for () {
    #[inline(always)]
    fn adds(&mut self, _: u64) {}
    #[inline(always)]
    fn mults(&mut self, _: u64) {}
}

impl Tally for OpCount {
    #[inline(always)]
    fn adds(&mut self, count: u64) {
        self.adds += count;
    }
    #[inline(always)]
    fn mults(&mut self, count: u64) {
        self.mults += count;
    }
}

/// Binary support pattern of a signature matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    m: usize,
    n: usize,
    k: usize,
    column_weight: Option<usize>,
    seed: u64,
    /// Sorted by (row, col).
    edges: Vec<(usize, usize)>,
    row_start: Vec<usize>,
    col_start: Vec<usize>,
    /// Edge ids grouped by column, rows ascending within a column.
    col_edges: Vec<usize>,
}

impl MaskMatrix {
    /// Builds a row- and column-regular mask from an edge list, validating
    /// every invariant (row weight `k`, column weight `km/n`, no duplicates).
    pub fn regular(m: usize, n: usize, k: usize, seed: u64, edges: Vec<(usize, usize)>) -> Result<Self> {
        let kprime = column_weight(m, n, k)?;
        let mask = Self::build(m, n, k, seed, edges)?;
        if mask.edges.len() != k * m {
            return Err(Error::InvalidDimension(format!(
                "expected {} edges, found {}",
                k * m,
                mask.edges.len()
            )));
        }
        for row in 0..m {
            let w = mask.row_start[row + 1] - mask.row_start[row];
            if w != k {
                return Err(Error::InvalidDimension(format!(
                    "row {row} has weight {w}, expected {k}"
                )));
            }
        }
        for col in 0..n {
            let w = mask.col_start[col + 1] - mask.col_start[col];
            if w != kprime {
                return Err(Error::InvalidDimension(format!(
                    "column {col} has weight {w}, expected {kprime}"
                )));
            }
        }
        Ok(MaskMatrix {
            column_weight: Some(kprime),
            ..mask
        })
    }

    /// Builds an irregular mask, used for cycle-free factor graphs in
    /// exactness checks. The nominal row weight `k` is the largest row weight.
    /// Every row and column must carry at least one edge.
    pub fn irregular(m: usize, n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut mask = Self::build(m, n, 1, 0, edges)?;
        let mut kmax = 0;
        for row in 0..m {
            let w = mask.row_start[row + 1] - mask.row_start[row];
            if w == 0 {
                return Err(Error::InvalidDimension(format!("row {row} is empty")));
            }
            kmax = kmax.max(w);
        }
        if let Some(col) = (0..n).find(|&c| mask.col_start[c + 1] == mask.col_start[c]) {
            return Err(Error::InvalidDimension(format!("column {col} is empty")));
        }
        mask.k = kmax;
        Ok(mask)
    }

    fn build(m: usize, n: usize, k: usize, seed: u64, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidDimension("m and n must be positive".into()));
        }
        edges.sort_unstable();
        if let Some(&(r, c)) = edges.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::InvalidDimension(format!(
                "edge ({r}, {c}) out of bounds for {m}x{n}"
            )));
        }
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidDimension(format!("duplicate edge {:?}", w[0])));
        }

        let mut row_start = vec![0; m + 1];
        let mut col_start = vec![0; n + 1];
        for &(r, c) in &edges {
            row_start[r + 1] += 1;
            col_start[c + 1] += 1;
        }
        for i in 0..m {
            row_start[i + 1] += row_start[i];
        }
        for i in 0..n {
            col_start[i + 1] += col_start[i];
        }
        let mut fill = col_start.clone();
        let mut col_edges = vec![0; edges.len()];
        for (e, &(_, c)) in edges.iter().enumerate() {
            col_edges[fill[c]] = e;
            fill[c] += 1;
        }
        Ok(MaskMatrix {
            m,
            n,
            k,
            column_weight: None,
            seed,
            edges,
            row_start,
            col_start,
            col_edges,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Row weight (nominal row weight for irregular masks).
    pub fn k(&self) -> usize {
        self.k
    }

    /// Column weight `k' = km/n`; `None` for irregular masks.
    pub fn kprime(&self) -> Option<usize> {
        self.column_weight
    }

    pub fn is_regular(&self) -> bool {
        self.column_weight.is_some()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Overloaded factor `n/m`.
    pub fn beta(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edge ids of row `row`; they are contiguous.
    pub fn row_edges(&self, row: usize) -> std::ops::Range<usize> {
        self.row_start[row]..self.row_start[row + 1]
    }

    /// Edge ids of column `col`.
    pub fn col_edges(&self, col: usize) -> &[usize] {
        &self.col_edges[self.col_start[col]..self.col_start[col + 1]]
    }

    pub fn row_weight(&self, row: usize) -> usize {
        self.row_start[row + 1] - self.row_start[row]
    }

    pub fn col_weight(&self, col: usize) -> usize {
        self.col_start[col + 1] - self.col_start[col]
    }
}

fn column_weight(m: usize, n: usize, k: usize) -> Result<usize> {
    if m == 0 || n == 0 || k == 0 {
        return Err(Error::InvalidDimension(format!(
            "m, n and k must be positive (m={m}, n={n}, k={k})"
        )));
    }
    if k > n {
        return Err(Error::InvalidDimension(format!("row weight k={k} exceeds n={n}")));
    }
    if !(k * m).is_multiple_of(n) {
        return Err(Error::NonIntegerColumnWeight { m, n, k });
    }
    Ok(k * m / n)
}

/// Random regular mask with row weight `k` and column weight `km/n`.
///
/// Edge sockets (`k` per row, `k'` per column) are paired by a random
/// shuffle; duplicate edges are then repaired by swapping column sockets with
/// random partners. A shuffle whose repair stalls is discarded.
pub fn gallager_mask(m: usize, n: usize, k: usize, seed: u64) -> Result<MaskMatrix> {
    let kprime = column_weight(m, n, k)?;
    let mut rng = SimRng::new(seed);
    let total = k * m;
    let mut cols: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, kprime)).collect();

    for _ in 0..MAX_SHUFFLES {
        rng.shuffle(&mut cols);
        if repair_duplicates(&mut cols, k, &mut rng, 20 * total + 100) {
            let edges = cols.iter().enumerate().map(|(p, &c)| (p / k, c)).collect();
            return MaskMatrix::regular(m, n, k, seed, edges);
        }
    }
    Err(Error::ConstructionFailed(MAX_SHUFFLES))
}

/// Socket position `p` belongs to row `p / k`. Returns false if `budget`
/// swap attempts did not clear all duplicates.
fn repair_duplicates(cols: &mut [usize], k: usize, rng: &mut SimRng, budget: usize) -> bool {
    let total = cols.len();
    let in_row_except = |cols: &[usize], row: usize, skip: usize, col: usize| {
        (row * k..row * k + k).any(|p| p != skip && cols[p] == col)
    };
    let mut attempts = 0;
    loop {
        let conflict = (0..total).find(|&p| {
            let row = p / k;
            (row * k..p).any(|q| cols[q] == cols[p])
        });
        let Some(p) = conflict else {
            return true;
        };
        loop {
            if attempts >= budget {
                return false;
            }
            attempts += 1;
            let q = rng.below(total);
            let (rp, rq) = (p / k, q / k);
            if rp == rq {
                continue;
            }
            let (cp, cq) = (cols[p], cols[q]);
            if !in_row_except(cols, rp, p, cq) && !in_row_except(cols, rq, q, cp) {
                cols.swap(p, q);
                break;
            }
        }
    }
}

/// Sparse real signature matrix with edge-aligned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureMatrix {
    mask: Arc<MaskMatrix>,
    weights: Vec<f64>,
    frobenius: f64,
}

impl SignatureMatrix {
    pub fn new(mask: Arc<MaskMatrix>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != mask.num_edges() {
            return Err(Error::DimensionMismatch {
                expected: mask.num_edges(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidDimension("signature weights must be finite".into()));
        }
        let frobenius = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        Ok(SignatureMatrix {
            mask,
            weights,
            frobenius,
        })
    }

    /// All weights equal to one.
    pub fn ones(mask: Arc<MaskMatrix>) -> Self {
        let weights = vec![1.0; mask.num_edges()];
        Self::new(mask, weights).expect("unit weights are valid")
    }

    pub fn mask(&self) -> &MaskMatrix {
        &self.mask
    }

    pub fn shared_mask(&self) -> Arc<MaskMatrix> {
        Arc::clone(&self.mask)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn m(&self) -> usize {
        self.mask.m
    }

    pub fn n(&self) -> usize {
        self.mask.n
    }

    pub fn k(&self) -> usize {
        self.mask.k
    }

    pub fn beta(&self) -> f64 {
        self.mask.beta()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius
    }

    /// Number of nonzero weights.
    pub fn nnz(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    /// Rescales so that `‖A‖_F² = km` (`k` rows weight, `m` rows).
    pub fn normalize(&self) -> Result<Self> {
        if self.frobenius == 0.0 {
            return Err(Error::ZeroMatrix);
        }
        let target = ((self.mask.k * self.mask.m) as f64).sqrt();
        let scale = target / self.frobenius;
        let weights = self.weights.iter().map(|w| w * scale).collect();
        Self::new(Arc::clone(&self.mask), weights)
    }

    /// `A x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.n(), x.len())?;
        let mut out = vec![0.0; self.m()];
        self.apply_into(x, &mut out, &mut ());
        Ok(out)
    }

    /// `Aᵀ r`.
    pub fn apply_transpose(&self, r: &[f64]) -> Result<Vec<f64>> {
        check_len(self.m(), r.len())?;
        let mut out = vec![0.0; self.n()];
        self.apply_transpose_into(r, &mut out, &mut ());
        Ok(out)
    }

    /// Unchecked `out = A x`; a row of weight `w` costs `w` multiplications
    /// and `w - 1` additions.
    pub fn apply_into<T: Tally>(&self, x: &[f64], out: &mut [f64], tally: &mut T) {
        let edges = &self.mask.edges;
        for (row, slot) in out.iter_mut().enumerate() {
            let range = self.mask.row_edges(row);
            let mut acc = 0.0;
            for (i, e) in range.clone().enumerate() {
                let term = self.weights[e] * x[edges[e].1];
                acc = if i == 0 { term } else { acc + term };
            }
            tally.mults(range.len() as u64);
            tally.adds(range.len().saturating_sub(1) as u64);
            *slot = acc;
        }
    }

    /// Unchecked `out = Aᵀ r`.
    pub fn apply_transpose_into<T: Tally>(&self, r: &[f64], out: &mut [f64], tally: &mut T) {
        let edges = &self.mask.edges;
        for (col, slot) in out.iter_mut().enumerate() {
            let ids = self.mask.col_edges(col);
            let mut acc = 0.0;
            for (i, &e) in ids.iter().enumerate() {
                let term = self.weights[e] * r[edges[e].0];
                acc = if i == 0 { term } else { acc + term };
            }
            tally.mults(ids.len() as u64);
            tally.adds(ids.len().saturating_sub(1) as u64);
            *slot = acc;
        }
    }

    /// Line-oriented text form: `m n k seed` header, then `row col weight`
    /// per edge.
    pub fn to_text(&self) -> String {
        let mask = &self.mask;
        let mut out = format!("{} {} {} {}\n", mask.m, mask.n, mask.k, mask.seed);
        for (&(r, c), w) in mask.edges.iter().zip(&self.weights) {
            let _ = writeln!(out, "{r} {c} {w:?}");
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output; the mask must be regular.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(hline, "header must be `m n k seed`"));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|e| Error::parse(hline, format!("{s:?}: {e}")));
        let (m, n, k, seed) = (
            num(fields[0])? as usize,
            num(fields[1])? as usize,
            num(fields[2])? as usize,
            num(fields[3])?,
        );

        let mut edges = Vec::new();
        let mut weighted = Vec::new();
        for (line, body) in lines {
            let parts: Vec<&str> = body.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::parse(line, "edge line must be `row col weight`"));
            }
            let idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::parse(line, format!("{s:?}: {e}")))
            };
            let (r, c) = (idx(parts[0])?, idx(parts[1])?);
            let w: f64 = parts[2]
                .parse()
                .map_err(|e| Error::parse(line, format!("{:?}: {e}", parts[2])))?;
            edges.push((r, c));
            weighted.push(((r, c), w));
        }
        let mask = MaskMatrix::regular(m, n, k, seed, edges)?;
        weighted.sort_by_key(|&(e, _)| e);
        let weights = weighted.into_iter().map(|(_, w)| w).collect();
        Self::new(Arc::new(mask), weights)
    }
}

/// Independent equiprobable ±1 weight per edge.
pub fn random_pm1_weights(mask: Arc<MaskMatrix>, seed: u64) -> SignatureMatrix {
    let mut rng = SimRng::new(seed);
    let weights = (0..mask.num_edges()).map(|_| rng.bpsk()).collect();
    SignatureMatrix::new(mask, weights).expect("±1 weights are valid")
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
