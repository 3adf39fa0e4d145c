//! Belief-propagation multiuser detector on the mask factor graph.
//!
//! Messages are kept as log-likelihood ratios `log p(+1)/p(-1)`, one per edge
//! and direction, so the normalisation constants of the probability form
//! never appear. Each round updates every symbol-to-chip message and then
//! every chip-to-symbol message (flooding schedule). The chip update
//! enumerates all `2^(k-1)` assignments of the other users on the chip.

use crate::channel::channel_gain;
use crate::error::{Error, Result};
use crate::ops::OpCount;
use crate::signature::{check_len, SignatureMatrix, Tally};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub iterations: usize,
    pub llr_clip: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            iterations: 30,
            llr_clip: 50.0,
        }
    }
}

impl BpConfig {
    pub fn new(iterations: usize) -> Self {
        BpConfig {
            iterations,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("BP needs at least one iteration".into()));
        }
        if self.llr_clip.is_nan() || self.llr_clip <= 0.0 {
            return Err(Error::Config("LLR clip must be positive".into()));
        }
        Ok(())
    }
}

/// Edge-aligned messages in LLR form.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    /// Symbol-to-chip messages.
    pub v_llr: Vec<f64>,
    /// Chip-to-symbol messages.
    pub u_llr: Vec<f64>,
    pub iteration: usize,
}

impl MessageState {
    pub fn uniform(edges: usize) -> Self {
        MessageState {
            v_llr: vec![0.0; edges],
            u_llr: vec![0.0; edges],
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpOutput {
    pub x_hat: Vec<f64>,
    /// Posterior LLR estimate per user.
    pub beliefs: Vec<f64>,
    pub messages: MessageState,
    /// Number of message values that hit the clip bound.
    pub clip_events: usize,
    pub ops_per_round: OpCount,
    pub ops: OpCount,
}

pub fn bp_detect(a: &SignatureMatrix, y: &[f64], n0: f64, cfg: &BpConfig) -> Result<BpOutput> {
    check_len(a.m(), y.len())?;
    cfg.validate()?;
    let gain = channel_gain(n0, a.k())?;
    let mask = a.mask();
    let mut state = MessageState::uniform(mask.num_edges());
    let mut scratch = Scratch::new(mask.k());
    let mut clip_events = 0;
    let mut ops = OpCount::default();
    let mut ops_per_round = OpCount::default();

    for round in 0..cfg.iterations {
        let mut round_ops = OpCount::default();
        clip_events += update_symbols(a, &mut state, cfg.llr_clip, &mut round_ops);
        clip_events += update_chips(a, y, gain, &mut state, cfg.llr_clip, &mut scratch, &mut round_ops);
        state.iteration += 1;
        if round == 0 {
            ops_per_round = round_ops;
        }
        ops += round_ops;
    }

    let beliefs: Vec<f64> = (0..a.n())
        .map(|i| mask.col_edges(i).iter().map(|&e| state.u_llr[e]).sum())
        .collect();
    let x_hat = beliefs.iter().map(|&b| if b >= 0.0 { 1.0 } else { -1.0 }).collect();
    Ok(BpOutput {
        x_hat,
        beliefs,
        messages: state,
        clip_events,
        ops_per_round,
        ops,
    })
}

/// Per-iteration operation counts of the reference arithmetic organisation:
/// additions `(k·2^k + 2)·k·m`, multiplications `((2k+3)·2^k + 2k')·k·m`
/// with `k' = km/n`.
pub fn bp_op_count(n: usize, m: usize, k: usize) -> Result<OpCount> {
    if n == 0 || m == 0 || k == 0 {
        return Err(Error::InvalidDimension("n, m and k must be positive".into()));
    }
    if !(k * m).is_multiple_of(n) {
        return Err(Error::NonIntegerColumnWeight { m, n, k });
    }
    let (k, km, kprime) = (k as u64, (k * m) as u64, (k * m / n) as u64);
    let pow = 1u64 << k;
    Ok(OpCount::new((k * pow + 2) * km, ((2 * k + 3) * pow + 2 * kprime) * km))
}

fn clip(value: f64, bound: f64, events: &mut usize) -> f64 {
    if value.abs() > bound || value.is_nan() {
        *events += 1;
        if value.is_nan() {
            0.0
        } else {
            value.clamp(-bound, bound)
        }
    } else {
        value
    }
}

fn update_symbols<T: Tally>(a: &SignatureMatrix, state: &mut MessageState, bound: f64, tally: &mut T) -> usize {
    let mask = a.mask();
    let mut events = 0;
    for i in 0..a.n() {
        let ids = mask.col_edges(i);
        let total: f64 = ids.iter().map(|&e| state.u_llr[e]).sum();
        tally.adds(ids.len().saturating_sub(1) as u64 + ids.len() as u64);
        for &e in ids {
            state.v_llr[e] = clip(total - state.u_llr[e], bound, &mut events);
        }
    }
    events
}

struct Scratch {
    others: Vec<usize>,
    prob_pos: Vec<f64>,
    prob_neg: Vec<f64>,
    prior: Vec<f64>,
    sq: Vec<[f64; 2]>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        let assignments = 1usize << k.saturating_sub(1);
        Scratch {
            others: Vec::with_capacity(k),
            prob_pos: Vec::with_capacity(k),
            prob_neg: Vec::with_capacity(k),
            prior: vec![0.0; assignments],
            sq: vec![[0.0; 2]; assignments],
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Chip update. For edge `(j, i)` and each assignment of the other users on
/// chip `j`, the Gaussian factor is shifted by the smallest squared residual
/// of the chip before exponentiation; the shift cancels in the LLR.
/// Assignments are summed in complementary pairs so that the update is
/// exactly odd under `y -> -y`.
fn update_chips<T: Tally>(
    a: &SignatureMatrix,
    y: &[f64],
    gain: f64,
    state: &mut MessageState,
    bound: f64,
    scratch: &mut Scratch,
    tally: &mut T,
) -> usize {
    let mask = a.mask();
    let weights = a.weights();
    let mut events = 0;

    for (j, &yj) in y.iter().enumerate() {
        let row = mask.row_edges(j);
        for target in row.clone() {
            scratch.others.clear();
            scratch.others.extend(row.clone().filter(|&e| e != target));
            scratch.prob_pos.clear();
            scratch.prob_neg.clear();
            for &e in &scratch.others {
                scratch.prob_pos.push(logistic(state.v_llr[e]));
                scratch.prob_neg.push(logistic(-state.v_llr[e]));
            }
            let d = scratch.others.len();
            let count = 1usize << d;
            let w_target = weights[target];

            let mut min_sq = f64::INFINITY;
            for assign in 0..count {
                let mut partial = 0.0;
                let mut prior = 1.0;
                for (b, &e) in scratch.others.iter().enumerate() {
                    let negative = (assign >> b) & 1 == 1;
                    let xl = if negative { -1.0 } else { 1.0 };
                    let term = weights[e] * xl;
                    let p = if negative {
                        scratch.prob_neg[b]
                    } else {
                        scratch.prob_pos[b]
                    };
                    if b == 0 {
                        partial = term;
                        prior = p;
                    } else {
                        partial += term;
                        prior *= p;
                    }
                }
                tally.mults(d as u64 + d.saturating_sub(1) as u64);
                tally.adds(d.saturating_sub(1) as u64);
                scratch.prior[assign] = prior;

                for (slot, x) in [1.0, -1.0].into_iter().enumerate() {
                    let mean = if d == 0 { w_target * x } else { w_target * x + partial };
                    let r = yj - gain * mean;
                    let sq = r * r;
                    scratch.sq[assign][slot] = sq;
                    min_sq = min_sq.min(sq);
                }
                tally.mults(2 * 3);
                tally.adds(2 * if d == 0 { 1 } else { 2 });
            }

            let term =
                |assign: usize, slot: usize| scratch.prior[assign] * (-0.5 * (scratch.sq[assign][slot] - min_sq)).exp();
            let mut sums = [0.0f64; 2];
            for (slot, sum) in sums.iter_mut().enumerate() {
                if count == 1 {
                    *sum = term(0, slot);
                } else {
                    for assign in 0..count / 2 {
                        let pair = term(assign, slot) + term(count - 1 - assign, slot);
                        *sum = if assign == 0 { pair } else { *sum + pair };
                    }
                }
            }
            tally.adds(2 * (count as u64) + 2 * (count as u64 - 1));
            tally.mults(2 * 2 * count as u64);

            let llr = sums[0].ln() - sums[1].ln();
            tally.adds(1);
            state.u_llr[target] = clip(llr, bound, &mut events);
        }
    }
    events
}
