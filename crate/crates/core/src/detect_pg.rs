//! Projected-gradient detectors.
//!
//! One iteration of the trainable detector is
//!
//! ```text
//! r_t     = s_t + γ_t·c·Aᵀ(y − c·A·s_t),   c = √(n0/k)
//! s_{t+1} = tanh(α·r_t)
//! ```
//!
//! starting from `s_0 = 0`. The step sizes are stored as `gamma_raw` with
//! `γ_t = gamma_raw_t²`, which keeps every effective step non-negative. The
//! plain PG detector is the special case of a constant step.

use std::fmt::Write as _;

use crate::channel::channel_gain;
use crate::error::{Error, Result};
use crate::ops::OpCount;
use crate::signature::{check_len, SignatureMatrix, Tally};

/// Effective step size used to initialise training and by the untrained PG.
pub const INITIAL_GAMMA: f64 = 0.01;
/// Softness used to initialise training and by the untrained PG.
pub const INITIAL_ALPHA: f64 = 2.0;

/// Trainable detector parameters: `T` raw step sizes and one shared softness.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub gamma_raw: Vec<f64>,
    pub alpha: f64,
}

impl DetectorParams {
    pub fn new(gamma_raw: Vec<f64>, alpha: f64) -> Result<Self> {
        if gamma_raw.is_empty() {
            return Err(Error::InvalidDimension("detector needs at least one iteration".into()));
        }
        if !alpha.is_finite() || gamma_raw.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("detector parameters must be finite".into()));
        }
        Ok(DetectorParams { gamma_raw, alpha })
    }

    /// Training initialisation: every effective step equal to
    /// [`INITIAL_GAMMA`], softness [`INITIAL_ALPHA`].
    pub fn initial(depth: usize) -> Result<Self> {
        Self::constant(depth, INITIAL_GAMMA, INITIAL_ALPHA)
    }

    /// Constant effective step `gamma` at every iteration.
    pub fn constant(depth: usize, gamma: f64, alpha: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::Config(format!("step size {gamma} is negative")));
        }
        Self::new(vec![gamma.sqrt(); depth], alpha)
    }

    pub fn depth(&self) -> usize {
        self.gamma_raw.len()
    }

    pub fn num_params(&self) -> usize {
        self.gamma_raw.len() + 1
    }

    /// Effective step `γ_t` of iteration `t` (0-based).
    pub fn effective_gamma(&self, t: usize) -> f64 {
        self.gamma_raw[t] * self.gamma_raw[t]
    }

    /// The first `depth` iterations.
    pub fn truncated(&self, depth: usize) -> Result<Self> {
        if depth == 0 || depth > self.depth() {
            return Err(Error::InvalidDimension(format!(
                "cannot truncate {} iterations to {depth}",
                self.depth()
            )));
        }
        Self::new(self.gamma_raw[..depth].to_vec(), self.alpha)
    }

    /// `T alpha` on the first line, then one `gamma_raw` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {:?}\n", self.depth(), self.alpha);
        for g in &self.gamma_raw {
            let _ = writeln!(out, "{g:?}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::parse(hline, "header must be `T alpha`"));
        }
        let depth: usize = fields[0]
            .parse()
            .map_err(|e| Error::parse(hline, format!("{:?}: {e}", fields[0])))?;
        let alpha: f64 = fields[1]
            .parse()
            .map_err(|e| Error::parse(hline, format!("{:?}: {e}", fields[1])))?;
        let gamma_raw = lines
            .map(|(line, body)| {
                body.parse::<f64>()
                    .map_err(|e| Error::parse(line, format!("{body:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if gamma_raw.len() != depth {
            return Err(Error::parse(
                hline,
                format!("header announces {depth} steps, found {}", gamma_raw.len()),
            ));
        }
        Self::new(gamma_raw, alpha)
    }
}

/// Forward trajectory of one detection, enough to run the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape<'a> {
    pub a: &'a SignatureMatrix,
    pub y: &'a [f64],
    pub gain: f64,
    /// `s_0 .. s_T`.
    pub s: Vec<Vec<f64>>,
    /// `r_0 .. r_{T-1}`.
    pub r: Vec<Vec<f64>>,
    /// Residuals `y − c·A·s_t`.
    pub residual: Vec<Vec<f64>>,
    /// Correlations `Aᵀ·residual_t`.
    pub corr: Vec<Vec<f64>>,
}

impl Tape<'_> {
    pub fn depth(&self) -> usize {
        self.r.len()
    }

    pub fn output(&self) -> &[f64] {
        self.s.last().expect("tape holds s_0")
    }
}

/// Runs the detector and returns the soft output `s_T`.
pub fn stpg_forward(a: &SignatureMatrix, y: &[f64], n0: f64, params: &DetectorParams) -> Result<Vec<f64>> {
    run(a, y, n0, params, None, &mut ())
}

/// Runs the detector and records the trajectory.
pub fn stpg_forward_recorded<'a>(
    a: &'a SignatureMatrix,
    y: &'a [f64],
    n0: f64,
    params: &DetectorParams,
) -> Result<Tape<'a>> {
    let mut tape = Tape {
        a,
        y,
        gain: 0.0,
        s: Vec::with_capacity(params.depth() + 1),
        r: Vec::with_capacity(params.depth()),
        residual: Vec::with_capacity(params.depth()),
        corr: Vec::with_capacity(params.depth()),
    };
    run(a, y, n0, params, Some(&mut tape), &mut ())?;
    Ok(tape)
}

/// Runs the detector while counting arithmetic; returns `(s_T, ops)`.
pub fn stpg_forward_counted(
    a: &SignatureMatrix,
    y: &[f64],
    n0: f64,
    params: &DetectorParams,
) -> Result<(Vec<f64>, OpCount)> {
    let mut ops = OpCount::default();
    let s = run(a, y, n0, params, None, &mut ops)?;
    Ok((s, ops))
}

/// Plain PG with constant step `gamma` and softness `alpha`.
pub fn pg_forward(a: &SignatureMatrix, y: &[f64], n0: f64, gamma: f64, alpha: f64, depth: usize) -> Result<Vec<f64>> {
    stpg_forward(a, y, n0, &DetectorParams::constant(depth, gamma, alpha)?)
}

fn run<T: Tally>(
    a: &SignatureMatrix,
    y: &[f64],
    n0: f64,
    params: &DetectorParams,
    mut tape: Option<&mut Tape<'_>>,
    tally: &mut T,
) -> Result<Vec<f64>> {
    check_len(a.m(), y.len())?;
    let gain = channel_gain(n0, a.k())?;
    let (n, m) = (a.n(), a.m());
    let mut s = vec![0.0; n];
    let mut q = vec![0.0; m];
    let mut g = vec![0.0; n];
    if let Some(tape) = tape.as_deref_mut() {
        tape.gain = gain;
        tape.s.push(s.clone());
    }

    for t in 0..params.depth() {
        a.apply_into(&s, &mut q, tally);
        for (qj, yj) in q.iter_mut().zip(y) {
            *qj = yj - gain * *qj;
        }
        tally.mults(m as u64);
        tally.adds(m as u64);
        a.apply_transpose_into(&q, &mut g, tally);

        let step = params.effective_gamma(t) * gain;
        tally.mults(2);
        let mut r = s.clone();
        for (ri, gi) in r.iter_mut().zip(&g) {
            *ri += step * gi;
        }
        tally.mults(n as u64);
        tally.adds(n as u64);
        for (si, ri) in s.iter_mut().zip(&r) {
            *si = (params.alpha * ri).tanh();
        }
        tally.mults(n as u64);

        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { iteration: t + 1 });
        }
        if let Some(tape) = tape.as_deref_mut() {
            tape.r.push(r);
            tape.residual.push(q.clone());
            tape.corr.push(g.clone());
            tape.s.push(s.clone());
        }
    }
    Ok(s)
}

/// Per-iteration closed-form counts of the reference organisation:
/// additions `(2β⁻¹k + β⁻¹ + 1)·n`, multiplications `(β⁻¹k + β⁻¹ + 2)·n + 1`.
pub fn stpg_op_count(n: usize, m: usize, k: usize) -> Result<OpCount> {
    if n == 0 || m == 0 || k == 0 {
        return Err(Error::InvalidDimension("n, m and k must be positive".into()));
    }
    if !(k * m).is_multiple_of(n) {
        return Err(Error::NonIntegerColumnWeight { m, n, k });
    }
    let (n, m, km) = (n as u64, m as u64, (k * m) as u64);
    Ok(OpCount::new(2 * km + m + n, km + m + 2 * n + 1))
}

/// Elementwise sign with `sign(0) = +1`.
pub fn harden(s: &[f64]) -> Vec<f64> {
    s.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect()
}
