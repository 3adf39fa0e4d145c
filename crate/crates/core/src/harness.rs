//! Monte-Carlo BER sweeps, exhaustive ML reference, and operation audits.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::channel::{bit_errors, channel_gain, generate_batch_with, snr_db_to_linear, Noise};
use crate::detect_bp::{bp_detect, bp_op_count, BpConfig};
use crate::detect_pg::{harden, stpg_forward, stpg_forward_counted, stpg_op_count, DetectorParams};
use crate::error::{Error, Result};
use crate::ops::{sig3, OpCount};
use crate::rng::sub_seed;
use crate::signature::{check_len, gallager_mask, random_pm1_weights, SignatureMatrix, Tally};

/// Largest user count accepted by [`ml_oracle`].
pub const ML_MAX_USERS: usize = 16;

/// Exhaustive maximum-likelihood detection. Ties keep the candidate that
/// comes first in lexicographic order with `+1 < −1`.
pub fn ml_oracle(a: &SignatureMatrix, y: &[f64], n0: f64) -> Result<Vec<f64>> {
    ml_oracle_counted(a, y, n0, &mut ())
}

fn ml_oracle_counted<T: Tally>(a: &SignatureMatrix, y: &[f64], n0: f64, tally: &mut T) -> Result<Vec<f64>> {
    let n = a.n();
    if n > ML_MAX_USERS {
        return Err(Error::TooLarge { n, limit: ML_MAX_USERS });
    }
    check_len(a.m(), y.len())?;
    let gain = channel_gain(n0, a.k())?;
    let mut x = vec![0.0; n];
    let mut ax = vec![0.0; a.m()];
    let mut best = (f64::INFINITY, 0usize);
    for idx in 0..(1usize << n) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = if (idx >> (n - 1 - i)) & 1 == 0 { 1.0 } else { -1.0 };
        }
        a.apply_into(&x, &mut ax, tally);
        let dist: f64 = y
            .iter()
            .zip(&ax)
            .map(|(yj, v)| {
                let r = yj - gain * v;
                r * r
            })
            .sum();
        tally.mults(2 * a.m() as u64);
        tally.adds(2 * a.m() as u64 - 1);
        if dist < best.0 {
            best = (dist, idx);
        }
    }
    Ok((0..n)
        .map(|i| if (best.1 >> (n - 1 - i)) & 1 == 0 { 1.0 } else { -1.0 })
        .collect())
}

/// A detector evaluated by a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorKind {
    /// Untrained projected gradient with a constant step.
    Pg {
        gamma: f64,
        alpha: f64,
        depth: usize,
    },
    /// Trained detector; parameters are looked up per SNR point.
    Stpg,
    Bp(BpConfig),
    Ml,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Pg { .. } => "pg",
            DetectorKind::Stpg => "stpg",
            DetectorKind::Bp(_) => "bp",
            DetectorKind::Ml => "ml",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorKind::Pg { gamma, alpha, depth } => write!(f, "pg(gamma={gamma}, alpha={alpha}, T={depth})"),
            DetectorKind::Stpg => write!(f, "stpg"),
            DetectorKind::Bp(cfg) => write!(f, "bp(T={}, clip={})", cfg.iterations, cfg.llr_clip),
            DetectorKind::Ml => write!(f, "ml"),
        }
    }
}

/// Per-point stopping rule: run until both minimums are met or the cap is hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub min_bits: u64,
    pub min_errors: u64,
    pub max_bits: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            min_bits: 100_000,
            min_errors: 100,
            max_bits: 10_000_000,
        }
    }
}

/// SNR key with 1e-6 dB resolution, used to look up checkpoints.
pub fn snr_key(snr_db: f64) -> i64 {
    (snr_db * 1e6).round() as i64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub snr_db: Vec<f64>,
    pub detectors: Vec<DetectorKind>,
    pub budget: Budget,
    /// Samples drawn per channel batch.
    pub batch_size: usize,
    pub seed: u64,
    pub noise: Noise,
    /// Trained parameters per SNR point, keyed by [`snr_key`].
    pub stpg_params: BTreeMap<i64, DetectorParams>,
    /// Record wall-clock time; disabled for byte-reproducible output.
    pub record_time: bool,
}

impl SweepSpec {
    pub fn new(n: usize, m: usize, k: usize, snr_db: Vec<f64>, detectors: Vec<DetectorKind>) -> Self {
        SweepSpec {
            n,
            m,
            k,
            snr_db,
            detectors,
            budget: Budget::default(),
            batch_size: 100,
            seed: 0,
            noise: Noise::Awgn,
            stpg_params: BTreeMap::new(),
            record_time: false,
        }
    }

    pub fn with_stpg(mut self, snr_db: f64, params: DetectorParams) -> Self {
        self.stpg_params.insert(snr_key(snr_db), params);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.budget;
        if b.min_bits == 0 || b.min_errors == 0 || b.max_bits == 0 || self.batch_size == 0 {
            return Err(Error::Config("sweep budgets and batch size must be positive".into()));
        }
        if self.detectors.contains(&DetectorKind::Ml) && self.n > ML_MAX_USERS {
            return Err(Error::TooLarge {
                n: self.n,
                limit: ML_MAX_USERS,
            });
        }
        if self.detectors.contains(&DetectorKind::Stpg) {
            for &snr in &self.snr_db {
                if !self.stpg_params.contains_key(&snr_key(snr)) {
                    return Err(Error::MissingCheckpoint { snr_db: snr });
                }
            }
        }
        Ok(())
    }

    /// `key = value` lines describing the sweep.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}", self.n);
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "k = {}", self.k);
        let snrs: Vec<String> = self.snr_db.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "snr_db = {}", snrs.join(","));
        let dets: Vec<String> = self.detectors.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "detectors = {}", dets.join(";"));
        let _ = writeln!(out, "min_bits = {}", self.budget.min_bits);
        let _ = writeln!(out, "min_errors = {}", self.budget.min_errors);
        let _ = writeln!(out, "max_bits = {}", self.budget.max_bits);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "noiseless = {}", self.noise == Noise::Noiseless);
        for (key, params) in &self.stpg_params {
            let gammas: Vec<String> = params.gamma_raw.iter().map(|g| format!("{g:?}")).collect();
            let _ = writeln!(
                out,
                "stpg[{}] = alpha {:?}; gamma_raw {}",
                *key as f64 / 1e6,
                params.alpha,
                gammas.join(",")
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub detector: String,
    pub snr_db: f64,
    pub bits: u64,
    pub errors: u64,
    pub ber: f64,
    /// Half-width of the 95% normal-approximation interval.
    pub ci95: f64,
    /// Operations of one detection call.
    pub ops: OpCount,
    pub seconds: f64,
    /// The bit cap was reached before the error minimum.
    pub exhausted: bool,
}

impl SweepRow {
    /// Standard error of the BER estimate.
    pub fn std_err(&self) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        (self.ber * (1.0 - self.ber) / self.bits as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "detector,snr_db,bits,errors,ber,ci95,adds,mults,seconds";

impl SweepResult {
    pub fn row(&self, detector: &str, snr_db: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.detector == detector && snr_key(r.snr_db) == snr_key(snr_db))
    }

    /// `(snr_db, ber)` points of one detector, in sweep order.
    pub fn curve(&self, detector: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.detector == detector)
            .map(|r| (r.snr_db, r.ber))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6e},{:.6e},{},{},{:.3}",
                r.detector, r.snr_db, r.bits, r.errors, r.ber, r.ci95, r.ops.adds, r.ops.mults, r.seconds
            );
        }
        out
    }
}

fn detect_one(
    kind: &DetectorKind,
    a: &SignatureMatrix,
    y: &[f64],
    n0: f64,
    stpg: Option<&DetectorParams>,
) -> Result<Vec<f64>> {
    match kind {
        DetectorKind::Pg { gamma, alpha, depth } => {
            let params = DetectorParams::constant(*depth, *gamma, *alpha)?;
            Ok(harden(&stpg_forward(a, y, n0, &params)?))
        }
        DetectorKind::Stpg => {
            let params = stpg.ok_or(Error::MissingCheckpoint { snr_db: f64::NAN })?;
            Ok(harden(&stpg_forward(a, y, n0, params)?))
        }
        DetectorKind::Bp(cfg) => Ok(bp_detect(a, y, n0, cfg)?.x_hat),
        DetectorKind::Ml => ml_oracle(a, y, n0),
    }
}

fn count_ops(
    kind: &DetectorKind,
    a: &SignatureMatrix,
    y: &[f64],
    n0: f64,
    stpg: Option<&DetectorParams>,
) -> Result<OpCount> {
    Ok(match kind {
        DetectorKind::Pg { gamma, alpha, depth } => {
            stpg_forward_counted(a, y, n0, &DetectorParams::constant(*depth, *gamma, *alpha)?)?.1
        }
        DetectorKind::Stpg => {
            let params = stpg.ok_or(Error::MissingCheckpoint { snr_db: f64::NAN })?;
            stpg_forward_counted(a, y, n0, params)?.1
        }
        DetectorKind::Bp(cfg) => bp_detect(a, y, n0, cfg)?.ops,
        DetectorKind::Ml => {
            let mut ops = OpCount::default();
            ml_oracle_counted(a, y, n0, &mut ops)?;
            ops
        }
    })
}

/// Seed of batch `batch` at SNR point `point`; shared by all detectors.
pub fn sweep_batch_seed(seed: u64, point: usize, batch: usize) -> u64 {
    sub_seed(sub_seed(seed, point as u64), batch as u64)
}

/// Runs every detector at every SNR point on shared channel realisations.
/// A detector stops consuming batches once its budget is met, so each
/// detector sees a prefix of the same stream.
pub fn run_sweep(a: &SignatureMatrix, spec: &SweepSpec) -> Result<SweepResult> {
    if (a.n(), a.m(), a.k()) != (spec.n, spec.m, spec.k) {
        return Err(Error::InvalidDimension(format!(
            "sweep is for n={}, m={}, k={} but the signature is n={}, m={}, k={}",
            spec.n,
            spec.m,
            spec.k,
            a.n(),
            a.m(),
            a.k()
        )));
    }
    spec.validate()?;
    let budget = spec.budget;
    let mut result = SweepResult::default();

    for (point, &snr_db) in spec.snr_db.iter().enumerate() {
        let n0 = snr_db_to_linear(snr_db);
        let stpg = spec.stpg_params.get(&snr_key(snr_db));
        let mut rows: Vec<SweepRow> = Vec::with_capacity(spec.detectors.len());
        for kind in &spec.detectors {
            let probe = vec![0.0; a.m()];
            rows.push(SweepRow {
                detector: kind.name().to_string(),
                snr_db,
                bits: 0,
                errors: 0,
                ber: 0.0,
                ci95: 0.0,
                ops: count_ops(kind, a, &probe, n0, stpg)?,
                seconds: 0.0,
                exhausted: false,
            });
        }
        let mut done = vec![false; spec.detectors.len()];

        let mut batch_index = 0;
        while done.iter().any(|d| !d) {
            let seed = sweep_batch_seed(spec.seed, point, batch_index);
            let batch = generate_batch_with(a, n0, spec.batch_size, seed, spec.noise)?;
            batch_index += 1;

            for (d, kind) in spec.detectors.iter().enumerate() {
                if done[d] {
                    continue;
                }
                let started = Instant::now();
                let errors: Vec<Result<usize>> = (0..batch.bs)
                    .into_par_iter()
                    .map(|s| {
                        let x_hat = detect_one(kind, a, batch.y_sample(s), n0, stpg)?;
                        bit_errors(batch.x_sample(s), &x_hat)
                    })
                    .collect();
                let row = &mut rows[d];
                for e in errors {
                    row.errors += e? as u64;
                }
                row.bits += batch.bits() as u64;
                if spec.record_time {
                    row.seconds += started.elapsed().as_secs_f64();
                }
                if row.bits >= budget.min_bits && row.errors >= budget.min_errors {
                    done[d] = true;
                } else if row.bits >= budget.max_bits {
                    row.exhausted = true;
                    done[d] = true;
                    warn!(
                        "{} at {snr_db} dB: bit cap reached with {} errors",
                        row.detector, row.errors
                    );
                }
            }
        }

        for mut row in rows {
            row.ber = row.errors as f64 / row.bits as f64;
            row.ci95 = if row.ber > 0.0 { 1.96 * row.std_err() } else { 0.0 };
            info!(
                "{:>4} {:>6.2} dB: BER {:.3e} ({} / {})",
                row.detector, snr_db, row.ber, row.errors, row.bits
            );
            result.rows.push(row);
        }
    }
    Ok(result)
}

/// SNR (dB) at which a BER curve crosses `target`, by linear interpolation
/// of `log10(BER)` between the first bracketing pair of points. Points
/// must be sorted by SNR.
pub fn snr_at_ber(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    curve.windows(2).find_map(|w| {
        let ((s0, b0), (s1, b1)) = (w[0], w[1]);
        if b0 >= target && b1 <= target && b0 > 0.0 && b1 > 0.0 {
            if b0 == b1 {
                return Some(s0);
            }
            let (l0, l1, lt) = (b0.log10(), b1.log10(), target.log10());
            Some(s0 + (s1 - s0) * (l0 - lt) / (l0 - l1))
        } else {
            None
        }
    })
}

/// Closed-form and instrumented operation counts for one `(n, m, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpAudit {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub stpg_closed: OpCount,
    pub bp_closed: OpCount,
    /// One STPG iteration as implemented.
    pub stpg_measured: OpCount,
    /// One BP round as implemented.
    pub bp_measured: OpCount,
}

/// Evaluates the closed forms and instruments one detection call of each
/// detector on a random instance (built from `seed`).
pub fn audit_op_counts(n: usize, m: usize, k: usize, seed: u64) -> Result<OpAudit> {
    let stpg_closed = stpg_op_count(n, m, k)?;
    let bp_closed = bp_op_count(n, m, k)?;
    let a = random_pm1_weights(std::sync::Arc::new(gallager_mask(m, n, k, seed)?), seed);
    let y = vec![0.5; m];
    let params = DetectorParams::initial(1)?;
    let (_, stpg_measured) = stpg_forward_counted(&a, &y, 10.0, &params)?;
    let bp_measured = bp_detect(&a, &y, 10.0, &BpConfig::new(1))?.ops_per_round;
    Ok(OpAudit {
        n,
        m,
        k,
        stpg_closed,
        bp_closed,
        stpg_measured,
        bp_measured,
    })
}

/// Text table with one column per audited `k`.
pub fn format_audit(audits: &[OpAudit]) -> String {
    let mut out = String::new();
    let Some(first) = audits.first() else {
        return out;
    };
    let _ = writeln!(
        out,
        "operations per iteration, n={} m={} beta={:.3}",
        first.n,
        first.m,
        first.n as f64 / first.m as f64
    );
    let _ = write!(out, "{:<24}{:<44}", "", "closed form");
    for a in audits {
        let _ = write!(out, "{:>10}", format!("k={}", a.k));
    }
    out.push('\n');
    type Pick = fn(&OpAudit) -> u64;
    let rows: [(&str, &str, Pick); 4] = [
        ("STPG additions", "(2k/beta + 1/beta + 1)n", |a| a.stpg_closed.adds),
        ("BP additions", "(k*2^k + 2)kn/beta", |a| a.bp_closed.adds),
        ("STPG multiplications", "(k/beta + 1/beta + 2)n + 1", |a| {
            a.stpg_closed.mults
        }),
        ("BP multiplications", "((2k+3)*2^k + 2k/beta)kn/beta", |a| {
            a.bp_closed.mults
        }),
    ];
    for (name, formula, pick) in rows {
        let _ = write!(out, "{name:<24}{formula:<44}");
        for a in audits {
            let _ = write!(out, "{:>10}", sig3(pick(a)));
        }
        out.push('\n');
    }
    let measured: [(&str, Pick); 4] = [
        ("STPG additions", |a| a.stpg_measured.adds),
        ("BP additions", |a| a.bp_measured.adds),
        ("STPG multiplications", |a| a.stpg_measured.mults),
        ("BP multiplications", |a| a.bp_measured.mults),
    ];
    for (name, pick) in measured {
        let _ = write!(out, "{name:<24}{:<44}", "instrumented");
        for a in audits {
            let _ = write!(out, "{:>10}", pick(a));
        }
        out.push('\n');
    }
    out
}

/// CSV with exact closed-form values, their 3-figure rendering, and the
/// instrumented counts.
pub fn audit_csv(audits: &[OpAudit]) -> String {
    let mut out = String::from("n,m,k,detector,op,closed_form,closed_form_3sf,instrumented\n");
    for a in audits {
        for (det, op, closed, measured) in [
            ("stpg", "adds", a.stpg_closed.adds, a.stpg_measured.adds),
            ("stpg", "mults", a.stpg_closed.mults, a.stpg_measured.mults),
            ("bp", "adds", a.bp_closed.adds, a.bp_measured.adds),
            ("bp", "mults", a.bp_closed.mults, a.bp_measured.mults),
        ] {
            let _ = writeln!(
                out,
                "{},{},{},{det},{op},{closed},{},{measured}",
                a.n,
                a.m,
                a.k,
                sig3(closed)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::signature::MaskMatrix;

    fn identity2() -> SignatureMatrix {
        SignatureMatrix::ones(Arc::new(MaskMatrix::regular(2, 2, 1, 0, vec![(0, 0), (1, 1)]).unwrap()))
    }

    #[test]
    fn ml_hand_instance() {
        let x = ml_oracle(&identity2(), &[0.9, -0.2], 1.0).unwrap();
        assert_eq!(x, vec![1.0, -1.0]);
    }

    #[test]
    fn ml_tie_prefers_plus_one() {
        let x = ml_oracle(&identity2(), &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
    }

    #[test]
    fn ml_recovers_noiseless() {
        let a = random_pm1_weights(Arc::new(gallager_mask(10, 12, 6, 4).unwrap()), 4);
        let batch = generate_batch_with(&a, 4.0, 5, 2, Noise::Noiseless).unwrap();
        for s in 0..5 {
            let x = ml_oracle(&a, batch.y_sample(s), 4.0).unwrap();
            let gain = (4.0f64 / 6.0).sqrt();
            let ax = a.apply(&x).unwrap();
            let dist: f64 = batch
                .y_sample(s)
                .iter()
                .zip(ax)
                .map(|(y, v)| (y - gain * v).powi(2))
                .sum();
            assert!(dist < 1e-20);
        }
    }

    #[test]
    fn ml_rejects_large_systems() {
        let a = random_pm1_weights(Arc::new(gallager_mask(17, 17, 1, 4).unwrap()), 4);
        assert!(matches!(ml_oracle(&a, &[0.0; 17], 1.0), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn crossing_interpolation() {
        let curve = [(0.0, 1e-1), (2.0, 1e-3), (4.0, 1e-5)];
        assert!((snr_at_ber(&curve, 1e-2).unwrap() - 1.0).abs() < 1e-12);
        assert!((snr_at_ber(&curve, 1e-4).unwrap() - 3.0).abs() < 1e-12);
        assert!(snr_at_ber(&curve, 1.0).is_none());
    }

    #[test]
    fn missing_checkpoint() {
        let a = random_pm1_weights(Arc::new(gallager_mask(4, 4, 2, 4).unwrap()), 4);
        let spec = SweepSpec::new(4, 4, 2, vec![3.0], vec![DetectorKind::Stpg]);
        assert!(matches!(run_sweep(&a, &spec), Err(Error::MissingCheckpoint { .. })));
    }

    #[test]
    fn noiseless_sweep_is_error_free() {
        for (n, detector) in [(24, DetectorKind::Bp(BpConfig::new(10))), (12, DetectorKind::Ml)] {
            let a = random_pm1_weights(Arc::new(gallager_mask(n, n, 6, 4).unwrap()), 4);
            let mut spec = SweepSpec::new(n, n, 6, vec![20.0], vec![detector]);
            spec.noise = Noise::Noiseless;
            spec.budget = Budget {
                min_bits: 100 * n as u64,
                min_errors: 1,
                max_bits: 100 * n as u64,
            };
            let result = run_sweep(&a, &spec).unwrap();
            let row = &result.rows[0];
            assert_eq!(row.errors, 0, "{}", row.detector);
            assert_eq!(row.bits, 100 * n as u64);
            assert!(row.exhausted);
            let csv = result.to_csv();
            assert!(csv.starts_with(CSV_HEADER));
            assert_eq!(csv.lines().count(), 2);
        }
    }
}
