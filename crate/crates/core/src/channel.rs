//! BPSK transmission over the normalised AWGN uplink `y = √(n0/k)·A·x + w₀`.

use crate::error::{Error, Result};
use crate::rng::{SimRng, STREAM_NOISE, STREAM_SYMBOLS};
use crate::signature::{check_len, SignatureMatrix};

pub fn snr_db_to_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Whether [`generate_batch_with`] adds channel noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Noise {
    #[default]
    Awgn,
    /// Test mode: `y = √(n0/k)·A·x` exactly.
    Noiseless,
}

/// `bs` independent channel uses. Both matrices are stored sample-major:
/// sample `s` occupies `x[s*n..(s+1)*n]` and `y[s*m..(s+1)*m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub bs: usize,
    pub n0: f64,
    pub k: usize,
    pub seed: u64,
}

impl Batch {
    pub fn x_sample(&self, s: usize) -> &[f64] {
        &self.x[s * self.n..(s + 1) * self.n]
    }

    pub fn y_sample(&self, s: usize) -> &[f64] {
        &self.y[s * self.m..(s + 1) * self.m]
    }

    pub fn bits(&self) -> usize {
        self.n * self.bs
    }
}

/// `√(n0/k)`, the amplitude applied to `A x`.
pub fn channel_gain(n0: f64, k: usize) -> Result<f64> {
    check_snr(n0)?;
    Ok((n0 / k as f64).sqrt())
}

pub(crate) fn check_snr(n0: f64) -> Result<()> {
    if n0 > 0.0 && n0.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSnr(n0))
    }
}

pub fn generate_batch(a: &SignatureMatrix, n0: f64, bs: usize, seed: u64) -> Result<Batch> {
    generate_batch_with(a, n0, bs, seed, Noise::Awgn)
}

/// Symbols and noise come from separate streams of `seed`, so noisy and
/// noiseless batches with the same seed carry the same `x`.
pub fn generate_batch_with(a: &SignatureMatrix, n0: f64, bs: usize, seed: u64, noise: Noise) -> Result<Batch> {
    let gain = channel_gain(n0, a.k())?;
    if bs == 0 {
        return Err(Error::InvalidDimension("batch size must be positive".into()));
    }
    let (n, m) = (a.n(), a.m());
    let mut symbols = SimRng::stream(seed, STREAM_SYMBOLS);
    let x: Vec<f64> = (0..n * bs).map(|_| symbols.bpsk()).collect();

    let mut y = vec![0.0; m * bs];
    for (xs, ys) in x.chunks_exact(n).zip(y.chunks_exact_mut(m)) {
        a.apply_into(xs, ys, &mut ());
        for v in ys.iter_mut() {
            *v *= gain;
        }
    }
    if noise == Noise::Awgn {
        let mut rng = SimRng::stream(seed, STREAM_NOISE);
        for v in &mut y {
            *v += rng.normal();
        }
    }
    Ok(Batch {
        x,
        y,
        n,
        m,
        bs,
        n0,
        k: a.k(),
        seed,
    })
}

pub fn bit_errors(x_true: &[f64], x_hat: &[f64]) -> Result<usize> {
    check_len(x_true.len(), x_hat.len())?;
    Ok(x_true.iter().zip(x_hat).filter(|(a, b)| a != b).count())
}

/// Fraction of mismatched ±1 entries.
pub fn ber(x_true: &[f64], x_hat: &[f64]) -> Result<f64> {
    let errors = bit_errors(x_true, x_hat)?;
    if x_true.is_empty() {
        return Ok(0.0);
    }
    Ok(errors as f64 / x_true.len() as f64)
}
