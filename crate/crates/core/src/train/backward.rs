//! Reverse-mode gradients of the mean squared error through an unrolled
//! detector run.
//!
//! Walking the tape backwards, iteration `t` contributes
//!
//! ```text
//! d_t      = s̄_{t+1} ⊙ (1 − s_{t+1}²)
//! ᾱ       += ⟨d_t, r_t⟩
//! r̄_t      = α·d_t
//! γ̄_t      = c·⟨r̄_t, g_t⟩            (g_t = Aᵀe_t)
//! ḡ_t      = γ_t·c·r̄_t
//! ē_t      = A·ḡ_t                    (e_t = y − c·A·s_t)
//! s̄_t      = r̄_t − c·Aᵀē_t
//! Ā_{j,i} += e_t[j]·ḡ_t[i] − c·ē_t[j]·s_t[i]
//! ```
//!
//! and the received signal collects `ȳ = Σ_t ē_t`. When the channel itself
//! is differentiated (`y = c·A·x + w`), `Ā_{j,i} += c·ȳ[j]·x[i]`.

use rayon::prelude::*;

use crate::channel::Batch;
use crate::detect_pg::{stpg_forward_recorded, DetectorParams, Tape};
use crate::error::{Error, Result};
use crate::signature::SignatureMatrix;

/// Which signature-weight derivatives to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightGrad {
    /// Detector parameters only.
    #[default]
    Off,
    /// Through the detector's use of `A` with `y` held fixed.
    DetectorOnly,
    /// Through the detector and through `y = c·A·x + w`.
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub d_gamma_raw: Vec<f64>,
    pub d_alpha: f64,
    /// Edge-aligned, present when weight gradients were requested.
    pub d_weights: Option<Vec<f64>>,
}

impl Gradients {
    fn zeros(depth: usize, edges: Option<usize>) -> Self {
        Gradients {
            d_gamma_raw: vec![0.0; depth],
            d_alpha: 0.0,
            d_weights: edges.map(|e| vec![0.0; e]),
        }
    }

    fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.d_gamma_raw.iter_mut().zip(&other.d_gamma_raw) {
            *a += b;
        }
        self.d_alpha += other.d_alpha;
        if let (Some(a), Some(b)) = (self.d_weights.as_mut(), other.d_weights.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        self.d_gamma_raw.iter_mut().for_each(|g| *g *= factor);
        self.d_alpha *= factor;
        if let Some(w) = self.d_weights.as_mut() {
            w.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_gamma_raw.iter().all(|g| g.is_finite())
            && self.d_alpha.is_finite()
            && self.d_weights.as_ref().is_none_or(|w| w.iter().all(|g| g.is_finite()))
    }
}

/// Mean over all entries of `(x_hat − x)²`.
pub fn mse_loss(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Loss `mse_loss(s_T, x_true)` and its gradient for one recorded run.
pub fn backward(
    tape: &Tape<'_>,
    params: &DetectorParams,
    x_true: &[f64],
    mode: WeightGrad,
) -> Result<(f64, Gradients)> {
    let a = tape.a;
    let (n, m) = (a.n(), a.m());
    if params.depth() != tape.depth() {
        return Err(Error::TapeMismatch(format!(
            "tape has {} iterations, parameters {}",
            tape.depth(),
            params.depth()
        )));
    }
    if x_true.len() != n || tape.output().len() != n || tape.y.len() != m {
        return Err(Error::TapeMismatch(format!(
            "expected {n} users and {m} chips, got x of length {}",
            x_true.len()
        )));
    }

    let c = tape.gain;
    let alpha = params.alpha;
    let s_out = tape.output();
    let loss = mse_loss(s_out, x_true)?;
    let want_weights = mode != WeightGrad::Off;
    let mut grads = Gradients::zeros(params.depth(), want_weights.then_some(a.mask().num_edges()));

    let inv_n = 1.0 / n as f64;
    let mut s_bar: Vec<f64> = s_out.iter().zip(x_true).map(|(s, x)| 2.0 * (s - x) * inv_n).collect();
    let mut r_bar = vec![0.0; n];
    let mut g_bar = vec![0.0; n];
    let mut e_bar = vec![0.0; m];
    let mut back = vec![0.0; n];
    let mut y_bar = vec![0.0; m];
    let edges = a.mask().edges();

    for t in (0..params.depth()).rev() {
        let s_next = &tape.s[t + 1];
        let r = &tape.r[t];
        let mut d_alpha = 0.0;
        for i in 0..n {
            let d = s_bar[i] * (1.0 - s_next[i] * s_next[i]);
            d_alpha += d * r[i];
            r_bar[i] = alpha * d;
        }
        grads.d_alpha += d_alpha;

        let gamma = params.effective_gamma(t);
        let d_gamma = c * r_bar.iter().zip(&tape.corr[t]).map(|(a, b)| a * b).sum::<f64>();
        grads.d_gamma_raw[t] = 2.0 * params.gamma_raw[t] * d_gamma;

        let scale = gamma * c;
        for (gb, rb) in g_bar.iter_mut().zip(&r_bar) {
            *gb = scale * rb;
        }
        a.apply_into(&g_bar, &mut e_bar, &mut ());
        a.apply_transpose_into(&e_bar, &mut back, &mut ());

        if let Some(dw) = grads.d_weights.as_mut() {
            let resid = &tape.residual[t];
            let s_t = &tape.s[t];
            for (e, &(j, i)) in edges.iter().enumerate() {
                dw[e] += resid[j] * g_bar[i] - c * e_bar[j] * s_t[i];
            }
        }
        for (yb, eb) in y_bar.iter_mut().zip(&e_bar) {
            *yb += eb;
        }
        for i in 0..n {
            s_bar[i] = r_bar[i] - c * back[i];
        }
    }

    if mode == WeightGrad::EndToEnd {
        let dw = grads.d_weights.as_mut().expect("weights requested");
        for (e, &(j, i)) in edges.iter().enumerate() {
            dw[e] += c * y_bar[j] * x_true[i];
        }
    }
    Ok((loss, grads))
}

/// Mean loss and mean gradient over a batch. Samples are processed in
/// parallel; the reduction runs sequentially in sample order.
pub fn batch_gradients(
    a: &SignatureMatrix,
    batch: &Batch,
    params: &DetectorParams,
    mode: WeightGrad,
) -> Result<(f64, Gradients)> {
    let per_sample: Vec<Result<(f64, Gradients)>> = (0..batch.bs)
        .into_par_iter()
        .map(|s| {
            let tape = stpg_forward_recorded(a, batch.y_sample(s), batch.n0, params)?;
            backward(&tape, params, batch.x_sample(s), mode)
        })
        .collect();

    let edges = (mode != WeightGrad::Off).then_some(a.mask().num_edges());
    let mut total = Gradients::zeros(params.depth(), edges);
    let mut loss = 0.0;
    for item in per_sample {
        let (l, g) = item?;
        loss += l;
        total.accumulate(&g);
    }
    let inv = 1.0 / batch.bs as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::detect_pg::stpg_forward;
    use crate::signature::MaskMatrix;

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0; 4], &[1.0, -1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mse_loss(&[0.5], &[1.0]).unwrap(), 0.25);
        assert!(mse_loss(&[0.5], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn alpha_gradient_vanishes_without_steps() {
        let a = SignatureMatrix::ones(Arc::new(MaskMatrix::regular(1, 1, 1, 0, vec![(0, 0)]).unwrap()));
        let params = DetectorParams::new(vec![0.0], 2.0).unwrap();
        let y = [1.3];
        let tape = stpg_forward_recorded(&a, &y, 10.0, &params).unwrap();
        let (loss, g) = backward(&tape, &params, &[1.0], WeightGrad::Off).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(g.d_alpha, 0.0);
        assert_eq!(g.d_gamma_raw, vec![0.0]);
    }

    #[test]
    fn scalar_gamma_derivative_matches_central_difference() {
        let a = SignatureMatrix::ones(Arc::new(MaskMatrix::regular(1, 1, 1, 0, vec![(0, 0)]).unwrap()));
        let y = [10f64.sqrt()];
        let x = [1.0];
        let params = DetectorParams::initial(1).unwrap();
        let tape = stpg_forward_recorded(&a, &y, 10.0, &params).unwrap();
        let (_, g) = backward(&tape, &params, &x, WeightGrad::Off).unwrap();

        let h = 1e-5;
        let loss_at = |raw: f64| {
            let p = DetectorParams::new(vec![raw], 2.0).unwrap();
            mse_loss(&stpg_forward(&a, &y, 10.0, &p).unwrap(), &x).unwrap()
        };
        let raw = params.gamma_raw[0];
        let fd = (loss_at(raw + h) - loss_at(raw - h)) / (2.0 * h);
        assert!((fd - g.d_gamma_raw[0]).abs() < 1e-6, "fd {fd} vs {}", g.d_gamma_raw[0]);
    }

    #[test]
    fn tape_mismatch_is_reported() {
        let a = SignatureMatrix::ones(Arc::new(MaskMatrix::regular(1, 1, 1, 0, vec![(0, 0)]).unwrap()));
        let p2 = DetectorParams::initial(2).unwrap();
        let p3 = DetectorParams::initial(3).unwrap();
        let y = [0.4];
        let tape = stpg_forward_recorded(&a, &y, 2.0, &p2).unwrap();
        assert!(matches!(
            backward(&tape, &p3, &[1.0], WeightGrad::Off),
            Err(Error::TapeMismatch(_))
        ));
        assert!(matches!(
            backward(&tape, &p2, &[1.0, 1.0], WeightGrad::Off),
            Err(Error::TapeMismatch(_))
        ));
    }
}
