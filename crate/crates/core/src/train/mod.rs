//! Training of the unrolled detector.
//!
//! Training is incremental: generation `t` optimises the first `t` step
//! sizes and the softness as if the detector had `t` iterations, starting
//! from the values reached by generation `t − 1`. Every mini-batch is freshly
//! drawn from the channel. In joint mode the edge weights of the signature
//! matrix are trained as well; before each mini-batch the weights are
//! re-masked and rescaled to `‖A‖_F² = km`.

mod adam;
mod backward;

use std::sync::Arc;

use log::{debug, info, warn};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::{backward, batch_gradients, mse_loss, Gradients, WeightGrad};

use crate::channel::{generate_batch, snr_db_to_linear};
use crate::detect_pg::DetectorParams;
use crate::error::{Error, Result};
use crate::rng::sub_seed;
use crate::signature::{MaskMatrix, SignatureMatrix};

/// How the Frobenius rescaling enters the weight gradient in joint mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormGrad {
    /// Gradient taken at the rescaled matrix; the rescaling is a projection.
    #[default]
    Projected,
    /// Gradient propagated through the rescaling.
    Differentiated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Unrolled depth `T`.
    pub depth: usize,
    /// Mini-batches per generation.
    pub batches: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub snr_db: f64,
    pub joint: bool,
    pub seed: u64,
    /// Differentiate the weights through `y = c·A·x + w` as well.
    pub channel_gradient: bool,
    pub norm_grad: NormGrad,
    /// Upper bound on `depth · batches · batch_size`.
    pub sample_budget: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            depth: 30,
            batches: 100,
            batch_size: 200,
            adam: AdamConfig::default(),
            snr_db: 10.0,
            joint: false,
            seed: 0,
            channel_gradient: true,
            norm_grad: NormGrad::Projected,
            sample_budget: 1_000_000_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("depth, batches and batch size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite".into()));
        }
        let work = (self.depth as u64)
            .saturating_mul(self.batches as u64)
            .saturating_mul(self.batch_size as u64);
        if work > self.sample_budget {
            return Err(Error::Config(format!(
                "depth*batches*batch_size = {work} exceeds the sample budget {}",
                self.sample_budget
            )));
        }
        Ok(())
    }

    /// Seed of mini-batch `batch` in generation `generation` (1-based).
    pub fn batch_seed(&self, generation: usize, batch: usize) -> u64 {
        sub_seed(sub_seed(self.seed, generation as u64), batch as u64)
    }
}

/// Training outcome with a per-mini-batch loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub params: DetectorParams,
    pub losses: Vec<f64>,
    pub monitor: LossMonitor,
}

/// Snapshot handed to joint-training observers after every optimiser step.
pub struct JointStep<'a> {
    pub generation: usize,
    pub batch: usize,
    pub loss: f64,
    /// The live signature matrix after re-masking and rescaling.
    pub signature: &'a SignatureMatrix,
    pub params: &'a DetectorParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointReport {
    pub signature: SignatureMatrix,
    pub params: DetectorParams,
    pub losses: Vec<f64>,
    pub monitor: LossMonitor,
}

/// Trainable parameter count of joint training: `km + T + 1`.
pub fn joint_parameter_count(mask: &MaskMatrix, depth: usize) -> usize {
    mask.num_edges() + depth + 1
}

/// Soft divergence alarm: a checkpoint is flagged when the loss averaged
/// over the last [`LossMonitor::WINDOW`] mini-batches exceeds its running
/// minimum by more than 10%.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossMonitor {
    recent: Vec<f64>,
    best: Option<f64>,
    pub checkpoints: usize,
    pub flagged: usize,
}

impl LossMonitor {
    pub const WINDOW: usize = 20;

    pub fn record(&mut self, loss: f64) {
        self.recent.push(loss);
        if self.recent.len() > Self::WINDOW {
            self.recent.remove(0);
        }
        if self.recent.len() < Self::WINDOW {
            return;
        }
        let smoothed = self.recent.iter().sum::<f64>() / Self::WINDOW as f64;
        let best = self.best.map_or(smoothed, |b| b.min(smoothed));
        self.best = Some(best);
        self.checkpoints += 1;
        if smoothed > 1.1 * best {
            self.flagged += 1;
        }
    }

    /// True when at least 90% of checkpoints were unflagged.
    pub fn healthy(&self) -> bool {
        self.flagged * 10 <= self.checkpoints
    }
}

fn check_loss(loss: f64, grads: &Gradients, generation: usize, batch: usize) -> Result<()> {
    if loss.is_finite() && grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            generation,
            batch,
            detail: format!("loss = {loss}, gradients finite = {}", grads.is_finite()),
        })
    }
}

/// Incremental training of the detector parameters on a fixed signature.
pub fn incremental_train(a: &SignatureMatrix, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.joint {
        return Err(Error::Config("incremental_train runs with joint = false".into()));
    }
    cfg.validate()?;
    let n0 = snr_db_to_linear(cfg.snr_db);
    let mut params = DetectorParams::initial(cfg.depth)?;
    let mut losses = Vec::with_capacity(cfg.depth * cfg.batches);
    let mut monitor = LossMonitor::default();

    for generation in 1..=cfg.depth {
        let mut state = AdamState::new(generation + 1);
        let mut flat = vec![0.0; generation + 1];
        for b in 0..cfg.batches {
            let active = params.truncated(generation)?;
            let batch = generate_batch(a, n0, cfg.batch_size, cfg.batch_seed(generation, b))?;
            let (loss, grads) = batch_gradients(a, &batch, &active, WeightGrad::Off)?;
            check_loss(loss, &grads, generation, b)?;

            flat[..generation].copy_from_slice(&active.gamma_raw);
            flat[generation] = active.alpha;
            let mut g = grads.d_gamma_raw.clone();
            g.push(grads.d_alpha);
            adam_step(&mut flat, &g, &mut state, &cfg.adam)?;
            params.gamma_raw[..generation].copy_from_slice(&flat[..generation]);
            params.alpha = flat[generation];

            losses.push(loss);
            monitor.record(loss);
        }
        debug!(
            "generation {generation}: loss {:.6}, alpha {:.4}",
            losses.last().copied().unwrap_or(f64::NAN),
            params.alpha
        );
    }
    if !monitor.healthy() {
        warn!(
            "training loss rose above its running minimum at {}/{} checkpoints",
            monitor.flagged, monitor.checkpoints
        );
    }
    info!("trained {} iterations at {} dB", cfg.depth, cfg.snr_db);
    Ok(TrainReport {
        params,
        losses,
        monitor,
    })
}

/// Re-masks and rescales raw edge weights (masking is implicit in the
/// edge-aligned storage).
fn project(mask: &Arc<MaskMatrix>, raw: &[f64]) -> Result<SignatureMatrix> {
    SignatureMatrix::new(Arc::clone(mask), raw.to_vec())?.normalize()
}

/// Joint training of the signature weights and the detector parameters.
pub fn joint_train(mask: Arc<MaskMatrix>, cfg: &TrainConfig) -> Result<JointReport> {
    joint_train_with(mask, cfg, |_| {})
}

/// [`joint_train`] with an observer called after every optimiser step.
pub fn joint_train_with<F>(mask: Arc<MaskMatrix>, cfg: &TrainConfig, mut observe: F) -> Result<JointReport>
where
    F: FnMut(&JointStep<'_>),
{
    if !cfg.joint {
        return Err(Error::Config("joint_train runs with joint = true".into()));
    }
    cfg.validate()?;
    let n0 = snr_db_to_linear(cfg.snr_db);
    let edges = mask.num_edges();
    let km = (mask.k() * mask.m()) as f64;
    let mode = if cfg.channel_gradient {
        WeightGrad::EndToEnd
    } else {
        WeightGrad::DetectorOnly
    };

    let mut params = DetectorParams::initial(cfg.depth)?;
    let mut raw = vec![1.0; edges];
    let mut losses = Vec::with_capacity(cfg.depth * cfg.batches);
    let mut monitor = LossMonitor::default();

    for generation in 1..=cfg.depth {
        let count = generation + 1 + edges;
        let mut state = AdamState::new(count);
        let mut flat = vec![0.0; count];
        for b in 0..cfg.batches {
            let a = project(&mask, &raw)?;
            let raw_norm = SignatureMatrix::new(Arc::clone(&mask), raw.clone())?.frobenius_norm();
            raw.copy_from_slice(a.weights());

            let active = params.truncated(generation)?;
            let batch = generate_batch(&a, n0, cfg.batch_size, cfg.batch_seed(generation, b))?;
            let (loss, grads) = batch_gradients(&a, &batch, &active, mode)?;
            check_loss(loss, &grads, generation, b)?;

            let mut dw = grads.d_weights.clone().expect("weight gradients requested");
            if cfg.norm_grad == NormGrad::Differentiated {
                let inner: f64 = dw.iter().zip(a.weights()).map(|(g, w)| g * w).sum();
                let scale = km.sqrt() / raw_norm;
                for (g, w) in dw.iter_mut().zip(a.weights()) {
                    *g = scale * (*g - w * inner / km);
                }
            }

            flat[..generation].copy_from_slice(&active.gamma_raw);
            flat[generation] = active.alpha;
            flat[generation + 1..].copy_from_slice(&raw);
            let mut g = grads.d_gamma_raw.clone();
            g.push(grads.d_alpha);
            g.extend_from_slice(&dw);
            adam_step(&mut flat, &g, &mut state, &cfg.adam)?;
            params.gamma_raw[..generation].copy_from_slice(&flat[..generation]);
            params.alpha = flat[generation];
            raw.copy_from_slice(&flat[generation + 1..]);

            let live = project(&mask, &raw).map_err(|e| match e {
                Error::ZeroMatrix => {
                    warn!("joint training drove every weight to zero (generation {generation}, batch {b})");
                    Error::ZeroMatrix
                }
                other => other,
            })?;
            observe(&JointStep {
                generation,
                batch: b,
                loss,
                signature: &live,
                params: &params,
            });
            losses.push(loss);
            monitor.record(loss);
        }
        debug!(
            "joint generation {generation}: loss {:.6}",
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    if !monitor.healthy() {
        warn!(
            "joint training loss rose above its running minimum at {}/{} checkpoints",
            monitor.flagged, monitor.checkpoints
        );
    }
    let signature = project(&mask, &raw)?;
    Ok(JointReport {
        signature,
        params,
        losses,
        monitor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::{gallager_mask, random_pm1_weights};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            depth: 3,
            batches: 4,
            batch_size: 8,
            snr_db: 8.0,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn single_cycle() {
        let a = random_pm1_weights(Arc::new(gallager_mask(10, 12, 6, 1).unwrap()), 1);
        let cfg = TrainConfig {
            depth: 1,
            batches: 1,
            batch_size: 1,
            ..small_cfg()
        };
        let report = incremental_train(&a, &cfg).unwrap();
        assert_eq!(report.losses.len(), 1);
        assert_eq!(report.params.depth(), 1);
        assert_ne!(report.params, DetectorParams::initial(1).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let a = random_pm1_weights(Arc::new(gallager_mask(10, 12, 6, 1).unwrap()), 1);
        let first = incremental_train(&a, &small_cfg()).unwrap();
        let second = incremental_train(&a, &small_cfg()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn mode_flags_are_enforced() {
        let mask = Arc::new(gallager_mask(10, 12, 6, 1).unwrap());
        let a = random_pm1_weights(Arc::clone(&mask), 1);
        let joint = TrainConfig {
            joint: true,
            ..small_cfg()
        };
        assert!(incremental_train(&a, &joint).is_err());
        assert!(joint_train(mask, &small_cfg()).is_err());
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = TrainConfig {
            sample_budget: 10,
            ..small_cfg()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_unit_weights() {
        let mask = Arc::new(gallager_mask(10, 12, 6, 2).unwrap());
        let cfg = TrainConfig {
            joint: true,
            adam: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..small_cfg()
        };
        let report = joint_train(mask, &cfg).unwrap();
        assert!(report.signature.weights().iter().all(|&w| w == 1.0));
        assert_eq!(report.params, DetectorParams::initial(3).unwrap());
    }

    #[test]
    fn monitor_flags_rises() {
        let mut monitor = LossMonitor::default();
        for i in 0..40 {
            monitor.record(1.0 / (1.0 + i as f64));
        }
        assert!(monitor.healthy());
        assert_eq!(monitor.flagged, 0);
        for _ in 0..40 {
            monitor.record(5.0);
        }
        assert!(!monitor.healthy());
    }
}
