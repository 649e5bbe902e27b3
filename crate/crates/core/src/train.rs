//! Pieces shared by the two training stages.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{self, AdamWConfig};
use crate::params::ParamStore;

/// Optimizer and schedule settings of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 50,
            lr: 7.5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// `(total steps, warmup steps)` for `n` training samples.
    pub fn steps(&self, n: usize) -> (usize, usize) {
        let per_epoch = n.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        let warmup = (total as f64 * self.warmup_frac) as usize;
        (total, warmup)
    }

    pub fn lr_at(&self, step: usize, n: usize) -> f64 {
        let (total, warmup) = self.steps(n);
        optim::cosine_lr(step, total, warmup, self.lr)
    }
}

/// Shuffled sample order for one epoch, cut into batches.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A run that stopped on a non-finite loss or gradient.
#[derive(Clone, Debug)]
pub struct TrainFailure<H> {
    pub error: Error,
    /// Parameters before the update that produced the failure.
    pub last_good: ParamStore,
    pub history: H,
}

pub(crate) fn check_finite(loss: f64, store: &ParamStore, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numerical(alloc::format!(
            "loss became {loss} at epoch {epoch}, step {step}"
        )));
    }
    if !store.grads_finite() {
        return Err(Error::Numerical(alloc::format!(
            "non-finite gradient at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}
