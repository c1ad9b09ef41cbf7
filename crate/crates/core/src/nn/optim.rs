//! SGD with momentum for weights, normalized-gradient steps for shifts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::layers::{Param, ParamRole};
use crate::tensor::Element;

/// Guards the division in the normalized shift update.
pub const SHIFT_NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant { base: f64 },
    /// `base * gamma^k` after the k-th milestone has been reached.
    Step {
        base: f64,
        gamma: f64,
        milestones: Vec<u64>,
    },
    /// Decays linearly from `base` to zero at `total` iterations.
    Linear { base: f64, total: u64 },
}

impl LrSchedule {
    /// Step schedule used for CIFAR: 0.1, divided by 10 at 32k and 48k.
    pub fn cifar_default() -> Self {
        LrSchedule::Step {
            base: 0.1,
            gamma: 0.1,
            milestones: vec![32_000, 48_000],
        }
    }

    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::Step { base, .. } => base,
            LrSchedule::Linear { base, .. } => base,
        }
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        match self {
            LrSchedule::Constant { base } => *base,
            LrSchedule::Step {
                base,
                gamma,
                milestones,
            } => {
                let passed = milestones.iter().filter(|&&m| iteration >= m).count();
                base * gamma.powi(passed as i32)
            }
            LrSchedule::Linear { base, total } => {
                if *total == 0 {
                    return 0.0;
                }
                base * (1.0 - iteration as f64 / *total as f64).max(0.0)
            }
        }
    }

    /// Multiplier relative to the base rate; drives the shift learning rate.
    pub fn factor(&self, iteration: u64) -> f64 {
        let base = self.base();
        if base == 0.0 {
            0.0
        } else {
            self.lr(iteration) / base
        }
    }
}

/// Granularity of the shift-gradient normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftNorm {
    /// One L2 norm over the layer's whole `(alpha, beta)` gradient vector.
    PerLayer,
    /// One norm per channel's `(alpha, beta)` pair.
    PerChannel,
}

impl fmt::Display for ShiftNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftNorm::PerLayer => "layer",
            ShiftNorm::PerChannel => "channel",
        })
    }
}

impl FromStr for ShiftNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(ShiftNorm::PerLayer),
            "channel" => Ok(ShiftNorm::PerChannel),
            _ => Err(Error::Config(format!("unknown shift normalization {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Base learning rate of shift parameters; follows `schedule`'s factor.
    pub shift_lr: f64,
    pub shift_norm: ShiftNorm,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            schedule: LrSchedule::cifar_default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            shift_lr: 1e-2,
            shift_norm: ShiftNorm::PerLayer,
        }
    }
}

/// Optimizer state: one velocity buffer per graph parameter, in graph order.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocities: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(config: SgdConfig, graph: &Graph<T>) -> Self {
        let velocities = graph.params().map(|p| vec![T::zero(); p.len()]).collect();
        Sgd { config, velocities }
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocities
    }

    pub fn velocities_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.velocities
    }

    /// Applies one update using the gradients currently held by `graph`.
    pub fn step(&mut self, graph: &mut Graph<T>, iteration: u64) -> Result<()> {
        let lr = self.config.schedule.lr(iteration);
        let shift_lr = self.config.shift_lr * self.config.schedule.factor(iteration);
        let momentum = T::from_f64_lossy(self.config.momentum);
        let wd = T::from_f64_lossy(self.config.weight_decay);
        let lr_t = T::from_f64_lossy(lr);
        let mut count = 0;
        for (i, p) in graph.params_mut().enumerate() {
            let v = self
                .velocities
                .get_mut(i)
                .filter(|v| v.len() == p.len())
                .ok_or_else(|| Error::State(format!("optimizer state does not match parameter {}", p.name)))?;
            count += 1;
            if !p.trainable {
                continue;
            }
            match p.role {
                ParamRole::Shift => normalized_shift_update(p, shift_lr, self.config.shift_norm),
                role => {
                    let decay = if role == ParamRole::Weight { wd } else { T::zero() };
                    for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                        *vel = momentum * *vel + *g + decay * *w;
                        *w = *w - lr_t * *vel;
                    }
                }
            }
        }
        if count != self.velocities.len() {
            return Err(Error::State("optimizer state has extra parameters".into()));
        }
        Ok(())
    }
}

/// `theta <- theta - lr * g / (||g|| + eps)` over one shift layer.
pub fn normalized_shift_update<T: Element>(p: &mut Param<T>, lr: f64, norm: ShiftNorm) {
    let chunk = match norm {
        ShiftNorm::PerLayer => p.len().max(1),
        ShiftNorm::PerChannel => 2,
    };
    for (theta, grad) in p.value.chunks_mut(chunk).zip(p.grad.chunks(chunk)) {
        let l2 = grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        let scale = lr / (l2 + SHIFT_NORM_EPSILON);
        for (t, g) in theta.iter_mut().zip(grad) {
            *t = T::from_f64_lossy(t.to_f64_lossy() - scale * g.to_f64_lossy());
        }
    }
}
