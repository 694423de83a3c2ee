//! Parameter initialization, SGD with momentum, Adam, and learning-rate
//! schedules.
//!
//! The per-array update rules are free functions so they can be tested
//! against closed forms; [`SgdState`] and [`AdamState`] add the
//! per-parameter buffers, and [`LrSchedule`] is a pure function of the
//! epoch number and the validation-loss history.

use crate::element::Element;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Sample `N(0, 2 / fan_in)`. Draws are taken in 64-bit and cast, so the
/// same stream yields the same parameters at either precision.
pub fn he_normal_init<E: Element>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<E> {
    assert!(fan_in >= 1, "he_normal_init requires fan_in >= 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(normal.sample(rng)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

/// One classic-momentum SGD update: `v = mu*v - lr*(g + l2*w)`,
/// `w = w + v`.
pub fn sgd_step<E: Element>(w: &mut [E], g: &[E], v: &mut [E], lr: E, momentum: E, l2: E) {
    for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi - lr * (*gi + l2 * *wi);
        *wi += *vi;
    }
}

/// One bias-corrected Adam update with classic (non-decoupled) L2 folded
/// into the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<E: Element>(
    w: &mut [E],
    g: &[E],
    m: &mut [E],
    v: &mut [E],
    t: u64,
    lr: E,
    beta1: E,
    beta2: E,
    eps: E,
    l2: E,
) {
    let bc1 = E::ONE - pow(beta1, t);
    let bc2 = E::ONE - pow(beta2, t);
    for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let grad = *gi + l2 * *wi;
        *mi = beta1 * *mi + (E::ONE - beta1) * grad;
        *vi = beta2 * *vi + (E::ONE - beta2) * grad * grad;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *wi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

fn pow<E: Element>(base: E, exp: u64) -> E {
    let mut acc = E::ONE;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

/// Momentum-SGD state over a fixed roster of parameter arrays.
#[derive(Debug, Clone)]
pub struct SgdState<E> {
    pub lr: E,
    pub momentum: E,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new(lr: E, momentum: E, sizes: &[usize]) -> Self {
        Self {
            lr,
            momentum,
            velocity: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
        }
    }

    pub fn step(&mut self, slot: usize, w: &mut [E], g: &[E], l2: E) {
        sgd_step(w, g, &mut self.velocity[slot], self.lr, self.momentum, l2);
    }

    pub fn velocity(&self, slot: usize) -> &[E] {
        &self.velocity[slot]
    }

    pub fn velocity_mut(&mut self, slot: usize) -> &mut Vec<E> {
        &mut self.velocity[slot]
    }
}

/// Adam state over a fixed roster of parameter arrays; `t` advances once
/// per [`AdamState::begin_step`].
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub t: u64,
    first: Vec<Vec<E>>,
    second: Vec<Vec<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(lr: E, beta1: E, beta2: E, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: E::from_f64(1e-8),
            t: 0,
            first: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
            second: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
        }
    }

    /// Advance the shared step count; call once before updating the roster.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, slot: usize, w: &mut [E], g: &[E], l2: E) {
        adam_step(
            w,
            g,
            &mut self.first[slot],
            &mut self.second[slot],
            self.t,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            l2,
        );
    }

    pub fn moments(&self, slot: usize) -> (&[E], &[E]) {
        (&self.first[slot], &self.second[slot])
    }

    pub fn moments_mut(&mut self, slot: usize) -> (&mut Vec<E>, &mut Vec<E>) {
        (&mut self.first[slot], &mut self.second[slot])
    }
}

/// Either optimizer behind one stepping interface.
#[derive(Debug, Clone)]
pub enum Optimizer<E> {
    Sgd(SgdState<E>),
    Adam(AdamState<E>),
}

impl<E: Element> Optimizer<E> {
    pub fn begin_step(&mut self) {
        if let Optimizer::Adam(a) = self {
            a.begin_step();
        }
    }

    pub fn step(&mut self, slot: usize, w: &mut [E], g: &[E], l2: E) {
        match self {
            Optimizer::Sgd(s) => s.step(slot, w, g, l2),
            Optimizer::Adam(a) => a.step(slot, w, g, l2),
        }
    }

    pub fn set_rates(&mut self, lr: f64, momentum: Option<f64>) {
        match self {
            Optimizer::Sgd(s) => {
                s.lr = E::from_f64(lr);
                if let Some(mu) = momentum {
                    s.momentum = E::from_f64(mu);
                }
            }
            Optimizer::Adam(a) => a.lr = E::from_f64(lr),
        }
    }
}

/// A step in a learning-rate timeline: after `after_epoch`, switch to
/// `lr` (and optionally a new momentum).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub after_epoch: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
}

/// Reduce the learning rate by `factor` whenever the validation loss has
/// not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
}

/// Learning-rate and momentum timeline: fixed epoch thresholds composed
/// with an optional plateau rule. Pure function of (epoch, history).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub base_momentum: Option<f64>,
    pub steps: Vec<ScheduleStep>,
    pub plateau: Option<Plateau>,
}

/// Effective rates for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledRates {
    pub lr: f64,
    pub momentum: Option<f64>,
}

impl LrSchedule {
    pub fn flat(lr: f64) -> Self {
        Self {
            base_lr: lr,
            base_momentum: None,
            steps: Vec::new(),
            plateau: None,
        }
    }

    pub fn with_plateau(mut self, patience: usize, factor: f64) -> Self {
        self.plateau = Some(Plateau { patience, factor });
        self
    }

    /// Classification timeline: 0.001 with momentum 0.7, then 0.0001
    /// after epoch 150, then 0.00001 with momentum 0.5 after epoch 200.
    pub fn classification() -> Self {
        Self {
            base_lr: 1e-3,
            base_momentum: Some(0.7),
            steps: vec![
                ScheduleStep {
                    after_epoch: 150,
                    lr: 1e-4,
                    momentum: None,
                },
                ScheduleStep {
                    after_epoch: 200,
                    lr: 1e-5,
                    momentum: Some(0.5),
                },
            ],
            plateau: None,
        }
    }

    /// Effective rates at `epoch` (1-based) given the validation losses of
    /// all completed epochs.
    pub fn at(&self, epoch: usize, val_losses: &[f64]) -> ScheduledRates {
        debug_assert!(epoch >= 1, "epochs are 1-based");
        debug_assert!(
            self.steps.windows(2).all(|w| w[0].after_epoch < w[1].after_epoch),
            "schedule thresholds must be strictly increasing"
        );
        let mut lr = self.base_lr;
        let mut momentum = self.base_momentum;
        for step in &self.steps {
            if epoch > step.after_epoch {
                lr = step.lr;
                if step.momentum.is_some() {
                    momentum = step.momentum;
                }
            }
        }
        if let Some(p) = self.plateau {
            lr *= p.factor.powi(plateau_reductions(val_losses, p.patience) as i32);
        }
        ScheduledRates { lr, momentum }
    }
}

/// Number of plateau events so far: each run of `patience` consecutive
/// epochs without a new best loss triggers one reduction, then the streak
/// restarts.
fn plateau_reductions(val_losses: &[f64], patience: usize) -> u32 {
    if patience == 0 {
        return 0;
    }
    let mut best = f64::INFINITY;
    let mut streak = 0;
    let mut count = 0;
    for &loss in val_losses {
        if loss < best {
            best = loss;
            streak = 0;
        } else {
            streak += 1;
            if streak == patience {
                count += 1;
                streak = 0;
            }
        }
    }
    count
}

/// Spec-level alias for evaluating a schedule at one epoch.
pub fn schedule_epoch(schedule: &LrSchedule, epoch: usize, val_losses: &[f64]) -> ScheduledRates {
    schedule.at(epoch, val_losses)
}
