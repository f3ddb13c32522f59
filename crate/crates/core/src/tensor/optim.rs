//! Adam and the three learning-rate schedules used by the pipelines.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Adam with bias correction over a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    /// Defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            state: AdamState {
                lr,
                beta1,
                beta2,
                eps,
                step_count: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// Applies one update. Every parameter must carry a gradient; the list
    /// must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<(), TensorError> {
        let st = &mut self.state;
        if st.m.is_empty() {
            st.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            st.v = st.m.clone();
        }
        if st.m.len() != params.len() {
            return Err(TensorError::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                st.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if st.m[i].len() != p.numel() {
                return Err(TensorError::Shape(format!(
                    "parameter {} changed size from {} to {}",
                    i,
                    st.m[i].len(),
                    p.numel()
                )));
            }
            if p.grad().is_none() {
                return Err(TensorError::Invalid(format!("parameter {} has no gradient", i)));
            }
        }
        st.step_count += 1;
        let t = st.step_count as i32;
        let b1 = T::lit(st.beta1);
        let b2 = T::lit(st.beta2);
        let bc1 = T::lit(1.0 - st.beta1.powi(t));
        let bc2 = T::lit(1.0 - st.beta2.powi(t));
        let lr = T::lit(st.lr);
        let eps = T::lit(st.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad().expect("checked above");
            let m = &mut st.m[i];
            let v = &mut st.v[i];
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.set_grad(grad).expect("same length");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `lr0 * gamma^floor(t / every_n)`
    Exponential { gamma: f64, every_n: u64 },
    /// `lr0 * 0.5 * (1 + cos(pi * t / total_steps))`, reaching 0 at the end.
    Cosine { total_steps: u64 },
    /// Multiply by `factor` once `patience` consecutive steps fail to improve
    /// the metric; never drop below `min_lr`.
    ReduceOnPlateau { factor: f64, patience: u64, min_lr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    lr: f64,
    steps: u64,
    best: f64,
    bad_steps: u64,
}

/// Relative improvement a plateau metric must beat.
const PLATEAU_THRESHOLD: f64 = 1e-4;

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f64) -> Self {
        Self {
            kind,
            base_lr,
            lr: base_lr,
            steps: 0,
            best: f64::INFINITY,
            bad_steps: 0,
        }
    }

    pub fn exponential(base_lr: f64, gamma: f64, every_n: u64) -> Self {
        Self::new(ScheduleKind::Exponential { gamma, every_n }, base_lr)
    }

    pub fn cosine(base_lr: f64, total_steps: u64) -> Self {
        Self::new(ScheduleKind::Cosine { total_steps }, base_lr)
    }

    pub fn reduce_on_plateau(base_lr: f64, factor: f64, patience: u64, min_lr: f64) -> Self {
        Self::new(ScheduleKind::ReduceOnPlateau { factor, patience, min_lr }, base_lr)
    }

    /// Learning rate for the next optimizer step.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Closed form for the step-indexed kinds; the plateau kind returns its current value.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Exponential { gamma, every_n } => {
                self.base_lr * gamma.powi((t / every_n.max(1)) as i32)
            }
            ScheduleKind::Cosine { total_steps } => {
                let frac = (t.min(total_steps) as f64) / (total_steps.max(1) as f64);
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            ScheduleKind::ReduceOnPlateau { .. } => self.lr,
        }
    }

    /// Advances one step. `metric` is consulted only by the plateau kind.
    pub fn step(&mut self, metric: Option<f64>) -> f64 {
        self.steps += 1;
        match self.kind {
            ScheduleKind::Exponential { .. } | ScheduleKind::Cosine { .. } => {
                self.lr = self.lr_at(self.steps);
            }
            ScheduleKind::ReduceOnPlateau { factor, patience, min_lr } => {
                if let Some(m) = metric {
                    if m < self.best * (1.0 - PLATEAU_THRESHOLD) || self.best.is_infinite() {
                        self.best = m;
                        self.bad_steps = 0;
                    } else {
                        self.bad_steps += 1;
                        if self.bad_steps >= patience {
                            self.lr = (self.lr * factor).max(min_lr);
                            self.bad_steps = 0;
                        }
                    }
                }
            }
        }
        self.lr
    }
}
