//! SGD and Adam, in two executions: on the tape (so parameter updates stay
//! differentiable, moments included) and on host floats (for values trained
//! outside the tape and for the outer meta-optimizer).

use crate::diffmath::{DiffValue, Mat, Tape};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

/// Added inside Adam's square root so the update stays differentiable at
/// zero second moment (masked logits have exactly-zero gradient histories,
/// and d sqrt(v)/dv blows up at v = 0). Shifts the denominator by at most
/// 1e-12, far below epsilon.
const ADAM_ROOT_SHIFT: f64 = 1e-24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
}

impl OptimConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimConfig { kind: OptimKind::Sgd, learning_rate }
    }

    /// Adam with the tabular defaults used throughout: beta1 = 0,
    /// beta2 = 0.999, epsilon = 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Adam { beta1: 0.0, beta2: 0.999, epsilon: 1e-8 },
            learning_rate,
        }
    }
}

/// Whether a step maximizes (policy objective) or minimizes (value losses).
/// Updates are written as descent; ascent negates the gradient up front so
/// sign mistakes cannot hide in call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Optimizer state recorded on a tape. The moment tables are tape values, so
/// a parameter update is a differentiable function of every gradient that has
/// flowed through the optimizer since construction.
pub struct TapedOptim {
    cfg: OptimConfig,
    m: DiffValue,
    v: DiffValue,
    step: u64,
}

impl TapedOptim {
    /// Fresh state with zero moments.
    pub fn fresh(tape: &mut Tape, cfg: OptimConfig, rows: usize, cols: usize) -> Result<Self> {
        let m = tape.constant(Mat::zeros(rows, cols))?;
        let v = tape.constant(Mat::zeros(rows, cols))?;
        Ok(TapedOptim { cfg, m, v, step: 0 })
    }

    /// Re-register persisted moments on a new tape.
    pub fn from_values(tape: &mut Tape, cfg: OptimConfig, m: &Mat, v: &Mat, step: u64) -> Result<Self> {
        let m = tape.constant(m.clone())?;
        let v = tape.constant(v.clone())?;
        Ok(TapedOptim { cfg, m, v, step })
    }

    pub fn moments(&self) -> (DiffValue, DiffValue) {
        (self.m, self.v)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Returns the new parameter node; moment nodes and the step
    /// counter advance exactly once per call.
    pub fn apply(
        &mut self,
        tape: &mut Tape,
        params: DiffValue,
        grad: DiffValue,
        direction: Direction,
    ) -> Result<DiffValue> {
        if params.shape() != grad.shape() {
            return Err(crate::CoreError::Invalid(format!(
                "optimizer: parameter shape {:?} vs gradient shape {:?}",
                params.shape(),
                grad.shape()
            )));
        }
        let g = match direction {
            Direction::Descent => grad,
            Direction::Ascent => tape.neg(grad)?,
        };
        self.step += 1;
        let lr = self.cfg.learning_rate;
        let new_params = match self.cfg.kind {
            OptimKind::Sgd => {
                let scaled = tape.mul_scalar(g, lr)?;
                tape.sub(params, scaled)?
            }
            OptimKind::Adam { beta1, beta2, epsilon } => {
                let m_keep = tape.mul_scalar(self.m, beta1)?;
                let m_new = tape.mul_scalar(g, 1.0 - beta1)?;
                let m = tape.add(m_keep, m_new)?;
                let g2 = tape.square(g)?;
                let v_keep = tape.mul_scalar(self.v, beta2)?;
                let v_new = tape.mul_scalar(g2, 1.0 - beta2)?;
                let v = tape.add(v_keep, v_new)?;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let m_hat = tape.mul_scalar(m, 1.0 / bc1)?;
                let v_hat = tape.mul_scalar(v, 1.0 / bc2)?;
                let v_shifted = tape.add_scalar(v_hat, ADAM_ROOT_SHIFT)?;
                let root = tape.sqrt(v_shifted)?;
                let denom = tape.add_scalar(root, epsilon)?;
                let update = tape.div(m_hat, denom)?;
                let scaled = tape.mul_scalar(update, lr)?;
                self.m = m;
                self.v = v;
                tape.sub(params, scaled)?
            }
        };
        Ok(new_params)
    }
}

/// The same optimizer arithmetic on host floats.
#[derive(Debug, Clone)]
pub struct HostOptim {
    cfg: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl HostOptim {
    pub fn new(cfg: OptimConfig, len: usize) -> Self {
        HostOptim { cfg, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) {
        assert_eq!(params.len(), grad.len(), "optimizer: parameter/gradient length mismatch");
        let sign = match direction {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        };
        self.step += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= lr * sign * g;
                }
            }
            OptimKind::Adam { beta1, beta2, epsilon } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (i, (p, &g)) in params.iter_mut().zip(grad).enumerate() {
                    let g = sign * g;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    *p -= lr * m_hat / ((v_hat + ADAM_ROOT_SHIFT).sqrt() + epsilon);
                }
            }
        }
    }
}

/// Moments persisted between tapes for parameters that train across many
/// short-lived tapes.
#[derive(Debug, Clone)]
pub struct PersistentMoments {
    pub m: Mat,
    pub v: Mat,
    pub step: u64,
}

impl PersistentMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PersistentMoments { m: Mat::zeros(rows, cols), v: Mat::zeros(rows, cols), step: 0 }
    }

    pub fn register(&self, tape: &mut Tape, cfg: OptimConfig) -> Result<TapedOptim> {
        TapedOptim::from_values(tape, cfg, &self.m, &self.v, self.step)
    }

    pub fn absorb(&mut self, tape: &Tape, opt: &TapedOptim) {
        let (m, v) = opt.moments();
        self.m = tape.value(m).clone();
        self.v = tape.value(v).clone();
        self.step = opt.step_count();
    }
}
