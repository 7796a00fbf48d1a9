use serde::{Deserialize, Serialize};

use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LR_START: f64 = 1e-6;
pub const LR_MIN: f64 = 1e-6;
pub const WARMUP_STEPS: usize = 500;

/// Linear warmup from [`LR_START`] to `peak` over `warmup` steps, then cosine
/// decay to `min` at `total_steps`. Steps past the horizon stay at `min`.
pub fn lr_schedule(step: usize, warmup: usize, total_steps: usize, peak: f64, min: f64) -> Result<f64, TrainError> {
    if total_steps <= warmup {
        return Err(TrainError::Config(format!("total_steps {total_steps} must exceed warmup {warmup}")));
    }
    if step < warmup {
        return Ok(LR_START + (peak - LR_START) * step as f64 / warmup as f64);
    }
    let t = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    Ok(min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// state is touched.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TrainError::NonFinite(format!("gradient {g} at parameter {i}, optimizer step {}", state.step + 1)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let step_size = (lr / c1) as f32;
    let c2_sqrt = c2.sqrt() as f32;
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() / c2_sqrt + ADAM_EPS as f32);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(TrainError::NonFinite(format!("parameters diverged at optimizer step {}", state.step)));
    }
    Ok(())
}

/// Patience-based stopping on validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    /// 1-based epoch of the best loss, 0 before any epoch.
    pub best_epoch: usize,
    pub epochs_seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_loss: f64::INFINITY, best_epoch: 0, epochs_seen: 0 }
    }

    /// Records an epoch; returns whether it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.epochs_seen += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs_seen;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epochs_seen >= self.best_epoch + self.patience
    }
}

/// Stop decision for a complete validation-loss history.
pub fn early_stopping(val_losses: &[f64], patience: usize) -> bool {
    let mut es = EarlyStopping::new(patience);
    val_losses.iter().for_each(|&l| {
        es.observe(l);
    });
    !val_losses.is_empty() && es.should_stop()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchor_points() {
        let (peak, total) = (3e-3, 2500);
        assert_eq!(lr_schedule(0, 500, total, peak, LR_MIN).unwrap(), 1e-6);
        assert_eq!(lr_schedule(500, 500, total, peak, LR_MIN).unwrap(), peak);
        let mid = lr_schedule(1500, 500, total, peak, LR_MIN).unwrap();
        assert!((mid - (peak + LR_MIN) / 2.0).abs() < 1e-12);
        assert!((lr_schedule(total, 500, total, peak, LR_MIN).unwrap() - LR_MIN).abs() < 1e-15);
        assert!(lr_schedule(10, 500, 500, peak, LR_MIN).is_err());
    }

    #[test]
    fn schedule_is_continuous_at_warmup_end() {
        let a = lr_schedule(499, 500, 1000, 1e-3, LR_MIN).unwrap();
        let b = lr_schedule(500, 500, 1000, 1e-3, LR_MIN).unwrap();
        assert!((b - a).abs() < 1e-5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is -lr * g / (|g| + eps).
        let mut p = vec![0.5f32];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3).unwrap();
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!(((p[0] as f64) - want).abs() < 1e-7, "{}", p[0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.5f32, -2.0];
        let mut s = AdamState { step: 3, m: vec![0.1, -0.2], v: vec![0.01, 0.04] };
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-2).unwrap();
        assert!((s.m[0] - 0.09).abs() < 1e-7 && (s.v[1] - 0.04 * 0.999).abs() < 1e-7);
        let mut q = p.clone();
        let mut z = AdamState::new(2);
        adam_step(&mut q, &[0.0, 0.0], &mut z, 1e-2).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0f32];
        let mut s = AdamState::new(1);
        assert!(matches!(adam_step(&mut p, &[f32::NAN], &mut s, 1e-3), Err(TrainError::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn early_stopping_semantics() {
        let down: Vec<f64> = (0..30).map(|i| 10.0 - i as f64).collect();
        assert!(!early_stopping(&down, 10));
        let mut flat = vec![5.0, 4.0, 3.0];
        flat.extend(std::iter::repeat_n(3.0, 9));
        assert!(!early_stopping(&flat, 10));
        flat.push(3.0);
        assert!(early_stopping(&flat, 10));
        let mut es = EarlyStopping::new(10);
        es.observe(3.0);
        (0..8).for_each(|_| {
            es.observe(4.0);
        });
        assert!(es.observe(2.0));
        (0..9).for_each(|_| {
            es.observe(4.0);
        });
        assert!(!es.should_stop());
        es.observe(4.0);
        assert!(es.should_stop());
        assert_eq!(es.best_epoch, 10);
    }
}
