//! Learning-rate annealing and the progressive coefficient ramp.

/// Printed form of [`ramp_at`], echoed in resolved configurations.
pub const RAMP_FORMULA: &str = "2/(1+exp(-theta*p))-1";

/// `eta0 / (1 + alpha p)^beta`.
pub fn lr_at(p: f64, eta0: f64, alpha: f64, beta: f64) -> f64 {
    eta0 / (1.0 + alpha * p).powf(beta)
}

/// `2 / (1 + exp(-theta p)) - 1`: 0 at p = 0, increasing toward 1.
pub fn ramp_at(p: f64, theta: f64) -> f64 {
    2.0 / (1.0 + (-theta * p).exp()) - 1.0
}

/// Position of one iteration on the schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub progress: f64,
    pub lr: f64,
    pub ramp: f64,
}

impl ScheduleState {
    pub fn at(iteration: usize, total: usize, eta0: f64, alpha: f64, beta: f64, theta: f64) -> Self {
        let progress = if total == 0 {
            0.0
        } else {
            (iteration as f64 / total as f64).min(1.0)
        };
        Self {
            progress,
            lr: lr_at(progress, eta0, alpha, beta),
            ramp: ramp_at(progress, theta),
        }
    }
}
