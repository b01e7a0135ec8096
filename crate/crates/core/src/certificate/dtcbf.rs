//! Discrete-time control barrier function baseline.
//!
//! The barrier condition `E[h(X') | x, u] >= α h(x) + δ` is evaluated with the
//! offline transition statistics, so it inherits their confounding bias.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::env::driving::{DrivingState, N_STATES};
use crate::error::{Error, Result};
use crate::model::VisibleKernel;

use super::{Controller, Decision};

/// Barrier over driving states: a smooth step that drops where the speed
/// limit tightens, minus the velocity. Periodic in position with period 10.
pub fn dtcbf_h(s: DrivingState) -> f64 {
    let p = s.position as f64;
    let series: f64 = [1.0_f64, 3.0, 5.0, 7.0]
        .iter()
        .map(|&n| 4.0 / (n * PI) * (-(PI / 5.0) * n * (p + 0.5)).sin())
        .sum();
    (4.5 + series - s.velocity as f64).tanh()
}

/// `h` evaluated on every encoded driving state.
pub fn driving_barrier() -> Vec<f64> {
    (0..N_STATES)
        .map(|x| dtcbf_h(DrivingState::decode(x).expect("code in range")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtcbfParams {
    pub alpha: f64,
    pub delta: f64,
}

impl Default for DtcbfParams {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            delta: -0.5,
        }
    }
}

/// `Σ_x' P(x' | x, u) h(x') >= α h(x) + δ`.
pub fn dtcbf_condition(
    kernel: &VisibleKernel,
    params: &DtcbfParams,
    barrier: &[f64],
    x: usize,
    u: usize,
) -> Result<bool> {
    if barrier.len() != kernel.n_states() {
        return Err(Error::Encoding("barrier does not cover the state space".into()));
    }
    let expected: f64 = kernel.row(x, u)?.iter().zip(barrier).map(|(p, h)| p * h).sum();
    Ok(expected >= params.alpha * barrier[x] + params.delta)
}

/// Picks the largest action meeting the barrier condition, or the smallest
/// action when none does. Actions whose offline row is undefined cannot be
/// certified and count as failing.
pub struct DtcbfController {
    pub kernel: VisibleKernel,
    pub params: DtcbfParams,
    pub barrier: Vec<f64>,
    pub action_values: Vec<i64>,
}

impl Controller for DtcbfController {
    fn act(&self, x: usize, _t: usize, _u_nominal: usize) -> Result<Decision> {
        let mut best: Option<usize> = None;
        for u in 0..self.action_values.len() {
            let ok = match dtcbf_condition(&self.kernel, &self.params, &self.barrier, x, u) {
                Ok(ok) => ok,
                Err(Error::Positivity(_)) => false,
                Err(e) => return Err(e),
            };
            if ok && best.is_none_or(|b| self.action_values[u] > self.action_values[b]) {
                best = Some(u);
            }
        }
        Ok(match best {
            Some(u) => Decision {
                u,
                margin: None,
                feasible: true,
            },
            None => Decision {
                u: (0..self.action_values.len())
                    .min_by_key(|&u| self.action_values[u])
                    .expect("nonempty action set"),
                margin: None,
                feasible: false,
            },
        })
    }
}
