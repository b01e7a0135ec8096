//! One-dimensional road with a varying speed limit and a latent road
//! slipperiness that weakens both acceleration and braking.
//!
//! Position is kept modulo 30, the common period of the speed-limit pattern
//! (10) and the slipperiness pattern (6). Velocity is capped at 9; every
//! state above 5 is already unsafe, so the cap never changes a safe
//! probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConfoundedMdpModel;
use crate::policy::TabularPolicy;

pub const POSITION_PERIOD: i64 = 30;
pub const MAX_VELOCITY: i64 = 9;
pub const N_STATES: usize = (POSITION_PERIOD * (MAX_VELOCITY + 1)) as usize;
pub const ACTIONS: [i64; 5] = [-3, -2, -1, 0, 1];
pub const N_LATENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DrivingState {
    pub position: i64,
    pub velocity: i64,
}

impl DrivingState {
    /// Wraps the position; rejects velocities outside `0..=9`.
    pub fn new(position: i64, velocity: i64) -> Result<Self> {
        if !(0..=MAX_VELOCITY).contains(&velocity) {
            return Err(Error::Encoding(format!(
                "velocity {velocity} outside 0..={MAX_VELOCITY}"
            )));
        }
        Ok(Self {
            position: position.rem_euclid(POSITION_PERIOD),
            velocity,
        })
    }

    pub fn encode(self) -> usize {
        (self.position * (MAX_VELOCITY + 1) + self.velocity) as usize
    }

    pub fn decode(x: usize) -> Result<Self> {
        if x >= N_STATES {
            return Err(Error::Encoding(format!("driving state code {x} out of range")));
        }
        let x = x as i64;
        Ok(Self {
            position: x / (MAX_VELOCITY + 1),
            velocity: x % (MAX_VELOCITY + 1),
        })
    }

    pub fn is_safe(self) -> bool {
        safe_at(self.position, self.velocity)
    }
}

/// Speed-limit predicate on an unwrapped position.
pub fn safe_at(position: i64, velocity: i64) -> bool {
    if position.rem_euclid(10) < 4 {
        velocity <= 3
    } else {
        velocity <= 5
    }
}

/// Process noise: `n1` perturbs the commanded acceleration, `n2` the velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrivingNoise {
    pub n1: i64,
    pub n2: i64,
}

impl DrivingNoise {
    pub const N1: [i64; 3] = [-1, 0, 1];
    pub const N2: [i64; 5] = [-2, -1, 0, 1, 2];

    /// All 15 equally likely noise outcomes.
    pub fn outcomes() -> impl Iterator<Item = DrivingNoise> {
        Self::N1
            .into_iter()
            .flat_map(|n1| Self::N2.into_iter().map(move |n2| DrivingNoise { n1, n2 }))
    }

    pub const PROB: f64 = 1.0 / 15.0;
}

pub fn driving_step(x: DrivingState, u: i64, w: i64, n: DrivingNoise) -> Result<DrivingState> {
    if !ACTIONS.contains(&u) {
        return Err(Error::Encoding(format!("action {u} not in {ACTIONS:?}")));
    }
    if !(0..N_LATENT as i64).contains(&w) {
        return Err(Error::Encoding(format!("slipperiness {w} outside 0..=3")));
    }
    if !DrivingNoise::N1.contains(&n.n1) || !DrivingNoise::N2.contains(&n.n2) {
        return Err(Error::Encoding(format!("noise {n:?} out of range")));
    }
    let push = u + n.n1;
    let traction = push.signum() * (push.abs() - w).max(0);
    let velocity = (x.velocity + traction + n.n2).clamp(0, MAX_VELOCITY);
    DrivingState::new(x.position + x.velocity, velocity)
}

/// `P(w | x)` over slipperiness `0..=3`.
pub fn driving_latent_dist(x: DrivingState) -> [f64; N_LATENT] {
    if x.position.rem_euclid(6) >= 3 {
        [0.5, 0.5, 0.0, 0.0]
    } else {
        let third = 1.0 / 3.0;
        [0.0, third, third, third]
    }
}

const HARD_BRAKE: [f64; 5] = [0.9, 0.05, 0.03, 0.01, 0.01];
const BRAKE: [f64; 5] = [0.5, 0.4, 0.05, 0.04, 0.01];
const UNIFORM: [f64; 5] = [0.2; 5];

/// Logging policy that brakes harder on more slippery road.
///
/// The threshold rules overlap, so they are checked from the most slippery
/// threshold down: `w >= 3`, then `w >= 2`, then `w >= 1`, else uniform.
pub fn behavioral_policy_driving(x: DrivingState, w: i64) -> [f64; 5] {
    let low_limit = x.position.rem_euclid(10) < 4;
    let v = x.velocity;
    let rule = |min_w: i64, v_low: i64, v_high: i64| w >= min_w && v >= if low_limit { v_low } else { v_high };
    if rule(3, 2, 4) {
        HARD_BRAKE
    } else if rule(2, 1, 3) || rule(1, 2, 4) {
        BRAKE
    } else {
        UNIFORM
    }
}

/// Exact `P(x' | x, u, w)` with the noise enumerated.
pub fn driving_transition_row(x: usize, u: usize, w: usize) -> Vec<f64> {
    let mut row = vec![0.0; N_STATES];
    let s = DrivingState::decode(x).expect("state code in range");
    for n in DrivingNoise::outcomes() {
        let next = driving_step(s, ACTIONS[u], w as i64, n).expect("enumerated inputs are in range");
        row[next.encode()] += DrivingNoise::PROB;
    }
    row
}

pub fn build_driving_model(horizon: usize) -> Result<ConfoundedMdpModel> {
    ConfoundedMdpModel::from_fn(
        N_STATES,
        ACTIONS.to_vec(),
        N_LATENT,
        horizon,
        driving_transition_row,
        |x| driving_latent_dist(DrivingState::decode(x).expect("in range")).to_vec(),
        |x| DrivingState::decode(x).expect("in range").is_safe(),
    )
}

pub fn driving_behavioral() -> Result<TabularPolicy> {
    TabularPolicy::latent_aware(N_STATES, N_LATENT, ACTIONS.len(), |x, w| {
        behavioral_policy_driving(DrivingState::decode(x).expect("in range"), w as i64).to_vec()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(p: i64, v: i64) -> DrivingState {
        DrivingState::new(p, v).unwrap()
    }

    #[test]
    fn step_examples() {
        let zero = DrivingNoise { n1: 0, n2: 0 };
        assert_eq!(driving_step(st(3, 2), 1, 3, zero).unwrap(), st(5, 2));
        assert_eq!(driving_step(st(0, 0), -3, 0, zero).unwrap(), st(0, 0));
        assert_eq!(
            driving_step(st(7, 5), 1, 0, DrivingNoise { n1: 1, n2: 2 }).unwrap(),
            st(12, 9)
        );
    }

    #[test]
    fn step_rejects_out_of_range_inputs() {
        let zero = DrivingNoise { n1: 0, n2: 0 };
        assert!(driving_step(st(0, 0), 2, 0, zero).is_err());
        assert!(driving_step(st(0, 0), 0, 4, zero).is_err());
        assert!(driving_step(st(0, 0), 0, 0, DrivingNoise { n1: 2, n2: 0 }).is_err());
        assert!(DrivingState::new(0, 10).is_err());
    }

    #[test]
    fn latent_distribution_examples() {
        assert_eq!(driving_latent_dist(st(3, 0)), [0.5, 0.5, 0.0, 0.0]);
        assert_eq!(driving_latent_dist(st(9, 0)), [0.5, 0.5, 0.0, 0.0]);
        let t = 1.0 / 3.0;
        assert_eq!(driving_latent_dist(st(0, 0)), [0.0, t, t, t]);
    }

    #[test]
    fn behavioral_examples() {
        assert_eq!(behavioral_policy_driving(st(2, 2), 3), [0.9, 0.05, 0.03, 0.01, 0.01]);
        for p in 0..30 {
            for v in 0..=9 {
                assert_eq!(behavioral_policy_driving(st(p, v), 0), [0.2; 5]);
            }
        }
        assert_eq!(behavioral_policy_driving(st(1, 1), 1), [0.2; 5]);
    }

    #[test]
    fn safe_set_census() {
        let mut safe = 0;
        for x in 0..N_STATES {
            let s = DrivingState::decode(x).unwrap();
            if s.is_safe() {
                safe += 1;
                assert!(s.velocity <= 5);
            }
            if s.velocity > 5 {
                assert!(!s.is_safe());
            }
            if s.position % 10 < 4 && (s.velocity == 4 || s.velocity == 5) {
                assert!(!s.is_safe());
            }
        }
        assert_eq!(safe, 156);
    }

    #[test]
    fn encoding_round_trips() {
        for x in 0..N_STATES {
            assert_eq!(DrivingState::decode(x).unwrap().encode(), x);
        }
        assert!(DrivingState::decode(N_STATES).is_err());
    }

    #[test]
    fn wrapped_position_preserves_safety_and_latent_law() {
        for p in -90..90 {
            for v in 0..=9 {
                let wrapped = st(p, v);
                assert_eq!(wrapped.is_safe(), safe_at(p, v));
                let unwrapped = DrivingState {
                    position: p,
                    velocity: v,
                };
                assert_eq!(driving_latent_dist(wrapped), driving_latent_dist(unwrapped));
            }
        }
    }
}
