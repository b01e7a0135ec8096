//! Two-state example where offline statistics overstate the safety of an action,
//! and a variant with a front-door mediator between action and next state.

use crate::error::Result;
use crate::model::{ConfoundedMdpModel, MediatorModel};
use crate::policy::TabularPolicy;

/// `P(X' = 0 | x, w, u)`, indexed `[x][w][u]`.
///
/// The `(x = 1, w = 0)` rows are unreachable (`P(w = 0 | x = 1) = 0`) and are
/// completed as absorbing in the unsafe state.
const STAY_SAFE: [[[f64; 2]; 2]; 2] = [[[0.9, 1.0], [1.0, 0.1]], [[0.0, 0.0], [0.0, 0.0]]];

const LATENT: [[f64; 2]; 2] = [[0.5, 0.5], [0.0, 1.0]];

/// Probability the mediator copies the action.
pub const MEDIATOR_FIDELITY: f64 = 0.8;

fn two_point(p0: f64) -> Vec<f64> {
    vec![p0, 1.0 - p0]
}

pub fn build_mismatch_env(horizon: usize) -> Result<ConfoundedMdpModel> {
    ConfoundedMdpModel::from_fn(
        2,
        vec![0, 1],
        2,
        horizon,
        |x, u, w| two_point(STAY_SAFE[x][w][u]),
        |x| LATENT[x].to_vec(),
        |x| x == 0,
    )
}

/// Behavioral policy: at `x = 0` it never picks `u = 1` when `w = 1`.
/// Rows at the unsafe state are uniform.
pub fn mismatch_behavioral() -> Result<TabularPolicy> {
    TabularPolicy::latent_aware(2, 2, 2, |x, w| match (x, w) {
        (0, 0) => vec![0.5, 0.5],
        (0, 1) => vec![1.0, 0.0],
        _ => vec![0.5, 0.5],
    })
}

/// The mismatch system with a binary mediator `m` that copies the action with
/// probability 0.8. The next state depends on the action only through `m`.
pub fn build_mediator_toy_env(horizon: usize) -> Result<(ConfoundedMdpModel, MediatorModel)> {
    let mediator = MediatorModel::from_fn(
        2,
        2,
        2,
        2,
        |_, u| {
            let mut row = vec![1.0 - MEDIATOR_FIDELITY; 2];
            row[u] = MEDIATOR_FIDELITY;
            row
        },
        |x, m, w| two_point(STAY_SAFE[x][w][m]),
    )?;
    let model = ConfoundedMdpModel::from_fn(
        2,
        vec![0, 1],
        2,
        horizon,
        |x, u, w| mediator.marginal_row(x, u, w),
        |x| LATENT[x].to_vec(),
        |x| x == 0,
    )?;
    Ok((model, mediator))
}
