//! Confounded MDPs, their observable transition statistics, and the
//! absorbing auxiliary process used to express long-term safety as a value.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::rng::sample_categorical;

/// Absolute tolerance for every normalization check.
pub const PROB_TOL: f64 = 1e-9;

pub(crate) fn check_row(row: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < -PROB_TOL) {
        return Err(Error::NotNormalized {
            what: what(),
            sum: f64::NAN,
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::NotNormalized { what: what(), sum });
    }
    Ok(())
}

/// State of the auxiliary processes: visible state plus remaining time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: usize,
    /// Remaining steps, `H - t` for a state observed at time `t`.
    pub k: usize,
}

impl AugmentedState {
    pub fn new(x: usize, k: usize) -> Self {
        Self { x, k }
    }

    pub fn at_time(x: usize, t: usize, horizon: usize) -> Self {
        Self { x, k: horizon - t }
    }
}

impl fmt::Display for AugmentedState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(x={}, k={})", self.x, self.k)
    }
}

/// Terminal indicator reward: 1 exactly when no time remains and the state is safe.
pub fn reward(y: AugmentedState, safety: impl Fn(usize) -> bool) -> f64 {
    if y.k == 0 && safety(y.x) {
        1.0
    } else {
        0.0
    }
}

/// Ground truth of a confounded MDP with latent variable redrawn from
/// `P(w | x)` at every step.
///
/// Visible states, actions and latent values are dense integer encodings.
/// Actions additionally carry an integer value used for deviation penalties
/// and "largest action" selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundedMdpModel {
    n_states: usize,
    n_latent: usize,
    action_values: Vec<i64>,
    /// `[((x * nA + u) * nW + w) * nX + x']`
    transition: Vec<f64>,
    /// `[x * nW + w]`
    latent_dist: Vec<f64>,
    safe: Vec<bool>,
    horizon: usize,
}

impl ConfoundedMdpModel {
    /// Builds a model from row functions, validating every row.
    pub fn from_fn<T, L, C>(
        n_states: usize,
        action_values: Vec<i64>,
        n_latent: usize,
        horizon: usize,
        mut transition: T,
        mut latent: L,
        safety: C,
    ) -> Result<Self>
    where
        T: FnMut(usize, usize, usize) -> Vec<f64>,
        L: FnMut(usize) -> Vec<f64>,
        C: Fn(usize) -> bool,
    {
        let n_actions = action_values.len();
        if n_states == 0 || n_actions == 0 || n_latent == 0 {
            return Err(Error::Config(
                "model needs at least one state, action and latent value".into(),
            ));
        }
        let mut tr = Vec::with_capacity(n_states * n_actions * n_latent * n_states);
        for x in 0..n_states {
            for u in 0..n_actions {
                for w in 0..n_latent {
                    let row = transition(x, u, w);
                    if row.len() != n_states {
                        return Err(Error::Encoding(format!(
                            "transition row (x={x}, u={u}, w={w}) has {} entries",
                            row.len()
                        )));
                    }
                    check_row(&row, || format!("transition (x={x}, u={u}, w={w})"))?;
                    tr.extend_from_slice(&row);
                }
            }
        }
        let mut ld = Vec::with_capacity(n_states * n_latent);
        for x in 0..n_states {
            let row = latent(x);
            if row.len() != n_latent {
                return Err(Error::Encoding(format!("latent row x={x} has {} entries", row.len())));
            }
            check_row(&row, || format!("latent distribution x={x}"))?;
            ld.extend_from_slice(&row);
        }
        Ok(Self {
            n_states,
            n_latent,
            action_values,
            transition: tr,
            latent_dist: ld,
            safe: (0..n_states).map(safety).collect(),
            horizon,
        })
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.action_values.len()
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_values(&self) -> &[i64] {
        &self.action_values
    }

    pub fn is_safe(&self, x: usize) -> bool {
        self.safe[x]
    }

    pub fn safety_mask(&self) -> &[bool] {
        &self.safe
    }

    pub fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.n_states {
            return Err(Error::Encoding(format!("unknown state {x} (have {})", self.n_states)));
        }
        Ok(())
    }

    pub fn check_action(&self, u: usize) -> Result<()> {
        if u >= self.n_actions() {
            return Err(Error::Encoding(format!(
                "unknown action {u} (have {})",
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// `P(· | x, u, w)`.
    pub fn transition_row(&self, x: usize, u: usize, w: usize) -> &[f64] {
        let start = ((x * self.n_actions() + u) * self.n_latent + w) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// `P(· | x)` over latent values.
    pub fn latent_row(&self, x: usize) -> &[f64] {
        &self.latent_dist[x * self.n_latent..(x + 1) * self.n_latent]
    }

    /// Online statistics: the latent variable marginalized independently of the action.
    pub fn online_row(&self, x: usize, u: usize) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_action(u)?;
        let mut row = vec![0.0; self.n_states];
        for (w, &pw) in self.latent_row(x).iter().enumerate() {
            if pw == 0.0 {
                continue;
            }
            for (acc, &p) in row.iter_mut().zip(self.transition_row(x, u, w)) {
                *acc += pw * p;
            }
        }
        Ok(row)
    }

    /// `P_online(x' | x, u)`.
    pub fn p_online(&self, x_next: usize, x: usize, u: usize) -> Result<f64> {
        self.check_state(x_next)?;
        Ok(self.online_row(x, u)?[x_next])
    }

    /// Offline statistics under a latent-aware behavioral policy: the latent
    /// value is reweighted by how likely the logged action was under it.
    pub fn offline_row(&self, behavioral: &TabularPolicy, x: usize, u: usize) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_action(u)?;
        let mut num = vec![0.0; self.n_states];
        let mut den = 0.0;
        for (w, &pw) in self.latent_row(x).iter().enumerate() {
            let weight = pw * behavioral.aware_row(x, w)?[u];
            if weight == 0.0 {
                continue;
            }
            den += weight;
            for (acc, &p) in num.iter_mut().zip(self.transition_row(x, u, w)) {
                *acc += weight * p;
            }
        }
        if den <= 0.0 {
            return Err(Error::Positivity(format!("(x={x}, u={u})")));
        }
        num.iter_mut().for_each(|p| *p /= den);
        Ok(num)
    }

    /// `P_offline(x' | x, u)`.
    pub fn p_offline(&self, behavioral: &TabularPolicy, x_next: usize, x: usize, u: usize) -> Result<f64> {
        self.check_state(x_next)?;
        Ok(self.offline_row(behavioral, x, u)?[x_next])
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        sample_categorical(self.latent_row(x), rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: usize, u: usize, w: usize, rng: &mut R) -> usize {
        sample_categorical(self.transition_row(x, u, w), rng)
    }

    /// One step of the true system seen by an online controller: the latent
    /// value is drawn fresh and discarded.
    pub fn step_online<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> usize {
        let w = self.sample_latent(x, rng);
        self.sample_next(x, u, w, rng)
    }
}

/// Dense visible-state kernel `P(x' | x, u)` with explicitly undefined rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleKernel {
    n_states: usize,
    n_actions: usize,
    rows: Vec<Option<Vec<f64>>>,
}

impl VisibleKernel {
    pub fn online(model: &ConfoundedMdpModel) -> Self {
        let (n, na) = (model.n_states(), model.n_actions());
        let rows = (0..n)
            .flat_map(|x| (0..na).map(move |u| (x, u)))
            .map(|(x, u)| model.online_row(x, u).ok())
            .collect();
        Self {
            n_states: n,
            n_actions: na,
            rows,
        }
    }

    /// Exact offline kernel; rows the behavioral policy never reaches stay undefined.
    pub fn offline(model: &ConfoundedMdpModel, behavioral: &TabularPolicy) -> Result<Self> {
        let (n, na) = (model.n_states(), model.n_actions());
        let mut rows = Vec::with_capacity(n * na);
        for x in 0..n {
            for u in 0..na {
                match model.offline_row(behavioral, x, u) {
                    Ok(r) => rows.push(Some(r)),
                    Err(Error::Positivity(_)) => rows.push(None),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self {
            n_states: n,
            n_actions: na,
            rows,
        })
    }

    /// Count-ratio estimate from observed `(x, u, x')` triples.
    pub fn from_counts(n_states: usize, n_actions: usize, counts: &[u64]) -> Self {
        let rows = counts
            .chunks(n_states)
            .map(|c| {
                let total: u64 = c.iter().sum();
                (total > 0).then(|| c.iter().map(|&v| v as f64 / total as f64).collect())
            })
            .collect();
        Self {
            n_states,
            n_actions,
            rows,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, x: usize, u: usize) -> Result<&[f64]> {
        if x >= self.n_states || u >= self.n_actions {
            return Err(Error::Encoding(format!("kernel has no row (x={x}, u={u})")));
        }
        self.rows[x * self.n_actions + u]
            .as_deref()
            .ok_or_else(|| Error::Positivity(format!("(x={x}, u={u})")))
    }
}

/// Transition of the absorbing auxiliary process: the base kernel while the
/// state is safe, a point mass on the current state once it is not, and the
/// remaining time decremented in both cases.
pub fn absorbing_kernel(
    base: &VisibleKernel,
    model: &ConfoundedMdpModel,
    y: AugmentedState,
    u: usize,
) -> Result<Vec<(AugmentedState, f64)>> {
    if y.k == 0 {
        return Err(Error::EndOfEpisode(y.to_string()));
    }
    model.check_state(y.x)?;
    let k = y.k - 1;
    if !model.is_safe(y.x) {
        return Ok(vec![(AugmentedState::new(y.x, k), 1.0)]);
    }
    Ok(base
        .row(y.x, u)?
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(x, &p)| (AugmentedState::new(x, k), p))
        .collect())
}

/// A front-door mediator between action and next state.
///
/// The next visible state depends on the action only through the mediator:
/// `P(x' | x, u, w) = Σ_m P(m | x, u) P(x' | x, m, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediatorModel {
    n_states: usize,
    n_actions: usize,
    n_latent: usize,
    n_mediators: usize,
    /// `[(x * nA + u) * nM + m]`
    mediator_dist: Vec<f64>,
    /// `[((x * nM + m) * nW + w) * nX + x']`
    mediated_transition: Vec<f64>,
}

impl MediatorModel {
    pub fn from_fn<M, T>(
        n_states: usize,
        n_actions: usize,
        n_latent: usize,
        n_mediators: usize,
        mut mediator: M,
        mut transition: T,
    ) -> Result<Self>
    where
        M: FnMut(usize, usize) -> Vec<f64>,
        T: FnMut(usize, usize, usize) -> Vec<f64>,
    {
        let mut md = Vec::with_capacity(n_states * n_actions * n_mediators);
        for x in 0..n_states {
            for u in 0..n_actions {
                let row = mediator(x, u);
                if row.len() != n_mediators {
                    return Err(Error::Encoding(format!("mediator row (x={x}, u={u}) has wrong length")));
                }
                check_row(&row, || format!("mediator (x={x}, u={u})"))?;
                md.extend_from_slice(&row);
            }
        }
        let mut mt = Vec::with_capacity(n_states * n_mediators * n_latent * n_states);
        for x in 0..n_states {
            for m in 0..n_mediators {
                for w in 0..n_latent {
                    let row = transition(x, m, w);
                    if row.len() != n_states {
                        return Err(Error::Encoding(format!(
                            "mediated transition (x={x}, m={m}, w={w}) has wrong length"
                        )));
                    }
                    check_row(&row, || format!("mediated transition (x={x}, m={m}, w={w})"))?;
                    mt.extend_from_slice(&row);
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            n_latent,
            n_mediators,
            mediator_dist: md,
            mediated_transition: mt,
        })
    }

    pub fn n_mediators(&self) -> usize {
        self.n_mediators
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    /// `P(· | x, u)` over mediators.
    pub fn mediator_row(&self, x: usize, u: usize) -> &[f64] {
        let start = (x * self.n_actions + u) * self.n_mediators;
        &self.mediator_dist[start..start + self.n_mediators]
    }

    /// `P(· | x, m, w)` over next visible states.
    pub fn mediated_row(&self, x: usize, m: usize, w: usize) -> &[f64] {
        let start = ((x * self.n_mediators + m) * self.n_latent + w) * self.n_states;
        &self.mediated_transition[start..start + self.n_states]
    }

    /// `P(· | x, u, w)` with the mediator summed out.
    pub fn marginal_row(&self, x: usize, u: usize, w: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        for (m, &pm) in self.mediator_row(x, u).iter().enumerate() {
            for (acc, &p) in row.iter_mut().zip(self.mediated_row(x, m, w)) {
                *acc += pm * p;
            }
        }
        row
    }

    pub fn sample_mediator<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> usize {
        sample_categorical(self.mediator_row(x, u), rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: usize, m: usize, w: usize, rng: &mut R) -> usize {
        sample_categorical(self.mediated_row(x, m, w), rng)
    }

    /// The interventional next-state law given a mediator value:
    /// `Σ_w P(w | x) P(x' | x, m, w)`.
    pub fn online_mediated_row(&self, model: &ConfoundedMdpModel, x: usize, m: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        for (w, &pw) in model.latent_row(x).iter().enumerate() {
            for (acc, &p) in row.iter_mut().zip(self.mediated_row(x, m, w)) {
                *acc += pw * p;
            }
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(latent: Vec<f64>) -> ConfoundedMdpModel {
        ConfoundedMdpModel::from_fn(
            2,
            vec![0, 1],
            latent.len(),
            2,
            |x, u, w| {
                let p = 0.1 + 0.2 * x as f64 + 0.3 * u as f64 + 0.1 * w as f64;
                vec![p, 1.0 - p]
            },
            |_| latent.clone(),
            |x| x == 0,
        )
        .unwrap()
    }

    #[test]
    fn single_latent_online_equals_raw_row() {
        let m = two_state(vec![1.0]);
        for x in 0..2 {
            for u in 0..2 {
                assert_eq!(m.online_row(x, u).unwrap(), m.transition_row(x, u, 0).to_vec());
            }
        }
    }

    #[test]
    fn latent_free_behavior_gives_online_statistics() {
        let m = two_state(vec![0.3, 0.7]);
        let b = TabularPolicy::latent_aware(2, 2, 2, |x, _| vec![0.4 + 0.1 * x as f64, 0.6 - 0.1 * x as f64]).unwrap();
        for x in 0..2 {
            for u in 0..2 {
                let on = m.online_row(x, u).unwrap();
                let off = m.offline_row(&b, x, u).unwrap();
                for (a, b) in on.iter().zip(&off) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_rows_and_indices() {
        let err = ConfoundedMdpModel::from_fn(2, vec![0], 1, 1, |_, _, _| vec![0.5, 0.4], |_| vec![1.0], |_| true);
        assert!(matches!(err, Err(Error::NotNormalized { .. })));
        let m = two_state(vec![1.0]);
        assert!(matches!(m.p_online(0, 5, 0), Err(Error::Encoding(_))));
        assert!(matches!(m.p_online(0, 0, 9), Err(Error::Encoding(_))));
    }

    #[test]
    fn zero_behavioral_support_is_a_positivity_error() {
        let m = two_state(vec![0.5, 0.5]);
        let b = TabularPolicy::latent_aware(2, 2, 2, |_, _| vec![1.0, 0.0]).unwrap();
        assert!(matches!(m.p_offline(&b, 0, 0, 1), Err(Error::Positivity(_))));
        let k = VisibleKernel::offline(&m, &b).unwrap();
        assert!(k.row(0, 0).is_ok());
        assert!(matches!(k.row(0, 1), Err(Error::Positivity(_))));
    }

    #[test]
    fn reward_is_terminal_safe_indicator() {
        let safe = |x: usize| x == 0;
        assert_eq!(reward(AugmentedState::new(0, 0), safe), 1.0);
        assert_eq!(reward(AugmentedState::new(0, 3), safe), 0.0);
        assert_eq!(reward(AugmentedState::new(1, 0), safe), 0.0);
    }

    #[test]
    fn absorbing_kernel_branches() {
        let m = two_state(vec![0.5, 0.5]);
        let on = VisibleKernel::online(&m);
        let unsafe_row = absorbing_kernel(&on, &m, AugmentedState::new(1, 2), 0).unwrap();
        assert_eq!(unsafe_row, vec![(AugmentedState::new(1, 1), 1.0)]);
        let safe_row = absorbing_kernel(&on, &m, AugmentedState::new(0, 2), 1).unwrap();
        let expect = m.online_row(0, 1).unwrap();
        for (y, p) in safe_row {
            assert_eq!(y.k, 1);
            assert_eq!(p, expect[y.x]);
        }
        assert!(matches!(
            absorbing_kernel(&on, &m, AugmentedState::new(0, 0), 0),
            Err(Error::EndOfEpisode(_))
        ));
    }
}
