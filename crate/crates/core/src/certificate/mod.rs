//! The Q-margin safety certificate, safe-action selection, the online
//! control loop, and a discrete-time control barrier function baseline.
//!
//! For a latent-blind policy `π` with Q function `Q`, the margin of action
//! `u` at augmented state `ŷ` is `S = Q(ŷ, u) - Σ_u' π(u'|ŷ) Q(ŷ, u')`.
//! Executing only actions with `S >= 0` keeps the long-term safe probability
//! from falling below its initial value.

pub mod dtcbf;

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::causal_q::EstimatedQ;
use crate::error::{Error, Result};
use crate::model::{AugmentedState, ConfoundedMdpModel, VisibleKernel};
use crate::oracle::TabularQ;
use crate::policy::TabularPolicy;
use crate::rng::stream;

pub use dtcbf::{driving_barrier, dtcbf_condition, dtcbf_h, DtcbfController, DtcbfParams};

/// Feasibility slack for Q tables computed exactly.
pub const ORACLE_SLACK: f64 = 1e-12;

/// Source of `Q(ŷ, u)` values.
pub trait QFunction: Sync {
    fn n_actions(&self) -> usize;
    fn q(&self, y: AugmentedState, u: usize) -> Option<f64>;
}

impl QFunction for TabularQ {
    fn n_actions(&self) -> usize {
        TabularQ::n_actions(self)
    }

    fn q(&self, y: AugmentedState, u: usize) -> Option<f64> {
        (y.x < self.n_states() && y.k <= self.horizon() && u < TabularQ::n_actions(self)).then(|| self.get(y, u))
    }
}

impl QFunction for EstimatedQ {
    fn n_actions(&self) -> usize {
        EstimatedQ::n_actions(self)
    }

    fn q(&self, y: AugmentedState, u: usize) -> Option<f64> {
        self.get(y, u)
    }
}

fn q_row(q: &dyn QFunction, y: AugmentedState) -> Result<Vec<f64>> {
    (0..q.n_actions())
        .map(|u| {
            q.q(y, u)
                .ok_or_else(|| Error::CertificateUnavailable(format!("no Q value for u={u} at {y}")))
        })
        .collect()
}

/// Margins `S(ŷ, u)` for every action. Requires `k >= 1`.
pub fn margins(q: &dyn QFunction, pi: &TabularPolicy, y: AugmentedState) -> Result<Vec<f64>> {
    if y.k == 0 {
        return Err(Error::EndOfEpisode(y.to_string()));
    }
    let row = q_row(q, y)?;
    let probs = pi.row(y)?;
    if probs.len() != row.len() {
        return Err(Error::Config(
            "policy and Q function disagree on the action count".into(),
        ));
    }
    let baseline: f64 = probs.iter().zip(&row).map(|(p, q)| p * q).sum();
    Ok(row.iter().map(|q| q - baseline).collect())
}

pub fn safety_margin(q: &dyn QFunction, pi: &TabularPolicy, y: AugmentedState, u: usize) -> Result<f64> {
    margins(q, pi, y)?
        .get(u)
        .copied()
        .ok_or_else(|| Error::Encoding(format!("action index {u} out of range")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// Feasible action closest to the nominal one.
    NearestNominal,
    /// Feasible action with the largest action value.
    MaxAction,
}

/// Penalty `J(u_n, u)` on deviating from the nominal action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviationPenalty {
    /// `|u - u_n|` on action values.
    #[default]
    Absolute,
}

impl DeviationPenalty {
    pub fn cost(self, nominal: i64, u: i64) -> i64 {
        match self {
            DeviationPenalty::Absolute => (u - nominal).abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateConfig {
    pub epsilon: f64,
    pub feasibility_slack: f64,
    #[serde(default)]
    pub deviation_penalty: DeviationPenalty,
    pub selection_mode: SelectionMode,
}

impl CertificateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.feasibility_slack.is_nan() || self.feasibility_slack < 0.0 {
            return Err(Error::Config(format!(
                "negative feasibility slack {}",
                self.feasibility_slack
            )));
        }
        Ok(())
    }
}

/// Outcome of one action selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub u: usize,
    /// Certificate margin of the chosen action, when the controller has one.
    pub margin: Option<f64>,
    /// False when no action met the controller's condition.
    pub feasible: bool,
}

/// Picks an action with `S >= -slack`.
///
/// When nothing is feasible (possible only with estimated Q), falls back to
/// the action with the largest Q value and marks the decision infeasible.
pub fn safe_action(
    q: &dyn QFunction,
    pi: &TabularPolicy,
    config: &CertificateConfig,
    action_values: &[i64],
    y: AugmentedState,
    u_nominal: usize,
) -> Result<Decision> {
    let s = margins(q, pi, y)?;
    if action_values.len() != s.len() || u_nominal >= s.len() {
        return Err(Error::Encoding("action set does not match the Q function".into()));
    }
    let feasible: Vec<usize> = (0..s.len()).filter(|&u| s[u] >= -config.feasibility_slack).collect();
    let chosen = match config.selection_mode {
        SelectionMode::NearestNominal => feasible.iter().copied().min_by(|&a, &b| {
            let cost = |u: usize| {
                config
                    .deviation_penalty
                    .cost(action_values[u_nominal], action_values[u])
            };
            cost(a)
                .cmp(&cost(b))
                .then(s[b].total_cmp(&s[a]))
                .then(action_values[a].cmp(&action_values[b]))
        }),
        SelectionMode::MaxAction => feasible.iter().copied().max_by_key(|&u| action_values[u]),
    };
    if let Some(u) = chosen {
        return Ok(Decision {
            u,
            margin: Some(s[u]),
            feasible: true,
        });
    }
    let row = q_row(q, y)?;
    let u = (0..row.len())
        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
        .expect("nonempty action set");
    warn!("no action meets the certificate at {y}; falling back to u={u}");
    Ok(Decision {
        u,
        margin: Some(s[u]),
        feasible: false,
    })
}

/// Maps the observed state, time and nominal action to the executed action.
pub trait Controller: Sync {
    fn act(&self, x: usize, t: usize, u_nominal: usize) -> Result<Decision>;
}

/// The proposed controller: certificate-constrained selection under `π`.
pub struct CertificateController<Q> {
    pub q: Q,
    pub pi: TabularPolicy,
    pub config: CertificateConfig,
    pub action_values: Vec<i64>,
    pub horizon: usize,
}

impl<Q: QFunction> Controller for CertificateController<Q> {
    fn act(&self, x: usize, t: usize, u_nominal: usize) -> Result<Decision> {
        if t >= self.horizon {
            return Err(Error::EndOfEpisode(format!("t={t}")));
        }
        let y = AugmentedState::at_time(x, t, self.horizon);
        safe_action(&self.q, &self.pi, &self.config, &self.action_values, y, u_nominal)
    }
}

/// The controller as a latent-blind policy: the nominal draw is marginalized
/// out, so row `(x, k)` puts `π^n(u_n | x, k)` on the action chosen for `u_n`.
///
/// The controller is queried only on safe states the absorbing process can
/// reach from `x0`; every other row, and every row at `k = 0`, repeats the
/// nominal policy. Those rows never influence the absorbing process.
pub fn controller_policy(
    controller: &dyn Controller,
    model: &ConfoundedMdpModel,
    nominal: &TabularPolicy,
    x0: usize,
) -> Result<TabularPolicy> {
    model.check_state(x0)?;
    let (n, na, h) = (model.n_states(), model.n_actions(), model.horizon());
    let kernel = VisibleKernel::online(model);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity((h + 1) * n);
    for k in 0..=h {
        for x in 0..n {
            rows.push(nominal.row(AugmentedState::new(x, k))?.to_vec());
        }
    }
    let mut support = vec![false; n];
    support[x0] = true;
    for t in 0..h {
        let k = h - t;
        let mut next = vec![false; n];
        for x in (0..n).filter(|&x| support[x]) {
            if !model.is_safe(x) {
                next[x] = true;
                continue;
            }
            let mut row = vec![0.0; na];
            for (un, &p) in nominal.row(AugmentedState::new(x, k))?.iter().enumerate() {
                if p > 0.0 {
                    row[controller.act(x, t, un)?.u] += p;
                }
            }
            for u in (0..na).filter(|&u| row[u] > 0.0) {
                for (xn, &p) in kernel.row(x, u)?.iter().enumerate() {
                    next[xn] |= p > 0.0;
                }
            }
            rows[k * n + x] = row;
        }
        support = next;
    }
    let mut rows = rows.into_iter();
    TabularPolicy::latent_blind(n, h, na, |_, _| rows.next().expect("one row per state"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: usize,
    pub u_nominal: usize,
    pub u: usize,
    #[serde(rename = "S")]
    pub margin: Option<f64>,
    pub feasible: bool,
}

/// One controlled episode under the true dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    /// Visible states `x_0..=x_H`.
    pub x: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    /// Whether every visited state is safe.
    pub fn always_safe(&self, model: &ConfoundedMdpModel) -> bool {
        self.x.iter().all(|&x| model.is_safe(x))
    }

    pub fn feasibility_violations(&self) -> usize {
        self.steps.iter().filter(|s| !s.feasible).count()
    }
}

/// Runs one episode: at each `t < H` the nominal action is drawn from
/// `π^n`, the controller picks the executed action, and the next state
/// follows the online dynamics with a fresh latent draw that the controller
/// never sees.
pub fn run_control_episode(
    model: &ConfoundedMdpModel,
    controller: &dyn Controller,
    nominal: &TabularPolicy,
    x0: usize,
    seed: u64,
) -> Result<Trajectory> {
    model.check_state(x0)?;
    let h = model.horizon();
    let mut rng = stream(seed);
    let mut xs = Vec::with_capacity(h + 1);
    let mut steps = Vec::with_capacity(h);
    let mut x = x0;
    xs.push(x);
    for t in 0..h {
        let u_nominal = nominal.sample(AugmentedState::at_time(x, t, h), &mut rng)?;
        let d = controller.act(x, t, u_nominal)?;
        steps.push(StepRecord {
            t,
            x,
            u_nominal,
            u: d.u,
            margin: d.margin,
            feasible: d.feasible,
        });
        x = model.step_online(x, d.u, &mut rng);
        xs.push(x);
    }
    Ok(Trajectory { seed, x: xs, steps })
}

/// One trajectory per line.
pub fn write_trajectories<W: Write>(trajectories: &[Trajectory], mut out: W) -> Result<()> {
    for tr in trajectories {
        serde_json::to_writer(&mut out, tr)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
