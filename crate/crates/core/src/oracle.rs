//! Exact long-term safe probabilities by backward dynamic programming over the
//! absorbing auxiliary process, plus trajectory enumeration for small models.
//!
//! Unsafe states are collapsed into a single absorbing sentinel of value zero:
//! the DP only ever stores transitions between safe states, and mass leaving
//! the safe set is dropped.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{AugmentedState, ConfoundedMdpModel, MediatorModel, VisibleKernel};
use crate::policy::{PolicyKind, TabularPolicy};

/// `V(x, k)` for `k` in `0..=H`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularV {
    n_states: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl TabularV {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, y: AugmentedState) -> f64 {
        self.values[y.k * self.n_states + y.x]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "k", "value"])?;
        for k in 0..=self.horizon {
            for x in 0..self.n_states {
                let v = self.get(AugmentedState::new(x, k));
                w.write_record([x.to_string(), k.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `Q(y, u)` for every augmented state and action.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    n_states: usize,
    horizon: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl TabularQ {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, y: AugmentedState, u: usize) -> f64 {
        self.values[(y.k * self.n_states + y.x) * self.n_actions + u]
    }

    pub fn row(&self, y: AugmentedState) -> &[f64] {
        let start = (y.k * self.n_states + y.x) * self.n_actions;
        &self.values[start..start + self.n_actions]
    }

    /// Applies `f` to every entry; used to probe invariance of action selection.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "k", "u", "value"])?;
        for k in 0..=self.horizon {
            for x in 0..self.n_states {
                for u in 0..self.n_actions {
                    let v = self.get(AugmentedState::new(x, k), u);
                    w.write_record([x.to_string(), k.to_string(), u.to_string(), v.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `Q_M(y, u, m)`: the Q function additionally conditioned on the mediator.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQm {
    n_states: usize,
    horizon: usize,
    n_actions: usize,
    n_mediators: usize,
    values: Vec<f64>,
}

impl TabularQm {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_mediators(&self) -> usize {
        self.n_mediators
    }

    pub fn get(&self, y: AugmentedState, u: usize, m: usize) -> f64 {
        self.values[((y.k * self.n_states + y.x) * self.n_actions + u) * self.n_mediators + m]
    }
}

/// Transitions between safe states under the online statistics.
struct SafeKernel {
    /// `rows[x * nA + u]`: `(x', p)` pairs with `x'` safe; empty for unsafe `x`.
    rows: Vec<Vec<(usize, f64)>>,
    n_actions: usize,
}

impl SafeKernel {
    fn new(model: &ConfoundedMdpModel) -> Result<Self> {
        let kernel = VisibleKernel::online(model);
        let na = model.n_actions();
        let mut rows = Vec::with_capacity(model.n_states() * na);
        for x in 0..model.n_states() {
            for u in 0..na {
                if !model.is_safe(x) {
                    rows.push(Vec::new());
                    continue;
                }
                rows.push(
                    kernel
                        .row(x, u)?
                        .iter()
                        .enumerate()
                        .filter(|&(xn, &p)| p > 0.0 && model.is_safe(xn))
                        .map(|(xn, &p)| (xn, p))
                        .collect(),
                );
            }
        }
        Ok(Self { rows, n_actions: na })
    }

    fn row(&self, x: usize, u: usize) -> &[(usize, f64)] {
        &self.rows[x * self.n_actions + u]
    }
}

fn check_policy(model: &ConfoundedMdpModel, pi: &TabularPolicy) -> Result<()> {
    match pi.kind() {
        PolicyKind::LatentBlind { n_states, horizon } => {
            if n_states != model.n_states() || horizon < model.horizon() || pi.n_actions() != model.n_actions() {
                return Err(Error::Config(format!(
                    "policy shape ({n_states} states, horizon {horizon}, {} actions) does not cover the model",
                    pi.n_actions()
                )));
            }
            Ok(())
        }
        PolicyKind::LatentAware { .. } => Err(Error::Config(
            "value functions are defined for latent-blind policies only".into(),
        )),
    }
}

/// Backward sweep producing both `V^π` and `Q^π`.
pub fn solve(model: &ConfoundedMdpModel, pi: &TabularPolicy) -> Result<(TabularV, TabularQ)> {
    check_policy(model, pi)?;
    let n = model.n_states();
    let na = model.n_actions();
    let h = model.horizon();
    let kernel = SafeKernel::new(model)?;
    let mut v = vec![0.0; (h + 1) * n];
    let mut q = vec![0.0; (h + 1) * n * na];
    for x in 0..n {
        let terminal = if model.is_safe(x) { 1.0 } else { 0.0 };
        v[x] = terminal;
        q[x * na..(x + 1) * na].fill(terminal);
    }
    for k in 1..=h {
        let (done, rest) = v.split_at_mut(k * n);
        let prev = &done[(k - 1) * n..];
        let cur = &mut rest[..n];
        for x in (0..n).filter(|&x| model.is_safe(x)) {
            let qrow = &mut q[(k * n + x) * na..(k * n + x + 1) * na];
            for (u, slot) in qrow.iter_mut().enumerate() {
                *slot = kernel.row(x, u).iter().map(|&(xn, p)| p * prev[xn]).sum();
            }
            let probs = pi.row(AugmentedState::new(x, k))?;
            cur[x] = probs.iter().zip(qrow.iter()).map(|(p, q)| p * q).sum();
        }
    }
    Ok((
        TabularV {
            n_states: n,
            horizon: h,
            values: v,
        },
        TabularQ {
            n_states: n,
            horizon: h,
            n_actions: na,
            values: q,
        },
    ))
}

pub fn value_dp(model: &ConfoundedMdpModel, pi: &TabularPolicy) -> Result<TabularV> {
    Ok(solve(model, pi)?.0)
}

pub fn q_dp(model: &ConfoundedMdpModel, pi: &TabularPolicy) -> Result<TabularQ> {
    Ok(solve(model, pi)?.1)
}

/// Mediator-conditioned Q under the interventional (online) law
/// `P(x' | x, m) = Σ_w P(w | x) P(x' | x, m, w)`.
pub fn qm_dp(model: &ConfoundedMdpModel, mediator: Option<&MediatorModel>, pi: &TabularPolicy) -> Result<TabularQm> {
    let med = mediator.ok_or_else(|| Error::Unsupported("environment has no mediator".into()))?;
    let v = value_dp(model, pi)?;
    let n = model.n_states();
    let na = model.n_actions();
    let nm = med.n_mediators();
    let h = model.horizon();
    let mut values = vec![0.0; (h + 1) * n * na * nm];
    let rows: Vec<Vec<f64>> = (0..n * nm)
        .map(|i| med.online_mediated_row(model, i / nm, i % nm))
        .collect();
    for k in 0..=h {
        for x in 0..n {
            for u in 0..na {
                for m in 0..nm {
                    let value = if k == 0 {
                        if model.is_safe(x) {
                            1.0
                        } else {
                            0.0
                        }
                    } else if model.is_safe(x) {
                        rows[x * nm + m]
                            .iter()
                            .enumerate()
                            .map(|(xn, &p)| p * v.get(AugmentedState::new(xn, k - 1)))
                            .sum()
                    } else {
                        0.0
                    };
                    values[((k * n + x) * na + u) * nm + m] = value;
                }
            }
        }
    }
    Ok(TabularQm {
        n_states: n,
        horizon: h,
        n_actions: na,
        n_mediators: nm,
        values,
    })
}

/// Upper bound on the number of visible trajectories [`brute_force_psi`] enumerates.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

/// Long-term safe probability from time `t` by summing over every visible
/// trajectory under the raw online kernel (no absorption).
pub fn brute_force_psi(model: &ConfoundedMdpModel, pi: &TabularPolicy, x: usize, t: usize) -> Result<f64> {
    check_policy(model, pi)?;
    model.check_state(x)?;
    let h = model.horizon();
    if t > h {
        return Err(Error::Config(format!("time {t} beyond horizon {h}")));
    }
    let n = model.n_states();
    let steps = h - t;
    let count = (n as f64).powi(steps as i32);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::TooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    // Policy-averaged one-step kernels, one per time step.
    let mut step_kernels = Vec::with_capacity(steps);
    for tau in t..h {
        let k = h - tau;
        let mut kern = vec![0.0; n * n];
        for xs in 0..n {
            let probs = pi.row(AugmentedState::new(xs, k))?;
            for (u, &pu) in probs.iter().enumerate() {
                for (xn, p) in model.online_row(xs, u)?.into_iter().enumerate() {
                    kern[xs * n + xn] += pu * p;
                }
            }
        }
        step_kernels.push(kern);
    }
    let mut total = 0.0;
    let mut seq = vec![0usize; steps];
    'outer: loop {
        let mut all_safe = model.is_safe(x);
        let mut weight = 1.0;
        let mut prev = x;
        for (i, &xn) in seq.iter().enumerate() {
            all_safe &= model.is_safe(xn);
            weight *= step_kernels[i][prev * n + xn];
            prev = xn;
        }
        if all_safe {
            total += weight;
        }
        for digit in seq.iter_mut().rev() {
            *digit += 1;
            if *digit < n {
                continue 'outer;
            }
            *digit = 0;
        }
        break;
    }
    Ok(total)
}

/// One step of the absorbing online process from the time-`s` distribution.
fn advance(
    model: &ConfoundedMdpModel,
    kernel: &VisibleKernel,
    controller: &TabularPolicy,
    dist: &[f64],
    s: usize,
) -> Result<Vec<f64>> {
    let h = model.horizon();
    let mut next = vec![0.0; dist.len()];
    for (x, &px) in dist.iter().enumerate() {
        if px == 0.0 {
            continue;
        }
        if !model.is_safe(x) {
            next[x] += px;
            continue;
        }
        for (u, &pu) in controller.row(AugmentedState::at_time(x, s, h))?.iter().enumerate() {
            if pu == 0.0 {
                continue;
            }
            for (xn, &p) in kernel.row(x, u)?.iter().enumerate() {
                next[xn] += px * pu * p;
            }
        }
    }
    Ok(next)
}

/// Exact distribution of the visible state after `steps` steps of the
/// absorbing online process, starting from `x0` and acting with `controller`.
pub fn propagate(model: &ConfoundedMdpModel, controller: &TabularPolicy, x0: usize, steps: usize) -> Result<Vec<f64>> {
    check_policy(model, controller)?;
    model.check_state(x0)?;
    let kernel = VisibleKernel::online(model);
    let mut dist = vec![0.0; model.n_states()];
    dist[x0] = 1.0;
    for s in 0..steps.min(model.horizon()) {
        dist = advance(model, &kernel, controller, &dist, s)?;
    }
    Ok(dist)
}

/// Probability that every state stays safe when `controller` acts for the
/// first `t` steps and `pi` for the rest.
pub fn mixed_policy_long_term_safety(
    model: &ConfoundedMdpModel,
    controller: &TabularPolicy,
    pi: &TabularPolicy,
    t: usize,
    x0: usize,
) -> Result<f64> {
    let h = model.horizon();
    if t > h {
        return Err(Error::Config(format!("time {t} beyond horizon {h}")));
    }
    let v = value_dp(model, pi)?;
    let dist = propagate(model, controller, x0, t)?;
    Ok(expect_v(&dist, &v, h - t))
}

fn expect_v(dist: &[f64], v: &TabularV, k: usize) -> f64 {
    dist.iter()
        .enumerate()
        .map(|(x, &p)| p * v.get(AugmentedState::new(x, k)))
        .sum()
}

/// [`mixed_policy_long_term_safety`] for every `t` in `0..=H`, sharing one
/// forward propagation.
pub fn long_term_curve(
    model: &ConfoundedMdpModel,
    controller: &TabularPolicy,
    v: &TabularV,
    x0: usize,
) -> Result<Vec<f64>> {
    check_policy(model, controller)?;
    model.check_state(x0)?;
    let h = model.horizon();
    let kernel = VisibleKernel::online(model);
    let mut dist = vec![0.0; model.n_states()];
    dist[x0] = 1.0;
    let mut curve = Vec::with_capacity(h + 1);
    for s in 0..=h {
        curve.push(expect_v(&dist, v, h - s));
        if s < h {
            dist = advance(model, &kernel, controller, &dist, s)?;
        }
    }
    Ok(curve)
}
