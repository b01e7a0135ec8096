//! Front-door estimation of online quantities from confounded offline tables.
//!
//! When the action reaches the next state only through an observed mediator
//! `m`, the online kernel is identified as
//! `Σ_m P(m | u, ŷ) Σ_u' P(u' | ŷ) P(ŷ' | u', m, ŷ)` with every factor an
//! offline statistic. Fitted Q iteration regresses `r(ŷ) + V̂(ŷ')` on
//! `(ŷ, u, m)`. The regression recovers the offline-conditioned table
//! `Q_reg(ŷ, u, m)`, which still depends on the logged action through the
//! latent variable. Averaging it over `P(u' | ŷ)` gives the interventional
//! `Q_M(ŷ, m)` that enters the value reconstruction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{reward, AugmentedState};
use crate::policy::TabularPolicy;
use crate::tables::OfflineTables;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 1000;

/// `P̃_online(ŷ' | ŷ, u)` by the front-door formula. Requires `k >= 1`.
pub fn front_door_online_kernel(
    tables: &OfflineTables,
    y: AugmentedState,
    u: usize,
) -> Result<Vec<(AugmentedState, f64)>> {
    if y.k == 0 {
        return Err(Error::EndOfEpisode(y.to_string()));
    }
    let actions = tables.action_dist(y)?;
    let mut out: BTreeMap<AugmentedState, f64> = BTreeMap::new();
    for &(m, pm) in &tables.mediator_dist(y, u)?.probs {
        for &(u2, pu2) in &actions.probs {
            let next = tables
                .next_given_um(y, u2, m)
                .ok_or_else(|| Error::Positivity(format!("no logged transition for (u={u2}, m={m}) at {y}")))?;
            for &(yn, p) in &next.probs {
                *out.entry(yn).or_default() += pm * pu2 * p;
            }
        }
    }
    Ok(out.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedQm {
    /// Per-cell least-squares fit `Q_reg(ŷ, u, m)` on observed cells.
    pub regression: BTreeMap<(AugmentedState, usize, usize), f64>,
    /// `Q_M(ŷ, m) = Σ_u' P(u' | ŷ) Q_reg(ŷ, u', m)` for every logged `ŷ` with `k >= 1`.
    pub interventional: BTreeMap<(AugmentedState, usize), f64>,
    pub iterations: usize,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
    /// Unobserved cells that were read as zero.
    pub warnings: Vec<String>,
}

impl FittedQm {
    pub fn get(&self, y: AugmentedState, m: usize) -> Option<f64> {
        self.interventional.get(&(y, m)).copied()
    }

    /// Columns `x,k,u,m,value`.
    pub fn write_regression_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "k", "u", "m", "value"])?;
        for (&(y, u, m), v) in &self.regression {
            w.write_record([
                y.x.to_string(),
                y.k.to_string(),
                u.to_string(),
                m.to_string(),
                v.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `x,k,m,value`.
    pub fn write_interventional_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "k", "m", "value"])?;
        for (&(y, m), v) in &self.interventional {
            w.write_record([y.x.to_string(), y.k.to_string(), m.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Front-door value reconstruction
/// `V̂(ŷ) = Σ_u π(u|ŷ) Σ_m P(m|u,ŷ) Σ_u' P(u'|ŷ) Q_M(ŷ, u', m)`.
///
/// `qm` returns `None` for cells it does not cover; those count as zero and
/// are reported through `missing`.
pub fn value_from_qm(
    tables: &OfflineTables,
    pi: &TabularPolicy,
    y: AugmentedState,
    qm: &dyn Fn(AugmentedState, usize, usize) -> Option<f64>,
    mut missing: impl FnMut(AugmentedState, usize, usize),
) -> Result<f64> {
    let actions = tables.action_dist(y)?;
    let mut total = 0.0;
    for (u, &pu) in pi.row(y)?.iter().enumerate() {
        if pu == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for &(m, pm) in &tables.mediator_dist(y, u)?.probs {
            for &(u2, pu2) in &actions.probs {
                let q = qm(y, u2, m).unwrap_or_else(|| {
                    missing(y, u2, m);
                    0.0
                });
                inner += pm * pu2 * q;
            }
        }
        total += pu * inner;
    }
    Ok(total)
}

/// Fitted Q iteration for the mediator-conditioned Q function.
///
/// Starts from zero and alternates value reconstruction with a tabular
/// least-squares refit, whose minimizer is the conditional mean of
/// `r(ŷ) + V̂(ŷ')` given the cell. The mean is taken through the count-ratio
/// tables, so replicating the data leaves every value bit-identical. Terminal
/// states take value `r(ŷ)` and unsafe states value zero.
pub fn fitted_qm(
    tables: &OfflineTables,
    pi: &TabularPolicy,
    safety: impl Fn(usize) -> bool + Sync,
    tolerance: f64,
    max_iters: usize,
) -> Result<FittedQm> {
    if !tables.has_mediators() {
        return Err(Error::Unsupported("fitted Q_M needs mediator tables".into()));
    }
    if !pi.is_latent_blind() {
        return Err(Error::Config("fitted Q_M is defined for latent-blind policies".into()));
    }
    let cells: Vec<_> = tables.mediated_cells().collect();
    if cells.is_empty() {
        return Err(Error::Positivity("dataset has no transitions".into()));
    }
    let rows: Vec<_> = cells
        .iter()
        .map(|&(y, u, m)| tables.next_given_um(y, u, m).expect("cell listed by the tables"))
        .collect();
    let successors: Vec<AugmentedState> = rows
        .iter()
        .flat_map(|r| r.probs.iter().map(|&(yn, _)| yn))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<_, _> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let mut q = vec![0.0; cells.len()];
    let mut missing = BTreeSet::new();
    let value = |q: &[f64], y: AugmentedState, missing: &mut Vec<(AugmentedState, usize, usize)>| -> Result<f64> {
        if y.k == 0 {
            return Ok(reward(y, &safety));
        }
        if !safety(y.x) {
            return Ok(0.0);
        }
        value_from_qm(
            tables,
            pi,
            y,
            &|y, u, m| index.get(&(y, u, m)).map(|&i| q[i]),
            |y, u, m| missing.push((y, u, m)),
        )
    };

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < max_iters {
        let v_next: Vec<(f64, Vec<_>)> = successors
            .par_iter()
            .map(|&yn| {
                let mut miss = Vec::new();
                value(&q, yn, &mut miss).map(|v| (v, miss))
            })
            .collect::<Result<_>>()?;
        let mut v_hat = BTreeMap::new();
        for (&yn, (v, miss)) in successors.iter().zip(v_next) {
            v_hat.insert(yn, v);
            missing.extend(miss);
        }
        let updated: Vec<f64> = cells
            .par_iter()
            .zip(rows.par_iter())
            .map(|(&(y, _, _), row)| {
                let target = reward(y, &safety) + row.probs.iter().map(|&(yn, p)| p * v_hat[&yn]).sum::<f64>();
                target.clamp(0.0, 1.0)
            })
            .collect();
        residual = updated.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = updated;
        iterations += 1;
        if residual < tolerance {
            break;
        }
    }
    if residual >= tolerance {
        return Err(Error::NonConvergence { iterations, residual });
    }

    let regression: BTreeMap<_, _> = cells.iter().copied().zip(q.iter().copied()).collect();
    let mut interventional = BTreeMap::new();
    for y in tables.states() {
        let actions = tables.action_dist(y)?;
        let mediators: BTreeSet<usize> = (0..tables.n_actions())
            .filter_map(|u| tables.mediator_dist(y, u).ok())
            .flat_map(|d| d.probs.iter().map(|&(m, _)| m))
            .collect();
        for m in mediators {
            let v = if safety(y.x) {
                actions
                    .probs
                    .iter()
                    .map(|&(u2, p)| {
                        p * regression.get(&(y, u2, m)).copied().unwrap_or_else(|| {
                            missing.insert((y, u2, m));
                            0.0
                        })
                    })
                    .sum()
            } else {
                0.0
            };
            interventional.insert((y, m), v);
        }
    }
    let warnings: Vec<String> = missing
        .into_iter()
        .map(|(y, u, m)| format!("cell (y={y}, u={u}, m={m}) unobserved; read as 0"))
        .collect();
    for w in &warnings {
        warn!("{w}");
    }
    Ok(FittedQm {
        regression,
        interventional,
        iterations,
        residual,
        warnings,
    })
}

/// `Q̂(ŷ, u) = Σ_m P(m | u, ŷ) Q_M(ŷ, m)`. Requires `k >= 1`.
pub fn q_from_qm(fitted: &FittedQm, tables: &OfflineTables, y: AugmentedState, u: usize) -> Result<f64> {
    if y.k == 0 {
        return Err(Error::EndOfEpisode(y.to_string()));
    }
    let mut q = 0.0;
    for &(m, pm) in &tables.mediator_dist(y, u)?.probs {
        let qm = fitted
            .get(y, m)
            .ok_or_else(|| Error::Positivity(format!("no fitted value for m={m} at {y}")))?;
        q += pm * qm;
    }
    Ok(q)
}

/// A Q table over the augmented states and actions the data supports.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedQ {
    n_actions: usize,
    values: BTreeMap<(AugmentedState, usize), f64>,
}

impl EstimatedQ {
    /// Reconstructs `Q̂` on every `(ŷ, u)` with a mediator row.
    pub fn from_fitted(fitted: &FittedQm, tables: &OfflineTables) -> Result<Self> {
        let mut values = BTreeMap::new();
        for y in tables.states() {
            for u in 0..tables.n_actions() {
                if tables.mediator_dist(y, u).is_ok() {
                    values.insert((y, u), q_from_qm(fitted, tables, y, u)?);
                }
            }
        }
        Ok(Self {
            n_actions: tables.n_actions(),
            values,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, y: AugmentedState, u: usize) -> Option<f64> {
        self.values.get(&(y, u)).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Columns `x,k,u,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "k", "u", "value"])?;
        for (&(y, u), v) in &self.values {
            w.write_record([y.x.to_string(), y.k.to_string(), u.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, n_actions: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut values = BTreeMap::new();
        for record in r.deserialize() {
            let (x, k, u, value): (usize, usize, usize, f64) = record?;
            if u >= n_actions {
                return Err(Error::Encoding(format!("action index {u} out of range")));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Form(format!("Q value {value} outside [0, 1]")));
            }
            values.insert((AugmentedState::new(x, k), u), value);
        }
        Ok(Self { n_actions, values })
    }
}
