//! Monte Carlo and exact evaluation of controllers under the online dynamics.
//!
//! Per-time metrics:
//! - `instantaneous`: fraction of trajectories with `C(x_t)`;
//! - `cumulative`: fraction safe at every step through `t`;
//! - `long-term-hybrid`: `1{x_0..x_{t-1} safe} V(x_t, H - t)`, where the
//!   controller acts before `t` and the nominal policy after it;
//! - `long-term-mc`: the same event sampled, by continuing each trajectory
//!   from `x_t` under the nominal policy;
//! - `long-term-exact`: the hybrid quantity computed without sampling.
//!
//! Each batch yields a mean per time step; the reported mean is the average
//! of batch means and the 95% interval is `1.96 · sd / √batches`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{controller_policy, run_control_episode, Controller};
use crate::error::{Error, Result};
use crate::model::{AugmentedState, ConfoundedMdpModel};
use crate::oracle::{long_term_curve, TabularV};
use crate::policy::TabularPolicy;
use crate::rng::{split_seed, stream};

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerId {
    ProposedOracleQ,
    ProposedFittedQ,
    Dtcbf,
}

impl ControllerId {
    pub fn as_str(self) -> &'static str {
        match self {
            ControllerId::ProposedOracleQ => "proposed-oracle-q",
            ControllerId::ProposedFittedQ => "proposed-fitted-q",
            ControllerId::Dtcbf => "dtcbf",
        }
    }
}

impl fmt::Display for ControllerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed-oracle-q" => Ok(ControllerId::ProposedOracleQ),
            "proposed-fitted-q" => Ok(ControllerId::ProposedFittedQ),
            "dtcbf" => Ok(ControllerId::Dtcbf),
            other => Err(Error::Config(format!("unknown controller '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Instantaneous,
    Cumulative,
    LongTermHybrid,
    LongTermMc,
    LongTermExact,
}

impl Metric {
    pub const SAMPLED: [Metric; 4] = [
        Metric::Instantaneous,
        Metric::Cumulative,
        Metric::LongTermHybrid,
        Metric::LongTermMc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Instantaneous => "instantaneous",
            Metric::Cumulative => "cumulative",
            Metric::LongTermHybrid => "long-term-hybrid",
            Metric::LongTermMc => "long-term-mc",
            Metric::LongTermExact => "long-term-exact",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::LongTermExact]
            .into_iter()
            .chain(Metric::SAMPLED)
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Form(format!("unknown metric '{s}'")))
    }
}

/// Per-time mean and 95% half-width of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub metric: Metric,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl Curve {
    pub fn exact(values: Vec<f64>) -> Self {
        Self {
            metric: Metric::LongTermExact,
            half_width: vec![0.0; values.len()],
            mean: values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub batches: usize,
    pub trajectories: usize,
    pub x0: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub env: String,
    pub controller: ControllerId,
    pub horizon: usize,
    pub epsilon: f64,
    pub batches: usize,
    pub trajectories: usize,
    pub x0: Vec<i64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub metadata: Metadata,
    pub curves: Vec<Curve>,
}

impl ExperimentResult {
    pub fn curve(&self, metric: Metric) -> Option<&Curve> {
        self.curves.iter().find(|c| c.metric == metric)
    }
}

/// Per-trajectory indicators for every metric, `[metric][t]`.
fn trajectory_metrics(
    model: &ConfoundedMdpModel,
    controller: &dyn Controller,
    nominal: &TabularPolicy,
    v: &TabularV,
    x0: usize,
    seed: u64,
) -> Result<[Vec<f64>; 4]> {
    let h = model.horizon();
    let tr = run_control_episode(model, controller, nominal, x0, split_seed(seed, 0))?;
    let mut inst = Vec::with_capacity(h + 1);
    let mut cum = Vec::with_capacity(h + 1);
    let mut hybrid = Vec::with_capacity(h + 1);
    let mut mc = Vec::with_capacity(h + 1);
    let mut prefix_safe = true;
    for t in 0..=h {
        let x = tr.x[t];
        hybrid.push(if prefix_safe {
            v.get(AugmentedState::at_time(x, t, h))
        } else {
            0.0
        });
        prefix_safe &= model.is_safe(x);
        inst.push(f64::from(u8::from(model.is_safe(x))));
        cum.push(f64::from(u8::from(prefix_safe)));
        let mut tail_safe = prefix_safe;
        if tail_safe {
            let mut rng = stream(split_seed(seed, t as u64 + 1));
            let mut xc = x;
            for s in t..h {
                let u = nominal.sample(AugmentedState::at_time(xc, s, h), &mut rng)?;
                xc = model.step_online(xc, u, &mut rng);
                if !model.is_safe(xc) {
                    tail_safe = false;
                    break;
                }
            }
        }
        mc.push(f64::from(u8::from(tail_safe)));
    }
    Ok([inst, cum, hybrid, mc])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn half_width(batch_means: &[f64]) -> f64 {
    let n = batch_means.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(batch_means);
    let var = batch_means.iter().map(|b| (b - m) * (b - m)).sum::<f64>() / (n - 1) as f64;
    Z_95 * var.sqrt() / (n as f64).sqrt()
}

/// Rolls `batches × trajectories` controlled episodes and summarizes the
/// sampled metrics. Trajectory `i` of batch `b` uses the stream derived from
/// `(seed, b, i)`, so results do not depend on the thread schedule.
pub fn run_experiment(
    model: &ConfoundedMdpModel,
    controller: &dyn Controller,
    nominal: &TabularPolicy,
    v: &TabularV,
    params: &EvalParams,
    metadata: Metadata,
) -> Result<ExperimentResult> {
    if params.batches == 0 || params.trajectories == 0 {
        return Err(Error::Config(
            "evaluation needs at least one batch and one trajectory".into(),
        ));
    }
    model.check_state(params.x0)?;
    let h = model.horizon();
    // [batch][metric][t]
    let batch_means: Vec<Vec<Vec<f64>>> = (0..params.batches)
        .into_par_iter()
        .map(|b| {
            let batch_seed = split_seed(params.seed, b as u64);
            let mut sums = vec![vec![0.0; h + 1]; 4];
            for i in 0..params.trajectories {
                let m = trajectory_metrics(
                    model,
                    controller,
                    nominal,
                    v,
                    params.x0,
                    split_seed(batch_seed, i as u64),
                )?;
                for (acc, row) in sums.iter_mut().zip(m.iter()) {
                    for (a, x) in acc.iter_mut().zip(row) {
                        *a += x;
                    }
                }
            }
            for row in &mut sums {
                for a in row.iter_mut() {
                    *a /= params.trajectories as f64;
                }
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let curves = Metric::SAMPLED
        .iter()
        .enumerate()
        .map(|(mi, &metric)| {
            let mut means = Vec::with_capacity(h + 1);
            let mut widths = Vec::with_capacity(h + 1);
            for t in 0..=h {
                let per_batch: Vec<f64> = batch_means.iter().map(|b| b[mi][t]).collect();
                means.push(mean(&per_batch));
                widths.push(half_width(&per_batch));
            }
            Curve {
                metric,
                mean: means,
                half_width: widths,
            }
        })
        .collect();
    Ok(ExperimentResult { metadata, curves })
}

/// Exact long-term safe probability for `t = 0..=H`: the controller acts
/// before `t` (with the nominal draw marginalized) and the nominal policy
/// from `t` on.
pub fn exact_long_term_curve(
    model: &ConfoundedMdpModel,
    controller: &dyn Controller,
    nominal: &TabularPolicy,
    v: &TabularV,
    x0: usize,
) -> Result<Vec<f64>> {
    let policy = controller_policy(controller, model, nominal, x0)?;
    long_term_curve(model, &policy, v, x0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(flatten)]
    pub metadata: Metadata,
    pub threshold: f64,
    /// `V(x0, H)` under the nominal policy.
    pub initial_value: Option<f64>,
    pub exact_min: Option<f64>,
    pub exact_meets_threshold: Option<bool>,
    pub hybrid_min: Option<f64>,
    pub hybrid_meets_threshold: Option<bool>,
}

impl Summary {
    pub fn from_result(result: &ExperimentResult) -> Self {
        let threshold = 1.0 - result.metadata.epsilon;
        let min = |m: Metric| {
            result
                .curve(m)
                .filter(|c| !c.mean.is_empty())
                .map(|c| c.mean.iter().copied().fold(f64::INFINITY, f64::min))
        };
        let exact_min = min(Metric::LongTermExact);
        let hybrid_min = min(Metric::LongTermHybrid);
        Self {
            metadata: result.metadata.clone(),
            threshold,
            initial_value: result
                .curve(Metric::LongTermExact)
                .and_then(|c| c.mean.first().copied()),
            exact_min,
            exact_meets_threshold: exact_min.map(|m| m >= threshold),
            hybrid_min,
            hybrid_meets_threshold: hybrid_min.map(|m| m >= threshold),
        }
    }
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub t: usize,
    pub metric: Metric,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub controller: ControllerId,
}

pub fn write_curves_csv<W: Write>(result: &ExperimentResult, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["t", "metric", "mean", "ci_lo", "ci_hi", "controller"])?;
    for c in &result.curves {
        for t in 0..c.mean.len() {
            w.serialize(CurveRow {
                t,
                metric: c.metric,
                mean: c.mean[t],
                ci_lo: c.mean[t] - c.half_width[t],
                ci_hi: c.mean[t] + c.half_width[t],
                controller: result.metadata.controller,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: Read>(input: R) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `curves.csv` and `summary.json` into `dir`, creating it if needed.
pub fn emit_report(result: &ExperimentResult, dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir)?;
    write_curves_csv(result, fs::File::create(dir.join("curves.csv"))?)?;
    let summary = Summary::from_result(result);
    let mut f = fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    Ok(summary)
}
