//! Config-driven pipeline commands behind the `safecert` binary.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::causal_q::{fitted_qm, EstimatedQ, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
use crate::certificate::{
    driving_barrier, run_control_episode, write_trajectories, CertificateConfig, CertificateController, Controller,
    DeviationPenalty, DtcbfController, DtcbfParams, SelectionMode, ORACLE_SLACK,
};
use crate::data::{convert_dataset, empirical_visible_kernel, generate_offline, DatasetForm, EpisodeDataset};
use crate::env::{EnvId, Environment};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, exact_long_term_curve, run_experiment, ControllerId, Curve, EvalParams, ExperimentResult, Metadata,
    Metric, Summary,
};
use crate::model::{AugmentedState, VisibleKernel};
use crate::oracle::{qm_dp, solve, TabularV};
use crate::policy::TabularPolicy;
use crate::rng::split_seed;
use crate::tables::OfflineTables;

/// Absolute tolerance when comparing exact curves against a threshold.
pub const CURVE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_episodes: 100_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FittedQParams {
    pub tolerance: f64,
    pub max_iters: usize,
    /// Use the model's exact offline tables instead of the dataset.
    pub exact_tables: bool,
}

impl Default for FittedQParams {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iters: DEFAULT_MAX_ITERS,
            exact_tables: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationParams {
    pub batches: usize,
    pub trajectories: usize,
    pub seed: u64,
}

impl Default for EvaluationParams {
    fn default() -> Self {
        Self {
            batches: 100,
            trajectories: 100,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSource {
    Exact,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtcbfSection {
    pub alpha: f64,
    pub delta: f64,
    pub kernel: KernelSource,
}

impl Default for DtcbfSection {
    fn default() -> Self {
        let p = DtcbfParams::default();
        Self {
            alpha: p.alpha,
            delta: p.delta,
            kernel: KernelSource::Exact,
        }
    }
}

/// Everything a command needs. Defaults reproduce the driving experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub horizon: usize,
    pub epsilon: f64,
    /// State components: `[position, velocity]` for driving, `[x]` otherwise.
    pub x0: Vec<i64>,
    pub controller: ControllerId,
    pub selection_mode: SelectionMode,
    /// Defaults to 1e-12 for oracle Q and 0 for fitted Q.
    pub feasibility_slack: Option<f64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetParams,
    pub fitted_q: FittedQParams,
    pub evaluation: EvaluationParams,
    pub dtcbf: DtcbfSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::Driving,
            horizon: 10,
            epsilon: 0.2,
            x0: vec![0, 0],
            controller: ControllerId::ProposedOracleQ,
            selection_mode: SelectionMode::MaxAction,
            feasibility_slack: None,
            output_dir: PathBuf::from("out"),
            dataset: DatasetParams::default(),
            fitted_q: FittedQParams::default(),
            evaluation: EvaluationParams::default(),
            dtcbf: DtcbfSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.feasibility_slack.is_some_and(|s| s.is_nan() || s < 0.0) {
            return Err(Error::Config("feasibility_slack must be nonnegative".into()));
        }
        if self.evaluation.batches == 0 || self.evaluation.trajectories == 0 {
            return Err(Error::Config(
                "evaluation needs at least one batch and one trajectory".into(),
            ));
        }
        if self.fitted_q.tolerance.is_nan() || self.fitted_q.tolerance <= 0.0 || self.fitted_q.max_iters == 0 {
            return Err(Error::Config(
                "fitted_q needs a positive tolerance and max_iters".into(),
            ));
        }
        self.environment()?;
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        let env = Environment::build(self.env, self.horizon)?;
        env.encode_state(&self.x0).map_err(|e| Error::Config(e.to_string()))?;
        Ok(env)
    }

    fn certificate(&self, fitted: bool) -> CertificateConfig {
        CertificateConfig {
            epsilon: self.epsilon,
            feasibility_slack: self
                .feasibility_slack
                .unwrap_or(if fitted { 0.0 } else { ORACLE_SLACK }),
            deviation_penalty: DeviationPenalty::Absolute,
            selection_mode: self.selection_mode,
        }
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }
}

/// Whether a command's acceptance check held.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub criteria_met: bool,
    pub message: String,
}

fn write_jsonl(dataset: &EpisodeDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    dataset.write_jsonl(BufWriter::new(fs::File::create(path)?))
}

pub fn read_dataset(path: &Path) -> Result<EpisodeDataset> {
    EpisodeDataset::read_jsonl(BufReader::new(fs::File::open(path)?))
}

/// Writes `dataset.jsonl` (raw episodes) and the config into `out`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let env = cfg.environment()?;
    let x0 = env.encode_state(&cfg.x0)?;
    info!("generating {} episodes on {}", cfg.dataset.n_episodes, cfg.env);
    let data = generate_offline(
        &env.model,
        env.mediator.as_ref(),
        &env.behavioral,
        cfg.dataset.n_episodes,
        x0,
        cfg.dataset.seed,
    )?;
    cfg.echo(out)?;
    let path = out.join("dataset.jsonl");
    write_jsonl(&data, &path)?;
    Ok(path)
}

/// Converts a raw dataset file using the configured environment's safe set.
pub fn cmd_convert(cfg: &ExperimentConfig, input: &Path, output: &Path) -> Result<()> {
    let env = cfg.environment()?;
    let raw = read_dataset(input)?;
    let n = env.model.n_states();
    if raw.episodes.iter().any(|e| e.x.iter().any(|&x| x >= n)) {
        return Err(Error::Encoding(format!(
            "dataset has states outside the {} state space",
            cfg.env
        )));
    }
    let converted = convert_dataset(&raw, |x| env.model.is_safe(x))?;
    write_jsonl(&converted, output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub source: &'static str,
    pub iterations: usize,
    pub residual: f64,
    pub cells: usize,
    /// Largest gap between the interventional fit and the ground-truth `Q_M`.
    pub oracle_max_abs_error: f64,
    pub warnings: Vec<String>,
}

/// Fits `Q_M` under the uniform nominal policy and writes `qm.csv`,
/// `qm_regression.csv`, `q.csv` and `fit.json` into `out`.
pub fn cmd_fit_q(cfg: &ExperimentConfig, dataset: Option<&Path>, out: &Path) -> Result<FitReport> {
    let env = cfg.environment()?;
    let mediator = env
        .mediator
        .as_ref()
        .ok_or_else(|| Error::Unsupported(format!("{} has no mediator", cfg.env)))?;
    let model = &env.model;
    let na = model.n_actions();
    let (tables, source) = if cfg.fitted_q.exact_tables {
        (OfflineTables::exact(model, Some(mediator), &env.behavioral)?, "exact")
    } else {
        let path = dataset.ok_or_else(|| Error::Config("fit-q needs a dataset unless exact_tables is set".into()))?;
        let data = read_dataset(path)?;
        let converted = match data.form {
            DatasetForm::Converted => data,
            DatasetForm::Raw => convert_dataset(&data, |x| model.is_safe(x))?,
        };
        if !converted.is_empty() && converted.horizon != cfg.horizon {
            return Err(Error::Config(format!(
                "dataset horizon {} differs from configured horizon {}",
                converted.horizon, cfg.horizon
            )));
        }
        (OfflineTables::from_dataset(&converted, na)?, "empirical")
    };
    let pi = TabularPolicy::uniform(model.n_states(), cfg.horizon, na);
    let fit = fitted_qm(
        &tables,
        &pi,
        |x| model.is_safe(x),
        cfg.fitted_q.tolerance,
        cfg.fitted_q.max_iters,
    )?;
    let oracle = qm_dp(model, Some(mediator), &pi)?;
    let oracle_max_abs_error = fit
        .interventional
        .iter()
        .map(|(&(y, m), &v)| (v - oracle.get(y, 0, m)).abs())
        .fold(0.0, f64::max);
    let q = EstimatedQ::from_fitted(&fit, &tables)?;
    cfg.echo(out)?;
    fit.write_interventional_csv(fs::File::create(out.join("qm.csv"))?)?;
    fit.write_regression_csv(fs::File::create(out.join("qm_regression.csv"))?)?;
    q.write_csv(fs::File::create(out.join("q.csv"))?)?;
    let report = FitReport {
        source,
        iterations: fit.iterations,
        residual: fit.residual,
        cells: fit.regression.len(),
        oracle_max_abs_error,
        warnings: fit.warnings,
    };
    let mut f = fs::File::create(out.join("fit.json"))?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    info!(
        "fit converged after {} sweeps; max error vs oracle {:e}",
        report.iterations, report.oracle_max_abs_error
    );
    Ok(report)
}

struct Prepared {
    env: Environment,
    x0: usize,
    nominal: TabularPolicy,
    v: TabularV,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let env = cfg.environment()?;
    let x0 = env.encode_state(&cfg.x0)?;
    let nominal = TabularPolicy::uniform(env.model.n_states(), cfg.horizon, env.model.n_actions());
    let (v, _) = solve(&env.model, &nominal)?;
    Ok(Prepared { env, x0, nominal, v })
}

fn build_controller(
    cfg: &ExperimentConfig,
    p: &Prepared,
    id: ControllerId,
    q_csv: Option<&Path>,
) -> Result<Box<dyn Controller>> {
    let model = &p.env.model;
    let action_values = model.action_values().to_vec();
    Ok(match id {
        ControllerId::ProposedOracleQ => {
            let (_, q) = solve(model, &p.nominal)?;
            Box::new(CertificateController {
                q,
                pi: p.nominal.clone(),
                config: cfg.certificate(false),
                action_values,
                horizon: cfg.horizon,
            })
        }
        ControllerId::ProposedFittedQ => {
            let path = q_csv.ok_or_else(|| Error::Config("proposed-fitted-q needs a Q table (--q)".into()))?;
            let q = EstimatedQ::read_csv(BufReader::new(fs::File::open(path)?), model.n_actions())?;
            Box::new(CertificateController {
                q,
                pi: p.nominal.clone(),
                config: cfg.certificate(true),
                action_values,
                horizon: cfg.horizon,
            })
        }
        ControllerId::Dtcbf => {
            if cfg.env != EnvId::Driving {
                return Err(Error::Unsupported(
                    "the barrier baseline is defined for the driving environment".into(),
                ));
            }
            let kernel = match cfg.dtcbf.kernel {
                KernelSource::Exact => VisibleKernel::offline(model, &p.env.behavioral)?,
                KernelSource::Empirical => {
                    let data = generate_offline(
                        model,
                        None,
                        &p.env.behavioral,
                        cfg.dataset.n_episodes,
                        p.x0,
                        cfg.dataset.seed,
                    )?;
                    empirical_visible_kernel(&data, model.n_states(), model.n_actions())?
                }
            };
            Box::new(DtcbfController {
                kernel,
                params: DtcbfParams {
                    alpha: cfg.dtcbf.alpha,
                    delta: cfg.dtcbf.delta,
                },
                barrier: driving_barrier(),
                action_values,
            })
        }
    })
}

fn evaluate(
    cfg: &ExperimentConfig,
    p: &Prepared,
    id: ControllerId,
    controller: &dyn Controller,
) -> Result<ExperimentResult> {
    let params = EvalParams {
        batches: cfg.evaluation.batches,
        trajectories: cfg.evaluation.trajectories,
        x0: p.x0,
        seed: cfg.evaluation.seed,
    };
    let metadata = Metadata {
        env: cfg.env.to_string(),
        controller: id,
        horizon: cfg.horizon,
        epsilon: cfg.epsilon,
        batches: params.batches,
        trajectories: params.trajectories,
        x0: cfg.x0.clone(),
        seed: params.seed,
    };
    info!(
        "evaluating {id} on {} ({}x{})",
        cfg.env, params.batches, params.trajectories
    );
    let mut result = run_experiment(&p.env.model, controller, &p.nominal, &p.v, &params, metadata)?;
    let exact = exact_long_term_curve(&p.env.model, controller, &p.nominal, &p.v, p.x0)?;
    result.curves.push(Curve::exact(exact));
    Ok(result)
}

/// The level the certificate guarantees: `1 - ε` when the nominal policy
/// already achieves it from `x0`, otherwise the nominal value itself.
fn guaranteed_level(threshold: f64, initial: f64) -> f64 {
    threshold.min(initial)
}

fn exact_curve(result: &ExperimentResult) -> &[f64] {
    &result.curve(Metric::LongTermExact).expect("exact curve attached").mean
}

/// Runs the configured controller, writing `curves.csv`, `summary.json`,
/// `trajectories.jsonl` (the first batch) and the config into `out`.
pub fn cmd_run_control(cfg: &ExperimentConfig, q_csv: Option<&Path>, out: &Path) -> Result<Outcome> {
    let p = prepare(cfg)?;
    let controller = build_controller(cfg, &p, cfg.controller, q_csv)?;
    let result = evaluate(cfg, &p, cfg.controller, controller.as_ref())?;
    cfg.echo(out)?;
    emit_report(&result, out)?;
    let batch_seed = split_seed(cfg.evaluation.seed, 0);
    let trajectories = (0..cfg.evaluation.trajectories)
        .map(|i| {
            run_control_episode(
                &p.env.model,
                controller.as_ref(),
                &p.nominal,
                p.x0,
                split_seed(split_seed(batch_seed, i as u64), 0),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    write_trajectories(
        &trajectories,
        BufWriter::new(fs::File::create(out.join("trajectories.jsonl"))?),
    )?;
    let initial = p.v.get(AugmentedState::new(p.x0, cfg.horizon));
    let level = guaranteed_level(1.0 - cfg.epsilon, initial);
    let min = exact_curve(&result).iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        criteria_met: min >= level - CURVE_TOLERANCE,
        message: format!(
            "{}: exact long-term minimum {min:.6} against level {level:.6}",
            cfg.controller
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub threshold: f64,
    /// `V(x0, H)` under the uniform nominal policy.
    pub initial_value: f64,
    /// Whether `V(x0, H) > 1 - ε`, the precondition of the threshold check.
    pub precondition_met: bool,
    pub proposed_exact: Vec<f64>,
    pub proposed_exact_min: f64,
    pub proposed_meets_threshold: bool,
    pub proposed_never_below_initial: bool,
    pub dtcbf_exact: Vec<f64>,
    pub dtcbf_exact_min: f64,
    pub dtcbf_falls_below_threshold: bool,
    pub criteria_met: bool,
    pub proposed: Summary,
    pub dtcbf: Summary,
}

/// Runs both controllers on the driving environment and writes one report
/// directory per controller plus a combined `summary.json`.
///
/// The criterion holds when the proposed controller's exact curve stays at
/// or above `1 - ε` wherever the nominal policy starts above it, and at or
/// above `V(x0, H)` otherwise.
pub fn cmd_reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<(Outcome, ReproduceSummary)> {
    if cfg.env != EnvId::Driving {
        return Err(Error::Unsupported("reproduce runs on the driving environment".into()));
    }
    let p = prepare(cfg)?;
    cfg.echo(out)?;
    let mut results = Vec::new();
    for id in [ControllerId::ProposedOracleQ, ControllerId::Dtcbf] {
        let controller = build_controller(cfg, &p, id, None)?;
        let result = evaluate(cfg, &p, id, controller.as_ref())?;
        let summary = emit_report(&result, &out.join(id.as_str()))?;
        results.push((result, summary));
    }
    let (dtcbf, dtcbf_summary) = results.pop().expect("two controllers");
    let (proposed, proposed_summary) = results.pop().expect("two controllers");
    let threshold = 1.0 - cfg.epsilon;
    let initial = p.v.get(AugmentedState::new(p.x0, cfg.horizon));
    let min = |c: &[f64]| c.iter().copied().fold(f64::INFINITY, f64::min);
    let proposed_exact = exact_curve(&proposed).to_vec();
    let dtcbf_exact = exact_curve(&dtcbf).to_vec();
    let proposed_exact_min = min(&proposed_exact);
    let dtcbf_exact_min = min(&dtcbf_exact);
    let precondition_met = initial > threshold;
    let criteria_met = proposed_exact_min >= guaranteed_level(threshold, initial) - CURVE_TOLERANCE;
    let summary = ReproduceSummary {
        threshold,
        initial_value: initial,
        precondition_met,
        proposed_exact_min,
        proposed_meets_threshold: proposed_exact_min >= threshold - CURVE_TOLERANCE,
        proposed_never_below_initial: proposed_exact_min >= initial - CURVE_TOLERANCE,
        proposed_exact,
        dtcbf_exact_min,
        dtcbf_falls_below_threshold: dtcbf_exact_min < threshold,
        dtcbf_exact,
        criteria_met,
        proposed: proposed_summary,
        dtcbf: dtcbf_summary,
    };
    let mut f = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    let message = format!(
        "V(x0, H) = {initial:.6} ({} threshold {threshold}); proposed exact minimum {proposed_exact_min:.6}; dtcbf exact minimum {dtcbf_exact_min:.6}",
        if precondition_met { "above" } else { "not above" }
    );
    Ok((Outcome { criteria_met, message }, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.epsilon, 0.2);
        assert_eq!(cfg.evaluation.batches, 100);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg =
            ExperimentConfig::from_toml("env = \"mediator-toy\"\nhorizon = 3\nx0 = [0]\n[dataset]\nn_episodes = 10\n")
                .unwrap();
        assert_eq!(cfg.env, EnvId::MediatorToy);
        assert_eq!(cfg.dataset.n_episodes, 10);
        assert_eq!(cfg.dataset.seed, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "horizon = 0",
            "epsilon = 1.0",
            "env = \"highway\"",
            "x0 = [0]",
            "unknown_key = 3",
            "feasibility_slack = -1.0",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
