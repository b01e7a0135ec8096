//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use safecert::causal_q::{fitted_qm, front_door_online_kernel, DEFAULT_MAX_ITERS, DEFAULT_TOLERANCE};
use safecert::certificate::margins;
use safecert::data::{convert_dataset, generate_offline};
use safecert::env::driving::{build_driving_model, safe_at, DrivingState, MAX_VELOCITY, POSITION_PERIOD};
use safecert::env::mismatch::{build_mediator_toy_env, build_mismatch_env, mismatch_behavioral};
use safecert::eval::{read_curves_csv, Metric};
use safecert::model::absorbing_kernel;
use safecert::oracle::{brute_force_psi, qm_dp, solve, value_dp};
use safecert::runner::{cmd_reproduce, ExperimentConfig};
use safecert::tables::OfflineTables;
use safecert::{AugmentedState, TabularPolicy, VisibleKernel};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(elapsed < budget, || format!("runtime {elapsed:?} exceeds {budget:?}"))
}

fn c1_mismatch_kernels() -> Outcome {
    let start = Instant::now();
    let model = build_mismatch_env(1).map_err(|e| e.to_string())?;
    let b = mismatch_behavioral().map_err(|e| e.to_string())?;
    let off = model.p_offline(&b, 0, 0, 1).map_err(|e| e.to_string())?;
    let on = model.p_online(0, 0, 1).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check((off - 1.0).abs() < 1e-12, || format!("p_offline(0|0,1) = {off}"))?;
    check((on - 0.55).abs() < 1e-12, || format!("p_online(0|0,1) = {on}"))?;
    within_budget(elapsed, Duration::from_millis(1))?;
    Ok(format!("p_offline = {off}, p_online = {on}, {elapsed:?}"))
}

fn c2_dp_equals_enumeration() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut checked = 0;
    for h in 1..=6 {
        let model = build_mismatch_env(h).map_err(|e| e.to_string())?;
        let pi = TabularPolicy::uniform(2, h, 2);
        let v = value_dp(&model, &pi).map_err(|e| e.to_string())?;
        for k in 0..=h {
            for x in 0..2 {
                let psi = brute_force_psi(&model, &pi, x, h - k).map_err(|e| e.to_string())?;
                worst = worst.max((psi - v.get(AugmentedState::new(x, k))).abs());
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    within_budget(elapsed, Duration::from_secs(1))?;
    Ok(format!(
        "{checked} (H, x, k) cases, max deviation {worst:e}, {elapsed:?}"
    ))
}

fn c3_persistent_feasibility() -> Outcome {
    let start = Instant::now();
    let h = 10;
    let model = build_driving_model(h).map_err(|e| e.to_string())?;
    let pi = TabularPolicy::uniform(model.n_states(), h, model.n_actions());
    let (_, q) = solve(&model, &pi).map_err(|e| e.to_string())?;
    let mut pairs = 0;
    let mut safe_states = 0;
    let mut worst = f64::INFINITY;
    for p in 0..POSITION_PERIOD {
        for v in 0..=MAX_VELOCITY {
            if v > 5 {
                if safe_at(p, v) {
                    return Err(format!("({p}, {v}) is safe above velocity 5"));
                }
                continue;
            }
            pairs += 1;
            safe_states += usize::from(safe_at(p, v));
            let x = DrivingState::new(p, v).map_err(|e| e.to_string())?.encode();
            for t in 0..h {
                let s = margins(&q, &pi, AugmentedState::at_time(x, t, h)).map_err(|e| e.to_string())?;
                worst = worst.min(s.into_iter().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    let elapsed = start.elapsed();
    check(pairs == 180, || format!("found {pairs} pairs with velocity <= 5"))?;
    check(worst >= -1e-12, || format!("min over states of max_u S = {worst:e}"))?;
    within_budget(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "{pairs} (position, velocity <= 5) pairs ({safe_states} inside the safe set) x 10 steps, min max_u S = {worst:e}, {elapsed:?}"
    ))
}

fn c4_margin_bellman_consistency() -> Outcome {
    let h = 10;
    let model = build_driving_model(h).map_err(|e| e.to_string())?;
    let pi = TabularPolicy::uniform(model.n_states(), h, model.n_actions());
    let (v, q) = solve(&model, &pi).map_err(|e| e.to_string())?;
    let online = VisibleKernel::online(&model);
    let mut worst = 0.0_f64;
    let mut pairs = 0;
    for k in 1..=h {
        for x in (0..model.n_states()).filter(|&x| model.is_safe(x)) {
            let y = AugmentedState::new(x, k);
            let s = margins(&q, &pi, y).map_err(|e| e.to_string())?;
            for (u, su) in s.into_iter().enumerate() {
                let ev: f64 = absorbing_kernel(&online, &model, y, u)
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .map(|(yn, p)| p * v.get(yn))
                    .sum();
                worst = worst.max((su - (ev - v.get(y))).abs());
                pairs += 1;
            }
        }
    }
    check(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("{pairs} safe (state, action) pairs, max deviation {worst:e}"))
}

fn c5_driving_experiment(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let (_, s) = cmd_reproduce(&cfg, dir).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rows = read_curves_csv(fs::File::open(dir.join("proposed-oracle-q/curves.csv")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let hybrid: Vec<_> = rows.iter().filter(|r| r.metric == Metric::LongTermHybrid).collect();
    check(hybrid.len() == s.proposed_exact.len(), || {
        "hybrid curve length mismatch".into()
    })?;
    let outside: Vec<usize> = hybrid
        .iter()
        .zip(&s.proposed_exact)
        .filter(|(r, &e)| e < r.ci_lo - 1e-12 || e > r.ci_hi + 1e-12)
        .map(|(r, _)| r.t)
        .collect();
    let nondecreasing = s.proposed_exact.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    check(nondecreasing, || {
        format!("proposed exact curve decreases: {:?}", s.proposed_exact)
    })?;
    check(s.proposed_never_below_initial, || {
        format!("proposed exact minimum {} below V(x0,10)", s.proposed_exact_min)
    })?;
    check(s.dtcbf_falls_below_threshold, || {
        format!("dtcbf exact minimum {} not below 0.8", s.dtcbf_exact_min)
    })?;
    let coverage = format!(
        "hybrid MC 95% CI covers the exact curve at {}/{} steps, misses at t = {outside:?}",
        hybrid.len() - outside.len(),
        hybrid.len()
    );
    let conditional = if s.initial_value > s.threshold {
        check(s.proposed_meets_threshold, || {
            format!("proposed exact minimum {} below 0.8", s.proposed_exact_min)
        })?;
        check(outside.is_empty(), || coverage.clone())?;
        format!("threshold clause checked; {coverage}")
    } else {
        format!("V(x0,10) <= 0.8 so the conditional clause is not triggered ({coverage})")
    };
    within_budget(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "V(x0,10) = {:.10}; {conditional}; proposed exact min {:.6}, end {:.6}; dtcbf exact min {:.6}; {elapsed:?}",
        s.initial_value,
        s.proposed_exact_min,
        s.proposed_exact.last().copied().unwrap_or(f64::NAN),
        s.dtcbf_exact_min,
    ))
}

fn front_door_error(
    tables: &OfflineTables,
    online: &VisibleKernel,
    model: &safecert::ConfoundedMdpModel,
) -> Result<(f64, usize), String> {
    let mut worst = 0.0_f64;
    let mut rows = 0;
    for y in tables.states() {
        for u in 0..2 {
            let Ok(fd) = front_door_online_kernel(tables, y, u) else {
                continue;
            };
            let truth = absorbing_kernel(online, model, y, u).map_err(|e| e.to_string())?;
            for &(yn, p) in &truth {
                let got = fd.iter().find(|e| e.0 == yn).map_or(0.0, |e| e.1);
                worst = worst.max((got - p).abs());
            }
            for &(yn, p) in &fd {
                if !truth.iter().any(|e| e.0 == yn) {
                    worst = worst.max(p);
                }
            }
            rows += 1;
        }
    }
    Ok((worst, rows))
}

fn c6_front_door_recovery() -> Outcome {
    let start = Instant::now();
    let h = 3;
    let (model, med) = build_mediator_toy_env(h).map_err(|e| e.to_string())?;
    let b = mismatch_behavioral().map_err(|e| e.to_string())?;
    let online = VisibleKernel::online(&model);
    let exact = OfflineTables::exact(&model, Some(&med), &b).map_err(|e| e.to_string())?;
    let (exact_err, exact_rows) = front_door_error(&exact, &online, &model)?;
    check(exact_rows == 2 * 2 * h, || {
        format!("exact tables cover {exact_rows} rows")
    })?;
    check(exact_err < 1e-12, || {
        format!("exact tables: max deviation {exact_err:e}")
    })?;
    let raw = generate_offline(&model, Some(&med), &b, 100_000, 0, 6).map_err(|e| e.to_string())?;
    let tables = OfflineTables::from_dataset(&convert_dataset(&raw, |x| x == 0).map_err(|e| e.to_string())?, 2)
        .map_err(|e| e.to_string())?;
    let (emp_err, emp_rows) = front_door_error(&tables, &online, &model)?;
    for k in 1..=h {
        for u in 0..2 {
            check(
                front_door_online_kernel(&tables, AugmentedState::new(0, k), u).is_ok(),
                || format!("no empirical front-door row at x=0, k={k}, u={u}"),
            )?;
        }
    }
    check(emp_err < 1e-2, || {
        format!("empirical tables: max deviation {emp_err:e}")
    })?;
    let elapsed = start.elapsed();
    within_budget(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "exact: {exact_rows} rows, max deviation {exact_err:e}; 1e5 episodes: {emp_rows} rows, max deviation {emp_err:.2e}; {elapsed:?}"
    ))
}

fn c7_fitted_q() -> Outcome {
    let h = 3;
    let (model, med) = build_mediator_toy_env(h).map_err(|e| e.to_string())?;
    let b = mismatch_behavioral().map_err(|e| e.to_string())?;
    let pi = TabularPolicy::uniform(2, h, 2);
    let oracle = qm_dp(&model, Some(&med), &pi).map_err(|e| e.to_string())?;
    let safe = |x: usize| x == 0;
    let exact = OfflineTables::exact(&model, Some(&med), &b).map_err(|e| e.to_string())?;
    let fit = fitted_qm(&exact, &pi, safe, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS).map_err(|e| e.to_string())?;
    let exact_err = fit
        .interventional
        .iter()
        .map(|(&(y, m), &v)| (v - oracle.get(y, 0, m)).abs())
        .fold(0.0, f64::max);
    check(fit.iterations <= 4, || {
        format!("exact fit took {} sweeps", fit.iterations)
    })?;
    check(exact_err < 1e-10, || format!("exact fit deviation {exact_err:e}"))?;
    let raw = generate_offline(&model, Some(&med), &b, 100_000, 0, 7).map_err(|e| e.to_string())?;
    let tables = OfflineTables::from_dataset(&convert_dataset(&raw, safe).map_err(|e| e.to_string())?, 2)
        .map_err(|e| e.to_string())?;
    let sampled = fitted_qm(&tables, &pi, safe, DEFAULT_TOLERANCE, DEFAULT_MAX_ITERS).map_err(|e| e.to_string())?;
    let sampled_err = sampled
        .interventional
        .iter()
        .map(|(&(y, m), &v)| (v - oracle.get(y, 0, m)).abs())
        .fold(0.0, f64::max);
    check(!sampled.interventional.is_empty(), || "sampled fit has no cells".into())?;
    check(sampled_err < 2e-2, || format!("sampled fit deviation {sampled_err:e}"))?;
    Ok(format!(
        "exact: {} sweeps, max deviation {exact_err:e}; 1e5 episodes: {} visited cells, max deviation {sampled_err:.2e}",
        fit.iterations,
        sampled.interventional.len()
    ))
}

fn c8_converted_statistics() -> Outcome {
    let h = 3;
    let model = build_mismatch_env(h).map_err(|e| e.to_string())?;
    let b = mismatch_behavioral().map_err(|e| e.to_string())?;
    let offline = VisibleKernel::offline(&model, &b).map_err(|e| e.to_string())?;
    let raw = generate_offline(&model, None, &b, 100_000, 0, 8).map_err(|e| e.to_string())?;
    let tables = OfflineTables::from_dataset(
        &convert_dataset(&raw, |x| model.is_safe(x)).map_err(|e| e.to_string())?,
        2,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_z = 0.0_f64;
    let mut entries = 0;
    for (y, u) in tables.action_cells().collect::<Vec<_>>() {
        let row = tables.next_given_u(y, u).map_err(|e| e.to_string())?;
        let n = row.support.unwrap_or(0) as f64;
        let truth = absorbing_kernel(&offline, &model, y, u).map_err(|e| e.to_string())?;
        let outcomes: Vec<AugmentedState> = truth.iter().map(|e| e.0).chain(row.probs.iter().map(|e| e.0)).collect();
        for yn in outcomes {
            let p = truth.iter().find(|e| e.0 == yn).map_or(0.0, |e| e.1);
            let got = row.prob(yn);
            let se = (p * (1.0 - p) / n).sqrt();
            if se == 0.0 {
                check(got == p, || format!("{y} u={u} -> {yn}: {got} but exact value {p}"))?;
            } else {
                let z = (got - p).abs() / se;
                worst_z = worst_z.max(z);
                check(z <= 3.0, || format!("{y} u={u} -> {yn}: {got} vs {p} ({z:.2} s.e.)"))?;
            }
            entries += 1;
        }
    }
    Ok(format!(
        "{entries} transition entries, worst deviation {worst_z:.2} s.e."
    ))
}

fn c9_determinism(root: &Path) -> Outcome {
    let cfg = ExperimentConfig::default();
    let run = |name: &str, threads: Option<usize>| -> Result<Vec<u8>, String> {
        let dir = root.join(name);
        let go = || cmd_reproduce(&cfg, &dir).map_err(|e| e.to_string());
        match threads {
            None => go()?,
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| e.to_string())?
                .install(go)?,
        };
        let mut bytes = Vec::new();
        for c in ["proposed-oracle-q", "dtcbf"] {
            bytes.extend(fs::read(dir.join(c).join("curves.csv")).map_err(|e| e.to_string())?);
        }
        Ok(bytes)
    };
    let first = run("a", None)?;
    for (name, threads) in [("b", None), ("one-thread", Some(1)), ("four-threads", Some(4))] {
        let other = run(name, threads)?;
        check(other == first, || format!("curves.csv differs in run '{name}'"))?;
    }
    Ok(format!(
        "4 runs (default pool x2, 1 thread, 4 threads), {} identical bytes",
        first.len()
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let exp_dir = tmp.path().join("experiment");
    let det_dir = tmp.path().join("determinism");
    let criteria: Vec<Criterion> = vec![
        ("1 mismatch kernels", Box::new(c1_mismatch_kernels)),
        ("2 dp equals trajectory enumeration", Box::new(c2_dp_equals_enumeration)),
        ("3 persistent feasibility", Box::new(c3_persistent_feasibility)),
        ("4 margin/Bellman consistency", Box::new(c4_margin_bellman_consistency)),
        (
            "5 driving experiment",
            Box::new(move || c5_driving_experiment(&exp_dir)),
        ),
        ("6 front-door recovery", Box::new(c6_front_door_recovery)),
        ("7 fitted Q_M", Box::new(c7_fitted_q)),
        ("8 converted data statistics", Box::new(c8_converted_statistics)),
        ("9 determinism", Box::new(move || c9_determinism(&det_dir))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
