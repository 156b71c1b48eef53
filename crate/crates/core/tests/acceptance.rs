//! Acceptance suite: one pass/fail line per criterion, with the stated
//! tolerances and runtime budgets. Criteria run sequentially inside a single
//! test so the budgets reflect wall-clock behavior.

mod common;

use std::time::{Duration, Instant};

use droopopt_core::conditions::{self, BreakSearch};
use droopopt_core::droop::{approx_to_exact, DroopParameters};
use droopopt_core::grid::{build_topology, RadialNetwork, TopologyMatrices};
use droopopt_core::io;
use droopopt_core::pipeline::{self, PipelineConfig};
use droopopt_core::powerflow::{self, PowerFlowState};
use droopopt_core::program::{
    build_droop_design, build_maropf, DesignMode, ObjectiveWeights, Quantity,
};
use droopopt_core::refine::{refine_loop, RefineConfig};
use droopopt_core::scenario::Snapshot;
use droopopt_core::solver::{solve_misocp, solve_socp, SolveStatus, SolverConfig};
use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    detail: String,
    pass: bool,
}

fn run_criterion(
    results: &mut Vec<Outcome>,
    name: &'static str,
    f: impl FnOnce() -> Result<String, String>,
) {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let elapsed = start.elapsed();
    println!(
        "criterion {name}: {} ({detail}; {elapsed:.2?})",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { name, detail, pass });
}

fn check(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

struct Fixture {
    net: RadialNetwork,
    topo: TopologyMatrices,
    high_pv: Vec<Snapshot>,
    midday: Snapshot,
}

fn fixture() -> Fixture {
    let net = io::load_case("ieee34").unwrap();
    let topo = build_topology(&net).unwrap();
    let horizon = io::load_profiles("ieee34", None, &net).unwrap();
    let window = horizon.window("09:00", "12:00").unwrap().thin(4);
    let high_pv = pipeline::horizon_snapshots(&net, &window);
    let midday = horizon.window("11:00", "12:00").unwrap().snapshot(&net, 0);
    Fixture {
        net,
        topo,
        high_pv,
        midday,
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let fx = fixture();

    criterion_1_condition_sweep(&mut results, &fx);
    criterion_2_condition_break(&mut results, &fx);
    let design = criterion_4_design_validates(&mut results, &fx);
    criterion_3_bound_properties(&mut results, &fx);
    criterion_5_relaxation_inexactness(&mut results, &fx);
    criterion_6_voltage_identity(&mut results, &fx, design.as_ref());
    criterion_7_conservatism(&mut results, &fx);
    criterion_8_droop_approximation(&mut results);
    criterion_9_oracle_equivalence(&mut results);
    criterion_10_misocp_exactness(&mut results, &fx);
    criterion_11_refinement_and_scale(&mut results, &fx);

    let failures: Vec<&Outcome> = results.iter().filter(|o| !o.pass).collect();
    assert!(
        failures.is_empty(),
        "failed criteria: {}",
        failures
            .iter()
            .map(|o| format!("{} ({})", o.name, o.detail))
            .collect::<Vec<_>>()
            .join("; ")
    );
}

fn criterion_1_condition_sweep(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "1 condition sweep", || {
        let start = Instant::now();
        let grid: Vec<f64> = (0..20).map(|i| 0.01 + 0.05 * i as f64).collect();
        let rows = conditions::sweep_epsilon(&fx.net, &fx.topo, &grid)
            .map_err(|e| e.to_string())?;
        check(rows.len() == 20, "20 sweep rows")?;
        let sign = rows[0].det_sign;
        check(sign != 0.0, "nonzero determinant")?;
        for row in &rows {
            check(
                row.det_sign == sign && row.det_log10.is_finite(),
                &format!("sign-definite determinant at eps {}", row.epsilon),
            )?;
            check(
                row.min_d >= -1e-12,
                &format!("min(D) {} at eps {}", row.min_d, row.epsilon),
            )?;
        }
        check(start.elapsed() <= Duration::from_secs(10), "within 10 s")?;
        Ok(format!(
            "20 pts, det sign {sign:+.0}, min(D) >= {:.2e}",
            rows.iter().map(|r| r.min_d).fold(f64::INFINITY, f64::min)
        ))
    });
}

fn criterion_2_condition_break(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "2 condition break", || {
        let direction = fx.net.load_p_vec() * 0.8786;
        let report = conditions::find_condition_break(
            &fx.net,
            &fx.topo,
            &direction,
            BreakSearch {
                slope_margin: Some(0.05),
                ..BreakSearch::default()
            },
        )
        .map_err(|e| e.to_string())?;
        check(
            report.first_violated == "8.d",
            &format!("first violated {} (want 8.d)", report.first_violated),
        )?;
        check(
            report.oracle_v_max > 1.05,
            &format!("oracle max |V| {:.4} must exceed 1.05", report.oracle_v_max),
        )?;
        Ok(format!(
            "break at scale {:.3}, first violated {}, oracle max |V| {:.4}",
            report.scale, report.first_violated, report.oracle_v_max
        ))
    });
}

fn criterion_3_bound_properties(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "3 bound ordering over randomized solves", || {
        let start = Instant::now();
        let tol = 1e-7;
        let prog = build_maropf(&fx.net, &fx.topo, &fx.midday, ObjectiveWeights::default());
        let n = fx.net.n_lines();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for trial in 0..50 {
            let mut p = prog.clone();
            let mut terms: Vec<(usize, f64)> = (0..n)
                .map(|l| {
                    (
                        p.map.id(Quantity::CurrSq, l, 0),
                        rng.random_range(0.02..1.0),
                    )
                })
                .collect();
            for (u, unit) in fx.net.ibdgs.iter().enumerate() {
                if unit.dispatchable {
                    terms.push((p.map.id(Quantity::InjP, u, 0), -rng.random_range(0.0..0.5)));
                }
            }
            p.set_linear_objective(terms, 0.0);
            let sol = solve_socp(&p, &SolverConfig::default()).map_err(|e| e.to_string())?;
            check(
                sol.status == SolveStatus::Optimal,
                &format!("trial {trial} status {:?}", sol.status),
            )?;
            let get = |q| DVector::from_fn(n, |l, _| sol.value(&p, q, l, 0));
            let v = get(Quantity::VoltSq);
            let v_hat = get(Quantity::HatVoltSq);
            let pf = get(Quantity::FlowP);
            let qf = get(Quantity::FlowQ);
            let p_lo = get(Quantity::LoFlowP);
            let p_up = get(Quantity::UpFlowP);
            let q_lo = get(Quantity::LoFlowQ);
            let q_up = get(Quantity::UpFlowQ);
            let f_up = get(Quantity::UpCurrSq);
            worst = worst
                .max((&v - &v_hat).amax_signed())
                .max((&p_lo - &pf).amax_signed())
                .max((&pf - &p_up).amax_signed())
                .max((&q_lo - &qf).amax_signed())
                .max((&qf - &q_up).amax_signed());
            check(
                v.iter().zip(v_hat.iter()).all(|(a, b)| a <= &(b + tol)),
                &format!("trial {trial}: v <= v_hat"),
            )?;
            check(
                p_lo.iter().zip(pf.iter()).all(|(a, b)| a <= &(b + tol))
                    && pf.iter().zip(p_up.iter()).all(|(a, b)| a <= &(b + tol)),
                &format!("trial {trial}: P bounds ordered"),
            )?;
            check(
                q_lo.iter().zip(qf.iter()).all(|(a, b)| a <= &(b + tol))
                    && qf.iter().zip(q_up.iter()).all(|(a, b)| a <= &(b + tol)),
                &format!("trial {trial}: Q bounds ordered"),
            )?;

            // realize the physical point and compare against the current bound
            let state = realize_snapshot(fx, &p, &sol)?;
            check(
                (0..n).all(|l| state.f[l] <= f_up[l] + tol),
                &format!("trial {trial}: realized f within f_up"),
            )?;
        }
        check(start.elapsed() <= Duration::from_secs(120), "within 2 min")?;
        Ok(format!("50 solves, worst ordering slack {worst:.2e}"))
    });
}

trait AmaxSigned {
    fn amax_signed(&self) -> f64;
}
impl AmaxSigned for DVector<f64> {
    fn amax_signed(&self) -> f64 {
        self.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fixed-point realization of a snapshot solution (fixed injections).
fn realize_snapshot(
    fx: &Fixture,
    prog: &droopopt_core::program::ConicProgram,
    sol: &droopopt_core::solver::Solution,
) -> Result<PowerFlowState, String> {
    let n = fx.net.n_lines();
    let mut net_p = fx.midday.load_p.clone();
    let mut net_q = fx.midday.load_q.clone();
    for (u, unit) in fx.net.ibdgs.iter().enumerate() {
        let l = fx.net.line_of_bus(unit.bus);
        net_p[l] -= sol.value(prog, Quantity::InjP, u, 0);
        net_q[l] -= sol.value(prog, Quantity::InjQ, u, 0);
    }
    let zeros = DVector::zeros(n);
    let envelope = conditions::InjectionEnvelope::nominal(&fx.net);
    let m = conditions::compute_condition_matrices(&fx.net, &fx.topo, &zeros, &zeros, &envelope)
        .map_err(|e| e.to_string())?;
    let start = PowerFlowState {
        v: DVector::from_fn(n, |l, _| sol.value(prog, Quantity::VoltSq, l, 0)),
        f: DVector::from_fn(n, |l, _| sol.value(prog, Quantity::CurrSq, l, 0)),
        p: DVector::from_fn(n, |l, _| sol.value(prog, Quantity::FlowP, l, 0)),
        q: DVector::from_fn(n, |l, _| sol.value(prog, Quantity::FlowQ, l, 0)),
        converged: true,
        iterations: 0,
        residual: 0.0,
    };
    let v_hat = DVector::from_fn(n, |l, _| sol.value(prog, Quantity::HatVoltSq, l, 0));
    powerflow::adhoc_iteration(
        &fx.net, &fx.topo, &v_hat, &m.d, &net_p, &net_q, &zeros, &zeros, &start, 1e-12,
    )
    .map_err(|e| e.to_string())
}

fn criterion_4_design_validates(
    results: &mut Vec<Outcome>,
    fx: &Fixture,
) -> Option<pipeline::DesignOutcome> {
    let mut outcome_slot = None;
    let start = Instant::now();
    let pass_detail: Result<String, String>;
    {
        let cfg = PipelineConfig::default();
        match pipeline::design(&fx.net, &fx.topo, &fx.high_pv, &cfg) {
            Err(e) => pass_detail = Err(e.to_string()),
            Ok(outcome) => {
                match pipeline::simulate(&fx.net, &outcome.droop, &fx.high_pv, cfg.oracle_tol) {
                    Err(e) => pass_detail = Err(e.to_string()),
                    Ok((_states, verdict)) => {
                        let clean = verdict.clean();
                        let in_budget = start.elapsed() <= Duration::from_secs(300);
                        pass_detail = if clean && in_budget {
                            Ok(format!(
                                "T=4 design: worst |V| {:.4}/{:.4}, zero violations",
                                verdict.worst_v_hi, verdict.worst_v_lo
                            ))
                        } else if !clean {
                            Err(format!(
                                "{} violations, worst |V| {:.4}/{:.4}",
                                verdict.violations.len(),
                                verdict.worst_v_hi,
                                verdict.worst_v_lo
                            ))
                        } else {
                            Err("exceeded 5 min budget".into())
                        };
                        outcome_slot = Some(outcome);
                    }
                }
            }
        }
    }
    let pass = pass_detail.is_ok();
    let detail = match pass_detail {
        Ok(d) | Err(d) => d,
    };
    println!(
        "criterion 4 design validates: {} ({detail}; {:.2?})",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed()
    );
    results.push(Outcome {
        name: "4 design validates",
        detail,
        pass,
    });
    outcome_slot
}

fn criterion_5_relaxation_inexactness(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "5 relaxation inexactness", || {
        let cfg = PipelineConfig {
            mode: DesignMode::Ropf,
            ..PipelineConfig::default()
        };
        let outcome =
            pipeline::design(&fx.net, &fx.topo, &fx.high_pv, &cfg).map_err(|e| e.to_string())?;
        let (_states, verdict) =
            pipeline::simulate(&fx.net, &outcome.droop, &fx.high_pv, cfg.oracle_tol)
                .map_err(|e| e.to_string())?;
        check(
            verdict.worst_v_hi > 1.05,
            &format!(
                "plain relaxation must overshoot 1.05, got {:.4}",
                verdict.worst_v_hi
            ),
        )?;
        check(
            verdict.violations.iter().any(|v| v.quantity == "v_hi"),
            "an overvoltage violation must be flagged",
        )?;
        Ok(format!(
            "plain-relaxation design overshoots to |V| {:.4} with {} flagged violations",
            verdict.worst_v_hi,
            verdict.violations.len()
        ))
    });
}

fn criterion_6_voltage_identity(
    results: &mut Vec<Outcome>,
    fx: &Fixture,
    design: Option<&pipeline::DesignOutcome>,
) {
    run_criterion(results, "6 voltage identity at fixed points", || {
        // snapshot fixed points from randomized restricted solves
        let prog = build_maropf(&fx.net, &fx.topo, &fx.midday, ObjectiveWeights::default());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        let n = fx.net.n_lines();
        for _ in 0..5 {
            let mut p = prog.clone();
            let terms: Vec<(usize, f64)> = (0..n)
                .map(|l| {
                    (
                        p.map.id(Quantity::CurrSq, l, 0),
                        rng.random_range(0.02..1.0),
                    )
                })
                .collect();
            p.set_linear_objective(terms, 0.0);
            let sol = solve_socp(&p, &SolverConfig::default()).map_err(|e| e.to_string())?;
            let state = realize_snapshot(fx, &p, &sol)?;
            // recompute the proxy voltage from the closed form and compare
            let mut net_p = fx.midday.load_p.clone();
            let mut net_q = fx.midday.load_q.clone();
            for (u, unit) in fx.net.ibdgs.iter().enumerate() {
                let l = fx.net.line_of_bus(unit.bus);
                net_p[l] -= sol.value(&p, Quantity::InjP, u, 0);
                net_q[l] -= sol.value(&p, Quantity::InjQ, u, 0);
            }
            let zeros = DVector::zeros(n);
            let m = conditions::compute_condition_matrices(
                &fx.net,
                &fx.topo,
                &zeros,
                &zeros,
                &conditions::InjectionEnvelope::nominal(&fx.net),
            )
            .map_err(|e| e.to_string())?;
            let h = &fx.topo.closure;
            let r = fx.net.r_vec();
            let x = fx.net.x_vec();
            let hp = h * &net_p;
            let hq = h * &net_q;
            let weighted = DVector::from_fn(n, |l, _| 2.0 * (r[l] * hp[l] + x[l] * hq[l]));
            let v_hat = &m.c * (fx.net.v0 * fx.net.slack_adjacent_vec()) - &m.c * weighted;
            let recon = &v_hat - &m.d * &state.f;
            let residual = (&state.v - recon).norm() / state.v.norm();
            worst = worst.max(residual);
            check(
                residual <= 1e-6,
                &format!("snapshot identity residual {residual:.2e}"),
            )?;
        }
        // fixed points of the designed horizon
        if let Some(outcome) = design {
            for (t, snap) in fx.high_pv.iter().enumerate() {
                let chk = pipeline::realize_step(
                    &fx.net,
                    &fx.topo,
                    &outcome.program,
                    &outcome.solution,
                    snap,
                    t,
                    &outcome.slopes,
                    1e-12,
                )
                .map_err(|e| e.to_string())?;
                worst = worst.max(chk.identity_residual);
                check(
                    chk.identity_residual <= 1e-6,
                    &format!("design step {t} identity residual {:.2e}", chk.identity_residual),
                )?;
                check(
                    chk.current_margin <= 1e-7,
                    &format!("design step {t} current margin {:.2e}", chk.current_margin),
                )?;
            }
        } else {
            return Err("criterion 4 produced no design".into());
        }
        Ok(format!("worst relative residual {worst:.2e}"))
    });
}

fn criterion_7_conservatism(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "7 current-bound conservatism", || {
        // relax the upper voltage limits, grow a stress injection at the
        // first feeder bus (so the binding current concentrates in line 1,
        // the shape the experiment describes), and find the largest
        // feasible scale; case IBDGs stay at their midday availability
        let mut net = fx.net.clone();
        for bus in net.buses.iter_mut() {
            bus.v_max = 9.0;
        }
        let topo = build_topology(&net).unwrap();
        let feasible_fup = |scale: f64| -> Result<Option<(usize, f64, f64)>, String> {
            let mut snap = fx.midday.clone();
            snap.load_p[0] -= scale;
            let mut scaled = net.clone();
            // ampacity is the only limit under study
            for line in scaled.lines.iter_mut() {
                line.p_max = 1e3;
                line.q_max = 1e3;
            }
            let mut prog = build_maropf(&scaled, &topo, &snap, ObjectiveWeights::default());
            // pin every injection to its available power, reactive to zero
            for (u, _unit) in scaled.ibdgs.iter().enumerate() {
                let p = prog.map.id(Quantity::InjP, u, 0);
                prog.vars[p].lb = snap.avail[u];
                prog.vars[p].ub = snap.avail[u];
                let q = prog.map.id(Quantity::InjQ, u, 0);
                prog.vars[q].lb = 0.0;
                prog.vars[q].ub = 0.0;
            }
            // tightest current upper bounds
            let terms: Vec<(usize, f64)> = (0..net.n_lines())
                .map(|l| (prog.map.id(Quantity::UpCurrSq, l, 0), 1.0))
                .collect();
            prog.set_linear_objective(terms, 0.0);
            // beyond-loadability programs may break down numerically; the
            // boundary search treats that the same as infeasibility
            let sol = match solve_socp(&prog, &SolverConfig::default()) {
                Ok(s) => s,
                Err(droopopt_core::solver::SolverError::NumericalBreakdown(_)) => return Ok(None),
                Err(e) => return Err(e.to_string()),
            };
            if sol.status != SolveStatus::Optimal {
                return Ok(None);
            }
            // binding line: highest utilization of the ampacity
            let (mut line, mut best) = (0, 0.0);
            for l in 0..net.n_lines() {
                let fu = sol.value(&prog, Quantity::UpCurrSq, l, 0);
                let ratio = fu / net.lines[l].i_max;
                if ratio > best {
                    best = ratio;
                    line = l;
                }
            }
            let fu = sol.value(&prog, Quantity::UpCurrSq, line, 0);
            // exact power flow at the same injections
            let mut inj_p = DVector::zeros(net.n_lines());
            for (u, unit) in net.ibdgs.iter().enumerate() {
                inj_p[net.line_of_bus(unit.bus)] += snap.avail[u];
            }
            let state = powerflow::solve_fixed_injections(
                &net,
                &snap.load_p,
                &snap.load_q,
                &inj_p,
                &DVector::zeros(net.n_lines()),
                1e-12,
            )
            .map_err(|e| e.to_string())?;
            Ok(Some((line, fu, state.f[line])))
        };

        // grow the scale until infeasible, then bisect the boundary
        check(feasible_fup(1.0)?.is_some(), "must start feasible at scale 1")?;
        let mut lo = 1.0;
        let mut hi = 1.0;
        while hi < 64.0 {
            hi *= 1.6;
            if feasible_fup(hi)?.is_none() {
                break;
            }
            lo = hi;
        }
        check(feasible_fup(hi)?.is_none(), "must reach an infeasible scale")?;
        for _ in 0..24 {
            let mid = 0.5 * (lo + hi);
            if feasible_fup(mid)?.is_some() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (line, f_up, f_star) = feasible_fup(lo)?.ok_or("lost feasibility at lo")?;
        let utilization = f_up / net.lines[line].i_max;
        check(
            utilization > 0.98,
            &format!("current bound must bind, utilization {utilization:.4}"),
        )?;
        let gap = (f_up - f_star) / f_star;
        check(
            gap.abs() <= 0.10,
            &format!("relative conservatism {gap:.4} beyond 10%"),
        )?;
        Ok(format!(
            "binding line {} at scale {:.3}: bound {:.4} vs oracle {:.4} ({:.2}% gap)",
            net.lines[line].id,
            lo,
            f_up,
            f_star,
            100.0 * gap
        ))
    });
}

fn criterion_8_droop_approximation(results: &mut Vec<Outcome>) {
    run_criterion(results, "8 droop approximation formula", || {
        let params = DroopParameters {
            alpha_p: 14.0,
            alpha_q: 9.0,
            v0p: 1.02,
            v0q: 0.99,
            q_g0: 0.03,
        };
        let taylor_v0 = 1.1025;
        let curve = approx_to_exact(&params, taylor_v0);
        let root = taylor_v0.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let v_mag = if i == 0 {
                root
            } else {
                rng.random_range(0.9..1.1)
            };
            let (dp, dq) =
                droopopt_core::droop::approximation_error(&params, &curve, v_mag, 1.0);
            let expected = (v_mag - root) * (v_mag - root);
            let err_q = (dq.abs() - params.alpha_q * expected).abs();
            check(
                err_q < 1e-12,
                &format!("reactive mismatch off by {err_q:.2e} at V={v_mag}"),
            )?;
            worst = worst.max(err_q);
            let v = v_mag * v_mag;
            let active = v > params.v0p && v_mag > curve.vref_p_star;
            let idle = v <= params.v0p && v_mag <= curve.vref_p_star;
            if active {
                let err_p = (dp.abs() - params.alpha_p * expected).abs();
                check(
                    err_p < 1e-12,
                    &format!("active-branch mismatch off by {err_p:.2e}"),
                )?;
                worst = worst.max(err_p);
            } else if idle {
                check(dp.abs() < 1e-12, "idle branch must agree exactly")?;
            }
            check(dp <= 1e-12 && dq <= 1e-12, "approximation is a lower bound")?;
            if i == 0 {
                check(
                    dp.abs() < 1e-12 && dq.abs() < 1e-12,
                    "zero mismatch at the expansion point",
                )?;
            }
        }
        Ok(format!("1000 samples, worst formula error {worst:.2e}"))
    });
}

fn criterion_9_oracle_equivalence(results: &mut Vec<Outcome>) {
    run_criterion(results, "9 oracle equivalence", || {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut worst = 0.0f64;
        let mut ran = 0;
        while ran < 200 {
            let mut net = common::random_small_net(&mut rng);
            // a droop unit with flat curves exercises the droop oracle's
            // full code path while staying expressible as fixed injections
            let unit_bus = net.n_buses() - 1;
            net = io::test_networks::with_ibdg(net, unit_bus, 0.4);
            let avail = rng.random_range(0.0..0.35);
            let q_g0 = rng.random_range(-0.1..0.15);
            let curve = droopopt_core::droop::ExactDroopCurve {
                alpha_p_star: 0.0,
                alpha_q_star: 0.0,
                vref_p_star: 1.05,
                vref_q_star: 1.0,
                q_g0,
                taylor_v0: 1.1025,
            };
            let (cp, cq) = powerflow::clip_capability(&net.ibdgs[0], avail, q_g0);
            let mut inj_p = DVector::zeros(net.n_lines());
            let mut inj_q = DVector::zeros(net.n_lines());
            inj_p[net.line_of_bus(unit_bus)] = cp;
            inj_q[net.line_of_bus(unit_bus)] = cq;
            let brute = match powerflow::brute_force_small(&net, &inj_p, &inj_q) {
                Ok(s) => s,
                Err(droopopt_core::powerflow::PowerFlowError::NoRealSolution) => continue,
                Err(e) => return Err(e.to_string()),
            };
            let droop = powerflow::exact_droop_powerflow(&net, &[curve], &[avail], 1e-11)
                .map_err(|e| e.to_string())?;
            let dv = (&brute.v - &droop.v).amax();
            let df = (&brute.f - &droop.f).amax();
            worst = worst.max(dv).max(df);
            check(
                dv < 1e-8 && df < 1e-8,
                &format!("instance {ran}: dv {dv:.2e} df {df:.2e}"),
            )?;
            ran += 1;
        }

        // independent Newton solve on the five-bus droop chain
        let net = common::five_bus_droop_chain();
        let curves: Vec<_> = net
            .droop_units()
            .iter()
            .map(|_| droopopt_core::droop::ExactDroopCurve {
                alpha_p_star: 0.9,
                alpha_q_star: 1.4,
                vref_p_star: 1.005,
                vref_q_star: 0.97,
                q_g0: 0.01,
                taylor_v0: 1.1025,
            })
            .collect();
        let avail = vec![0.30, 0.38];
        let state = powerflow::exact_droop_powerflow(&net, &curves, &avail, 1e-10)
            .map_err(|e| e.to_string())?;
        let (v_newton, _) =
            common::newton_polar(&net, &curves, &avail, 1e-12).ok_or("newton diverged")?;
        let mut newton_gap = 0.0f64;
        for l in 0..net.n_lines() {
            newton_gap = newton_gap.max((state.v[l].sqrt() - v_newton[l]).abs());
        }
        check(
            newton_gap < 1e-6,
            &format!("newton gap {newton_gap:.2e} beyond 1e-6"),
        )?;
        Ok(format!(
            "200 closed-form instances (worst {worst:.2e}), newton gap {newton_gap:.2e}"
        ))
    });
}

fn criterion_10_misocp_exactness(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "10 branch-and-bound exactness", || {
        // 34-bus, one step, 8 droop binaries
        let slopes = conditions::tune_droop_slopes(&fx.net, &fx.topo, 2.0)
            .map_err(|e| e.to_string())?;
        let prog = build_droop_design(
            &fx.net,
            &fx.topo,
            std::slice::from_ref(&fx.high_pv[2]),
            &slopes,
            ObjectiveWeights::default(),
            DesignMode::Maropf,
        )
        .map_err(|e| e.to_string())?;
        let binaries = prog.binaries();
        check(
            binaries.len() == 8,
            &format!("{} binaries (want 8)", binaries.len()),
        )?;
        let cfg = SolverConfig {
            bb_node_limit: 40_000,
            ..SolverConfig::default()
        };
        let sol = solve_misocp(&prog, &cfg).map_err(|e| e.to_string())?;
        check(
            sol.status == SolveStatus::Optimal,
            &format!("search status {:?}", sol.status),
        )?;
        let stats = sol.bb.as_ref().unwrap();
        for w in stats.bound_history.windows(2) {
            check(w[1] >= w[0] - 1e-9, "best bound must be non-decreasing")?;
        }

        // exhaustive enumeration over the 256 fixings
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << binaries.len()) {
            let mut fixed = prog.clone();
            for (k, &y) in binaries.iter().enumerate() {
                let val = if mask & (1 << k) != 0 { 1.0 } else { 0.0 };
                fixed.vars[y].lb = val;
                fixed.vars[y].ub = val;
            }
            if let Ok(s) = solve_socp(&fixed, &SolverConfig::default()) {
                if s.status == SolveStatus::Optimal {
                    best = best.min(s.objective);
                }
            }
        }
        let gap = (sol.objective - best).abs();
        check(
            gap < 1e-6,
            &format!(
                "bb {:.8} vs enumeration {:.8} (gap {gap:.2e})",
                sol.objective, best
            ),
        )?;
        Ok(format!(
            "bb matches enumeration at {:.6} over {} nodes (gap {gap:.1e})",
            sol.objective, stats.nodes
        ))
    });
}

fn criterion_11_refinement_and_scale(results: &mut Vec<Outcome>, fx: &Fixture) {
    run_criterion(results, "11 refinement and 85-bus scale", || {
        let start = Instant::now();
        // refinement over two scenarios: high PV (reverse flows) and evening
        // (forward flows)
        let horizon = io::load_profiles("ieee34", None, &fx.net).unwrap();
        let evening = horizon.window("17:00", "20:00").unwrap().thin(2);
        let scenarios = [
            fx.high_pv[..2].to_vec(),
            pipeline::horizon_snapshots(&fx.net, &evening),
        ];
        let slopes = conditions::tune_droop_slopes(&fx.net, &fx.topo, 2.0)
            .map_err(|e| e.to_string())?;
        let solver_cfg = SolverConfig {
            bb_node_limit: 150,
            ..SolverConfig::default()
        };
        for (i, steps) in scenarios.iter().enumerate() {
            let base = build_droop_design(
                &fx.net,
                &fx.topo,
                steps,
                &slopes,
                ObjectiveWeights::default(),
                DesignMode::Maropf,
            )
            .map_err(|e| e.to_string())?;
            let (incumbent, program, trace) = refine_loop(
                &fx.net,
                &fx.topo,
                &base,
                &slopes,
                &solver_cfg,
                &RefineConfig::default(),
            )
            .map_err(|e| e.to_string())?;
            check(
                trace.steps.len() <= 10,
                &format!("scenario {i}: {} iterations", trace.steps.len()),
            )?;
            let accepted: Vec<f64> = trace
                .steps
                .iter()
                .filter(|s| s.accepted)
                .map(|s| s.objective)
                .collect();
            for w in accepted.windows(2) {
                check(
                    w[1] <= w[0] + 1e-8,
                    &format!("scenario {i}: accepted objectives increased"),
                )?;
            }
            // the incumbent passes full oracle validation
            let records = pipeline::extract_droop_records(&fx.net, &program, &incumbent, &slopes);
            let (_s, verdict) = pipeline::simulate(&fx.net, &records, steps, 1e-8)
                .map_err(|e| e.to_string())?;
            check(
                verdict.clean(),
                &format!(
                    "scenario {i}: incumbent fails oracle validation ({} violations)",
                    verdict.violations.len()
                ),
            )?;
        }

        // 85-bus design and simulation inside the desk budget
        let net85 = io::load_case("ieee85").map_err(|e| e.to_string())?;
        let topo85 = build_topology(&net85).map_err(|e| e.to_string())?;
        let horizon85 = io::load_profiles("ieee85", None, &net85).map_err(|e| e.to_string())?;
        let window85 = horizon85
            .window("09:00", "12:00")
            .map_err(|e| e.to_string())?
            .thin(4);
        let steps85 = pipeline::horizon_snapshots(&net85, &window85);
        let cfg85 = PipelineConfig {
            solver: SolverConfig {
                bb_node_limit: 120,
                ..SolverConfig::default()
            },
            ..PipelineConfig::default()
        };
        let outcome85 =
            pipeline::design(&net85, &topo85, &steps85, &cfg85).map_err(|e| e.to_string())?;
        let (_states, verdict85) =
            pipeline::simulate(&net85, &outcome85.droop, &steps85, cfg85.oracle_tol)
                .map_err(|e| e.to_string())?;
        check(
            verdict85.clean(),
            &format!("85-bus: {} violations", verdict85.violations.len()),
        )?;
        check(
            start.elapsed() <= Duration::from_secs(900),
            "within 15 min",
        )?;
        Ok(format!(
            "refinement monotone on 2 scenarios; 85-bus worst |V| {:.4}/{:.4} in {:.0?}",
            verdict85.worst_v_hi,
            verdict85.worst_v_lo,
            start.elapsed()
        ))
    });
}
