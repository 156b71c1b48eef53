//! Command-line frontend: condition checks, droop design, exact-droop
//! simulation, mode comparison, and report re-rendering.
//!
//! Exit codes: 0 ok, 2 condition check failed, 3 security violation,
//! 4 solver failure, 5 I/O or argument error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use droopopt_core::conditions::{self, BreakSearch};
use droopopt_core::grid::{build_topology, RadialNetwork, TopologyMatrices};
use droopopt_core::io;
use droopopt_core::pipeline::{self, PipelineConfig};
use droopopt_core::program::{DesignMode, ObjectiveWeights};
use droopopt_core::refine::RefineConfig;
use droopopt_core::report::{DroopParameterFile, RunReport, REPORT_SCHEMA_VERSION};
use droopopt_core::scenario::ScenarioHorizon;

#[derive(Parser)]
#[command(
    name = "droopopt",
    about = "Adaptive droop design for radial distribution grids",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CaseArgs {
    /// Bundled case name ("ieee34", "ieee85") or a case file path.
    case: String,
    /// Load-multiplier profile CSV (defaults to the bundled profile).
    #[arg(long)]
    load_profile: Option<String>,
    /// Availability profile CSV (defaults to the bundled profile).
    #[arg(long)]
    pv_profile: Option<String>,
    /// Planning window "HH:MM-HH:MM"; presets: scenario1 = 07:00-12:00,
    /// scenario2 = 12:00-21:00.
    #[arg(long, default_value = "07:00-12:00")]
    window: String,
    /// Evenly thin the window to at most this many steps (0 = keep all).
    #[arg(long, default_value_t = 12)]
    max_steps: usize,
}

#[derive(Args, Clone)]
struct SolveArgs {
    /// Objective weights "w_pc,w_pl,w_v".
    #[arg(long, default_value = "0.6,0.3,0.1")]
    weights: String,
    /// Margin added to the path impedance when tuning droop slopes.
    #[arg(long, default_value_t = 2.0)]
    epsilon: f64,
    /// Relative branch-and-bound gap.
    #[arg(long, default_value_t = 1e-6)]
    gap: f64,
    /// Branch-and-bound node budget.
    #[arg(long, default_value_t = 400)]
    node_limit: usize,
    /// Stream per-iteration residuals and per-node bounds.
    #[arg(long)]
    solver_log: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the a-priori feasibility conditions.
    Check {
        #[command(flatten)]
        case: CaseArgs,
        /// Slope margin folded into the effective shunts.
        #[arg(long, default_value_t = 2.0)]
        epsilon: f64,
        /// Emit a margin sweep table (delimited text) over this many points.
        #[arg(long)]
        sweep: Option<usize>,
        /// Run the injection-scaling break search and report it.
        #[arg(long)]
        break_search: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Design droop parameters over the planning window.
    Optimize {
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        solve: SolveArgs,
        /// Relaxation family: "maropf" (restricted, default) or "ropf".
        #[arg(long, default_value = "maropf")]
        mode: String,
        /// Run the solution-quality improvement loop.
        #[arg(long)]
        refine: bool,
        /// Write the run report (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the droop parameter file (JSON) here.
        #[arg(long)]
        params_out: Option<PathBuf>,
        /// Dump the compiled program in the sparse text format.
        #[arg(long)]
        dump_program: Option<PathBuf>,
    },
    /// Validate a droop parameter file with exact droop power flow.
    Simulate {
        #[command(flatten)]
        case: CaseArgs,
        /// Droop parameter file produced by `optimize`.
        #[arg(long)]
        params: PathBuf,
        /// Write per-step voltage/current tables (delimited text) here.
        #[arg(long)]
        tables_out: Option<PathBuf>,
    },
    /// Design in both modes, simulate both, and print the comparison.
    Compare {
        #[command(flatten)]
        case: CaseArgs,
        #[command(flatten)]
        solve: SolveArgs,
        /// Write the two reports as a JSON array here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render a stored run report.
    Report {
        /// Report JSON produced by `optimize`/`compare`.
        file: PathBuf,
        /// Print raw JSON instead of the rendering.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(5)
        }
    }
}

fn parse_weights(text: &str) -> Result<ObjectiveWeights> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("weights must be three comma-separated numbers")?;
    if parts.len() != 3 || parts.iter().any(|w| *w < 0.0) || parts.iter().all(|w| *w == 0.0) {
        return Err(anyhow!("weights must be three non-negative numbers, at least one positive"));
    }
    Ok(ObjectiveWeights {
        w_pc: parts[0],
        w_pl: parts[1],
        w_v: parts[2],
    })
}

fn parse_window(text: &str) -> Result<(String, String)> {
    let resolved = match text {
        "scenario1" => "07:00-12:00",
        "scenario2" => "12:00-21:00",
        other => other,
    };
    let (a, b) = resolved
        .split_once('-')
        .ok_or_else(|| anyhow!("window must look like 07:00-12:00"))?;
    Ok((a.to_string(), b.to_string()))
}

struct LoadedCase {
    net: RadialNetwork,
    topo: TopologyMatrices,
    horizon: ScenarioHorizon,
}

fn load(case: &CaseArgs) -> Result<LoadedCase> {
    let net = io::load_case(&case.case)?;
    let topo = build_topology(&net)?;
    let horizon = match (&case.load_profile, &case.pv_profile) {
        (Some(load), Some(pv)) => io::load_profiles(load, Some(pv), &net)?,
        (None, None) => io::load_profiles(&case.case, None, &net)?,
        _ => return Err(anyhow!("--load-profile and --pv-profile go together")),
    };
    let (start, end) = parse_window(&case.window)?;
    let mut windowed = horizon.window(&start, &end).map_err(|e| anyhow!(e))?;
    if case.max_steps > 0 {
        windowed = windowed.thin(case.max_steps);
    }
    Ok(LoadedCase {
        net,
        topo,
        horizon: windowed,
    })
}

fn pipeline_config(solve: &SolveArgs, mode: DesignMode, refine: bool) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig {
        mode,
        weights: parse_weights(&solve.weights)?,
        refine,
        refine_cfg: RefineConfig::default(),
        slope_margin: solve.epsilon,
        ..PipelineConfig::default()
    };
    cfg.solver.bb_gap = solve.gap;
    cfg.solver.bb_node_limit = solve.node_limit;
    cfg.solver.log = solve.solver_log;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Check {
            case,
            epsilon,
            sweep,
            break_search,
            json,
        } => {
            let loaded = load(&case)?;
            let report = pipeline::check_network_conditions(&loaded.net, &loaded.topo, epsilon)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "conditions at slope margin {epsilon}: 8.a {} (norm {:.4})  8.b {} (min {:.3e})  8.c {} (norm {:.4})  8.d {} (eta {})",
                    report.pass_8a,
                    report.norm_8a,
                    report.pass_8b,
                    report.min_d,
                    report.pass_8c,
                    report.norm_e,
                    report.pass_8d,
                    report
                        .eta
                        .map(|e| format!("{e:.4}"))
                        .unwrap_or_else(|| "none".into()),
                );
                println!("overall: {}", if report.overall { "pass" } else { "FAIL" });
            }
            if let Some(points) = sweep {
                let grid: Vec<f64> = (0..points.max(1))
                    .map(|i| 0.01 * (i as f64 + 1.0))
                    .collect();
                let rows = conditions::sweep_epsilon(&loaded.net, &loaded.topo, &grid)?;
                println!("epsilon,det_sign,det_log10,min_d");
                for row in rows {
                    println!(
                        "{},{},{},{}",
                        row.epsilon, row.det_sign, row.det_log10, row.min_d
                    );
                }
            }
            if break_search {
                let direction = loaded.net.load_p_vec() * 0.8786;
                let search = BreakSearch {
                    slope_margin: Some(0.05),
                    ..BreakSearch::default()
                };
                match conditions::find_condition_break(
                    &loaded.net,
                    &loaded.topo,
                    &direction,
                    search,
                ) {
                    Ok(b) => println!(
                        "break: scale {:.4} first violated {} oracle max |V| {:.4}",
                        b.scale, b.first_violated, b.oracle_v_max
                    ),
                    Err(e) => println!("break: {e}"),
                }
            }
            Ok(if report.overall {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }

        Command::Optimize {
            case,
            solve,
            mode,
            refine,
            out,
            params_out,
            dump_program,
        } => {
            let loaded = load(&case)?;
            let mode = match mode.as_str() {
                "ropf" => DesignMode::Ropf,
                "maropf" => DesignMode::Maropf,
                other => return Err(anyhow!("unknown mode {other:?}")),
            };
            let cfg = pipeline_config(&solve, mode, refine)?;
            let steps = pipeline::horizon_snapshots(&loaded.net, &loaded.horizon);
            let outcome = match pipeline::design(&loaded.net, &loaded.topo, &steps, &cfg) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("solver failure: {e}");
                    return Ok(ExitCode::from(4));
                }
            };
            if let Some(path) = dump_program {
                std::fs::write(&path, outcome.program.dump())?;
            }
            let (states, verdict) =
                pipeline::simulate(&loaded.net, &outcome.droop, &steps, cfg.oracle_tol)?;
            let conditions =
                pipeline::check_network_conditions(&loaded.net, &loaded.topo, cfg.slope_margin)
                    .ok();
            let report = pipeline::make_report(
                &case.case,
                &case.window,
                &loaded.net,
                &cfg,
                &outcome,
                &states,
                &loaded.horizon.labels,
                &verdict,
                conditions,
            );
            if let Some(path) = &out {
                std::fs::write(path, report.to_json())?;
            }
            if let Some(path) = &params_out {
                let file = DroopParameterFile {
                    schema_version: REPORT_SCHEMA_VERSION,
                    case: case.case.clone(),
                    records: outcome.droop.clone(),
                };
                std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
            }
            print!("{}", report.render());
            Ok(if verdict.clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }

        Command::Simulate {
            case,
            params,
            tables_out,
        } => {
            let loaded = load(&case)?;
            let text = std::fs::read_to_string(&params)
                .with_context(|| format!("reading {}", params.display()))?;
            let file: DroopParameterFile = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", params.display()))?;
            let steps = pipeline::horizon_snapshots(&loaded.net, &loaded.horizon);
            let (states, verdict) =
                pipeline::simulate(&loaded.net, &file.records, &steps, 1e-8)?;
            if let Some(path) = tables_out {
                let mut table = String::from("time,quantity");
                for l in 0..loaded.net.n_lines() {
                    table.push_str(&format!(",{}", loaded.net.bus_of_line(l)));
                }
                table.push('\n');
                for (t, state) in states.iter().enumerate() {
                    let label = &loaded.horizon.labels[t];
                    table.push_str(&format!("{label},v_mag"));
                    for l in 0..loaded.net.n_lines() {
                        table.push_str(&format!(",{:.6}", state.v[l].sqrt()));
                    }
                    table.push('\n');
                    table.push_str(&format!("{label},f_sq"));
                    for l in 0..loaded.net.n_lines() {
                        table.push_str(&format!(",{:.6e}", state.f[l]));
                    }
                    table.push('\n');
                }
                std::fs::write(path, table)?;
            }
            println!(
                "simulated {} steps: worst |V| {:.4}/{:.4}, worst current ratio {:.4}, {} violation(s)",
                states.len(),
                verdict.worst_v_hi,
                verdict.worst_v_lo,
                verdict.worst_current_ratio,
                verdict.violations.len()
            );
            for v in verdict.violations.iter().take(10) {
                println!(
                    "  {} at index {} step {} by {:.5}",
                    v.quantity, v.index, v.timestep, v.amount
                );
            }
            Ok(if verdict.clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }

        Command::Compare { case, solve, out } => {
            let loaded = load(&case)?;
            let steps = pipeline::horizon_snapshots(&loaded.net, &loaded.horizon);
            let mut reports = Vec::new();
            let mut clean = [false; 2];
            for (i, mode) in [DesignMode::Maropf, DesignMode::Ropf].into_iter().enumerate() {
                let cfg = pipeline_config(&solve, mode, false)?;
                let outcome = match pipeline::design(&loaded.net, &loaded.topo, &steps, &cfg) {
                    Ok(o) => o,
                    Err(e) => {
                        eprintln!("solver failure in {mode:?}: {e}");
                        return Ok(ExitCode::from(4));
                    }
                };
                let (states, verdict) =
                    pipeline::simulate(&loaded.net, &outcome.droop, &steps, cfg.oracle_tol)?;
                clean[i] = verdict.clean();
                reports.push(pipeline::make_report(
                    &case.case,
                    &case.window,
                    &loaded.net,
                    &cfg,
                    &outcome,
                    &states,
                    &loaded.horizon.labels,
                    &verdict,
                    None,
                ));
            }
            println!(
                "{:<8} {:>10} {:>10} {:>9} {:>9} {:>11}",
                "method", "F_obj", "F_pc", "max|V|", "min|V|", "violations"
            );
            for r in &reports {
                println!(
                    "{:<8} {:>10.4} {:>10.4} {:>9.4} {:>9.4} {:>11}",
                    r.mode,
                    r.objective.f_obj,
                    r.objective.f_pc,
                    r.security.worst_v_hi,
                    r.security.worst_v_lo,
                    r.security.violations.len()
                );
            }
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(if clean[0] && clean[1] {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }

        Command::Report { file, json } => {
            let text = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            // accept both a single report and a compare array
            if let Ok(report) = RunReport::from_json(&text) {
                if json {
                    println!("{}", report.to_json());
                } else {
                    print!("{}", report.render());
                }
            } else {
                let reports: Vec<RunReport> =
                    serde_json::from_str(&text).context("not a report or report array")?;
                for report in reports {
                    if json {
                        println!("{}", report.to_json());
                    } else {
                        print!("{}", report.render());
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
