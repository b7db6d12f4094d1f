//! Command-line entry points: config-driven simulate / solve / sweep /
//! certify subcommands with deterministic JSON artifacts.
//!
//! Exit codes: 0 success (per-subcommand condition), 1 numeric failure,
//! 2 configuration/schema error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use crate::config::{ScenarioConfig, SCHEMA_VERSION};
use crate::ocp::{solve, transcribe, InitStrategy, OcpSpec, SolveOpts, SolveStatus};
use crate::plot::{line_plot, Series};
use crate::sim::{balance_report, cost_of_trajectory, integrate, Trajectory};
use crate::turnpike::{distance_series, horizon_sweep, lemma_certificate};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "iphs", version, about = "Irreversible port-Hamiltonian systems: simulation, minimal energy/entropy transitions, turnpike diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate a controlled trajectory and check the balance laws.
    Simulate(CommonArgs),
    /// Solve the state-transition optimal control problem.
    Solve(CommonArgs),
    /// Sweep horizons and report turnpike metrics.
    Sweep(CommonArgs),
    /// Certify the two-sided entropy-production bound on a compact box.
    Certify(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Scenario configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed recorded in summaries (all numerics are deterministic).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output formats (csv, json, svg); overrides the config list.
    #[arg(long, value_delimiter = ',')]
    pub format: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    csv: bool,
    json: bool,
    svg: bool,
}

impl Outputs {
    fn new(cfg: &ScenarioConfig, args: &CommonArgs) -> std::io::Result<Self> {
        let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        std::fs::create_dir_all(&dir)?;
        let formats: Vec<String> =
            if args.format.is_empty() { cfg.output.formats.clone() } else { args.format.clone() };
        Ok(Self {
            dir,
            csv: formats.iter().any(|f| f == "csv"),
            json: formats.iter().any(|f| f == "json"),
            svg: formats.iter().any(|f| f == "svg"),
        })
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> std::io::Result<()> {
        if self.json {
            let mut text = serde_json::to_string_pretty(value).expect("serializable");
            text.push('\n');
            std::fs::write(self.dir.join(name), text)?;
        }
        Ok(())
    }

    fn write_csv(&self, name: &str, traj: &Trajectory) -> Result<(), crate::sim::SimError> {
        if self.csv {
            let file = std::fs::File::create(self.dir.join(name))?;
            traj.write_csv(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }

    fn write_svg(&self, name: &str, content: &str) -> std::io::Result<()> {
        if self.svg {
            std::fs::write(self.dir.join(name), content)?;
        }
        Ok(())
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, i32> {
    ScenarioConfig::from_path(path).map_err(|e| {
        eprintln!("config error: {e}");
        EXIT_CONFIG
    })
}

fn sweep_threads() -> usize {
    std::env::var("IPHS_OPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |v| v.get()))
}

fn trajectory_svg(traj: &Trajectory, title: &str) -> String {
    let n = traj.x.first().map_or(0, |x| x.len());
    let m = traj.u.first().map_or(0, |u| u.len());
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for i in 0..n {
        columns.push((format!("x{}", i + 1), traj.x.iter().map(|x| x[i]).collect()));
    }
    for j in 0..m {
        columns.push((format!("u{}", j + 1), traj.u.iter().map(|u| u[j]).collect()));
    }
    let series: Vec<Series> = columns
        .iter()
        .map(|(label, y)| Series { label, x: &traj.t, y })
        .collect();
    line_plot(title, "t", "value", &series)
}

fn solve_opts(cfg: &ScenarioConfig) -> SolveOpts {
    SolveOpts {
        feas_tol: cfg.numerics.feas_tol,
        opt_tol: cfg.numerics.opt_tol,
        ..Default::default()
    }
}

pub fn cmd_simulate(args: &CommonArgs) -> i32 {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(section) = cfg.simulate.clone() else {
        eprintln!("config error: missing [simulate] section");
        return EXIT_CONFIG;
    };
    let model = match cfg.build_model() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if section.x0.len() != model.state_dim() {
        eprintln!("config error: x0 must have {} entries", model.state_dim());
        return EXIT_CONFIG;
    }
    let control = match ScenarioConfig::build_control(&section.control) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match Outputs::new(&cfg, args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("io error: {e}");
            return EXIT_NUMERIC;
        }
    };

    let x0 = DVector::from_vec(section.x0.clone());
    let start = std::time::Instant::now();
    let traj = match integrate(&model, &x0, &control, section.t_f, &cfg.integrator_opts()) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("integration failed: {e}");
            return EXIT_NUMERIC;
        }
    };
    let report = match balance_report(&model, &traj) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("balance check failed: {e}");
            return EXIT_NUMERIC;
        }
    };

    let scale = 1.0
        + model.hamiltonian().eval(traj.endpoint()).abs()
        + report.supplied_energy.abs()
        + report.supplied_entropy.abs();
    let within = report.energy_residual <= section.balance_tol * scale
        && report.entropy_residual <= section.balance_tol * scale;

    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "model_id": model.id(),
        "seed": args.seed,
        "t_f": section.t_f,
        "balance": report,
        "balance_tol": section.balance_tol,
        "within_tolerance": within,
    });
    let io_result = (|| -> Result<(), Box<dyn std::error::Error>> {
        out.write_csv("trajectory.csv", &traj)?;
        out.write_json("trajectory.json", &traj.to_json())?;
        out.write_json("balance.json", &summary)?;
        out.write_json(
            "timings.json",
            &json!({ "integrate_ms": start.elapsed().as_secs_f64() * 1e3 }),
        )?;
        out.write_svg("trajectory.svg", &trajectory_svg(&traj, "simulated trajectory"))?;
        Ok(())
    })();
    if let Err(e) = io_result {
        eprintln!("io error: {e}");
        return EXIT_NUMERIC;
    }
    if within {
        EXIT_OK
    } else {
        eprintln!(
            "balance residuals exceed tolerance: energy {:.3e}, entropy {:.3e}",
            report.energy_residual, report.entropy_residual
        );
        EXIT_NUMERIC
    }
}

fn distance_svg(model: &crate::model::IphsModel, traj: &Trajectory) -> Option<String> {
    let d = distance_series(model, traj).ok()?;
    Some(line_plot(
        "distance to the equilibrium set",
        "t",
        "dist",
        &[Series { label: "dist", x: &traj.t, y: &d }],
    ))
}

pub fn cmd_solve(args: &CommonArgs) -> i32 {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let spec = match cfg.build_ocp_spec(None) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match Outputs::new(&cfg, args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("io error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let n = cfg.numerics.n_intervals.unwrap_or_else(|| OcpSpec::default_intervals(spec.t_f));
    let start = std::time::Instant::now();
    let problem = match transcribe(&spec, n) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let solution = match solve(&problem, InitStrategy::Cold, &solve_opts(&cfg)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("solve failed: {e}");
            return EXIT_NUMERIC;
        }
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    // Identity-form objective on a dense re-simulation.
    let (identity_objective, resim) =
        match integrate(&spec.model, &spec.x0, &solution.control, spec.t_f, &cfg.integrator_opts())
        {
            Ok(resim) => match cost_of_trajectory(&spec.model, &resim, &spec.weights) {
                Ok(c) => (Some(c.identity), Some(resim)),
                Err(_) => (None, Some(resim)),
            },
            Err(_) => (None, None),
        };

    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "model_id": spec.model.id(),
        "seed": args.seed,
        "t_f": spec.t_f,
        "n_intervals": n,
        "status": solution.status,
        "objective": solution.objective,
        "objective_identity_form": identity_objective,
        "cost_path_independent": solution.cost_path_independent,
        "kkt_residual": solution.kkt_residual,
        "constraint_violation": solution.constraint_violation,
        "iterations": solution.iterations,
        "terminal_miss": spec.terminal.miss(solution.trajectory.endpoint()),
    });
    if solution.cost_path_independent {
        eprintln!("note: cost is path-independent (fixed by the endpoints); feasibility-only solve");
    }
    let io_result = (|| -> Result<(), Box<dyn std::error::Error>> {
        out.write_csv("solution.csv", &solution.trajectory)?;
        out.write_json("solution.json", &solution.trajectory.to_json())?;
        out.write_json("summary.json", &summary)?;
        out.write_json("timings.json", &json!({ "solve_ms": elapsed_ms }))?;
        if let Some(resim) = &resim {
            out.write_csv("solution_resim.csv", resim)?;
            out.write_svg("solution.svg", &trajectory_svg(resim, "optimal transition"))?;
            if let Some(svg) = distance_svg(&spec.model, resim) {
                out.write_svg("distance.svg", &svg)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = io_result {
        eprintln!("io error: {e}");
        return EXIT_NUMERIC;
    }
    match solution.status {
        SolveStatus::Converged => EXIT_OK,
        other => {
            eprintln!("solver did not converge: {other:?}");
            EXIT_NUMERIC
        }
    }
}

pub fn cmd_sweep(args: &CommonArgs) -> i32 {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(section) = cfg.sweep.clone() else {
        eprintln!("config error: missing [sweep] section");
        return EXIT_CONFIG;
    };
    if section.horizons.is_empty() {
        eprintln!("config error: empty horizon list");
        return EXIT_CONFIG;
    }
    let spec = match cfg.build_ocp_spec(Some(section.horizons[0])) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match Outputs::new(&cfg, args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("io error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let start = std::time::Instant::now();
    let (report, runs) = match horizon_sweep(
        &spec,
        &section.horizons,
        &section.eps,
        &solve_opts(&cfg),
        sweep_threads(),
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("sweep failed: {e}");
            return EXIT_NUMERIC;
        }
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut report_json = serde_json::to_value(&report).expect("serializable");
    report_json["schema_version"] = json!(SCHEMA_VERSION);
    report_json["seed"] = json!(args.seed);
    let io_result = (|| -> Result<(), Box<dyn std::error::Error>> {
        out.write_json("turnpike_report.json", &report_json)?;
        out.write_json("timings.json", &json!({ "sweep_ms": elapsed_ms }))?;
        for (row, run) in report.rows.iter().zip(runs.iter()) {
            let tag = format!("{:.0}", row.t_f);
            out.write_csv(&format!("sweep_tf{tag}.csv"), &run.resim)?;
            out.write_svg(
                &format!("sweep_tf{tag}.svg"),
                &trajectory_svg(&run.resim, &format!("horizon {tag}")),
            )?;
            if let Some(svg) = distance_svg(&spec.model, &run.resim) {
                out.write_svg(&format!("sweep_tf{tag}_dist.svg"), &svg)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = io_result {
        eprintln!("io error: {e}");
        return EXIT_NUMERIC;
    }
    if report.all_converged && report.uniform_bound_pass {
        EXIT_OK
    } else {
        eprintln!(
            "sweep pass flags not set: all_converged={}, uniform_bound_pass={}",
            report.all_converged, report.uniform_bound_pass
        );
        EXIT_NUMERIC
    }
}

pub fn cmd_certify(args: &CommonArgs) -> i32 {
    let cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(section) = cfg.certify.clone() else {
        eprintln!("config error: missing [certify] section");
        return EXIT_CONFIG;
    };
    let model = match cfg.build_model() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match Outputs::new(&cfg, args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("io error: {e}");
            return EXIT_NUMERIC;
        }
    };
    let start = std::time::Instant::now();
    let cert = match lemma_certificate(
        &model,
        &DVector::from_vec(section.box_lo.clone()),
        &DVector::from_vec(section.box_hi.clone()),
        section.n_samples,
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("certification failed: {e}");
            return EXIT_NUMERIC;
        }
    };
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut cert_json = serde_json::to_value(&cert).expect("serializable");
    cert_json["schema_version"] = json!(SCHEMA_VERSION);
    cert_json["seed"] = json!(args.seed);
    let io_result = (|| -> Result<(), Box<dyn std::error::Error>> {
        out.write_json("certificate.json", &cert_json)?;
        out.write_json("timings.json", &json!({ "certify_ms": elapsed_ms }))?;
        Ok(())
    })();
    if let Err(e) = io_result {
        eprintln!("io error: {e}");
        return EXIT_NUMERIC;
    }
    if cert.c_hat > 0.0 && cert.c_hat_upper.is_finite() && cert.c1_hat > 0.0 {
        EXIT_OK
    } else {
        eprintln!("certificate does not establish positive constants");
        EXIT_NUMERIC
    }
}

pub fn run(cli: Cli) -> i32 {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Certify(args) => cmd_certify(args),
    }
}
