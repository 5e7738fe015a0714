#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use bcl_core::invariant::{
    build_mc_sampler, check_lmi_prop2, corner_samples, monte_carlo_invariance, search_trivial_solution, CertMode,
    InvariantCertificate, LmiForm, McOptions, SearchRequest,
};
use bcl_core::linalg::{build_a0, SquareMatrix};
use bcl_core::perf::{ppf, PerformanceSpec};
use bcl_core::plant::GainBounds;
use bcl_core::plots::{plot_script_for_files, PlotLayout};
use bcl_core::scenario::{write_atomic, Scenario, ScenarioError};
use bcl_core::sim::{compare_runs, RunOptions, SimError, SimulationTrace};

const EXIT_INVALID: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;

#[derive(Parser)]
#[command(name = "bcl", version, about = "Command-filtered backstepping with safety switching")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search or check an invariant-set certificate.
    CheckLmi(CheckLmiArgs),
    /// Run a scenario.
    Simulate(SimulateArgs),
    /// Run two scenarios on the same grid and compare them.
    Compare(CompareArgs),
    /// Monte Carlo check of a certificate's invariance claim.
    VerifyInvariance(VerifyArgs),
    /// Write a matplotlib script for one or more trace CSVs.
    EmitPlots(EmitPlotsArgs),
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| format!("{v:?} is not a number"))).collect()
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    match parse_list(s)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

#[derive(Args)]
struct CheckLmiArgs {
    /// Stage gains, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    gains: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    kappa: f64,
    /// Disturbance weight `W = w I`.
    #[arg(long, default_value_t = 1.0)]
    w_scale: f64,
    #[arg(long, default_value = "eq5")]
    lmi_form: LmiForm,
    /// Pin `V_h` instead of searching it.
    #[arg(long)]
    v_h: Option<f64>,
    /// Band `g_min,g_max` applied to every stage.
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    g_bounds: (f64, f64),
    #[arg(long, default_value_t = 1.0)]
    rho0: f64,
    #[arg(long, default_value_t = 0.1)]
    rho_inf: f64,
    /// Certify the performance controller with this exponent.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long, value_parser = parse_pair, default_value = "1,10")]
    mu_range: (f64, f64),
    /// Check a specific point instead of searching (with `--v-h` and `--nu`).
    #[arg(long, requires = "alpha")]
    eps: Option<f64>,
    #[arg(long, requires = "eps")]
    alpha: Option<f64>,
    /// Write the certificate here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    #[arg(long)]
    cert: Option<PathBuf>,
    /// Trace CSV (overrides the scenario's output section).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    /// Run despite failed preconditions or an infeasible certificate.
    #[arg(long)]
    force: bool,
    /// Disturbance variant (0 is nominal).
    #[arg(long)]
    seed: Option<u64>,
    /// Run variants 1..=N concurrently and summarise them.
    #[arg(long)]
    sweep: Option<u64>,
    #[arg(long)]
    record_every: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 20.0)]
    horizon: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Scales every sampled disturbance.
    #[arg(long, default_value_t = 1.0)]
    omega_scale: f64,
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    g_bounds: (f64, f64),
    /// Envelope decay rate (defaults to the certificate's).
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args)]
struct EmitPlotsArgs {
    #[arg(required = true)]
    csv: Vec<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Force the performance layout (extra envelope panel).
    #[arg(long, conflicts_with = "tracking")]
    performance: bool,
    #[arg(long)]
    tracking: bool,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load_cert(path: &Path) -> Result<InvariantCertificate, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    InvariantCertificate::from_text(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn check_lmi(a: CheckLmiArgs) -> ExitCode {
    let n = a.gains.len();
    if n == 0 {
        return fail(EXIT_INVALID, "--gains is required");
    }
    let (g_min, g_max) = a.g_bounds;
    if !(g_min > 0.0 && g_max >= g_min) {
        return fail(EXIT_INVALID, "--g-bounds needs 0 < g_min <= g_max");
    }
    if !(a.w_scale > 0.0) {
        return fail(EXIT_INVALID, "--w-scale must be positive");
    }
    let g_bounds = vec![GainBounds { g_min, g_max }; n];
    let mode = match a.nu {
        Some(nu) => CertMode::Prop2 { nu, mu_lo: a.mu_range.0, mu_hi: a.mu_range.1 },
        None => CertMode::Prop1,
    };
    let w = SquareMatrix::scaled_identity(n, a.w_scale);

    if let (Some(eps), Some(alpha)) = (a.eps, a.alpha) {
        // point check
        let vh = a.v_h.unwrap_or(1.0);
        let a0 = match build_a0(&a.gains) {
            Ok(m) => m,
            Err(e) => return fail(EXIT_INVALID, e),
        };
        let ag = match corner_samples(&g_bounds) {
            Ok(v) => v,
            Err(e) => return fail(EXIT_INVALID, e),
        };
        let (nu, mu) = match mode {
            CertMode::Prop2 { nu, mu_lo, mu_hi } => (nu, (mu_lo, mu_hi)),
            CertMode::Prop1 => (0.0, (1.0, 1.0)),
        };
        let rest = SquareMatrix::scaled_identity(n - 1, vh);
        let r = check_lmi_prop2(&a0, &ag, vh, &rest, &w, alpha, eps, a.kappa, mu, nu, 0.0, a.lmi_form);
        return match r {
            Ok(c) => {
                println!("form             : {}", a.lmi_form);
                println!("point            : V_h = {vh}, alpha = {alpha}, eps = {eps}, nu = {nu}, mu in {mu:?}");
                println!("decay slack      : {:.9e}", c.slacks.decay);
                println!("coupling slack   : {:.9e}", c.slacks.coupling);
                println!("disturbance gain : {:.6e} .. {:.6e}", c.disturbance_weight.0, c.disturbance_weight.1);
                if c.feasible {
                    println!("certificate      : feasible");
                    ExitCode::SUCCESS
                } else {
                    println!("certificate      : INFEASIBLE");
                    ExitCode::from(EXIT_INFEASIBLE)
                }
            }
            Err(e) => fail(EXIT_INVALID, e),
        };
    }

    let req = SearchRequest {
        gains: a.gains,
        kappa: a.kappa,
        w,
        g_bounds,
        rho0: a.rho0,
        rho_inf: a.rho_inf,
        form: a.lmi_form,
        v_h: a.v_h,
        mode,
    };
    let cert = match search_trivial_solution(&req) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    print!("{}", cert.report());
    if let Some(out) = a.out {
        if let Err(e) = write_atomic(&out, &cert.to_text()) {
            return fail(EXIT_INVALID, format!("cannot write {}: {e}", out.display()));
        }
    }
    if cert.feasible {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_INFEASIBLE)
    }
}

fn sim_error_code(e: &SimError) -> u8 {
    match e {
        SimError::NonFinite { .. } => EXIT_NON_FINITE,
        SimError::Control { source: bcl_core::controllers::ControlError::Plant(_), .. } => EXIT_NON_FINITE,
        _ => EXIT_INVALID,
    }
}

fn load_scenario(path: &Path, cert: Option<&Path>) -> Result<(Scenario, bcl_core::Simulation), String> {
    let sc = Scenario::load(path).map_err(|e| e.to_string())?;
    let cert = cert.map(load_cert).transpose()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let sim = sc.build(dir, cert).map_err(|e: ScenarioError| e.to_string())?;
    Ok((sc, sim))
}

fn print_summary(label: &str, tr: &SimulationTrace) {
    let s = &tr.summary;
    println!("run              : {label} ({})", tr.kind);
    println!("steps            : {}", s.steps);
    println!("certified        : {}", if s.certified { "yes" } else { "no (forced)" });
    println!("initial level    : {:.6}", s.initial_level_ratio);
    println!("max |s1|         : {:.6e}", s.max_abs_s1);
    println!("max |e|          : {:.6e}", s.max_abs_e);
    println!("max level ratio  : {:.6}", s.max_level_ratio);
    println!("max envelope     : {:.6}", s.max_envelope_ratio);
    println!("saturation duty  : {:.4}", s.saturation_duty());
    println!("violations       : {}", s.violations);
    println!("level exits      : {}", s.level_exits);
    if let Some(t) = s.first_violation {
        println!("first violation  : t = {t:.4}");
    }
}

fn simulate(a: SimulateArgs) -> ExitCode {
    let (sc, sim) = match load_scenario(&a.scenario, a.cert.as_deref()) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    let mut cfg = sc.sim;
    if let Some(k) = a.record_every {
        cfg.record_every = k;
    }
    let opts = RunOptions { force: a.force };

    if let Some(n) = a.sweep {
        let results: Vec<(u64, Result<SimulationTrace, SimError>)> = (1..=n)
            .into_par_iter()
            .map(|seed| {
                let c = bcl_core::SimConfig { seed, record_every: cfg.steps().max(1), ..cfg };
                (seed, sim.run(&c, opts).map(|(t, _)| t))
            })
            .collect();
        println!("{:>6} {:>12} {:>12} {:>12} {:>8}", "seed", "max|s1|", "max level", "max env", "viol");
        let mut code = ExitCode::SUCCESS;
        for (seed, r) in results {
            match r {
                Ok(tr) => {
                    let s = &tr.summary;
                    println!(
                        "{seed:>6} {:>12.4e} {:>12.4} {:>12.4} {:>8}",
                        s.max_abs_s1, s.max_level_ratio, s.max_envelope_ratio, s.violations
                    );
                    if s.violations > 0 && code == ExitCode::SUCCESS {
                        code = ExitCode::from(EXIT_VIOLATION);
                    }
                }
                Err(e) => {
                    println!("{seed:>6} error: {e}");
                    code = ExitCode::from(sim_error_code(&e));
                }
            }
        }
        return code;
    }

    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let (trace, events) = match sim.run(&cfg, opts) {
        Ok(v) => v,
        Err(e) => return fail(sim_error_code(&e), e),
    };
    let dir = a.scenario.parent().unwrap_or(Path::new("."));
    let csv = a.csv.or_else(|| sc.output.csv.as_ref().map(|p| dir.join(p)));
    let ev = a.events.or_else(|| sc.output.events.as_ref().map(|p| dir.join(p)));
    if let Some(p) = csv {
        if let Err(e) = write_atomic(&p, &trace.to_csv()) {
            return fail(EXIT_INVALID, format!("cannot write {}: {e}", p.display()));
        }
    }
    if let Some(p) = ev {
        if let Err(e) = write_atomic(&p, &events.to_text()) {
            return fail(EXIT_INVALID, format!("cannot write {}: {e}", p.display()));
        }
    }
    print_summary(&a.scenario.display().to_string(), &trace);
    println!("events           : {}", events.events.len());
    if trace.summary.violations > 0 {
        ExitCode::from(EXIT_VIOLATION)
    } else {
        ExitCode::SUCCESS
    }
}

fn compare(a: CompareArgs) -> ExitCode {
    let load = |p: &Path| load_scenario(p, a.cert.as_deref());
    let ((sa, sim_a), (sb, sim_b)) = match (load(&a.a), load(&a.b)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return fail(EXIT_INVALID, e),
    };
    if !sa.sim.same_grid(&sb.sim) {
        return fail(EXIT_INVALID, "the two scenarios use different simulation grids");
    }
    let opts = RunOptions { force: a.force };
    let (ra, rb) = rayon::join(|| sim_a.run(&sa.sim, opts), || sim_b.run(&sb.sim, opts));
    let (ta, tb) = match (ra, rb) {
        (Ok((x, _)), Ok((y, _))) => (x, y),
        (Err(e), _) | (_, Err(e)) => return fail(sim_error_code(&e), e),
    };
    let label = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = match compare_runs(&ta, &tb, (&label(&a.a), &label(&a.b))) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    print!("{}", report.to_text());
    if let Some(p) = a.report {
        if let Err(e) = write_atomic(&p, &report.to_csv()) {
            return fail(EXIT_INVALID, format!("cannot write {}: {e}", p.display()));
        }
    }
    ExitCode::SUCCESS
}

fn verify(a: VerifyArgs) -> ExitCode {
    let cert = match load_cert(&a.cert) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    if cert.mode != CertMode::Prop1 {
        return fail(EXIT_INVALID, "Monte Carlo verification covers tracking certificates only");
    }
    let (g_min, g_max) = a.g_bounds;
    if !(g_min > 0.0 && g_max >= g_min) {
        return fail(EXIT_INVALID, "--g-bounds needs 0 < g_min <= g_max");
    }
    if !(a.omega_scale >= 0.0) || !(a.horizon > 0.0) {
        return fail(EXIT_INVALID, "--omega-scale must be non-negative and --horizon positive");
    }
    let spec =
        PerformanceSpec { kappa: a.kappa.unwrap_or(cert.kappa), ..PerformanceSpec::new(cert.rho0, cert.rho_inf) };
    let opts = McOptions {
        trials: a.trials,
        horizon: a.horizon,
        seed: a.seed,
        omega_scale: a.omega_scale,
        ..Default::default()
    };
    let sampler = match build_mc_sampler(&cert.gains, GainBounds { g_min, g_max }, opts.state_box) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    match monte_carlo_invariance(sampler, &cert, |t| ppf(&spec, t), &opts) {
        Ok(r) => {
            println!("trials           : {}", r.trials);
            println!("omega scale      : {}", a.omega_scale);
            println!("max V/Gamma      : {:.6}", r.max_v_ratio);
            println!("mean max V/Gamma : {:.6}", r.mean_v_ratio);
            println!("max |z1|/rho     : {:.6}", r.max_z1_ratio);
            if let Some(s) = r.worst_trial_seed {
                println!("worst trial seed : {s}");
            }
            if r.passed {
                println!("invariance       : holds");
                ExitCode::SUCCESS
            } else {
                println!("invariance       : VIOLATED");
                ExitCode::from(EXIT_INFEASIBLE)
            }
        }
        Err(e) => fail(EXIT_INFEASIBLE, e),
    }
}

fn emit_plots(a: EmitPlotsArgs) -> ExitCode {
    let layout = if a.performance {
        Some(PlotLayout::Performance)
    } else if a.tracking {
        Some(PlotLayout::Tracking)
    } else {
        None
    };
    let paths: Vec<&Path> = a.csv.iter().map(|p| p.as_path()).collect();
    let script = match plot_script_for_files(&paths, layout) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    if let Err(e) = write_atomic(&a.out, &script) {
        return fail(EXIT_INVALID, format!("cannot write {}: {e}", a.out.display()));
    }
    println!("wrote {}", a.out.display());
    ExitCode::SUCCESS
}

fn init_threads() {
    if let Ok(v) = std::env::var("BCL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring BCL_THREADS={v:?}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.cmd {
        Command::CheckLmi(a) => check_lmi(a),
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::VerifyInvariance(a) => verify(a),
        Command::EmitPlots(a) => emit_plots(a),
    }
}
