//! `impulse-qvi validate | solve | simulate | diagnose`.
//!
//! Exit codes: 0 success, 1 domain failure (validation, solve or diagnostic
//! failure), 2 usage or I/O error.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use impulse_qvi::config::Config;
use impulse_qvi::diagnostics::run_diagnostics;
use impulse_qvi::levy::check_integrability;
use impulse_qvi::model::{validate_assumptions, ModelSpec};
use impulse_qvi::operators::OperatorStencil;
use impulse_qvi::simulate::{estimate_cost, simulate_controlled};
use impulse_qvi::solver::{extract_policy, solve_qvi, Region, SolveResult};
use impulse_qvi::Error;

#[derive(Parser)]
#[command(name = "impulse-qvi", version, about = "Impulse control of jump diffusions: QVI solver, Monte Carlo and diagnostics")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model assumptions and Lévy integrability.
    Validate(Common),
    /// Solve the QVI and write the result directory.
    Solve(Common),
    /// Monte Carlo cost of the solved policy.
    Simulate(SimulateArgs),
    /// Regularity and consistency checks on a result directory.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Result directory (required by solve, simulate and diagnose).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiply the node spacing count per axis by this factor.
    #[arg(long, default_value_t = 1.0)]
    grid_scale: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn domain(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

/// Config and artifact problems are usage errors; everything the numerics
/// reject is a domain failure.
fn classify(e: Error) -> Failure {
    match e {
        Error::Io(_) | Error::Parse(_) | Error::Csv(_) | Error::InvalidInput(_) => Failure::usage(e.to_string()),
        other => Failure::domain(other.to_string()),
    }
}

struct Loaded {
    config: Config,
    model: ModelSpec,
    hash: String,
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Failure::usage("config is not UTF-8"))?;
    let config = Config::from_toml_str(&text).map_err(classify)?;
    let model = config.build_model().map_err(classify)?;
    Ok(Loaded {
        config,
        model,
        hash: format!("{:x}", Sha256::digest(&bytes)),
    })
}

fn require_out(c: &Common) -> Result<&Path, Failure> {
    c.out.as_deref().ok_or_else(|| Failure::usage("--out is required for this subcommand"))
}

fn append_log(dir: &Path, stanza: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::usage(e.to_string()))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("log.txt"))
        .map_err(|e| Failure::usage(e.to_string()))?;
    f.write_all(stanza.as_bytes()).map_err(|e| Failure::usage(e.to_string()))
}

fn stanza(command: &str, loaded: &Loaded, extra: &[(&str, String)]) -> String {
    let s = &loaded.config.solver;
    let g = &loaded.config.grid;
    let mut out = format!("\n[run {command}]\nconfig_sha256 = {}\n", loaded.hash);
    let _ = writeln!(
        out,
        "grid = lower {:?} upper {:?} nodes {:?} core_margin {}",
        g.lower, g.upper, g.nodes, g.core_margin
    );
    let _ = writeln!(
        out,
        "tolerances = tol_outer {} tol_region {} newton_tol {:e} eps_levels {} eps_rel {:e}",
        or_default(s.tol_outer),
        or_default(s.tol_region),
        s.newton_tol,
        s.eps_levels,
        s.eps_rel
    );
    for (k, v) in extra {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

fn or_default(v: Option<f64>) -> String {
    v.map_or_else(|| "default".to_string(), |v| format!("{v:e}"))
}

fn say(quiet: bool, text: impl AsRef<str>) {
    if !quiet {
        println!("{}", text.as_ref());
    }
}

fn cmd_validate(c: &Common, quiet: bool) -> Result<(), Failure> {
    let loaded = load(&c.config)?;
    let cfg = &loaded.config;
    let boxed = cfg.sampling_box().map_err(classify)?;
    let report = validate_assumptions(&loaded.model, &boxed, &cfg.validation_options()).map_err(classify)?;
    // Integrability is checked at the box centre and corners.
    let n = loaded.model.dim_state();
    let mut samples = vec![boxed.lower.iter().zip(&boxed.upper).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>()];
    for corner in 0..(1usize << n) {
        samples.push((0..n).map(|a| if corner >> a & 1 == 1 { boxed.upper[a] } else { boxed.lower[a] }).collect());
    }
    let certs = check_integrability(&loaded.model.levy, &loaded.model, &samples);
    let mut text = report.to_string();
    for cert in &certs.certificates {
        let _ = writeln!(
            text,
            "{:<24} {:<4} value {:>12.6e} ± {:.1e}{}",
            cert.name,
            if cert.passed { "ok" } else { "FAIL" },
            cert.value,
            cert.error,
            if cert.detail.is_empty() { String::new() } else { format!(" [{}]", cert.detail) }
        );
    }
    say(quiet, text.trim_end());
    if let Some(dir) = &c.out {
        append_log(dir, &stanza("validate", &loaded, &[]))?;
    }
    if report.passed() && certs.passed() {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({})", c.name, c.description))
            .chain(report.hard_failures.iter().cloned())
            .chain(certs.certificates.iter().filter(|c| !c.passed).map(|c| c.name.to_string()))
            .collect();
        Err(Failure::domain(format!("validation failed: {}", failed.join("; "))))
    }
}

fn cmd_solve(c: &Common, quiet: bool) -> Result<(), Failure> {
    let out = require_out(c)?;
    let loaded = load(&c.config)?;
    let grid = loaded.config.build_grid(c.grid_scale).map_err(classify)?;
    let extra = [("grid_scale", c.grid_scale.to_string()), ("nodes", format!("{:?}", grid.nodes()))];
    match solve_qvi(&loaded.model, &grid, &loaded.config.solver) {
        Ok(result) => {
            result.save(out).map_err(classify)?;
            let s = &result.summary;
            let mut extra = extra.to_vec();
            extra.push(("effective_tolerances", format!("tol_outer {:e} tol_region {:e}", s.tol_outer, s.tol_region)));
            extra.push(("outer_iterations", s.outer_iterations.to_string()));
            append_log(out, &stanza("solve", &loaded, &extra))?;
            say(
                quiet,
                format!(
                    "solved: hjb residual {:.3e} (tol_outer {:.3e}), {} outer iterations, {} action / {} continuation nodes\nwrote {}",
                    s.residual_hjb,
                    s.tol_outer,
                    s.outer_iterations,
                    result.action_count(),
                    result.region_mask.len() - result.action_count(),
                    out.display()
                ),
            );
            Ok(())
        }
        Err(e) => {
            let mut text = stanza("solve", &loaded, &extra);
            let _ = writeln!(text, "error = {e}");
            append_log(out, &text)?;
            Err(Failure::domain(format!("solve failed: {e} (log: {})", out.join("log.txt").display())))
        }
    }
}

fn load_result(dir: &Path) -> Result<SolveResult, Failure> {
    SolveResult::load(dir).map_err(|e| Failure::usage(format!("cannot load result from {}: {e}", dir.display())))
}

fn cmd_simulate(a: &SimulateArgs, quiet: bool) -> Result<(), Failure> {
    let out = require_out(&a.common)?;
    let loaded = load(&a.common.config)?;
    let result = load_result(out)?;
    let model = &loaded.model;
    let mut cfg = loaded.config.simulation(model);
    if let Some(dt) = a.dt {
        cfg.dt = dt;
    }
    if let Some(t) = a.horizon {
        cfg.horizon = t;
    }
    let sim = &loaded.config.simulate;
    let paths = a.paths.unwrap_or(sim.paths);
    let seed = a.seed.unwrap_or(sim.seed);
    let x0 = loaded.config.x0().map_err(classify)?;
    let report = extract_policy(&result);
    let est = estimate_cost(model, &report.policy, &x0, paths, &cfg, seed).map_err(classify)?;
    est.append_results_csv(&out.join("results.csv"), "qvi", &x0, &cfg, seed)
        .map_err(classify)?;
    if sim.log_paths > 0 {
        let dir = out.join("paths");
        fs::create_dir_all(&dir).map_err(|e| Failure::usage(e.to_string()))?;
        for i in 0..sim.log_paths as u64 {
            let rec = simulate_controlled(model, &report.policy, &x0, &cfg, seed.wrapping_add(i)).map_err(classify)?;
            rec.write_csv(&dir.join(format!("path_{i}.csv"))).map_err(classify)?;
        }
    }
    let u_x0 = result.u.eval(&x0);
    let extra = [
        ("seed", seed.to_string()),
        ("paths", paths.to_string()),
        ("dt", cfg.dt.to_string()),
        ("horizon", cfg.horizon.to_string()),
        ("x0", format!("{x0:?}")),
        ("j_hat", format!("{} ± {}", est.j_hat, est.ci_halfwidth)),
    ];
    append_log(out, &stanza("simulate", &loaded, &extra))?;
    say(
        quiet,
        format!(
            "J_hat({x0:?}) = {:.6} ± {:.6} (95%), u_pde = {:.6}; truncation bias ≤ {:.2e}, small-jump bias ≤ {:.2e}/unit time, {:.3} impulses/path",
            est.j_hat, est.ci_halfwidth, u_x0, est.truncation_bias, est.small_jump_bias.abs(), est.mean_impulses
        ),
    );
    if !report.violations.is_empty() {
        return Err(Failure::domain(format!(
            "{} action nodes place the post-impulse state outside the continuation region",
            report.violations.len()
        )));
    }
    Ok(())
}

fn cmd_diagnose(c: &Common, quiet: bool) -> Result<(), Failure> {
    let out = require_out(c)?;
    let loaded = load(&c.config)?;
    let result = load_result(out)?;
    let model = &loaded.model;
    let settings = &loaded.config.diagnostics;
    let grid = result.grid().clone();
    let stencil = OperatorStencil::new(model, &grid, loaded.config.solver.scheme.into()).map_err(classify)?;
    let fine = if settings.refine {
        let fine_grid = grid.refine(2).map_err(classify)?;
        Some(solve_qvi(model, &fine_grid, &loaded.config.solver).map_err(|e| Failure::domain(format!("refined solve failed: {e}")))?)
    } else {
        None
    };
    let report = run_diagnostics(model, &result, fine.as_ref(), &stencil, settings).map_err(classify)?;
    report.save(out).map_err(classify)?;
    let actions = result.region_mask.iter().filter(|r| **r == Region::Action).count();
    append_log(
        out,
        &stanza(
            "diagnose",
            &loaded,
            &[
                ("refined", settings.refine.to_string()),
                ("passed", report.passed().to_string()),
                ("stored_action_nodes", actions.to_string()),
            ],
        ),
    )?;
    say(quiet, report.to_string());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::domain("diagnostics failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let q = cli.quiet;
    let outcome = match &cli.command {
        Command::Validate(c) => cmd_validate(c, q),
        Command::Solve(c) => cmd_solve(c, q),
        Command::Simulate(a) => cmd_simulate(a, q),
        Command::Diagnose(c) => cmd_diagnose(c, q),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
