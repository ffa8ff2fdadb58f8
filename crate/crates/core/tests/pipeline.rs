use impulse_qvi::config::Config;
use impulse_qvi::diagnostics::run_diagnostics;
use impulse_qvi::model::validate_assumptions;
use impulse_qvi::operators::OperatorStencil;
use impulse_qvi::simulate::estimate_cost;
use impulse_qvi::solver::{extract_policy, solve_qvi, SolveResult};

const CONFIG: &str = r#"
[model]
dim = 1
drift_offset = [0.2]
volatility = [[1.0]]
running_cost = { kind = "norm", scale = 1.0, center = [0.0] }
cost = { kind = "linear", floor = 0.8, slope = 0.3 }
discount = 1.0

[levy]
kind = "exponential"
scale = 1.0
rate = 3.0

[grid]
lower = [-6.0]
upper = [6.0]
nodes = [97]
core_margin = 2.0

[simulate]
x0 = [1.0]
paths = 4000
seed = 5
horizon = 15.0

[diagnostics]
refine = false
"#;

#[test]
fn config_to_solve_to_simulation_round_trip() {
    let cfg = Config::from_toml_str(CONFIG).unwrap();
    let model = cfg.build_model().unwrap();
    let grid = cfg.build_grid(1.0).unwrap();
    let report = validate_assumptions(&model, &cfg.sampling_box().unwrap(), &cfg.validation_options()).unwrap();
    assert!(report.passed(), "{report:?}");

    let res = solve_qvi(&model, &grid, &cfg.solver).unwrap();
    let dir = tempfile::tempdir().unwrap();
    res.save(dir.path()).unwrap();
    let back = SolveResult::load(dir.path()).unwrap();
    assert_eq!(back.u.values(), res.u.values());

    let stencil = OperatorStencil::new(&model, &grid, cfg.solver.scheme.into()).unwrap();
    let diag = run_diagnostics(&model, &back, None, &stencil, &cfg.diagnostics).unwrap();
    assert!(diag.passed(), "{diag}");

    let policy = extract_policy(&back);
    assert!(policy.violations.is_empty());
    let x0 = cfg.x0().unwrap();
    let sim = cfg.simulation(&model);
    let est = estimate_cost(&model, &policy.policy, &x0, cfg.simulate.paths, &sim, cfg.simulate.seed).unwrap();
    let u = back.u.eval(&x0);
    assert!((est.j_hat - u).abs() <= est.ci_halfwidth + est.truncation_bias + 5e-2, "J {} vs u {u}", est.j_hat);
}

#[test]
fn config_survives_serialization() {
    let cfg = Config::from_toml_str(CONFIG).unwrap();
    let again = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(cfg.to_toml_string().unwrap(), again.to_toml_string().unwrap());
}
