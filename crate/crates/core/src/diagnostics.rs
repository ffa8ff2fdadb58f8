//! Read-only numerical checks of a solve: Lipschitz bound, obstacle inequality,
//! Hölder continuity of `Iu`, smooth fit, bounded second differences and an
//! independently recomputed HJB residual.
//!
//! Regularity statements are continuum claims; each check here is the
//! discrete, refinement-stability version of one of them.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::ModelSpec;
use crate::operators::{apply_I, apply_M, required_search_radius, OperatorStencil, Scheme, SearchBox};
use crate::solver::{Region, SolveResult};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzCheck {
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Largest `|Δu|/h` over adjacent core pairs against `bound·(1 + tol)`.
pub fn check_lipschitz(u: &ScalarField, bound: f64, tol: f64) -> LipschitzCheck {
    let observed = u.lipschitz_constant(true);
    LipschitzCheck {
        observed,
        bound,
        pass: observed <= bound * (1.0 + tol),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObstacleCheck {
    /// `max (u - 𝓜u)` over the core; negative when the inequality holds strictly.
    pub max_violation: f64,
    pub node: usize,
}

pub fn check_obstacle(u: &ScalarField, mu_field: &ScalarField) -> ObstacleCheck {
    let g = u.grid();
    let mut out = ObstacleCheck {
        max_violation: f64::NEG_INFINITY,
        node: 0,
    };
    for k in g.core_nodes() {
        let v = u.values()[k] - mu_field.values()[k];
        if v > out.max_violation {
            out = ObstacleCheck { max_violation: v, node: k };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HolderCheck {
    pub alpha: f64,
    pub delta: f64,
    pub quotient: f64,
    /// Nodes of the set the quotient was taken over.
    pub nodes: usize,
    pub pairs: usize,
}

/// Continuation core nodes at distance `≥ delta` from the action set and from `∂box`.
fn interior_continuation(grid: &Grid, mask: &[Region], delta: f64) -> Vec<usize> {
    let n = grid.dim();
    let action: Vec<Vec<f64>> = (0..grid.len())
        .filter(|&k| mask[k] == Region::Action)
        .map(|k| grid.point(k))
        .collect();
    (0..grid.len())
        .into_par_iter()
        .filter(|&k| {
            if mask[k] != Region::Continuation || !grid.is_core(k) {
                return false;
            }
            let x = grid.point(k);
            let to_box = (0..n)
                .map(|a| (x[a] - grid.lower()[a]).min(grid.upper()[a] - x[a]))
                .fold(f64::INFINITY, f64::min);
            to_box >= delta && action.iter().all(|y| dist(&x, y) >= delta)
        })
        .collect()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Empirical `C^α` quotient of `Iu` over the continuation set kept `delta` away
/// from the action region and the box. Pairs: all within `10h`, plus
/// `random_pairs` uniformly drawn ones (seeded).
pub fn check_iu_holder(
    u: &ScalarField,
    model: &ModelSpec,
    region_mask: &[Region],
    alpha: f64,
    delta: f64,
    random_pairs: usize,
    seed: u64,
) -> Result<HolderCheck> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("Hölder exponent must lie in (0, 1)"));
    }
    let g = u.grid();
    if region_mask.len() != g.len() {
        return Err(invalid("region mask does not match the grid"));
    }
    let d = interior_continuation(g, region_mask, delta);
    if d.is_empty() {
        return Err(Error::EmptyRegion("continuation core too small at this δ".into()));
    }
    let iu = apply_I(u, model)?.field;
    let pts: Vec<Vec<f64>> = d.iter().map(|&k| g.point(k)).collect();
    let vals: Vec<f64> = d.iter().map(|&k| iu.values()[k]).collect();
    let h = g.spacing().iter().copied().fold(0.0, f64::max);
    let reach = 10.0 * h * (1.0 + 1e-12);
    let quotient = |i: usize, j: usize| (vals[i] - vals[j]).abs() / dist(&pts[i], &pts[j]).powf(alpha);
    let (near_q, near_pairs) = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let mut best: f64 = 0.0;
            let mut count = 0;
            for j in i + 1..d.len() {
                if dist(&pts[i], &pts[j]) <= reach {
                    best = best.max(quotient(i, j));
                    count += 1;
                }
            }
            (best, count)
        })
        .reduce(|| (0.0, 0), |a, b| (a.0.max(b.0), a.1 + b.1));
    let mut best = near_q;
    let mut pairs = near_pairs;
    if d.len() > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..random_pairs {
            let i = rng.random_range(0..d.len());
            let mut j = rng.random_range(0..d.len() - 1);
            if j >= i {
                j += 1;
            }
            best = best.max(quotient(i, j));
            pairs += 1;
        }
    }
    Ok(HolderCheck {
        alpha,
        delta,
        quotient: best,
        nodes: d.len(),
        pairs,
    })
}

/// Ratio of the quotients at `h` and `h/2`; finite iff it lies in `[lo, hi]`.
/// Two quotients at rounding level count as ratio 1.
pub fn holder_refinement(coarse: &HolderCheck, fine: &HolderCheck, band: (f64, f64)) -> (f64, bool) {
    let floor = 1e-12;
    let ratio = if coarse.quotient <= floor && fine.quotient <= floor {
        1.0
    } else {
        fine.quotient / coarse.quotient
    };
    (ratio, ratio >= band.0 && ratio <= band.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothFitCheck {
    /// Continuation-side node of each interface edge that was measured.
    pub boundary_nodes: Vec<usize>,
    pub max_gradient_jump: f64,
}

impl SmoothFitCheck {
    pub fn has_free_boundary(&self) -> bool {
        !self.boundary_nodes.is_empty()
    }
}

/// At each core edge `(k, k + e_a)` where the region changes, compares the
/// one-sided quotient inside the region of `k` with the one inside the region
/// of `k + e_a`. An empty interface is reported, not an error.
pub fn check_smooth_fit(u: &ScalarField, region_mask: &[Region]) -> SmoothFitCheck {
    let g = u.grid();
    let v = u.values();
    let mut out = SmoothFitCheck {
        boundary_nodes: Vec::new(),
        max_gradient_jump: 0.0,
    };
    for k in g.core_nodes() {
        for a in 0..g.dim() {
            let Some(k1) = g.neighbor(k, a, 1) else { continue };
            if region_mask[k] == region_mask[k1] || !g.is_core(k1) {
                continue;
            }
            let (Some(k0), Some(k2)) = (g.neighbor(k, a, -1), g.neighbor(k1, a, 1)) else { continue };
            // Both stencils must stay inside their own region.
            if region_mask[k0] != region_mask[k] || region_mask[k2] != region_mask[k1] {
                continue;
            }
            let h = g.spacing()[a];
            let jump = ((v[k] - v[k0]) / h - (v[k2] - v[k1]) / h).abs();
            out.max_gradient_jump = out.max_gradient_jump.max(jump);
            let c_side = if region_mask[k] == Region::Continuation { k } else { k1 };
            out.boundary_nodes.push(c_side);
        }
    }
    out
}

/// `log₂(jump(h) / jump(h/2))`; `None` when either run has no interface.
pub fn smooth_fit_rate(coarse: &SmoothFitCheck, fine: &SmoothFitCheck) -> Option<f64> {
    if !coarse.has_free_boundary() || !fine.has_free_boundary() {
        return None;
    }
    Some((coarse.max_gradient_jump / fine.max_gradient_jump).log2())
}

/// Max centred second difference (per axis) over continuation core nodes.
pub fn check_second_derivative_bound(u: &ScalarField, region_mask: &[Region]) -> f64 {
    let g = u.grid();
    let v = u.values();
    let mut best: f64 = 0.0;
    for k in g.core_nodes() {
        if region_mask[k] != Region::Continuation {
            continue;
        }
        for a in 0..g.dim() {
            if let (Some(p), Some(m)) = (g.neighbor(k, a, 1), g.neighbor(k, a, -1)) {
                let h = g.spacing()[a];
                best = best.max(((v[p] - v[k]) - (v[k] - v[m])).abs() / (h * h));
            }
        }
    }
    best
}

/// Relative change of the second-difference bound under refinement; stable iff `< max_change`.
pub fn second_derivative_refinement(coarse: f64, fine: f64, max_change: f64) -> (f64, bool) {
    let change = if coarse == 0.0 && fine == 0.0 {
        0.0
    } else {
        (fine - coarse).abs() / coarse.abs().max(f64::MIN_POSITIVE)
    };
    (change, change < max_change)
}

/// `sup_core |max(ℒu - f, u - 𝓜u)|`, rebuilt from the model's coefficients,
/// direct quadrature of `I` through the field's extension, and a fresh `𝓜u`.
/// Shares no assembled matrices with the solver.
pub fn hjb_residual(result: &SolveResult, model: &ModelSpec, stencil: &OperatorStencil) -> Result<f64> {
    let u = &result.u;
    let g = u.grid();
    if stencil.grid() != g {
        return Err(invalid("stencil and result live on different grids"));
    }
    let h_max = g.spacing().iter().copied().fold(0.0, f64::max);
    let search = SearchBox::cube(g.dim(), required_search_radius(u, &model.cost) + h_max);
    let mu = apply_M(u, &model.cost, &search)?.field;
    let scheme = stencil.scheme();
    let res = g
        .core_nodes()
        .into_par_iter()
        .map(|k| {
            let x = g.point(k);
            let pde = local_l(u, model, scheme, k, &x) - local_i(u, model, &x) - model.running_cost(&x);
            pde.max(u.values()[k] - mu.values()[k]).abs()
        })
        .reduce(|| 0.0, f64::max);
    Ok(res)
}

fn local_l(u: &ScalarField, model: &ModelSpec, scheme: Scheme, k: usize, x: &[f64]) -> f64 {
    let g = u.grid();
    let n = g.dim();
    let v = u.values();
    let h = g.spacing();
    let mut a = vec![0.0; n * n];
    let mut mu = vec![0.0; n];
    model.diffusion(x, &mut a);
    model.compensated_drift(x, &mut mu);
    let at = |k: usize, p: usize, s: isize| g.neighbor(k, p, s).expect("core node has neighbours");
    let mut acc = model.discount * v[k];
    for p in 0..n {
        let (up, dn) = (v[at(k, p, 1)], v[at(k, p, -1)]);
        acc -= a[p * n + p] * (up - 2.0 * v[k] + dn) / (h[p] * h[p]);
        let d1 = match scheme {
            Scheme::Central => (up - dn) / (2.0 * h[p]),
            Scheme::Upwind if mu[p] >= 0.0 => (up - v[k]) / h[p],
            Scheme::Upwind => (v[k] - dn) / h[p],
        };
        acc -= mu[p] * d1;
        for q in p + 1..n {
            let apq = a[p * n + q];
            if apq == 0.0 {
                continue;
            }
            let hh = h[p] * h[q];
            let corner = |sp: isize, sq: isize| v[at(at(k, p, sp), q, sq)];
            let dpq = match scheme {
                Scheme::Central => (corner(1, 1) + corner(-1, -1) - corner(1, -1) - corner(-1, 1)) / (4.0 * hh),
                Scheme::Upwind => {
                    let axes = v[at(k, p, 1)] + v[at(k, p, -1)] + v[at(k, q, 1)] + v[at(k, q, -1)];
                    if apq > 0.0 {
                        (corner(1, 1) + corner(-1, -1) + 2.0 * v[k] - axes) / (2.0 * hh)
                    } else {
                        -(corner(1, -1) + corner(-1, 1) + 2.0 * v[k] - axes) / (2.0 * hh)
                    }
                }
            };
            acc -= 2.0 * apq * dpq;
        }
    }
    acc
}

fn local_i(u: &ScalarField, model: &ModelSpec, x: &[f64]) -> f64 {
    let n = x.len();
    let base = u.eval(x);
    let mut jmp = vec![0.0; n];
    let mut y = vec![0.0; n];
    model.levy.quadrature().sum(|z| {
        model.jump(x, z, &mut jmp);
        if jmp.iter().all(|v| *v == 0.0) {
            return 0.0;
        }
        for a in 0..n {
            y[a] = x[a] + jmp[a];
        }
        u.eval(&y) - base
    })
}

/// Pass thresholds and sampling knobs; all are reported next to each value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticSettings {
    pub tol_lip: f64,
    /// Skip the Lipschitz check when the declared constants are only upper bounds.
    pub lipschitz_exact: bool,
    pub holder_alphas: Vec<f64>,
    /// Margin from the action set and box; default `4h` on the coarse grid.
    pub holder_delta: Option<f64>,
    pub holder_random_pairs: usize,
    pub holder_ratio_band: (f64, f64),
    pub smooth_fit_min_rate: f64,
    pub second_derivative_max_change: f64,
    /// The HJB residual must not exceed `hjb_factor · tol_outer · max(1, ‖f‖∞)`.
    pub hjb_factor: f64,
    /// Solve again at `h/2` for the refinement-based checks.
    pub refine: bool,
    pub seed: u64,
}

impl Default for DiagnosticSettings {
    fn default() -> Self {
        Self {
            tol_lip: 0.1,
            lipschitz_exact: true,
            holder_alphas: vec![0.25, 0.5, 0.75],
            holder_delta: None,
            holder_random_pairs: 1000,
            holder_ratio_band: (0.5, 2.0),
            smooth_fit_min_rate: 0.5,
            second_derivative_max_change: 0.5,
            hjb_factor: 10.0,
            refine: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsReport {
    pub checks: Vec<CheckOutcome>,
}

impl DiagnosticsReport {
    fn push(&mut self, name: impl Into<String>, value: f64, threshold: f64, pass: bool, note: impl Into<String>) {
        self.checks.push(CheckOutcome {
            name: name.into(),
            value,
            threshold,
            pass,
            note: note.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["check", "value", "threshold", "pass"])?;
        for c in &self.checks {
            w.write_record([
                c.name.clone(),
                format!("{:e}", c.value),
                format!("{:e}", c.threshold),
                c.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `diagnostics.csv` and `diagnostics.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.write_csv(&dir.join("diagnostics.csv"))?;
        fs::write(dir.join("diagnostics.txt"), self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for DiagnosticsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(
                f,
                "{:<4} {:<28} value {:<12.5e} threshold {:.5e}",
                if c.pass { "ok" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            )?;
            if !c.note.is_empty() {
                write!(f, "  ({})", c.note)?;
            }
            writeln!(f)?;
        }
        let failed = self.checks.iter().filter(|c| !c.pass).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn mask_from(u: &ScalarField, mu: &ScalarField, tol_region: f64) -> Vec<Region> {
    u.values()
        .iter()
        .zip(mu.values())
        .map(|(a, b)| if b - a <= tol_region { Region::Action } else { Region::Continuation })
        .collect()
}

/// Runs every check on `result`; refinement checks use `fine` (same model, `h/2`)
/// and are skipped when it is absent. `𝓜u` and the regions are recomputed from
/// `u`, so a tampered `u` cannot hide behind stored companions.
pub fn run_diagnostics(
    model: &ModelSpec,
    result: &SolveResult,
    fine: Option<&SolveResult>,
    stencil: &OperatorStencil,
    settings: &DiagnosticSettings,
) -> Result<DiagnosticsReport> {
    let mut report = DiagnosticsReport::default();
    let s = &result.summary;
    let u = &result.u;
    let g = u.grid();
    let h_max = g.spacing().iter().copied().fold(0.0, f64::max);
    let fresh_mu = |r: &SolveResult| -> Result<ScalarField> {
        let h = r.grid().spacing().iter().copied().fold(0.0, f64::max);
        let search = SearchBox::cube(r.grid().dim(), required_search_radius(&r.u, &model.cost) + h);
        Ok(apply_M(&r.u, &model.cost, &search)?.field)
    };
    let mu = fresh_mu(result)?;
    let mask = mask_from(u, &mu, s.tol_region);

    if settings.lipschitz_exact {
        let lip = check_lipschitz(u, s.lipschitz_bound, settings.tol_lip);
        report.push("lipschitz", lip.observed, lip.bound * (1.0 + settings.tol_lip), lip.pass, "");
    }

    let obs = check_obstacle(u, &mu);
    report.push(
        "obstacle",
        obs.max_violation,
        s.tol_region,
        obs.max_violation <= s.tol_region,
        format!("worst node {:?}", g.point(obs.node)),
    );

    let f_sup = g
        .core_nodes()
        .into_iter()
        .map(|k| model.running_cost(&g.point(k)).abs())
        .fold(0.0, f64::max);
    let hjb = hjb_residual(result, model, stencil)?;
    let hjb_threshold = settings.hjb_factor * s.tol_outer * f_sup.max(1.0);
    report.push("hjb_residual", hjb, hjb_threshold, hjb <= hjb_threshold, "");

    let fit = check_smooth_fit(u, &mask);
    let d2 = check_second_derivative_bound(u, &mask);
    let delta = settings.holder_delta.unwrap_or(4.0 * h_max);

    let Some(fine) = fine else {
        let note = if fit.has_free_boundary() { "" } else { "no free boundary" };
        report.push("smooth_fit_jump", fit.max_gradient_jump, f64::NAN, true, note);
        return Ok(report);
    };
    let fine_mu = fresh_mu(fine)?;
    let fine_mask = mask_from(&fine.u, &fine_mu, fine.summary.tol_region);

    for &alpha in &settings.holder_alphas {
        let name = format!("iu_holder_{alpha}");
        let run = |r: &SolveResult, m: &[Region]| {
            check_iu_holder(&r.u, model, m, alpha, delta, settings.holder_random_pairs, settings.seed)
        };
        match (run(result, &mask), run(fine, &fine_mask)) {
            (Ok(c), Ok(f)) => {
                let (ratio, finite) = holder_refinement(&c, &f, settings.holder_ratio_band);
                report.push(
                    name,
                    ratio,
                    settings.holder_ratio_band.1,
                    finite,
                    format!("quotient {:.4e} -> {:.4e}, {} nodes", c.quotient, f.quotient, c.nodes),
                );
            }
            (Err(Error::EmptyRegion(msg)), _) | (_, Err(Error::EmptyRegion(msg))) => {
                report.push(name, f64::NAN, settings.holder_ratio_band.1, false, msg);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }

    let fine_fit = check_smooth_fit(&fine.u, &fine_mask);
    match smooth_fit_rate(&fit, &fine_fit) {
        Some(rate) => report.push(
            "smooth_fit_rate",
            rate,
            settings.smooth_fit_min_rate,
            rate >= settings.smooth_fit_min_rate,
            format!("jump {:.4e} -> {:.4e}", fit.max_gradient_jump, fine_fit.max_gradient_jump),
        ),
        None => report.push("smooth_fit_rate", f64::NAN, settings.smooth_fit_min_rate, true, "no free boundary"),
    }

    let fine_d2 = check_second_derivative_bound(&fine.u, &fine_mask);
    let (change, stable) = second_derivative_refinement(d2, fine_d2, settings.second_derivative_max_change);
    report.push(
        "second_derivative_change",
        change,
        settings.second_derivative_max_change,
        stable,
        format!("max |D2u| {d2:.4e} -> {fine_d2:.4e}"),
    );
    Ok(report)
}
