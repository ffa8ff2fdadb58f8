//! QVI solver: iterated optimal stopping, each obstacle problem solved by penalization.
//!
//! The jump operator is split by stencil reach: `I = I_near + I_far`. `I_near`
//! (targets inside the band of `L`) is kept implicit, so the matrix of each
//! linear solve is the M-matrix `L - I_near`; `I_far u_k` is frozen per outer
//! step. Without the split, an infinite-activity measure puts its whole
//! (huge) diagonal in the frozen part and the outer map stops contracting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Extension, Grid, ScalarField};
use crate::levy::gauss_legendre;
use crate::linalg::BandMatrix;
use crate::model::{lipschitz_bound, ModelSpec};
use crate::operators::{apply_M, required_search_radius, ExtensionKind, JumpOperator, OperatorStencil, Scheme, SearchBox};
use crate::simulate::{ImpulsePolicy, RegionPolicy};

/// `β_ε(t) = s(e^{t/ε} - 1)` for `t ≤ 0`, `s t / ε` for `t > 0`, `s = min(1, ε/ω)(1 - 10⁻⁶)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyFamily {
    eps: f64,
    omega: f64,
    scale: f64,
}

pub fn make_penalty(eps: f64, omega: f64) -> Result<PenaltyFamily> {
    if !(eps > 0.0) || !(omega > 0.0) {
        return Err(invalid("penalty needs eps > 0 and omega > 0"));
    }
    Ok(PenaltyFamily {
        eps,
        omega,
        scale: (eps / omega).min(1.0) * (1.0 - 1e-6),
    })
}

impl PenaltyFamily {
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            self.scale * (t / self.eps).exp_m1()
        } else {
            self.scale * t / self.eps
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            self.scale / self.eps * (t / self.eps).exp()
        } else {
            self.scale / self.eps
        }
    }
}

/// Box-kernel average of `g` over `[x - ε, x + ε]ⁿ` (4-point Gauss rule per axis).
pub fn mollify(g: &ScalarField, eps: f64) -> ScalarField {
    let grid = g.grid();
    let n = grid.dim();
    let (nodes, weights) = gauss_legendre(4);
    let total = 4usize.pow(n as u32);
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let values = (0..grid.len())
        .map(|k| {
            grid.point_into(k, &mut x);
            let mut acc = 0.0;
            for mut idx in 0..total {
                let mut w = 1.0;
                for a in 0..n {
                    let q = idx % 4;
                    idx /= 4;
                    y[a] = x[a] + eps * nodes[q];
                    w *= 0.5 * weights[q];
                }
                acc += w * g.eval(&y);
            }
            acc
        })
        .collect();
    g.with_values(values)
}

/// `ω(ε) = max(‖g^ε - g‖∞, ε^{1/4})`. The floor keeps `1/ω` finite but
/// unbounded as `ε → 0` even when `g^ε = g` to rounding (ε far below h).
pub fn penalty_modulus(g: &ScalarField, g_eps: &ScalarField, eps: f64) -> f64 {
    g.distance(g_eps).max(eps.powf(0.25))
}

/// `ε_k = 2^{-k} · eps_rel · max(1, scale)`, `k = 1..=levels`.
pub fn eps_schedule(levels: usize, eps_rel: f64, scale: f64) -> Vec<f64> {
    (1..=levels)
        .map(|k| eps_rel * scale.max(1.0) * 0.5f64.powi(k as i32))
        .collect()
}

/// Per-ε record of one penalized solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRecord {
    pub eps: f64,
    pub omega: f64,
    /// `sup |β_ε(v^ε - g^ε)|` over interior nodes.
    pub sup: f64,
    pub newton_iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ObstacleSolution {
    pub v: ScalarField,
    pub penalty_log: Vec<PenaltyRecord>,
    /// `max|f| + M + 1` with `M = max(0, -min L g)` over interior nodes.
    pub penalty_bound: f64,
}

impl ObstacleSolution {
    pub fn penalty_sup(&self) -> Vec<f64> {
        self.penalty_log.iter().map(|p| p.sup).collect()
    }
}

/// Interior rows of an M-matrix with identity rows on the boundary.
struct Implicit {
    matrix: BandMatrix,
    boundary: Vec<bool>,
}

impl Implicit {
    fn from_stencil(stencil: &OperatorStencil, width: usize) -> Self {
        let g = stencil.grid();
        let mut matrix = BandMatrix::zeros(g.len(), width);
        let mut boundary = vec![false; g.len()];
        for k in 0..g.len() {
            if g.is_boundary(k) {
                boundary[k] = true;
                matrix.set_identity_row(k, 1.0);
            } else {
                let (cols, vals) = stencil.row(k);
                for (&c, &v) in cols.iter().zip(vals) {
                    matrix.add(k, c, v);
                }
            }
        }
        Self { matrix, boundary }
    }
}

fn sup(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |m, v| m.max(v.abs()))
}

struct NewtonSettings {
    tol: f64,
    max_iter: usize,
}

/// Solves `A v + β(v - g) = src` on interior rows, `v = b` on the boundary.
fn penalized_newton(
    op: &Implicit,
    src: &[f64],
    g: &[f64],
    b: &[f64],
    pen: &PenaltyFamily,
    v: &mut [f64],
    settings: &NewtonSettings,
) -> Result<usize> {
    let len = v.len();
    for k in 0..len {
        if op.boundary[k] {
            v[k] = b[k];
        }
    }
    let mut av = vec![0.0; len];
    let residual = |v: &[f64], av: &mut [f64], out: &mut [f64]| {
        op.matrix.mul_vec(v, av);
        for k in 0..len {
            out[k] = if op.boundary[k] { 0.0 } else { av[k] + pen.eval(v[k] - g[k]) - src[k] };
        }
        sup(out.iter().copied())
    };
    let mut f = vec![0.0; len];
    let mut norm = residual(v, &mut av, &mut f);
    let mut history = vec![norm];
    let mut trial = vec![0.0; len];
    let mut f_trial = vec![0.0; len];
    for iter in 1..=settings.max_iter {
        let mut jac = op.matrix.clone();
        for k in 0..len {
            if !op.boundary[k] {
                jac.add(k, k, pen.derivative(v[k] - g[k]));
            }
        }
        let lu = jac.factor()?;
        let mut delta: Vec<f64> = f.iter().map(|x| -x).collect();
        lu.solve(&mut delta);
        let step = sup(delta.iter().copied());
        let scale = sup(v.iter().copied()).max(1.0);
        if !step.is_finite() {
            break;
        }
        if step <= settings.tol * scale {
            for (x, d) in v.iter_mut().zip(&delta) {
                *x += d;
            }
            return Ok(iter);
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=30 {
            for k in 0..len {
                trial[k] = v[k] + lambda * delta[k];
            }
            let n = residual(&trial, &mut av, &mut f_trial);
            if n < norm {
                v.copy_from_slice(&trial);
                f.copy_from_slice(&f_trial);
                norm = n;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        history.push(norm);
        if !accepted {
            break;
        }
    }
    Err(Error::NewtonDiverged {
        eps: pen.eps(),
        residuals: history,
    })
}

#[allow(clippy::too_many_arguments)]
fn obstacle_core(
    op: &Implicit,
    grid: &Grid,
    src: &[f64],
    g: &ScalarField,
    b: &[f64],
    schedule: &[f64],
    settings: &NewtonSettings,
    initial: Option<&[f64]>,
) -> Result<ObstacleSolution> {
    if schedule.is_empty() || schedule.iter().any(|e| !(*e > 0.0)) || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("eps schedule must be positive and strictly decreasing"));
    }
    let len = grid.len();
    let mut v: Vec<f64> = match initial {
        Some(init) => init.to_vec(),
        None => {
            let mut w: Vec<f64> = (0..len).map(|k| if op.boundary[k] { b[k] } else { src[k] }).collect();
            op.matrix.clone().factor()?.solve(&mut w);
            w.iter().zip(g.values()).map(|(a, c)| a.min(*c)).collect()
        }
    };
    let mut log = Vec::with_capacity(schedule.len());
    let mut bound: f64 = 0.0;
    let mut lg = vec![0.0; len];
    for &eps in schedule {
        let g_eps = mollify(g, eps);
        let omega = penalty_modulus(g, &g_eps, eps);
        let pen = make_penalty(eps, omega)?;
        let newton_iterations = penalized_newton(op, src, g_eps.values(), b, &pen, &mut v, settings)?;
        let sup_beta = sup((0..len).filter(|&k| !op.boundary[k]).map(|k| pen.eval(v[k] - g_eps.values()[k])));
        op.matrix.mul_vec(g_eps.values(), &mut lg);
        let m = (0..len)
            .filter(|&k| !op.boundary[k])
            .map(|k| -lg[k])
            .fold(0.0, f64::max);
        let f_sup = sup((0..len).filter(|&k| !op.boundary[k]).map(|k| src[k]));
        bound = bound.max(f_sup + m + 1.0);
        log.push(PenaltyRecord {
            eps,
            omega,
            sup: sup_beta,
            newton_iterations,
        });
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "penalized solution".into(),
            location: grid.point(k),
        });
    }
    Ok(ObstacleSolution {
        v: g.with_values(v),
        penalty_log: log,
        penalty_bound: bound,
    })
}

/// Solves `L v + β_ε(v - g^ε) = f`, `v = boundary` on the box faces, for each `ε`
/// in `eps_schedule`, warm-starting from the previous ε.
pub fn solve_obstacle_penalized(
    stencil: &OperatorStencil,
    f_src: &ScalarField,
    g_obstacle: &ScalarField,
    boundary: &ScalarField,
    eps_schedule: &[f64],
    newton_tol: f64,
) -> Result<ObstacleSolution> {
    let grid = stencil.grid();
    if f_src.grid() != grid || g_obstacle.grid() != grid || boundary.grid() != grid {
        return Err(invalid("fields and stencil live on different grids"));
    }
    stencil.check_monotone()?;
    let op = Implicit::from_stencil(stencil, stencil.bandwidth().max(1));
    obstacle_core(
        &op,
        grid,
        f_src.values(),
        g_obstacle,
        boundary.values(),
        eps_schedule,
        &NewtonSettings {
            tol: newton_tol,
            max_iter: 50,
        },
        None,
    )
}

/// How `u` is extended off the box inside `I` and `𝓜`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionRule {
    /// `u(proj x) + C_u · dist(x, box)`.
    #[default]
    LipschitzClamp,
    /// `u(proj x)`.
    Conservative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub scheme: SchemeName,
    /// Defaults to `10⁻⁶ · max(‖f‖∞, 1) / r`.
    pub tol_outer: Option<f64>,
    /// Defaults to `10 · tol_outer`.
    pub tol_region: Option<f64>,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    pub eps_levels: usize,
    /// First ε is `eps_rel · max(1, ‖f‖∞/r) / 2`.
    pub eps_rel: f64,
    /// Half-width of the `𝓜` search box; `None` recomputes the coercivity radius each step.
    pub search_radius: Option<f64>,
    pub extension: ExtensionRule,
    pub off_box_threshold: f64,
    pub max_no_intervention_iterations: usize,
}

/// Serializable name of a drift [`Scheme`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Central,
    #[default]
    Upwind,
}

impl From<SchemeName> for Scheme {
    fn from(s: SchemeName) -> Self {
        match s {
            SchemeName::Central => Scheme::Central,
            SchemeName::Upwind => Scheme::Upwind,
        }
    }
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Upwind,
            tol_outer: None,
            tol_region: None,
            newton_tol: 1e-10,
            max_newton: 50,
            max_outer: 300,
            eps_levels: 10,
            eps_rel: 1e-21,
            search_radius: None,
            extension: ExtensionRule::LipschitzClamp,
            off_box_threshold: 1e-3,
            max_no_intervention_iterations: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Continuation,
    Action,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub u: ScalarField,
    pub mu_field: ScalarField,
    pub iu_field: ScalarField,
    /// No-intervention value, also the source of the Dirichlet data.
    pub u0: ScalarField,
    pub region_mask: Vec<Region>,
    /// Minimizing displacement of `𝓜u` at every node, row-major `len x n`.
    pub argmin: Vec<f64>,
    pub summary: SolveSummary,
}

/// Scalar outputs of a solve; written to `summary.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub residual_hjb: f64,
    pub outer_iterations: usize,
    pub outer_history: Vec<f64>,
    pub penalty_log: Vec<PenaltyRecord>,
    pub penalty_bound: f64,
    /// `‖v(ε/2) - v(ε)‖∞` for the final obstacle problem.
    pub eps_halving_change: f64,
    pub tol_outer: f64,
    pub tol_region: f64,
    pub lipschitz_bound: f64,
    pub cost_floor: f64,
    pub search_radius: f64,
    pub off_box_mass: f64,
    pub no_intervention_iterations: usize,
}

impl SolveResult {
    pub fn grid(&self) -> &Grid {
        self.u.grid()
    }

    pub fn xi(&self, k: usize) -> &[f64] {
        let n = self.grid().dim();
        &self.argmin[k * n..(k + 1) * n]
    }

    pub fn action_count(&self) -> usize {
        self.region_mask.iter().filter(|r| **r == Region::Action).count()
    }

    /// Largest `u - 𝓜u` over core nodes.
    pub fn obstacle_violation(&self) -> f64 {
        self.grid()
            .core_nodes()
            .into_iter()
            .map(|k| self.u.values()[k] - self.mu_field.values()[k])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes `u.csv`, `u0.csv`, `mu.csv`, `iu.csv`, `regions.csv`, `policy.csv`,
    /// `plot.csv`, `summary.toml` and `log.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.u.write_csv(&dir.join("u.csv"))?;
        self.u0.write_csv(&dir.join("u0.csv"))?;
        self.mu_field.write_csv(&dir.join("mu.csv"))?;
        self.iu_field.write_csv(&dir.join("iu.csv"))?;
        let g = self.grid();
        let n = g.dim();
        let coords = |k: usize| g.point(k).iter().map(|x| format!("{x}")).collect::<Vec<_>>();
        let axes: Vec<String> = (0..n).map(|a| format!("x{a}")).collect();

        let mut w = csv::Writer::from_path(dir.join("regions.csv"))?;
        w.write_record(axes.iter().cloned().chain(["region".to_string()]))?;
        for (k, r) in self.region_mask.iter().enumerate() {
            w.write_record(coords(k).into_iter().chain([region_name(*r).to_string()]))?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("policy.csv"))?;
        w.write_record(axes.iter().cloned().chain((0..n).map(|a| format!("xi{a}"))))?;
        for k in 0..g.len() {
            if self.region_mask[k] == Region::Action {
                w.write_record(coords(k).into_iter().chain(self.xi(k).iter().map(|x| format!("{x}"))))?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("plot.csv"))?;
        w.write_record(axes.iter().cloned().chain(["u", "mu", "region"].map(String::from)))?;
        for k in 0..g.len() {
            w.write_record(coords(k).into_iter().chain([
                format!("{}", self.u.values()[k]),
                format!("{}", self.mu_field.values()[k]),
                region_name(self.region_mask[k]).to_string(),
            ]))?;
        }
        w.flush()?;

        let text = toml::to_string(&self.summary).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("summary.toml"), text)?;
        fs::write(dir.join("log.txt"), self.log_text())?;
        Ok(())
    }

    /// Reads a directory written by [`SolveResult::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let u = ScalarField::read_csv(&dir.join("u.csv"))?;
        let u0 = ScalarField::read_csv(&dir.join("u0.csv"))?;
        let mu_field = ScalarField::read_csv(&dir.join("mu.csv"))?;
        let iu_field = ScalarField::read_csv(&dir.join("iu.csv"))?;
        let g = u.grid().clone();
        if mu_field.grid() != &g || iu_field.grid() != &g || u0.grid() != &g {
            return Err(Error::Parse("result fields live on different grids".into()));
        }
        let n = g.dim();
        let mut region_mask = Vec::with_capacity(g.len());
        let mut r = csv::Reader::from_path(dir.join("regions.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            region_mask.push(match rec.get(n) {
                Some("continuation") => Region::Continuation,
                Some("action") => Region::Action,
                other => return Err(Error::Parse(format!("bad region {other:?}"))),
            });
        }
        if region_mask.len() != g.len() {
            return Err(Error::Parse("regions.csv does not cover the grid".into()));
        }
        let mut argmin = vec![0.0; g.len() * n];
        let mut r = csv::Reader::from_path(dir.join("policy.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad number `{s}` in policy.csv"))))
                .collect::<Result<_>>()?;
            if nums.len() != 2 * n {
                return Err(Error::Parse("policy.csv row has the wrong width".into()));
            }
            let k = g
                .node_at(&nums[..n])
                .ok_or_else(|| Error::Parse("policy.csv row is not a grid node".into()))?;
            argmin[k * n..(k + 1) * n].copy_from_slice(&nums[n..]);
        }
        let summary: SolveSummary = toml::from_str(&fs::read_to_string(dir.join("summary.toml"))?)
            .map_err(|e| Error::Parse(format!("summary.toml: {e}")))?;
        Ok(Self {
            u,
            mu_field,
            iu_field,
            u0,
            region_mask,
            argmin,
            summary,
        })
    }

    fn log_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "outer iterations: {}", s.outer_iterations);
        for (i, d) in s.outer_history.iter().enumerate() {
            let _ = writeln!(out, "  outer {:>3}: |u_k+1 - u_k| = {d:.6e}", i + 1);
        }
        let _ = writeln!(out, "penalty log (final outer step), bound {:.6e}:", s.penalty_bound);
        for p in &s.penalty_log {
            let _ = writeln!(
                out,
                "  eps = {:.3e}  omega = {:.3e}  sup|beta| = {:.6e}  newton = {}",
                p.eps, p.omega, p.sup, p.newton_iterations
            );
        }
        let _ = writeln!(out, "eps halving change: {:.3e}", s.eps_halving_change);
        let _ = writeln!(out, "hjb residual (core): {:.6e}", s.residual_hjb);
        let _ = writeln!(out, "tol_outer = {:.3e}, tol_region = {:.3e}", s.tol_outer, s.tol_region);
        let _ = writeln!(out, "action nodes: {} of {}", self.action_count(), self.region_mask.len());
        out
    }
}

fn region_name(r: Region) -> &'static str {
    match r {
        Region::Continuation => "continuation",
        Region::Action => "action",
    }
}

/// Sparse `I_far` rows.
struct FarPart {
    rows: Vec<Vec<(usize, f64)>>,
    constant: Vec<f64>,
}

impl FarPart {
    fn apply(&self, u: &[f64], k: usize) -> f64 {
        self.constant[k] + self.rows[k].iter().map(|&(c, w)| w * u[c]).sum::<f64>()
    }
}

/// Fewest nodes per axis `solve_qvi` accepts: a 3-node interior, so the core has
/// neighbour pairs for region classification and one-sided quotients.
pub const MIN_SOLVE_NODES: usize = 5;

pub fn solve_qvi(model: &ModelSpec, grid: &Grid, params: &SolverParams) -> Result<SolveResult> {
    if let Some(&k) = grid.nodes().iter().find(|&&k| k < MIN_SOLVE_NODES) {
        return Err(Error::GridTooSmall(format!(
            "{k} nodes on an axis; the solver needs at least {MIN_SOLVE_NODES}"
        )));
    }
    let c_u = lipschitz_bound(model)?;
    let slope = match params.extension {
        ExtensionRule::LipschitzClamp => c_u,
        ExtensionRule::Conservative => 0.0,
    };
    let ext = Extension::LipschitzClamp { slope };
    let n = grid.dim();
    let len = grid.len();
    let stencil = OperatorStencil::new(model, grid, params.scheme.into())?;
    stencil.check_monotone()?;
    let jump = JumpOperator::new(model, grid, ExtensionKind::Clamp)?;
    let off_box_mass = jump.max_core_off_box_mass();
    if off_box_mass > params.off_box_threshold {
        return Err(Error::BoxTooNarrow {
            mass: off_box_mass,
            threshold: params.off_box_threshold,
        });
    }
    let mut x = vec![0.0; n];
    let f: Vec<f64> = (0..len)
        .map(|k| {
            grid.point_into(k, &mut x);
            model.running_cost(&x)
        })
        .collect();
    if let Some(k) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "running cost".into(),
            location: grid.point(k),
        });
    }
    let r = model.discount;
    let f_sup = sup(f.iter().copied());
    let tol_outer = params.tol_outer.unwrap_or(1e-6 * f_sup.max(1.0) / r);
    let tol_region = params.tol_region.unwrap_or(10.0 * tol_outer);

    // Implicit operator L - I_near and the frozen remainder.
    let width = stencil.bandwidth().max(grid.strides().iter().sum());
    let mut op = Implicit::from_stencil(&stencil, width);
    let mut far = FarPart {
        rows: vec![Vec::new(); len],
        constant: (0..len).map(|k| slope * jump.off_box_distance(k)).collect(),
    };
    for k in 0..len {
        if op.boundary[k] {
            continue;
        }
        let (cols, vals) = jump.row(k);
        for (&c, &w) in cols.iter().zip(vals) {
            if c.abs_diff(k) <= width {
                op.matrix.add(k, c, -w);
            } else {
                far.rows[k].push((c, w));
            }
        }
    }

    // No-intervention value: (L - I_near) u = f + I_far u, u = f/r on the boundary.
    let lu = op.matrix.clone().factor()?;
    let mut u0 = vec![0.0; len];
    let mut u0_iterations = 0;
    let u0_tol = 1e-3 * tol_outer;
    let mut u0_history = Vec::new();
    loop {
        let mut next: Vec<f64> = (0..len)
            .map(|k| if op.boundary[k] { f[k] / r } else { f[k] + far.apply(&u0, k) })
            .collect();
        lu.solve(&mut next);
        let d = next.iter().zip(&u0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u0 = next;
        u0_iterations += 1;
        if d <= u0_tol {
            break;
        }
        u0_history.push(d);
        if u0_iterations >= params.max_no_intervention_iterations || !d.is_finite() {
            return Err(Error::OuterDiverged { distances: u0_history });
        }
    }

    let cost = &model.cost;
    let h_max = grid.spacing().iter().copied().fold(0.0, f64::max);
    let schedule = eps_schedule(params.eps_levels, params.eps_rel, f_sup / r);
    let settings = NewtonSettings {
        tol: params.newton_tol,
        max_iter: params.max_newton,
    };
    let search_for = |field: &ScalarField| match params.search_radius {
        Some(radius) => SearchBox::cube(n, radius),
        None => SearchBox::cube(n, required_search_radius(field, cost) + h_max),
    };

    let mut u = u0.clone();
    let mut history = Vec::new();
    let mut last = None;
    let mut converged = false;
    for _ in 0..params.max_outer {
        let uf = ScalarField::new(grid.clone(), u.clone(), ext)?;
        let m = apply_M(&uf, cost, &search_for(&uf))?;
        let src: Vec<f64> = (0..len)
            .map(|k| if op.boundary[k] { 0.0 } else { f[k] + far.apply(&u, k) })
            .collect();
        let b: Vec<f64> = (0..len).map(|k| u0[k].min(m.field.values()[k])).collect();
        let sol = obstacle_core(&op, grid, &src, &m.field, &b, &schedule, &settings, Some(&u))?;
        let d = sol.v.distance(&uf);
        history.push(d);
        u = sol.v.values().to_vec();
        last = Some((sol, src, m.field, b));
        if !d.is_finite() {
            break;
        }
        if d < tol_outer {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::OuterDiverged { distances: history });
    }
    let (sol, src, g_last, b_last) = last.expect("at least one outer step");

    // ε-stability: one more halving on the final frozen problem.
    let half = [schedule[schedule.len() - 1] * 0.5];
    let halved = obstacle_core(&op, grid, &src, &g_last, &b_last, &half, &settings, Some(sol.v.values()))?;
    let eps_halving_change = halved.v.distance(&sol.v);

    let u_field = ScalarField::new(grid.clone(), u, ext)?;
    let search = search_for(&u_field);
    let m = apply_M(&u_field, cost, &search)?;
    let iu = jump.apply(&u_field)?.field;
    let mut lu_vals = vec![0.0; len];
    stencil.apply_interior(u_field.values(), &mut lu_vals);
    let region_mask: Vec<Region> = (0..len)
        .map(|k| {
            if m.field.values()[k] - u_field.values()[k] <= tol_region {
                Region::Action
            } else {
                Region::Continuation
            }
        })
        .collect();
    let residual_hjb = grid
        .core_nodes()
        .into_iter()
        .map(|k| {
            let pde = lu_vals[k] - iu.values()[k] - f[k];
            let obs = u_field.values()[k] - m.field.values()[k];
            pde.max(obs).abs()
        })
        .fold(0.0, f64::max);
    Ok(SolveResult {
        summary: SolveSummary {
            residual_hjb,
            outer_iterations: history.len(),
            outer_history: history,
            penalty_log: sol.penalty_log,
            penalty_bound: sol.penalty_bound,
            eps_halving_change,
            tol_outer,
            tol_region,
            lipschitz_bound: c_u,
            cost_floor: cost.floor(),
            search_radius: search.inner_radius(),
            off_box_mass,
            no_intervention_iterations: u0_iterations,
        },
        u0: u_field.with_values(u0),
        mu_field: m.field,
        iu_field: iu,
        argmin: m.argmin,
        region_mask,
        u: u_field,
    })
}

/// An action node whose post-impulse point fails a placement check.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementViolation {
    pub node: usize,
    pub target: Vec<f64>,
    /// `u(y) - (𝓜u(y) - K)`; positive means the check failed by that much.
    pub excess: f64,
}

#[derive(Clone, Debug)]
pub struct PolicyReport {
    pub policy: ImpulsePolicy,
    pub tol_jump: f64,
    /// Targets with `u(y) > 𝓜u(y) - K + tol_jump`.
    pub violations: Vec<PlacementViolation>,
    /// Targets outside `D = {u < 𝓜u - K/2}`.
    pub outside_d: Vec<PlacementViolation>,
}

/// Region policy from a solve, with post-impulse placement checks at `tol_jump = 3h·C_u`.
pub fn extract_policy(result: &SolveResult) -> PolicyReport {
    let g = result.grid();
    let n = g.dim();
    let k_floor = result.summary.cost_floor;
    let h = g.spacing().iter().copied().fold(0.0, f64::max);
    let tol_jump = 3.0 * h * result.summary.lipschitz_bound;
    let mut violations = Vec::new();
    let mut outside_d = Vec::new();
    let action: Vec<bool> = result.region_mask.iter().map(|r| *r == Region::Action).collect();
    let mut xi = vec![0.0; g.len() * n];
    for k in (0..g.len()).filter(|&k| action[k]) {
        xi[k * n..(k + 1) * n].copy_from_slice(result.xi(k));
        let target: Vec<f64> = g.point(k).iter().zip(result.xi(k)).map(|(a, b)| a + b).collect();
        let (uy, my) = (result.u.eval(&target), result.mu_field.eval(&target));
        let excess = uy - (my - k_floor);
        if excess > tol_jump {
            violations.push(PlacementViolation {
                node: k,
                target: target.clone(),
                excess,
            });
        }
        if uy >= my - 0.5 * k_floor {
            outside_d.push(PlacementViolation {
                node: k,
                target,
                excess: uy - (my - 0.5 * k_floor),
            });
        }
    }
    PolicyReport {
        policy: ImpulsePolicy::Region(RegionPolicy::new(g.clone(), action, xi)),
        tol_jump,
        violations,
        outside_d,
    }
}
