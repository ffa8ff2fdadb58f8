//! Discrete `L`, `I`, `ℒ = L - I` and the intervention operator `𝓜` on grid fields.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{Extension, Grid, ScalarField};
use crate::levy::{check_integrability, norm};
use crate::model::{CostB, ModelSpec};

/// Discretization of the drift term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scheme {
    Central,
    #[default]
    Upwind,
}

/// Sparse rows of `-tr(A D²) - μ̄·D + r` at interior nodes; boundary rows are empty.
#[derive(Clone, Debug)]
pub struct OperatorStencil {
    grid: Grid,
    scheme: Scheme,
    discount: f64,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    // Per-node coefficients, kept for the one-sided boundary evaluation.
    diffusion: Vec<f64>,
    drift: Vec<f64>,
    bandwidth: usize,
}

impl OperatorStencil {
    pub fn new(model: &ModelSpec, grid: &Grid, scheme: Scheme) -> Result<Self> {
        let n = grid.dim();
        if model.dim_state() != n {
            return Err(invalid(format!("model has dimension {}, grid {}", model.dim_state(), n)));
        }
        let len = grid.len();
        let mut diffusion = vec![0.0; len * n * n];
        let mut drift = vec![0.0; len * n];
        let mut x = vec![0.0; n];
        for k in 0..len {
            grid.point_into(k, &mut x);
            model.diffusion(&x, &mut diffusion[k * n * n..(k + 1) * n * n]);
            model.compensated_drift(&x, &mut drift[k * n..(k + 1) * n]);
            let bad = diffusion[k * n * n..(k + 1) * n * n]
                .iter()
                .chain(&drift[k * n..(k + 1) * n])
                .any(|v| !v.is_finite());
            if bad {
                return Err(Error::NonFinite {
                    what: "diffusion or compensated drift".into(),
                    location: x.clone(),
                });
            }
        }
        let r = model.discount;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut bandwidth = 0;
        let mut row: Vec<(usize, f64)> = Vec::new();
        for k in 0..len {
            if !grid.is_boundary(k) {
                row.clear();
                row.push((k, r));
                let a = &diffusion[k * n * n..(k + 1) * n * n];
                let mu = &drift[k * n..(k + 1) * n];
                interior_row(grid, scheme, k, a, mu, &mut row);
                row.sort_by_key(|e| e.0);
                let mut last = usize::MAX;
                for &(c, v) in &row {
                    if c == last {
                        *vals.last_mut().unwrap() += v;
                    } else {
                        cols.push(c);
                        vals.push(v);
                        last = c;
                        bandwidth = bandwidth.max(c.abs_diff(k));
                    }
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            grid: grid.clone(),
            scheme,
            discount: r,
            row_ptr,
            cols,
            vals,
            diffusion,
            drift,
            bandwidth,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Largest `|col - row|` among stored entries.
    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Column indices and coefficients of row `k` (empty on the boundary).
    pub fn row(&self, k: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// `μ̄` at node `k`.
    pub fn drift_at(&self, k: usize) -> &[f64] {
        let n = self.grid.dim();
        &self.drift[k * n..(k + 1) * n]
    }

    /// `A` at node `k`, row-major.
    pub fn diffusion_at(&self, k: usize) -> &[f64] {
        let n = self.grid.dim();
        &self.diffusion[k * n * n..(k + 1) * n * n]
    }

    /// Errors unless every interior row has non-positive off-diagonals and a positive diagonal.
    pub fn check_monotone(&self) -> Result<()> {
        for k in 0..self.grid.len() {
            let (cols, vals) = self.row(k);
            for (&c, &v) in cols.iter().zip(vals) {
                if c != k && v > 1e-12 * vals.iter().fold(0.0f64, |m, x| m.max(x.abs())) {
                    return Err(Error::NonMonotone {
                        node: k,
                        detail: format!(
                            "off-diagonal coefficient {v:.3e} at x = {:?} ({:?} scheme)",
                            self.grid.point(k),
                            self.scheme
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Interior rows applied to `values`; boundary entries of `out` are left untouched.
    pub fn apply_interior(&self, values: &[f64], out: &mut [f64]) {
        for k in 0..self.grid.len() {
            let (cols, vals) = self.row(k);
            if !cols.is_empty() {
                out[k] = cols.iter().zip(vals).map(|(&c, &v)| v * values[c]).sum();
            }
        }
    }

    /// One-sided evaluation of `Lφ` at a boundary node.
    fn boundary_value(&self, values: &[f64], k: usize) -> f64 {
        let g = &self.grid;
        let n = g.dim();
        let a = self.diffusion_at(k);
        let mu = self.drift_at(k);
        let mut acc = self.discount * values[k];
        for p in 0..n {
            let d1 = derivative_weights(g, k, p, 1);
            let d2 = derivative_weights(g, k, p, 2);
            let first: f64 = d1.iter().map(|&(c, w)| w * values[c]).sum();
            let second: f64 = d2.iter().map(|&(c, w)| w * values[c]).sum();
            acc -= a[p * n + p] * second + mu[p] * first;
            for q in p + 1..n {
                let dq = derivative_weights(g, k, q, 1);
                let mut cross = 0.0;
                for &(cq, wq) in &dq {
                    let oq = cq as isize - k as isize;
                    for &(cp, wp) in &d1 {
                        let c = (cp as isize + oq) as usize;
                        cross += wp * wq * values[c];
                    }
                }
                acc -= 2.0 * a[p * n + q] * cross;
            }
        }
        acc
    }
}

/// Adds the interior stencil of node `k` (excluding the `r` term) to `row`.
fn interior_row(grid: &Grid, scheme: Scheme, k: usize, a: &[f64], mu: &[f64], row: &mut Vec<(usize, f64)>) {
    let n = grid.dim();
    let h = grid.spacing();
    let nb = |k: usize, p: usize, s: isize| grid.neighbor(k, p, s).expect("interior node");
    for p in 0..n {
        let (plus, minus) = (nb(k, p, 1), nb(k, p, -1));
        let app = a[p * n + p];
        let mut off = 0.0;
        // Cross terms are folded in below; their diagonal-axis corrections go here.
        for q in 0..n {
            if q != p && scheme == Scheme::Upwind {
                off += a[p * n + q].abs() / (h[p] * h[q]);
            }
        }
        let c2 = app / (h[p] * h[p]) - off;
        row.push((plus, -c2));
        row.push((minus, -c2));
        row.push((k, 2.0 * c2));
        let m = mu[p];
        match scheme {
            Scheme::Central => {
                row.push((plus, -m / (2.0 * h[p])));
                row.push((minus, m / (2.0 * h[p])));
            }
            Scheme::Upwind => {
                if m > 0.0 {
                    row.push((plus, -m / h[p]));
                    row.push((k, m / h[p]));
                } else if m < 0.0 {
                    row.push((minus, m / h[p]));
                    row.push((k, -m / h[p]));
                }
            }
        }
    }
    for p in 0..n {
        for q in p + 1..n {
            let apq = a[p * n + q];
            if apq == 0.0 {
                continue;
            }
            let hh = h[p] * h[q];
            match scheme {
                Scheme::Central => {
                    let c = 2.0 * apq / (4.0 * hh);
                    row.push((nb(nb(k, p, 1), q, 1), -c));
                    row.push((nb(nb(k, p, -1), q, -1), -c));
                    row.push((nb(nb(k, p, 1), q, -1), c));
                    row.push((nb(nb(k, p, -1), q, 1), c));
                }
                Scheme::Upwind => {
                    // Seven-point stencil: only the diagonal pair aligned with sign(a_pq);
                    // the axis neighbours got their +c above, the centre nets -2c.
                    let c = apq.abs() / hh;
                    let s = if apq > 0.0 { 1 } else { -1 };
                    row.push((nb(nb(k, p, 1), q, s), -c));
                    row.push((nb(nb(k, p, -1), q, -s), -c));
                    row.push((k, 2.0 * c));
                }
            }
        }
    }
}

/// Three-point finite-difference weights for the `order`-th derivative along `axis`:
/// central where possible, one-sided at the faces.
fn derivative_weights(grid: &Grid, k: usize, axis: usize, order: usize) -> Vec<(usize, f64)> {
    let h = grid.spacing()[axis];
    let i = grid.index(axis, k);
    let last = grid.nodes()[axis] - 1;
    let at = |s: isize| grid.neighbor(k, axis, s).unwrap();
    match (order, i) {
        (1, 0) => vec![(k, -1.5 / h), (at(1), 2.0 / h), (at(2), -0.5 / h)],
        (1, i) if i == last => vec![(k, 1.5 / h), (at(-1), -2.0 / h), (at(-2), 0.5 / h)],
        (1, _) => vec![(at(1), 0.5 / h), (at(-1), -0.5 / h)],
        (_, 0) => vec![(k, 1.0 / (h * h)), (at(1), -2.0 / (h * h)), (at(2), 1.0 / (h * h))],
        (_, i) if i == last => vec![(k, 1.0 / (h * h)), (at(-1), -2.0 / (h * h)), (at(-2), 1.0 / (h * h))],
        _ => vec![(at(1), 1.0 / (h * h)), (k, -2.0 / (h * h)), (at(-1), 1.0 / (h * h))],
    }
}

/// `Lφ` at every node. Boundary nodes use one-sided differences; see [`Grid::is_boundary`].
#[allow(non_snake_case)]
pub fn apply_L(field: &ScalarField, stencil: &OperatorStencil) -> Result<ScalarField> {
    if field.grid() != stencil.grid() {
        return Err(invalid("field and stencil live on different grids"));
    }
    let values = field.values();
    let mut out = vec![0.0; values.len()];
    stencil.apply_interior(values, &mut out);
    for (k, o) in out.iter_mut().enumerate() {
        if stencil.grid.is_boundary(k) {
            *o = stencil.boundary_value(values, k);
        }
    }
    ScalarField::new(field.grid().clone(), out, field.extension())
}

/// How off-box targets are resolved when assembling [`JumpOperator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtensionKind {
    Clamp,
    Linear,
}

impl From<Extension> for ExtensionKind {
    fn from(e: Extension) -> Self {
        match e {
            Extension::LipschitzClamp { .. } => ExtensionKind::Clamp,
            Extension::LinearExtrapolation => ExtensionKind::Linear,
        }
    }
}

/// `I` assembled once for a grid: `Iφ = Wφ + slope·d`, where `W` collects
/// interpolation weights and `d_k = Σ_q w_q dist(x_k + j_q, box)`.
#[derive(Clone, Debug)]
pub struct JumpOperator {
    grid: Grid,
    kind: ExtensionKind,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    off_box_distance: Vec<f64>,
    off_box_mass: Vec<f64>,
    off_box_evaluations: usize,
    evaluations: usize,
}

/// Output of applying `I`.
#[derive(Clone, Debug)]
pub struct JumpApplied {
    pub field: ScalarField,
    /// Share of quadrature evaluations whose target left the box.
    pub off_box_fraction: f64,
    /// Largest ν-mass mapped off the box from a core node.
    pub off_box_mass: f64,
}

impl JumpOperator {
    pub fn new(model: &ModelSpec, grid: &Grid, kind: ExtensionKind) -> Result<Self> {
        let n = grid.dim();
        if model.dim_state() != n {
            return Err(invalid("model and grid dimensions differ"));
        }
        let samples = sample_points(grid, model.jump_state_independent());
        let report = check_integrability(&model.levy, model, &samples);
        if let Some(c) = report.certificates.iter().find(|c| !c.passed) {
            return Err(Error::Divergent {
                condition: format!("j(x,.) in L1(nu) [{}]", c.name),
                detail: c.detail.clone(),
            });
        }
        let quad = model.levy.quadrature();
        let rows: Vec<(Vec<(usize, f64)>, f64, f64, usize)> = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let mut x = vec![0.0; n];
                let mut jmp = vec![0.0; n];
                let mut s = vec![0.0; n];
                grid.point_into(k, &mut x);
                let mut entries: Vec<(usize, f64)> = Vec::new();
                let mut corners: Vec<(usize, f64)> = Vec::with_capacity(1 << n);
                let (mut dist_acc, mut mass_acc, mut off) = (0.0, 0.0, 0);
                for (z, w) in quad.iter() {
                    model.jump(&x, z, &mut jmp);
                    if jmp.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    for a in 0..n {
                        s[a] = grid.index(a, k) as f64 + jmp[a] / grid.spacing()[a];
                    }
                    let dist = index_weights(grid, &s, kind, &mut corners);
                    if dist > 0.0 {
                        dist_acc += w * dist;
                        mass_acc += w;
                        off += 1;
                    }
                    // φ(target) - φ(x_k), with the self weight computed as a
                    // difference so tiny jumps do not cancel catastrophically.
                    let mut has_self = false;
                    let others: f64 = corners.iter().filter(|c| c.0 != k).map(|c| c.1).sum();
                    for &(c, cw) in &corners {
                        if c == k {
                            has_self = true;
                            let _ = cw;
                            entries.push((c, -w * others));
                        } else {
                            entries.push((c, w * cw));
                        }
                    }
                    if !has_self {
                        entries.push((k, -w));
                    }
                }
                entries.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
                for (c, v) in entries {
                    match merged.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => merged.push((c, v)),
                    }
                }
                (merged, dist_acc, mass_acc, off)
            })
            .collect();
        let mut row_ptr = vec![0];
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        let (mut off_box_distance, mut off_box_mass) = (Vec::new(), Vec::new());
        let mut off_box_evaluations = 0;
        for (entries, d, m, off) in rows {
            for (c, v) in entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
            off_box_distance.push(d);
            off_box_mass.push(m);
            off_box_evaluations += off;
        }
        Ok(Self {
            grid: grid.clone(),
            kind,
            row_ptr,
            cols,
            vals,
            off_box_distance,
            off_box_mass,
            off_box_evaluations,
            evaluations: quad.len() * grid.len(),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> ExtensionKind {
        self.kind
    }

    pub fn row(&self, k: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[k], self.row_ptr[k + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// Constant term per node for unit clamp slope.
    pub fn off_box_distance(&self, k: usize) -> f64 {
        self.off_box_distance[k]
    }

    /// Largest ν-mass mapped off the box from a core node.
    pub fn max_core_off_box_mass(&self) -> f64 {
        self.grid
            .core_nodes()
            .into_iter()
            .map(|k| self.off_box_mass[k])
            .fold(0.0, f64::max)
    }

    pub fn off_box_fraction(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.off_box_evaluations as f64 / self.evaluations as f64
        }
    }

    /// `Iφ` on raw node values with clamp slope `slope` (ignored for linear extrapolation).
    pub fn apply_values(&self, values: &[f64], slope: f64, out: &mut [f64]) {
        let slope = if self.kind == ExtensionKind::Clamp { slope } else { 0.0 };
        out.par_iter_mut().enumerate().for_each(|(k, o)| {
            let (cols, vals) = self.row(k);
            let mut acc: f64 = cols.iter().zip(vals).map(|(&c, &v)| v * values[c]).sum();
            if slope != 0.0 {
                acc += slope * self.off_box_distance[k];
            }
            *o = acc;
        });
    }

    pub fn apply(&self, field: &ScalarField) -> Result<JumpApplied> {
        if field.grid() != &self.grid {
            return Err(invalid("field and jump operator live on different grids"));
        }
        if ExtensionKind::from(field.extension()) != self.kind {
            return Err(invalid("field extension differs from the one the jump operator was built for"));
        }
        let slope = match field.extension() {
            Extension::LipschitzClamp { slope } => slope,
            Extension::LinearExtrapolation => 0.0,
        };
        let mut out = vec![0.0; self.grid.len()];
        self.apply_values(field.values(), slope, &mut out);
        Ok(JumpApplied {
            field: ScalarField::new(self.grid.clone(), out, field.extension())?,
            off_box_fraction: self.off_box_fraction(),
            off_box_mass: self.max_core_off_box_mass(),
        })
    }
}

/// Points at which the integrability certificates are evaluated.
fn sample_points(grid: &Grid, state_independent: bool) -> Vec<Vec<f64>> {
    let n = grid.dim();
    let centre: Vec<f64> = (0..n).map(|a| 0.5 * (grid.lower()[a] + grid.upper()[a])).collect();
    if state_independent {
        return vec![centre];
    }
    let mut pts = vec![centre];
    for corner in 0..(1usize << n) {
        pts.push(
            (0..n)
                .map(|a| if corner >> a & 1 == 1 { grid.upper()[a] } else { grid.lower()[a] })
                .collect(),
        );
    }
    pts
}

/// Multilinear weights at index-space point `s`; returns the distance to the box.
/// Linear extrapolation reuses the edge cell's weights with `t` outside `[0, 1]`.
fn index_weights(grid: &Grid, s: &[f64], kind: ExtensionKind, out: &mut Vec<(usize, f64)>) -> f64 {
    let n = grid.dim();
    let mut cell = [0usize; 8];
    let mut t = [0.0f64; 8];
    let mut dist2 = 0.0;
    for a in 0..n {
        let last = (grid.nodes()[a] - 1) as f64;
        let sa = match kind {
            ExtensionKind::Clamp => s[a].clamp(0.0, last),
            ExtensionKind::Linear => s[a],
        };
        let d = (s[a] - s[a].clamp(0.0, last)) * grid.spacing()[a];
        dist2 += d * d;
        let i = sa.floor().clamp(0.0, last - 1.0);
        cell[a] = i as usize;
        t[a] = sa - i;
    }
    out.clear();
    let base: usize = (0..n).map(|a| cell[a] * grid.strides()[a]).sum();
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut idx = base;
        for a in 0..n {
            if corner >> a & 1 == 1 {
                w *= t[a];
                idx += grid.strides()[a];
            } else {
                w *= 1.0 - t[a];
            }
        }
        if w != 0.0 {
            out.push((idx, w));
        }
    }
    dist2.sqrt()
}

/// `Iφ(x) = ∫[φ(x + j(x,z)) - φ(x)] ν(dz)` at every node.
#[allow(non_snake_case)]
pub fn apply_I(field: &ScalarField, model: &ModelSpec) -> Result<JumpApplied> {
    JumpOperator::new(model, field.grid(), field.extension().into())?.apply(field)
}

/// `ℒφ = Lφ - Iφ`.
#[allow(non_snake_case)]
pub fn apply_Ell(field: &ScalarField, stencil: &OperatorStencil, jump: &JumpOperator) -> Result<ScalarField> {
    let l = apply_L(field, stencil)?;
    let i = jump.apply(field)?;
    let values = l.values().iter().zip(i.field.values()).map(|(a, b)| a - b).collect();
    ScalarField::new(field.grid().clone(), values, field.extension())
}

/// Per-axis half-widths of the lattice searched by `𝓜`.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchBox {
    pub half_width: Vec<f64>,
}

impl SearchBox {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        Self {
            half_width: vec![half_width; dim],
        }
    }

    /// Radius of the largest ball the box contains.
    pub fn inner_radius(&self) -> f64 {
        self.half_width.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Radius outside which no displacement can be optimal for `field`:
/// beyond it `B(ξ)` exceeds the field's oscillation plus the cost of the shortest move.
pub fn required_search_radius(field: &ScalarField, cost: &CostB) -> f64 {
    let g = field.grid();
    let n = g.dim();
    let shortest = (0..n)
        .map(|a| {
            let mut e = vec![0.0; n];
            e[a] = g.spacing()[a];
            cost.eval(&e)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    cost.coercivity_radius(field.oscillation() + shortest)
}

/// `𝓜φ` and a minimizing displacement per node.
#[derive(Clone, Debug)]
pub struct Intervention {
    pub field: ScalarField,
    /// Row-major `len x n` displacements.
    pub argmin: Vec<f64>,
    pub required_radius: f64,
}

impl Intervention {
    pub fn xi(&self, k: usize) -> &[f64] {
        let n = self.field.grid().dim();
        &self.argmin[k * n..(k + 1) * n]
    }
}

struct Candidate {
    steps: Vec<isize>,
    xi: Vec<f64>,
    cost: f64,
    length: f64,
}

/// Lattice displacements `k·h` (k ≠ 0) inside `search`, sorted by cost then tie-break order.
fn candidates(grid: &Grid, cost: &CostB, search: &SearchBox) -> Result<Vec<Candidate>> {
    let n = grid.dim();
    let h = grid.spacing();
    let reach: Vec<isize> = (0..n).map(|a| (search.half_width[a] / h[a] + 1e-9).floor() as isize).collect();
    let total: usize = reach.iter().map(|r| (2 * r + 1) as usize).product();
    let mut out = Vec::with_capacity(total);
    let mut steps = vec![0isize; n];
    for mut idx in 0..total {
        for a in 0..n {
            let w = (2 * reach[a] + 1) as usize;
            steps[a] = (idx % w) as isize - reach[a];
            idx /= w;
        }
        if steps.iter().all(|&s| s == 0) {
            continue;
        }
        let xi: Vec<f64> = (0..n).map(|a| steps[a] as f64 * h[a]).collect();
        let c = cost.eval(&xi);
        if !c.is_finite() {
            return Err(Error::NonFinite {
                what: "transaction cost".into(),
                location: xi,
            });
        }
        out.push(Candidate {
            length: norm(&xi),
            steps: steps.clone(),
            xi,
            cost: c,
        });
    }
    out.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(tie_order(a, b)));
    Ok(out)
}

fn tie_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.length
        .total_cmp(&b.length)
        .then_with(|| a.xi.iter().zip(&b.xi).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal))
}

/// `𝓜φ(x) = min_ξ φ(x + ξ) + B(ξ)` over lattice displacements in `search`, `ξ ≠ 0`.
/// Ties go to the smallest `|ξ|`, then lexicographic order.
#[allow(non_snake_case)]
pub fn apply_M(field: &ScalarField, cost: &CostB, search: &SearchBox) -> Result<Intervention> {
    let g = field.grid();
    let n = g.dim();
    if search.half_width.len() != n {
        return Err(invalid("search box dimension differs from the grid"));
    }
    let required = required_search_radius(field, cost);
    if search.inner_radius() < required {
        return Err(Error::CoercivityNotCovered {
            search: search.inner_radius(),
            required,
        });
    }
    let cands = candidates(g, cost, search)?;
    let values = field.values();
    let floor_value = field.min();
    let (prune, slope) = match field.extension() {
        Extension::LipschitzClamp { slope } if slope >= 0.0 => (true, slope),
        Extension::LipschitzClamp { slope } => (false, slope),
        Extension::LinearExtrapolation => (false, 0.0),
    };
    let results: Vec<(f64, usize)> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let idx: Vec<isize> = (0..n).map(|a| g.index(a, k) as isize).collect();
            let mut point = vec![0.0; n];
            let mut best = f64::INFINITY;
            let mut best_c = usize::MAX;
            for (ci, c) in cands.iter().enumerate() {
                if prune && floor_value + c.cost > best {
                    break;
                }
                let mut flat = 0usize;
                let mut dist2 = 0.0;
                let mut inside = true;
                for a in 0..n {
                    let t = idx[a] + c.steps[a];
                    let last = g.nodes()[a] as isize - 1;
                    let tc = t.clamp(0, last);
                    if tc != t {
                        inside = false;
                        let d = (t - tc) as f64 * g.spacing()[a];
                        dist2 += d * d;
                    }
                    flat += tc as usize * g.strides()[a];
                }
                let phi = if inside {
                    values[flat]
                } else {
                    match field.extension() {
                        Extension::LipschitzClamp { .. } => values[flat] + slope * dist2.sqrt(),
                        Extension::LinearExtrapolation => {
                            for a in 0..n {
                                point[a] = g.lower()[a] + (idx[a] + c.steps[a]) as f64 * g.spacing()[a];
                            }
                            field.eval(&point)
                        }
                    }
                };
                let v = phi + c.cost;
                if v < best || (v == best && tie_order(c, &cands[best_c]) == Ordering::Less) {
                    best = v;
                    best_c = ci;
                }
            }
            (best, best_c)
        })
        .collect();
    let mut argmin = vec![0.0; g.len() * n];
    let mut out = Vec::with_capacity(g.len());
    for (k, (v, c)) in results.into_iter().enumerate() {
        if c == usize::MAX {
            return Err(Error::EmptyRegion("search box contains no nonzero lattice displacement".into()));
        }
        out.push(v);
        argmin[k * n..(k + 1) * n].copy_from_slice(&cands[c].xi);
    }
    Ok(Intervention {
        field: ScalarField::new(g.clone(), out, field.extension())?,
        argmin,
        required_radius: required,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{Atom, LevyMeasure};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_1d(sigma: f64, drift: f64, r: f64, levy: LevyMeasure) -> ModelSpec {
        ModelSpec::builder(1, 1)
            .affine_drift(vec![drift], vec![vec![0.0]])
            .unwrap()
            .constant_volatility(vec![vec![sigma]])
            .unwrap()
            .additive_jump(vec![vec![1.0]])
            .unwrap()
            .levy(levy)
            .norm_cost(1.0, vec![0.0])
            .unwrap()
            .transaction_cost(CostB::linear(1.0, 1.0).unwrap())
            .discount(r)
            .build()
            .unwrap()
    }

    fn clamp0() -> Extension {
        Extension::LipschitzClamp { slope: 0.0 }
    }

    #[test]
    fn central_scheme_is_exact_on_quadratics() {
        let model = model_1d(2f64.sqrt(), 0.0, 1.0, LevyMeasure::none(1));
        let g = Grid::cube(1, -2.0, 2.0, 21, 0.0).unwrap();
        let st = OperatorStencil::new(&model, &g, Scheme::Central).unwrap();
        let phi = ScalarField::from_fn(&g, clamp0(), |x| x[0] * x[0]).unwrap();
        let l = apply_L(&phi, &st).unwrap();
        for k in 0..g.len() {
            let x = g.coord(k, 0);
            // One-sided second differences are exact on quadratics too.
            assert!((l.values()[k] - (-2.0 + x * x)).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn constants_map_to_r_times_constant() {
        let model = model_1d(1.0, 0.3, 0.7, LevyMeasure::single_atom(vec![0.5], 2.0).unwrap());
        let g = Grid::cube(1, -3.0, 3.0, 31, 0.0).unwrap();
        for scheme in [Scheme::Central, Scheme::Upwind] {
            let st = OperatorStencil::new(&model, &g, scheme).unwrap();
            let c = ScalarField::constant(&g, 2.5, clamp0());
            assert!(apply_L(&c, &st).unwrap().values().iter().all(|v| (v - 1.75).abs() < 1e-12));
            let jump = JumpOperator::new(&model, &g, ExtensionKind::Clamp).unwrap();
            let ell = apply_Ell(&c, &st, &jump).unwrap();
            assert!(ell.values().iter().all(|v| (v - 1.75).abs() < 1e-12));
        }
    }

    #[test]
    fn upwind_error_is_first_order() {
        // μ̄ = 0.5, A = 1 (σ = √2), r = 0: Lφ = -φ'' - 0.5φ' = sin x - 0.5 cos x.
        let model = model_1d(2f64.sqrt(), 0.5, 1e-9, LevyMeasure::none(1));
        let err = |nodes| {
            let g = Grid::cube(1, -3.0, 3.0, nodes, 0.0).unwrap();
            let st = OperatorStencil::new(&model, &g, Scheme::Upwind).unwrap();
            let phi = ScalarField::from_fn(&g, clamp0(), |x| x[0].sin()).unwrap();
            let l = apply_L(&phi, &st).unwrap();
            (0..g.len())
                .filter(|&k| !g.is_boundary(k))
                .map(|k| {
                    let x = g.coord(k, 0);
                    (l.values()[k] - 1e-9 * x.sin() - (x.sin() - 0.5 * x.cos())).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(61), err(121));
        assert!(e1 < 0.1 && e2 < 0.6 * e1 && e2 > 0.4 * e1, "{e1} {e2}");
    }

    #[test]
    fn upwind_rows_are_monotone_and_sum_to_r() {
        let model = ModelSpec::builder(2, 2)
            .affine_drift(vec![0.1, -0.2], vec![vec![-0.5, 0.1], vec![0.0, -0.3]])
            .unwrap()
            .constant_volatility(vec![vec![1.0, 0.0], vec![0.4, 0.8]])
            .unwrap()
            .norm_cost(1.0, vec![0.0, 0.0])
            .unwrap()
            .transaction_cost(CostB::linear(1.0, 1.0).unwrap())
            .discount(2.0)
            .build()
            .unwrap();
        let g = Grid::cube(2, -2.0, 2.0, 17, 0.0).unwrap();
        let st = OperatorStencil::new(&model, &g, Scheme::Upwind).unwrap();
        st.check_monotone().unwrap();
        assert_eq!(st.bandwidth(), 18);
        for k in 0..g.len() {
            let (cols, vals) = st.row(k);
            if !cols.is_empty() {
                assert!((vals.iter().sum::<f64>() - 2.0).abs() < 1e-10);
            }
        }
        // Cross term of a bilinear function is picked up exactly.
        let phi = ScalarField::from_fn(&g, clamp0(), |x| x[0] * x[1]).unwrap();
        let l = apply_L(&phi, &st).unwrap();
        let a01 = st.diffusion_at(0)[1];
        for k in 0..g.len() {
            let (x, y) = (g.coord(k, 0), g.coord(k, 1));
            let mu = st.drift_at(k);
            let exact = -2.0 * a01 - mu[0] * y - mu[1] * x + 2.0 * x * y;
            if !g.is_boundary(k) {
                // Upwind drift differences are exact on linear-in-axis functions.
                assert!((l.values()[k] - exact).abs() < 1e-9, "{k}");
            } else {
                assert!((l.values()[k] - exact).abs() < 1e-9, "boundary {k}");
            }
        }
    }

    #[test]
    fn strongly_correlated_diffusion_on_anisotropic_grid_is_not_monotone() {
        let model = ModelSpec::builder(2, 1)
            .constant_volatility(vec![vec![1.0], vec![1.0]])
            .unwrap()
            .norm_cost(1.0, vec![0.0, 0.0])
            .unwrap()
            .transaction_cost(CostB::linear(1.0, 1.0).unwrap())
            .discount(1.0)
            .ellipticity(0.0)
            .build()
            .unwrap();
        let g = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![9, 41], 0.0).unwrap();
        let st = OperatorStencil::new(&model, &g, Scheme::Upwind).unwrap();
        assert!(matches!(st.check_monotone(), Err(Error::NonMonotone { .. })));
    }

    #[test]
    fn zero_jump_gives_zero_integral() {
        let model = ModelSpec::builder(1, 1)
            .constant_volatility(vec![vec![1.0]])
            .unwrap()
            .levy(LevyMeasure::single_atom(vec![1.0], 3.0).unwrap())
            .norm_cost(1.0, vec![0.0])
            .unwrap()
            .transaction_cost(CostB::linear(1.0, 1.0).unwrap())
            .discount(1.0)
            .build()
            .unwrap();
        let g = Grid::cube(1, -2.0, 2.0, 9, 0.0).unwrap();
        let phi = ScalarField::from_fn(&g, clamp0(), |x| x[0].powi(3)).unwrap();
        assert!(apply_I(&phi, &model).unwrap().field.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_atom_on_quadratic() {
        let model = model_1d(1.0, 0.0, 1.0, LevyMeasure::single_atom(vec![1.0], 2.0).unwrap());
        let g = Grid::cube(1, -4.0, 4.0, 33, 1.0).unwrap();
        let phi = ScalarField::from_fn(&g, Extension::LinearExtrapolation, |x| x[0] * x[0]).unwrap();
        let out = apply_I(&phi, &model).unwrap();
        for k in g.core_nodes() {
            let x = g.coord(k, 0);
            assert!((out.field.values()[k] - 2.0 * (2.0 * x + 1.0)).abs() < 1e-12);
        }
        assert_eq!(out.off_box_mass, 0.0);
        assert!(out.off_box_fraction > 0.0);
    }

    #[test]
    fn symmetric_density_on_linear_field_integrates_to_zero() {
        let model = model_1d(1.0, 0.0, 1.0, LevyMeasure::exponential(1.0, 1.0).unwrap());
        let g = Grid::cube(1, -60.0, 60.0, 241, 45.0).unwrap();
        let phi = ScalarField::from_fn(&g, Extension::LinearExtrapolation, |x| x[0]).unwrap();
        let out = apply_I(&phi, &model).unwrap();
        let err = model.levy.integrate(|z| z[0]).unwrap().error;
        for k in g.core_nodes() {
            assert!(out.field.values()[k].abs() <= err.max(1e-12), "{}", out.field.values()[k]);
        }
    }

    #[test]
    fn clamp_extension_contributes_slope_times_distance() {
        let model = model_1d(1.0, 0.0, 1.0, LevyMeasure::single_atom(vec![1.0], 1.0).unwrap());
        let g = Grid::cube(1, 0.0, 1.0, 5, 0.0).unwrap();
        let phi = ScalarField::from_fn(&g, Extension::LipschitzClamp { slope: 3.0 }, |x| x[0]).unwrap();
        let out = apply_I(&phi, &model).unwrap();
        // At x = 0.75: φ(1.75) = 1 + 3·0.75 = 3.25, so Iφ = 2.5.
        assert!((out.field.values()[3] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn divergent_measure_is_rejected() {
        let model = model_1d(1.0, 0.0, 1.0, LevyMeasure::tempered(1.0, 1.5, 1.0).unwrap());
        let g = Grid::cube(1, -2.0, 2.0, 9, 0.0).unwrap();
        assert!(matches!(
            JumpOperator::new(&model, &g, ExtensionKind::Clamp),
            Err(Error::Divergent { .. })
        ));
    }

    #[test]
    fn finite_activity_jump_operator_preserves_lipschitz() {
        let model = ModelSpec::builder(1, 1)
            .constant_volatility(vec![vec![1.0]])
            .unwrap()
            .affine_jump(vec![vec![1.0]], 0.2)
            .unwrap()
            .levy(LevyMeasure::atoms(vec![Atom { mark: vec![0.5], intensity: 1.0 }, Atom { mark: vec![-1.5], intensity: 0.5 }]).unwrap())
            .norm_cost(1.0, vec![0.0])
            .unwrap()
            .transaction_cost(CostB::linear(1.0, 1.0).unwrap())
            .discount(1.0)
            .build()
            .unwrap();
        let g = Grid::cube(1, -5.0, 5.0, 81, 0.0).unwrap();
        let mass = model.levy.total_mass().unwrap();
        let int_cj = model.levy.integrate(|z| model.jump_lipschitz(z)).unwrap().value;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (a, b, c) = (rng.random_range(-2.0..2.0), rng.random_range(0.1..3.0), rng.random_range(-1.0..1.0));
            let phi = ScalarField::from_fn(&g, Extension::LipschitzClamp { slope: 0.0 }, |x| a * (b * x[0]).sin() + c * x[0].abs()).unwrap();
            let mut phi = phi;
            let lip = phi.lipschitz_constant(false);
            phi.set_extension(Extension::LipschitzClamp { slope: lip });
            let i = apply_I(&phi, &model).unwrap();
            assert!(i.field.lipschitz_constant(false) <= lip * (2.0 * mass + int_cj) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn m_of_zero_is_k_plus_h() {
        let g = Grid::cube(1, -2.0, 2.0, 41, 0.0).unwrap();
        let zero = ScalarField::constant(&g, 0.0, clamp0());
        let m = apply_M(&zero, &CostB::linear(1.0, 1.0).unwrap(), &SearchBox::cube(1, 1.0)).unwrap();
        assert!(m.field.values().iter().all(|v| (v - 1.1).abs() < 1e-12));
        // Smallest |ξ|, then the negative direction first.
        assert!((m.xi(20)[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn m_of_abs_is_one_plus_abs() {
        let g = Grid::cube(1, -4.0, 4.0, 81, 0.0).unwrap();
        let phi = ScalarField::from_fn(&g, Extension::LipschitzClamp { slope: 1.0 }, |x| x[0].abs()).unwrap();
        let m = apply_M(&phi, &CostB::linear(1.0, 1.0).unwrap(), &SearchBox::cube(1, 10.0)).unwrap();
        for k in 0..g.len() {
            assert!((m.field.values()[k] - 1.0 - g.coord(k, 0).abs()).abs() <= 0.2 + 1e-12);
        }
    }

    #[test]
    fn search_box_must_cover_coercivity_radius() {
        let g = Grid::cube(1, -4.0, 4.0, 81, 0.0).unwrap();
        let phi = ScalarField::from_fn(&g, clamp0(), |x| x[0].abs()).unwrap();
        let err = apply_M(&phi, &CostB::linear(1.0, 1.0).unwrap(), &SearchBox::cube(1, 2.0)).unwrap_err();
        assert!(err.to_string().contains("coercivity bound not covered"));
    }

    #[test]
    fn m_matches_exhaustive_enumeration_bit_for_bit() {
        let g = Grid::cube(1, -1.0, 1.0, 33, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cost = CostB::quadratic(1.0, 1.0).unwrap();
        for _ in 0..10 {
            let vals: Vec<f64> = (0..33).map(|_| rng.random_range(-1.0..1.0)).collect();
            // A steep clamp keeps off-box targets out of the minimum, as in the oracle.
            let phi = ScalarField::new(g.clone(), vals.clone(), Extension::LipschitzClamp { slope: 1e3 }).unwrap();
            let m = apply_M(&phi, &cost, &SearchBox::cube(1, 2.0)).unwrap();
            let h = g.spacing()[0];
            for i in 0..33usize {
                let brute = (0..33usize)
                    .filter(|&j| j != i)
                    .map(|j| vals[j] + cost.eval(&[(j as isize - i as isize) as f64 * h]))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(m.field.values()[i], brute);
            }
        }
    }

    fn random_pair(seed: u64) -> (Grid, Vec<f64>, Vec<f64>) {
        let g = Grid::cube(2, -1.0, 1.0, 9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        (g, a, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn m_is_concave(seed in 0u64..1000, s in 0.0f64..1.0) {
            let (g, a, b) = random_pair(seed);
            let cost = CostB::linear(0.5, 1.0).unwrap();
            let sb = SearchBox::cube(2, 5.0);
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + (1.0 - s) * y).collect();
            let ma = apply_M(&ScalarField::new(g.clone(), a, clamp0()).unwrap(), &cost, &sb).unwrap();
            let mb = apply_M(&ScalarField::new(g.clone(), b, clamp0()).unwrap(), &cost, &sb).unwrap();
            let mm = apply_M(&ScalarField::new(g.clone(), mix, clamp0()).unwrap(), &cost, &sb).unwrap();
            for k in 0..g.len() {
                prop_assert!(mm.field.values()[k] >= s * ma.field.values()[k] + (1.0 - s) * mb.field.values()[k] - 1e-12);
            }
        }

        #[test]
        fn m_is_monotone(seed in 0u64..1000) {
            let (g, a, b) = random_pair(seed);
            let upper: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y.abs()).collect();
            let cost = CostB::linear(0.5, 1.0).unwrap();
            let sb = SearchBox::cube(2, 5.0);
            let lo = apply_M(&ScalarField::new(g.clone(), a, clamp0()).unwrap(), &cost, &sb).unwrap();
            let hi = apply_M(&ScalarField::new(g.clone(), upper, clamp0()).unwrap(), &cost, &sb).unwrap();
            for k in 0..g.len() {
                prop_assert!(lo.field.values()[k] <= hi.field.values()[k]);
            }
        }

        #[test]
        fn m_preserves_lipschitz_constant(seed in 0u64..1000) {
            let (g, a, _) = random_pair(seed);
            let mut phi = ScalarField::new(g, a, clamp0()).unwrap();
            let lip = phi.lipschitz_constant(false);
            phi.set_extension(Extension::LipschitzClamp { slope: lip });
            let m = apply_M(&phi, &CostB::linear(0.5, 1.0).unwrap(), &SearchBox::cube(2, 5.0)).unwrap();
            prop_assert!(m.field.lipschitz_constant(false) <= lip + 1e-12);
        }

        #[test]
        fn ell_is_linear(seed in 0u64..1000, s in -2.0f64..2.0) {
            let model = model_1d(1.0, 0.2, 1.0, LevyMeasure::single_atom(vec![0.3], 1.0).unwrap());
            let g = Grid::cube(1, -1.0, 1.0, 9, 0.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let st = OperatorStencil::new(&model, &g, Scheme::Upwind).unwrap();
            let jump = JumpOperator::new(&model, &g, ExtensionKind::Linear).unwrap();
            let ext = Extension::LinearExtrapolation;
            let ea = apply_Ell(&ScalarField::new(g.clone(), a.clone(), ext).unwrap(), &st, &jump).unwrap();
            let eb = apply_Ell(&ScalarField::new(g.clone(), b.clone(), ext).unwrap(), &st, &jump).unwrap();
            let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
            let ec = apply_Ell(&ScalarField::new(g.clone(), comb, ext).unwrap(), &st, &jump).unwrap();
            for k in 0..9 {
                prop_assert!((ec.values()[k] - s * ea.values()[k] - eb.values()[k]).abs() < 1e-10);
            }
        }
    }
}
