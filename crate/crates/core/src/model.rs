//! Problem instance: coefficients, costs, Lévy measure and declared constants.
//!
//! Coefficients are opaque callables. The built-in families (affine drift,
//! constant/affine volatility, additive/affine jumps, norm running cost,
//! linear/quadratic transaction cost) fill in their exact Lipschitz constants;
//! callers using raw closures declare constants themselves.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::levy::{norm, LevyMeasure};

pub type VectorMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Row-major `n x m` matrix-valued map.
pub type MatrixMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type JumpMap = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug)]
enum RadiusRule {
    Linear { floor: f64, slope: f64 },
    Quadratic { floor: f64, coef: f64 },
    Fixed(f64),
}

/// Transaction cost `B(ξ)` with floor `K = inf B > 0`.
#[derive(Clone)]
pub struct CostB {
    fixed_floor: f64,
    evaluate: ScalarMap,
    radius: RadiusRule,
}

impl fmt::Debug for CostB {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostB")
            .field("fixed_floor", &self.fixed_floor)
            .field("radius", &self.radius)
            .finish()
    }
}

impl CostB {
    /// `B(ξ) = K + slope |ξ|`.
    pub fn linear(floor: f64, slope: f64) -> Result<Self> {
        if !(floor > 0.0) || !(slope > 0.0) {
            return Err(invalid("linear cost needs K > 0 and slope > 0"));
        }
        Ok(Self {
            fixed_floor: floor,
            evaluate: Arc::new(move |xi| floor + slope * norm(xi)),
            radius: RadiusRule::Linear { floor, slope },
        })
    }

    /// `B(ξ) = K + coef |ξ|²`. Not subadditive-plus-K; the validator flags it.
    pub fn quadratic(floor: f64, coef: f64) -> Result<Self> {
        if !(floor > 0.0) || !(coef > 0.0) {
            return Err(invalid("quadratic cost needs K > 0 and coef > 0"));
        }
        Ok(Self {
            fixed_floor: floor,
            evaluate: Arc::new(move |xi| floor + coef * xi.iter().map(|v| v * v).sum::<f64>()),
            radius: RadiusRule::Quadratic { floor, coef },
        })
    }

    /// User cost with a fixed coercivity radius.
    pub fn custom(floor: f64, evaluate: ScalarMap, coercivity_radius: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(invalid("cost floor K must be positive"));
        }
        Ok(Self {
            fixed_floor: floor,
            evaluate,
            radius: RadiusRule::Fixed(coercivity_radius),
        })
    }

    pub fn eval(&self, xi: &[f64]) -> f64 {
        (self.evaluate)(xi)
    }

    pub fn floor(&self) -> f64 {
        self.fixed_floor
    }

    /// Radius beyond which `B(ξ) > level`; a displacement that long can never
    /// beat doing nothing when the field oscillates by at most `level`.
    pub fn coercivity_radius(&self, level: f64) -> f64 {
        match self.radius {
            RadiusRule::Linear { floor, slope } => ((level - floor) / slope).max(0.0),
            RadiusRule::Quadratic { floor, coef } => ((level - floor) / coef).max(0.0).sqrt(),
            RadiusRule::Fixed(r) => r,
        }
    }
}

/// Constants the theory is phrased in; checked for consistency by [`validate_assumptions`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeclaredConstants {
    pub drift_lipschitz: f64,
    pub volatility_lipschitz: f64,
    pub cost_lipschitz: f64,
    /// Lower bound λ on the spectrum of `A = σσᵀ/2`.
    pub ellipticity: f64,
}

/// The impulse-control problem instance.
#[derive(Clone)]
pub struct ModelSpec {
    dim_state: usize,
    dim_noise: usize,
    drift: VectorMap,
    volatility: MatrixMap,
    jump: JumpMap,
    jump_lipschitz: ScalarMap,
    jump_state_independent: bool,
    running_cost: ScalarMap,
    pub levy: LevyMeasure,
    pub cost: CostB,
    pub discount: f64,
    pub constants: DeclaredConstants,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim_state", &self.dim_state)
            .field("dim_noise", &self.dim_noise)
            .field("levy", &self.levy)
            .field("cost", &self.cost)
            .field("discount", &self.discount)
            .field("constants", &self.constants)
            .finish()
    }
}

impl ModelSpec {
    pub fn builder(dim_state: usize, dim_noise: usize) -> ModelBuilder {
        ModelBuilder::new(dim_state, dim_noise)
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_noise(&self) -> usize {
        self.dim_noise
    }

    pub fn dim_mark(&self) -> usize {
        self.levy.mark_dim()
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn volatility(&self, x: &[f64], out: &mut [f64]) {
        (self.volatility)(x, out)
    }

    pub fn jump(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        (self.jump)(x, z, out)
    }

    /// `C_j(z)`.
    pub fn jump_lipschitz(&self, z: &[f64]) -> f64 {
        (self.jump_lipschitz)(z)
    }

    /// True when `j(x, z)` does not depend on `x`.
    pub fn jump_state_independent(&self) -> bool {
        self.jump_state_independent
    }

    pub fn running_cost(&self, x: &[f64]) -> f64 {
        (self.running_cost)(x)
    }

    /// `A(x) = σ(x)σ(x)ᵀ / 2`, row-major `n x n`.
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        let (n, m) = (self.dim_state, self.dim_noise);
        let mut s = vec![0.0; n * m];
        self.volatility(x, &mut s);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = 0.5 * (0..m).map(|k| s[i * m + k] * s[j * m + k]).sum::<f64>();
            }
        }
    }

    /// `μ̄(x) = μ(x) - ∫ j(x,z) ν(dz)` on the base quadrature.
    pub fn compensated_drift(&self, x: &[f64], out: &mut [f64]) {
        self.drift(x, out);
        let mut buf = vec![0.0; self.dim_state];
        for (z, w) in self.levy.quadrature().iter() {
            self.jump(x, z, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o -= w * b;
            }
        }
    }

    /// `2C_μ + C_σ² + ∫C_j² dν`, the growth rate of coupled paths.
    pub fn growth_rate(&self) -> Result<f64> {
        let c = &self.constants;
        let cj2 = self.levy.integrate(|z| self.jump_lipschitz(z).powi(2))?;
        Ok(2.0 * c.drift_lipschitz + c.volatility_lipschitz.powi(2) + cj2.value)
    }
}

/// Builder for [`ModelSpec`] with the built-in coefficient families.
pub struct ModelBuilder {
    n: usize,
    m: usize,
    drift: Option<(VectorMap, f64)>,
    volatility: Option<(MatrixMap, f64, Option<f64>)>,
    jump: Option<(JumpMap, ScalarMap, bool)>,
    running_cost: Option<(ScalarMap, f64)>,
    levy: Option<LevyMeasure>,
    cost: Option<CostB>,
    discount: Option<f64>,
    ellipticity: Option<f64>,
    overrides: [Option<f64>; 3],
}

fn spectral_norm(rows: &[Vec<f64>], ncols: usize) -> f64 {
    if rows.is_empty() || ncols == 0 {
        return 0.0;
    }
    let m = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    m.singular_values().max()
}

fn check_matrix(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<()> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("{name} must be {nrows}x{ncols}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl ModelBuilder {
    pub fn new(dim_state: usize, dim_noise: usize) -> Self {
        Self {
            n: dim_state,
            m: dim_noise,
            drift: None,
            volatility: None,
            jump: None,
            running_cost: None,
            levy: None,
            cost: None,
            discount: None,
            ellipticity: None,
            overrides: [None; 3],
        }
    }

    /// `μ(x) = offset + M x`, `C_μ = ‖M‖₂`.
    pub fn affine_drift(mut self, offset: Vec<f64>, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = self.n;
        if offset.len() != n {
            return Err(invalid(format!("drift offset must have length {n}")));
        }
        check_matrix("drift matrix", &matrix, n, n)?;
        let c = spectral_norm(&matrix, n);
        let f: VectorMap = Arc::new(move |x, out| {
            for i in 0..offset.len() {
                out[i] = offset[i] + matrix[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        self.drift = Some((f, c));
        Ok(self)
    }

    pub fn drift_fn(mut self, f: VectorMap, lipschitz: f64) -> Self {
        self.drift = Some((f, lipschitz));
        self
    }

    /// Constant `σ`, `C_σ = 0`; the ellipticity constant is the exact smallest eigenvalue of `A`.
    pub fn constant_volatility(mut self, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let (n, m) = (self.n, self.m);
        check_matrix("volatility", &matrix, n, m)?;
        let a = DMatrix::from_fn(n, n, |i, j| 0.5 * (0..m).map(|k| matrix[i][k] * matrix[j][k]).sum::<f64>());
        let lambda = SymmetricEigen::new(a).eigenvalues.min();
        let flat: Vec<f64> = matrix.into_iter().flatten().collect();
        let f: MatrixMap = Arc::new(move |_, out| out.copy_from_slice(&flat));
        self.volatility = Some((f, 0.0, Some(lambda)));
        Ok(self)
    }

    /// `σ(x) = S₀ + Σ_k x_k S_k`, `C_σ` the exact Frobenius Lipschitz constant.
    pub fn affine_volatility(mut self, base: Vec<Vec<f64>>, slopes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let (n, m) = (self.n, self.m);
        check_matrix("volatility base", &base, n, m)?;
        if slopes.len() != n {
            return Err(invalid(format!("affine volatility needs {n} slope matrices")));
        }
        for s in &slopes {
            check_matrix("volatility slope", s, n, m)?;
        }
        // Columns vec(S_k) of the linear part; its spectral norm is the Lipschitz constant.
        let cols: Vec<Vec<f64>> = (0..n * m)
            .map(|e| slopes.iter().map(|s| s[e / m][e % m]).collect())
            .collect();
        let c = spectral_norm(&cols, n);
        let base: Vec<f64> = base.into_iter().flatten().collect();
        let slopes: Vec<Vec<f64>> = slopes.into_iter().map(|s| s.into_iter().flatten().collect()).collect();
        let f: MatrixMap = Arc::new(move |x, out| {
            out.copy_from_slice(&base);
            for (k, s) in slopes.iter().enumerate() {
                for (o, v) in out.iter_mut().zip(s) {
                    *o += x[k] * v;
                }
            }
        });
        self.volatility = Some((f, c, None));
        Ok(self)
    }

    pub fn volatility_fn(mut self, f: MatrixMap, lipschitz: f64) -> Self {
        self.volatility = Some((f, lipschitz, None));
        self
    }

    /// `j(x, z) = J z`, state independent, `C_j ≡ 0`.
    pub fn additive_jump(mut self, matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = self.n;
        let l = matrix.first().map_or(0, |r| r.len());
        check_matrix("jump matrix", &matrix, n, l)?;
        let f: JumpMap = Arc::new(move |_, z, out| {
            for (o, row) in out.iter_mut().zip(&matrix) {
                *o = row.iter().zip(z).map(|(a, b)| a * b).sum();
            }
        });
        self.jump = Some((f, Arc::new(|_| 0.0), true));
        Ok(self)
    }

    /// `j(x, z) = J z + gain·min(|z|, 1)·x`, `C_j(z) = |gain|·min(|z|, 1)`.
    pub fn affine_jump(mut self, matrix: Vec<Vec<f64>>, gain: f64) -> Result<Self> {
        let n = self.n;
        let l = matrix.first().map_or(0, |r| r.len());
        check_matrix("jump matrix", &matrix, n, l)?;
        let f: JumpMap = Arc::new(move |x, z, out| {
            let s = gain * norm(z).min(1.0);
            for ((o, row), xi) in out.iter_mut().zip(&matrix).zip(x) {
                *o = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + s * xi;
            }
        });
        let cj: ScalarMap = Arc::new(move |z| gain.abs() * norm(z).min(1.0));
        self.jump = Some((f, cj, gain == 0.0));
        Ok(self)
    }

    pub fn jump_fn(mut self, f: JumpMap, lipschitz: ScalarMap, state_independent: bool) -> Self {
        self.jump = Some((f, lipschitz, state_independent));
        self
    }

    /// `f(x) = scale·|x - center|`, `C_f = scale`.
    pub fn norm_cost(mut self, scale: f64, center: Vec<f64>) -> Result<Self> {
        if !(scale >= 0.0) || center.len() != self.n {
            return Err(invalid("norm running cost needs scale >= 0 and a center of length n"));
        }
        let f: ScalarMap = Arc::new(move |x| {
            scale * x.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt()
        });
        self.running_cost = Some((f, scale));
        Ok(self)
    }

    /// `f ≡ value`, `C_f = 0`.
    pub fn constant_running_cost(mut self, value: f64) -> Result<Self> {
        if !(value >= 0.0) {
            return Err(invalid("running cost must be nonnegative"));
        }
        self.running_cost = Some((Arc::new(move |_| value), 0.0));
        Ok(self)
    }

    pub fn running_cost_fn(mut self, f: ScalarMap, lipschitz: f64) -> Self {
        self.running_cost = Some((f, lipschitz));
        self
    }

    pub fn levy(mut self, levy: LevyMeasure) -> Self {
        self.levy = Some(levy);
        self
    }

    pub fn transaction_cost(mut self, cost: CostB) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn discount(mut self, r: f64) -> Self {
        self.discount = Some(r);
        self
    }

    pub fn ellipticity(mut self, lambda: f64) -> Self {
        self.ellipticity = Some(lambda);
        self
    }

    /// Replace the family-derived constants with declared ones.
    pub fn declare_constants(mut self, drift: Option<f64>, volatility: Option<f64>, cost: Option<f64>) -> Self {
        self.overrides = [drift, volatility, cost];
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(invalid("state and noise dimensions must be >= 1"));
        }
        let (drift, c_mu) = self.drift.unwrap_or_else(|| (Arc::new(|_: &[f64], out: &mut [f64]| out.fill(0.0)), 0.0));
        let (volatility, c_sigma, lambda_family) =
            self.volatility.ok_or_else(|| invalid("volatility is required"))?;
        let levy = self.levy.unwrap_or_else(|| LevyMeasure::none(1));
        let (jump, jump_lipschitz, jump_state_independent) = self.jump.unwrap_or_else(|| {
            (
                Arc::new(|_: &[f64], _: &[f64], out: &mut [f64]| out.fill(0.0)) as JumpMap,
                Arc::new(|_: &[f64]| 0.0) as ScalarMap,
                true,
            )
        });
        let (running_cost, c_f) = self.running_cost.ok_or_else(|| invalid("running cost is required"))?;
        let cost = self.cost.ok_or_else(|| invalid("transaction cost is required"))?;
        let discount = self.discount.ok_or_else(|| invalid("discount r is required"))?;
        if !(discount > 0.0) {
            return Err(invalid("discount r must be positive"));
        }
        let ellipticity = self.ellipticity.or(lambda_family).unwrap_or(0.0);
        let [o_mu, o_sigma, o_f] = self.overrides;
        let constants = DeclaredConstants {
            drift_lipschitz: o_mu.unwrap_or(c_mu),
            volatility_lipschitz: o_sigma.unwrap_or(c_sigma),
            cost_lipschitz: o_f.unwrap_or(c_f),
            ellipticity,
        };
        for (name, v) in [
            ("C_mu", constants.drift_lipschitz),
            ("C_sigma", constants.volatility_lipschitz),
            ("C_f", constants.cost_lipschitz),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("declared {name} must be finite and >= 0")));
            }
        }
        Ok(ModelSpec {
            dim_state: n,
            dim_noise: m,
            drift,
            volatility,
            jump,
            jump_lipschitz,
            jump_state_independent,
            running_cost,
            levy,
            cost,
            discount,
            constants,
        })
    }
}

/// Lipschitz constant `C_u = C_f / (r - [2C_μ + C_σ² + ∫C_j² dν])` of the value function.
pub fn lipschitz_bound(model: &ModelSpec) -> Result<f64> {
    let threshold = model.growth_rate()?;
    let denom = model.discount - threshold;
    if !(denom > 0.0) {
        return Err(Error::DiscountTooSmall {
            discount: model.discount,
            threshold,
        });
    }
    Ok(model.constants.cost_lipschitz / denom)
}

/// Axis-aligned box the assumption checks sample from.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SamplingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(invalid("sampling box needs lower < upper on every axis"));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    fn width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct ValidationOptions {
    pub samples: usize,
    pub seed: u64,
    /// Relative slack on declared constants.
    pub tolerance: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub description: &'static str,
    pub passed: bool,
    /// Observed / declared; pass iff `<= 1 + tol` (strict `< 1` for discount dominance).
    pub worst_ratio: f64,
    /// Concatenated coordinates of the witnessing sample.
    pub witness: Vec<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
    pub hard_failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.hard_failures.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:<4} ratio {:>12.6e}  {}{}",
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.worst_ratio,
                c.description,
                if c.detail.is_empty() { String::new() } else { format!(" [{}]", c.detail) }
            )?;
        }
        for h in &self.hard_failures {
            writeln!(f, "hard failure: {h}")?;
        }
        Ok(())
    }
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut r) = (inv, 0.0);
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Halton points in `[0,1)^dim` with a seeded Cranley-Patterson shift.
struct Halton {
    shift: Vec<f64>,
    index: u64,
}

impl Halton {
    fn new(dim: usize, seed: u64) -> Self {
        assert!(dim <= PRIMES.len(), "Halton dimension {dim} too large");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            shift: (0..dim).map(|_| rng.random::<f64>()).collect(),
            index: 0,
        }
    }

    fn next(&mut self) -> Vec<f64> {
        self.index += 1;
        self.shift
            .iter()
            .zip(PRIMES)
            .map(|(s, p)| (radical_inverse(self.index, p) + s).fract())
            .collect()
    }
}

struct Worst {
    ratio: f64,
    witness: Vec<f64>,
}

impl Worst {
    fn new() -> Self {
        Self {
            ratio: 0.0,
            witness: Vec::new(),
        }
    }

    fn offer(&mut self, ratio: f64, witness: impl FnOnce() -> Vec<f64>) {
        if ratio > self.ratio || (ratio.is_nan() && !self.ratio.is_nan()) {
            self.ratio = ratio;
            self.witness = witness();
        }
    }
}

fn quotient_ratio(diff: f64, dist: f64, declared: f64) -> f64 {
    if dist == 0.0 {
        return 0.0;
    }
    let q = diff / dist;
    if declared > 0.0 {
        q / declared
    } else if q <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn mat_diff_frobenius(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    mat_diff_frobenius(a, b)
}

/// Samples the standing assumptions on `region` and compares against the declared constants.
pub fn validate_assumptions(
    model: &ModelSpec,
    region: &SamplingBox,
    options: &ValidationOptions,
) -> Result<ValidationReport> {
    let n = model.dim_state();
    let m = model.dim_noise();
    if options.samples == 0 {
        return Err(invalid("sample_count must be >= 1"));
    }
    if region.lower.len() != n {
        return Err(invalid("sampling box dimension does not match the state dimension"));
    }
    let tol = options.tolerance;
    let width = region.width();
    let mut report = ValidationReport::default();
    let marks = model.levy.quadrature();

    // Pairs (x, y = x + d) with offsets spread log-uniformly over scales.
    let mut seq = Halton::new(2 * n + 2, options.seed);
    let (mut w_mu, mut w_sigma, mut w_f, mut w_j, mut w_ell) =
        (Worst::new(), Worst::new(), Worst::new(), Worst::new(), Worst::new());
    let c = model.constants;
    let (mut mx, mut my) = (vec![0.0; n], vec![0.0; n]);
    let (mut sx, mut sy) = (vec![0.0; n * m], vec![0.0; n * m]);
    let mut a = vec![0.0; n * n];
    for _ in 0..options.samples {
        let p = seq.next();
        let x: Vec<f64> = (0..n).map(|i| region.lower[i] + p[i] * (region.upper[i] - region.lower[i])).collect();
        let scale = width * 10f64.powf(-3.0 * p[2 * n]);
        let dir: Vec<f64> = (0..n).map(|i| 2.0 * p[n + i] - 1.0).collect();
        let dn = norm(&dir).max(1e-12);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + scale * di / dn).collect();
        let dist = vec_diff(&x, &y);
        let pair = || x.iter().chain(&y).copied().collect::<Vec<f64>>();

        model.drift(&x, &mut mx);
        model.drift(&y, &mut my);
        model.volatility(&x, &mut sx);
        model.volatility(&y, &mut sy);
        let (fx, fy) = (model.running_cost(&x), model.running_cost(&y));
        let finite = mx.iter().chain(&my).chain(&sx).chain(&sy).all(|v| v.is_finite())
            && fx.is_finite()
            && fy.is_finite();
        if !finite {
            report
                .hard_failures
                .push(format!("non-finite coefficient evaluation near x = {x:?}"));
            break;
        }
        w_mu.offer(quotient_ratio(vec_diff(&mx, &my), dist, c.drift_lipschitz), pair);
        w_sigma.offer(
            quotient_ratio(mat_diff_frobenius(&sx, &sy), dist, c.volatility_lipschitz),
            pair,
        );
        w_f.offer(quotient_ratio((fx - fy).abs(), dist, c.cost_lipschitz), pair);

        if !marks.is_empty() {
            let k = ((p[2 * n + 1] * marks.len() as f64) as usize).min(marks.len() - 1);
            let z = marks.mark(k);
            model.jump(&x, z, &mut mx);
            model.jump(&y, z, &mut my);
            if mx.iter().chain(&my).any(|v| !v.is_finite()) {
                report.hard_failures.push(format!("non-finite jump amplitude at x = {x:?}, z = {z:?}"));
                break;
            }
            let r = quotient_ratio(vec_diff(&mx, &my), dist, model.jump_lipschitz(z));
            w_j.offer(r, || pair().into_iter().chain(z.iter().copied()).collect());
        }

        model.diffusion(&x, &mut a);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a)).eigenvalues.min();
        let ratio = if eig > 0.0 { c.ellipticity / eig } else { f64::INFINITY };
        w_ell.offer(ratio, || x.clone());
    }

    let lip = |name, description, w: Worst| AssumptionCheck {
        name,
        description,
        passed: w.ratio <= 1.0 + tol,
        worst_ratio: w.ratio,
        witness: w.witness,
        detail: String::new(),
    };
    report.checks.push(lip("drift_lipschitz", "|mu(x)-mu(y)| <= C_mu |x-y|", w_mu));
    report
        .checks
        .push(lip("volatility_lipschitz", "|sigma(x)-sigma(y)| <= C_sigma |x-y|", w_sigma));
    report
        .checks
        .push(lip("running_cost_lipschitz", "|f(x)-f(y)| <= C_f |x-y|", w_f));
    report
        .checks
        .push(lip("jump_lipschitz", "|j(x,z)-j(y,z)| <= C_j(z) |x-y|", w_j));
    let mut ell = lip("ellipticity", "min eig A(x) >= lambda > 0", w_ell);
    if !(c.ellipticity > 0.0) {
        ell.passed = false;
        ell.detail = "declared lambda must be positive".into();
    }
    report.checks.push(ell);

    cost_checks(model, width, options, &mut report);

    let (ratio, passed, detail) = match model.growth_rate() {
        Ok(t) => (t / model.discount, t < model.discount, format!("margin r - C = {:.6}", model.discount - t)),
        Err(e) => (f64::INFINITY, false, e.to_string()),
    };
    report.checks.push(AssumptionCheck {
        name: "discount_dominance",
        description: "r > 2C_mu + C_sigma^2 + int C_j^2 dnu",
        passed,
        worst_ratio: ratio,
        witness: Vec::new(),
        detail,
    });
    Ok(report)
}

fn cost_checks(model: &ModelSpec, width: f64, options: &ValidationOptions, report: &mut ValidationReport) {
    let n = model.dim_state();
    let tol = options.tolerance;
    let cost = &model.cost;
    let k = cost.floor();
    let mut seq = Halton::new(2 * n, options.seed ^ 0x9e37_79b9);
    let samples = options.samples.min(20_000);
    let (mut floor_min, mut floor_witness) = (f64::INFINITY, Vec::new());
    let mut sub = Worst::new();
    let mut hard = None;
    for _ in 0..samples {
        let p = seq.next();
        // Displacements in [-width, width]^n; ξ = 0 is never queried.
        let a: Vec<f64> = p[..n].iter().map(|v| width * (2.0 * v - 1.0)).collect();
        let b: Vec<f64> = p[n..].iter().map(|v| width * (2.0 * v - 1.0)).collect();
        if norm(&a) == 0.0 || norm(&b) == 0.0 {
            continue;
        }
        let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ba, bb) = (cost.eval(&a), cost.eval(&b));
        if !ba.is_finite() || !bb.is_finite() {
            hard = Some(format!("non-finite transaction cost at xi = {a:?}"));
            break;
        }
        if ba < floor_min {
            floor_min = ba;
            floor_witness = a.clone();
        }
        if norm(&s) > 0.0 {
            let bs = cost.eval(&s);
            sub.offer((bs + k) / (ba + bb), || a.iter().chain(&b).copied().collect());
        }
    }
    if let Some(h) = hard {
        report.hard_failures.push(h);
    }
    let ratio = if floor_min > 0.0 { k / floor_min } else { f64::INFINITY };
    report.checks.push(AssumptionCheck {
        name: "cost_floor",
        description: "inf B = K > 0",
        passed: k > 0.0 && ratio <= 1.0 + tol,
        worst_ratio: ratio,
        witness: floor_witness,
        detail: format!("min sampled B = {floor_min:.6}"),
    });
    report.checks.push(AssumptionCheck {
        name: "cost_subadditivity",
        description: "B(a) + B(b) >= B(a+b) + K",
        passed: sub.ratio <= 1.0 + tol,
        worst_ratio: sub.ratio,
        witness: sub.witness,
        detail: String::new(),
    });

    // Minimum of B over spheres of growing radius must increase.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x5151);
    let dirs: Vec<Vec<f64>> = (0..64.max(8 * n))
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let l = norm(&v).max(1e-12);
            v.into_iter().map(|x| x / l).collect()
        })
        .collect();
    let sphere_min = |r: f64| {
        dirs.iter()
            .map(|d| cost.eval(&d.iter().map(|x| r * x).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min)
    };
    let radii: Vec<f64> = (0..10).map(|i| 0.25 * width.max(1.0) * 2f64.powi(i)).collect();
    let mins: Vec<f64> = radii.iter().map(|&r| sphere_min(r)).collect();
    let (mut worst, mut witness) = (0.0f64, Vec::new());
    for i in 1..mins.len() {
        let r = mins[i - 1] / mins[i];
        if r > worst {
            worst = r;
            witness = vec![radii[i - 1], radii[i]];
        }
    }
    report.checks.push(AssumptionCheck {
        name: "cost_coercivity",
        description: "min_{|xi|=R} B(xi) increases with R",
        passed: worst < 1.0,
        worst_ratio: worst,
        witness,
        detail: String::new(),
    });
}
