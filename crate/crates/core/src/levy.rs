//! Lévy measures, their quadrature, integrability certificates and the
//! small/big jump split used by the path simulator.
//!
//! A measure is either a finite list of atoms or a symmetric density on the
//! real line from one of two families:
//!
//! * exponential tails `c e^{-a|z|}`,
//! * tempered power `c |z|^{-(1+alpha)} e^{-a|z|}`.
//!
//! Densities are discretised by Gauss-Legendre rules on geometrically graded
//! panels that accumulate at `z = 0`, closed by a substitution panel
//! `z = z_lo t^p` which absorbs the power singularity. Every consumer
//! (the nonlocal operator, certificates, simulation) sees the measure through
//! the same [`Quadrature`] so the discrete problem is one well-defined object.

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Largest mass the compound-Poisson part of a split may carry.
const MAX_BIG_MASS: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub mark: Vec<f64>,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityFamily {
    /// `scale * e^{-rate |z|}`.
    Exponential { scale: f64, rate: f64 },
    /// `scale * |z|^{-(1+alpha)} e^{-rate |z|}`.
    TemperedPower { scale: f64, alpha: f64, rate: f64 },
}

impl DensityFamily {
    pub fn density(&self, z: f64) -> f64 {
        let r = z.abs();
        match *self {
            DensityFamily::Exponential { scale, rate } => scale * (-rate * r).exp(),
            DensityFamily::TemperedPower { scale, alpha, rate } => {
                scale * r.powf(-(1.0 + alpha)) * (-rate * r).exp()
            }
        }
    }

    fn rate(&self) -> f64 {
        match *self {
            DensityFamily::Exponential { rate, .. } | DensityFamily::TemperedPower { rate, .. } => rate,
        }
    }

    /// Exponent `alpha` of the singularity; the exponential family behaves like `alpha = -1`.
    pub fn singularity(&self) -> f64 {
        match *self {
            DensityFamily::Exponential { .. } => -1.0,
            DensityFamily::TemperedPower { alpha, .. } => alpha,
        }
    }

    /// Power of the substitution `z = z_lo t^p` used on the innermost panel.
    fn substitution_power(&self) -> f64 {
        let alpha = self.singularity();
        if alpha > 0.0 && alpha < 1.0 {
            1.0 / (1.0 - alpha)
        } else {
            1.0
        }
    }

    /// Truncation point of the exponential tail.
    fn tail_cutoff(&self) -> f64 {
        40.0 / self.rate()
    }
}

/// Panel layout of the density quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureRule {
    /// Geometric panels per sign (the substitution panel comes on top).
    pub panels: usize,
    /// Gauss-Legendre points per panel.
    pub points: usize,
    /// Ratio between consecutive panel edges, in (0, 1).
    pub ratio: f64,
}

impl Default for QuadratureRule {
    /// 31 graded panels + 1 substitution panel, 8 points each: 256 nodes per sign.
    fn default() -> Self {
        Self {
            panels: 31,
            points: 8,
            ratio: 0.5,
        }
    }
}

/// Discrete weights against the measure: `∫ g dν ≈ Σ w_k g(z_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    dim: usize,
    marks: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            marks: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn push(&mut self, mark: &[f64], weight: f64) {
        debug_assert_eq!(mark.len(), self.dim);
        self.marks.extend_from_slice(mark);
        self.weights.push(weight);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mark(&self, k: usize) -> &[f64] {
        &self.marks[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.marks
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn sum<F: FnMut(&[f64]) -> f64>(&self, mut g: F) -> f64 {
        self.iter().map(|(z, w)| w * g(z)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Atoms(Vec<Atom>),
    Density {
        family: DensityFamily,
        rule: QuadratureRule,
    },
}

/// The Lévy measure ν together with its base quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyMeasure {
    kind: Kind,
    nodes: Quadrature,
}

/// Value and error estimate of a quadrature against ν.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
}

impl LevyMeasure {
    /// The zero measure on marks of dimension `dim`.
    pub fn none(dim: usize) -> Self {
        Self {
            kind: Kind::Atoms(Vec::new()),
            nodes: Quadrature::new(dim),
        }
    }

    pub fn atoms(atoms: Vec<Atom>) -> Result<Self> {
        let dim = atoms
            .first()
            .map(|a| a.mark.len())
            .ok_or_else(|| Error::InvalidInput("atom list is empty".into()))?;
        let mut nodes = Quadrature::new(dim);
        for a in &atoms {
            if a.mark.len() != dim {
                return Err(Error::InvalidInput("atoms have inconsistent mark dimension".into()));
            }
            if !(a.intensity > 0.0) || !a.intensity.is_finite() {
                return Err(Error::InvalidInput(format!("atom intensity {} must be positive", a.intensity)));
            }
            if a.mark.iter().any(|z| !z.is_finite()) {
                return Err(Error::InvalidInput("atom mark is not finite".into()));
            }
            nodes.push(&a.mark, a.intensity);
        }
        Ok(Self {
            kind: Kind::Atoms(atoms),
            nodes,
        })
    }

    /// Single atom `intensity * δ_{mark}`.
    pub fn single_atom(mark: Vec<f64>, intensity: f64) -> Result<Self> {
        Self::atoms(vec![Atom { mark, intensity }])
    }

    pub fn density(family: DensityFamily, rule: QuadratureRule) -> Result<Self> {
        let (scale, rate) = match family {
            DensityFamily::Exponential { scale, rate } => (scale, rate),
            DensityFamily::TemperedPower { scale, alpha, rate } => {
                if !(alpha > -1.0 && alpha < 2.0) {
                    return Err(Error::InvalidInput(format!("tempered alpha {alpha} outside (-1, 2)")));
                }
                (scale, rate)
            }
        };
        if !(scale > 0.0) || !(rate > 0.0) {
            return Err(Error::InvalidInput("density scale and rate must be positive".into()));
        }
        if rule.panels == 0 || rule.points == 0 || !(rule.ratio > 0.0 && rule.ratio < 1.0) {
            return Err(Error::InvalidInput("quadrature rule needs panels, points >= 1 and ratio in (0,1)".into()));
        }
        let nodes = density_nodes(&family, &rule, 0);
        Ok(Self {
            kind: Kind::Density { family, rule },
            nodes,
        })
    }

    pub fn exponential(scale: f64, rate: f64) -> Result<Self> {
        Self::density(DensityFamily::Exponential { scale, rate }, QuadratureRule::default())
    }

    pub fn tempered(scale: f64, alpha: f64, rate: f64) -> Result<Self> {
        Self::density(
            DensityFamily::TemperedPower { scale, alpha, rate },
            QuadratureRule::default(),
        )
    }

    pub fn mark_dim(&self) -> usize {
        self.nodes.dim
    }

    pub fn is_finite_atoms(&self) -> bool {
        matches!(self.kind, Kind::Atoms(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(&self.kind, Kind::Atoms(a) if a.is_empty())
    }

    pub fn family(&self) -> Option<DensityFamily> {
        match &self.kind {
            Kind::Density { family, .. } => Some(*family),
            Kind::Atoms(_) => None,
        }
    }

    pub fn atom_list(&self) -> Option<&[Atom]> {
        match &self.kind {
            Kind::Atoms(a) => Some(a),
            Kind::Density { .. } => None,
        }
    }

    /// Base quadrature used by the nonlocal operator.
    pub fn quadrature(&self) -> &Quadrature {
        &self.nodes
    }

    /// ν(ℝˡ), or `None` for infinite activity.
    pub fn total_mass(&self) -> Option<f64> {
        match &self.kind {
            Kind::Atoms(a) => Some(a.iter().map(|a| a.intensity).sum()),
            Kind::Density { family, .. } => match *family {
                DensityFamily::Exponential { scale, rate } => Some(2.0 * scale / rate),
                DensityFamily::TemperedPower { alpha, .. } if alpha >= 0.0 => None,
                DensityFamily::TemperedPower { .. } => self.integrate(|_| 1.0).ok().map(|i| i.value),
            },
        }
    }

    /// `∫ g dν`. Atoms are summed exactly; densities use the base and the
    /// doubled rule, the difference being the error estimate. A third,
    /// quadrupled rule guards against integrands that are not integrable at
    /// `z = 0`.
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut g: F) -> Result<Integral> {
        match &self.kind {
            Kind::Atoms(atoms) => {
                let mut value = 0.0;
                for a in atoms {
                    let v = g(&a.mark);
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            what: "integrand".into(),
                            location: a.mark.clone(),
                        });
                    }
                    value += a.intensity * v;
                }
                Ok(Integral { value, error: 0.0 })
            }
            Kind::Density { family, rule } => {
                let q0 = self.nodes.sum(&mut g);
                let q1 = density_nodes(family, rule, 1).sum(&mut g);
                let q2 = density_nodes(family, rule, 2).sum(&mut g);
                let d1 = (q1 - q0).abs();
                let d2 = (q2 - q1).abs();
                let growing = d2 > 0.5 * d1 && d2 > 1e-6 * q2.abs().max(1.0);
                if !q0.is_finite() || !q1.is_finite() || !q2.is_finite() || growing {
                    return Err(Error::Divergent {
                        condition: "integrand in L1(nu)".into(),
                        detail: format!("quadrature grows under refinement: {q0:.6e}, {q1:.6e}, {q2:.6e}"),
                    });
                }
                Ok(Integral { value: q1, error: d1 })
            }
        }
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j as f64 + 1.0) * z * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Positive-half nodes of a graded rule on `[lo, hi]` (geometric panels) and
/// optionally a substitution panel on `[0, lo]`.
fn half_line(
    family: &DensityFamily,
    hi: f64,
    panels: usize,
    ratio: f64,
    points: usize,
    close_at_zero: bool,
    out: &mut Vec<(f64, f64)>,
) {
    let (gx, gw) = gauss_legendre(points);
    let mut upper = hi;
    for _ in 0..panels {
        let lower = upper * ratio;
        let half = 0.5 * (upper - lower);
        let mid = 0.5 * (upper + lower);
        for (t, w) in gx.iter().zip(&gw) {
            let z = mid + half * t;
            out.push((z, w * half * family.density(z)));
        }
        upper = lower;
    }
    if close_at_zero {
        let lo = upper;
        let p = family.substitution_power();
        for (t, w) in gx.iter().zip(&gw) {
            let s = 0.5 * (t + 1.0);
            let z = lo * s.powf(p);
            let jac = 0.5 * p * lo * s.powf(p - 1.0);
            out.push((z, w * jac * family.density(z)));
        }
    }
}

/// Graded rule on `[a, b]`, `0 < a < b`, panels refined geometrically toward `a`.
fn interval(family: &DensityFamily, a: f64, b: f64, points: usize, ratio: f64, out: &mut Vec<(f64, f64)>) {
    let panels = ((a / b).ln() / ratio.ln()).ceil().max(1.0) as usize;
    let (gx, gw) = gauss_legendre(points);
    // Edges b, b*q, ..., clipped at a.
    let mut upper = b;
    for k in 0..panels {
        let lower = if k + 1 == panels { a } else { (upper * ratio).max(a) };
        let half = 0.5 * (upper - lower);
        let mid = 0.5 * (upper + lower);
        for (t, w) in gx.iter().zip(&gw) {
            let z = mid + half * t;
            out.push((z, w * half * family.density(z)));
        }
        upper = lower;
    }
}

/// Symmetric density nodes at refinement level `level` (node count doubles per level).
fn density_nodes(family: &DensityFamily, rule: &QuadratureRule, level: u32) -> Quadrature {
    let panels = (rule.panels + 1) * (1usize << level) - 1;
    let mut half = Vec::new();
    half_line(family, family.tail_cutoff(), panels, rule.ratio, rule.points, true, &mut half);
    let mut q = Quadrature::new(1);
    for &(z, w) in half.iter().rev() {
        q.push(&[-z], w);
    }
    for &(z, w) in &half {
        q.push(&[z], w);
    }
    q
}

/// Outcome of one certificate in [`check_integrability`].
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub name: &'static str,
    pub value: f64,
    pub error: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub certificates: Vec<Certificate>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.certificates.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Certificate> {
        self.certificates.iter().find(|c| c.name == name)
    }
}

fn certificate(name: &'static str, result: Result<Integral>) -> Certificate {
    match result {
        Ok(i) => Certificate {
            name,
            value: i.value,
            error: i.error,
            passed: i.value.is_finite(),
            detail: String::new(),
        },
        Err(e) => Certificate {
            name,
            value: f64::INFINITY,
            error: f64::INFINITY,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Certificates `∫C_j dν`, `∫C_j² dν` and `max_x ∫|j(x,z)| dν(z)` over `sample_x`.
pub fn check_integrability(measure: &LevyMeasure, model: &ModelSpec, sample_x: &[Vec<f64>]) -> CertificateReport {
    let mut certificates = vec![
        certificate("int_cj", measure.integrate(|z| model.jump_lipschitz(z))),
        certificate("int_cj_squared", measure.integrate(|z| model.jump_lipschitz(z).powi(2))),
    ];
    let n = model.dim_state();
    let mut buf = vec![0.0; n];
    let mut worst = Certificate {
        name: "int_abs_jump",
        value: 0.0,
        error: 0.0,
        passed: true,
        detail: String::new(),
    };
    for x in sample_x {
        let c = certificate(
            "int_abs_jump",
            measure.integrate(|z| {
                model.jump(x, z, &mut buf);
                norm(&buf)
            }),
        );
        if !c.passed {
            worst = Certificate {
                detail: format!("at x = {x:?}: {}", c.detail),
                ..c
            };
            break;
        }
        if c.value > worst.value {
            worst = Certificate {
                detail: format!("worst at x = {x:?}"),
                ..c
            };
        }
    }
    certificates.push(worst);
    CertificateReport { certificates }
}

/// Mark sampler for the finite big-jump part.
#[derive(Debug, Clone)]
enum MarkSampler {
    Atoms { cumulative: Vec<f64>, marks: Vec<Vec<f64>> },
    Tail { cutoff: f64, rate: f64, alpha: f64 },
    Empty,
}

/// Compound-Poisson part `ν|_{|z| ≥ δ}`.
#[derive(Debug, Clone)]
pub struct BigJumps {
    mass: f64,
    sampler: MarkSampler,
    nodes: Quadrature,
}

impl BigJumps {
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Quadrature of the big part, used for its compensator.
    pub fn quadrature(&self) -> &Quadrature {
        &self.nodes
    }

    /// Draws a mark from the normalised big measure.
    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match &self.sampler {
            MarkSampler::Atoms { cumulative, marks } => {
                let total = *cumulative.last().unwrap_or(&0.0);
                let u = rng.random::<f64>() * total;
                let k = cumulative.partition_point(|&c| c <= u).min(marks.len() - 1);
                out.copy_from_slice(&marks[k]);
            }
            MarkSampler::Tail { cutoff, rate, alpha } => {
                let exp = Exp::new(*rate).expect("positive rate");
                let z = loop {
                    let z = cutoff + exp.sample(rng);
                    // Accept with probability (δ/z)^{1+α} ≤ 1.
                    if *alpha <= -1.0 || rng.random::<f64>() < (cutoff / z).powf(1.0 + alpha) {
                        break z;
                    }
                };
                out[0] = if rng.random::<bool>() { z } else { -z };
            }
            MarkSampler::Empty => out.iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

/// Split of ν at cutoff δ into a finite big-jump part and the dropped small jumps.
#[derive(Debug, Clone)]
pub struct SmallJumpSplit {
    pub cutoff: f64,
    pub big: BigJumps,
    small: Quadrature,
}

impl SmallJumpSplit {
    /// `-∫_{|z|<δ} j(x,z) ν(dz)`.
    pub fn drift_correction(&self, model: &ModelSpec, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![0.0; x.len()];
        for (z, w) in self.small.iter() {
            model.jump(x, z, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o -= w * b;
            }
        }
    }

    /// `∫_{|z|<δ} |j(x,z)| ν(dz)`, the bias scale of dropping the small jumps.
    pub fn bias_bound(&self, model: &ModelSpec, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; x.len()];
        self.small.sum(|z| {
            model.jump(x, z, &mut buf);
            norm(&buf)
        })
    }

    /// Mass of the dropped part as seen by the quadrature (infinite activity shows up as large).
    pub fn small_quadrature(&self) -> &Quadrature {
        &self.small
    }
}

/// Splits ν at `cutoff` into `ν|_{|z|≥δ}` (finite, sampled exactly) and the small remainder.
pub fn small_jump_split(measure: &LevyMeasure, cutoff: f64) -> Result<SmallJumpSplit> {
    if !(cutoff > 0.0) {
        return Err(Error::InvalidInput(format!("small-jump cutoff {cutoff} must be positive")));
    }
    let dim = measure.mark_dim();
    match &measure.kind {
        Kind::Atoms(atoms) => {
            let mut big = Quadrature::new(dim);
            let mut small = Quadrature::new(dim);
            let mut cumulative = Vec::new();
            let mut marks = Vec::new();
            let mut acc = 0.0;
            for a in atoms {
                if norm(&a.mark) >= cutoff {
                    big.push(&a.mark, a.intensity);
                    acc += a.intensity;
                    cumulative.push(acc);
                    marks.push(a.mark.clone());
                } else {
                    small.push(&a.mark, a.intensity);
                }
            }
            let sampler = if marks.is_empty() {
                MarkSampler::Empty
            } else {
                MarkSampler::Atoms { cumulative, marks }
            };
            Ok(SmallJumpSplit {
                cutoff,
                big: BigJumps {
                    mass: acc,
                    sampler,
                    nodes: big,
                },
                small,
            })
        }
        Kind::Density { family, rule } => {
            let top = family.tail_cutoff();
            let mut big_half = Vec::new();
            if cutoff < top {
                interval(family, cutoff, top, rule.points, rule.ratio, &mut big_half);
            }
            let mut small_half = Vec::new();
            half_line(
                family,
                cutoff.min(top),
                rule.panels,
                rule.ratio,
                rule.points,
                true,
                &mut small_half,
            );
            let mut big = Quadrature::new(1);
            let mut small = Quadrature::new(1);
            for (half, q) in [(&big_half, &mut big), (&small_half, &mut small)] {
                for &(z, w) in half.iter().rev() {
                    q.push(&[-z], w);
                }
                for &(z, w) in half.iter() {
                    q.push(&[z], w);
                }
            }
            let mass = big.total_weight();
            if !mass.is_finite() || mass > MAX_BIG_MASS {
                return Err(Error::Divergent {
                    condition: "finite big-jump mass".into(),
                    detail: format!("mass of |z| >= {cutoff} is {mass:.3e}; raise the cutoff"),
                });
            }
            Ok(SmallJumpSplit {
                cutoff,
                big: BigJumps {
                    mass,
                    sampler: MarkSampler::Tail {
                        cutoff,
                        rate: family.rate(),
                        alpha: family.singularity(),
                    },
                    nodes: big,
                },
                small,
            })
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
