//! TOML experiment description: one file drives validate, solve, simulate and diagnose.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticSettings;
use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::levy::{Atom, DensityFamily, LevyMeasure, QuadratureRule};
use crate::model::{CostB, ModelSpec, SamplingBox, ValidationOptions};
use crate::simulate::SimulationConfig;
use crate::solver::SolverParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub levy: LevyConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    /// Brownian dimension; defaults to `dim`.
    pub noise_dim: Option<usize>,
    /// `μ(x) = drift_offset + drift_matrix·x`; zero when omitted.
    pub drift_offset: Option<Vec<f64>>,
    pub drift_matrix: Option<Vec<Vec<f64>>>,
    /// Constant part of `σ` (`dim × noise_dim`).
    pub volatility: Vec<Vec<f64>>,
    /// One `dim × noise_dim` matrix per state coordinate: `σ(x) = σ₀ + Σ x_k S_k`.
    pub volatility_slopes: Option<Vec<Vec<Vec<f64>>>>,
    /// `j(x, z) = J z + gain·min(|z|,1)·x`; `J` defaults to the identity.
    pub jump_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub jump_gain: f64,
    pub running_cost: RunningCostConfig,
    pub cost: CostConfig,
    pub discount: f64,
    pub ellipticity: Option<f64>,
    #[serde(default)]
    pub declared: DeclaredConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCostConfig {
    /// `scale·|x - center|`.
    Norm { scale: f64, center: Option<Vec<f64>> },
    Constant { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    /// `floor + slope·|ξ|`.
    Linear { floor: f64, slope: f64 },
    /// `floor + coef·|ξ|²`.
    Quadratic { floor: f64, coef: f64 },
}

/// Overrides for the family-derived Lipschitz constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredConfig {
    pub drift: Option<f64>,
    pub volatility: Option<f64>,
    pub cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LevyConfig {
    None {
        #[serde(default = "one")]
        mark_dim: usize,
    },
    Atoms {
        atoms: Vec<AtomConfig>,
    },
    Exponential {
        scale: f64,
        rate: f64,
        quadrature: Option<QuadratureConfig>,
    },
    Tempered {
        scale: f64,
        alpha: f64,
        rate: f64,
        quadrature: Option<QuadratureConfig>,
    },
}

fn one() -> usize {
    1
}

impl Default for LevyConfig {
    fn default() -> Self {
        LevyConfig::None { mark_dim: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub mark: Vec<f64>,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    pub panels: usize,
    pub points: usize,
    pub ratio: f64,
}

/// Axis data may be given once and broadcast to every axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub nodes: Vec<usize>,
    pub core_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Start point; the origin when omitted.
    pub x0: Option<Vec<f64>>,
    pub paths: usize,
    pub seed: u64,
    pub dt: f64,
    /// Default `40/r`.
    pub horizon: Option<f64>,
    pub small_jump_cutoff: f64,
    pub blow_up: f64,
    /// Number of leading paths written as per-event CSV logs.
    pub log_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            x0: None,
            paths: 10_000,
            seed: 0,
            dt: 0.01,
            horizon: None,
            small_jump_cutoff: 1e-2,
            blow_up: 1e8,
            log_paths: 0,
        }
    }
}

fn broadcast<T: Clone>(name: &str, v: &[T], dim: usize) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); dim]),
        l if l == dim => Ok(v.to_vec()),
        l => Err(invalid(format!("grid.{name} has {l} entries, expected 1 or {dim}"))),
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn levy_measure(&self) -> Result<LevyMeasure> {
        let rule = |q: &Option<QuadratureConfig>| {
            q.map_or_else(QuadratureRule::default, |q| QuadratureRule {
                panels: q.panels,
                points: q.points,
                ratio: q.ratio,
            })
        };
        match &self.levy {
            LevyConfig::None { mark_dim } => Ok(LevyMeasure::none(*mark_dim)),
            LevyConfig::Atoms { atoms } => LevyMeasure::atoms(
                atoms
                    .iter()
                    .map(|a| Atom {
                        mark: a.mark.clone(),
                        intensity: a.intensity,
                    })
                    .collect(),
            ),
            LevyConfig::Exponential { scale, rate, quadrature } => LevyMeasure::density(
                DensityFamily::Exponential {
                    scale: *scale,
                    rate: *rate,
                },
                rule(quadrature),
            ),
            LevyConfig::Tempered {
                scale,
                alpha,
                rate,
                quadrature,
            } => LevyMeasure::density(
                DensityFamily::TemperedPower {
                    scale: *scale,
                    alpha: *alpha,
                    rate: *rate,
                },
                rule(quadrature),
            ),
        }
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let n = m.dim;
        let noise = m.noise_dim.unwrap_or(n);
        let levy = self.levy_measure()?;
        let l = levy.mark_dim();
        let mut b = ModelSpec::builder(n, noise);
        if m.drift_offset.is_some() || m.drift_matrix.is_some() {
            let offset = m.drift_offset.clone().unwrap_or_else(|| vec![0.0; n]);
            let matrix = m.drift_matrix.clone().unwrap_or_else(|| vec![vec![0.0; n]; n]);
            b = b.affine_drift(offset, matrix)?;
        }
        b = match &m.volatility_slopes {
            Some(slopes) => b.affine_volatility(m.volatility.clone(), slopes.clone())?,
            None => b.constant_volatility(m.volatility.clone())?,
        };
        let jump = match &m.jump_matrix {
            Some(j) => j.clone(),
            None if l == n => (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
            None => return Err(invalid(format!("model.jump_matrix is required when marks ({l}) and states ({n}) differ"))),
        };
        b = if m.jump_gain != 0.0 {
            b.affine_jump(jump, m.jump_gain)?
        } else {
            b.additive_jump(jump)?
        };
        b = match &m.running_cost {
            RunningCostConfig::Norm { scale, center } => b.norm_cost(*scale, center.clone().unwrap_or_else(|| vec![0.0; n]))?,
            RunningCostConfig::Constant { value } => b.constant_running_cost(*value)?,
        };
        let cost = match m.cost {
            CostConfig::Linear { floor, slope } => CostB::linear(floor, slope)?,
            CostConfig::Quadratic { floor, coef } => CostB::quadratic(floor, coef)?,
        };
        b = b.levy(levy).transaction_cost(cost).discount(m.discount);
        if let Some(lambda) = m.ellipticity {
            b = b.ellipticity(lambda);
        }
        let d = &m.declared;
        if d.drift.is_some() || d.volatility.is_some() || d.cost.is_some() {
            b = b.declare_constants(d.drift, d.volatility, d.cost);
        }
        b.build()
    }

    /// Grid with `(nodes - 1)·scale + 1` nodes per axis (rounded).
    pub fn build_grid(&self, scale: f64) -> Result<Grid> {
        if !(scale > 0.0) {
            return Err(invalid("grid scale must be positive"));
        }
        let n = self.model.dim;
        let g = &self.grid;
        let nodes = broadcast("nodes", &g.nodes, n)?
            .into_iter()
            .map(|k| ((k.max(1) - 1) as f64 * scale).round() as usize + 1)
            .collect();
        Grid::new(broadcast("lower", &g.lower, n)?, broadcast("upper", &g.upper, n)?, nodes, g.core_margin)
    }

    /// Assumption checks sample the grid box.
    pub fn sampling_box(&self) -> Result<SamplingBox> {
        let n = self.model.dim;
        SamplingBox::new(broadcast("lower", &self.grid.lower, n)?, broadcast("upper", &self.grid.upper, n)?)
    }

    pub fn validation_options(&self) -> ValidationOptions {
        ValidationOptions::default()
    }

    pub fn simulation(&self, model: &ModelSpec) -> SimulationConfig {
        let s = &self.simulate;
        SimulationConfig {
            horizon: s.horizon.unwrap_or(40.0 / model.discount),
            dt: s.dt,
            small_jump_cutoff: s.small_jump_cutoff,
            blow_up: s.blow_up,
        }
    }

    pub fn x0(&self) -> Result<Vec<f64>> {
        let n = self.model.dim;
        match &self.simulate.x0 {
            None => Ok(vec![0.0; n]),
            Some(x) if x.len() == n => Ok(x.clone()),
            Some(x) => Err(invalid(format!("simulate.x0 has {} entries, expected {n}", x.len()))),
        }
    }
}
