//! Models and grids shared by the integration tests.

#![allow(dead_code)]

pub mod oracle;

use impulse_qvi::grid::Grid;
use impulse_qvi::levy::{Atom, LevyMeasure};
use impulse_qvi::model::{CostB, ModelSpec};

pub struct Case {
    pub name: &'static str,
    pub model: ModelSpec,
    pub grid: Grid,
    /// Constants derived from the model families are the true Lipschitz constants.
    pub exact_constants: bool,
}

fn line(lo: f64, hi: f64, nodes: usize, margin: f64) -> Grid {
    Grid::cube(1, lo, hi, nodes, margin).unwrap()
}

fn square(half: f64, nodes: usize, margin: f64) -> Grid {
    Grid::cube(2, -half, half, nodes, margin).unwrap()
}

/// μ = 0, σ = √2, ν = δ₁, j = z, f = |x|, B = 1 + 0.1|ξ|, r = 1.
pub fn benchmark_model() -> ModelSpec {
    ModelSpec::builder(1, 1)
        .constant_volatility(vec![vec![2f64.sqrt()]])
        .unwrap()
        .additive_jump(vec![vec![1.0]])
        .unwrap()
        .levy(LevyMeasure::single_atom(vec![1.0], 1.0).unwrap())
        .norm_cost(1.0, vec![0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.1).unwrap())
        .discount(1.0)
        .build()
        .unwrap()
}

pub fn benchmark_grid() -> Grid {
    line(-8.0, 8.0, 257, 2.0)
}

pub fn benchmark() -> Case {
    Case {
        name: "benchmark",
        model: benchmark_model(),
        grid: benchmark_grid(),
        exact_constants: true,
    }
}

/// Infinite activity: ν(dz) = 0.5|z|^{-1.5} e^{-2|z|} dz.
pub fn tempered_model() -> ModelSpec {
    ModelSpec::builder(1, 1)
        .constant_volatility(vec![vec![1.0]])
        .unwrap()
        .additive_jump(vec![vec![1.0]])
        .unwrap()
        .levy(LevyMeasure::tempered(0.5, 0.5, 2.0).unwrap())
        .norm_cost(1.0, vec![0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.1).unwrap())
        .discount(1.0)
        .build()
        .unwrap()
}

pub fn matrix() -> Vec<Case> {
    let symmetric = ModelSpec::builder(1, 1)
        .affine_drift(vec![0.3], vec![vec![0.0]])
        .unwrap()
        .constant_volatility(vec![vec![1.0]])
        .unwrap()
        .additive_jump(vec![vec![1.0]])
        .unwrap()
        .levy(
            LevyMeasure::atoms(vec![
                Atom { mark: vec![0.5], intensity: 0.5 },
                Atom { mark: vec![-0.5], intensity: 0.5 },
            ])
            .unwrap(),
        )
        .norm_cost(1.0, vec![0.5])
        .unwrap()
        .transaction_cost(CostB::linear(0.5, 0.2).unwrap())
        .discount(1.0)
        .build()
        .unwrap();
    let exponential = ModelSpec::builder(1, 1)
        .constant_volatility(vec![vec![1.0]])
        .unwrap()
        .additive_jump(vec![vec![1.0]])
        .unwrap()
        .levy(LevyMeasure::exponential(1.0, 3.0).unwrap())
        .norm_cost(2.0, vec![0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.1).unwrap())
        .discount(1.5)
        .build()
        .unwrap();
    let affine = ModelSpec::builder(1, 1)
        .constant_volatility(vec![vec![1.0]])
        .unwrap()
        .affine_jump(vec![vec![1.0]], 0.2)
        .unwrap()
        .levy(LevyMeasure::single_atom(vec![0.5], 1.0).unwrap())
        .norm_cost(1.0, vec![0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.1).unwrap())
        .discount(1.0)
        .build()
        .unwrap();
    let atom_2d = ModelSpec::builder(2, 2)
        .constant_volatility(vec![vec![1.0, 0.0], vec![0.3, 0.8]])
        .unwrap()
        .additive_jump(vec![vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap()
        .levy(LevyMeasure::single_atom(vec![0.5, 0.5], 1.0).unwrap())
        .norm_cost(1.0, vec![0.0, 0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.1).unwrap())
        .discount(1.0)
        .build()
        .unwrap();
    let tempered_2d = ModelSpec::builder(2, 2)
        .constant_volatility(vec![vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap()
        .additive_jump(vec![vec![1.0], vec![0.5]])
        .unwrap()
        .levy(LevyMeasure::tempered(0.5, 0.5, 2.0).unwrap())
        .norm_cost(1.0, vec![0.0, 0.0])
        .unwrap()
        .transaction_cost(CostB::linear(1.0, 0.5).unwrap())
        .discount(1.0)
        .build()
        .unwrap();
    vec![
        benchmark(),
        Case { name: "symmetric_atoms_drift", model: symmetric, grid: line(-8.0, 8.0, 257, 2.0), exact_constants: true },
        Case { name: "tempered_alpha_0.5", model: tempered_model(), grid: line(-8.0, 8.0, 257, 3.0), exact_constants: true },
        Case { name: "exponential", model: exponential, grid: line(-8.0, 8.0, 257, 2.0), exact_constants: true },
        Case { name: "affine_jump", model: affine, grid: line(-8.0, 8.0, 257, 2.0), exact_constants: true },
        Case { name: "atom_2d", model: atom_2d, grid: square(6.0, 49, 1.5), exact_constants: true },
        Case { name: "tempered_2d", model: tempered_2d, grid: square(6.0, 49, 2.0), exact_constants: true },
    ]
}
