//! Rectangular grids and grid-sampled scalar fields.
//!
//! Nodes are stored with axis 0 varying fastest. Off-grid evaluation is
//! multilinear inside the box; outside it follows the field's [`Extension`].

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    core_margin: f64,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>, core_margin: f64) -> Result<Self> {
        let n = lower.len();
        if n == 0 || upper.len() != n || nodes.len() != n {
            return Err(invalid("grid bounds and node counts must have the same nonzero length"));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(invalid("grid needs finite lower < upper on every axis"));
        }
        if let Some(&k) = nodes.iter().find(|&&k| k < 3) {
            return Err(Error::GridTooSmall(format!("{k} nodes on an axis; at least 3 are required")));
        }
        if !(core_margin >= 0.0) {
            return Err(invalid("core margin must be >= 0"));
        }
        let spacing: Vec<f64> = (0..n).map(|a| (upper[a] - lower[a]) / (nodes[a] - 1) as f64).collect();
        let mut strides = vec![1; n];
        for a in 1..n {
            strides[a] = strides[a - 1] * nodes[a - 1];
        }
        let grid = Self {
            lower,
            upper,
            nodes,
            spacing,
            strides,
            core_margin,
        };
        if grid.core_nodes().is_empty() {
            return Err(Error::GridTooSmall(format!(
                "no interior node lies at distance >= {core_margin} from the boundary"
            )));
        }
        Ok(grid)
    }

    /// Uniform grid on `[lower, upper]^dim`.
    pub fn cube(dim: usize, lower: f64, upper: f64, nodes: usize, core_margin: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], vec![nodes; dim], core_margin)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn h_min(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn core_margin(&self) -> f64 {
        self.core_margin
    }

    /// Grid with `factor` times as many cells per axis.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(
            self.lower.clone(),
            self.upper.clone(),
            self.nodes.iter().map(|k| (k - 1) * factor + 1).collect(),
            self.core_margin,
        )
    }

    pub fn index(&self, axis: usize, flat: usize) -> usize {
        (flat / self.strides[axis]) % self.nodes[axis]
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coord(&self, flat: usize, axis: usize) -> f64 {
        self.lower[axis] + self.index(axis, flat) as f64 * self.spacing[axis]
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(flat, a)).collect()
    }

    pub fn point_into(&self, flat: usize, out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.coord(flat, a);
        }
    }

    /// Neighbour `flat ± e_axis`, if inside the grid.
    pub fn neighbor(&self, flat: usize, axis: usize, step: isize) -> Option<usize> {
        let i = self.index(axis, flat) as isize + step;
        if i < 0 || i >= self.nodes[axis] as isize {
            None
        } else {
            Some((flat as isize + step * self.strides[axis] as isize) as usize)
        }
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        (0..self.dim()).any(|a| {
            let i = self.index(a, flat);
            i == 0 || i + 1 == self.nodes[a]
        })
    }

    /// Interior node at distance at least `core_margin` from every face.
    pub fn is_core(&self, flat: usize) -> bool {
        !self.is_boundary(flat)
            && (0..self.dim()).all(|a| {
                let x = self.coord(flat, a);
                let slack = 1e-9 * self.spacing[a];
                x - self.lower[a] >= self.core_margin - slack && self.upper[a] - x >= self.core_margin - slack
            })
    }

    pub fn core_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_core(k)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lower[a] && v <= self.upper[a])
    }

    /// Node nearest to `x` after clamping into the box.
    pub fn nearest(&self, x: &[f64]) -> usize {
        (0..self.dim())
            .map(|a| {
                let s = ((x[a] - self.lower[a]) / self.spacing[a]).round();
                s.clamp(0.0, (self.nodes[a] - 1) as f64) as usize * self.strides[a]
            })
            .sum()
    }

    /// Multi-index of the lattice point `x` if it coincides (to rounding) with a node.
    pub fn node_at(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for a in 0..self.dim() {
            let s = (x[a] - self.lower[a]) / self.spacing[a];
            let r = s.round();
            if (s - r).abs() > 1e-9 || r < 0.0 || r > (self.nodes[a] - 1) as f64 {
                return None;
            }
            flat += r as usize * self.strides[a];
        }
        Some(flat)
    }

    fn describe(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
        format!(
            "dim={} lower={} upper={} nodes={} core_margin={}",
            self.dim(),
            join(&self.lower),
            join(&self.upper),
            self.nodes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
            self.core_margin
        )
    }
}

/// Rule for evaluating a field outside its box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Extension {
    /// `φ(proj x) + slope·dist(x, box)`; `slope = 0` is the conservative clamp.
    LipschitzClamp { slope: f64 },
    /// Multilinear extrapolation from the boundary cell.
    LinearExtrapolation,
}

impl fmt::Display for Extension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extension::LipschitzClamp { slope } => write!(f, "lipschitz_clamp:{slope}"),
            Extension::LinearExtrapolation => write!(f, "linear_extrapolation"),
        }
    }
}

impl std::str::FromStr for Extension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "linear_extrapolation" {
            return Ok(Extension::LinearExtrapolation);
        }
        match s.split_once(':') {
            Some(("lipschitz_clamp", v)) => v
                .parse()
                .map(|slope| Extension::LipschitzClamp { slope })
                .map_err(|_| Error::Parse(format!("bad clamp slope `{v}`"))),
            None if s == "lipschitz_clamp" => Ok(Extension::LipschitzClamp { slope: 0.0 }),
            _ => Err(Error::Parse(format!("unknown extension `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
    extension: Extension,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>, extension: Extension) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!("{} values for a grid of {} nodes", values.len(), grid.len())));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "field value".into(),
                location: grid.point(k),
            });
        }
        Ok(Self {
            grid,
            values,
            extension,
        })
    }

    pub fn from_fn<F: FnMut(&[f64]) -> f64>(grid: &Grid, extension: Extension, mut f: F) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|k| {
                grid.point_into(k, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid.clone(), values, extension)
    }

    pub fn constant(grid: &Grid, value: f64, extension: Extension) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![value; grid.len()],
            extension,
        }
    }

    /// Same grid and extension, new values (unchecked length).
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            grid: self.grid.clone(),
            values,
            extension: self.extension,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    pub fn set_extension(&mut self, extension: Extension) {
        self.extension = extension;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn oscillation(&self) -> f64 {
        self.max() - self.min()
    }

    /// Largest `|φ(x + h e_a) - φ(x)| / h` over adjacent node pairs; `core_only`
    /// restricts to pairs with both ends in the core.
    pub fn lipschitz_constant(&self, core_only: bool) -> f64 {
        let g = &self.grid;
        let mut best: f64 = 0.0;
        for k in 0..g.len() {
            if core_only && !g.is_core(k) {
                continue;
            }
            for a in 0..g.dim() {
                if let Some(j) = g.neighbor(k, a, 1) {
                    if core_only && !g.is_core(j) {
                        continue;
                    }
                    best = best.max((self.values[j] - self.values[k]).abs() / g.spacing[a]);
                }
            }
        }
        best
    }

    /// `max_k |self_k - other_k|`.
    pub fn distance(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Evaluates the field at an arbitrary point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let g = &self.grid;
        match self.extension {
            Extension::LipschitzClamp { slope } => {
                let mut dist2 = 0.0;
                let mut cell = [0usize; 8];
                let mut t = [0.0f64; 8];
                let n = g.dim();
                for a in 0..n {
                    let p = x[a].clamp(g.lower[a], g.upper[a]);
                    dist2 += (x[a] - p) * (x[a] - p);
                    let s = (p - g.lower[a]) / g.spacing[a];
                    let i = (s.floor().max(0.0) as usize).min(g.nodes[a] - 2);
                    cell[a] = i;
                    t[a] = s - i as f64;
                }
                let v = self.multilinear(&cell[..n], &t[..n]);
                if dist2 > 0.0 {
                    v + slope * dist2.sqrt()
                } else {
                    v
                }
            }
            Extension::LinearExtrapolation => {
                let n = g.dim();
                let mut cell = [0usize; 8];
                let mut t = [0.0f64; 8];
                for a in 0..n {
                    let s = (x[a] - g.lower[a]) / g.spacing[a];
                    let i = s.floor().clamp(0.0, (g.nodes[a] - 2) as f64) as usize;
                    cell[a] = i;
                    t[a] = s - i as f64;
                }
                self.multilinear(&cell[..n], &t[..n])
            }
        }
    }

    fn multilinear(&self, cell: &[usize], t: &[f64]) -> f64 {
        let g = &self.grid;
        let base: usize = cell.iter().zip(&g.strides).map(|(i, s)| i * s).sum();
        if cell.len() == 1 {
            let (a, b) = (self.values[base], self.values[base + 1]);
            return if t[0] == 0.0 { a } else { a + t[0] * (b - a) };
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << cell.len()) {
            let mut w = 1.0;
            let mut idx = base;
            for (a, ta) in t.iter().enumerate() {
                if corner >> a & 1 == 1 {
                    w *= ta;
                    idx += g.strides[a];
                } else {
                    w *= 1.0 - ta;
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    /// Writes the field as CSV: a `# grid ...` metadata line, a column header and one row per node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "# grid {} extension={}", self.grid.describe(), self.extension)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.grid.dim()).map(|a| format!("x{a}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.grid.point(k).iter().map(|x| format!("{x}")).collect();
            row.push(format!("{v}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let (grid, extension) = parse_metadata(first.trim())?;
        let mut r = csv::Reader::from_reader(reader);
        let mut values = Vec::with_capacity(grid.len());
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != grid.dim() + 1 {
                return Err(Error::Parse(format!("row {k} has {} columns", rec.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}` in row {k}")));
            for a in 0..grid.dim() {
                let x = parse(&rec[a])?;
                if k < grid.len() && (x - grid.coord(k, a)).abs() > 1e-9 * grid.spacing[a] {
                    return Err(Error::Parse(format!("row {k} does not match the grid node")));
                }
            }
            values.push(parse(&rec[grid.dim()])?);
        }
        Self::new(grid, values, extension)
    }
}

fn parse_metadata(line: &str) -> Result<(Grid, Extension)> {
    let body = line
        .strip_prefix("# grid ")
        .ok_or_else(|| Error::Parse("missing `# grid` metadata line".into()))?;
    let mut fields = std::collections::HashMap::new();
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad metadata item `{kv}`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Parse(format!("metadata lacks `{k}`")));
    let floats = |s: &str| -> Result<Vec<f64>> {
        s.split(';')
            .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
            .collect()
    };
    let nodes: Vec<usize> = get("nodes")?
        .split(';')
        .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad node count `{v}`"))))
        .collect::<Result<_>>()?;
    let margin: f64 = get("core_margin")?
        .parse()
        .map_err(|_| Error::Parse("bad core_margin".into()))?;
    let grid = Grid::new(floats(get("lower")?)?, floats(get("upper")?)?, nodes, margin)?;
    let extension = get("extension")?.parse()?;
    Ok((grid, extension))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tiny_or_degenerate_grids_are_rejected() {
        assert!(matches!(Grid::cube(1, 0.0, 1.0, 2, 0.0), Err(Error::GridTooSmall(_))));
        assert!(matches!(Grid::cube(1, 0.0, 1.0, 3, 0.6), Err(Error::GridTooSmall(_))));
        assert!(Grid::cube(1, 0.0, 1.0, 3, 0.5).is_ok());
        assert!(Grid::cube(1, 1.0, 0.0, 5, 0.0).is_err());
    }

    #[test]
    fn core_excludes_collar() {
        let g = Grid::cube(1, -2.0, 2.0, 9, 1.0).unwrap();
        let core: Vec<f64> = g.core_nodes().iter().map(|&k| g.coord(k, 0)).collect();
        assert_eq!(core, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn bilinear_is_exact_on_bilinear_functions() {
        let g = Grid::cube(2, -1.0, 1.0, 5, 0.0).unwrap();
        let f = ScalarField::from_fn(&g, Extension::LinearExtrapolation, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]).unwrap();
        for p in [[0.13, -0.71], [0.9, 0.95], [-1.5, 0.2], [2.0, 3.0]] {
            let exact = 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1];
            assert!((f.eval(&p) - exact).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn clamp_extension_adds_slope_times_distance() {
        let g = Grid::cube(1, 0.0, 1.0, 11, 0.0).unwrap();
        let f = ScalarField::from_fn(&g, Extension::LipschitzClamp { slope: 2.0 }, |x| x[0]).unwrap();
        assert!((f.eval(&[1.5]) - 2.0).abs() < 1e-14);
        assert!((f.eval(&[-0.25]) - 0.5).abs() < 1e-14);
        let mut c = f.clone();
        c.set_extension(Extension::LipschitzClamp { slope: 0.0 });
        assert_eq!(c.eval(&[7.0]), 1.0);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let g = Grid::new(vec![-1.0, 0.0], vec![1.0, 3.0], vec![4, 5], 0.5).unwrap();
        let f = ScalarField::from_fn(&g, Extension::LipschitzClamp { slope: 1.25 }, |x| (x[0] * 3.3).sin() / 7.0 + x[1].exp()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        f.write_csv(&p).unwrap();
        let back = ScalarField::read_csv(&p).unwrap();
        assert_eq!(back, f);
    }

    proptest! {
        #[test]
        fn interpolation_reproduces_node_values(vals in proptest::collection::vec(-100.0f64..100.0, 7), k in 0usize..7) {
            let g = Grid::cube(1, -3.0, 3.0, 7, 0.0).unwrap();
            let f = ScalarField::new(g.clone(), vals.clone(), Extension::LipschitzClamp { slope: 0.0 }).unwrap();
            prop_assert!((f.eval(&g.point(k)) - vals[k]).abs() <= 1e-12 * vals[k].abs().max(1.0));
        }

        #[test]
        fn interpolation_never_exceeds_lipschitz_constant(vals in proptest::collection::vec(-10.0f64..10.0, 9), a in -4.0f64..4.0, b in -4.0f64..4.0) {
            let g = Grid::cube(1, -4.0, 4.0, 9, 0.0).unwrap();
            let f = ScalarField::new(g, vals, Extension::LipschitzClamp { slope: 0.0 }).unwrap();
            let lip = f.lipschitz_constant(false);
            prop_assert!((f.eval(&[a]) - f.eval(&[b])).abs() <= lip * (a - b).abs() + 1e-9);
        }
    }
}
