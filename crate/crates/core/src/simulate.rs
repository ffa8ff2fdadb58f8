//! Monte Carlo for the uncontrolled and impulse-controlled jump diffusion.
//!
//! Euler–Maruyama with compound-Poisson big jumps. The drift is compensated for
//! the simulated big jumps only, `μ - ∫_big j dν`; the compensated small-jump
//! martingale is dropped, which biases the state by at most `∫_small |j| dν`
//! per unit time (reported). Path `i` draws from ChaCha8 stream `i` of the seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::levy::{norm, small_jump_split, SmallJumpSplit};
use crate::model::ModelSpec;

/// Region policy: nearest-node classification, target-preserving displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPolicy {
    grid: Grid,
    action: Vec<bool>,
    xi: Vec<f64>,
}

impl RegionPolicy {
    pub fn new(grid: Grid, action: Vec<bool>, xi: Vec<f64>) -> Self {
        assert_eq!(action.len(), grid.len());
        assert_eq!(xi.len(), grid.len() * grid.dim());
        Self { grid, action, xi }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_action_node(&self, k: usize) -> bool {
        self.action[k]
    }

    pub fn action_nodes(&self) -> usize {
        self.action.iter().filter(|a| **a).count()
    }

    /// Node-level displacement `ξ*`.
    pub fn xi(&self, k: usize) -> &[f64] {
        let n = self.grid.dim();
        &self.xi[k * n..(k + 1) * n]
    }
}

/// Fires when `|x - center| > radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleRule {
    pub center: Vec<f64>,
    pub radius: f64,
    pub displacement: Displacement,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Displacement {
    /// Always the same `ξ`.
    Fixed(Vec<f64>),
    /// `ξ = target - x`.
    ToPoint(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImpulsePolicy {
    Region(RegionPolicy),
    /// First matching rule wins; an empty list never acts.
    Schedule(Vec<ScheduleRule>),
}

impl ImpulsePolicy {
    pub fn never() -> Self {
        ImpulsePolicy::Schedule(Vec::new())
    }

    /// Acts at `|x - center| > radius` by moving to `center`.
    pub fn reset_outside(center: Vec<f64>, radius: f64) -> Self {
        ImpulsePolicy::Schedule(vec![ScheduleRule {
            center: center.clone(),
            radius,
            displacement: Displacement::ToPoint(center),
        }])
    }

    /// Displacement to apply at `x`, if `x` lies in the action set.
    pub fn decide(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            ImpulsePolicy::Region(p) => {
                let k = p.grid.nearest(x);
                if !p.action[k] {
                    return None;
                }
                // Land exactly on the node target x_k + ξ*.
                let node = p.grid.point(k);
                Some((0..x.len()).map(|a| node[a] + p.xi(k)[a] - x[a]).collect())
            }
            ImpulsePolicy::Schedule(rules) => rules.iter().find_map(|r| {
                let d: Vec<f64> = x.iter().zip(&r.center).map(|(a, b)| a - b).collect();
                (norm(&d) > r.radius).then(|| match &r.displacement {
                    Displacement::Fixed(xi) => xi.clone(),
                    Displacement::ToPoint(t) => t.iter().zip(x).map(|(a, b)| a - b).collect(),
                })
            }),
        }
    }

    pub fn in_action(&self, x: &[f64]) -> bool {
        match self {
            ImpulsePolicy::Region(p) => p.action[p.grid.nearest(x)],
            ImpulsePolicy::Schedule(_) => self.decide(x).is_some(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Jumps with `|z| < cutoff` are dropped (compensated part only).
    pub small_jump_cutoff: f64,
    /// Abort when `|X|` exceeds this.
    pub blow_up: f64,
}

impl SimulationConfig {
    /// `T = 40/r` by default.
    pub fn for_model(model: &ModelSpec) -> Self {
        Self {
            horizon: 40.0 / model.discount,
            dt: 0.01,
            small_jump_cutoff: 1e-2,
            blow_up: 1e8,
        }
    }

    fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(invalid("simulation needs dt > 0 and horizon > 0"));
        }
        Ok((self.horizon / self.dt).round().max(1.0) as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: Vec<f64>,
    pub displacement: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseEvent {
    pub time: f64,
    pub pre_state: Vec<f64>,
    pub xi: Vec<f64>,
    /// Undiscounted `B(ξ)`.
    pub cost: f64,
}

/// One simulated path. `states[k]` is the post-impulse state at `times[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub dim: usize,
    pub dt: f64,
    pub discount: f64,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub diffusion_increments: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    pub impulses: Vec<ImpulseEvent>,
    /// `Σ_k f(X_k) ∫_{t_k}^{t_k+1} e^{-rt} dt`.
    pub running_cost: f64,
    /// `Σ_i e^{-rτ_i} B(ξ_i)`.
    pub impulse_cost: f64,
}

impl PathRecord {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.times.len() - 1)
    }

    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.impulse_cost
    }

    /// Recomputes the discounted cost from the stored states and impulses.
    pub fn replay_cost(&self, model: &ModelSpec) -> f64 {
        let r = self.discount;
        let mut running = 0.0;
        for k in 0..self.times.len() - 1 {
            running += model.running_cost(self.state(k)) * step_weight(r, self.times[k], self.dt);
        }
        let impulses: f64 = self
            .impulses
            .iter()
            .map(|i| (-r * i.time).exp() * model.cost.eval(&i.xi))
            .sum();
        running + impulses
    }

    /// One row per event: `kind,time,x...,extra...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";");
        writeln!(out, "kind,time,state,detail")?;
        for (k, t) in self.times.iter().enumerate() {
            writeln!(out, "step,{t},{},", join(self.state(k)))?;
        }
        for j in &self.jumps {
            writeln!(out, "jump,{},,mark={} displacement={}", j.time, join(&j.mark), join(&j.displacement))?;
        }
        for i in &self.impulses {
            writeln!(out, "impulse,{},{},xi={} cost={}", i.time, join(&i.pre_state), join(&i.xi), i.cost)?;
        }
        Ok(())
    }
}

/// `∫_t^{t+dt} e^{-rs} ds`.
fn step_weight(r: f64, t: f64, dt: f64) -> f64 {
    (-r * t).exp() * -(-r * dt).exp_m1() / r
}

/// Everything a path needs that does not depend on the path index.
struct Engine<'a> {
    model: &'a ModelSpec,
    split: SmallJumpSplit,
    cfg: SimulationConfig,
    steps: usize,
}

struct Outcome {
    cost: f64,
    impulses: usize,
    max_running: f64,
}

impl<'a> Engine<'a> {
    fn new(model: &'a ModelSpec, cfg: SimulationConfig) -> Result<Self> {
        let steps = cfg.steps()?;
        let split = small_jump_split(&model.levy, cfg.small_jump_cutoff)?;
        Ok(Self { model, split, cfg, steps })
    }

    fn rng(seed: u64, path: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        rng
    }

    /// `μ(x) - ∫_big j(x,z) ν(dz)`.
    fn drift(&self, x: &[f64], out: &mut [f64], buf: &mut [f64]) {
        self.model.drift(x, out);
        for (z, w) in self.split.big.quadrature().iter() {
            self.model.jump(x, z, buf);
            for (o, b) in out.iter_mut().zip(buf.iter()) {
                *o -= w * b;
            }
        }
    }

    fn run(&self, policy: &ImpulsePolicy, x0: &[f64], rng: &mut ChaCha8Rng, mut record: Option<&mut PathRecord>) -> Result<Outcome> {
        let model = self.model;
        let (n, m) = (model.dim_state(), model.dim_noise());
        let (r, dt) = (model.discount, self.cfg.dt);
        let sqdt = dt.sqrt();
        let mut x = x0.to_vec();
        let mut mu = vec![0.0; n];
        let mut buf = vec![0.0; n];
        let mut sigma = vec![0.0; n * m];
        let mut dw = vec![0.0; m];
        let mut mark = vec![0.0; model.dim_mark()];
        let mut out = Outcome {
            cost: 0.0,
            impulses: 0,
            max_running: 0.0,
        };
        let poisson = if self.split.big.mass() > 0.0 {
            Some(Poisson::new(self.split.big.mass() * dt).map_err(|e| invalid(format!("jump intensity: {e}")))?)
        } else {
            None
        };
        let constant_drift = model.jump_state_independent();
        if constant_drift {
            self.drift(&x, &mut mu, &mut buf);
        }
        let impulse = |t: f64, x: &mut Vec<f64>, out: &mut Outcome, record: &mut Option<&mut PathRecord>| -> Result<()> {
            if let Some(xi) = policy.decide(x) {
                let c = model.cost.eval(&xi);
                out.cost += (-r * t).exp() * c;
                out.impulses += 1;
                let pre = x.clone();
                for (a, d) in x.iter_mut().zip(&xi) {
                    *a += d;
                }
                if policy.in_action(x) {
                    return Err(Error::ImpulseLoop { time: t, state: x.clone() });
                }
                if let Some(rec) = record.as_deref_mut() {
                    rec.impulses.push(ImpulseEvent {
                        time: t,
                        pre_state: pre,
                        xi,
                        cost: c,
                    });
                }
            }
            Ok(())
        };
        impulse(0.0, &mut x, &mut out, &mut record)?;
        if let Some(rec) = record.as_deref_mut() {
            rec.times.push(0.0);
            rec.states.extend_from_slice(&x);
        }
        for k in 0..self.steps {
            let t = k as f64 * dt;
            let fx = model.running_cost(&x);
            out.max_running = out.max_running.max(fx.abs());
            out.cost += fx * step_weight(r, t, dt);
            if !constant_drift {
                self.drift(&x, &mut mu, &mut buf);
            }
            model.volatility(&x, &mut sigma);
            for w in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *w = sqdt * z;
            }
            let mut next: Vec<f64> = (0..n)
                .map(|i| x[i] + mu[i] * dt + (0..m).map(|j| sigma[i * m + j] * dw[j]).sum::<f64>())
                .collect();
            if let Some(p) = &poisson {
                let count: f64 = p.sample(rng);
                for _ in 0..count as usize {
                    let u: f64 = rand::Rng::random(rng);
                    self.split.big.sample_mark(rng, &mut mark);
                    model.jump(&x, &mark, &mut buf);
                    for (a, b) in next.iter_mut().zip(&buf) {
                        *a += b;
                    }
                    if let Some(rec) = record.as_deref_mut() {
                        rec.jumps.push(JumpEvent {
                            time: t + u * dt,
                            mark: mark.clone(),
                            displacement: buf.clone(),
                        });
                    }
                }
            }
            x = next;
            let size = norm(&x);
            if !(size <= self.cfg.blow_up) {
                return Err(Error::BlowUp { step: k + 1, norm: size });
            }
            let t_next = (k + 1) as f64 * dt;
            impulse(t_next, &mut x, &mut out, &mut record)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.times.push(t_next);
                rec.states.extend_from_slice(&x);
                rec.diffusion_increments.extend_from_slice(&dw);
            }
        }
        if let Some(rec) = record {
            rec.impulse_cost = rec.impulses.iter().map(|i| (-r * i.time).exp() * i.cost).sum();
            rec.running_cost = out.cost - rec.impulse_cost;
        }
        Ok(out)
    }

    fn record(&self, policy: &ImpulsePolicy, x0: &[f64], seed: u64) -> Result<PathRecord> {
        if x0.len() != self.model.dim_state() {
            return Err(invalid("initial state has the wrong dimension"));
        }
        let mut rec = PathRecord {
            dim: self.model.dim_state(),
            dt: self.cfg.dt,
            discount: self.model.discount,
            times: Vec::with_capacity(self.steps + 1),
            states: Vec::with_capacity((self.steps + 1) * x0.len()),
            diffusion_increments: Vec::new(),
            jumps: Vec::new(),
            impulses: Vec::new(),
            running_cost: 0.0,
            impulse_cost: 0.0,
        };
        self.run(policy, x0, &mut Self::rng(seed, 0), Some(&mut rec))?;
        Ok(rec)
    }
}

/// Path of the uncontrolled dynamics.
pub fn simulate_uncontrolled(model: &ModelSpec, x0: &[f64], cfg: &SimulationConfig, seed: u64) -> Result<PathRecord> {
    Engine::new(model, *cfg)?.record(&ImpulsePolicy::never(), x0, seed)
}

/// Path under `policy`; impulses are applied at step boundaries, at most one per step.
pub fn simulate_controlled(
    model: &ModelSpec,
    policy: &ImpulsePolicy,
    x0: &[f64],
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<PathRecord> {
    Engine::new(model, *cfg)?.record(policy, x0, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub j_hat: f64,
    /// 95% normal half-width.
    pub ci_halfwidth: f64,
    pub std_error: f64,
    pub n_paths: usize,
    /// `sup f / r · e^{-rT}` with the sup taken over visited states.
    pub truncation_bias: f64,
    /// `∫_{|z|<δ} |j(x0, z)| ν(dz)`, the drift error per unit time from dropped jumps.
    pub small_jump_bias: f64,
    pub mean_impulses: f64,
}

impl CostEstimate {
    /// Appends one row (seed, parameters, estimate, bias bounds) to a results CSV,
    /// writing the header when the file is new.
    pub fn append_results_csv(
        &self,
        path: &Path,
        label: &str,
        x0: &[f64],
        cfg: &SimulationConfig,
        seed: u64,
    ) -> Result<()> {
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if fresh {
            w.write_record([
                "policy",
                "seed",
                "x0",
                "n_paths",
                "horizon",
                "dt",
                "small_jump_cutoff",
                "j_hat",
                "ci_halfwidth",
                "std_error",
                "truncation_bias",
                "small_jump_bias",
                "mean_impulses",
            ])?;
        }
        let x0: Vec<String> = x0.iter().map(|v| v.to_string()).collect();
        w.write_record([
            label.to_string(),
            seed.to_string(),
            x0.join(";"),
            self.n_paths.to_string(),
            cfg.horizon.to_string(),
            cfg.dt.to_string(),
            cfg.small_jump_cutoff.to_string(),
            self.j_hat.to_string(),
            self.ci_halfwidth.to_string(),
            self.std_error.to_string(),
            self.truncation_bias.to_string(),
            self.small_jump_bias.to_string(),
            self.mean_impulses.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Sample mean of discounted path costs over `n_paths` independent paths.
pub fn estimate_cost(
    model: &ModelSpec,
    policy: &ImpulsePolicy,
    x0: &[f64],
    n_paths: usize,
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<CostEstimate> {
    if n_paths < 2 {
        return Err(invalid("estimate_cost needs at least 2 paths"));
    }
    if x0.len() != model.dim_state() {
        return Err(invalid("initial state has the wrong dimension"));
    }
    let engine = Engine::new(model, *cfg)?;
    let outcomes: Vec<Outcome> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| engine.run(policy, x0, &mut Engine::rng(seed, i), None))
        .collect::<Result<_>>()?;
    let n = n_paths as f64;
    let mean = outcomes.iter().map(|o| o.cost).sum::<f64>() / n;
    let var = outcomes.iter().map(|o| (o.cost - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let f_sup = outcomes.iter().map(|o| o.max_running).fold(0.0, f64::max);
    let r = model.discount;
    Ok(CostEstimate {
        j_hat: mean,
        ci_halfwidth: 1.96 * se,
        std_error: se,
        n_paths,
        truncation_bias: f_sup / r * (-r * cfg.horizon).exp(),
        small_jump_bias: engine.split.bias_bound(model, x0),
        mean_impulses: outcomes.iter().map(|o| o.impulses as f64).sum::<f64>() / n,
    })
}

/// `max_t E|X¹(t) - X²(t)| / (e^{Ct}|x1 - x2|)` over coupled uncontrolled paths,
/// `C = 2C_μ + C_σ² + ∫C_j² dν`.
pub fn paired_lipschitz_probe(
    model: &ModelSpec,
    x1: &[f64],
    x2: &[f64],
    n_paths: usize,
    cfg: &SimulationConfig,
    seed: u64,
) -> Result<f64> {
    if x1.len() != model.dim_state() || x2.len() != model.dim_state() {
        return Err(invalid("probe points have the wrong dimension"));
    }
    let gap0 = norm(&x1.iter().zip(x2).map(|(a, b)| a - b).collect::<Vec<_>>());
    if gap0 == 0.0 {
        return Err(invalid("paired probe needs x1 != x2"));
    }
    if n_paths == 0 {
        return Err(invalid("paired probe needs at least one path"));
    }
    let c = model.growth_rate()?;
    let engine = Engine::new(model, *cfg)?;
    let steps = engine.steps;
    // Fixed chunks summed in index order keep the result independent of scheduling.
    const CHUNK: u64 = 256;
    let chunks: Vec<Vec<f64>> = (0..(n_paths as u64).div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; steps + 1];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_paths as u64) {
                // Same stream for both starts: common Brownian increments, jump counts and marks.
                let a = coupled_gaps(&engine, x1, seed, i)?;
                let b = coupled_gaps(&engine, x2, seed, i)?;
                for (k, slot) in acc.iter_mut().enumerate() {
                    let d: Vec<f64> = a[k].iter().zip(&b[k]).map(|(p, q)| p - q).collect();
                    *slot += norm(&d);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; steps + 1];
    for c in &chunks {
        for (s, v) in sums.iter_mut().zip(c) {
            *s += v;
        }
    }
    let mut ratio: f64 = 0.0;
    for k in 0..=steps {
        let mean = sums[k] / n_paths as f64;
        let t = k as f64 * cfg.dt;
        ratio = ratio.max(mean / ((c * t).exp() * gap0));
    }
    Ok(ratio)
}

fn coupled_gaps(engine: &Engine, x0: &[f64], seed: u64, path: u64) -> Result<Vec<Vec<f64>>> {
    let mut rec = PathRecord {
        dim: x0.len(),
        dt: engine.cfg.dt,
        discount: engine.model.discount,
        times: Vec::new(),
        states: Vec::new(),
        diffusion_increments: Vec::new(),
        jumps: Vec::new(),
        impulses: Vec::new(),
        running_cost: 0.0,
        impulse_cost: 0.0,
    };
    engine.run(&ImpulsePolicy::never(), x0, &mut Engine::rng(seed, path), Some(&mut rec))?;
    Ok(rec.states.chunks(x0.len()).map(|c| c.to_vec()).collect())
}
