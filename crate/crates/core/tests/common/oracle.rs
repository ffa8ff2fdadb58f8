//! Markov-chain value iteration for 1D constant-coefficient models with
//! node-aligned atoms, written against the upwind discretization directly.
//!
//! Interior node k of the chain: holding rate D = r + 2a/h² + |μ̄|/h + Σλ,
//! moves to k±1 with rates a/h² (+|μ̄|/h on the upwind side) and to
//! x_k + z_i with rate λ_i; targets past the box are valued by the clamp
//! extension `u_edge + C_u·dist`. The QVI is u = min(T u, 𝓜u) at interior
//! nodes and u = min(u₀, 𝓜u) at the two boundary nodes.

pub struct ChainModel {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
    pub drift: f64,
    pub sigma: f64,
    /// (mark, intensity); marks must be multiples of the spacing.
    pub atoms: Vec<(f64, f64)>,
    /// f(x) = cost_scale·|x - cost_center|.
    pub cost_scale: f64,
    pub cost_center: f64,
    /// B(ξ) = floor + slope·|ξ|.
    pub floor: f64,
    pub slope: f64,
    pub discount: f64,
    /// Extension slope for off-box targets.
    pub c_u: f64,
}

impl ChainModel {
    fn h(&self) -> f64 {
        (self.upper - self.lower) / (self.nodes - 1) as f64
    }

    fn x(&self, k: usize) -> f64 {
        self.lower + k as f64 * self.h()
    }

    fn f(&self, k: usize) -> f64 {
        self.cost_scale * (self.x(k) - self.cost_center).abs()
    }

    /// Value at node offset `k + s`, with the clamp extension off the box.
    fn at(&self, u: &[f64], k: usize, s: isize) -> f64 {
        let t = k as isize + s;
        let last = self.nodes as isize - 1;
        if t < 0 {
            u[0] + self.c_u * (-t) as f64 * self.h()
        } else if t > last {
            u[last as usize] + self.c_u * (t - last) as f64 * self.h()
        } else {
            u[t as usize]
        }
    }

    fn jumps(&self) -> Vec<(isize, f64)> {
        let h = self.h();
        self.atoms
            .iter()
            .map(|&(z, lam)| {
                let s = (z / h).round();
                assert!((s * h - z).abs() < 1e-12, "atom {z} is not on the lattice");
                (s as isize, lam)
            })
            .collect()
    }

    /// `T u` at interior node k: the continuation value of one chain step.
    fn step(&self, u: &[f64], k: usize, jumps: &[(isize, f64)]) -> f64 {
        let h = self.h();
        let a = 0.5 * self.sigma * self.sigma;
        let mu_bar = self.drift - self.atoms.iter().map(|(z, l)| z * l).sum::<f64>();
        let lam: f64 = self.atoms.iter().map(|a| a.1).sum();
        let (up, down) = if mu_bar >= 0.0 {
            (a / (h * h) + mu_bar / h, a / (h * h))
        } else {
            (a / (h * h), a / (h * h) - mu_bar / h)
        };
        let hold = self.discount + up + down + lam;
        let mut acc = self.f(k) + up * u[k + 1] + down * u[k - 1];
        for &(s, l) in jumps {
            acc += l * self.at(u, k, s);
        }
        acc / hold
    }

    fn intervene(&self, u: &[f64], k: usize) -> f64 {
        (0..self.nodes)
            .filter(|&j| j != k)
            .map(|j| u[j] + self.floor + self.slope * (self.x(j) - self.x(k)).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// No-intervention value, boundary `f/r`.
    pub fn no_intervention(&self, tol: f64) -> Vec<f64> {
        let jumps = self.jumps();
        let n = self.nodes;
        let mut u: Vec<f64> = (0..n).map(|k| self.f(k) / self.discount).collect();
        loop {
            let mut change: f64 = 0.0;
            for k in 1..n - 1 {
                let v = self.step(&u, k, &jumps);
                change = change.max((v - u[k]).abs());
                u[k] = v;
            }
            if change < tol {
                return u;
            }
        }
    }

    /// Gauss-Seidel value iteration for the QVI until a sweep changes u by < tol.
    pub fn solve(&self, tol: f64) -> Vec<f64> {
        let jumps = self.jumps();
        let n = self.nodes;
        let u0 = self.no_intervention(tol);
        let mut u = u0.clone();
        loop {
            let mut change: f64 = 0.0;
            for k in 0..n {
                let cont = if k == 0 || k == n - 1 { u0[k] } else { self.step(&u, k, &jumps) };
                let v = cont.min(self.intervene(&u, k));
                change = change.max((v - u[k]).abs());
                u[k] = v;
            }
            if change < tol {
                return u;
            }
        }
    }
}

pub fn benchmark_chain(nodes: usize) -> ChainModel {
    ChainModel {
        lower: -8.0,
        upper: 8.0,
        nodes,
        drift: 0.0,
        sigma: 2f64.sqrt(),
        atoms: vec![(1.0, 1.0)],
        cost_scale: 1.0,
        cost_center: 0.0,
        floor: 1.0,
        slope: 0.1,
        discount: 1.0,
        // C_f / (r - growth) = 1 / (1 - 0)
        c_u: 1.0,
    }
}

/// Drift 0.3, atoms ±0.5 with intensity 0.5 each, f = |x - 0.5|, B = 0.5 + 0.2|ξ|.
pub fn symmetric_chain(nodes: usize) -> ChainModel {
    ChainModel {
        drift: 0.3,
        sigma: 1.0,
        atoms: vec![(0.5, 0.5), (-0.5, 0.5)],
        cost_center: 0.5,
        floor: 0.5,
        slope: 0.2,
        ..benchmark_chain(nodes)
    }
}
