//! Discrete optimal transport: marginals, ground costs, an exact
//! transportation-simplex solver, and row-stochastic plan normalization.
//!
//! Solved in f64 so the LP optimum is crisp even though model weights are f32.

use crate::error::{Error, Result};

const MARGINAL_TOL: f64 = 1e-6;
const REDUCED_COST_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input("empty distribution".into()));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::Input("distribution weights must be finite and >= 0".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("distribution sums to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionMode {
    Uniform,
    /// importance / sum(importance)
    SumNormalized,
    /// softmax(importance), max-subtracted
    Softmax,
}

/// Build a source or target marginal from optional importance scores.
///
/// `degenerate_fallback` controls what an all-zero importance sum does in
/// sum-normalized mode: error (default expectation) or uniform fallback.
pub fn make_distribution(
    n: usize,
    importance: Option<&[f32]>,
    mode: DistributionMode,
    degenerate_fallback: bool,
) -> Result<DiscreteDistribution> {
    match mode {
        DistributionMode::Uniform => Ok(DiscreteDistribution::uniform(n)),
        DistributionMode::SumNormalized | DistributionMode::Softmax => {
            let imp = importance.ok_or_else(|| {
                Error::Input("importance-informed distribution requires scores".into())
            })?;
            if imp.len() != n {
                return Err(Error::Input(format!(
                    "importance length {} vs distribution size {n}",
                    imp.len()
                )));
            }
            let vals: Vec<f64> = imp.iter().map(|&v| v as f64).collect();
            let weights: Vec<f64> = if mode == DistributionMode::Softmax {
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / sum).collect()
            } else {
                let sum: f64 = vals.iter().sum();
                if sum <= 0.0 {
                    if degenerate_fallback {
                        return Ok(DiscreteDistribution::uniform(n));
                    }
                    return Err(Error::Degenerate(
                        "importance sums to zero; cannot sum-normalize".into(),
                    ));
                }
                vals.into_iter().map(|v| v / sum).collect()
            };
            // renormalize away accumulated rounding
            let sum: f64 = weights.iter().sum();
            DiscreteDistribution::new(weights.into_iter().map(|w| w / sum).collect())
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub n: usize,
    pub m: usize,
    /// row-major n×m
    pub c: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, m: usize, c: Vec<f64>) -> Result<Self> {
        if c.len() != n * m {
            return Err(Error::Input(format!("cost matrix length {} vs {n}x{m}", c.len())));
        }
        if c.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Input("cost entries must be finite and >= 0".into()));
        }
        Ok(Self { n, m, c })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.m + j]
    }
}

/// ℓ1 ground cost between source and target vectors, divided by its maximum
/// entry (all-zero matrices are left as zeros). Positive scaling leaves the
/// LP argmin unchanged.
pub fn cost_matrix(sources: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<CostMatrix> {
    let n = sources.len();
    let m = targets.len();
    if n == 0 || m == 0 {
        return Err(Error::Input("empty source or target set".into()));
    }
    let dim = sources[0].len();
    for v in sources.iter().chain(targets.iter()) {
        if v.len() != dim {
            return Err(Error::Input(format!(
                "pairing vector length {} vs {dim}",
                v.len()
            )));
        }
    }
    let mut c = Vec::with_capacity(n * m);
    for a in sources {
        for b in targets {
            let d: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum();
            c.push(d);
        }
    }
    let max = c.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut c {
            *v /= max;
        }
    }
    CostMatrix::new(n, m, c)
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub n: usize,
    pub m: usize,
    /// row-major n×m
    pub t: Vec<f64>,
    pub objective: f64,
    pub mu: DiscreteDistribution,
    pub nu: DiscreteDistribution,
}

impl TransportPlan {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.m + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.t[i * self.m..(i + 1) * self.m].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.m)
            .map(|j| (0..self.n).map(|i| self.at(i, j)).sum())
            .collect()
    }
}

/// Row-stochastic fusion coefficients: row `t` holds the source weights of
/// fused pairing `t` and sums to 1.
#[derive(Debug, Clone)]
pub struct NormalizedTransport {
    pub m: usize,
    pub n: usize,
    /// row-major m×n
    pub rows: Vec<f64>,
}

impl NormalizedTransport {
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.rows[t * self.n + j]
    }
}

/// Exact optimum of `min <T,C>` s.t. `T 1 = mu`, `T' 1 = nu`, `T >= 0`,
/// by the transportation simplex with Bland-style lowest-index tie-breaking.
pub fn solve_ot(
    mu: &DiscreteDistribution,
    nu: &DiscreteDistribution,
    cost: &CostMatrix,
) -> Result<TransportPlan> {
    let n = mu.len();
    let m = nu.len();
    if cost.n != n || cost.m != m {
        return Err(Error::Input(format!(
            "cost matrix {}x{} vs marginals {n}/{m}",
            cost.n, cost.m
        )));
    }
    let sum_mu: f64 = mu.weights().iter().sum();
    let sum_nu: f64 = nu.weights().iter().sum();
    if (sum_mu - sum_nu).abs() > MARGINAL_TOL {
        return Err(Error::Input(format!(
            "marginal sums differ: {sum_mu} vs {sum_nu}"
        )));
    }

    // northwest-corner initial basis: a monotone staircase of n+m-1 cells
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(n + m - 1);
    {
        let mut a = mu.weights().to_vec();
        let mut b = nu.weights().to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let f = a[i].min(b[j]);
            basis.push((i, j));
            flow.push(f);
            a[i] -= f;
            b[j] -= f;
            if i == n - 1 && j == m - 1 {
                break;
            }
            if a[i] <= 1e-15 && i < n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    let max_iters = 1000 + 20 * (n + m) * (n + m).max(10);
    for _ in 0..max_iters {
        // duals from the basis tree: u_i + v_j = c_ij on basic cells
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut changed = true;
        while changed {
            changed = false;
            for (k, &(i, j)) in basis.iter().enumerate() {
                let _ = k;
                if u[i].is_nan() && !v[j].is_nan() {
                    u[i] = cost.at(i, j) - v[j];
                    changed = true;
                } else if !u[i].is_nan() && v[j].is_nan() {
                    v[j] = cost.at(i, j) - u[i];
                    changed = true;
                }
            }
        }
        debug_assert!(u.iter().all(|x| !x.is_nan()) && v.iter().all(|x| !x.is_nan()));

        // Bland: first cell (row-major) with negative reduced cost enters
        let mut entering = None;
        'scan: for i in 0..n {
            for j in 0..m {
                if basis.contains(&(i, j)) {
                    continue;
                }
                if cost.at(i, j) - u[i] - v[j] < -REDUCED_COST_TOL {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let (ei, ej) = match entering {
            Some(e) => e,
            None => break,
        };

        // unique tree path from row ei to col ej; nodes: rows 0..n, cols n..n+m
        let nodes = n + m;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes]; // (neighbor, basis idx)
        for (k, &(i, j)) in basis.iter().enumerate() {
            adj[i].push((n + j, k));
            adj[n + j].push((i, k));
        }
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes]; // (parent node, via basis idx)
        let mut visited = vec![false; nodes];
        let mut queue = vec![ei];
        visited[ei] = true;
        let mut head = 0;
        while head < queue.len() {
            let x = queue[head];
            head += 1;
            for &(y, k) in &adj[x] {
                if !visited[y] {
                    visited[y] = true;
                    parent[y] = Some((x, k));
                    queue.push(y);
                }
            }
        }
        // walk back from col ej to row ei collecting the path's basis cells
        let mut path = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let (p, k) = parent[node].expect("basis graph is a spanning tree");
            path.push(k);
            node = p;
        }
        // cycle signs: entering is +, path cells alternate -, +, -, ...
        let minus: Vec<usize> = path.iter().copied().step_by(2).collect();
        let plus: Vec<usize> = path.iter().copied().skip(1).step_by(2).collect();

        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for &k in &minus {
            if flow[k] < theta - 1e-15 {
                theta = flow[k];
                leaving = k;
            }
        }
        for &k in &plus {
            flow[k] += theta;
        }
        for &k in &minus {
            flow[k] -= theta;
        }
        basis[leaving] = (ei, ej);
        flow[leaving] = theta;
    }

    let mut t = vec![0.0f64; n * m];
    for (k, &(i, j)) in basis.iter().enumerate() {
        t[i * m + j] += flow[k];
    }
    let objective = t
        .iter()
        .zip(&cost.c)
        .map(|(&f, &c)| f * c)
        .sum();
    Ok(TransportPlan {
        n,
        m,
        t,
        objective,
        mu: mu.clone(),
        nu: nu.clone(),
    })
}

/// `M = diag(1/nu) · T'`: row `t` of `M` is column `t` of the plan divided by
/// its target mass, so every row sums to 1.
pub fn normalize_transport(plan: &TransportPlan) -> Result<NormalizedTransport> {
    let mut rows = vec![0.0f64; plan.m * plan.n];
    for t in 0..plan.m {
        let mass = plan.nu.weights()[t];
        if mass <= 1e-12 {
            return Err(Error::Degenerate(format!(
                "target {t} has zero mass; cannot normalize"
            )));
        }
        for j in 0..plan.n {
            rows[t * plan.n + j] = plan.at(j, t) / mass;
        }
    }
    Ok(NormalizedTransport {
        m: plan.m,
        n: plan.n,
        rows,
    })
}
