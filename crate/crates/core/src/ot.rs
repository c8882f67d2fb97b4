//! Optimal transport between discrete measures.
//!
//! Three solvers share the same cost representation:
//!
//! * [`exact_wasserstein`] solves the Kantorovich linear program exactly by
//!   successive shortest augmenting paths. Small instances only; it is the
//!   reference the approximate solvers are checked against.
//! * [`sinkhorn`] runs log-domain Sinkhorn iterations on the dual potentials
//!   until the marginals match, and reports the entropic objective
//!   `⟨π, C⟩ + ε Σ π log π`.
//! * [`sinkhorn_unrolled_grad`] / [`sinkhorn_batch_grad`] run a fixed number of
//!   iterations and differentiate through them in reverse, giving the gradient
//!   of the entropic objective with respect to the second measure's weights.
//!
//! Potentials follow the convention `π_ij = exp((f_i + g_j − C_ij) / ε)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest support handled by [`exact_wasserstein`].
pub const EXACT_MAX_SUPPORT: usize = 64;

/// Tolerance on the total mass of a probability vector.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Above this value of `max C / ε` the Gibbs kernel `exp(−C/ε)` would underflow,
/// and log-sum-exps are evaluated entry by entry instead of through the kernel.
const FACTORED_LIMIT: f64 = 500.0;

/// Floor applied to predicted weights before taking logarithms.
const MIN_WEIGHT: f64 = 1e-300;

/// A probability vector over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    support: Vec<usize>,
}

impl DiscreteMeasure {
    /// Measure on atoms `0..weights.len()`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let support = (0..weights.len()).collect();
        Self::with_support(weights, support)
    }

    /// Measure whose atom `k` sits on item/point `support[k]`.
    pub fn with_support(weights: Vec<f64>, support: Vec<usize>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("measure has no atoms".into()));
        }
        if weights.len() != support.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} support points",
                weights.len(),
                support.len()
            )));
        }
        if let Some((k, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidArgument(format!("weight {k} is {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(DiscreteMeasure { weights, support })
    }

    /// Uniform weights over `0..n`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::uniform_over((0..n).collect())
    }

    /// Uniform weights over the given support, e.g. a user's clicked items.
    pub fn uniform_over(support: Vec<usize>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Empty("measure has no atoms".into()));
        }
        let w = 1.0 / support.len() as f64;
        Self::with_support(vec![w; support.len()], support)
    }

    pub fn dirac(at: usize) -> Self {
        DiscreteMeasure {
            weights: vec![1.0],
            support: vec![at],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Nonnegative finite matrix of ground costs between two supports.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some((k, v)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            let (i, j) = (k / values.cols().max(1), k % values.cols().max(1));
            return Err(Error::InvalidArgument(format!("cost ({i},{j}) is {v}")));
        }
        Ok(CostMatrix(values))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(Matrix::from_fn(rows, cols, f))
    }

    /// All-zero cost.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CostMatrix(Matrix::zeros(rows, cols))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn max(&self) -> f64 {
        self.0.data().iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix(self.0.transpose())
    }

    pub fn scaled(&self, factor: f64) -> Result<CostMatrix> {
        CostMatrix::new(self.0.map(|v| v * factor))
    }

    /// Sub-matrix on the given row and column indices.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> CostMatrix {
        CostMatrix(Matrix::from_fn(rows.len(), cols.len(), |a, b| {
            self.0.get(rows[a], cols[b])
        }))
    }

    /// Sub-matrix on the given rows, all columns.
    pub fn restrict_rows(&self, rows: &[usize]) -> CostMatrix {
        CostMatrix(self.0.select_rows(rows))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.rows();
        n == self.cols()
            && (0..n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

fn check_dims(p: &DiscreteMeasure, q: &DiscreteMeasure, c: &CostMatrix) -> Result<()> {
    if c.rows() != p.len() || c.cols() != q.len() {
        return Err(Error::shape("cost vs measures", c.matrix().shape(), (p.len(), q.len())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Exact solver
// ---------------------------------------------------------------------------

/// Optimal coupling and its cost, from [`exact_plan`].
#[derive(Clone, Debug)]
pub struct ExactSolution {
    pub value: f64,
    pub plan: Matrix,
}

/// Exact Wasserstein cost `min_π ⟨π, C⟩` over couplings of `p` and `q`.
pub fn exact_wasserstein(p: &DiscreteMeasure, q: &DiscreteMeasure, c: &CostMatrix) -> Result<f64> {
    exact_plan(p, q, c).map(|s| s.value)
}

/// Solves the transport LP as a min-cost flow with successive shortest paths.
///
/// Each augmentation pushes mass along a cheapest residual path from a source
/// with remaining supply to a sink with remaining demand; shortest paths are
/// computed with Bellman–Ford since reverse residual edges carry negative costs.
pub fn exact_plan(p: &DiscreteMeasure, q: &DiscreteMeasure, c: &CostMatrix) -> Result<ExactSolution> {
    check_dims(p, q, c)?;
    let (m, n) = (p.len(), q.len());
    if m > EXACT_MAX_SUPPORT || n > EXACT_MAX_SUPPORT {
        return Err(Error::OversizeInstance {
            rows: m,
            cols: n,
            max: EXACT_MAX_SUPPORT,
        });
    }
    const MASS_TOL: f64 = 1e-14;
    let scale = c.max().max(1.0);
    let relax_tol = 1e-12 * scale;

    let mut supply = p.weights().to_vec();
    let mut demand = q.weights().to_vec();
    let mut flow = Matrix::zeros(m, n);
    let nodes = m + n;
    let mut dist = vec![f64::INFINITY; nodes];
    let mut pred = vec![usize::MAX; nodes];

    // bounded by the number of basis changes; the cap only guards float pathologies
    for _ in 0..(4 * nodes * nodes + 16) {
        let remaining: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
        if remaining <= MASS_TOL * (m + n) as f64 {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        pred.iter_mut().for_each(|p| *p = usize::MAX);
        for i in 0..m {
            if supply[i] > MASS_TOL {
                dist[i] = 0.0;
            }
        }
        // Bellman-Ford over the bipartite residual graph
        for _ in 0..nodes {
            let mut changed = false;
            for i in 0..m {
                if dist[i].is_finite() {
                    for j in 0..n {
                        let nd = dist[i] + c.get(i, j);
                        if nd < dist[m + j] - relax_tol {
                            dist[m + j] = nd;
                            pred[m + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..n {
                if dist[m + j].is_finite() {
                    for i in 0..m {
                        if flow.get(i, j) > MASS_TOL {
                            let nd = dist[m + j] - c.get(i, j);
                            if nd < dist[i] - relax_tol {
                                dist[i] = nd;
                                pred[i] = m + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(sink) = (0..n)
            .filter(|&j| demand[j] > MASS_TOL && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
        else {
            break;
        };

        // walk back to the originating source, collecting the bottleneck
        let mut amount = demand[sink];
        let mut node = m + sink;
        let mut path = Vec::new();
        loop {
            let prev = pred[node];
            if prev == usize::MAX {
                amount = amount.min(supply[node]);
                break;
            }
            if node >= m {
                path.push((prev, node - m, true));
            } else {
                let j = prev - m;
                amount = amount.min(flow.get(node, j));
                path.push((node, j, false));
            }
            node = prev;
            if path.len() > 2 * nodes {
                return Err(Error::NonFinite("exact solver: cyclic predecessor chain".into()));
            }
        }
        let source = node;
        if amount <= 0.0 {
            break;
        }
        for (i, j, forward) in path {
            let cur = flow.get(i, j);
            flow.set(i, j, if forward { cur + amount } else { (cur - amount).max(0.0) });
        }
        supply[source] -= amount;
        demand[sink] -= amount;
    }

    let value = flow
        .data()
        .iter()
        .zip(c.matrix().data())
        .map(|(f, cc)| f * cc)
        .sum();
    Ok(ExactSolution { value, plan: flow })
}

// ---------------------------------------------------------------------------
// Log-domain kernel
// ---------------------------------------------------------------------------

/// Log-sum-exp reductions of `(potential − C) / ε` along rows or columns.
///
/// When `exp(−C/ε)` is representable the kernel is precomputed and each
/// reduction shifts the potential by its maximum, so only `O(rows + cols)`
/// exponentials are needed per call. Otherwise every entry is shifted by its
/// own row/column maximum.
pub(crate) struct LogKernel<'a> {
    cost: &'a [f64],
    rows: usize,
    cols: usize,
    eps: f64,
    gibbs: Option<Vec<f64>>,
}

impl<'a> LogKernel<'a> {
    pub(crate) fn new(cost: &'a CostMatrix, eps: f64) -> Self {
        let max = cost.max();
        let gibbs = (max / eps <= FACTORED_LIMIT).then(|| {
            cost.matrix()
                .data()
                .iter()
                .map(|c| (-c / eps).exp())
                .collect()
        });
        LogKernel {
            cost: cost.matrix().data(),
            rows: cost.rows(),
            cols: cost.cols(),
            eps,
            gibbs,
        }
    }

    /// `out_i = LSE_j (g_j − C_ij)/ε`
    pub(crate) fn row_lse(&self, g: &[f64], out: &mut [f64]) {
        let (n, eps) = (self.cols, self.eps);
        match &self.gibbs {
            Some(k) => {
                let mg = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let eg: Vec<f64> = g.iter().map(|v| ((v - mg) / eps).exp()).collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let krow = &k[i * n..(i + 1) * n];
                    let s: f64 = krow.iter().zip(&eg).map(|(a, b)| a * b).sum();
                    *o = mg / eps + s.ln();
                }
            }
            None => {
                for (i, o) in out.iter_mut().enumerate() {
                    let crow = &self.cost[i * n..(i + 1) * n];
                    let mx = crow
                        .iter()
                        .zip(g)
                        .map(|(c, gv)| (gv - c) / eps)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = crow
                        .iter()
                        .zip(g)
                        .map(|(c, gv)| ((gv - c) / eps - mx).exp())
                        .sum();
                    *o = mx + s.ln();
                }
            }
        }
    }

    /// `out_j = LSE_i (f_i − C_ij)/ε`
    pub(crate) fn col_lse(&self, f: &[f64], out: &mut [f64]) {
        let (n, eps) = (self.cols, self.eps);
        match &self.gibbs {
            Some(k) => {
                let mf = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut acc = vec![0.0; n];
                for (i, fv) in f.iter().enumerate() {
                    let w = ((fv - mf) / eps).exp();
                    if w == 0.0 {
                        continue;
                    }
                    for (a, kv) in acc.iter_mut().zip(&k[i * n..(i + 1) * n]) {
                        *a += w * kv;
                    }
                }
                for (o, s) in out.iter_mut().zip(acc) {
                    *o = mf / eps + s.ln();
                }
            }
            None => {
                let mut mx = vec![f64::NEG_INFINITY; n];
                for i in 0..self.rows {
                    for j in 0..n {
                        mx[j] = mx[j].max((f[i] - self.cost[i * n + j]) / eps);
                    }
                }
                let mut acc = vec![0.0; n];
                for i in 0..self.rows {
                    for j in 0..n {
                        acc[j] += ((f[i] - self.cost[i * n + j]) / eps - mx[j]).exp();
                    }
                }
                for j in 0..n {
                    out[j] = mx[j] + acc[j].ln();
                }
            }
        }
    }

    /// Row-wise softmax of `(g_j − C_ij)/ε`, row-major `rows × cols`.
    pub(crate) fn row_softmax(&self, g: &[f64]) -> Vec<f64> {
        let (n, eps) = (self.cols, self.eps);
        let mut out = vec![0.0; self.rows * n];
        match &self.gibbs {
            Some(k) => {
                let mg = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let eg: Vec<f64> = g.iter().map(|v| ((v - mg) / eps).exp()).collect();
                for i in 0..self.rows {
                    let row = &mut out[i * n..(i + 1) * n];
                    let mut s = 0.0;
                    for ((o, kv), e) in row.iter_mut().zip(&k[i * n..(i + 1) * n]).zip(&eg) {
                        *o = kv * e;
                        s += *o;
                    }
                    row.iter_mut().for_each(|o| *o /= s);
                }
            }
            None => {
                for i in 0..self.rows {
                    let row = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        row[j] = (g[j] - self.cost[i * n + j]) / eps;
                    }
                    crate::numerics::softmax_in_place(row);
                }
            }
        }
        out
    }

    /// Column-wise softmax of `(f_i − C_ij)/ε`, row-major `rows × cols`.
    pub(crate) fn col_softmax(&self, f: &[f64]) -> Vec<f64> {
        let (n, eps) = (self.cols, self.eps);
        let mut out = vec![0.0; self.rows * n];
        match &self.gibbs {
            Some(k) => {
                let mf = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..self.rows {
                    let w = ((f[i] - mf) / eps).exp();
                    for j in 0..n {
                        out[i * n + j] = w * k[i * n + j];
                    }
                }
            }
            None => {
                let mut mx = vec![f64::NEG_INFINITY; n];
                for i in 0..self.rows {
                    for j in 0..n {
                        mx[j] = mx[j].max((f[i] - self.cost[i * n + j]) / eps);
                    }
                }
                for i in 0..self.rows {
                    for j in 0..n {
                        out[i * n + j] = ((f[i] - self.cost[i * n + j]) / eps - mx[j]).exp();
                    }
                }
            }
        }
        let mut sums = vec![0.0; n];
        for row in out.chunks_exact(n) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        for row in out.chunks_exact_mut(n) {
            for (v, s) in row.iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        out
    }

    /// `π_ij = exp((f_i + g_j − C_ij)/ε)`
    pub(crate) fn plan(&self, f: &[f64], g: &[f64]) -> Matrix {
        let n = self.cols;
        Matrix::from_fn(self.rows, n, |i, j| {
            ((f[i] + g[j] - self.cost[i * n + j]) / self.eps).exp()
        })
    }
}

/// `⟨π, C⟩` and `⟨π, C⟩ + ε Σ π log π` for a plan given by its potentials.
fn entropic_value(plan: &Matrix, cost: &[f64], f: &[f64], g: &[f64]) -> (f64, f64) {
    let n = plan.cols();
    let mut transport = 0.0;
    let mut total = 0.0;
    for i in 0..plan.rows() {
        for j in 0..n {
            let p = plan.get(i, j);
            if p > 0.0 {
                let c = cost[i * n + j];
                transport += p * c;
                // ε log π_ij = f_i + g_j − C_ij
                total += p * (f[i] + g[j]);
            }
        }
    }
    (transport, total)
}

// ---------------------------------------------------------------------------
// Sinkhorn
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 1.0,
            max_iter: 500,
            marginal_tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornConfig {
            epsilon,
            ..Default::default()
        }
    }
}

/// One entry of the iteration trace, recorded after each full (f, g) sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornStep {
    /// Entropic objective of the current plan.
    pub value: f64,
    /// Dual objective `⟨a,f⟩ + ⟨b,g⟩ − ε Σ π + ε`; non-decreasing over iterations.
    pub dual: f64,
    /// Largest row-marginal violation (columns are exact after the g sweep).
    pub marginal_error: f64,
}

#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// `⟨π, C⟩ + ε Σ π log π`
    pub value: f64,
    /// `⟨π, C⟩` alone.
    pub transport_cost: f64,
    pub plan: Matrix,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub trace: Vec<SinkhornStep>,
}

/// Log-domain Sinkhorn on the dual potentials.
///
/// Stops once the largest marginal violation is at most `marginal_tol`, or after
/// `max_iter` sweeps. Zero-weight atoms receive potential `−∞` and an empty
/// plan row/column.
pub fn sinkhorn(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    c: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    check_dims(p, q, c)?;
    let eps = cfg.epsilon;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    if cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    let (a, b) = (p.weights(), q.weights());
    let (m, n) = (a.len(), b.len());
    let la: Vec<f64> = a.iter().map(|w| eps * w.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|w| eps * w.ln()).collect();
    let kernel = LogKernel::new(c, eps);

    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut lse_r = vec![0.0; m];
    let mut lse_c = vec![0.0; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;

    for _ in 0..cfg.max_iter {
        iterations_run += 1;
        kernel.row_lse(&g, &mut lse_r);
        for i in 0..m {
            f[i] = la[i] - eps * lse_r[i];
        }
        kernel.col_lse(&f, &mut lse_c);
        for j in 0..n {
            g[j] = lb[j] - eps * lse_c[j];
        }
        if f.iter().chain(&g).any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite(format!(
                "sinkhorn potentials at iteration {iterations_run}"
            )));
        }

        // row sums of π are a_i · exp((lse_new − lse_old)) — recompute directly
        kernel.row_lse(&g, &mut lse_r);
        let mut marginal_error: f64 = 0.0;
        let mut mass = 0.0;
        for i in 0..m {
            let r = if f[i] == f64::NEG_INFINITY {
                0.0
            } else {
                (f[i] / eps + lse_r[i]).exp()
            };
            mass += r;
            marginal_error = marginal_error.max((r - a[i]).abs());
        }
        let plan = kernel.plan(&f, &g);
        let (_, value) = entropic_value(&plan, c.matrix().data(), &f, &g);
        let dual = dot_finite(a, &f) + dot_finite(b, &g) - eps * mass + eps;
        trace.push(SinkhornStep {
            value,
            dual,
            marginal_error,
        });
        if marginal_error <= cfg.marginal_tol {
            converged = true;
            break;
        }
    }

    let plan = kernel.plan(&f, &g);
    let (transport_cost, value) = entropic_value(&plan, c.matrix().data(), &f, &g);
    Ok(SinkhornResult {
        value,
        transport_cost,
        plan,
        f,
        g,
        iterations_run,
        converged,
        trace,
    })
}

/// Σ w_k v_k skipping atoms with zero weight (whose potential is −∞).
fn dot_finite(w: &[f64], v: &[f64]) -> f64 {
    w.iter()
        .zip(v)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, v)| w * v)
        .sum()
}

// ---------------------------------------------------------------------------
// Unrolled Sinkhorn with reverse-mode gradient
// ---------------------------------------------------------------------------

/// Entropic objective after exactly `n_unroll` Sinkhorn sweeps from `g = 0`,
/// and its gradient with respect to the `prediction` weights.
///
/// `cost` is `target.len() × prediction.len()`. The gradient is taken through
/// every sweep (not via the envelope theorem), so it is exact for the finite
/// iteration budget.
pub fn sinkhorn_unrolled_grad(
    target: &[f64],
    prediction: &[f64],
    cost: &CostMatrix,
    epsilon: f64,
    n_unroll: usize,
) -> Result<(f64, Vec<f64>)> {
    let (s, n) = (target.len(), prediction.len());
    if cost.rows() != s || cost.cols() != n {
        return Err(Error::shape("sinkhorn_unrolled_grad", cost.matrix().shape(), (s, n)));
    }
    if n_unroll == 0 {
        return Err(Error::InvalidArgument("n_unroll must be at least 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if target.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument("target weights must be positive".into()));
    }
    let eps = epsilon;
    let kernel = LogKernel::new(cost, eps);
    let b: Vec<f64> = prediction.iter().map(|&v| v.max(MIN_WEIGHT)).collect();
    let la: Vec<f64> = target.iter().map(|w| eps * w.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|w| eps * w.ln()).collect();

    // fs[t] = f^{t+1}, gs[t] = g^t (gs[0] = 0)
    let mut fs: Vec<Vec<f64>> = Vec::with_capacity(n_unroll);
    let mut gs: Vec<Vec<f64>> = Vec::with_capacity(n_unroll + 1);
    gs.push(vec![0.0; n]);
    let mut lse_r = vec![0.0; s];
    let mut lse_c = vec![0.0; n];
    for _ in 0..n_unroll {
        let g = gs.last().unwrap();
        kernel.row_lse(g, &mut lse_r);
        let f: Vec<f64> = (0..s).map(|i| la[i] - eps * lse_r[i]).collect();
        kernel.col_lse(&f, &mut lse_c);
        let g: Vec<f64> = (0..n).map(|j| lb[j] - eps * lse_c[j]).collect();
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unrolled sinkhorn potentials".into()));
        }
        fs.push(f);
        gs.push(g);
    }

    let f = fs.last().unwrap();
    let g = gs.last().unwrap();
    let plan = kernel.plan(f, g);
    let (_, value) = entropic_value(&plan, cost.matrix().data(), f, g);

    // dV/df_i = Σ_j π_ij (1 + (f_i + g_j)/ε), likewise for g
    let mut adj_f = vec![0.0; s];
    let mut adj_g = vec![0.0; n];
    for i in 0..s {
        for j in 0..n {
            let p = plan.get(i, j);
            let w = p * (1.0 + (f[i] + g[j]) / eps);
            adj_f[i] += w;
            adj_g[j] += w;
        }
    }

    let mut grad = vec![0.0; n];
    for t in (0..n_unroll).rev() {
        // g^{t+1} = ε log b − ε LSE_i (f^{t+1}_i − C_ij)/ε
        for j in 0..n {
            grad[j] += adj_g[j] * eps / b[j];
        }
        let q = kernel.col_softmax(&fs[t]);
        for i in 0..s {
            let row = &q[i * n..(i + 1) * n];
            adj_f[i] -= row.iter().zip(&adj_g).map(|(a, b)| a * b).sum::<f64>();
        }
        if t == 0 {
            break;
        }
        // f^{t+1} = ε log a − ε LSE_j (g^t_j − C_ij)/ε
        let pm = kernel.row_softmax(&gs[t]);
        adj_g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..s {
            let ai = adj_f[i];
            for (ag, pv) in adj_g.iter_mut().zip(&pm[i * n..(i + 1) * n]) {
                *ag -= ai * pv;
            }
        }
        adj_f.iter_mut().for_each(|v| *v = 0.0);
    }
    // below the floor the prediction is constant
    for (gv, &p) in grad.iter_mut().zip(prediction) {
        if p < MIN_WEIGHT {
            *gv = 0.0;
        }
    }
    Ok((value, grad))
}

/// Batched [`sinkhorn_unrolled_grad`]: row `u` of `predictions` is compared with
/// `targets[u]`, whose support indexes rows of the item-by-item `cost`.
///
/// Rows are processed in parallel; each row's result depends only on that row,
/// so the output is independent of the thread schedule.
pub fn sinkhorn_batch_grad(
    targets: &[DiscreteMeasure],
    predictions: &Matrix,
    cost: &CostMatrix,
    epsilon: f64,
    n_unroll: usize,
) -> Result<(Vec<f64>, Matrix)> {
    if targets.len() != predictions.rows() {
        return Err(Error::shape(
            "sinkhorn_batch_grad",
            (targets.len(), 0),
            predictions.shape(),
        ));
    }
    if cost.cols() != predictions.cols() {
        return Err(Error::shape(
            "sinkhorn_batch_grad cost",
            cost.matrix().shape(),
            predictions.shape(),
        ));
    }
    let rows: Vec<Result<(f64, Vec<f64>)>> = targets
        .par_iter()
        .enumerate()
        .map(|(u, t)| {
            let sub = cost.restrict_rows(t.support());
            sinkhorn_unrolled_grad(t.weights(), predictions.row(u), &sub, epsilon, n_unroll)
        })
        .collect();
    let mut values = Vec::with_capacity(rows.len());
    let mut grad = Matrix::zeros(predictions.rows(), predictions.cols());
    for (u, r) in rows.into_iter().enumerate() {
        let (v, g) = r?;
        values.push(v);
        grad.row_mut(u).copy_from_slice(&g);
    }
    Ok((values, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, Rng};

    fn line_cost(xs: &[f64], ys: &[f64]) -> CostMatrix {
        CostMatrix::from_fn(xs.len(), ys.len(), |i, j| (xs[i] - ys[j]).abs()).unwrap()
    }

    fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| -rng.uniform().max(1e-12).ln()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    fn random_instance(rng: &mut Rng, m: usize, n: usize) -> (DiscreteMeasure, DiscreteMeasure, CostMatrix) {
        let xs: Vec<[f64; 2]> = (0..m).map(|_| [rng.uniform(), rng.uniform()]).collect();
        let ys: Vec<[f64; 2]> = (0..n).map(|_| [rng.uniform(), rng.uniform()]).collect();
        let c = CostMatrix::from_fn(m, n, |i, j| {
            ((xs[i][0] - ys[j][0]).powi(2) + (xs[i][1] - ys[j][1]).powi(2)).sqrt()
        })
        .unwrap();
        let p = DiscreteMeasure::new(random_simplex(rng, m)).unwrap();
        let q = DiscreteMeasure::new(random_simplex(rng, n)).unwrap();
        (p, q, c)
    }

    /// Minimum over permutations: the vertices of the Birkhoff polytope.
    fn permutation_oracle(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = c.rows();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(c, row + 1, used, acc + c.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
        best / c.rows() as f64
    }

    #[test]
    fn measure_validation() {
        assert!(DiscreteMeasure::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(vec![-0.5, 1.5]).is_err());
        assert!(DiscreteMeasure::new(vec![]).is_err());
        assert!(DiscreteMeasure::new(vec![0.25; 4]).is_ok());
        assert!(CostMatrix::from_fn(1, 1, |_, _| -1.0).is_err());
        assert!(CostMatrix::from_fn(1, 1, |_, _| f64::NAN).is_err());
    }

    #[test]
    fn exact_two_diracs() {
        let c = line_cost(&[0.0], &[1.0]);
        let w = exact_wasserstein(&DiscreteMeasure::dirac(0), &DiscreteMeasure::dirac(0), &c).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn exact_identity_is_zero() {
        let mut rng = Rng::new(1);
        let pts: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let c = line_cost(&pts, &pts);
        let p = DiscreteMeasure::new(random_simplex(&mut rng, 6)).unwrap();
        assert!(exact_wasserstein(&p, &p, &c).unwrap().abs() < 1e-14);
    }

    #[test]
    fn exact_two_by_two_vertex_enumeration() {
        // couplings {0→1, 2→3} cost ½(1+1); {0→3, 2→1} cost ½(3+1)
        let oracle = f64::min(0.5 * (1.0 + 1.0), 0.5 * (3.0 + 1.0));
        let c = line_cost(&[0.0, 2.0], &[1.0, 3.0]);
        let h = DiscreteMeasure::uniform(2).unwrap();
        let w = exact_wasserstein(&h, &h, &c).unwrap();
        assert!((w - oracle).abs() < 1e-15);
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_matches_permutation_oracle_on_uniform_squares() {
        let mut rng = Rng::new(2);
        for n in 1..=7 {
            for _ in 0..5 {
                let (_, _, c) = random_instance(&mut rng, n, n);
                let u = DiscreteMeasure::uniform(n).unwrap();
                let w = exact_wasserstein(&u, &u, &c).unwrap();
                assert!((w - permutation_oracle(&c)).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn exact_plan_is_a_coupling() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let m = 1 + rng.below(12);
            let n = 1 + rng.below(12);
            let (p, q, c) = random_instance(&mut rng, m, n);
            let sol = exact_plan(&p, &q, &c).unwrap();
            for i in 0..m {
                let r: f64 = sol.plan.row(i).iter().sum();
                assert!((r - p.weights()[i]).abs() < 1e-9);
            }
            for (j, s) in sol.plan.column_sums().iter().enumerate() {
                assert!((s - q.weights()[j]).abs() < 1e-9);
            }
            assert!(sol.plan.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn exact_rejects_oversize() {
        let u = DiscreteMeasure::uniform(65).unwrap();
        let c = CostMatrix::zeros(65, 65);
        assert!(matches!(
            exact_wasserstein(&u, &u, &c),
            Err(Error::OversizeInstance { .. })
        ));
    }

    #[test]
    fn sinkhorn_single_atom_is_zero() {
        let c = CostMatrix::zeros(1, 1);
        for eps in [1e-3, 0.1, 1.0, 10.0] {
            let r = sinkhorn(
                &DiscreteMeasure::dirac(0),
                &DiscreteMeasure::dirac(0),
                &c,
                &SinkhornConfig::with_epsilon(eps),
            )
            .unwrap();
            assert!(r.value.abs() < 1e-12, "eps={eps} value={}", r.value);
            assert!(r.converged);
        }
    }

    #[test]
    fn sinkhorn_close_to_exact_at_small_epsilon() {
        // the entropic term shifts the value by at most ε·log 9 ≈ 0.022 here
        let c = line_cost(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.5]);
        let u = DiscreteMeasure::uniform(3).unwrap();
        let exact = exact_wasserstein(&u, &u, &c).unwrap();
        assert!((exact - 3.5 / 3.0).abs() < 1e-12);
        let cfg = SinkhornConfig {
            epsilon: 0.01,
            max_iter: 20_000,
            marginal_tol: 1e-9,
        };
        let r = sinkhorn(&u, &u, &c, &cfg).unwrap();
        assert!((r.value - exact).abs() <= 0.02 * exact, "{} vs {exact}", r.value);
    }

    #[test]
    fn sinkhorn_entropy_lower_bound_at_unit_epsilon() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let (p, q, c) = random_instance(&mut rng, 4, 5);
            let exact = exact_wasserstein(&p, &q, &c).unwrap();
            let r = sinkhorn(&p, &q, &c, &SinkhornConfig::with_epsilon(1.0)).unwrap();
            assert!(r.value >= exact - (4.0f64 * 5.0).ln() - 1e-9);
            assert!(r.transport_cost >= exact - 1e-9);
        }
    }

    #[test]
    fn sinkhorn_dual_is_monotone() {
        let mut rng = Rng::new(6);
        for k in 0..30 {
            let (p, q, c) = random_instance(&mut rng, 2 + k % 8, 3 + k % 5);
            let eps = [1.0, 0.1, 0.01][k % 3];
            let cfg = SinkhornConfig {
                epsilon: eps,
                max_iter: 300,
                marginal_tol: 0.0,
            };
            let r = sinkhorn(&p, &q, &c, &cfg).unwrap();
            for w in r.trace.windows(2) {
                assert!(w[1].dual >= w[0].dual - 1e-12, "{:?}", w);
            }
        }
    }

    #[test]
    fn sinkhorn_marginals_on_random_instances() {
        let mut rng = Rng::new(7);
        let cfg = SinkhornConfig {
            epsilon: 0.1,
            max_iter: 5000,
            marginal_tol: 1e-6,
        };
        for _ in 0..100 {
            let (p, q, c) = random_instance(&mut rng, 10, 10);
            let r = sinkhorn(&p, &q, &c, &cfg).unwrap();
            assert!(r.converged);
            for i in 0..10 {
                let s: f64 = r.plan.row(i).iter().sum();
                assert!((s - p.weights()[i]).abs() <= 1e-6);
            }
            for (j, s) in r.plan.column_sums().iter().enumerate() {
                assert!((s - q.weights()[j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn sinkhorn_transpose_symmetry() {
        let mut rng = Rng::new(8);
        let cfg = SinkhornConfig {
            epsilon: 0.5,
            max_iter: 10_000,
            marginal_tol: 1e-14,
        };
        for _ in 0..20 {
            let (p, q, c) = random_instance(&mut rng, 5, 7);
            let a = sinkhorn(&p, &q, &c, &cfg).unwrap();
            let b = sinkhorn(&q, &p, &c.transpose(), &cfg).unwrap();
            assert!((a.value - b.value).abs() < 1e-9, "{} {}", a.value, b.value);
        }
    }

    #[test]
    fn sinkhorn_error_shrinks_with_epsilon() {
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let (p, q, c) = random_instance(&mut rng, 4, 4);
            let exact = exact_wasserstein(&p, &q, &c).unwrap();
            let mut prev = f64::INFINITY;
            for eps in [1.0, 0.1, 0.01, 0.001] {
                let cfg = SinkhornConfig {
                    epsilon: eps,
                    max_iter: 200_000,
                    marginal_tol: 1e-10,
                };
                let r = sinkhorn(&p, &q, &c, &cfg).unwrap();
                let err = (r.value - exact).abs();
                assert!(err < prev, "eps={eps}: {err} !< {prev}");
                prev = err;
            }
        }
    }

    #[test]
    fn sinkhorn_handles_zero_weight_atoms() {
        let p = DiscreteMeasure::new(vec![0.5, 0.0, 0.5]).unwrap();
        let q = DiscreteMeasure::uniform(2).unwrap();
        let c = line_cost(&[0.0, 1.0, 2.0], &[0.0, 2.0]);
        let r = sinkhorn(&p, &q, &c, &SinkhornConfig::with_epsilon(0.05)).unwrap();
        assert!(r.converged);
        assert!(r.plan.row(1).iter().all(|&v| v == 0.0));
        assert!(r.value.is_finite());
    }

    #[test]
    fn factored_and_direct_kernels_agree() {
        let mut rng = Rng::new(10);
        let (_, _, c) = random_instance(&mut rng, 4, 6);
        let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let f: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let fac = LogKernel::new(&c, 0.7);
        assert!(fac.gibbs.is_some());
        let mut dir = LogKernel::new(&c, 0.7);
        dir.gibbs = None;
        let (mut a, mut b) = (vec![0.0; 4], vec![0.0; 4]);
        fac.row_lse(&g, &mut a);
        dir.row_lse(&g, &mut b);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        let (mut a, mut b) = (vec![0.0; 6], vec![0.0; 6]);
        fac.col_lse(&f, &mut a);
        dir.col_lse(&f, &mut b);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        for (x, y) in fac.row_softmax(&g).iter().zip(dir.row_softmax(&g)) {
            assert!((x - y).abs() < 1e-13);
        }
        for (x, y) in fac.col_softmax(&f).iter().zip(dir.col_softmax(&f)) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    fn unrolled_value(t: &[f64], b: &Matrix, c: &CostMatrix, eps: f64, k: usize) -> f64 {
        sinkhorn_unrolled_grad(t, b.data(), c, eps, k).unwrap().0
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        for eps in [1.0, 0.3] {
            let (p, q, c) = random_instance(&mut rng, 4, 4);
            let b = Matrix::from_vec(1, 4, q.weights().to_vec()).unwrap();
            let (_, grad) = sinkhorn_unrolled_grad(p.weights(), b.data(), &c, eps, 20).unwrap();
            let fd = finite_diff_grad(|x| unrolled_value(p.weights(), x, &c, eps, 20), &b, 1e-6).unwrap();
            // compare on the tangent space of the simplex and in ambient coordinates
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ga, fa) = (mean(&grad), mean(fd.data()));
            for j in 0..4 {
                let (x, y) = (grad[j] - ga, fd.data()[j] - fa);
                assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3), "{x} {y}");
                let (x, y) = (grad[j], fd.data()[j]);
                assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3), "{x} {y}");
            }
        }
    }

    #[test]
    fn unrolled_gradient_at_self_is_consistent_with_symmetric_perturbation() {
        let t = vec![0.2, 0.3, 0.5];
        let c = line_cost(&[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0]);
        let (v0, grad) = sinkhorn_unrolled_grad(&t, &t, &c, 1.0, 50).unwrap();
        let conv = sinkhorn(
            &DiscreteMeasure::new(t.clone()).unwrap(),
            &DiscreteMeasure::new(t.clone()).unwrap(),
            &c,
            &SinkhornConfig::default(),
        )
        .unwrap();
        assert!((v0 - conv.value).abs() < 1e-6);
        let dir = [1.0, -0.5, -0.5];
        let h = 1e-5;
        let plus: Vec<f64> = t.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = t.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        let dp = sinkhorn_unrolled_grad(&t, &plus, &c, 1.0, 50).unwrap().0 - v0;
        let dm = sinkhorn_unrolled_grad(&t, &minus, &c, 1.0, 50).unwrap().0 - v0;
        let directional: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
        assert!(((dp - dm) / (2.0 * h) - directional).abs() < 1e-6);
        // first-order changes are equal and opposite
        assert!((dp + dm).abs() < 1e-8);
    }

    #[test]
    fn unrolled_gradient_converges_to_dual_potential() {
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            let (p, q, c) = random_instance(&mut rng, 3, 3);
            let (_, grad) = sinkhorn_unrolled_grad(p.weights(), q.weights(), &c, 1.0, 400).unwrap();
            let cfg = SinkhornConfig {
                epsilon: 1.0,
                max_iter: 10_000,
                marginal_tol: 1e-14,
            };
            let r = sinkhorn(&p, &q, &c, &cfg).unwrap();
            let gm = grad.iter().sum::<f64>() / 3.0;
            let pm = r.g.iter().sum::<f64>() / 3.0;
            for j in 0..3 {
                assert!(((grad[j] - gm) - (r.g[j] - pm)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let c = line_cost(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]);
        let t = DiscreteMeasure::uniform_over(vec![1, 3]).unwrap();
        let row = [0.1, 0.2, 0.3, 0.4];
        let preds = Matrix::from_rows(&[row, row]).unwrap();
        let (v, g) = sinkhorn_batch_grad(&[t.clone(), t], &preds, &c, 1.0, 50).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(g.row(0), g.row(1));
    }

    #[test]
    fn batch_value_matches_single_solver() {
        let c = line_cost(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]);
        let t = DiscreteMeasure::uniform_over(vec![0, 2]).unwrap();
        let row = [0.1, 0.2, 0.3, 0.4];
        let preds = Matrix::from_rows(&[row]).unwrap();
        let (v, _) = sinkhorn_batch_grad(&[t.clone()], &preds, &c, 1.0, 300).unwrap();
        let sub = c.restrict_rows(t.support());
        let r = sinkhorn(
            &DiscreteMeasure::new(t.weights().to_vec()).unwrap(),
            &DiscreteMeasure::new(row.to_vec()).unwrap(),
            &sub,
            &SinkhornConfig {
                epsilon: 1.0,
                max_iter: 10_000,
                marginal_tol: 1e-13,
            },
        )
        .unwrap();
        assert!((v[0] - r.value).abs() < 1e-9);
    }
}
