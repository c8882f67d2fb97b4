//! Item geometry and covering-number diagnostics of a user sample.
//!
//! Items are embedded in `ℝ^k`; the Euclidean distance between embeddings is
//! the ground cost. A user is the uniform measure over the items they clicked,
//! and two users are compared by the transport distance between those
//! measures. The diagnostics estimate how many `η`-balls (in that user
//! distance) are needed to cover most of a user sample, and the implied
//! dimension `log N_η / (−log η)`.
//!
//! The dimension estimator is heuristic:
//! * covering numbers come from a greedy set cover with ball centres restricted
//!   to sample points (an upper bound on the true minimum, within `ln n + 1`);
//! * the mass-exclusion level `τ` is applied by dropping the `⌊τ·n⌋` users
//!   with the largest nearest-neighbour distance;
//! * distances are divided by the sample diameter first, so radii are relative;
//! * the reported dimension is the largest `d_η` over the three smallest radii.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};
use crate::ot::{exact_wasserstein, sinkhorn, CostMatrix, DiscreteMeasure, SinkhornConfig, EXACT_MAX_SUPPORT};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_GRID_SIZE: usize = 8;

/// Item embeddings (when known) and the item-by-item ground cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGeometry {
    pub embeddings: Option<Matrix>,
    pub cost: CostMatrix,
}

impl ItemGeometry {
    pub fn num_items(&self) -> usize {
        self.cost.rows()
    }
}

/// Ground cost `c(i, i') = ‖E(i) − E(i')‖₂` from an `I × k` embedding table.
pub fn build_cost_from_embeddings(embeddings: &Matrix) -> Result<ItemGeometry> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 items, got {n}")));
    }
    if let Some(i) = (0..n).find(|&i| embeddings.row(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("embedding of item {i}")));
    }
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let d = squared_distance(embeddings.row(i), embeddings.row(j)).sqrt();
            cost.set(i, j, d);
            cost.set(j, i, d);
        }
    }
    Ok(ItemGeometry {
        embeddings: Some(embeddings.clone()),
        cost: CostMatrix::new(cost)?,
    })
}

/// Ground cost `1 − cos(column_i, column_j)` over binary item columns, for
/// catalogues without metadata.
pub fn build_cost_from_cooccurrence(interactions: &InteractionMatrix) -> Result<ItemGeometry> {
    let n = interactions.num_items();
    let counts = interactions.item_counts();
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "item {} (index {i}) has no interactions",
            interactions.item_ids()[i]
        )));
    }
    let co = cooccurrence(interactions);
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let cos = co[i * n + j] as f64 / ((counts[i] * counts[j]) as f64).sqrt();
                cost.set(i, j, (1.0 - cos).max(0.0));
            }
        }
    }
    Ok(ItemGeometry {
        embeddings: None,
        cost: CostMatrix::new(cost)?,
    })
}

/// Dense `I × I` co-occurrence counts.
pub(crate) fn cooccurrence(m: &InteractionMatrix) -> Vec<u32> {
    let n = m.num_items();
    let mut co = vec![0u32; n * n];
    for row in m.rows() {
        for &a in row {
            for &b in row {
                co[a * n + b] += 1;
            }
        }
    }
    co
}

/// Reads `item_id,v1,...,vk` rows (optional header) and orders them by `item_ids`.
pub fn read_embeddings_csv(path: impl AsRef<Path>, item_ids: &[u64]) -> Result<Matrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = std::collections::HashMap::new();
    let mut dim = None;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: k as u64 + 1,
            msg,
        };
        let Ok(id) = fields[0].parse::<u64>() else {
            if k == 0 {
                continue;
            }
            return Err(parse_err(format!("bad item id {:?}", fields[0])));
        };
        let values = fields[1..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(format!("bad value {v:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!("expected {d} values, found {}", values.len())))
            }
            _ => {}
        }
        table.insert(id, values);
    }
    let dim = dim.ok_or_else(|| Error::Empty(format!("{} has no embeddings", path.display())))?;
    let mut data = Vec::with_capacity(item_ids.len() * dim);
    for id in item_ids {
        let row = table.get(id).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("no embedding for item {id}"),
        })?;
        data.extend_from_slice(row);
    }
    Matrix::from_vec(item_ids.len(), dim, data)
}

pub fn write_embeddings_csv(path: impl AsRef<Path>, item_ids: &[u64], embeddings: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("item_id");
    for k in 0..embeddings.cols() {
        out.push_str(&format!(",v{}", k + 1));
    }
    out.push('\n');
    for (id, row) in item_ids.iter().zip(embeddings.row_iter()) {
        out.push_str(&id.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Orthogonal projection of the centred embeddings onto their leading
/// principal axis (power iteration on `EᵀE`), as an `I × k` matrix of rank one.
pub fn rank1_projection(embeddings: &Matrix) -> Matrix {
    let (n, k) = embeddings.shape();
    let means: Vec<f64> = embeddings.column_sums().iter().map(|s| s / n.max(1) as f64).collect();
    let centred = Matrix::from_fn(n, k, |i, j| embeddings.get(i, j) - means[j]);
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    for _ in 0..500 {
        let mut next = vec![0.0; k];
        for row in centred.row_iter() {
            let p = crate::numerics::dot(row, &v);
            for (a, b) in next.iter_mut().zip(row) {
                *a += p * b;
            }
        }
        let norm = crate::numerics::dot(&next, &next).sqrt();
        if norm == 0.0 {
            break;
        }
        next.iter_mut().for_each(|a| *a /= norm);
        v = next;
    }
    Matrix::from_fn(n, k, |i, j| means[j] + crate::numerics::dot(centred.row(i), &v) * v[j])
}

/// A user as the uniform measure over their clicked items.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPointCloud {
    pub user: u64,
    pub measure: DiscreteMeasure,
}

impl UserPointCloud {
    pub fn new(user: u64, items: &[usize]) -> Result<Self> {
        Ok(UserPointCloud {
            user,
            measure: DiscreteMeasure::uniform_over(items.to_vec())?,
        })
    }

    pub fn from_matrix(m: &InteractionMatrix) -> Result<Vec<UserPointCloud>> {
        (0..m.num_users())
            .map(|u| UserPointCloud::new(m.user_ids()[u], m.row(u)))
            .collect()
    }
}

/// How [`user_distance`] solves the transport problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistanceMethod {
    /// Exact LP; both clouds must have at most [`EXACT_MAX_SUPPORT`] items.
    Exact,
    /// Transport cost `⟨π, C⟩` of the converged entropic plan.
    Sinkhorn { epsilon: f64 },
}

/// Transport distance between two users' item measures under the item cost.
pub fn user_distance(a: &UserPointCloud, b: &UserPointCloud, g: &ItemGeometry, method: DistanceMethod) -> Result<f64> {
    let c = g.cost.restrict(a.measure.support(), b.measure.support());
    let p = DiscreteMeasure::new(a.measure.weights().to_vec())?;
    let q = DiscreteMeasure::new(b.measure.weights().to_vec())?;
    match method {
        DistanceMethod::Exact => exact_wasserstein(&p, &q, &c),
        DistanceMethod::Sinkhorn { epsilon } => {
            let cfg = SinkhornConfig {
                epsilon,
                max_iter: 2000,
                marginal_tol: 1e-9,
            };
            Ok(sinkhorn(&p, &q, &c, &cfg)?.transport_cost)
        }
    }
}

/// Chooses the exact solver whenever both clouds are small enough.
pub fn auto_method(users: &[UserPointCloud], epsilon: f64) -> DistanceMethod {
    if users.iter().all(|u| u.measure.len() <= EXACT_MAX_SUPPORT) {
        DistanceMethod::Exact
    } else {
        DistanceMethod::Sinkhorn { epsilon }
    }
}

/// Symmetric matrix of [`user_distance`] over all pairs, zero on the diagonal.
pub fn pairwise_user_distances(users: &[UserPointCloud], g: &ItemGeometry, method: DistanceMethod) -> Result<Matrix> {
    let n = users.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| user_distance(&users[i], &users[j], g, method))
        .collect();
    let mut d = Matrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        d.set(i, j, v);
        d.set(j, i, v);
    }
    Ok(d)
}

/// Greedy upper bound on the `η`-covering number of the points behind a
/// distance matrix: repeatedly take the point whose closed `η`-ball covers the
/// most uncovered points (lowest index on ties).
pub fn covering_number(dist: &Matrix, eta: f64) -> usize {
    let n = dist.rows();
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut count = 0;
    while remaining > 0 {
        let mut best = (0usize, 0usize);
        for c in 0..n {
            let gain = (0..n).filter(|&p| !covered[p] && dist.get(c, p) <= eta).count();
            if gain > best.1 {
                best = (c, gain);
            }
        }
        let c = best.0;
        for p in 0..n {
            if !covered[p] && dist.get(c, p) <= eta {
                covered[p] = true;
                remaining -= 1;
            }
        }
        count += 1;
    }
    count
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimensionDiagnostics {
    /// Strictly decreasing radii, relative to the sample diameter.
    pub eta_grid: Vec<f64>,
    pub covering_numbers: Vec<usize>,
    pub tau: f64,
    pub d_eta_values: Vec<f64>,
    pub d_star_estimate: f64,
    pub users_kept: usize,
    pub diameter: f64,
}

impl DimensionDiagnostics {
    /// TSV with `eta, covering_number, d_eta` rows and a summary line.
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "eta\tcovering_number\td_eta")?;
        for ((e, n), d) in self.eta_grid.iter().zip(&self.covering_numbers).zip(&self.d_eta_values) {
            writeln!(w, "{e:.6}\t{n}\t{d:.6}")?;
        }
        writeln!(w, "# d_star_estimate\t{:.6}", self.d_star_estimate)
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// `size` log-spaced radii from the 95th down to the 5th percentile of the
/// positive pairwise distances (already diameter-normalized).
pub fn default_eta_grid(normalized: &Matrix, size: usize) -> Vec<f64> {
    let n = normalized.rows();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| normalized.get(i, j))
        .filter(|&v| v > 0.0)
        .collect();
    if d.is_empty() || size < 2 {
        return vec![0.5, 0.25, 0.125];
    }
    d.sort_by(f64::total_cmp);
    let hi = percentile(&d, 0.95).min(0.999);
    let lo = percentile(&d, 0.05).min(hi * 0.5);
    let (lh, ll) = (hi.ln(), lo.ln());
    (0..size)
        .map(|k| (lh + (ll - lh) * k as f64 / (size - 1) as f64).exp())
        .collect()
}

/// Covering-number profile of a user sample under the item geometry.
pub fn dimension_profile(
    users: &[UserPointCloud],
    g: &ItemGeometry,
    eta_grid: Option<&[f64]>,
    tau: f64,
    method: DistanceMethod,
) -> Result<DimensionDiagnostics> {
    if users.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 users, got {}", users.len())));
    }
    let dist = pairwise_user_distances(users, g, method)?;
    dimension_profile_from_distances(&dist, eta_grid, tau)
}

/// [`dimension_profile`] on a precomputed distance matrix.
pub fn dimension_profile_from_distances(dist: &Matrix, eta_grid: Option<&[f64]>, tau: f64) -> Result<DimensionDiagnostics> {
    let n = dist.rows();
    if n < 2 || dist.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "need a square distance matrix over at least 2 users, got {}x{}",
            n,
            dist.cols()
        )));
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0,1), got {tau}")));
    }
    if let Some(grid) = eta_grid {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty eta grid".into()));
        }
        if let Some(e) = grid.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::InvalidArgument(format!("eta {e} outside (0,1)")));
        }
        if grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("eta grid must be strictly decreasing".into()));
        }
    }
    let diameter = dist.data().iter().copied().fold(0.0, f64::max);
    let normalized = if diameter > 0.0 {
        dist.map(|v| v / diameter)
    } else {
        dist.clone()
    };

    // drop the τ-fraction of users farthest from their nearest neighbour
    let drop = (tau * n as f64).floor() as usize;
    let mut nn: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d = (0..n)
                .filter(|&j| j != i)
                .map(|j| normalized.get(i, j))
                .fold(f64::INFINITY, f64::min);
            (d, i)
        })
        .collect();
    nn.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = nn[..n - drop.min(n - 1)].iter().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    let kept = Matrix::from_fn(keep.len(), keep.len(), |a, b| normalized.get(keep[a], keep[b]));

    let grid = match eta_grid {
        Some(g) => g.to_vec(),
        None => default_eta_grid(&normalized, DEFAULT_GRID_SIZE),
    };
    let covering_numbers: Vec<usize> = grid.iter().map(|&e| covering_number(&kept, e)).collect();
    let d_eta_values: Vec<f64> = grid
        .iter()
        .zip(&covering_numbers)
        .map(|(&e, &c)| (c as f64).ln() / -e.ln())
        .collect();
    let tail = d_eta_values.len().saturating_sub(3);
    let d_star_estimate = d_eta_values[tail..].iter().copied().fold(0.0, f64::max);
    Ok(DimensionDiagnostics {
        eta_grid: grid,
        covering_numbers,
        tau,
        d_eta_values,
        d_star_estimate,
        users_kept: keep.len(),
        diameter,
    })
}
