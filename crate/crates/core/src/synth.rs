//! Synthetic datasets with known structure.
//!
//! * [`clustered`]: users drawn from a few latent interest clusters, with item
//!   embeddings aligned to the clusters.
//! * [`manifold_users`]: items on a grid of known intrinsic dimension and users
//!   that click small neighbourhoods of it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionMatrix};
use crate::error::{Error, Result};
use crate::geometry::UserPointCloud;
use crate::numerics::{squared_distance, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteredConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub embedding_dim: usize,
    pub min_clicks: usize,
    pub max_clicks: usize,
    /// Fraction of each user's clicks drawn uniformly from the whole catalogue.
    pub noise_fraction: f64,
    /// Distance scale between cluster centres.
    pub center_scale: f64,
    /// Standard deviation of items around their centre.
    pub spread: f64,
    pub seed: u64,
}

impl Default for ClusteredConfig {
    fn default() -> Self {
        ClusteredConfig {
            users: 2000,
            items: 200,
            clusters: 5,
            embedding_dim: 8,
            min_clicks: 8,
            max_clicks: 24,
            noise_fraction: 0.1,
            center_scale: 3.0,
            spread: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredDataset {
    pub interactions: Vec<Interaction>,
    pub embeddings: Matrix,
    pub item_cluster: Vec<usize>,
    pub user_cluster: Vec<usize>,
}

impl ClusteredDataset {
    pub fn matrix(&self) -> Result<InteractionMatrix> {
        InteractionMatrix::from_interactions(&self.interactions)
    }

    /// Writes `userId,itemId,rating,timestamp` with every click rated 5, plus
    /// one rating of 2 per user that the threshold removes again.
    pub fn write_ratings_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("userId,itemId,rating,timestamp\n");
        let n_items = self.embeddings.rows() as u64;
        let mut last = None;
        for (t, x) in self.interactions.iter().enumerate() {
            if last != Some(x.user) {
                // an item id outside the catalogue, rated below threshold
                out.push_str(&format!("{},{},2.0,{}\n", x.user, n_items + x.user, t));
                last = Some(x.user);
            }
            out.push_str(&format!("{},{},5.0,{}\n", x.user, x.item, t));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Item ids are `0..items`, matching the rows of `embeddings`.
    pub fn item_ids(&self) -> Vec<u64> {
        (0..self.embeddings.rows() as u64).collect()
    }
}

/// Users belong to one of `clusters` interest groups. Items are split evenly
/// over clusters and embedded around orthogonal cluster centres. A user
/// samples items of their cluster with probability decreasing in distance to
/// a personal taste point, plus a `noise_fraction` of uniform clicks.
pub fn clustered(cfg: &ClusteredConfig) -> Result<ClusteredDataset> {
    if cfg.clusters == 0 || cfg.items < cfg.clusters || cfg.embedding_dim < cfg.clusters {
        return Err(Error::InvalidArgument(format!(
            "need clusters ≥ 1, items ≥ clusters and embedding_dim ≥ clusters, got {cfg:?}"
        )));
    }
    if cfg.min_clicks == 0 || cfg.max_clicks < cfg.min_clicks || cfg.max_clicks > cfg.items / cfg.clusters {
        return Err(Error::InvalidArgument(format!("invalid click range in {cfg:?}")));
    }
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.embedding_dim;
    let item_cluster: Vec<usize> = (0..cfg.items).map(|i| i * cfg.clusters / cfg.items).collect();
    let mut embeddings = Matrix::zeros(cfg.items, d);
    for i in 0..cfg.items {
        let row = embeddings.row_mut(i);
        for v in row.iter_mut() {
            *v = cfg.spread * rng.normal();
        }
        row[item_cluster[i]] += cfg.center_scale;
    }
    let members: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (0..cfg.items).filter(|&i| item_cluster[i] == c).collect())
        .collect();

    let mut interactions = Vec::new();
    let mut user_cluster = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let c = rng.below(cfg.clusters);
        user_cluster.push(c);
        let mut taste = vec![0.0; d];
        for v in taste.iter_mut() {
            *v = cfg.spread * rng.normal();
        }
        taste[c] += cfg.center_scale;
        let weights: Vec<f64> = members[c]
            .iter()
            .map(|&i| (-squared_distance(embeddings.row(i), &taste) / (2.0 * cfg.spread * cfg.spread * d as f64)).exp())
            .collect();
        let clicks = cfg.min_clicks + rng.below(cfg.max_clicks - cfg.min_clicks + 1);
        let mut chosen: Vec<usize> = Vec::with_capacity(clicks);
        while chosen.len() < clicks {
            let item = if rng.uniform() < cfg.noise_fraction {
                rng.below(cfg.items)
            } else {
                members[c][weighted_index(&weights, &mut rng)]
            };
            if !chosen.contains(&item) {
                chosen.push(item);
            }
        }
        chosen.sort_unstable();
        interactions.extend(chosen.into_iter().map(|i| Interaction {
            user: u as u64,
            item: i as u64,
        }));
    }
    Ok(ClusteredDataset {
        interactions,
        embeddings,
        item_cluster,
        user_cluster,
    })
}

fn weighted_index(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if t < w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

/// Items on a regular grid of the given intrinsic dimension, embedded in ℝ³.
///
/// * dimension 1: 400 points along a helix arc;
/// * dimension 2: a 30 × 30 grid on a tilted plane;
/// * dimension 3: a 10 × 10 × 10 cube.
pub fn manifold_items(intrinsic_dim: usize) -> Result<Matrix> {
    let rows: Vec<[f64; 3]> = match intrinsic_dim {
        1 => (0..400)
            .map(|k| {
                let t = 4.0 * k as f64 / 399.0;
                [t.cos(), t.sin(), 0.3 * t]
            })
            .collect(),
        2 => (0..900)
            .map(|k| {
                let (a, b) = ((k / 30) as f64 / 29.0, (k % 30) as f64 / 29.0);
                [a, b, 0.5 * a - 0.25 * b]
            })
            .collect(),
        3 => (0..1000)
            .map(|k| [(k / 100) as f64 / 9.0, (k / 10 % 10) as f64 / 9.0, (k % 10) as f64 / 9.0])
            .collect(),
        d => return Err(Error::InvalidArgument(format!("manifold dimension {d} not available (1, 2 or 3)"))),
    };
    Matrix::from_rows(&rows)
}

/// Users that each click the `clicks` items nearest to a uniformly chosen
/// item of `items`.
pub fn manifold_users(items: &Matrix, n_users: usize, clicks: usize, seed: u64) -> Result<Vec<UserPointCloud>> {
    let n = items.rows();
    if clicks == 0 || clicks > n {
        return Err(Error::InvalidArgument(format!("cannot click {clicks} of {n} items")));
    }
    let mut rng = Rng::new(seed);
    (0..n_users)
        .map(|u| {
            let centre = rng.below(n);
            let mut by_dist: Vec<(f64, usize)> = (0..n)
                .map(|i| (squared_distance(items.row(i), items.row(centre)), i))
                .collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut chosen: Vec<usize> = by_dist[..clicks].iter().map(|&(_, i)| i).collect();
            chosen.sort_unstable();
            UserPointCloud::new(u as u64, &chosen)
        })
        .collect()
}

/// Interaction matrix over `items.rows()` items from manifold users.
pub fn manifold_matrix(users: &[UserPointCloud], num_items: usize) -> Result<InteractionMatrix> {
    let rows = users.iter().map(|u| u.measure.support().to_vec()).collect();
    InteractionMatrix::from_rows(
        users.iter().map(|u| u.user).collect(),
        (0..num_items as u64).collect(),
        rows,
    )
}
