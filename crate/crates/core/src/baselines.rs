//! Reference scorers: item-based nearest neighbours under cosine similarity
//! and item popularity.

use crate::data::{FoldInPair, InteractionMatrix};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::numerics::Matrix;

/// Neighbourhood sizes tried during model selection.
pub const KNN_GRID: [usize; 4] = [5, 50, 200, 1000];

/// Top-`k` cosine neighbours of every item over binary item columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemKnnModel {
    pub k: usize,
    /// `neighbors[i]` sorted by descending similarity (ascending index on ties),
    /// without `i` itself and without zero similarities.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

pub fn fit_itemknn(train: &InteractionMatrix, k: usize) -> Result<ItemKnnModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("neighbourhood size must be at least 1".into()));
    }
    let n = train.num_items();
    let counts = train.item_counts();
    let mut users_of = vec![Vec::new(); n];
    for (u, row) in train.rows().iter().enumerate() {
        for &i in row {
            users_of[i].push(u);
        }
    }
    let mut co = vec![0u32; n];
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        co.iter_mut().for_each(|c| *c = 0);
        for &u in &users_of[i] {
            for &j in train.row(u) {
                co[j] += 1;
            }
        }
        let mut list: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i && co[j] > 0)
            .map(|j| (j, co[j] as f64 / ((counts[i] * counts[j]) as f64).sqrt()))
            .collect();
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(k);
        neighbors.push(list);
    }
    Ok(ItemKnnModel { k, neighbors })
}

/// `score(j) = Σ_{i ∈ fold-in} sim(i, j)` over each clicked item's list.
pub fn score_itemknn(model: &ItemKnnModel, fold_in: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; model.neighbors.len()];
    for &i in fold_in {
        for &(j, sim) in &model.neighbors[i] {
            s[j] += sim;
        }
    }
    s
}

impl Scorer for ItemKnnModel {
    fn num_items(&self) -> usize {
        self.neighbors.len()
    }

    fn score(&self, users: &[&FoldInPair]) -> Result<Matrix> {
        let n = self.neighbors.len();
        let mut data = Vec::with_capacity(users.len() * n);
        for u in users {
            data.extend(score_itemknn(self, &u.fold_in));
        }
        Matrix::from_vec(users.len(), n, data)
    }
}

/// Training interaction count of every item.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityModel {
    pub counts: Vec<f64>,
}

impl PopularityModel {
    pub fn fit(train: &InteractionMatrix) -> Self {
        PopularityModel {
            counts: train.item_counts().into_iter().map(|c| c as f64).collect(),
        }
    }
}

/// The same popularity scores for every user.
pub fn score_popularity(model: &PopularityModel, _fold_in: &[usize]) -> Vec<f64> {
    model.counts.clone()
}

impl Scorer for PopularityModel {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, users: &[&FoldInPair]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(users.len() * self.counts.len());
        for u in users {
            data.extend(score_popularity(self, &u.fold_in));
        }
        Matrix::from_vec(users.len(), self.counts.len(), data)
    }
}
