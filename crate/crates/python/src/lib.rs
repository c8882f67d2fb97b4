//! Python bindings: `import pygeocf`.
//!
//! Matrices cross the boundary as lists of rows of floats and item sets as
//! lists of column indices.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use geocf::data::{filter_users, load_ratings, FoldInPair};
use geocf::eval::{ndcg_at_k, recall_at_k, RankedList, Scorer};
use geocf::geometry::build_cost_from_embeddings;
use geocf::kernels::{mmd_sq_unbiased, KernelConfig};
use geocf::loss::{LossConfig, TrainConfig};
use geocf::model::{score_rows, Checkpoint, ModelConfig, ModelParams};
use geocf::numerics::Matrix;
use geocf::ot::{CostMatrix, DiscreteMeasure, SinkhornConfig};
use geocf::synth::ClusteredConfig;

fn err(e: geocf::Error) -> PyErr {
    match e {
        geocf::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix needs at least one row"));
    }
    Matrix::from_rows(&rows).map_err(err)
}

fn cost(rows: Vec<Vec<f64>>) -> PyResult<CostMatrix> {
    CostMatrix::new(matrix(rows)?).map_err(err)
}

fn measure(w: Vec<f64>) -> PyResult<DiscreteMeasure> {
    DiscreteMeasure::new(w).map_err(err)
}

/// Entropic OT between weight vectors `a` and `b` under `cost`.
///
/// Returns a dict with `value`, `transport_cost`, `plan`, `iterations` and
/// `converged`.
#[pyfunction]
#[pyo3(signature = (a, b, cost_matrix, epsilon = 1.0, max_iter = 500, tol = 1e-6))]
fn sinkhorn<'py>(
    py: Python<'py>,
    a: Vec<f64>,
    b: Vec<f64>,
    cost_matrix: Vec<Vec<f64>>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SinkhornConfig {
        epsilon,
        max_iter,
        marginal_tol: tol,
    };
    let r = geocf::ot::sinkhorn(&measure(a)?, &measure(b)?, &cost(cost_matrix)?, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("value", r.value)?;
    d.set_item("transport_cost", r.transport_cost)?;
    d.set_item("plan", r.plan.to_rows())?;
    d.set_item("iterations", r.iterations_run)?;
    d.set_item("converged", r.converged)?;
    Ok(d)
}

/// Exact optimal transport cost for small instances.
#[pyfunction]
fn exact_wasserstein(a: Vec<f64>, b: Vec<f64>, cost_matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    geocf::ot::exact_wasserstein(&measure(a)?, &measure(b)?, &cost(cost_matrix)?).map_err(err)
}

/// Unbiased squared MMD between two row samples under an RBF kernel.
#[pyfunction]
#[pyo3(signature = (x, y, bandwidth = 1.0))]
fn mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidth: f64) -> PyResult<f64> {
    let k = KernelConfig::new(bandwidth).map_err(err)?;
    mmd_sq_unbiased(&matrix(x)?, &matrix(y)?, &k).map_err(err)
}

/// Euclidean item cost matrix from embedding rows.
#[pyfunction]
fn cost_from_embeddings(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let g = build_cost_from_embeddings(&matrix(embeddings)?).map_err(err)?;
    Ok(g.cost.matrix().to_rows())
}

/// Item indices by descending score, ties by ascending index.
#[pyfunction]
#[pyo3(signature = (scores, exclude = Vec::new(), limit = None))]
fn rank(scores: Vec<f64>, exclude: Vec<usize>, limit: Option<usize>) -> PyResult<Vec<usize>> {
    let n = scores.len();
    Ok(RankedList::from_scores(0, &scores, &exclude, limit.unwrap_or(n))
        .map_err(err)?
        .items)
}

#[pyfunction]
#[pyo3(name = "recall_at_k")]
fn py_recall_at_k(ranked: Vec<usize>, positives: Vec<usize>, k: usize) -> f64 {
    recall_at_k(&ranked, &positives, k)
}

#[pyfunction]
#[pyo3(name = "ndcg_at_k")]
fn py_ndcg_at_k(ranked: Vec<usize>, positives: Vec<usize>, k: usize) -> f64 {
    ndcg_at_k(&ranked, &positives, k)
}

/// Binary user × item matrix.
#[pyclass(name = "InteractionMatrix", module = "pygeocf")]
struct PyInteractionMatrix {
    inner: geocf::data::InteractionMatrix,
}

#[pymethods]
impl PyInteractionMatrix {
    #[new]
    fn new(user_ids: Vec<u64>, item_ids: Vec<u64>, rows: Vec<Vec<usize>>) -> PyResult<Self> {
        let inner = geocf::data::InteractionMatrix::from_rows(user_ids, item_ids, rows).map_err(err)?;
        Ok(PyInteractionMatrix { inner })
    }

    /// Reads a `userId,itemId,rating[,timestamp]` CSV, keeps ratings at or
    /// above `threshold` and users with at least `min_interactions` items.
    #[staticmethod]
    #[pyo3(signature = (path, threshold = 4.0, min_interactions = 5))]
    fn load(path: &str, threshold: f64, min_interactions: usize) -> PyResult<Self> {
        let raw = load_ratings(path, threshold).map_err(err)?;
        Ok(PyInteractionMatrix {
            inner: filter_users(&raw, min_interactions).map_err(err)?,
        })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    #[getter]
    fn user_ids(&self) -> Vec<u64> {
        self.inner.user_ids().to_vec()
    }

    #[getter]
    fn item_ids(&self) -> Vec<u64> {
        self.inner.item_ids().to_vec()
    }

    fn row(&self, index: usize) -> PyResult<Vec<usize>> {
        if index >= self.inner.num_users() {
            return Err(PyValueError::new_err(format!("row {index} out of range")));
        }
        Ok(self.inner.row(index).to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "InteractionMatrix(users={}, items={}, nnz={})",
            self.inner.num_users(),
            self.inner.num_items(),
            self.inner.nnz()
        )
    }
}

/// Trained encoder/decoder parameters.
#[pyclass(name = "Model", module = "pygeocf")]
struct PyModel {
    params: ModelParams,
    seed: u64,
    epochs: u64,
    losses: Vec<f64>,
}

#[pymethods]
impl PyModel {
    /// Trains on every row of `data` with the given item cost matrix.
    #[staticmethod]
    #[pyo3(signature = (
        data, cost_matrix, epochs = 100, batch_size = 500, learning_rate = 1e-3,
        hidden = 600, latent = 200, epsilon = 1.0, lambda0 = 10.0, lambda_decay = 0.97,
        n_unroll = 50, bandwidth = 1.0, seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        data: &PyInteractionMatrix,
        cost_matrix: Vec<Vec<f64>>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        hidden: usize,
        latent: usize,
        epsilon: f64,
        lambda0: f64,
        lambda_decay: f64,
        n_unroll: usize,
        bandwidth: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let c = cost(cost_matrix)?;
        let loss = LossConfig {
            epsilon,
            lambda0,
            lambda_decay,
            n_unroll,
            kernel: KernelConfig::new(bandwidth).map_err(err)?,
            ..LossConfig::default()
        };
        let opts = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
        };
        let model = ModelConfig { hidden, latent };
        let m = &data.inner;
        let (params, trace) = py
            .detach(|| geocf::loss::train(m, &c, &loss, model, &opts, seed))
            .map_err(err)?;
        Ok(PyModel {
            params,
            seed,
            epochs: epochs as u64,
            losses: trace.iter().map(|r| r.loss.total).collect(),
        })
    }

    /// Loads a checkpoint written by `save` or by the `geocf train` command.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::read(path).map_err(err)?;
        Ok(PyModel {
            params: ck.params,
            seed: ck.seed,
            epochs: ck.epoch,
            losses: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint {
            params: self.params.clone(),
            seed: self.seed,
            epoch: self.epochs,
        }
        .write(path)
        .map_err(err)
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.params.num_items()
    }

    /// Total loss of every training step, in order.
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    /// Item scores (decoder logits at the latent mean), one row per history.
    fn score(&self, histories: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
        Ok(score_rows(&self.params, &refs).map_err(err)?.to_rows())
    }

    /// Mean recall and nDCG over `(fold_in, held_out)` pairs, keyed
    /// `"recall@k"` and `"ndcg@k"`.
    #[pyo3(signature = (pairs, cutoffs = vec![20, 50, 100]))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        pairs: Vec<(Vec<usize>, Vec<usize>)>,
        cutoffs: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let users: Vec<FoldInPair> = pairs
            .into_iter()
            .enumerate()
            .map(|(u, (fold_in, held_out))| FoldInPair {
                user: u as u64,
                fold_in,
                held_out,
            })
            .collect();
        let scorer: &dyn Scorer = &self.params;
        let m = geocf::eval::evaluate(scorer, &users, &cutoffs).map_err(err)?;
        let d = PyDict::new(py);
        for &k in &cutoffs {
            d.set_item(format!("recall@{k}"), m.mean_recall(k))?;
            d.set_item(format!("ndcg@{k}"), m.mean_ndcg(k))?;
        }
        Ok(d)
    }
}

/// Clustered synthetic data: returns `(matrix, item_embeddings)`.
#[pyfunction]
#[pyo3(signature = (users = 2000, items = 200, clusters = 5, seed = 0))]
fn synthetic(users: usize, items: usize, clusters: usize, seed: u64) -> PyResult<(PyInteractionMatrix, Vec<Vec<f64>>)> {
    let d = geocf::synth::clustered(&ClusteredConfig {
        users,
        items,
        clusters,
        seed,
        ..ClusteredConfig::default()
    })
    .map_err(err)?;
    Ok((PyInteractionMatrix { inner: d.matrix().map_err(err)? }, d.embeddings.to_rows()))
}

#[pymodule]
fn pygeocf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(exact_wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(cost_from_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(py_recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(py_ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_class::<PyInteractionMatrix>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
