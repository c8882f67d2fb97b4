//! The `geocf` command line: experiment configuration and the
//! `prepare`, `train`, `evaluate` and `diagnose` commands.
//!
//! Every command reads a JSON [`ExperimentConfig`], writes the fully resolved
//! configuration to `<out>/config.json` and its artifacts next to it:
//!
//! ```text
//! <out>/config.json  splits.json  matrix.bin       (prepare)
//! <out>/checkpoint.bin  trace.tsv                  (train)
//! <out>/report.tsv | report_<scorer>.tsv           (evaluate)
//! <out>/diagnostics.tsv                            (diagnose)
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_itemknn, ItemKnnModel, PopularityModel, KNN_GRID};
use crate::data::{
    filter_users, fold_in_users, load_ratings_with, split_users, FoldInPair, InteractionMatrix, RatingsFormat, SplitSpec,
    DEFAULT_FOLD_IN_FRACTION, DEFAULT_MIN_USER_INTERACTIONS, DEFAULT_RATING_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, BootstrapConfig, EvalReport, OracleScorer, Scorer, DEFAULT_CUTOFFS};
use crate::geometry::{
    auto_method, build_cost_from_cooccurrence, build_cost_from_embeddings, dimension_profile, read_embeddings_csv,
    DimensionDiagnostics, ItemGeometry, UserPointCloud, DEFAULT_TAU,
};
use crate::kernels::KernelConfig;
use crate::loss::{train_with_progress, write_trace_tsv, LossConfig, StepRecord, TrainConfig};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::numerics::Rng;
use crate::synth::{clustered, ClusteredConfig};

/// Cutoff used for every model-selection decision.
pub const SELECTION_CUTOFF: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometrySource {
    /// `item_id,v1,...,vk` CSV of item embeddings.
    Embeddings(PathBuf),
    Cooccurrence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Training users sampled for the covering-number profile.
    pub users: usize,
    pub tau: f64,
    pub eta_grid: Option<Vec<f64>>,
    /// Regularizer of the user distance when a user has more than 64 items.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            users: 500,
            tau: DEFAULT_TAU,
            eta_grid: None,
            epsilon: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ratings: PathBuf,
    pub ratings_format: RatingsFormat,
    pub rating_threshold: f64,
    pub min_user_interactions: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub fold_in_fraction: f64,
    pub split_seed: u64,
    pub geometry: GeometrySource,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub cutoffs: Vec<usize>,
    /// Kernel bandwidths tried on the validation users; empty trains once with `loss.kernel`.
    pub bandwidth_sweep: Vec<f64>,
    pub knn_sweep: Vec<usize>,
    pub bootstrap: BootstrapConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            ratings: PathBuf::from("ratings.csv"),
            ratings_format: RatingsFormat::Csv,
            rating_threshold: DEFAULT_RATING_THRESHOLD,
            min_user_interactions: DEFAULT_MIN_USER_INTERACTIONS,
            val_fraction: 0.1,
            test_fraction: 0.1,
            fold_in_fraction: DEFAULT_FOLD_IN_FRACTION,
            split_seed: 0,
            geometry: GeometrySource::Cooccurrence,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_seed: 0,
            cutoffs: DEFAULT_CUTOFFS.to_vec(),
            bandwidth_sweep: Vec::new(),
            knn_sweep: KNN_GRID.to_vec(),
            bootstrap: BootstrapConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.ratings);
        if let GeometrySource::Embeddings(p) = &mut self.geometry {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return bad(format!(
                "val_fraction and test_fraction must be positive with sum < 1, got {}/{}",
                self.val_fraction, self.test_fraction
            ));
        }
        if !(self.fold_in_fraction > 0.0 && self.fold_in_fraction < 1.0) {
            return bad(format!("fold_in_fraction must lie in (0,1), got {}", self.fold_in_fraction));
        }
        if self.min_user_interactions < 2 {
            return bad("min_user_interactions must be at least 2 so every held-out user can be split".into());
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return bad(format!("cutoffs must be a nonempty list of positive integers, got {:?}", self.cutoffs));
        }
        if let Some(b) = self.bandwidth_sweep.iter().find(|&&b| !(b > 0.0 && b.is_finite())) {
            return bad(format!("bandwidth_sweep entry {b} must be positive"));
        }
        if self.knn_sweep.contains(&0) {
            return bad("knn_sweep entries must be positive".into());
        }
        if self.diagnostics.users < 2 {
            return bad("diagnostics.users must be at least 2".into());
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn write_snapshot(&self, out: &Path) -> Result<()> {
        let p = out.join("config.json");
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Outputs of a prepared dataset.
pub struct Prepared {
    pub matrix: InteractionMatrix,
    pub split: SplitSpec,
}

impl Prepared {
    pub fn load(out: &Path) -> Result<Prepared> {
        Ok(Prepared {
            matrix: InteractionMatrix::read_bin(out.join("matrix.bin"))?,
            split: SplitSpec::read_json(out.join("splits.json"))?,
        })
    }

    pub fn train_matrix(&self) -> Result<InteractionMatrix> {
        self.matrix.subset(&self.split.train_users)
    }

    pub fn validation(&self) -> Result<Vec<FoldInPair>> {
        fold_in_users(&self.matrix, &self.split, &self.split.validation_users, self.split.seed)
    }

    pub fn test(&self) -> Result<Vec<FoldInPair>> {
        fold_in_users(&self.matrix, &self.split, &self.split.test_users, self.split.seed)
    }
}

/// Loads, binarizes and filters the ratings, then splits the users.
pub fn cmd_prepare(cfg: &ExperimentConfig, out: &Path) -> Result<Prepared> {
    create_out(out)?;
    cfg.write_snapshot(out)?;
    let raw = load_ratings_with(&cfg.ratings, cfg.rating_threshold, cfg.ratings_format)?;
    let matrix = filter_users(&raw, cfg.min_user_interactions)?;
    let mut split = split_users(&matrix, cfg.val_fraction, cfg.test_fraction, cfg.split_seed)?;
    split.fold_in_fraction = cfg.fold_in_fraction;
    matrix.write_bin(out.join("matrix.bin"))?;
    split.write_json(out.join("splits.json"))?;
    Ok(Prepared { matrix, split })
}

pub fn load_geometry(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ItemGeometry> {
    match &cfg.geometry {
        GeometrySource::Embeddings(p) => build_cost_from_embeddings(&read_embeddings_csv(p, prepared.matrix.item_ids())?),
        // held-out users are excluded from the item similarities
        GeometrySource::Cooccurrence => build_cost_from_cooccurrence(&prepared.train_matrix()?),
    }
}

/// Result of [`cmd_train`].
pub struct Trained {
    pub params: ModelParams,
    pub trace: Vec<StepRecord>,
    /// `(bandwidth, validation nDCG@100)` per swept bandwidth.
    pub selection: Vec<(f64, f64)>,
}

/// Trains on the training users. With a bandwidth sweep, one model is
/// trained per bandwidth and the best on validation nDCG@100 is kept.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<Trained> {
    create_out(out)?;
    cfg.write_snapshot(out)?;
    let prepared = Prepared::load(out)?;
    let geometry = load_geometry(cfg, &prepared)?;
    let train = prepared.train_matrix()?;
    let bandwidths = if cfg.bandwidth_sweep.is_empty() {
        vec![cfg.loss.kernel.bandwidth]
    } else {
        cfg.bandwidth_sweep.clone()
    };
    let validation = if bandwidths.len() > 1 { prepared.validation()? } else { Vec::new() };
    let mut best: Option<(f64, ModelParams, Vec<StepRecord>)> = None;
    let mut selection = Vec::new();
    for &bw in &bandwidths {
        let loss = LossConfig {
            kernel: KernelConfig::new(bw)?,
            ..cfg.loss
        };
        let (params, trace) = train_with_progress(&train, &geometry.cost, &loss, cfg.model, &cfg.train, cfg.model_seed, |e, l| {
            if verbose {
                eprintln!(
                    "bandwidth {bw} epoch {e}: total {:.6} reconstruction {:.6} mmd {:.3e} lambda {:.4}",
                    l.total, l.reconstruction, l.mmd, l.lambda_used
                );
            }
        })?;
        let score = if validation.is_empty() {
            0.0
        } else {
            evaluate(&params, &validation, &[SELECTION_CUTOFF])?
                .mean_ndcg(SELECTION_CUTOFF)
                .unwrap_or(0.0)
        };
        selection.push((bw, score));
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, params, trace));
        }
    }
    let (_, params, trace) = best.expect("at least one bandwidth");
    Checkpoint {
        params: params.clone(),
        seed: cfg.model_seed,
        epoch: cfg.train.epochs as u64,
    }
    .write(out.join("checkpoint.bin"))?;
    let p = out.join("trace.tsv");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    write_trace_tsv(&trace, std::io::BufWriter::new(f)).map_err(|e| Error::io(&p, e))?;
    if bandwidths.len() > 1 {
        let p = out.join("selection.tsv");
        let mut s = format!("bandwidth\tvalidation_ndcg@{SELECTION_CUTOFF}\n");
        for (b, v) in &selection {
            s.push_str(&format!("{b}\t{v:.6}\n"));
        }
        std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    }
    Ok(Trained { params, trace, selection })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Geocf,
    Popularity,
    Itemknn,
    Oracle,
}

impl ScorerKind {
    fn name(self) -> &'static str {
        match self {
            ScorerKind::Geocf => "geocf",
            ScorerKind::Popularity => "popularity",
            ScorerKind::Itemknn => "itemknn",
            ScorerKind::Oracle => "oracle",
        }
    }

    /// `report.tsv` for the trained model, `report_<name>.tsv` otherwise.
    pub fn report_file(self) -> String {
        match self {
            ScorerKind::Geocf => "report.tsv".into(),
            k => format!("report_{}.tsv", k.name()),
        }
    }
}

/// ItemKNN with the neighbourhood size chosen on validation nDCG@100.
pub fn select_itemknn(train: &InteractionMatrix, validation: &[FoldInPair], sweep: &[usize]) -> Result<(ItemKnnModel, Vec<(usize, f64)>)> {
    let mut best: Option<(f64, ItemKnnModel)> = None;
    let mut log = Vec::new();
    for &k in sweep {
        let model = fit_itemknn(train, k)?;
        let v = evaluate(&model, validation, &[SELECTION_CUTOFF])?
            .mean_ndcg(SELECTION_CUTOFF)
            .unwrap_or(0.0);
        log.push((k, v));
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, model));
        }
    }
    let (_, model) = best.ok_or_else(|| Error::Config("knn_sweep is empty".into()))?;
    Ok((model, log))
}

/// Evaluates a scorer on the test users' fold-in pairs.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path, scorer: ScorerKind) -> Result<EvalReport> {
    create_out(out)?;
    cfg.write_snapshot(out)?;
    let prepared = Prepared::load(out)?;
    let test = prepared.test()?;
    let n_items = prepared.matrix.num_items();
    let model: Box<dyn Scorer> = match scorer {
        ScorerKind::Geocf => {
            let ck = Checkpoint::read(out.join("checkpoint.bin"))?;
            if ck.params.num_items() != n_items {
                return Err(Error::Format {
                    path: out.join("checkpoint.bin"),
                    msg: format!("model has {} items, dataset has {n_items}", ck.params.num_items()),
                });
            }
            Box::new(ck.params)
        }
        ScorerKind::Popularity => Box::new(PopularityModel::fit(&prepared.train_matrix()?)),
        ScorerKind::Itemknn => {
            Box::new(select_itemknn(&prepared.train_matrix()?, &prepared.validation()?, &cfg.knn_sweep)?.0)
        }
        ScorerKind::Oracle => Box::new(OracleScorer { num_items: n_items }),
    };
    let metrics = evaluate(model.as_ref(), &test, &cfg.cutoffs)?;
    let report = EvalReport::from_metrics(&metrics, &cfg.bootstrap)?;
    let p = out.join(scorer.report_file());
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    report
        .write_tsv(std::io::BufWriter::new(f))
        .map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Covering-number profile of a seeded sample of training users.
pub fn cmd_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<DimensionDiagnostics> {
    create_out(out)?;
    cfg.write_snapshot(out)?;
    let prepared = Prepared::load(out)?;
    let geometry = load_geometry(cfg, &prepared)?;
    let train = prepared.train_matrix()?;
    let mut idx: Vec<usize> = (0..train.num_users()).collect();
    if idx.len() > cfg.diagnostics.users {
        idx = Rng::new(cfg.diagnostics.seed).sample_indices(idx.len(), cfg.diagnostics.users);
        idx.sort_unstable();
    }
    let users = idx
        .iter()
        .map(|&u| UserPointCloud::new(train.user_ids()[u], train.row(u)))
        .collect::<Result<Vec<_>>>()?;
    let method = auto_method(&users, cfg.diagnostics.epsilon);
    let diag = dimension_profile(&users, &geometry, cfg.diagnostics.eta_grid.as_deref(), cfg.diagnostics.tau, method)?;
    let p = out.join("diagnostics.tsv");
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    diag.write_tsv(std::io::BufWriter::new(f)).map_err(|e| Error::io(&p, e))?;
    Ok(diag)
}

/// Writes a synthetic clustered dataset (`ratings.csv`, `embeddings.csv`) and
/// a matching `config.json` into `out`.
pub fn cmd_generate(out: &Path, synth: &ClusteredConfig) -> Result<()> {
    create_out(out)?;
    let data = clustered(synth)?;
    data.write_ratings_csv(out.join("ratings.csv"))?;
    crate::geometry::write_embeddings_csv(out.join("embeddings.csv"), &data.item_ids(), &data.embeddings)?;
    let cfg = serde_json::json!({
        "ratings": "ratings.csv",
        "geometry": { "embeddings": "embeddings.csv" },
    });
    let p = out.join("config.json");
    let mut s = serde_json::to_string_pretty(&cfg)?;
    s.push('\n');
    std::fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

#[derive(Parser, Debug)]
#[command(name = "geocf", version, about = "Geometry-aware latent collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 1 gives bitwise-reproducible output
    #[arg(long)]
    threads: Option<usize>,
    /// Experiment directory
    #[arg(long, default_value = "geocf-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Binarize, filter and split the ratings
    Prepare(Common),
    /// Train the model on the training users
    Train {
        #[command(flatten)]
        common: Common,
        /// Print per-epoch losses to stderr
        #[arg(long)]
        verbose: bool,
    },
    /// Rank the test users' held-out items and write the report
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "geocf")]
        scorer: ScorerKind,
    },
    /// Covering-number profile of the training users
    Diagnose(Common),
    /// Write a synthetic clustered dataset and a starter config
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_))
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    match threads {
        None => f(),
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

/// Runs the command line and returns the process exit code:
/// 0 on success, 1 for usage or configuration errors, 2 for runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate { out, users, seed } => cmd_generate(
            &out,
            &ClusteredConfig {
                users,
                seed,
                ..ClusteredConfig::default()
            },
        ),
        Command::Prepare(c) => ExperimentConfig::load(&c.config)
            .and_then(|cfg| with_threads(c.threads, || cmd_prepare(&cfg, &c.out)))
            .map(|p| {
                println!(
                    "{} users ({} train / {} validation / {} test), {} items, {} interactions",
                    p.matrix.num_users(),
                    p.split.train_users.len(),
                    p.split.validation_users.len(),
                    p.split.test_users.len(),
                    p.matrix.num_items(),
                    p.matrix.nnz()
                )
            }),
        Command::Train { common: c, verbose } => ExperimentConfig::load(&c.config)
            .and_then(|cfg| with_threads(c.threads, || cmd_train(&cfg, &c.out, verbose)))
            .map(|t| {
                if let Some(last) = t.trace.last() {
                    println!("final step loss {:.6}", last.loss.total);
                }
                for (b, v) in &t.selection {
                    if t.selection.len() > 1 {
                        println!("bandwidth {b}: validation nDCG@{SELECTION_CUTOFF} {v:.4}");
                    }
                }
            }),
        Command::Evaluate { common: c, scorer } => ExperimentConfig::load(&c.config)
            .and_then(|cfg| with_threads(c.threads, || cmd_evaluate(&cfg, &c.out, scorer)))
            .map(|r| {
                let mut buf = Vec::new();
                let _ = r.write_tsv(&mut buf);
                print!("{}", String::from_utf8_lossy(&buf));
            }),
        Command::Diagnose(c) => ExperimentConfig::load(&c.config)
            .and_then(|cfg| with_threads(c.threads, || cmd_diagnose(&cfg, &c.out)))
            .map(|d| println!("d_star_estimate {:.4}", d.d_star_estimate)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"ratings": "r.csv", "learning_rat": 0.1}"#).unwrap();
        let err = ExperimentConfig::load(&p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rat"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"ratings": "r.csv", "geometry": {"embeddings": "e.csv"}}"#).unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.ratings, dir.path().join("r.csv"));
        assert_eq!(cfg.geometry, GeometrySource::Embeddings(dir.path().join("e.csv")));
        assert_eq!(cfg.loss, LossConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for bad in [
            ExperimentConfig { val_fraction: 0.0, ..ExperimentConfig::default() },
            ExperimentConfig { cutoffs: vec![], ..ExperimentConfig::default() },
            ExperimentConfig { bandwidth_sweep: vec![-1.0], ..ExperimentConfig::default() },
            ExperimentConfig {
                loss: LossConfig { lambda_decay: 2.0, ..LossConfig::default() },
                ..ExperimentConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["geocf", "frobnicate"]), 1);
        assert_eq!(run(["geocf", "prepare"]), 1);
        assert_eq!(run(["geocf", "prepare", "--config", "/nonexistent/geocf.json"]), 1);
    }
}
