//! Config-driven protocols: p-Laplacian cache batches, method × fraction ×
//! repetition experiments and p-grid validation sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache;
use crate::dataset::{load_features_csv, make_two_moons, mask_labels, split, CsvSchema, Dataset};
use crate::ensemble::CandidateSet;
use crate::error::{Error, Result};
use crate::eval::{accuracy, average_precision, mean_average_precision, RankedScores};
use crate::graph::{build_knn_graph, laplacian, Graph, GraphSpec};
use crate::kernel::KernelSpec;
use crate::learn::{train_one_vs_rest, LossKind, OvrModel, RegParams, TrainConfig};
use crate::plap::{approximate_p_laplacian, default_embed_dim, PLapConfig};

/// Read by the CLI; overrides `cache_dir` from the config file.
pub const CACHE_DIR_ENV: &str = "EPLAP_CACHE_DIR";
pub const RESULTS_FORMAT: &str = "eplap-experiment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default = "default_id_column")]
        id_column: Option<String>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

fn default_id_column() -> Option<String> {
    Some("id".into())
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::TwoMoons { n, noise, seed } => make_two_moons(*n, *noise, *seed),
            DataSource::Csv {
                path,
                label_column,
                id_column,
            } => load_features_csv(
                path,
                &CsvSchema {
                    label_column: label_column.clone(),
                    id_column: id_column.clone(),
                },
            ),
        }
    }

    fn is_synthetic(&self) -> bool {
        matches!(self, DataSource::TwoMoons { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSet {
    pub name: String,
    pub p_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train_per_class: usize,
    pub fractions: Vec<f64>,
    pub repetitions: usize,
    /// One seed per repetition; empty means `0..repetitions`.
    pub seeds: Vec<u64>,
    pub graph: GraphSpec,
    /// p-Laplacian embedding dimension; `None` picks the library default for the training size.
    pub embed_dim: Option<usize>,
    pub plap_max_iters: usize,
    /// Values for `plap-cache` and `pgrid`.
    pub p_grid: Vec<f64>,
    /// Labeled fraction used by `pgrid`.
    pub validation_fraction: f64,
    /// The single-candidate p-Laplacian baseline.
    pub plapr_p: f64,
    pub include_lapr: bool,
    /// Adds a `Supervised` method with `γ_I = 0`.
    pub include_supervised: bool,
    pub candidate_sets: Vec<NamedSet>,
    pub kernel: KernelSpec,
    pub gamma_a_grid: Vec<f64>,
    pub gamma_i_grid: Vec<f64>,
    pub gamma_exp: f64,
    pub loss: LossKind,
    /// Share of each class's labeled points held out to pick `γ_A`, `γ_I`.
    pub holdout_fraction: f64,
    pub train: TrainConfig,
    pub output: Option<PathBuf>,
    pub csv_output: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::TwoMoons {
                n: 200,
                noise: 0.08,
                seed: 0,
            },
            train_per_class: 50,
            fractions: vec![0.1, 0.2, 0.3, 0.5],
            repetitions: 5,
            seeds: Vec::new(),
            graph: GraphSpec::default(),
            embed_dim: None,
            plap_max_iters: PLapConfig::default().max_iters,
            p_grid: (11..=30).map(|i| i as f64 / 10.0).collect(),
            validation_fraction: 0.1,
            plapr_p: 2.8,
            include_lapr: true,
            include_supervised: false,
            candidate_sets: vec![
                NamedSet {
                    name: "EpLapR-3G".into(),
                    p_values: vec![2.5, 2.7, 2.8],
                },
                NamedSet {
                    name: "EpLapR-5G".into(),
                    p_values: vec![2.4, 2.5, 2.6, 2.7, 2.8],
                },
            ],
            kernel: KernelSpec::default(),
            gamma_a_grid: vec![1e-6, 1e-4, 1e-2],
            gamma_i_grid: vec![1e-2, 1.0, 1e2],
            gamma_exp: 2.0,
            loss: LossKind::Squared,
            holdout_fraction: 0.2,
            train: TrainConfig::default(),
            output: None,
            csv_output: None,
            cache_dir: None,
        }
    }
}

fn check_p(p: f64, place: &str) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Config(format!(
            "{place}: p = {p} is not allowed; the p-Laplacian requires p > 1"
        )));
    }
    Ok(())
}

fn check_grid(values: &[f64], place: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("{place} must not be empty")));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("{place}: {v} is not a finite value >= 0")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for &p in &self.p_grid {
            check_p(p, "p_grid")?;
        }
        check_p(self.plapr_p, "plapr_p")?;
        let mut names = std::collections::BTreeSet::new();
        for set in &self.candidate_sets {
            if set.p_values.is_empty() {
                return Err(Error::Config(format!("candidate set `{}` is empty", set.name)));
            }
            for &p in &set.p_values {
                check_p(p, &format!("candidate set `{}`", set.name))?;
            }
            if !names.insert(set.name.as_str()) || ["LapR", "pLapR", "Supervised"].contains(&set.name.as_str()) {
                return Err(Error::Config(format!("duplicate or reserved method name `{}`", set.name)));
            }
        }
        if self.p_grid.is_empty() {
            return Err(Error::Config("p_grid must not be empty".into()));
        }
        check_grid(&self.gamma_a_grid, "gamma_a_grid")?;
        check_grid(&self.gamma_i_grid, "gamma_i_grid")?;
        if self.fractions.is_empty() {
            return Err(Error::Config("fractions must not be empty".into()));
        }
        for &f in self.fractions.iter().chain([&self.validation_fraction]) {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("labeled fraction {f} outside (0, 1]")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.repetitions {
            return Err(Error::Config(format!(
                "{} seeds given for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be >= 1".into()));
        }
        if !(self.gamma_exp > 1.0) {
            return Err(Error::Config(format!("gamma_exp must exceed 1, got {}", self.gamma_exp)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.plap_max_iters == 0 || self.graph.k_neighbors == 0 {
            return Err(Error::Config("plap_max_iters and graph.k_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repetitions as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The config as it enters results files: seeds filled in, paths dropped.
    pub fn resolved(&self) -> Self {
        Self {
            seeds: self.resolved_seeds(),
            output: None,
            csv_output: None,
            cache_dir: None,
            ..self.clone()
        }
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolved()).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn methods(&self) -> Vec<MethodSpec> {
        let mut out = Vec::new();
        if self.include_supervised {
            out.push(MethodSpec {
                name: "Supervised".into(),
                regularizer: Regularizer::Laplacian,
                supervised: true,
            });
        }
        if self.include_lapr {
            out.push(MethodSpec {
                name: "LapR".into(),
                regularizer: Regularizer::Laplacian,
                supervised: false,
            });
        }
        out.push(MethodSpec {
            name: "pLapR".into(),
            regularizer: Regularizer::PLaplacian {
                p_values: vec![self.plapr_p],
            },
            supervised: false,
        });
        for set in &self.candidate_sets {
            out.push(MethodSpec {
                name: set.name.clone(),
                regularizer: Regularizer::PLaplacian {
                    p_values: set.p_values.clone(),
                },
                supervised: false,
            });
        }
        out
    }

    fn plap_config(&self, p: f64, k: usize) -> PLapConfig {
        PLapConfig {
            embed_dim: Some(k),
            max_iters: self.plap_max_iters,
            ..PLapConfig::with_p(p)
        }
    }

    fn embed_dim_for(&self, n: usize) -> usize {
        self.embed_dim.unwrap_or_else(|| default_embed_dim(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    /// The standard graph Laplacian `L = D - W`.
    Laplacian,
    PLaplacian { p_values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub regularizer: Regularizer,
    /// Forces `γ_I = 0`.
    pub supervised: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOutcome {
    Computed,
    Loaded,
    /// A cache file existed but failed verification.
    Recomputed,
    /// No cache directory configured.
    Uncached,
}

/// An approximate p-Laplacian for one graph, through the cache when a directory is given.
pub fn obtain_plap(
    g: &Graph,
    cfg: &PLapConfig,
    cache_dir: Option<&Path>,
) -> Result<(DMatrix<f64>, bool, CacheOutcome, Option<PathBuf>)> {
    let k = cfg.validate(g.n())?;
    let digest = g.digest();
    let Some(dir) = cache_dir else {
        let (sys, m) = approximate_p_laplacian(g, cfg)?;
        return Ok((sys.reconstruct(), m.report.converged, CacheOutcome::Uncached, None));
    };
    let path = dir.join(cache::cache_file_name(&digest, cfg.p, k));
    let mut outcome = CacheOutcome::Computed;
    if path.exists() {
        match cache::load(&path, &digest, cfg.p, k) {
            Ok(hit) => {
                log::info!("cache hit {}", path.display());
                return Ok((hit.system.reconstruct(), hit.converged, CacheOutcome::Loaded, Some(path)));
            }
            Err(e) => {
                log::warn!("{e}; recomputing");
                outcome = CacheOutcome::Recomputed;
            }
        }
    }
    let (sys, m) = approximate_p_laplacian(g, cfg)?;
    cache::write(&path, &sys, &digest, m.report.converged)?;
    log::info!("cache write {}", path.display());
    Ok((sys.reconstruct(), m.report.converged, outcome, Some(path)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlapCacheReport {
    pub files: Vec<PathBuf>,
    pub computed: usize,
    pub loaded: usize,
    pub recomputed: usize,
}

struct RepData {
    repetition: usize,
    seed: u64,
    train: Dataset,
    test: Dataset,
    graph: Graph,
    laplacian: Arc<DMatrix<f64>>,
    plaps: BTreeMap<u64, (Arc<DMatrix<f64>>, bool)>,
}

fn prepare_rep(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    repetition: usize,
    seed: u64,
    ps: &[f64],
    cache_dir: Option<&Path>,
) -> Result<(RepData, Vec<(CacheOutcome, Option<PathBuf>)>)> {
    let (train, test) = split(ds, cfg.train_per_class, seed)?;
    let graph = build_knn_graph(train.features(), &cfg.graph)?;
    let k = cfg.embed_dim_for(train.len());
    let computed = ps
        .par_iter()
        .map(|&p| obtain_plap(&graph, &cfg.plap_config(p, k), cache_dir))
        .collect::<Result<Vec<_>>>()?;
    let mut plaps = BTreeMap::new();
    let mut outcomes = Vec::new();
    for (&p, (m, conv, outcome, path)) in ps.iter().zip(computed) {
        plaps.insert(p.to_bits(), (Arc::new(m), conv));
        outcomes.push((outcome, path));
    }
    let lap = Arc::new(laplacian(&graph));
    Ok((
        RepData {
            repetition,
            seed,
            train,
            test,
            graph,
            laplacian: lap,
            plaps,
        },
        outcomes,
    ))
}

fn distinct(ps: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for p in ps {
        if !out.iter().any(|q| q.to_bits() == p.to_bits()) {
            out.push(p);
        }
    }
    out
}

/// Computes or verifies one cache file per (training graph, p in `p_grid`, K).
pub fn cmd_plap_cache(cfg: &ExperimentConfig) -> Result<PlapCacheReport> {
    cfg.validate()?;
    let dir = cfg
        .cache_dir
        .clone()
        .ok_or_else(|| Error::Config(format!("plap-cache needs cache_dir or {CACHE_DIR_ENV}")))?;
    let ds = cfg.data.load()?;
    let ps = distinct(cfg.p_grid.iter().copied());
    let mut report = PlapCacheReport::default();
    for (rep, seed) in cfg.resolved_seeds().into_iter().enumerate() {
        let (_, outcomes) = prepare_rep(cfg, &ds, rep, seed, &ps, Some(&dir))?;
        for (outcome, path) in outcomes {
            match outcome {
                CacheOutcome::Computed => report.computed += 1,
                CacheOutcome::Loaded => report.loaded += 1,
                CacheOutcome::Recomputed => report.recomputed += 1,
                CacheOutcome::Uncached => {}
            }
            if let Some(path) = path {
                if !report.files.contains(&path) {
                    report.files.push(path);
                }
            }
        }
    }
    report.files.sort();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub class: usize,
    pub mu: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Holdout,
    SingletonGrid,
    /// Too few labeled points to hold any out; the first grid values are used.
    EmptyHoldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub fraction: f64,
    pub repetition: usize,
    pub seed: u64,
    /// `"ok"` or the error message of a failed cell.
    pub status: String,
    pub n_labeled: usize,
    pub selection: Option<Selection>,
    pub selected: Option<RegParams>,
    pub holdout_score: Option<f64>,
    pub kernel_sigma: Option<f64>,
    pub per_class_ap: Vec<ClassAp>,
    pub map: Option<f64>,
    pub accuracy: Option<f64>,
    pub tasks: Vec<TaskSummary>,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub fraction: f64,
    pub n_ok: usize,
    pub map_mean: Option<f64>,
    pub map_std: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlapInfo {
    pub p: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionInfo {
    pub repetition: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub graph_digest: String,
    pub graph_bandwidth: Option<f64>,
    pub graph_edges: usize,
    pub plap: Vec<PlapInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlapSettings {
    pub step_factor: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub reorth_period: usize,
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl From<PLapConfig> for PlapSettings {
    fn from(c: PLapConfig) -> Self {
        Self {
            step_factor: c.step_factor,
            max_iters: c.max_iters,
            rel_tol: c.rel_tol,
            reorth_period: c.reorth_period,
            grad_tol: c.grad_tol,
            max_halvings: c.max_halvings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDefaults {
    pub embed_dim: usize,
    pub plap: PlapSettings,
    pub methods: Vec<MethodSpec>,
    pub repetitions: Vec<RepetitionInfo>,
}

/// Everything in a results file except timing; stable across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPayload {
    pub format: String,
    pub library_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub resolved: ResolvedDefaults,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: String,
    pub fraction: f64,
    pub repetition: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub preparation_seconds: f64,
    pub cells: Vec<CellTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub payload: ExperimentPayload,
    pub timing: Timing,
}

impl ExperimentReport {
    pub fn failed_cells(&self) -> usize {
        self.payload.cells.iter().filter(|c| !c.ok()).count()
    }

    pub fn payload_json(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }

    pub fn write(&self, json: &Path, csv_path: Option<&Path>) -> Result<()> {
        if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(json, serde_json::to_vec_pretty(self)?)?;
        if let Some(path) = csv_path {
            let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record(["method", "fraction", "n_ok", "map_mean", "map_std", "accuracy_mean", "accuracy_std"])
                .map_err(|e| Error::Config(e.to_string()))?;
            for a in &self.payload.aggregates {
                w.write_record([
                    a.method.clone(),
                    a.fraction.to_string(),
                    a.n_ok.to_string(),
                    opt(a.map_mean),
                    opt(a.map_std),
                    opt(a.accuracy_mean),
                    opt(a.accuracy_std),
                ])
                .map_err(|e| Error::Config(e.to_string()))?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn candidates_for(rep: &RepData, method: &MethodSpec) -> Result<CandidateSet> {
    match &method.regularizer {
        Regularizer::Laplacian => CandidateSet::new(vec![(*rep.laplacian).clone()], vec![2.0]),
        Regularizer::PLaplacian { p_values } => {
            let mats = p_values
                .iter()
                .map(|p| {
                    rep.plaps
                        .get(&p.to_bits())
                        .map(|(m, _)| (**m).clone())
                        .ok_or_else(|| Error::invalid(format!("p = {p} was not prepared")))
                })
                .collect::<Result<Vec<_>>>()?;
            CandidateSet::new(mats, p_values.clone())
        }
    }
}

/// Per-class AP over columns of `scores`, for classes with at least one positive.
fn class_aps(model: &OvrModel, scores: &DMatrix<f64>, truth: &[usize]) -> Result<Vec<ClassAp>> {
    let mut out = Vec::new();
    for (c, &class) in model.classes.iter().enumerate() {
        let relevance: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        if !relevance.iter().any(|&r| r) {
            continue;
        }
        let rs = RankedScores::new(scores.column(c).iter().copied().collect(), relevance)?;
        out.push(ClassAp {
            class,
            ap: average_precision(&rs)?,
        });
    }
    Ok(out)
}

fn holdout_split(train: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x686f_6c64_6f75_74);
    let mut held = Vec::new();
    for (_, members) in train.class_indices() {
        let mut labeled: Vec<usize> = members.into_iter().filter(|&i| train.labeled_mask()[i]).collect();
        let want = ((fraction * labeled.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let count = want.min(labeled.len().saturating_sub(1));
        labeled.shuffle(&mut rng);
        held.extend_from_slice(&labeled[..count]);
    }
    held.sort_unstable();
    held
}

struct CellOutcome {
    selection: Selection,
    selected: RegParams,
    holdout_score: Option<f64>,
    model: OvrModel,
}

fn fit_cell(
    cfg: &ExperimentConfig,
    train: &Dataset,
    cands: &CandidateSet,
    supervised: bool,
    seed: u64,
) -> Result<CellOutcome> {
    let gi_grid: Vec<f64> = if supervised { vec![0.0] } else { cfg.gamma_i_grid.clone() };
    let fit = |ds: &Dataset, params: &RegParams| {
        train_one_vs_rest(ds, cands, &cfg.kernel, params, cfg.gamma_exp, &cfg.train, cfg.loss)
    };
    let first = RegParams::new(cfg.gamma_a_grid[0], gi_grid[0])?;
    let singleton = cfg.gamma_a_grid.len() == 1 && gi_grid.len() == 1;
    let held = if singleton {
        Vec::new()
    } else {
        holdout_split(train, cfg.holdout_fraction, seed)
    };
    if singleton || held.is_empty() {
        return Ok(CellOutcome {
            selection: if singleton {
                Selection::SingletonGrid
            } else {
                Selection::EmptyHoldout
            },
            selected: first,
            holdout_score: None,
            model: fit(train, &first)?,
        });
    }

    let mut mask = train.labeled_mask().to_vec();
    for &i in &held {
        mask[i] = false;
    }
    let inner = train.with_labeled_mask(mask)?;
    let held_x = DMatrix::from_fn(held.len(), train.dim(), |r, c| train.features()[(held[r], c)]);
    let held_y: Vec<usize> = held.iter().map(|&i| train.labels()[i]).collect();
    let mut best: Option<(f64, RegParams)> = None;
    let mut last_err = None;
    for &ga in &cfg.gamma_a_grid {
        for &gi in &gi_grid {
            let params = RegParams::new(ga, gi)?;
            let scored = fit(&inner, &params).and_then(|m| {
                let s = m.scores(&held_x)?;
                mean_average_precision(&class_aps(&m, &s, &held_y)?.iter().map(|a| a.ap).collect::<Vec<_>>())
            });
            match scored {
                Ok(score) => {
                    if best.is_none_or(|(b, _)| score > b) {
                        best = Some((score, params));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    let (score, selected) = match (best, last_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("grids are non-empty"),
    };
    Ok(CellOutcome {
        selection: Selection::Holdout,
        selected,
        holdout_score: Some(score),
        model: fit(train, &selected)?,
    })
}

fn run_cell(cfg: &ExperimentConfig, rep: &RepData, method: &MethodSpec, fraction: f64) -> CellResult {
    let mut cell = CellResult {
        method: method.name.clone(),
        fraction,
        repetition: rep.repetition,
        seed: rep.seed,
        status: "ok".into(),
        n_labeled: 0,
        selection: None,
        selected: None,
        holdout_score: None,
        kernel_sigma: None,
        per_class_ap: Vec::new(),
        map: None,
        accuracy: None,
        tasks: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let train = mask_labels(&rep.train, fraction, rep.seed)?;
        cell.n_labeled = train.n_labeled();
        let cands = candidates_for(rep, method)?;
        let out = fit_cell(cfg, &train, &cands, method.supervised, rep.seed)?;
        cell.selection = Some(out.selection);
        cell.selected = Some(out.selected);
        cell.holdout_score = out.holdout_score;
        cell.kernel_sigma = out.model.models[0].kernel.sigma;
        let scores = out.model.scores(rep.test.features())?;
        cell.per_class_ap = class_aps(&out.model, &scores, rep.test.labels())?;
        cell.map = Some(mean_average_precision(
            &cell.per_class_ap.iter().map(|a| a.ap).collect::<Vec<_>>(),
        )?);
        cell.accuracy = Some(accuracy(&out.model.decide(&scores), rep.test.labels())?);
        cell.tasks = out
            .model
            .classes
            .iter()
            .zip(&out.model.models)
            .map(|(&class, m)| TaskSummary {
                class,
                mu: m.mu.clone(),
                objective_trace: m.objective_trace.clone(),
                iterations: m.iterations,
                converged: m.converged,
            })
            .collect();
        Ok(())
    })();
    if let Err(e) = result {
        log::error!(
            "cell {} fraction {} repetition {} failed: {e}",
            method.name,
            fraction,
            rep.repetition
        );
        cell.status = e.to_string();
    }
    cell
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

fn aggregate(methods: &[MethodSpec], fractions: &[f64], cells: &[CellResult]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &fraction in fractions {
        for m in methods {
            let ok: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.method == m.name && c.fraction.to_bits() == fraction.to_bits() && c.ok())
                .collect();
            let maps: Vec<f64> = ok.iter().filter_map(|c| c.map).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|c| c.accuracy).collect();
            let (map_mean, map_std) = mean_std(&maps);
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            out.push(Aggregate {
                method: m.name.clone(),
                fraction,
                n_ok: ok.len(),
                map_mean,
                map_std,
                accuracy_mean,
                accuracy_std,
            });
        }
    }
    out
}

fn prepare_all(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    ps: &[f64],
    cache_dir: Option<&Path>,
) -> Result<(Vec<RepData>, Vec<RepetitionInfo>)> {
    let reps = cfg
        .resolved_seeds()
        .into_iter()
        .enumerate()
        .map(|(r, seed)| prepare_rep(cfg, ds, r, seed, ps, cache_dir).map(|(d, _)| d))
        .collect::<Result<Vec<_>>>()?;
    let infos = reps
        .iter()
        .map(|r| RepetitionInfo {
            repetition: r.repetition,
            seed: r.seed,
            n_train: r.train.len(),
            n_test: r.test.len(),
            graph_digest: r.graph.digest_hex(),
            graph_bandwidth: r.graph.bandwidth(),
            graph_edges: r.graph.n_edges(),
            plap: ps
                .iter()
                .map(|&p| PlapInfo {
                    p,
                    converged: r.plaps[&p.to_bits()].1,
                })
                .collect(),
        })
        .collect();
    Ok((reps, infos))
}

/// Runs every method × labeled fraction × repetition cell. Failed cells are
/// recorded with their error and do not stop the run.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = cfg.data.load()?;
    let methods = cfg.methods();
    let ps = distinct(methods.iter().flat_map(|m| match &m.regularizer {
        Regularizer::Laplacian => Vec::new(),
        Regularizer::PLaplacian { p_values } => p_values.clone(),
    }));
    let cache_dir = cfg.cache_dir.clone();
    let (reps, infos) = prepare_all(cfg, &ds, &ps, cache_dir.as_deref())?;
    let preparation_seconds = start.elapsed().as_secs_f64();

    let mut jobs = Vec::new();
    for rep in &reps {
        for &fraction in &cfg.fractions {
            for m in &methods {
                jobs.push((rep, m, fraction));
            }
        }
    }
    let results: Vec<(CellResult, f64)> = jobs
        .par_iter()
        .map(|&(rep, m, fraction)| {
            let t = Instant::now();
            let cell = run_cell(cfg, rep, m, fraction);
            (cell, t.elapsed().as_secs_f64())
        })
        .collect();
    let timing_cells = results
        .iter()
        .map(|(c, secs)| CellTiming {
            method: c.method.clone(),
            fraction: c.fraction,
            repetition: c.repetition,
            wall_seconds: *secs,
        })
        .collect();
    let cells: Vec<CellResult> = results.into_iter().map(|(c, _)| c).collect();
    let aggregates = aggregate(&methods, &cfg.fractions, &cells);
    let k = cfg.embed_dim_for(reps[0].train.len());
    Ok(ExperimentReport {
        payload: ExperimentPayload {
            format: RESULTS_FORMAT.into(),
            library_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            config: cfg.resolved(),
            resolved: ResolvedDefaults {
                embed_dim: k,
                plap: cfg.plap_config(2.0, k).into(),
                methods,
                repetitions: infos,
            },
            cells,
            aggregates,
        },
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            preparation_seconds,
            cells: timing_cells,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgridPoint {
    pub p: f64,
    /// Per repetition; `None` for failed cells.
    pub scores: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgridReport {
    /// `"accuracy"` for synthetic data, `"map"` otherwise.
    pub metric: String,
    pub fraction: f64,
    pub config_hash: String,
    pub points: Vec<PgridPoint>,
    /// Highest mean; the smaller p wins ties.
    pub best_p: Option<f64>,
    pub failed_cells: usize,
}

/// Single-candidate p-Laplacian regularization at `validation_fraction` for
/// every p in `p_grid`.
pub fn cmd_pgrid_validate(cfg: &ExperimentConfig) -> Result<PgridReport> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    let ps = distinct(cfg.p_grid.iter().copied());
    let (reps, _) = prepare_all(cfg, &ds, &ps, cfg.cache_dir.as_deref())?;
    let synthetic = cfg.data.is_synthetic();
    let mut jobs = Vec::new();
    for &p in &ps {
        for rep in &reps {
            jobs.push((p, rep));
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(p, rep)| {
            let method = MethodSpec {
                name: format!("pLapR(p={p})"),
                regularizer: Regularizer::PLaplacian { p_values: vec![p] },
                supervised: false,
            };
            run_cell(cfg, rep, &method, cfg.validation_fraction)
        })
        .collect();
    let failed_cells = cells.iter().filter(|c| !c.ok()).count();
    let points: Vec<PgridPoint> = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let scores: Vec<Option<f64>> = cells[i * reps.len()..(i + 1) * reps.len()]
                .iter()
                .map(|c| if synthetic { c.accuracy } else { c.map })
                .collect();
            let present: Vec<f64> = scores.iter().flatten().copied().collect();
            let (mean, std) = mean_std(&present);
            PgridPoint { p, scores, mean, std }
        })
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for pt in &points {
        if let Some(m) = pt.mean {
            if best.is_none_or(|(b, _)| m > b) {
                best = Some((m, pt.p));
            }
        }
    }
    Ok(PgridReport {
        metric: if synthetic { "accuracy" } else { "map" }.into(),
        fraction: cfg.validation_fraction,
        config_hash: cfg.hash(),
        points,
        best_p: best.map(|(_, p)| p),
        failed_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::TwoMoons {
                n: 60,
                noise: 0.08,
                seed: 1,
            },
            train_per_class: 15,
            fractions: vec![0.2],
            repetitions: 1,
            embed_dim: Some(8),
            plap_max_iters: 50,
            p_grid: vec![2.0, 2.5],
            plapr_p: 2.5,
            candidate_sets: vec![NamedSet {
                name: "E2".into(),
                p_values: vec![2.0, 2.5],
            }],
            gamma_a_grid: vec![1e-4],
            gamma_i_grid: vec![1.0],
            graph: GraphSpec {
                k_neighbors: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn toml_defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            fractions = [0.1]
            loss = "svm"
            [data]
            kind = "two_moons"
            n = 40
            noise = 0.1
            seed = 3
            [graph]
            k_neighbors = 7
            bandwidth = { fixed = 0.5 }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.loss, LossKind::Hinge);
        assert_eq!(cfg.graph.k_neighbors, 7);
        assert_eq!(cfg.graph.bandwidth, crate::linalg::Bandwidth::Fixed(0.5));
        assert_eq!(cfg.candidate_sets.len(), 2);
        assert_eq!(cfg.resolved_seeds(), vec![0, 1, 2, 3, 4]);
        assert!(ExperimentConfig::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn p_at_most_one_is_rejected() {
        for text in ["p_grid = [1.0, 2.0]", "plapr_p = 0.5", "candidate_sets = [{ name = \"x\", p_values = [1.0] }]"] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(err.contains("p > 1"), "{err}");
        }
        assert!(ExperimentConfig::from_toml_str("gamma_i_grid = []").is_err());
    }

    #[test]
    fn hash_ignores_paths() {
        let a = small();
        let b = ExperimentConfig {
            output: Some("x.json".into()),
            cache_dir: Some("/tmp/c".into()),
            ..small()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { plapr_p: 2.6, ..small() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn holdout_keeps_a_label_per_class() {
        let ds = make_two_moons(40, 0.1, 0).unwrap();
        let ds = mask_labels(&ds, 0.25, 0).unwrap();
        let held = holdout_split(&ds, 0.2, 9);
        assert_eq!(held.len(), 2);
        let tiny = mask_labels(&ds, 0.05, 0).unwrap();
        assert!(holdout_split(&tiny, 0.2, 9).is_empty());
    }

    #[test]
    fn experiment_cells_and_layout() {
        let report = cmd_experiment(&small()).unwrap();
        let p = &report.payload;
        let names: Vec<&str> = p.cells.iter().map(|c| c.method.as_str()).collect();
        assert_eq!(names, vec!["LapR", "pLapR", "E2"]);
        assert_eq!(report.failed_cells(), 0);
        for c in &p.cells {
            assert_eq!(c.selection, Some(Selection::SingletonGrid));
            assert_eq!(c.per_class_ap.len(), 2);
            assert!(c.accuracy.unwrap() > 0.5);
        }
        assert_eq!(p.cells[2].tasks[0].mu.len(), 2);
        assert_eq!(p.aggregates.len(), 3);
        assert_eq!(p.aggregates[0].map_std, Some(0.0));
    }

    #[test]
    fn failed_cells_are_recorded() {
        let cfg = ExperimentConfig {
            loss: LossKind::Hinge,
            gamma_a_grid: vec![0.0],
            gamma_i_grid: vec![0.0],
            kernel: KernelSpec {
                jitter: 0.0,
                kind: crate::kernel::KernelKind::Linear,
                ..Default::default()
            },
            include_supervised: true,
            ..small()
        };
        let report = cmd_experiment(&cfg).unwrap();
        assert_eq!(report.payload.cells.len(), 4);
        assert!(report.failed_cells() > 0);
        assert!(report.payload.cells.iter().all(|c| c.ok() || c.map.is_none()));
    }

    #[test]
    fn pgrid_shape() {
        let cfg = ExperimentConfig {
            p_grid: vec![1.5, 2.0, 2.5],
            validation_fraction: 0.2,
            ..small()
        };
        let r = cmd_pgrid_validate(&cfg).unwrap();
        assert_eq!(r.points.len(), 3);
        assert_eq!(r.metric, "accuracy");
        assert!(r.best_p.is_some());
        let single = cmd_pgrid_validate(&ExperimentConfig { p_grid: vec![2.0], ..cfg }).unwrap();
        assert_eq!(single.best_p, Some(2.0));
    }
}
