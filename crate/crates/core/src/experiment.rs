//! The end-to-end pipeline (data, graphs, SVM, subspaces, finite component,
//! training) and the named sweep experiments with their CSV/JSON artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, label_component_retention, pseudo_index_sets, pseudo_tpgs, RateBoundInputs,
};
use crate::attention::{
    cosine, geometric_radii, reg_path, train_gd, train_wfin, LossKind, Objective, References,
    RegPathConfig, Scoring, TrainConfig, TrainRecord, WfinOptions,
};
use crate::dataset::{
    gen_dataset, make_embeddings, make_head, Dataset, EmbeddingKind, GenMode, HeadKind,
    TokenIndexSets,
};
use crate::error::{Error, Result};
use crate::graph::{cyclic_split_from_sets, CyclicSplit, GraphSet};
use crate::linalg::Matrix;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::svm::{
    build_constraints, solve_graph_svm, subspaces, ConstraintSet, MatrixSubspace, Subspaces,
    SvmOptions, SvmSolution, SvmStatus,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Head used by generated instances; `None` scores by attention mass on the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Tied,
    General,
    None,
}

impl std::str::FromStr for HeadChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tied" => Ok(Self::Tied),
            "general" => Ok(Self::General),
            "none" | "masked" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub t: usize,
    pub mode: GenMode,
    pub embedding: EmbeddingKind,
    pub head: HeadChoice,
    pub noise: f64,
    pub loss: LossKind,
    pub seed: u64,
}

/// Dataset plus everything derived from it.
#[derive(Clone, Debug)]
pub struct Instance<T> {
    pub dataset: Dataset<T>,
    pub graphs: GraphSet,
    pub sets: Vec<TokenIndexSets>,
    pub constraints: ConstraintSet,
    pub fin: MatrixSubspace<T>,
    pub svm: SvmSolution<T>,
    pub split: CyclicSplit,
    pub objective: Objective<T>,
    pub cyclic: Objective<T>,
    pub w_fin: Matrix<T>,
}

pub fn generate_dataset<T: Scalar>(spec: &InstanceSpec) -> Result<Dataset<T>> {
    let e = make_embeddings::<T>(spec.k, spec.d, spec.embedding, derive_seed(spec.seed, 0))?;
    let head = match spec.head {
        HeadChoice::Tied => Some(make_head(&e, HeadKind::Tied, T::zero(), 0)?),
        // Unit label scores keep `u <= 1` under the squared loss, as with the tied head.
        HeadChoice::General => Some(
            make_head(
                &e,
                HeadKind::GeneralArgmax,
                T::of(spec.noise),
                derive_seed(spec.seed, 1),
            )?
            .with_unit_label_scores(&e)?,
        ),
        HeadChoice::None => None,
    };
    gen_dataset(&e, head.as_ref(), spec.n, spec.t, spec.mode, derive_seed(spec.seed, 2))
}

impl<T: Scalar> Instance<T> {
    pub fn generate(spec: &InstanceSpec) -> Result<Self> {
        let dataset = generate_dataset(spec)?;
        let scoring = Scoring::default_for(&dataset);
        Self::from_dataset(dataset, spec.loss, scoring, &SvmOptions::default())
    }

    pub fn from_dataset(
        dataset: Dataset<T>,
        loss: LossKind,
        scoring: Scoring,
        svm_opts: &SvmOptions,
    ) -> Result<Self> {
        let graphs = GraphSet::from_dataset(&dataset);
        let sets = crate::dataset::index_sets(&dataset.samples, &graphs)?;
        let constraints = build_constraints(&graphs);
        let fin = MatrixSubspace::span(&constraints.equalities, &dataset.embedding);
        let svm = solve_graph_svm(&constraints, &dataset.embedding, svm_opts);
        let split = cyclic_split_from_sets(&dataset.samples, &sets);
        let objective = Objective::new(&dataset, loss, scoring)?;
        let cyclic = Objective::cyclic(&dataset, &split, loss, scoring)?;
        let w_fin = train_wfin(&cyclic, &fin, &WfinOptions::default())?.w;
        Ok(Self {
            dataset,
            graphs,
            sets,
            constraints,
            fin,
            svm,
            split,
            objective,
            cyclic,
            w_fin,
        })
    }

    pub fn subspaces(&self) -> Subspaces<T> {
        subspaces(&self.graphs, &self.dataset.embedding)
    }

    pub fn references(&self) -> References<T> {
        References {
            w_svm: Some(self.svm.w.clone()),
            fin: Some(self.fin.clone()),
            w_fin: Some(self.w_fin.clone()),
            cyclic: Some(self.cyclic.clone()),
            svm_subspace: None,
        }
    }

    pub fn loss_inf(&self) -> Result<T> {
        crate::attention::loss_inf(&self.cyclic, &self.w_fin)
    }

    pub fn rate_inputs(&self) -> RateBoundInputs {
        RateBoundInputs::new(&self.dataset, &self.sets, &self.svm.w, &self.w_fin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    CyclicGlobal,
    AcyclicGlobal,
    LargeK,
    SccCount,
    Feasibility,
    LocalSquared,
    LocalCe,
    RateCheck,
    RegPath,
}

impl ExperimentName {
    pub const ALL: [Self; 9] = [
        Self::CyclicGlobal,
        Self::AcyclicGlobal,
        Self::LargeK,
        Self::SccCount,
        Self::Feasibility,
        Self::LocalSquared,
        Self::LocalCe,
        Self::RateCheck,
        Self::RegPath,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CyclicGlobal => "cyclic-global",
            Self::AcyclicGlobal => "acyclic-global",
            Self::LargeK => "large-k",
            Self::SccCount => "scc-count",
            Self::Feasibility => "feasibility",
            Self::LocalSquared => "local-squared",
            Self::LocalCe => "local-ce",
            Self::RateCheck => "rate-check",
            Self::RegPath => "reg-path",
        }
    }
}

impl std::str::FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Experiment parameters; unset fields take the experiment's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Swept values (`n` for scc-count, `d` for feasibility).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
}

impl Params {
    /// Fields set in `other` win.
    pub fn overlay(&self, other: &Params) -> Params {
        macro_rules! pick {
            ($($f:ident),*) => { Params { $($f: other.$f.clone().or_else(|| self.$f.clone()),)* } };
        }
        pick!(
            k, d, n, t, eta, iters, trials, seed, loss, head, normalized, noise, record_every,
            epsilon, grid, radii
        )
    }
}

/// Fully resolved parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// `None` means `1/L` (plain gradient descent runs).
    pub eta: Option<f64>,
    pub iters: usize,
    pub trials: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub head: HeadChoice,
    pub normalized: bool,
    pub noise: f64,
    pub record_every: usize,
    pub epsilon: f64,
    pub grid: Vec<usize>,
    pub radii: Vec<f64>,
}

pub const DEFAULT_SEED: u64 = 20_240_601;

impl Resolved {
    pub fn defaults(name: ExperimentName) -> Self {
        let base = Resolved {
            k: 6,
            d: 8,
            n: 6,
            t: 4,
            eta: Some(0.01),
            iters: 4000,
            trials: 20,
            seed: DEFAULT_SEED,
            loss: LossKind::Log,
            head: HeadChoice::Tied,
            normalized: true,
            noise: 0.3,
            record_every: 10,
            epsilon: analysis::DEFAULT_EPSILON,
            grid: Vec::new(),
            radii: Vec::new(),
        };
        match name {
            ExperimentName::CyclicGlobal => base,
            ExperimentName::AcyclicGlobal => Resolved {
                k: 8,
                n: 4,
                t: 6,
                ..base
            },
            ExperimentName::LargeK => Resolved {
                k: 1000,
                d: 32,
                n: 16,
                t: 64,
                head: HeadChoice::None,
                ..base
            },
            ExperimentName::SccCount => Resolved {
                grid: (0..10).map(|p| 1 << p).collect(),
                ..base
            },
            ExperimentName::Feasibility => Resolved {
                k: 64,
                n: 16,
                t: 16,
                eta: Some(0.1),
                iters: 2000,
                head: HeadChoice::None,
                grid: vec![2, 4, 8, 16, 32, 64],
                ..base
            },
            ExperimentName::LocalSquared | ExperimentName::LocalCe => Resolved {
                k: 8,
                n: 4,
                t: 6,
                eta: Some(0.1),
                head: HeadChoice::General,
                loss: if name == ExperimentName::LocalSquared {
                    LossKind::Squared
                } else {
                    LossKind::CrossEntropy
                },
                ..base
            },
            ExperimentName::RateCheck => Resolved {
                eta: None,
                iters: 100_000,
                normalized: false,
                record_every: 100,
                ..base
            },
            ExperimentName::RegPath => Resolved {
                radii: geometric_radii(1.0, 1e3, 13),
                ..base
            },
        }
    }

    pub fn resolve(name: ExperimentName, params: &Params) -> Result<Self> {
        let mut r = Self::defaults(name);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = params.$f.clone() { r.$f = v; })* };
        }
        set!(
            k, d, n, t, iters, trials, seed, loss, head, normalized, noise, record_every, epsilon,
            grid, radii
        );
        if params.eta.is_some() {
            r.eta = params.eta;
        }
        r.validate(name)?;
        Ok(r)
    }

    fn validate(&self, name: ExperimentName) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.d == 0 || self.n == 0 || self.t == 0 {
            return bad(format!("K, d, n, T must be >= 1 (got {}, {}, {}, {})", self.k, self.d, self.n, self.t));
        }
        if self.trials == 0 || self.iters == 0 || self.record_every == 0 {
            return bad("trials, iters and record_every must be >= 1".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta must be positive, got {eta}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.head == HeadChoice::None && self.loss == LossKind::CrossEntropy {
            return bad("cross-entropy needs a head".into());
        }
        if self.head != HeadChoice::None && self.k > self.d && name != ExperimentName::SccCount {
            return bad(format!("a head needs K <= d (got K={} d={}); use head=none", self.k, self.d));
        }
        match name {
            ExperimentName::SccCount | ExperimentName::Feasibility if self.grid.is_empty() => {
                bad("grid must not be empty".into())
            }
            ExperimentName::Feasibility if self.grid.contains(&0) => bad("d grid must be >= 1".into()),
            ExperimentName::RegPath
                if self.radii.is_empty()
                    || self.radii.windows(2).any(|w| w[1] <= w[0])
                    || self.radii[0] <= 0.0 =>
            {
                bad("radii must be positive and increasing".into())
            }
            _ => Ok(()),
        }
    }

    fn spec(&self, mode: GenMode, seed: u64) -> InstanceSpec {
        InstanceSpec {
            k: self.k,
            d: self.d,
            n: self.n,
            t: self.t,
            mode,
            embedding: EmbeddingKind::UnitSphere,
            head: self.head,
            noise: self.noise,
            loss: self.loss,
            seed,
        }
    }

    fn train_config(&self, eta: f64) -> TrainConfig<f64> {
        TrainConfig {
            eta,
            iters: self.iters,
            normalized: self.normalized,
            record_every: self.record_every,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: ExperimentName,
    #[serde(default)]
    pub params: Params,
    /// Overrides for the embedded acceptance thresholds, by check name.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    /// Worker threads for trials (default: available parallelism).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Where the CLI writes artifacts (default `runs/<name>`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<std::path::PathBuf>,
}

impl ExperimentConfig {
    pub fn new(name: ExperimentName) -> Self {
        Self {
            name,
            params: Params::default(),
            thresholds: BTreeMap::new(),
            workers: None,
            output_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "<=")]
    AtMost,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

/// One aggregated curve: `x, mean, stddev, trials` per row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    /// What the `x` column holds.
    pub x_label: String,
    pub rows: Vec<Row>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub x: f64,
    pub mean: f64,
    pub stddev: f64,
    pub trials: usize,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,mean,stddev,trials\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.x, r.mean, r.stddev, r.trials);
        }
        out
    }

    pub fn last_mean(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub name: ExperimentName,
    pub version: String,
    pub params: Resolved,
    pub thresholds: BTreeMap<String, f64>,
    /// Seed of every trial, in order.
    pub trial_seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub summary: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub tables: Vec<Table>,
    /// Per-trial traces, written as CSV when present.
    #[serde(skip)]
    pub traces: Vec<Vec<TrainRecord>>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `manifest.json`, `summary.json`, one CSV per table and per trace.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = serde_json::json!({
            "name": self.manifest.name,
            "version": self.manifest.version,
            "params": self.manifest.params,
            "thresholds": self.manifest.thresholds,
            "trial_seeds": self.manifest.trial_seeds,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        let summary = serde_json::json!({ "summary": self.summary, "checks": self.checks });
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        for t in &self.tables {
            std::fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
        }
        for (i, tr) in self.traces.iter().enumerate() {
            std::fs::write(dir.join(format!("trace_{i:03}.csv")), trace_csv(tr))?;
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iter,loss,loss_bar,grad_norm,w_norm,corr_svm,dist_fin`; absent values are empty.
pub fn trace_csv(records: &[TrainRecord]) -> String {
    let mut out = String::from("iter,loss,loss_bar,grad_norm,w_norm,corr_svm,dist_fin\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.loss,
            fmt_opt(r.loss_bar),
            r.grad_norm,
            r.w_norm,
            fmt_opt(r.corr_svm),
            fmt_opt(r.dist_fin)
        );
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn row(x: f64, values: &[f64]) -> Row {
    let (mean, stddev) = mean_std(values);
    Row {
        x,
        mean,
        stddev,
        trials: values.len(),
    }
}

/// Aggregates per-trial series sharing an x grid; missing values are skipped.
fn aggregate(name: &str, x_label: &str, xs: &[f64], series: &[Vec<Option<f64>>]) -> Table {
    let rows = xs
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let vals: Vec<f64> = series.iter().filter_map(|s| s.get(j).copied().flatten()).collect();
            row(x, &vals)
        })
        .collect();
    Table {
        name: name.into(),
        x_label: x_label.into(),
        rows,
    }
}

struct Checker<'a> {
    overrides: &'a BTreeMap<String, f64>,
    used: BTreeMap<String, f64>,
    checks: Vec<Check>,
}

impl<'a> Checker<'a> {
    fn new(overrides: &'a BTreeMap<String, f64>) -> Self {
        Self {
            overrides,
            used: BTreeMap::new(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, value: f64, comparison: Comparison, default: f64) {
        let threshold = self.overrides.get(name).copied().unwrap_or(default);
        self.used.insert(name.into(), threshold);
        let passed = match comparison {
            Comparison::AtLeast => value >= threshold,
            Comparison::AtMost => value <= threshold,
        };
        self.checks.push(Check {
            name: name.into(),
            value,
            comparison,
            threshold,
            passed,
        });
    }

    fn flag(&mut self, name: &str, ok: bool) {
        self.check(name, if ok { 1.0 } else { 0.0 }, Comparison::AtLeast, 1.0);
    }
}

fn run_trials<R: Send>(
    seeds: &[u64],
    workers: Option<usize>,
    f: impl Fn(u64) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    let go = || seeds.par_iter().map(|&s| f(s)).collect::<Result<Vec<R>>>();
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(go),
        None => go(),
    }
}

struct GlobalTrial {
    records: Vec<TrainRecord>,
    final_corr: Option<f64>,
    final_dist: f64,
}

fn global_trial(p: &Resolved, mode: GenMode, seed: u64) -> Result<GlobalTrial> {
    let inst = Instance::<f64>::generate(&p.spec(mode, seed))?;
    let eta = p.eta.unwrap_or_else(|| 1.0 / inst.objective.lipschitz_log());
    let cfg = TrainConfig {
        seed: derive_seed(seed, 3),
        ..p.train_config(eta)
    };
    let trace = train_gd(&inst.objective, &cfg, &inst.references())?;
    trace.check()?;
    let last = trace.last().expect("at least one record");
    Ok(GlobalTrial {
        final_corr: last.corr_svm,
        final_dist: last.dist_fin.unwrap_or(0.0),
        records: trace.records,
    })
}

/// Summary values, aggregate tables and per-trial traces.
type GlobalOutput = (BTreeMap<String, f64>, Vec<Table>, Vec<Vec<TrainRecord>>);

fn global_experiment(
    cfg: &ExperimentConfig,
    p: &Resolved,
    seeds: &[u64],
    mode: GenMode,
    checker: &mut Checker,
) -> Result<GlobalOutput> {
    let trials = run_trials(seeds, cfg.workers, |s| global_trial(p, mode, s))?;
    let xs: Vec<f64> = trials[0].records.iter().map(|r| r.iter as f64).collect();
    let corr: Vec<Vec<Option<f64>>> = trials
        .iter()
        .map(|t| t.records.iter().map(|r| r.corr_svm).collect())
        .collect();
    let dist: Vec<Vec<Option<f64>>> = trials
        .iter()
        .map(|t| t.records.iter().map(|r| r.dist_fin).collect())
        .collect();
    let finals: Vec<f64> = trials.iter().filter_map(|t| t.final_corr).collect();
    let dists: Vec<f64> = trials.iter().map(|t| t.final_dist).collect();
    let (mc, sc) = mean_std(&finals);
    let (md, sd) = mean_std(&dists);
    let mut summary = BTreeMap::new();
    summary.insert("mean_corr".into(), mc);
    summary.insert("std_corr".into(), sc);
    summary.insert("mean_dist".into(), md);
    summary.insert("std_dist".into(), sd);
    summary.insert("trials_with_svm".into(), finals.len() as f64);
    match cfg.name {
        ExperimentName::AcyclicGlobal => checker.check("mean_corr", mc, Comparison::AtLeast, 0.97),
        _ => {
            checker.check("mean_corr", mc, Comparison::AtLeast, 0.95);
            if cfg.name == ExperimentName::CyclicGlobal {
                checker.check("mean_dist", md, Comparison::AtMost, 0.05);
            }
        }
    }
    let tables = vec![
        aggregate("corr", "iter", &xs, &corr),
        aggregate("dist", "iter", &xs, &dist),
    ];
    Ok((summary, tables, trials.into_iter().map(|t| t.records).collect()))
}

/// Mean total component count per grid point, plus the mean number of graphs at
/// the last grid point.
fn scc_count(p: &Resolved, seeds: &[u64], workers: Option<usize>) -> Result<(Table, f64)> {
    let per_trial = run_trials(seeds, workers, |seed| {
        p.grid
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let spec = InstanceSpec {
                    n,
                    head: HeadChoice::None,
                    ..p.spec(GenMode::Cyclic, derive_seed(seed, j as u64))
                };
                let ds = generate_dataset::<f64>(&spec)?;
                let g = GraphSet::from_dataset(&ds);
                Ok((g.total_components() as f64, g.iter().count() as f64))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let counts: Vec<Vec<Option<f64>>> = per_trial
        .iter()
        .map(|t| t.iter().map(|c| Some(c.0)).collect())
        .collect();
    let graphs: Vec<f64> = per_trial.iter().map(|t| t[t.len() - 1].1).collect();
    let xs: Vec<f64> = p.grid.iter().map(|&n| n as f64).collect();
    Ok((aggregate("scc_count", "n", &xs, &counts), mean_std(&graphs).0))
}

fn feasibility(p: &Resolved, seeds: &[u64], workers: Option<usize>) -> Result<Table> {
    let per_trial = run_trials(seeds, workers, |seed| {
        p.grid
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                let spec = InstanceSpec {
                    d,
                    head: HeadChoice::None,
                    ..p.spec(GenMode::Cyclic, derive_seed(seed, j as u64))
                };
                let ds = generate_dataset::<f64>(&spec)?;
                let graphs = GraphSet::from_dataset(&ds);
                let obj = Objective::new(&ds, p.loss, Scoring::Masked)?;
                let trace = train_gd(&obj, &p.train_config(p.eta.unwrap_or(0.1)), &References::default())?;
                trace.check()?;
                Ok(Some(label_component_retention(&trace.w, &ds, &graphs, p.epsilon)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let xs: Vec<f64> = p.grid.iter().map(|&d| d as f64).collect();
    Ok(aggregate("feasibility", "d", &xs, &per_trial))
}

#[derive(Clone, Debug)]
pub struct LocalTrial {
    pub corr_global: Option<f64>,
    pub corr_local: Option<f64>,
    pub dist_global: f64,
    pub dist_local: f64,
    pub local_cyclic_empty: bool,
}

/// Trains on the dataset, rebuilds graphs from the trained attention and compares
/// the trained weights against the dataset-level and the pseudo-graph solutions.
pub fn local_trial(p: &Resolved, seed: u64) -> Result<LocalTrial> {
    let inst = Instance::<f64>::generate(&p.spec(GenMode::Cyclic, seed))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, 3),
        ..p.train_config(p.eta.unwrap_or(0.1))
    };
    let trace = train_gd(&inst.objective, &cfg, &References::default())?;
    trace.check()?;
    let w = &trace.w;
    let e = &inst.dataset.embedding;

    let (pgraphs, plabels) = pseudo_tpgs(w, &inst.dataset, p.epsilon);
    let psets = pseudo_index_sets(&inst.dataset, &pgraphs, &plabels)?;
    let pconstraints = build_constraints(&pgraphs);
    let pfin = MatrixSubspace::span(&pconstraints.equalities, e);
    let psvm = solve_graph_svm(&pconstraints, e, &SvmOptions::default());
    let pcyclic = analysis::reduced_objective(&inst.dataset, &psets, &inst.objective)?;
    let pw_fin = train_wfin(&pcyclic, &pfin, &WfinOptions::default())?.w;

    let corr_local = (psvm.status == SvmStatus::Solved)
        .then(|| cosine(w, &psvm.w))
        .flatten();
    Ok(LocalTrial {
        corr_global: cosine(w, &inst.svm.w),
        corr_local,
        dist_global: (&inst.fin.project(w) - &inst.w_fin).frob_norm(),
        dist_local: (&pfin.project(w) - &pw_fin).frob_norm(),
        local_cyclic_empty: pcyclic.is_empty(),
    })
}

/// Plain gradient descent with `η = 1/L` from zero; returns `(τ, gap, bound)` per
/// recorded iteration with `τ >= 1`.
pub fn rate_trial(p: &Resolved, seed: u64) -> Result<Vec<(usize, f64, f64)>> {
    let inst = Instance::<f64>::generate(&p.spec(GenMode::Cyclic, seed))?;
    let eta = p.eta.unwrap_or_else(|| 1.0 / inst.objective.lipschitz_log());
    let cfg = TrainConfig {
        normalized: false,
        ..p.train_config(eta)
    };
    let trace = train_gd(&inst.objective, &cfg, &References::default())?;
    trace.check()?;
    let loss_inf = inst.loss_inf()?;
    let inputs = inst.rate_inputs();
    Ok(trace
        .records
        .iter()
        .filter(|r| r.iter >= 1)
        .map(|r| {
            let bound = analysis::rate_bound(&inputs, r.iter, eta * r.iter as f64);
            (r.iter, r.loss - loss_inf, bound)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct RegPathTrial {
    pub radii: Vec<f64>,
    pub corr: Vec<Option<f64>>,
    pub dist_fin: Vec<f64>,
    pub converged: Vec<bool>,
}

pub fn reg_path_trial(p: &Resolved, mode: GenMode, seed: u64) -> Result<RegPathTrial> {
    let inst = Instance::<f64>::generate(&p.spec(mode, seed))?;
    let cfg = RegPathConfig {
        radii: p.radii.clone(),
        seed: derive_seed(seed, 4),
        ..RegPathConfig::default()
    };
    let path = reg_path(&inst.objective, &cfg)?;
    Ok(RegPathTrial {
        radii: p.radii.clone(),
        corr: path.iter().map(|pt| cosine(&pt.w, &inst.svm.w)).collect(),
        dist_fin: path
            .iter()
            .map(|pt| (&inst.fin.project(&pt.w) - &inst.w_fin).frob_norm())
            .collect(),
        converged: path.iter().map(|pt| pt.converged).collect(),
    })
}

/// Whether a curve is non-decreasing from index `from` on, up to `slack`.
pub fn non_decreasing_from(values: &[f64], from: usize, slack: f64) -> bool {
    values
        .iter()
        .skip(from)
        .collect::<Vec<_>>()
        .windows(2)
        .all(|w| *w[1] >= *w[0] - slack)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let p = Resolved::resolve(cfg.name, &cfg.params)?;
    let seeds: Vec<u64> = (0..p.trials as u64).map(|i| derive_seed(p.seed, i)).collect();
    let mut checker = Checker::new(&cfg.thresholds);
    let mut summary = BTreeMap::new();
    let mut tables = Vec::new();
    let mut traces = Vec::new();
    match cfg.name {
        ExperimentName::CyclicGlobal | ExperimentName::LargeK => {
            let (s, t, tr) = global_experiment(cfg, &p, &seeds, GenMode::Cyclic, &mut checker)?;
            (summary, tables, traces) = (s, t, tr);
        }
        ExperimentName::AcyclicGlobal => {
            let (s, t, tr) = global_experiment(cfg, &p, &seeds, GenMode::Acyclic, &mut checker)?;
            (summary, tables, traces) = (s, t, tr);
        }
        ExperimentName::SccCount => {
            let (t, graphs_at_last) = scc_count(&p, &seeds, cfg.workers)?;
            let means: Vec<f64> = t.rows.iter().map(|r| r.mean).collect();
            // The count first grows while new last tokens keep adding graphs; the
            // collapse is the part after the peak.
            let peak = (0..means.len())
                .max_by(|&a, &b| means[a].total_cmp(&means[b]).then(b.cmp(&a)))
                .expect("non-empty grid");
            summary.insert("first_mean".into(), means[0]);
            summary.insert("peak_mean".into(), means[peak]);
            summary.insert("peak_n".into(), t.rows[peak].x);
            summary.insert("last_mean".into(), means[means.len() - 1]);
            summary.insert("last_graphs".into(), graphs_at_last);
            checker.flag(
                "non_increasing_after_peak",
                means[peak..].windows(2).all(|w| w[1] <= w[0] + 1e-12),
            );
            checker.check(
                "last_components_per_graph",
                means[means.len() - 1] / graphs_at_last,
                Comparison::AtMost,
                1.0 + 1e-12,
            );
            tables.push(t);
        }
        ExperimentName::Feasibility => {
            let t = feasibility(&p, &seeds, cfg.workers)?;
            for r in &t.rows {
                summary.insert(format!("proportion_d{}", r.x), r.mean);
            }
            if let Some(r) = t.rows.iter().find(|r| r.x as usize == p.k) {
                checker.check("deviation_at_d_eq_k", (r.mean - 1.0).abs(), Comparison::AtMost, 0.02);
            }
            tables.push(t);
        }
        ExperimentName::LocalSquared | ExperimentName::LocalCe => {
            let trials = run_trials(&seeds, cfg.workers, |s| local_trial(&p, s))?;
            // Trials where either correlation is undefined are left out of both means.
            let paired: Vec<(f64, f64)> = trials
                .iter()
                .filter_map(|t| Some((t.corr_global?, t.corr_local?)))
                .collect();
            let (cg, _) = mean_std(&paired.iter().map(|p| p.0).collect::<Vec<_>>());
            let (cl, _) = mean_std(&paired.iter().map(|p| p.1).collect::<Vec<_>>());
            let (dg, _) = mean_std(&trials.iter().map(|t| t.dist_global).collect::<Vec<_>>());
            let (dl, _) = mean_std(&trials.iter().map(|t| t.dist_local).collect::<Vec<_>>());
            summary.insert("mean_corr_global".into(), cg);
            summary.insert("mean_corr_local".into(), cl);
            summary.insert("mean_dist_global".into(), dg);
            summary.insert("mean_dist_local".into(), dl);
            summary.insert("paired_trials".into(), paired.len() as f64);
            summary.insert(
                "local_cyclic_empty".into(),
                trials.iter().filter(|t| t.local_cyclic_empty).count() as f64,
            );
            checker.check("corr_local_minus_global", cl - cg, Comparison::AtLeast, 0.0);
            checker.check("dist_local_minus_global", dl - dg, Comparison::AtMost, 0.0);
        }
        ExperimentName::RateCheck => {
            let trials = run_trials(&seeds, cfg.workers, |s| rate_trial(&p, s))?;
            let violations: usize = trials
                .iter()
                .flatten()
                .filter(|(_, gap, bound)| gap > bound)
                .count();
            let worst = trials
                .iter()
                .flatten()
                .map(|(_, gap, bound)| gap / bound)
                .fold(f64::NEG_INFINITY, f64::max);
            let xs: Vec<f64> = trials[0].iter().map(|r| r.0 as f64).collect();
            let gaps: Vec<Vec<Option<f64>>> =
                trials.iter().map(|t| t.iter().map(|r| Some(r.1)).collect()).collect();
            let bounds: Vec<Vec<Option<f64>>> =
                trials.iter().map(|t| t.iter().map(|r| Some(r.2)).collect()).collect();
            tables.push(aggregate("gap", "iter", &xs, &gaps));
            tables.push(aggregate("bound", "iter", &xs, &bounds));
            summary.insert("violations".into(), violations as f64);
            summary.insert("max_gap_over_bound".into(), worst);
            checker.check("violations", violations as f64, Comparison::AtMost, 0.0);
        }
        ExperimentName::RegPath => {
            for (mode, label) in [(GenMode::Acyclic, "acyclic"), (GenMode::Cyclic, "cyclic")] {
                let trials = run_trials(&seeds, cfg.workers, |s| reg_path_trial(&p, mode, s))?;
                let corr: Vec<Vec<Option<f64>>> = trials.iter().map(|t| t.corr.clone()).collect();
                let dist: Vec<Vec<Option<f64>>> = trials
                    .iter()
                    .map(|t| t.dist_fin.iter().map(|&v| Some(v)).collect())
                    .collect();
                let ct = aggregate(&format!("{label}_corr"), "radius", &p.radii, &corr);
                let dt = aggregate(&format!("{label}_dist"), "radius", &p.radii, &dist);
                let unconverged: usize = trials
                    .iter()
                    .map(|t| t.converged.iter().filter(|c| !**c).count())
                    .sum();
                summary.insert(format!("{label}_unconverged_radii"), unconverged as f64);
                let means: Vec<f64> = ct.rows.iter().map(|r| r.mean).collect();
                summary.insert(format!("{label}_final_corr"), *means.last().expect("radii"));
                summary.insert(format!("{label}_final_dist"), dt.last_mean().expect("radii"));
                if mode == GenMode::Acyclic {
                    checker.check("acyclic_final_corr", *means.last().expect("radii"), Comparison::AtLeast, 0.95);
                    checker.flag("acyclic_corr_non_decreasing", non_decreasing_from(&means, 3, 1e-9));
                } else {
                    checker.check("cyclic_final_dist", dt.last_mean().expect("radii"), Comparison::AtMost, 0.1);
                }
                tables.push(ct);
                tables.push(dt);
            }
        }
    }
    Ok(ExperimentReport {
        manifest: Manifest {
            name: cfg.name,
            version: VERSION.into(),
            params: p,
            thresholds: checker.used,
            trial_seeds: seeds,
        },
        summary,
        checks: checker.checks,
        tables,
        traces,
    })
}

/// Reads a config (or a manifest written by [`ExperimentReport::write`]).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    if let Some(obj) = value.as_object_mut() {
        // Manifests carry run metadata that is not part of a config.
        obj.remove("version");
        obj.remove("trial_seeds");
    }
    Ok(serde_json::from_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in ExperimentName::ALL {
            assert_eq!(n.as_str().parse::<ExperimentName>().unwrap(), n);
        }
    }

    #[test]
    fn overlay_prefers_the_second() {
        let a = Params {
            k: Some(3),
            d: Some(4),
            ..Params::default()
        };
        let b = Params {
            d: Some(9),
            ..Params::default()
        };
        let c = a.overlay(&b);
        assert_eq!((c.k, c.d), (Some(3), Some(9)));
    }

    #[test]
    fn invalid_params_are_config_errors() {
        let p = Params {
            eta: Some(-1.0),
            ..Params::default()
        };
        assert!(matches!(
            Resolved::resolve(ExperimentName::CyclicGlobal, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scc_count_trivial_point() {
        let cfg = ExperimentConfig {
            params: Params {
                grid: Some(vec![1]),
                t: Some(1),
                trials: Some(3),
                ..Params::default()
            },
            ..ExperimentConfig::new(ExperimentName::SccCount)
        };
        let r = run_experiment(&cfg).unwrap();
        let t = &r.tables[0];
        assert_eq!(t.rows[0].mean, 1.0);
    }
}
