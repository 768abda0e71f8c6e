//! Command-line front end: simulation, verification, training, evaluation and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load, write_features, Dataset, DatasetSpec, Source};
use crate::error::{Error, Result};
use crate::loss::LossDecomposition;
use crate::math::{CoefficientForm, Prior, PriorFamily};
use crate::model::Hypothesis;
use crate::oracle::{self, EnumerationInstance, GridSpec, MonteCarloFixture, RobustSpec};
use crate::sim::{generate_attribution_sets, LabeledStream, OracleFile, SetFile, SyntheticTask};
use crate::train::{
    best_by_mean, evaluate, log_spaced, metrics_from_predictions, train, Algorithm, Metrics, Supervision,
    TrainConfig, TrainReport,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label used in output rows.
    pub name: String,
    pub dataset: DatasetSpec,
    pub priors: Vec<PriorFamily>,
    pub k: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub lr_grid: Vec<f64>,
    pub repetitions: usize,
    pub epochs: usize,
    /// Epoch count for the label-based algorithms; `epochs` when absent.
    pub baseline_epochs: Option<usize>,
    /// Repetition r uses seed `seed + r`.
    pub seed: u64,
    pub out: PathBuf,
    /// Remaining training settings; algorithm, learning rate, epochs and seed are set per cell.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = SyntheticTask::shifted_gaussians(10, 0.1, 4.0).expect("valid default task");
        Self {
            name: "synthetic".into(),
            dataset: DatasetSpec::new(Source::Synthetic {
                task,
                n_train: 20_000,
                n_test: 5_000,
                seed: 0,
            }),
            priors: vec![PriorFamily::Uniform],
            k: (0..=8).map(|i| 1 << i).collect(),
            algorithms: vec![Algorithm::Unbiased, Algorithm::Random, Algorithm::MaxPrior],
            lr_grid: log_spaced(1e-6, 1e-2, 10),
            repetitions: 10,
            epochs: 50,
            baseline_epochs: None,
            seed: 0,
            out: PathBuf::from("out"),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k.is_empty() || self.k.contains(&0) {
            return Err(Error::Config("k list must be non-empty and positive".into()));
        }
        if self.priors.is_empty() || self.algorithms.is_empty() || self.lr_grid.is_empty() {
            return Err(Error::Config("priors, algorithms and lr_grid must be non-empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        for family in &self.priors {
            for &k in &self.k {
                family.build(k)?;
            }
        }
        for &lr in &self.lr_grid {
            TrainConfig { lr, ..self.train.clone() }.validate()?;
        }
        if let Source::Synthetic { task, .. } = &self.dataset.source {
            task.validate()?;
        }
        Ok(())
    }

    fn epochs_for(&self, algorithm: Algorithm) -> usize {
        match algorithm {
            Algorithm::Unbiased => self.epochs,
            _ => self.baseline_epochs.unwrap_or(self.epochs),
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for family in &self.priors {
            for &k in &self.k {
                for &algorithm in &self.algorithms {
                    for &lr in &self.lr_grid {
                        for rep in 0..self.repetitions {
                            out.push(Cell {
                                dataset: self.name.clone(),
                                algorithm,
                                prior: family.clone(),
                                k,
                                lr,
                                rep,
                                seed: self.seed.wrapping_add(rep as u64),
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One (dataset, algorithm, prior, k, lr, repetition) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub prior: PriorFamily,
    pub k: usize,
    pub lr: f64,
    pub rep: usize,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}-k{}-lr{:e}-rep{}-seed{}",
            self.dataset,
            self.algorithm.name(),
            self.prior.name(),
            self.k,
            self.lr,
            self.rep,
            self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub metrics: Option<Metrics>,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Whether k exceeds np/8 on this training set.
pub fn outside_regime(train: &Dataset, k: usize) -> bool {
    k as f64 > train.len() as f64 * train.positive_rate() / 8.0
}

/// Draws the attribution sets for `train` and fits one model. Attribution and training
/// both use `seed`, so a cell is reproduced from its seed alone.
pub fn run_cell(
    train_set: &Dataset,
    test: &Dataset,
    prior: &Prior,
    algorithm: Algorithm,
    base: &TrainConfig,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<TrainReport> {
    let config = TrainConfig {
        algorithm,
        lr,
        epochs,
        seed,
        ..base.clone()
    };
    if algorithm == Algorithm::Supervised {
        return train(&train_set.features, Supervision::Labels(&train_set.labels), &config, Some(test));
    }
    let stream = LabeledStream::from_dataset(train_set.clone())?;
    let attribution = generate_attribution_sets(&stream, prior, seed);
    let half = stream.n() / 2;
    let first_half_conversions = stream.conversions().iter().filter(|&&c| c < half).count();
    train(
        &train_set.features,
        Supervision::AttributionSets {
            sets: &attribution.sets,
            prior,
            first_half_conversions,
        },
        &config,
        Some(test),
    )
}

fn execute(config: &ExperimentConfig, cell: &Cell, train_set: &Dataset, test: &Dataset) -> CellResult {
    let outcome = cell.prior.build(cell.k).and_then(|prior| {
        run_cell(
            train_set,
            test,
            &prior,
            cell.algorithm,
            &config.train,
            cell.lr,
            config.epochs_for(cell.algorithm),
            cell.seed,
        )
    });
    match outcome {
        Ok(report) => CellResult {
            cell: cell.clone(),
            metrics: report.metrics,
            seconds: report.seconds,
            error: None,
        },
        Err(e) => CellResult {
            cell: cell.clone(),
            metrics: None,
            seconds: 0.0,
            error: Some(e.to_string()),
        },
    }
}

pub const CSV_HEADER: &str = "dataset,algorithm,prior,k,lr,rep,seed,accuracy,log_loss,f1,seconds,status,error";

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        let c = &self.cell;
        let (acc, ll, f1) = match &self.metrics {
            Some(m) => (m.accuracy.to_string(), m.log_loss.to_string(), m.f1.to_string()),
            None => Default::default(),
        };
        let status = if self.error.is_some() { "error" } else { "ok" };
        [
            quote(&c.dataset),
            c.algorithm.name().into(),
            c.prior.name().into(),
            c.k.to_string(),
            c.lr.to_string(),
            c.rep.to_string(),
            c.seed.to_string(),
            acc,
            ll,
            f1,
            self.seconds.to_string(),
            status.into(),
            quote(self.error.as_deref().unwrap_or("")),
        ]
        .join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub algorithm: Algorithm,
    pub prior: String,
    pub k: usize,
    pub best_lr: f64,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n - 1) across repetitions at the best learning rate.
    pub std_accuracy: f64,
    pub repetitions: usize,
}

pub const SUMMARY_HEADER: &str = "dataset,algorithm,prior,k,best_lr,mean_accuracy,sample_std_accuracy,repetitions";

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            quote(&self.dataset),
            self.algorithm.name(),
            self.prior,
            self.k,
            self.best_lr,
            self.mean_accuracy,
            self.std_accuracy,
            self.repetitions
        )
    }
}

/// Best average accuracy over learning rates for every (dataset, algorithm, prior, k).
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    type Key = (String, &'static str, &'static str, usize);
    let mut groups: BTreeMap<Key, (Algorithm, BTreeMap<u64, (f64, Vec<f64>)>)> = BTreeMap::new();
    for r in results {
        let Some(m) = &r.metrics else { continue };
        let c = &r.cell;
        let key = (c.dataset.clone(), c.algorithm.name(), c.prior.name(), c.k);
        let entry = groups.entry(key).or_insert_with(|| (c.algorithm, BTreeMap::new()));
        entry.1.entry(c.lr.to_bits()).or_insert_with(|| (c.lr, Vec::new())).1.push(m.accuracy);
    }
    groups
        .into_iter()
        .filter_map(|((dataset, _, prior, k), (algorithm, by_lr))| {
            let per_lr: Vec<(f64, Vec<f64>)> = by_lr.into_values().collect();
            let (lr, mean, std) = best_by_mean(&per_lr, true)?;
            let reps = per_lr.iter().find(|(l, _)| *l == lr).map_or(0, |(_, xs)| xs.len());
            Some(SummaryRow {
                dataset,
                algorithm,
                prior: prior.into(),
                k,
                best_lr: lr,
                mean_accuracy: mean,
                std_accuracy: std,
                repetitions: reps,
            })
        })
        .collect()
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub results: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    /// Cells skipped because a done marker already existed.
    pub resumed: usize,
}

/// Runs every cell not yet marked done under `config.out/cells`, appending rows to
/// `results.csv` as they finish, then rewrites `results.csv` and `summary.csv` in grid order.
pub fn sweep(config: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    config.validate()?;
    let (train_set, test) = load(&config.dataset)?;
    for &k in &config.k {
        if outside_regime(&train_set, k) {
            log::warn!(
                "{}: k = {k} exceeds np/8 = {:.1}",
                config.name,
                train_set.len() as f64 * train_set.positive_rate() / 8.0
            );
        }
    }
    let out = &config.out;
    let markers = out.join("cells");
    ensure_dir(&markers)?;
    let cells = config.cells();
    let mut done: BTreeMap<String, CellResult> = BTreeMap::new();
    for cell in &cells {
        let path = markers.join(format!("{}.json", cell.id()));
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str::<CellResult>(&text) {
                Ok(r) if r.cell == *cell => {
                    done.insert(cell.id(), r);
                }
                _ => log::warn!("ignoring unreadable marker {}", path.display()),
            }
        }
    }
    let resumed = done.len();
    let pending: Vec<&Cell> = cells.iter().filter(|c| !done.contains_key(&c.id())).collect();
    log::info!("{} cells, {} already done", cells.len(), resumed);

    let csv_path = out.join("results.csv");
    let fresh = !csv_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let writer = Mutex::new(BufWriter::new(file));
    if fresh {
        writeln!(writer.lock().expect("writer lock"), "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let fresh_results: Vec<CellResult> = pool.install(|| {
        pending
            .par_iter()
            .map(|cell| {
                let result = execute(config, cell, &train_set, &test);
                if let Some(err) = &result.error {
                    log::error!("cell {} failed: {err}", cell.id());
                } else {
                    let path = markers.join(format!("{}.json", cell.id()));
                    match serde_json::to_string(&result) {
                        Ok(text) => {
                            if let Err(e) = fs::write(&path, text) {
                                log::error!("cannot write marker {}: {e}", path.display());
                            }
                        }
                        Err(e) => log::error!("cannot encode cell {}: {e}", cell.id()),
                    }
                }
                let mut w = writer.lock().expect("writer lock");
                if let Err(e) = writeln!(w, "{}", result.csv_row()).and_then(|_| w.flush()) {
                    log::error!("cannot append to {}: {e}", csv_path.display());
                }
                result
            })
            .collect()
    });
    drop(writer);
    for r in fresh_results {
        done.insert(r.cell.id(), r);
    }
    let results: Vec<CellResult> = cells.iter().filter_map(|c| done.remove(&c.id())).collect();
    write_lines(&csv_path, CSV_HEADER, results.iter().map(CellResult::csv_row))?;
    let summary = summarize(&results);
    write_lines(&out.join("summary.csv"), SUMMARY_HEADER, summary.iter().map(SummaryRow::csv_row))?;
    Ok(SweepOutcome {
        results,
        summary,
        resumed,
    })
}

/// Writes the learner file, the oracle-only file and the feature table for one k.
pub fn simulate(config: &ExperimentConfig, k: usize, out: &Path) -> Result<()> {
    let (train_set, _) = load(&config.dataset)?;
    let family = config.priors.first().ok_or_else(|| Error::Config("no prior configured".into()))?;
    let prior = family.build(k)?;
    if outside_regime(&train_set, k) {
        log::warn!("{}: k = {k} exceeds np/8", config.name);
    }
    let stream = LabeledStream::from_dataset(train_set.clone())?;
    let attribution = generate_attribution_sets(&stream, &prior, config.seed);
    ensure_dir(out)?;
    let sets = SetFile {
        n: stream.n(),
        p_hat: stream.m() as f64 / stream.n() as f64,
        k,
        prior,
        sets: attribution.sets,
    };
    let path = out.join("sets.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    sets.write(&mut w)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join("oracle.jsonl");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    OracleFile {
        labels: train_set.labels.clone(),
        true_positions: attribution.true_positions,
    }
    .write(&mut w)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_features(&out.join("features.csv"), &train_set.features)
}

/// Reads a learner file written by [`simulate`].
pub fn read_sets(path: &Path) -> Result<SetFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    SetFile::read(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { offset, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        },
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifySection {
    pub name: String,
    pub checks: usize,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl VerifySection {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            checks: 0,
            failures: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(detail());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub sections: Vec<VerifySection>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.sections.iter().all(VerifySection::passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Negate beta0 in the unbiasedness grid.
    Beta0Sign,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub fixtures: PathBuf,
    pub replicates: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

pub fn grid_section(spec: &GridSpec, form: CoefficientForm) -> Result<VerifySection> {
    let mut s = VerifySection::new("unbiasedness grid");
    for row in oracle::run_grid(spec, form)? {
        s.check(row.pass, || {
            format!(
                "n={} p={} k={} prior={} loss={} h={} {}: {} vs {}",
                row.n, row.p, row.k, row.prior, row.loss, row.hypothesis, row.target, row.expected, row.population
            )
        });
    }
    Ok(s)
}

/// Exact rational check of the one-position marginal for every n <= `max_n`.
pub fn marginal_identity_section(max_n: usize) -> Result<VerifySection> {
    let mut s = VerifySection::new("one-position marginal (rational)");
    let ps = [
        BigRational::new(BigInt::from(1), BigInt::from(2)),
        BigRational::new(BigInt::from(3), BigInt::from(10)),
    ];
    for c in oracle::marginal_identity_grid(max_n, &ps, &[1, 2, 3])? {
        s.check(c.holds(), || {
            format!("n={} j={} k={} t={} {:?}: {} vs {}", c.n, c.j, c.k, c.t, c.side, c.enumerated, c.closed_form)
        });
    }
    Ok(s)
}

/// Conditional feature laws on the grid domain for n in `ns`.
pub fn conditional_law_section(spec: &GridSpec, ns: &[usize]) -> Result<VerifySection> {
    let mut s = VerifySection::new("conditional feature laws");
    let mut empty = 0;
    let loss = crate::loss::square_loss();
    for &n in ns {
        for &p in &spec.p {
            for &k in &spec.k {
                if n < 2 * k {
                    continue;
                }
                let inst = EnumerationInstance::new(
                    n,
                    p,
                    Prior::uniform(k),
                    spec.domain.clone(),
                    vec![0.5; spec.domain.size()],
                    loss,
                )?;
                for law in oracle::conditional_laws(&inst)? {
                    match law.total_variation {
                        Some(tv) => s.check(tv <= 1e-10, || {
                            format!("n={n} p={p} k={k} j={} t={} {:?} y={}: tv {tv:e}", law.j, law.t, law.side, law.label)
                        }),
                        None => empty += 1,
                    }
                }
            }
        }
    }
    s.notes.push(format!("{empty} conditioning events have probability zero"));
    Ok(s)
}

pub fn robust_section(spec: &RobustSpec) -> Result<VerifySection> {
    let mut s = VerifySection::new("estimated-prior bias");
    for (name, checks) in oracle::run_robust(spec)? {
        for c in &checks {
            if c.l2 * c.l2 <= c.sigma / 8.0 {
                s.check(c.bias <= c.bound, || format!("{name} eps={}: bias {} > bound {}", c.eps, c.bias, c.bound));
            } else {
                s.notes.push(format!("{name} eps={}: perturbation too large for the bound", c.eps));
            }
        }
        let mut by_eps = checks.clone();
        by_eps.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        for w in by_eps.windows(2) {
            s.check(w[1].bias <= w[0].bias + 1e-12, || {
                format!("{name}: bias {} at eps={} exceeds {} at eps={}", w[1].bias, w[1].eps, w[0].bias, w[0].eps)
            });
        }
    }
    Ok(s)
}

pub fn monte_carlo_section(fixtures: &[MonteCarloFixture], replicates: usize, seed: u64) -> Result<VerifySection> {
    let mut s = VerifySection::new("simulator agreement");
    for (idx, f) in fixtures.iter().enumerate() {
        let r = oracle::monte_carlo(&f.instance()?, f.j_max, replicates, seed.wrapping_add(idx as u64))?;
        s.check(r.z_score().abs() <= 4.0, || {
            format!("{}: mean {} vs exact {} ({:.2} SE)", f.name, r.mean, r.exact, r.z_score())
        });
        s.notes.push(format!("{}: z = {:.2}", f.name, r.z_score()));
    }
    Ok(s)
}

pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let grid: GridSpec = oracle::load_fixture(&opts.fixtures, "grid.json")?;
    let robust: RobustSpec = oracle::load_fixture(&opts.fixtures, "robust.json")?;
    let mc: Vec<MonteCarloFixture> = oracle::load_fixture(&opts.fixtures, "monte_carlo.json")?;
    let form = match opts.fault {
        Some(Fault::Beta0Sign) => CoefficientForm::FlippedBeta0,
        None => CoefficientForm::Exact,
    };
    let mut sections = vec![
        grid_section(&grid, form)?,
        marginal_identity_section(10)?,
        conditional_law_section(&grid, &[6, 8, 10])?,
        robust_section(&robust)?,
    ];
    if opts.replicates > 1 {
        sections.push(monte_carlo_section(&mc, opts.replicates, opts.seed)?);
    }
    Ok(VerifyReport { sections })
}

#[derive(Debug, Parser)]
#[command(name = "attrsets", version, about = "Learning from attribution sets")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw attribution sets for the configured training data.
    Simulate {
        /// Window size; the first configured k when absent.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the bundled exact-enumeration checks.
    Verify {
        /// Fixture directory; overrides ATTRSETS_FIXTURES.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Monte Carlo replicates per fixture (0 skips the simulator check).
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
        #[arg(long, hide = true, value_enum)]
        inject: Option<Fault>,
    },
    /// Train one cell and save the model.
    Train {
        #[arg(long, value_parser = parse_algorithm, default_value = "unbiased")]
        algorithm: Algorithm,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Index into the configured priors.
        #[arg(long, default_value_t = 0)]
        prior: usize,
    },
    /// Evaluate a saved model, or a constant predictor, on the configured test set.
    Eval {
        #[arg(long, conflicts_with = "constant")]
        model: Option<PathBuf>,
        #[arg(long)]
        constant: Option<f64>,
    },
    /// Run the full grid of cells.
    Sweep,
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        format!("unknown algorithm {s:?}; expected unbiased, random, max_prior or supervised")
    })
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Json(_) | Error::TooLarge { .. } => 2,
        _ => 3,
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run_command(cli: &Cli, config: &ExperimentConfig, command: &Command) -> Result<u8> {
    match command {
        Command::Simulate { k } => {
            let k = k.unwrap_or(config.k[0]);
            simulate(config, k, &config.out)?;
            println!("wrote {}", config.out.display());
            Ok(0)
        }
        Command::Verify {
            fixtures,
            replicates,
            inject,
        } => {
            let opts = VerifyOptions {
                fixtures: fixtures.clone().unwrap_or_else(oracle::fixtures_dir),
                replicates: *replicates,
                seed: config.seed,
                fault: *inject,
            };
            let report = verify(&opts)?;
            for s in &report.sections {
                let status = if s.passed() { "PASS" } else { "FAIL" };
                println!("{status} {} ({} checks, {} failures)", s.name, s.checks, s.failures.len());
                for f in s.failures.iter().take(5) {
                    println!("  {f}");
                }
                for n in &s.notes {
                    log::info!("{}: {n}", s.name);
                }
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Train { algorithm, k, lr, prior } => {
            let k = k.unwrap_or(config.k[0]);
            let lr = lr.unwrap_or(config.lr_grid[0]);
            let family = config
                .priors
                .get(*prior)
                .ok_or_else(|| Error::Config(format!("prior index {prior} out of range")))?;
            let (train_set, test) = load(&config.dataset)?;
            if outside_regime(&train_set, k) {
                log::warn!("{}: k = {k} exceeds np/8", config.name);
            }
            let report = run_cell(
                &train_set,
                &test,
                &family.build(k)?,
                *algorithm,
                &config.train,
                lr,
                config.epochs_for(*algorithm),
                config.seed,
            )?;
            ensure_dir(&config.out)?;
            report.hypothesis()?.save(&config.out.join("model.bin"))?;
            let path = config.out.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
            let result = CellResult {
                cell: Cell {
                    dataset: config.name.clone(),
                    algorithm: *algorithm,
                    prior: family.clone(),
                    k,
                    lr,
                    rep: 0,
                    seed: config.seed,
                },
                metrics: report.metrics,
                seconds: report.seconds,
                error: None,
            };
            println!("{CSV_HEADER}\n{}", result.csv_row());
            Ok(0)
        }
        Command::Eval { model, constant } => {
            let (_, test) = load(&config.dataset)?;
            let loss = LossDecomposition::from_kind(config.train.loss)?;
            let metrics = match (model, constant) {
                (Some(path), _) => evaluate(&Hypothesis::load(path)?, &test, &loss)?,
                (None, Some(c)) => metrics_from_predictions(&vec![*c; test.len()], &test.labels, &loss)?,
                (None, None) => return Err(Error::Config("eval needs --model or --constant".into())),
            };
            print_json(&metrics)?;
            Ok(0)
        }
        Command::Sweep => {
            let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let outcome = sweep(config, jobs)?;
            let failed = outcome.results.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} cells ({} resumed, {} failed); results in {}",
                outcome.results.len(),
                outcome.resumed,
                failed,
                config.out.display()
            );
            let seen: BTreeSet<_> = outcome.summary.iter().map(|r| r.k).collect();
            log::debug!("summary covers k = {seen:?}");
            Ok(0)
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    let config = match effective_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if cli.print_config {
        return match print_json(&config) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                3
            }
        };
    }
    let Some(command) = &cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return 2;
    };
    match run_command(cli, &config, command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    ExitCode::from(run(&cli))
}
