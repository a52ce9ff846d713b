use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tase::datagen::GroupScheme;
use tase::eval::{BenchmarkSummary, BENCHMARKS};
use tase::io::{self, Checkpoint, EmbeddingDump};
use tase::model::Gradients;
use tase::trainer::{RefreshPhase, Resume};
use tase::{
    evaluate, group_split, pca_2d, synthesize_splits, Dataset, EpochRecord, EvalInputs, EvalReport, Group, Mode,
    ModelParams, OptimState, PseudoState, RunHistory, RunObserver, Splits, Trainer,
};

use crate::config::{ExperimentConfig, FeatureSource};
use crate::error::{CliError, CliResult};

pub type F = f32;

pub const SNAPSHOT: &str = "config.snapshot";
pub const HISTORY: &str = "history.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const REPORT: &str = "report.json";
pub const PCA: &str = "pca2d.csv";
pub const TIMING: &str = "timing.txt";

pub const HISTORY_COLUMNS: [&str; 15] = [
    "epoch",
    "lr",
    "loss",
    "batches",
    "tau_min",
    "tau_mean",
    "tau_max",
    "w_min",
    "w_mean",
    "w_max",
    "mean_positive_sim",
    "degenerate_rows",
    "refreshed",
    "inertia",
    "cluster_sizes",
];

/// `data.bin` -> `data.<tag>.bin`.
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}{ext}"))
}

fn write_snapshot(path: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, cfg.snapshot()?)?;
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<Dataset<F>> {
    if !path.exists() {
        return Err(CliError::Data(format!("dataset file {} not found", path.display())));
    }
    Ok(io::load_dataset(path)?)
}

/// Generate the long-tailed training file plus balanced `test` / `pool` siblings.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<Splits<F>> {
    cfg.validate()?;
    write_snapshot(&sibling(out, "config").with_extension("snapshot"), cfg)?;
    let splits = make_splits(cfg)?;
    io::save_dataset(out, &splits.train)?;
    io::save_dataset(&sibling(out, "test"), &splits.test)?;
    io::save_dataset(&sibling(out, "pool"), &splits.pool)?;
    Ok(splits)
}

pub fn make_splits(cfg: &ExperimentConfig) -> CliResult<Splits<F>> {
    Ok(synthesize_splits(
        &cfg.profile()?,
        cfg.d_in,
        cfg.class_sep,
        cfg.noise,
        cfg.test_per_class,
        cfg.pool_per_class,
        cfg.group_scheme(),
        cfg.data_seed,
    )?)
}

/// Train file plus its siblings, with group tags from the configured scheme.
pub fn load_splits(data: &Path, cfg: &ExperimentConfig) -> CliResult<Splits<F>> {
    let train = load_dataset(data)?;
    let groups = group_split(train.class_counts(), cfg.group_scheme())?;
    let test = load_dataset(&sibling(data, "test"))?.with_groups(groups.clone())?;
    let pool = load_dataset(&sibling(data, "pool"))?.with_groups(groups.clone())?;
    Ok(Splits {
        train: train.with_groups(groups)?,
        test,
        pool,
    })
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn history_row(r: &EpochRecord) -> Vec<String> {
    let s = &r.stats;
    vec![
        r.epoch.to_string(),
        r.lr.to_string(),
        s.loss.to_string(),
        s.batches.to_string(),
        s.tau_min.to_string(),
        s.tau_mean.to_string(),
        s.tau_max.to_string(),
        s.w_min.to_string(),
        s.w_mean.to_string(),
        s.w_max.to_string(),
        s.mean_positive_sim.to_string(),
        s.degenerate_rows.to_string(),
        u8::from(r.refreshed).to_string(),
        opt_f64(r.inertia),
        r.cluster_sizes
            .as_ref()
            .map(|v| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";"))
            .unwrap_or_default(),
    ]
}

pub fn pseudo_file_name(epoch: usize, phase: RefreshPhase) -> String {
    let tag = match phase {
        RefreshPhase::Start => "init",
        RefreshPhase::End => "refresh",
    };
    format!("pseudo_e{epoch:04}_{tag}.bin")
}

fn parse_pseudo_file_name(name: &str) -> Option<(usize, RefreshPhase)> {
    let rest = name.strip_prefix("pseudo_e")?.strip_suffix(".bin")?;
    let (epoch, tag) = rest.split_once('_')?;
    let phase = match tag {
        "init" => RefreshPhase::Start,
        "refresh" => RefreshPhase::End,
        _ => return None,
    };
    Some((epoch.parse().ok()?, phase))
}

fn checkpoint_name(epochs_completed: usize) -> String {
    format!("checkpoint_{epochs_completed:04}.bin")
}

/// Persists history rows, periodic checkpoints and pseudo-label dumps.
struct RunFiles {
    dir: PathBuf,
    every: usize,
    history: csv::Writer<fs::File>,
}

impl RunFiles {
    fn create(dir: &Path, every: usize, earlier_rows: &[csv::StringRecord]) -> CliResult<Self> {
        let mut history = csv::Writer::from_path(dir.join(HISTORY))?;
        history.write_record(HISTORY_COLUMNS)?;
        for row in earlier_rows {
            history.write_record(row)?;
        }
        history.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            every,
            history,
        })
    }
}

fn io_err(e: impl std::fmt::Display) -> tase::TaseError {
    tase::TaseError::Io(std::io::Error::other(e.to_string()))
}

impl RunObserver<F> for RunFiles {
    fn epoch_end(&mut self, params: &ModelParams<F>, opt: &OptimState<F>, record: &EpochRecord) -> tase::Result<()> {
        self.history.write_record(history_row(record)).map_err(io_err)?;
        self.history.flush()?;
        let done = record.epoch + 1;
        if self.every > 0 && done.is_multiple_of(self.every) {
            let ckpt = Checkpoint {
                params: params.clone(),
                epochs_completed: done,
                momentum: Some(opt.buffers.clone()),
            };
            io::save_checkpoint(&self.dir.join(checkpoint_name(done)), &ckpt)?;
        }
        Ok(())
    }

    fn pseudo_refreshed(&mut self, state: &PseudoState<F>, phase: RefreshPhase) -> tase::Result<()> {
        io::save_pseudo_state(&self.dir.join(pseudo_file_name(state.epoch_computed, phase)), state)
    }
}

/// Latest pseudo state written in `dir` before epoch `epochs_completed` began.
fn latest_pseudo(dir: &Path, epochs_completed: usize) -> CliResult<Option<PseudoState<F>>> {
    let mut best: Option<(usize, RefreshPhase, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some((epoch, phase)) = path.file_name().and_then(|n| n.to_str()).and_then(parse_pseudo_file_name) else {
            continue;
        };
        if epoch < epochs_completed && best.as_ref().is_none_or(|(e, p, _)| (epoch, phase) > (*e, *p)) {
            best = Some((epoch, phase, path));
        }
    }
    best.map(|(epoch, _, path)| io::load_pseudo_state(&path, epoch).map_err(CliError::from))
        .transpose()
}

fn earlier_history(dir: &Path, before: usize) -> CliResult<Vec<csv::StringRecord>> {
    let path = dir.join(HISTORY);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.records() {
        let row = row?;
        let epoch: usize = row.get(0).and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
        if epoch < before {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Train on `data`, writing the run directory `out`. With `resume`, continue
/// from that checkpoint using the pseudo dumps and history next to it.
pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<RunHistory> {
    let tc = cfg.train_config()?;
    fs::create_dir_all(out)?;
    write_snapshot(&out.join(SNAPSHOT), cfg)?;
    let train = load_dataset(data)?;
    let (trainer, earlier) = match resume {
        None => (Trainer::new(tc, &train)?, Vec::new()),
        Some(ckpt_path) => {
            if !ckpt_path.exists() {
                return Err(CliError::Data(format!("checkpoint {} not found", ckpt_path.display())));
            }
            let ckpt: Checkpoint<F> = io::load_checkpoint(ckpt_path)?;
            let src = ckpt_path.parent().unwrap_or(Path::new("."));
            let ec = ckpt.epochs_completed;
            let momentum = ckpt.momentum.unwrap_or_else(|| Gradients::zeros(ckpt.params.spec()));
            let from = Resume {
                pseudo: latest_pseudo(src, ec)?,
                params: ckpt.params,
                momentum,
                epochs_completed: ec,
            };
            (Trainer::resume(tc, &train, from)?, earlier_history(src, ec)?)
        }
    };
    let mut files = RunFiles::create(out, cfg.checkpoint_every, &earlier)?;
    let (params, history) = trainer.run(&mut files)?;
    let final_ckpt = Checkpoint {
        params,
        epochs_completed: cfg.total_epochs,
        momentum: None,
    };
    io::save_checkpoint(&out.join(CHECKPOINT), &final_ckpt)?;
    fs::write(out.join(TIMING), format!("wall_clock_secs = {}\n", history.wall_clock_secs))?;
    Ok(history)
}

fn project(params: &ModelParams<F>, x: &Array2<F>, source: FeatureSource) -> CliResult<Array2<F>> {
    Ok(match source {
        FeatureSource::Encoder => params.features(x.view())?,
        FeatureSource::Projection => params.embed(x.view())?,
    })
}

/// Labelled frozen features for train / test / pool.
pub struct FrozenFeatures {
    pub train: (Array2<F>, Vec<usize>),
    pub test: (Array2<F>, Vec<usize>),
    pub pool: (Array2<F>, Vec<usize>),
    pub num_classes: usize,
    pub groups: Vec<Group>,
}

impl FrozenFeatures {
    pub fn from_model(params: &ModelParams<F>, splits: &Splits<F>, source: FeatureSource) -> CliResult<Self> {
        let take = |d: &Dataset<F>| -> CliResult<(Array2<F>, Vec<usize>)> {
            Ok((project(params, d.features(), source)?, d.labels_for_eval().to_vec()))
        };
        Ok(Self {
            train: take(&splits.train)?,
            test: take(&splits.test)?,
            pool: take(&splits.pool)?,
            num_classes: splits.train.num_classes(),
            groups: splits.train.groups().to_vec(),
        })
    }

    /// Embedding dump `path` with `test` and `pool` siblings.
    pub fn from_dumps(path: &Path, cfg: &ExperimentConfig) -> CliResult<Self> {
        let load = |p: &Path| -> CliResult<(Array2<F>, Vec<usize>)> {
            if !p.exists() {
                return Err(CliError::Data(format!("embedding dump {} not found", p.display())));
            }
            let d: EmbeddingDump<F> = io::load_embeddings(p)?;
            Ok((d.rows, d.labels))
        };
        let train = load(path)?;
        let num_classes = 1 + train.1.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0usize; num_classes];
        for &y in &train.1 {
            counts[y] += 1;
        }
        let groups = if num_classes >= 3 {
            let scheme = if num_classes == cfg.num_classes {
                cfg.group_scheme()
            } else {
                GroupScheme::even_thirds(num_classes)
            };
            group_split(&counts, scheme)?
        } else {
            vec![Group::Head; num_classes]
        };
        Ok(Self {
            train,
            test: load(&sibling(path, "test"))?,
            pool: load(&sibling(path, "pool"))?,
            num_classes,
            groups,
        })
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig) -> CliResult<EvalReport> {
        let inputs = EvalInputs {
            train: self.train.0.view(),
            train_labels: &self.train.1,
            test: self.test.0.view(),
            test_labels: &self.test.1,
            pool: Some((self.pool.0.view(), &self.pool.1)),
            num_classes: self.num_classes,
            groups: &self.groups,
        };
        Ok(evaluate(&inputs, &cfg.eval_config())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub features: FeatureSource,
    pub benchmarks: Vec<BenchmarkSummary>,
    pub uniformity: f64,
    pub tolerance: Option<f64>,
    pub notes: Vec<String>,
}

impl ReportJson {
    pub fn new(report: &EvalReport, features: FeatureSource) -> Self {
        Self {
            features,
            benchmarks: report.benchmarks.iter().map(|b| b.summary()).collect(),
            uniformity: report.uniformity,
            tolerance: report.tolerance,
            notes: report.notes.clone(),
        }
    }
}

pub fn write_report(dir: &Path, report: &EvalReport, features: FeatureSource) -> CliResult<()> {
    let json = serde_json::to_string_pretty(&ReportJson::new(report, features)).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(dir.join(REPORT), json + "\n")?;
    Ok(())
}

/// Top-2 principal components of the normalized training features, with the
/// final pseudo label of each row when one is available.
fn write_pca(dir: &Path, frozen: &FrozenFeatures, pseudo: Option<&[usize]>) -> CliResult<()> {
    let (x, labels) = &frozen.train;
    let p = pca_2d(tase::eval::normalize_rows(x.view()).view());
    let mut w = csv::Writer::from_path(dir.join(PCA))?;
    w.write_record(["x", "y", "true_label", "pseudo_label"])?;
    for (i, &y) in labels.iter().enumerate() {
        let pl = pseudo.and_then(|a| a.get(i)).map(usize::to_string).unwrap_or_default();
        w.write_record([p[[i, 0]].to_string(), p[[i, 1]].to_string(), y.to_string(), pl])?;
    }
    w.flush()?;
    Ok(())
}

/// What `eval` reads embeddings from.
pub enum EvalSource<'a> {
    /// Run directory holding `checkpoint.bin`, plus the dataset it was trained on.
    Run { dir: &'a Path, data: &'a Path },
    Embeddings(&'a Path),
}

pub fn eval(cfg: &ExperimentConfig, source: EvalSource<'_>, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_snapshot(&out.join("eval.config.snapshot"), cfg)?;
    let (frozen, pseudo) = match source {
        EvalSource::Run { dir, data } => {
            let ckpt_path = dir.join(CHECKPOINT);
            if !ckpt_path.exists() {
                return Err(CliError::Data(format!("{} not found", ckpt_path.display())));
            }
            let ckpt: Checkpoint<F> = io::load_checkpoint(&ckpt_path)?;
            let frozen = FrozenFeatures::from_model(&ckpt.params, &load_splits(data, cfg)?, cfg.features)?;
            let pseudo = latest_pseudo(dir, usize::MAX)?.map(|s| s.assignments().to_vec());
            (frozen, pseudo)
        }
        EvalSource::Embeddings(path) => (FrozenFeatures::from_dumps(path, cfg)?, None),
    };
    let report = frozen.evaluate(cfg)?;
    write_report(out, &report, cfg.features)?;
    write_pca(out, &frozen, pseudo.as_deref())?;
    Ok(report)
}

/// Train in memory on `splits`, evaluate, and leave `config.snapshot`,
/// `history.csv` and `report.json` in `dir`.
pub fn train_and_eval(cfg: &ExperimentConfig, splits: &Splits<F>, dir: &Path) -> CliResult<EvalReport> {
    fs::create_dir_all(dir)?;
    write_snapshot(&dir.join(SNAPSHOT), cfg)?;
    let tc = cfg.train_config()?;
    let mut files = RunFiles::create(dir, 0, &[])?;
    let (params, _) = Trainer::new(tc, &splits.train)?.run(&mut files)?;
    let report = FrozenFeatures::from_model(&params, splits, cfg.features)?.evaluate(cfg)?;
    write_report(dir, &report, cfg.features)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    #[value(name = "K")]
    K,
    #[value(name = "B")]
    B,
    #[value(name = "F")]
    F,
    #[value(name = "S")]
    S,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "K",
            Axis::B => "B",
            Axis::F => "F",
            Axis::S => "S",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: usize) {
        match self {
            Axis::K => cfg.k = value,
            Axis::B => cfg.warmup_epochs = value,
            Axis::F => cfg.cluster_period = value,
            Axis::S => cfg.horizon = value,
        }
    }
}

pub const SWEEP_COLUMNS: [&str; 9] = ["axis", "value", "seed", "benchmark", "overall", "head", "mid", "tail", "range"];

/// Metrics of one benchmark: overall, head, mid, tail, range.
fn metrics(s: &BenchmarkSummary) -> [Option<f64>; 5] {
    [Some(s.overall), s.head, s.mid, s.tail, Some(s.range)]
}

fn data_for(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<Splits<F>> {
    match data {
        Some(p) => load_splits(p, cfg),
        None => make_splits(cfg),
    }
}

fn run_jobs<J: Sync, R: Send>(jobs: &[J], parallel: bool, f: impl Fn(&J) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    if parallel {
        jobs.par_iter().map(&f).collect()
    } else {
        jobs.iter().map(f).collect()
    }
}

/// One row per (value, seed, benchmark), then one `R` row per benchmark.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[usize],
    seeds: &[u64],
    data: Option<&Path>,
    out: &Path,
    parallel: bool,
) -> CliResult<Vec<Vec<String>>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one value and one seed".into()));
    }
    let jobs: Vec<(usize, usize, u64, ExperimentConfig)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, &v)| {
            seeds.iter().map(move |&seed| {
                let mut c = cfg.clone();
                axis.apply(&mut c, v);
                c.seed = seed;
                (i, v, seed, c)
            })
        })
        .collect();
    for (_, _, _, c) in &jobs {
        c.validate()?;
    }
    fs::create_dir_all(out)?;
    write_snapshot(&out.join(SNAPSHOT), cfg)?;
    let splits = data_for(cfg, data)?;
    let reports = run_jobs(&jobs, parallel, |(i, v, seed, c)| {
        let dir = out.join("runs").join(format!("{i:02}_{}{v}_seed{seed}", axis.name()));
        train_and_eval(c, &splits, &dir).map(|r| ReportJson::new(&r, c.features))
    })?;

    let mut rows = Vec::new();
    for ((_, v, seed, _), rep) in jobs.iter().zip(&reports) {
        for b in &rep.benchmarks {
            let mut row = vec![axis.name().to_string(), v.to_string(), seed.to_string(), b.name.clone()];
            row.extend(metrics(b).iter().map(|m| opt_f64(*m)));
            rows.push(row);
        }
    }
    for name in BENCHMARKS {
        let mut per_value: Vec<[Option<f64>; 5]> = Vec::new();
        for i in 0..values.len() {
            let mut acc = [Some(0.0); 5];
            let runs: Vec<_> = jobs.iter().zip(&reports).filter(|((j, ..), _)| *j == i).collect();
            for (_, rep) in &runs {
                let b = rep.benchmarks.iter().find(|b| b.name == name).expect("all benchmarks reported");
                for (a, m) in acc.iter_mut().zip(metrics(b)) {
                    *a = a.zip(m).map(|(a, m)| a + m / runs.len() as f64);
                }
            }
            per_value.push(acc);
        }
        let mut row = vec![axis.name().to_string(), "R".into(), String::new(), name.to_string()];
        for m in 0..5 {
            let vals: Option<Vec<f64>> = per_value.iter().map(|a| a[m]).collect();
            let r = vals.map(|v| {
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
            });
            row.push(opt_f64(r));
        }
        rows.push(row);
    }
    write_csv(&out.join("sweep.csv"), &SWEEP_COLUMNS, &rows)?;
    Ok(rows)
}

fn slug(benchmark: &str) -> &'static str {
    match benchmark {
        tase::eval::KNN1 => "knn1",
        tase::eval::KNN10 => "knn10",
        tase::eval::MS_LP => "ms_lp",
        tase::eval::ONE_PCT_S_LP => "s1pct_lp",
        tase::eval::LT_LP => "lt_lp",
        _ => "full_lp",
    }
}

pub fn ablation_columns() -> Vec<String> {
    let mut cols = vec!["seed".to_string(), "mode".to_string()];
    for b in BENCHMARKS {
        for suffix in ["", "_head", "_mid", "_tail", "_range"] {
            cols.push(format!("{}{suffix}", slug(b)));
        }
    }
    cols
}

/// One row per (seed, mode) over the four modes.
pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64], data: Option<&Path>, out: &Path, parallel: bool) -> CliResult<Vec<Vec<String>>> {
    if seeds.is_empty() {
        return Err(CliError::Config("ablate needs at least one seed".into()));
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_snapshot(&out.join(SNAPSHOT), cfg)?;
    let splits = data_for(cfg, data)?;
    let jobs: Vec<ExperimentConfig> = seeds
        .iter()
        .flat_map(|&seed| {
            Mode::ALL.into_iter().map(move |mode| ExperimentConfig {
                seed,
                mode,
                ..cfg.clone()
            })
        })
        .collect();
    let reports = run_jobs(&jobs, parallel, |c| {
        let dir = out.join("runs").join(format!("{}_seed{}", c.mode.name(), c.seed));
        train_and_eval(c, &splits, &dir).map(|r| ReportJson::new(&r, c.features))
    })?;
    let rows: Vec<Vec<String>> = jobs
        .iter()
        .zip(&reports)
        .map(|(c, rep)| {
            let mut row = vec![c.seed.to_string(), c.mode.name().to_string()];
            for name in BENCHMARKS {
                let b = rep.benchmarks.iter().find(|b| b.name == name).expect("all benchmarks reported");
                row.extend(metrics(b).iter().map(|m| opt_f64(*m)));
            }
            row
        })
        .collect();
    write_csv(&out.join("ablation.csv"), &ablation_columns(), &rows)?;
    Ok(rows)
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(AsRef::as_ref))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
