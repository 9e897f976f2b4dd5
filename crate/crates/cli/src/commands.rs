use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use m2mil::evalmetrics::{aggregate_folds, MetricsReport};
use m2mil::gradsuite::gradient_suite;
use m2mil::model::M2Unet;
use m2mil::phantom::{generate_dataset, DatasetConfig, PhantomConfig, Severity, MANIFEST};
use m2mil::tensorcore::GradcheckConfig;
use m2mil::trainer::{evaluate, make_folds, train_fold, Dataset, TrainConfig, FOLDS};
use serde::{Deserialize, Serialize};

use crate::{
    exit, fail, CliResult, EvalArgs, GenArgs, GradcheckArgs, HyperArgs, ReportArgs, SweepArgs,
    TrainArgs,
};

pub const CONFIG: &str = "config.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.jsonl";
pub const REPORT: &str = "report.json";
pub const THREADS_ENV: &str = "M2MIL_THREADS";

/// Snapshot written next to every run's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub folds: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct GenSnapshot<'a> {
    subcommand: &'static str,
    out: &'a Path,
    dataset: &'a DatasetConfig,
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    subcommand: &'static str,
    run: &'a Path,
    data: &'a Path,
    seed: u64,
    full_volume: bool,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct SweepSnapshot<'a> {
    subcommand: &'static str,
    data: &'a Path,
    out: &'a Path,
    lambda_grid: &'a [f64],
    lr_grid: &'a [f64],
    folds: &'a [usize],
    train: &'a TrainConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

pub fn gen(a: &GenArgs) -> CliResult {
    if dir_is_nonempty(&a.out) {
        if !a.force {
            return Err(fail(
                exit::FAILURE,
                format!(
                    "{} exists and is not empty; pass --force to replace it",
                    a.out.display()
                ),
            ));
        }
        fs::remove_dir_all(&a.out).with_context(|| format!("clearing {}", a.out.display()))?;
    }
    let cfg = DatasetConfig {
        cases: a.cases as usize,
        scans_per_patient: a.scans_per_patient as usize,
        mask_fraction: a.mask_fraction,
        seed: a.seed,
        phantom: PhantomConfig {
            tau: a.tau,
            height: (a.min_axial, a.max_axial),
            width: (a.min_axial, a.max_axial),
            ..PhantomConfig::default()
        },
    };
    let manifest = generate_dataset(&a.out, &cfg).map_err(usage_if_invalid)?;
    write_json(
        &a.out.join(CONFIG),
        &GenSnapshot {
            subcommand: "gen",
            out: &a.out,
            dataset: &cfg,
        },
    )?;
    let severe = manifest
        .cases
        .iter()
        .filter(|c| c.severity == Severity::Severe)
        .count();
    let masked = manifest.cases.iter().filter(|c| c.mask.is_some()).count();
    println!(
        "{} cases from {} patients: {} severe ({:.1}%), {} non-severe, {} with lobe masks",
        manifest.cases.len(),
        manifest.patients().len(),
        severe,
        100.0 * manifest.severe_fraction(),
        manifest.cases.len() - severe,
        masked
    );
    Ok(())
}

/// Invalid or degenerate configurations stem from flags, so they are usage
/// errors; anything else is a runtime failure.
fn usage_if_invalid(e: m2mil::Error) -> crate::CliError {
    let code = match e {
        m2mil::Error::Invalid(_) | m2mil::Error::DegenerateConfig(_) => exit::USAGE,
        _ => exit::FAILURE,
    };
    crate::CliError {
        code,
        error: e.into(),
    }
}

fn load_dataset(root: &Path) -> CliResult<Dataset> {
    if !root.join(MANIFEST).is_file() {
        return Err(fail(
            exit::MISSING_DATASET,
            format!("no dataset at {} (missing {MANIFEST})", root.display()),
        ));
    }
    Dataset::load(root)
        .with_context(|| format!("loading dataset {}", root.display()))
        .map_err(Into::into)
}

fn resolve_folds(requested: &[usize]) -> CliResult<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..FOLDS).collect());
    }
    let mut folds = requested.to_vec();
    folds.sort_unstable();
    folds.dedup();
    if let Some(&f) = folds.iter().find(|&&f| f >= FOLDS) {
        return Err(fail(
            exit::USAGE,
            format!("fold {f} out of range 0..{FOLDS}"),
        ));
    }
    Ok(folds)
}

fn checked_config(h: &HyperArgs) -> CliResult<(TrainConfig, Vec<usize>)> {
    let cfg = h.train_config();
    cfg.validate().map_err(usage_if_invalid)?;
    Ok((cfg, resolve_folds(&h.folds)?))
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold-{fold}"))
}

/// Trains every fold of `rc` into `rc.out`.
fn run_training(data: &Dataset, rc: &RunConfig) -> CliResult {
    let size = rc.train.patch_size;
    if let Some(c) = data
        .cases
        .iter()
        .find(|c| c.volume.extents[1].min(c.volume.extents[2]) < size)
    {
        let [_, h, w] = c.volume.extents;
        return Err(fail(
            exit::USAGE,
            format!("{}: patch size {size} does not fit its {h}x{w} crop; lower --patch-size or regenerate with larger --min-axial", c.id),
        ));
    }
    fs::create_dir_all(&rc.out).with_context(|| format!("creating {}", rc.out.display()))?;
    write_json(&rc.out.join(CONFIG), rc)?;
    let plan = make_folds(&data.manifest, rc.train.optim.seed)?;
    for &fold in &rc.folds {
        let dir = fold_dir(&rc.out, fold);
        fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join(TRAIN_LOG))?);
        let outcome = train_fold(data, &plan, fold, &rc.train, &mut log)?;
        log.flush()?;
        outcome.model.save(&dir.join(CHECKPOINT))?;
        if let Some(last) = outcome.history.last() {
            log::info!(
                "{}: fold {fold} done, loss {:.4}, val accuracy {}, val dsc {}",
                rc.out.display(),
                last.total_loss,
                fmt_opt(last.val_accuracy),
                fmt_opt(last.val_dsc)
            );
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

pub fn train(a: &TrainArgs) -> CliResult {
    let (cfg, folds) = checked_config(&a.hyper)?;
    let data = load_dataset(&a.data)?;
    let rc = RunConfig {
        subcommand: "train".into(),
        data: a.data.clone(),
        out: a.out.clone(),
        folds,
        train: cfg,
    };
    run_training(&data, &rc)?;
    println!("trained folds {:?} into {}", rc.folds, rc.out.display());
    Ok(())
}

fn read_run_config(run: &Path) -> CliResult<RunConfig> {
    let path = run.join(CONFIG);
    let bytes = fs::read(&path).map_err(|_| {
        fail(
            exit::MISSING_CHECKPOINT,
            format!("{} is not a training run (missing {CONFIG})", run.display()),
        )
    })?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Into::into)
}

/// Evaluates every fold checkpoint of `rc` on its test split.
fn evaluate_run(
    data: &Dataset,
    rc: &RunConfig,
    seed: u64,
    full_volume: bool,
) -> CliResult<MetricsReport> {
    let plan = make_folds(&data.manifest, rc.train.optim.seed)?;
    let mut folds = Vec::with_capacity(rc.folds.len());
    for &fold in &rc.folds {
        let path = fold_dir(&rc.out, fold).join(CHECKPOINT);
        if !path.is_file() {
            return Err(fail(
                exit::MISSING_CHECKPOINT,
                format!("missing checkpoint {}", path.display()),
            ));
        }
        let model = M2Unet::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let test = data.indices_of(&plan.split(fold)?.test);
        folds.push(evaluate(
            &model,
            data,
            &test,
            fold,
            &rc.train,
            full_volume,
            seed,
        )?);
    }
    Ok(aggregate_folds(folds)?)
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let mut rc = read_run_config(&a.run)?;
    // checkpoints live where the run directory is now, wherever it was trained
    rc.out = a.run.clone();
    if let Some(d) = a.eval_draws {
        rc.train.eval_draws = d;
    }
    rc.train.validate().map_err(usage_if_invalid)?;
    let data_root = a.data.clone().unwrap_or_else(|| rc.data.clone());
    let data = load_dataset(&data_root)?;
    let report = evaluate_run(&data, &rc, a.seed, !a.patch_level)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    report.write_all(&out)?;
    write_json(
        &out.join(CONFIG),
        &EvalSnapshot {
            subcommand: "eval",
            run: &a.run,
            data: &data_root,
            seed: a.seed,
            full_volume: !a.patch_level,
            train: &rc.train,
        },
    )?;
    print!("{}", summary_table(&[(out.display().to_string(), &report)]));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let cfg = GradcheckConfig {
        tol: a.tol,
        ..GradcheckConfig::default()
    };
    let rows = gradient_suite(a.points as usize, a.seed, cfg)?;
    println!(
        "{:<24} {:>6} {:>12}  result",
        "check", "points", "max rel err"
    );
    for r in &rows {
        println!(
            "{:<24} {:>6} {:>12.3e}  {}",
            r.name,
            r.points,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
        if let Some(f) = &r.failure {
            println!("    {f}");
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(fail(
            exit::FAILURE,
            format!("{failed} gradient check(s) failed"),
        ));
    }
    Ok(())
}

fn thread_count() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(fail(
                exit::USAGE,
                format!("{THREADS_ENV} must be a positive integer, got `{v}`"),
            )),
        },
    }
}

pub fn cell_name(lambda: f64, lr: f64) -> String {
    format!("lambda-{lambda}_lr-{lr}")
}

pub fn sweep(a: &SweepArgs) -> CliResult {
    let (base, folds) = checked_config(&a.hyper)?;
    if a.lambda_grid.is_empty() || a.lr_grid.is_empty() {
        return Err(fail(exit::USAGE, "both grids need at least one value"));
    }
    let mut cells = Vec::new();
    for &lambda in &a.lambda_grid {
        for &lr in &a.lr_grid {
            let mut cfg = base.clone();
            cfg.loss.lambda = lambda;
            cfg.optim.lr0 = lr;
            cfg.validate().map_err(usage_if_invalid)?;
            cells.push(RunConfig {
                subcommand: "sweep".into(),
                data: a.data.clone(),
                out: a.out.join(cell_name(lambda, lr)),
                folds: folds.clone(),
                train: cfg,
            });
        }
    }
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join(CONFIG),
        &SweepSnapshot {
            subcommand: "sweep",
            data: &a.data,
            out: &a.out,
            lambda_grid: &a.lambda_grid,
            lr_grid: &a.lr_grid,
            folds: &folds,
            train: &base,
        },
    )?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<MetricsReport>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = thread_count()?.min(cells.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(rc) = cells.get(i) else { break };
                let r = run_training(&data, rc).and_then(|()| {
                    let report = evaluate_run(&data, rc, rc.train.optim.seed, true)?;
                    report.write_all(&rc.out.join("eval"))?;
                    Ok(report)
                });
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });

    let mut reports = Vec::with_capacity(cells.len());
    for (rc, r) in cells
        .iter()
        .zip(results.into_inner().expect("no worker panicked"))
    {
        let report = r.expect("every cell ran")?;
        reports.push((
            rc.out
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            report,
        ));
    }
    let refs: Vec<(String, &MetricsReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = summary_table(&refs);
    fs::write(a.out.join("sweep.csv"), comparison_csv(&refs))?;
    print!("{table}");
    Ok(())
}

const SUMMARY_METRICS: [&str; 4] = ["accuracy", "auc", "f1", "dsc"];

fn summary_table(reports: &[(String, &MetricsReport)]) -> String {
    let mut out = format!("{:<32}", "run");
    for m in SUMMARY_METRICS {
        out += &format!(" {:>17}", m);
    }
    out.push('\n');
    for (name, r) in reports {
        out += &format!("{name:<32}");
        for m in SUMMARY_METRICS {
            let cell = r.aggregate.get(m).map_or_else(
                || "n/a".into(),
                |s| format!("{:.3} +/- {:.3}", s.mean, s.std),
            );
            out += &format!(" {cell:>17}");
        }
        out.push('\n');
    }
    out
}

fn comparison_csv(reports: &[(String, &MetricsReport)]) -> String {
    let mut keys: Vec<&String> = reports
        .iter()
        .flat_map(|(_, r)| r.aggregate.keys())
        .collect();
    keys.sort();
    keys.dedup();
    let mut out = String::from("run");
    for k in &keys {
        out += &format!(",{k}_mean,{k}_std");
    }
    out.push('\n');
    for (name, r) in reports {
        out += name;
        for k in &keys {
            match r.aggregate.get(*k) {
                Some(s) => out += &format!(",{},{}", s.mean, s.std),
                None => out += ",,",
            }
        }
        out.push('\n');
    }
    out
}

fn read_report(dir: &Path) -> CliResult<MetricsReport> {
    let path = [dir.join(REPORT), dir.join("eval").join(REPORT)]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| {
            fail(
                exit::FAILURE,
                format!("no {REPORT} under {}", dir.display()),
            )
        })?;
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Into::into)
}

pub fn report(a: &ReportArgs) -> CliResult {
    let mut reports = Vec::with_capacity(a.dirs.len());
    for d in &a.dirs {
        reports.push((d.display().to_string(), read_report(d)?));
    }
    let refs: Vec<(String, &MetricsReport)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    print!("{}", summary_table(&refs));
    for (name, r) in &refs {
        if let Some(m) = &r.margins {
            println!(
                "{name}: margin median {:.3}, {} of {} cases correct",
                m.median,
                m.correct,
                m.margins.len()
            );
        }
    }
    if let Some(path) = &a.out {
        fs::write(path, comparison_csv(&refs))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
