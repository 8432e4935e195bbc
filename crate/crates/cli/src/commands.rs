//! The four commands: gen-data, run, ablate, report.
//!
//! All writes go under the configured output directory and are atomic
//! (temp file then rename). Two runs with the same config and seed produce
//! byte-identical result files; nothing time- or scheduling-dependent is
//! ever written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use metasel::datagen::{corrupt, save_cache, ShiftSpec};
use metasel::derive_seed;
use metasel::eval::{
    budget_count, summarize, trc, wilcoxon_signed_rank, MethodCurve, Ranking, Summary, TrcCurve,
};
use metasel::features::write_csv as write_feature_csv;
use metasel::metamodel::AblationVariant;

use crate::config::{ExperimentConfig, MethodSpec};
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    load_source, prepare_subject, run_method, rank_with_estimator, train_estimator,
    train_source_model, SubjectArtifacts, SubjectOutcome,
};

/// Machine-readable record of a run, written as `manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub subjects: Vec<SubjectOutcome>,
    pub methods: Vec<String>,
    pub files: Vec<String>,
}

/// Build a rayon pool honoring `--workers` / `MSEL_WORKERS`.
fn worker_pool(workers: Option<usize>) -> CliResult<rayon::ThreadPool> {
    let n = workers
        .or_else(|| {
            std::env::var("MSEL_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Percentages printed without float noise (1, 3, 5, 10, ...).
fn fmt_pct(fraction: f64) -> String {
    let v = fraction * 100.0;
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Generate and cache every dataset the config implies. Idempotent per seed:
/// rerunning writes byte-identical files.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let data_dir = cfg.out_dir.join("data");
    fs::create_dir_all(&data_dir)?;
    let (source_train, source_test) = load_source(cfg)?;

    let mut written = Vec::new();
    let mut save = |name: String, d: &metasel::datagen::Dataset| -> CliResult<()> {
        let path = data_dir.join(name);
        save_cache(d, &path)?;
        written.push(path);
        Ok(())
    };
    save("source_train.msds".to_string(), &source_train)?;
    save("source_test.msds".to_string(), &source_test)?;

    for (idx, (corruption, severity)) in cfg.subjects().into_iter().enumerate() {
        let train_spec = ShiftSpec {
            corruption,
            severity,
            seed: derive_seed(cfg.seed, "shift-train", idx as u64),
        };
        let test_spec = ShiftSpec {
            corruption,
            severity,
            seed: derive_seed(cfg.seed, "shift-test", idx as u64),
        };
        let tt = corrupt(&source_train, &train_spec)?;
        let te = corrupt(&source_test, &test_spec)?;
        save(
            format!("target_train_{}_{severity}.msds", corruption.name()),
            &tt,
        )?;
        save(
            format!("target_test_{}_{severity}.msds", corruption.name()),
            &te,
        )?;
    }
    Ok(written)
}

/// Everything a finished run leaves on disk.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
}

/// The full experiment: train source and fine-tuned models, gate on
/// admissibility, rank with every configured method, evaluate, summarize.
pub fn cmd_run(cfg: &ExperimentConfig, workers: Option<usize>) -> CliResult<RunOutput> {
    let pool = worker_pool(workers)?;
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(out_dir.join("rankings"))?;
    fs::create_dir_all(out_dir.join("features"))?;
    fs::create_dir_all(out_dir.join("models"))?;

    let result = run_inner(cfg, &pool, &out_dir);
    if let Err(e) = &result {
        // Preserve partial results, mark the run as failed.
        let _ = write_atomic(
            &out_dir.join("FAILED"),
            format!("{e}\n").as_bytes(),
        );
    }
    result
}

fn run_inner(
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
    out_dir: &Path,
) -> CliResult<RunOutput> {
    let (source_train, source_test) = load_source(cfg)?;
    let m_s = train_source_model(cfg, &source_train)?;
    m_s.save(&out_dir.join("models").join("source.msel"))?;

    let need_metamodel = cfg.methods.contains(&MethodSpec::MetaSel);
    let subjects = cfg.subjects();

    // Per-subject preparation fans out to the pool; collection keeps config
    // order so nothing depends on scheduling.
    let prepared: Vec<CliResult<(SubjectOutcome, Option<SubjectArtifacts>)>> = pool.install(|| {
        subjects
            .par_iter()
            .enumerate()
            .map(|(idx, (corruption, severity))| {
                prepare_subject(
                    cfg,
                    &m_s,
                    &source_train,
                    &source_test,
                    *corruption,
                    *severity,
                    idx as u64,
                    need_metamodel,
                )
            })
            .collect()
    });

    let mut outcomes = Vec::with_capacity(subjects.len());
    let mut artifacts = Vec::new();
    for r in prepared {
        let (outcome, art) = r?;
        outcomes.push(outcome);
        if let Some(a) = art {
            artifacts.push(a);
        }
    }

    // Ranking tasks fan out over (subject x method).
    let tasks: Vec<(usize, MethodSpec)> = artifacts
        .iter()
        .enumerate()
        .flat_map(|(si, _)| cfg.methods.iter().map(move |m| (si, *m)))
        .collect();
    let ranked: Vec<CliResult<(usize, MethodSpec, Ranking, TrcCurve)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(si, method)| {
                let (ranking, curve) = run_method(cfg, &artifacts[*si], *method)?;
                Ok((*si, *method, ranking, curve))
            })
            .collect()
    });

    let mut files = Vec::new();
    let mut curves: Vec<MethodCurve> = Vec::new();
    let mut curve_rows = Vec::new();
    for r in ranked {
        let (si, method, ranking, curve) = r?;
        let subject = &artifacts[si];
        let path = out_dir
            .join("rankings")
            .join(format!("{}_{}.csv", subject.name, method.name()));
        write_ranking_csv(&ranking, &path)?;
        files.push(rel(out_dir, &path));
        for p in &curve.points {
            curve_rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                subject.name,
                method.name(),
                subject.severity,
                subject.corruption.name(),
                fmt_pct(p.budget_fraction),
                p.budget_count,
                p.trc,
                p.apfd.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        curves.push(MethodCurve {
            subject: subject.name.clone(),
            corruption: subject.corruption.name().to_string(),
            method: method.name().to_string(),
            curve,
        });
    }

    // Per-subject model files and feature dumps.
    for subject in &artifacts {
        let mt_path = out_dir.join("models").join(format!("{}.msel", subject.name));
        subject.m_t.save(&mt_path)?;
        files.push(rel(out_dir, &mt_path));
        if let Some(mm) = &subject.metamodel {
            let mm_path = out_dir
                .join("models")
                .join(format!("{}.metasel.msel", subject.name));
            mm.save(&mm_path)?;
            files.push(rel(out_dir, &mm_path));
        }
        let feat_path = out_dir.join("features").join(format!("{}.csv", subject.name));
        write_feature_csv(&subject.test_records, &feat_path)?;
        files.push(rel(out_dir, &feat_path));
        let train_feat_path = out_dir
            .join("features")
            .join(format!("{}.train.csv", subject.name));
        write_feature_csv(&subject.training_records, &train_feat_path)?;
        files.push(rel(out_dir, &train_feat_path));
    }

    // curves.csv
    let mut curves_csv = String::from(
        "subject,method,severity,corruption,budget_pct,budget_count,trc,apfd\n",
    );
    for row in &curve_rows {
        curves_csv.push_str(row);
        curves_csv.push('\n');
    }
    let curves_path = out_dir.join("curves.csv");
    write_atomic(&curves_path, curves_csv.as_bytes())?;
    files.push(rel(out_dir, &curves_path));

    // summary.csv mirrors the improvement table: focus method vs the best
    // remaining baseline per (subject, budget).
    if cfg.methods.len() >= 2 && !artifacts.is_empty() {
        let focus = if need_metamodel {
            "metasel"
        } else {
            cfg.methods[0].name()
        };
        let summary = summarize(&curves, focus)?;
        let path = out_dir.join("summary.csv");
        write_atomic(&path, summary_csv(&summary).as_bytes())?;
        files.push(rel(out_dir, &path));
    }

    // rejects.csv always exists so downstream checks need not probe.
    let mut rejects = String::from(
        "subject,corruption,severity,acc_pretrained,acc_finetuned,acc_scratch,reason\n",
    );
    for o in outcomes.iter().filter(|o| !o.evaluated) {
        rejects.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.name,
            o.corruption.name(),
            o.severity,
            o.report.acc_pretrained_on_target,
            o.report.acc_finetuned_on_target,
            o.report.acc_scratch_on_target,
            o.reject_reason.as_deref().unwrap_or_default()
        ));
    }
    let rejects_path = out_dir.join("rejects.csv");
    write_atomic(&rejects_path, rejects.as_bytes())?;
    files.push(rel(out_dir, &rejects_path));

    files.sort();
    let manifest = RunManifest {
        config: cfg.clone(),
        subjects: outcomes,
        methods: cfg.methods.iter().map(|m| m.name().to_string()).collect(),
        files,
    };
    let manifest_path = out_dir.join("manifest.json");
    write_atomic(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;

    Ok(RunOutput {
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn write_ranking_csv(r: &Ranking, path: &Path) -> CliResult<()> {
    let mut out = String::from("rank,input_id,score\n");
    for (rank, (id, score)) in r.entries().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", rank + 1, id, score));
    }
    write_atomic(path, out.as_bytes())
}

fn summary_csv(summary: &Summary) -> String {
    let mut out = String::from(
        "subject,corruption,budget_pct,improvement_pct,second_best_method\n",
    );
    for row in &summary.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.subject,
            row.corruption,
            fmt_pct(row.budget_fraction),
            row.improvement_pct,
            row.second_best_method
        ));
    }
    out
}

/// Ablation report row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub subject: String,
    pub corruption: String,
    pub severity: u8,
    pub variant: String,
    pub is_reference: bool,
    pub budget_fraction: f64,
    pub budget_count: usize,
    pub trc: f64,
}

/// Train the full estimator plus its seven ablated variants per subject and
/// report TRC at the (tight) ablation budgets.
pub fn cmd_ablate(cfg: &ExperimentConfig, workers: Option<usize>) -> CliResult<Vec<AblationRow>> {
    let pool = worker_pool(workers)?;
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir)?;

    let (source_train, source_test) = load_source(cfg)?;
    let m_s = train_source_model(cfg, &source_train)?;
    let subjects = cfg.subjects();

    let prepared: Vec<CliResult<(SubjectOutcome, Option<SubjectArtifacts>)>> = pool.install(|| {
        subjects
            .par_iter()
            .enumerate()
            .map(|(idx, (corruption, severity))| {
                prepare_subject(
                    cfg,
                    &m_s,
                    &source_train,
                    &source_test,
                    *corruption,
                    *severity,
                    idx as u64,
                    false,
                )
            })
            .collect()
    });
    let mut artifacts = Vec::new();
    for r in prepared {
        let (_, art) = r?;
        if let Some(a) = art {
            artifacts.push(a);
        }
    }
    if artifacts.is_empty() {
        return Err(CliError::Runtime(
            "no admissible subjects to ablate".to_string(),
        ));
    }

    // (subject x variant) training/ranking tasks.
    let tasks: Vec<(usize, AblationVariant)> = artifacts
        .iter()
        .enumerate()
        .flat_map(|(si, _)| AblationVariant::ALL.iter().map(move |v| (si, *v)))
        .collect();
    let rows: Vec<CliResult<Vec<AblationRow>>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(si, variant)| {
                let subject = &artifacts[*si];
                let idx = subjects
                    .iter()
                    .position(|(c, s)| *c == subject.corruption && *s == subject.severity)
                    .expect("subject came from this list") as u64;
                let mm = train_estimator(
                    cfg,
                    &subject.training_records,
                    *variant,
                    subject.calibration.threshold,
                    idx,
                )?;
                let label = format!("metasel-{}", variant.name());
                let ranking = rank_with_estimator(&mm, subject, &label)?;
                let mut out = Vec::new();
                for &fraction in &cfg.ablation_budgets {
                    let b = budget_count(fraction, ranking.len());
                    let t = trc(&ranking, &subject.oracle, b)?;
                    out.push(AblationRow {
                        subject: subject.name.clone(),
                        corruption: subject.corruption.name().to_string(),
                        severity: subject.severity,
                        variant: variant.name().to_string(),
                        is_reference: *variant == AblationVariant::Full,
                        budget_fraction: fraction,
                        budget_count: b,
                        trc: t,
                    });
                }
                Ok(out)
            })
            .collect()
    });

    let mut all_rows = Vec::new();
    for r in rows {
        all_rows.extend(r?);
    }

    let mut csv = String::from(
        "subject,corruption,severity,variant,is_reference,budget_pct,budget_count,trc\n",
    );
    for row in &all_rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.subject,
            row.corruption,
            row.severity,
            row.variant,
            row.is_reference,
            fmt_pct(row.budget_fraction),
            row.budget_count,
            row.trc
        ));
    }
    write_atomic(&out_dir.join("ablation.csv"), csv.as_bytes())?;
    Ok(all_rows)
}

/// One consolidated report row per baseline.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub baseline: String,
    pub pairs: usize,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub median_improvement_pct: f64,
    pub p_value: f64,
}

/// Aggregate one or more completed runs from their CSV files alone: pooled
/// Wilcoxon comparisons of the focus method against every baseline over
/// (subject, budget) TRC pairs.
pub fn cmd_report(results_dir: &Path) -> CliResult<(Vec<ReportRow>, PathBuf)> {
    let curve_files = find_curves(results_dir)?;
    if curve_files.is_empty() {
        return Err(CliError::Runtime(format!(
            "no curves.csv under {}",
            results_dir.display()
        )));
    }

    // (subject, budget_pct) -> method -> trc
    let mut cells: BTreeMap<(String, String), BTreeMap<String, f64>> = BTreeMap::new();
    for file in &curve_files {
        let text = fs::read_to_string(file)?;
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 8 {
                return Err(CliError::Runtime(format!(
                    "{}:{}: expected 8 columns",
                    file.display(),
                    ln + 1
                )));
            }
            let subject = fields[0].to_string();
            let method = fields[1].to_string();
            let budget = fields[4].to_string();
            let trc_value: f64 = fields[6].parse().map_err(|e| {
                CliError::Runtime(format!("{}:{}: bad trc: {e}", file.display(), ln + 1))
            })?;
            cells
                .entry((subject, budget))
                .or_default()
                .insert(method, trc_value);
        }
    }

    let mut methods: Vec<String> = cells
        .values()
        .flat_map(|m| m.keys().cloned())
        .collect();
    methods.sort();
    methods.dedup();
    if !methods.iter().any(|m| m == "metasel") {
        return Err(CliError::Runtime(
            "report needs metasel curves to compare against".to_string(),
        ));
    }

    let mut rows = Vec::new();
    for baseline in methods.iter().filter(|m| m.as_str() != "metasel") {
        let mut pairs = Vec::new();
        let mut improvements = Vec::new();
        let (mut wins, mut ties, mut losses) = (0usize, 0usize, 0usize);
        for by_method in cells.values() {
            if let (Some(&focus), Some(&base)) =
                (by_method.get("metasel"), by_method.get(baseline))
            {
                pairs.push((focus, base));
                improvements.push(metasel::eval::improvement(focus, base));
                if focus > base {
                    wins += 1;
                } else if focus == base {
                    ties += 1;
                } else {
                    losses += 1;
                }
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let p_value = match wilcoxon_signed_rank(&pairs) {
            Ok((_, p)) => p,
            // All cells tied: no evidence either way.
            Err(metasel::Error::Degenerate(_)) => 1.0,
            Err(e) => return Err(e.into()),
        };
        improvements.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(ReportRow {
            baseline: baseline.clone(),
            pairs: pairs.len(),
            wins,
            ties,
            losses,
            median_improvement_pct: metasel::eval::quantile(&improvements, 0.5),
            p_value,
        });
    }

    // trc_matrix.csv: one row per (subject, budget) cell, method columns.
    let mut matrix = String::from("subject,budget_pct");
    for m in &methods {
        matrix.push(',');
        matrix.push_str(m);
    }
    matrix.push('\n');
    for ((subject, budget), by_method) in &cells {
        matrix.push_str(&format!("{subject},{budget}"));
        for m in &methods {
            matrix.push(',');
            if let Some(v) = by_method.get(m) {
                matrix.push_str(&v.to_string());
            }
        }
        matrix.push('\n');
    }
    write_atomic(&results_dir.join("trc_matrix.csv"), matrix.as_bytes())?;

    let mut report = String::from(
        "baseline,pairs,wins,ties,losses,median_improvement_pct,p_value\n",
    );
    for r in &rows {
        report.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.baseline, r.pairs, r.wins, r.ties, r.losses, r.median_improvement_pct, r.p_value
        ));
    }
    let report_path = results_dir.join("report.csv");
    write_atomic(&report_path, report.as_bytes())?;
    Ok((rows, report_path))
}

/// `curves.csv` directly in the directory or one level down (multiple runs).
fn find_curves(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let direct = dir.join("curves.csv");
    if direct.is_file() {
        out.push(direct);
    }
    if dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .collect();
        entries.sort();
        for e in entries {
            let nested = e.join("curves.csv");
            if nested.is_file() {
                out.push(nested);
            }
        }
    }
    Ok(out)
}
