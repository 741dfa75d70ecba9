//! Command-line entry points: `gen`, `edit`, `ablate`, `verify`, `report`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{manifest_file, parse_seeds, unix_now, RunConfig, RunManifest};
use crate::envgen::{
    export_jsonl, generate_triplets, generate_world, import_jsonl, validate_triplet, EditTriplet, ShiftKind, World,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, Aggregate, HarnessRun, MetricsReport, Setup, Variant};
use crate::irm_tv::LambdaMode;
use crate::risks::RiskReport;
use crate::tensor::Tensor;
use crate::verify::{run_verify, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "invedit", version, about = "Invariant-trajectory knowledge editing on a toy multimodal model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark as JSONL.
    Gen(Common),
    /// Train edits for every seed and report metrics.
    Edit(Common),
    /// Run every configured variant and tabulate the metrics.
    Ablate(Common),
    /// Run the numerical self-checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Negate the analytic penalty gradient; the gradient check must
        /// then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Summarise the reports found in an output directory.
    Report(Common),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds as `a,b,c` or `lo..hi`, overriding `seeds`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Training variant, e.g. `full`, `no_gen`, `fixed_lambda:0.001`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Number of sequential edits; 1 is one-step editing.
    #[arg(long = "T")]
    pub t: Option<usize>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(t) = self.t {
            cfg.t = t;
            cfg.n_edits = cfg.n_edits.max(t);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Gen(c) => c.resolve().and_then(|cfg| cmd_gen(&cfg)),
        Command::Edit(c) => c.resolve().and_then(|cfg| cmd_edit(&cfg)),
        Command::Ablate(c) => c.resolve().and_then(|cfg| cmd_ablate(&cfg)),
        Command::Verify {
            common,
            inject_sign_flip,
        } => common.resolve().and_then(|cfg| {
            cmd_verify(
                &cfg,
                VerifyOptions {
                    inject_sign_flip: *inject_sign_flip,
                },
            )
        }),
        Command::Report(c) => c.resolve().and_then(|cfg| cmd_report(&cfg)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Creates `out_dir` and removes a stale manifest so that a failed run
/// never leaves one behind.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let m = cfg.out_dir.join(manifest_file(command));
    if m.exists() {
        fs::remove_file(m)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// `gen`: world, records, validation, JSONL.
pub fn cmd_gen(cfg: &RunConfig) -> Result<bool> {
    let started = unix_now();
    prepare_out(cfg, "gen")?;
    let world = generate_world(&cfg.world)?;
    let records = generate_triplets(&world, 0, cfg.n_records)?;
    let invalid: Vec<(usize, Vec<String>)> = records
        .par_iter()
        .map(|t| (t.id, validate_triplet(t, &world)))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if let Some((id, v)) = invalid.first() {
        eprintln!("{} invalid records; first is {id}: {}", invalid.len(), v.join("; "));
        return Ok(false);
    }
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    export_jsonl(&world.spec, &records, &path)?;
    let easy = records.iter().filter(|r| r.shift == ShiftKind::Easy).count();
    println!(
        "wrote {} records to {} (easy {easy}, hard {}), ε = {:.4}",
        records.len(),
        path.display(),
        records.len() - easy,
        world.epsilon
    );
    let mut m = RunManifest::new("gen", cfg.hash(), started);
    m.artifacts.push(path);
    m.write(&cfg.out_dir)?;
    Ok(true)
}

/// World and the first `n_edits` records of the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Result<(World, Vec<EditTriplet>)> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(Error::Config {
            field: "dataset".into(),
            reason: format!("{} not found; run `gen` first", path.display()),
        });
    }
    let (spec, mut records) = import_jsonl(&path)?;
    let world = generate_world(&spec)?;
    if records.len() < cfg.n_edits {
        return Err(Error::Config {
            field: "n_edits".into(),
            reason: format!("dataset holds {} records, need {}", records.len(), cfg.n_edits),
        });
    }
    records.truncate(cfg.n_edits);
    Ok((world, records))
}

fn lambda_tag(mode: LambdaMode) -> &'static str {
    match mode {
        LambdaMode::Adaptive => "adaptive",
        LambdaMode::Fixed { .. } => "fixed",
        LambdaMode::Off => "off",
    }
}

/// One harness run for `variant` on `seed`.
fn run_seed(cfg: &RunConfig, world: &World, records: &[EditTriplet], variant: Variant, seed: u64) -> Result<HarnessRun> {
    let setup = Setup::with_triplets(world.clone(), cfg.model, records.to_vec(), seed)?;
    let mut run = if cfg.t == 1 {
        setup.one_step(&cfg.train, variant)?
    } else {
        setup.sequential(&cfg.train, variant, cfg.t)?
    };
    run.metrics.config_hash = cfg.hash();
    Ok(run)
}

pub fn write_histories_csv(path: &Path, histories: &[Vec<RiskReport>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["edit", "step", "r_rel", "r_loc", "r_gen", "tv_penalty", "lambda", "r_total"])?;
    for (i, h) in histories.iter().enumerate() {
        for r in h {
            w.write_record([
                i.to_string(),
                r.step.to_string(),
                r.r_rel.to_string(),
                r.r_loc.to_string(),
                r.r_gen.to_string(),
                r.tv_penalty.to_string(),
                r.lambda.to_string(),
                r.r_total.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const METRIC_COLUMNS: [&str; 12] = [
    "variant", "seed", "t", "rel", "gen", "gen_target", "t_loc", "m_loc", "n_rel", "n_gen", "n_t_loc", "n_m_loc",
];

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn metric_row(variant: Variant, m: &MetricsReport) -> Vec<String> {
    vec![
        variant.to_string(),
        m.seed.to_string(),
        m.t.to_string(),
        opt(m.rel),
        opt(m.gen),
        opt(m.gen_target),
        opt(m.t_loc),
        opt(m.m_loc),
        m.n_rel.to_string(),
        m.n_gen.to_string(),
        m.n_t_loc.to_string(),
        m.n_m_loc.to_string(),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub lambda_mode: String,
    pub per_seed: Vec<MetricsReport>,
    pub failures: Vec<SeedFailure>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditReport {
    pub config_hash: String,
    pub t: usize,
    pub variant: VariantSummary,
    /// The reliability-only baseline on the same seeds and records.
    pub baseline: Option<VariantSummary>,
}

fn summarise(cfg: &RunConfig, variant: Variant, runs: &[(u64, Result<HarnessRun>)]) -> VariantSummary {
    let per_seed: Vec<MetricsReport> = runs
        .iter()
        .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.metrics.clone()))
        .collect();
    let failures = runs
        .iter()
        .filter_map(|(s, r)| {
            r.as_ref().err().map(|e| SeedFailure {
                seed: *s,
                error: e.to_string(),
            })
        })
        .collect();
    VariantSummary {
        variant,
        lambda_mode: lambda_tag(variant.apply(&cfg.train).lambda).into(),
        aggregate: aggregate(&per_seed),
        per_seed,
        failures,
    }
}

fn run_variant(cfg: &RunConfig, world: &World, records: &[EditTriplet], variant: Variant) -> Vec<(u64, Result<HarnessRun>)> {
    cfg.seeds
        .par_iter()
        .map(|&s| (s, run_seed(cfg, world, records, variant, s)))
        .collect()
}

fn fmt_ms(m: &crate::eval::MeanStd) -> String {
    match (m.mean, m.std) {
        (Some(a), Some(b)) => format!("{:6.2} ± {:5.2}", 100.0 * a, 100.0 * b),
        _ => "     -        ".into(),
    }
}

fn print_table(rows: &[&VariantSummary]) {
    println!(
        "{:<20} {:<9} {:>15} {:>15} {:>15} {:>15} {:>15}",
        "variant", "λ", "Rel", "Gen", "Gen→target", "T-Loc", "M-Loc"
    );
    for r in rows {
        let a = &r.aggregate;
        println!(
            "{:<20} {:<9} {:>15} {:>15} {:>15} {:>15} {:>15}",
            r.variant.to_string(),
            r.lambda_mode,
            fmt_ms(&a.rel),
            fmt_ms(&a.gen),
            fmt_ms(&a.gen_target),
            fmt_ms(&a.t_loc),
            fmt_ms(&a.m_loc)
        );
    }
}

/// `edit`: per-seed training for the configured variant plus the
/// reliability-only baseline.
pub fn cmd_edit(cfg: &RunConfig) -> Result<bool> {
    let started = unix_now();
    prepare_out(cfg, "edit")?;
    let (world, records) = load_dataset(cfg)?;
    let mut artifacts = Vec::new();

    let runs = run_variant(cfg, &world, &records, cfg.variant);
    for (seed, run) in &runs {
        match run {
            Ok(run) => {
                let dir = cfg.out_dir.join(format!("seed_{seed}"));
                fs::create_dir_all(&dir)?;
                let hist = dir.join("history.csv");
                write_histories_csv(&hist, &run.histories)?;
                let metrics = dir.join("metrics.json");
                write_json(&metrics, &run.metrics)?;
                let deltas = dir.join("deltas.json");
                let maps: Vec<&BTreeMap<String, Tensor>> = run.deltas.iter().map(|d| d.params.as_map()).collect();
                write_json(&deltas, &maps)?;
                artifacts.extend([hist, metrics, deltas]);
            }
            Err(e) => eprintln!("seed {seed}: {e}"),
        }
    }
    let main = summarise(cfg, cfg.variant, &runs);
    if main.per_seed.is_empty() {
        eprintln!("every seed failed");
        return Ok(false);
    }
    let baseline = (cfg.variant != Variant::NaiveFt)
        .then(|| summarise(cfg, Variant::NaiveFt, &run_variant(cfg, &world, &records, Variant::NaiveFt)));

    let report = EditReport {
        config_hash: cfg.hash(),
        t: cfg.t,
        variant: main,
        baseline,
    };
    let rows: Vec<&VariantSummary> = std::iter::once(&report.variant).chain(report.baseline.as_ref()).collect();
    print_table(&rows);

    let csv_path = cfg.out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in &rows {
        for m in &r.per_seed {
            w.write_record(metric_row(r.variant, m))?;
        }
    }
    w.flush()?;
    let json_path = cfg.out_dir.join("report.json");
    write_json(&json_path, &report)?;
    artifacts.extend([csv_path, json_path]);

    let mut m = RunManifest::new("edit", cfg.hash(), started);
    m.artifacts = artifacts;
    m.write(&cfg.out_dir)?;
    Ok(true)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub t: usize,
    pub rows: Vec<VariantSummary>,
}

const ABLATION_COLUMNS: [&str; 14] = [
    "variant",
    "lambda_mode",
    "n_seeds",
    "rel_mean",
    "rel_std",
    "gen_mean",
    "gen_std",
    "gen_target_mean",
    "gen_target_std",
    "t_loc_mean",
    "t_loc_std",
    "m_loc_mean",
    "m_loc_std",
    "failures",
];

pub fn write_ablation_csv(path: &Path, rows: &[VariantSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_COLUMNS)?;
    for r in rows {
        let a = &r.aggregate;
        let mut rec = vec![r.variant.to_string(), r.lambda_mode.clone(), a.n_seeds.to_string()];
        for ms in [&a.rel, &a.gen, &a.gen_target, &a.t_loc, &a.m_loc] {
            rec.push(opt(ms.mean));
            rec.push(opt(ms.std));
        }
        rec.push(r.failures.len().to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `ablate`: every configured variant on identical seeds and records.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<bool> {
    let started = unix_now();
    prepare_out(cfg, "ablate")?;
    let (world, records) = load_dataset(cfg)?;
    let rows: Vec<VariantSummary> = cfg
        .variants
        .par_iter()
        .map(|&v| summarise(cfg, v, &run_variant(cfg, &world, &records, v)))
        .collect();
    print_table(&rows.iter().collect::<Vec<_>>());
    let csv_path = cfg.out_dir.join("ablation.csv");
    write_ablation_csv(&csv_path, &rows)?;
    let json_path = cfg.out_dir.join("ablation.json");
    write_json(
        &json_path,
        &AblationReport {
            config_hash: cfg.hash(),
            t: cfg.t,
            rows,
        },
    )?;
    let mut m = RunManifest::new("ablate", cfg.hash(), started);
    m.artifacts = vec![csv_path, json_path];
    m.write(&cfg.out_dir)?;
    Ok(true)
}

/// `verify`: prints one line per check; `false` when any check fails.
pub fn cmd_verify(cfg: &RunConfig, opts: VerifyOptions) -> Result<bool> {
    let started = unix_now();
    prepare_out(cfg, "verify")?;
    let report = run_verify(opts)?;
    let mut out = std::io::stdout().lock();
    for c in &report.checks {
        writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.observed)?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", report.checks.len())?;
    let path = cfg.out_dir.join("verify.json");
    write_json(&path, &report)?;
    if !report.passed {
        return Ok(false);
    }
    let mut m = RunManifest::new("verify", cfg.hash(), started);
    m.artifacts.push(path);
    m.write(&cfg.out_dir)?;
    Ok(true)
}

/// `report`: collects `report.json` and `ablation.json` under `out_dir`
/// into one CSV table.
pub fn cmd_report(cfg: &RunConfig) -> Result<bool> {
    let started = unix_now();
    let mut rows: Vec<VariantSummary> = Vec::new();
    let mut stack = vec![cfg.out_dir.clone()];
    let mut found = Vec::new();
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "report.json" || n == "ablation.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    for p in &found {
        let text = fs::read_to_string(p)?;
        if p.file_name().is_some_and(|n| n == "report.json") {
            let r: EditReport = serde_json::from_str(&text)?;
            rows.push(r.variant);
            rows.extend(r.baseline);
        } else {
            let r: AblationReport = serde_json::from_str(&text)?;
            rows.extend(r.rows);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config {
            field: "out_dir".into(),
            reason: format!("no report.json or ablation.json under {}", cfg.out_dir.display()),
        });
    }
    prepare_out(cfg, "report")?;
    print_table(&rows.iter().collect::<Vec<_>>());
    let path = cfg.out_dir.join("summary.csv");
    write_ablation_csv(&path, &rows)?;
    let mut m = RunManifest::new("report", cfg.hash(), started);
    m.artifacts.push(path);
    m.write(&cfg.out_dir)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DATASET_FILE;

    const SMALL: &str = "seeds = [0]\nn_records = 12\nn_edits = 2\nvariants = [\"full\", \"naive_ft\"]\n[train]\nmax_steps = 15\n";

    fn invoke(args: &[&str]) -> ExitCode {
        run(Cli::try_parse_from(std::iter::once("invedit").chain(args.iter().copied())).unwrap())
    }

    fn setup(config: &str) -> (tempfile::TempDir, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        fs::write(&cfg, config).unwrap();
        let out = dir.path().join("out");
        (dir, cfg.display().to_string(), out.display().to_string())
    }

    #[test]
    fn gen_writes_records_and_a_matching_manifest() {
        let (_dir, cfg, out) = setup(SMALL);
        assert_eq!(invoke(&["gen", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        let out = PathBuf::from(out);
        let first = fs::read(out.join(DATASET_FILE)).unwrap();
        let lines = String::from_utf8(first.clone()).unwrap().lines().count();
        assert_eq!(lines, 12 + 1, "header plus one line per record");
        let manifest = RunManifest::read(&out, "gen").unwrap();
        let mut resolved = RunConfig::load(Path::new(&cfg)).unwrap();
        resolved.out_dir = out.clone();
        assert_eq!(manifest.config_hash, resolved.hash());
        assert_eq!(manifest.artifacts, vec![PathBuf::from(DATASET_FILE)]);

        let out = out.display().to_string();
        assert_eq!(invoke(&["gen", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        assert_eq!(fs::read(Path::new(&out).join(DATASET_FILE)).unwrap(), first);
        assert_eq!(RunManifest::read(Path::new(&out), "gen").unwrap().config_hash, manifest.config_hash);
    }

    #[test]
    fn edit_and_report_are_reproducible() {
        let (_dir, cfg, out) = setup(SMALL);
        assert_eq!(invoke(&["gen", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        let read = |p: &str| fs::read(Path::new(&out).join(p)).unwrap();
        assert_eq!(invoke(&["edit", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        let (metrics, deltas) = (read("seed_0/metrics.json"), read("seed_0/deltas.json"));
        assert_eq!(invoke(&["edit", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        assert_eq!(read("seed_0/metrics.json"), metrics);
        assert_eq!(read("seed_0/deltas.json"), deltas);
        let manifest = RunManifest::read(Path::new(&out), "edit").unwrap();
        assert!(manifest.artifacts.contains(&PathBuf::from("report.json")));

        assert_eq!(invoke(&["report", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        let summary = String::from_utf8(read("summary.csv")).unwrap();
        assert!(summary.lines().count() >= 3, "{summary}");
    }

    #[test]
    fn config_errors_exit_with_two() {
        let (_dir, cfg, out) = setup("[world]\nepsilon = -0.5\n");
        assert_eq!(invoke(&["gen", "--config", &cfg, "--out", &out]), ExitCode::from(2));
        assert!(!Path::new(&out).join(manifest_file("gen")).exists());
        let (_dir, cfg, out) = setup(SMALL);
        assert_eq!(
            invoke(&["edit", "--config", &cfg, "--out", &out, "--variant", "bogus"]),
            ExitCode::from(2)
        );
        assert_eq!(invoke(&["gen", "--config", &cfg, "--out", &out, "--seeds", "3..1"]), ExitCode::from(2));
        assert_eq!(invoke(&["gen", "--config", "/nonexistent/run.toml"]), ExitCode::from(1));
    }

    #[test]
    fn sign_flip_fails_verify_without_a_manifest() {
        let (_dir, cfg, out) = setup(SMALL);
        assert_eq!(
            invoke(&["verify", "--config", &cfg, "--out", &out, "--inject-sign-flip"]),
            ExitCode::from(1)
        );
        assert!(!Path::new(&out).join(manifest_file("verify")).exists());
        assert_eq!(invoke(&["verify", "--config", &cfg, "--out", &out]), ExitCode::SUCCESS);
        assert!(Path::new(&out).join(manifest_file("verify")).exists());
    }
}
