use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fakeradar::bench::generate_benchmark;
use fakeradar::embedding::{parse_frd1, write_frd1, EmbeddingSet};
use fakeradar::eval::{
    correction_rate_of, export_features, predict, self_correction_rate, CorrectionRate, ScoredSet,
};
use fakeradar::outlier::{generate_outliers, pool_to_set, ProbeMode};
use fakeradar::pipeline::{median, run_ablation, AblationReport, PipelineConfig, Variant};
use fakeradar::store::{load_states, queues_to_set, ClusterReport};
use fakeradar::subcluster::{cluster_categories, SubclusterState};
use fakeradar::trainer::{parse_model, train, write_model, TrainConfig};
use fakeradar::{Error, Label};

mod assertion;

use assertion::Assertion;

const SEED_ENV: &str = "FAKERADAR_SEED";
const CLUSTER_REPORT: &str = "clusters.json";
const QUEUE_FILE: &str = "queues.frd1";

#[derive(Parser)]
#[command(
    name = "fakeradar",
    version,
    about = "Subcluster outlier probing and tri-class training over embedding files"
)]
struct Cli {
    /// JSON pipeline configuration; every key is optional and flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for every stage [default: config seed, else $FAKERADAR_SEED, else 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything serially [default: one per core].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: three FRD1 splits plus a manifest.
    Synth {
        /// Output directory.
        #[arg(long, default_value = "bench")]
        out: PathBuf,
        /// Embedding dimension [default: from config, 32].
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Fit dynamic subclusters for every category of a training file.
    Cluster {
        /// Training embeddings (FRD1).
        #[arg(long)]
        train: PathBuf,
        /// Output directory for the JSON report and the queue sidecar.
        #[arg(long, default_value = "clusters")]
        out: PathBuf,
        /// Ablation variant whose clustering to use (full, fixed-k, no-prior, ...).
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Initial subclusters per category [default: from config, 5].
        #[arg(long)]
        k_init: Option<usize>,
        /// Dirichlet-process concentration [default: from config, 1].
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Synthesize boundary outliers from stored subclusters.
    Probe {
        /// Directory written by `cluster`.
        #[arg(long, default_value = "clusters")]
        clusters: PathBuf,
        /// Output directory for the pool and its summary.
        #[arg(long, default_value = "probe")]
        out: PathBuf,
        /// Selection rule [default: from config, quantile].
        #[arg(long, value_parser = ["quantile", "threshold"])]
        mode: Option<String>,
        /// Quantile mode: keep candidates in this lowest-density fraction [default: 0.05].
        #[arg(long)]
        q: Option<f64>,
        /// Threshold mode: natural log of the density bound ε [required with --mode threshold unless set in config].
        #[arg(long, allow_hyphen_values = true)]
        epsilon: Option<f64>,
        /// Outliers kept per subcluster [default: from config, 50].
        #[arg(long)]
        per_subcluster: Option<usize>,
        /// Candidates drawn per subcluster [default: from config, 1000].
        #[arg(long)]
        candidates: Option<usize>,
        /// Epoch index mixed into the sampling seed.
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
    /// Train the projection head and classifier.
    Train {
        /// Training embeddings (FRD1).
        #[arg(long)]
        train: PathBuf,
        /// Directory written by `cluster`.
        #[arg(long, default_value = "clusters")]
        clusters: PathBuf,
        /// Model file (FRM1).
        #[arg(long, default_value = "model.frm1")]
        out: PathBuf,
        /// Training log [default: the model path with a .json extension].
        #[arg(long)]
        log: Option<PathBuf>,
        /// Ablation variant whose objective to train.
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Fixed outlier pool (FRD1 from `probe`) instead of per-epoch synthesis.
        #[arg(long)]
        outliers: Option<PathBuf>,
        /// Training epochs [default: from config, 60].
        #[arg(long)]
        epochs: Option<usize>,
        /// Base learning rate [default: from config, 1e-3].
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score embedding files and report AUC and correction rates.
    Eval {
        /// Model file (FRM1).
        #[arg(long, default_value = "model.frm1")]
        model: PathBuf,
        /// Embedding files to score; repeat for several.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// JSON report.
        #[arg(long, default_value = "eval.json")]
        out: PathBuf,
        /// Per-record scores as CSV [default: not written].
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Binary model whose misses the correction rate is measured against [default: none].
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Bound checked on every dataset, e.g. `auc>=0.9`; metrics: auc, self_correction, baseline_correction. Exit 3 on failure.
        #[arg(long = "assert", value_name = "EXPR")]
        asserts: Vec<Assertion>,
    },
    /// Run ablation variants over several seeds on fresh benchmarks.
    Ablate {
        /// Output directory for the JSON report and the CSV table.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Comma-separated variants [default: from config, all].
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Comma-separated seeds [default: from config, 0,1,2,3,4].
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Bound on the report, e.g. `gap(full,binary)>=0.02`; metrics: median(v), median_known(v), gap(a,b), correction_gap. Exit 3 on failure.
        #[arg(long = "assert", value_name = "EXPR")]
        asserts: Vec<Assertion>,
    },
    /// Write projected, normalized features with labels as CSV.
    Export {
        /// Model file (FRM1).
        #[arg(long, default_value = "model.frm1")]
        model: PathBuf,
        /// Embeddings to project (FRD1).
        #[arg(long)]
        data: PathBuf,
        /// CSV destination.
        #[arg(long, default_value = "features.csv")]
        out: PathBuf,
    },
}

enum Failure {
    Error(Error),
    /// Requested bounds that did not hold.
    Assertion(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Assertion(failed)) => {
            eprintln!(
                "{}",
                json!({"error": "assertion", "exit_code": 3, "failed": failed})
            );
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            let code = if e.is_io() { 2 } else { 1 };
            eprintln!(
                "{}",
                json!({"error": kind(&e), "exit_code": code, "message": e.to_string()})
            );
            ExitCode::from(code)
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } | Error::File { .. } => "io",
        Error::Format(_) | Error::Truncated { .. } | Error::Parse { .. } => "format",
        Error::Validation(_) => "validation",
        Error::Contract(_) => "contract",
        Error::Config(_) | Error::Json(_) => "config",
        Error::UndefinedMetric(_) => "undefined_metric",
        Error::Generation(_) => "generation",
        Error::NoAcceptedOutliers { .. } => "no_outliers",
    }
}

/// Reads an input file; a missing file is a validation error naming it.
fn read_input(path: &Path) -> fakeradar::Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Validation(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn read_set(path: &Path) -> fakeradar::Result<EmbeddingSet> {
    parse_frd1(&read_input(path)?).map_err(|e| match e {
        Error::Io { .. } | Error::File { .. } => e,
        other => Error::Validation(format!("{}: {other}", path.display())),
    })
}

fn write_output(path: &Path, bytes: &[u8]) -> fakeradar::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> fakeradar::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_output(path, text.as_bytes())
}

fn write_set(path: &Path, set: &EmbeddingSet) -> fakeradar::Result<()> {
    let mut bytes = Vec::new();
    write_frd1(set, &mut bytes)?;
    write_output(path, &bytes)
}

fn load_config(cli: &Cli) -> fakeradar::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = String::from_utf8(read_input(path)?)
                .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
            PipelineConfig::from_json(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    let env_seed =
        match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?),
            Err(_) => None,
        };
    if let Some(seed) = cli.seed.or(cfg.seed).or(env_seed) {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn load_clusters(dir: &Path) -> fakeradar::Result<(ClusterReport, Vec<SubclusterState>)> {
    let report_path = dir.join(CLUSTER_REPORT);
    let report: ClusterReport = serde_json::from_slice(&read_input(&report_path)?)
        .map_err(|e| Error::Validation(format!("{}: {e}", report_path.display())))?;
    let queues = read_set(&dir.join(QUEUE_FILE))?;
    let states = load_states(&report, &queues)?;
    Ok((report, states))
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out, dim } => {
            if let Some(d) = dim {
                cfg.bench.dim = d;
            }
            cfg.validate()?;
            let b = generate_benchmark(&cfg.bench)?;
            write_set(&out.join("train.frd1"), &b.train)?;
            write_set(&out.join("test_known.frd1"), &b.test_known)?;
            write_set(&out.join("test_novel.frd1"), &b.test_novel)?;
            write_json(&out.join("manifest.json"), &b.manifest)?;
            println!(
                "{}",
                json!({"train": b.train.len(), "test_known": b.test_known.len(), "test_novel": b.test_novel.len(), "out": out})
            );
        }
        Command::Cluster {
            train,
            out,
            variant,
            k_init,
            alpha,
        } => {
            if let Some(k) = k_init {
                cfg.cluster.k_init = k;
            }
            if let Some(a) = alpha {
                cfg.cluster.alpha = a;
            }
            cfg.validate()?;
            let set = read_set(&train)?;
            let cluster_cfg = variant.cluster_config(&cfg.cluster);
            let states = cluster_categories(&set, &cluster_cfg, variant.merges_fakes())?;
            let report = ClusterReport::new(&cluster_cfg, variant.merges_fakes(), &states);
            write_json(&out.join(CLUSTER_REPORT), &report)?;
            write_set(&out.join(QUEUE_FILE), &queues_to_set(&states)?)?;
            let ks: Vec<_> = states
                .iter()
                .map(|s| json!([s.category.code(), s.final_k()]))
                .collect();
            println!(
                "{}",
                json!({"categories": states.len(), "final_k": ks, "out": out})
            );
        }
        Command::Probe {
            clusters,
            out,
            mode,
            q,
            epsilon,
            per_subcluster,
            candidates,
            epoch,
        } => {
            let probe = &mut cfg.probe;
            let mode = mode.as_deref().unwrap_or(match probe.mode {
                ProbeMode::Quantile { .. } => "quantile",
                ProbeMode::Threshold { .. } => "threshold",
            });
            probe.mode = match (mode, probe.mode) {
                ("quantile", ProbeMode::Quantile { q: cq }) => {
                    ProbeMode::Quantile { q: q.unwrap_or(cq) }
                }
                ("quantile", _) => ProbeMode::Quantile {
                    q: q.unwrap_or(0.05),
                },
                (_, ProbeMode::Threshold { log_epsilon }) => ProbeMode::Threshold {
                    log_epsilon: epsilon.unwrap_or(log_epsilon),
                },
                _ => ProbeMode::Threshold {
                    log_epsilon: epsilon.ok_or_else(|| {
                        Error::Config(
                            "threshold mode needs --epsilon (a natural-log density bound)".into(),
                        )
                    })?,
                },
            };
            if let Some(n) = per_subcluster {
                probe.per_subcluster = n;
            }
            if let Some(m) = candidates {
                probe.candidates = m;
            }
            cfg.validate()?;
            let (_, states) = load_clusters(&clusters)?;
            let pool = generate_outliers(&states, &cfg.probe, epoch)?;
            write_set(&out.join("outliers.frd1"), &pool_to_set(&pool)?)?;
            write_json(
                &out.join("probe.json"),
                &json!({
                    "config": cfg.probe,
                    "epoch": epoch,
                    "total": pool.len(),
                    "subclusters": pool.probes,
                    "warnings": pool.warnings,
                }),
            )?;
            println!(
                "{}",
                json!({"outliers": pool.len(), "warnings": pool.warnings.len(), "out": out})
            );
        }
        Command::Train {
            train: train_path,
            clusters,
            out,
            log,
            variant,
            outliers,
            epochs,
            lr,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            cfg.validate()?;
            let set = read_set(&train_path)?;
            let (_, states) = load_clusters(&clusters)?;
            let fixed = match &outliers {
                Some(p) => {
                    let pool = read_set(p)?;
                    if pool.labels().iter().any(|l| *l != Label::OUTLIER) {
                        return Err(Error::Validation(format!(
                            "{}: outlier pool holds non-outlier labels",
                            p.display()
                        ))
                        .into());
                    }
                    Some((0..pool.len()).map(|i| pool.dvector(i)).collect::<Vec<_>>())
                }
                None => None,
            };
            let train_cfg = TrainConfig {
                objective: variant.objective(),
                ..cfg.train.clone()
            };
            let outcome = train(&set, &states, &cfg.probe, &train_cfg, fixed.as_deref())?;
            let mut bytes = Vec::new();
            write_model(&outcome.model, &mut bytes)?;
            write_output(&out, &bytes)?;
            let log = log.unwrap_or_else(|| out.with_extension("json"));
            write_json(
                &log,
                &json!({
                    "variant": variant,
                    "train": train_cfg,
                    "probe": cfg.probe,
                    "fixed_outliers": fixed.as_ref().map(|f| f.len()),
                    "epochs": outcome.log,
                    "warnings": outcome.warnings,
                }),
            )?;
            let last = outcome.log.last().map(|l| (l.l_total, l.accuracy));
            println!(
                "{}",
                json!({"model": out, "log": log, "final_loss_accuracy": last})
            );
        }
        Command::Eval {
            model,
            data,
            out,
            scores,
            baseline,
            asserts,
        } => {
            let m = parse_model(&read_input(&model)?)?;
            let base = match &baseline {
                Some(p) => Some(parse_model(&read_input(p)?)?),
                None => None,
            };
            let mut reports = Vec::new();
            let mut csv_rows =
                String::from("dataset,index,label,p_real,p_fake,p_outlier,merged_score\n");
            let mut failed = Vec::new();
            for path in &data {
                let set = read_set(path)?;
                let scored = predict(&m, &set)?;
                let base_scored = base.as_ref().map(|b| predict(b, &set)).transpose()?;
                let report = dataset_report(path, &scored, base_scored.as_ref())?;
                for a in &asserts {
                    let value = report.metric(&a.metric)?;
                    if !a.holds(value) {
                        failed.push(format!(
                            "{}: {a} (observed {})",
                            path.display(),
                            fmt_opt(value)
                        ));
                    }
                }
                for (i, s) in scored.samples.iter().enumerate() {
                    csv_rows.push_str(&format!(
                        "{},{i},{},{},{},{},{}\n",
                        path.display(),
                        s.label.code(),
                        s.p_real,
                        s.p_fake,
                        s.p_outlier,
                        s.merged_score
                    ));
                }
                reports.push(report);
            }
            let assertions: Vec<String> = asserts.iter().map(|a| a.to_string()).collect();
            write_json(
                &out,
                &json!({"model": model, "baseline": baseline, "datasets": reports, "assertions": assertions, "failed": failed}),
            )?;
            if let Some(p) = &scores {
                write_output(p, csv_rows.as_bytes())?;
            }
            let aucs: Vec<_> = reports.iter().map(|r| json!([r.path, r.auc])).collect();
            println!("{}", json!({"auc": aucs, "out": out}));
            if !failed.is_empty() {
                return Err(Failure::Assertion(failed));
            }
        }
        Command::Ablate {
            out,
            variants,
            seeds,
            asserts,
        } => {
            if let Some(v) = variants {
                cfg.ablation.variants = v;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
            }
            cfg.validate()?;
            let report = run_ablation(&cfg)?;
            write_json(&out.join("ablation.json"), &report)?;
            let mut csv_rows = String::from("variant,seed,auc_known,auc_novel,subclusters\n");
            for r in &report.rows {
                let ks: Vec<String> = r
                    .subclusters
                    .iter()
                    .map(|(c, k)| format!("{c}:{k}"))
                    .collect();
                csv_rows.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.variant,
                    r.seed,
                    r.auc_known,
                    r.auc_novel,
                    ks.join(" ")
                ));
            }
            write_output(&out.join("ablation.csv"), csv_rows.as_bytes())?;
            let mut failed = Vec::new();
            for a in &asserts {
                let value = ablation_metric(&report, &a.metric)?;
                if !a.holds(value) {
                    failed.push(format!("{a} (observed {})", fmt_opt(value)));
                }
            }
            let medians: Vec<_> = report
                .summary
                .iter()
                .map(|s| json!([s.variant, s.median_novel]))
                .collect();
            println!("{}", json!({"median_novel_auc": medians, "out": out}));
            if !failed.is_empty() {
                return Err(Failure::Assertion(failed));
            }
        }
        Command::Export { model, data, out } => {
            let m = parse_model(&read_input(&model)?)?;
            let set = read_set(&data)?;
            let mut bytes = Vec::new();
            export_features(&m, &set, &mut bytes)?;
            write_output(&out, &bytes)?;
            println!("{}", json!({"records": set.len(), "out": out}));
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

#[derive(Serialize)]
struct DatasetReport {
    path: PathBuf,
    records: usize,
    real: usize,
    fake: usize,
    /// `None` when only one class is present.
    auc: Option<f64>,
    predicted_forged: usize,
    self_correction: CorrectionRate,
    baseline_auc: Option<f64>,
    baseline_correction: Option<CorrectionRate>,
}

impl DatasetReport {
    fn metric(&self, name: &str) -> fakeradar::Result<Option<f64>> {
        match name {
            "auc" => Ok(self.auc),
            "self_correction" => Ok(self.self_correction.value()),
            "baseline_correction" => Ok(self.baseline_correction.and_then(|c| c.value())),
            other => Err(Error::Config(format!("unknown eval metric {other:?}"))),
        }
    }
}

fn defined_auc(s: &ScoredSet) -> fakeradar::Result<Option<f64>> {
    match s.auc() {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn dataset_report(
    path: &Path,
    scored: &ScoredSet,
    base: Option<&ScoredSet>,
) -> fakeradar::Result<DatasetReport> {
    let labels: Vec<Label> = scored.samples.iter().map(|s| s.label).collect();
    Ok(DatasetReport {
        path: path.to_path_buf(),
        records: labels.len(),
        real: labels.iter().filter(|l| l.is_real()).count(),
        fake: labels.iter().filter(|l| l.is_fake()).count(),
        auc: defined_auc(scored)?,
        predicted_forged: scored.samples.iter().filter(|s| s.is_forged()).count(),
        self_correction: self_correction_rate(scored)?,
        baseline_auc: base.map(defined_auc).transpose()?.flatten(),
        baseline_correction: base.map(|b| correction_rate_of(b, scored)).transpose()?,
    })
}

fn ablation_metric(report: &AblationReport, metric: &str) -> fakeradar::Result<Option<f64>> {
    let summary = |name: &str| -> fakeradar::Result<_> {
        let v: Variant = name.trim().parse()?;
        report
            .summary_of(v)
            .ok_or_else(|| Error::Config(format!("variant {v} was not run")))
    };
    let args = |m: &str, prefix: &str| -> Option<Vec<String>> {
        m.strip_prefix(prefix)?
            .strip_suffix(')')
            .map(|inner| inner.split(',').map(str::to_string).collect())
    };
    if let Some(a) = args(metric, "median(") {
        return Ok(Some(summary(&a[0])?.median_novel));
    }
    if let Some(a) = args(metric, "median_known(") {
        return Ok(Some(summary(&a[0])?.median_known));
    }
    if let Some(a) = args(metric, "gap(") {
        if a.len() != 2 {
            return Err(Error::Config("gap takes two variants".into()));
        }
        return Ok(Some(
            summary(&a[0])?.median_novel - summary(&a[1])?.median_novel,
        ));
    }
    if metric == "correction_gap" {
        let med = |f: fn(&fakeradar::pipeline::CorrectionRow) -> CorrectionRate| {
            let v: Vec<f64> = report
                .self_correction
                .iter()
                .filter_map(|r| f(r).value())
                .collect();
            (!v.is_empty()).then(|| median(&v))
        };
        return Ok(match (med(|r| r.novel), med(|r| r.known)) {
            (Some(n), Some(k)) => Some(n - k),
            _ => None,
        });
    }
    Err(Error::Config(format!("unknown ablation metric {metric:?}")))
}
