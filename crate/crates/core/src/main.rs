//! Command-line front end: reads a JSON experiment config, runs the
//! counting kernels and analysis, and writes CSV tables with commented
//! metadata headers.
//!
//! Exit codes: 0 success, 2 config error, 3 physics validation error,
//! 4 budget exceeded.

use bosecount::analysis::{
    conditional, find_peaks, infer_phase, predict_counts, AnalysisError, PhaseSolution,
};
use bosecount::config::{ConfigError, ExperimentConfig, SourceSpec, Sweep, SweepParameter};
use bosecount::detector::{scale_array, DetectorArray};
use bosecount::kernel::{
    mixture_joint, Backend, JointCountDistribution, KernelCache, KernelError, KernelOptions,
};
use bosecount::number_stats::{binomial_thinning, moments, NumberDistribution};
use bosecount::output::{count_table_rows, fmt_f64, timestamp, write_csv, CsvTable};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

/// Basin mass below which a local maximum is not reported as a peak.
const PEAK_MIN_MASS: f64 = 0.05;

#[derive(Parser)]
#[command(
    name = "bosecount",
    about = "Joint counting statistics of two interfering Bose fields"
)]
struct Cli {
    /// JSON experiment configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory for CSV files
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// kernel cache directory
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// override the per-kernel configuration budget
    #[arg(long, global = true)]
    budget: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// compute the joint count table
    Joint,
    /// condition the joint table on one detector outcome and report peaks
    Conditional,
    /// verify the detector-rescaling invariance (thinned sources, R/q)
    ScalingCheck,
    /// run the conditional pipeline over a one-dimensional parameter grid
    Sweep,
    /// kernel cache maintenance
    Cache {
        #[command(subcommand)]
        op: CacheOp,
    },
}

#[derive(Subcommand)]
enum CacheOp {
    /// remove all cached kernels
    Clear,
    /// report cache size
    Stat,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(2, e)
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        let code = match &e {
            KernelError::BudgetExceeded { .. } => 4,
            KernelError::Detector(_) | KernelError::Table(_) | KernelError::Cache(_) => 3,
            KernelError::OracleScale { .. } => 3,
            KernelError::MassCheck { .. } => 3,
            KernelError::Quadrature(_) | KernelError::Backend(_) | KernelError::Stats(_) => 2,
        };
        CliError::new(code, e)
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Kernel(k) => k.into(),
            AnalysisError::InvalidParameter(_) => CliError::new(2, e),
            other => CliError::new(3, other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(3, format!("i/o error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure when a pool already exists (tests set one up)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Cache { op } = &cli.command {
        return run_cache(cli, op);
    }
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::new(2, "--config is required for this subcommand"))?;
    let cfg = ExperimentConfig::from_path(config_path)?;
    std::fs::create_dir_all(&cli.out)?;
    let ctx = RunContext::new(cli, cfg)?;
    match &cli.command {
        Command::Joint => run_joint(&ctx),
        Command::Conditional => run_conditional(&ctx),
        Command::ScalingCheck => run_scaling_check(&ctx),
        Command::Sweep => run_sweep(&ctx),
        Command::Cache { .. } => unreachable!(),
    }
}

struct RunContext {
    cfg: ExperimentConfig,
    out_dir: PathBuf,
    opts: KernelOptions,
}

impl RunContext {
    fn new(cli: &Cli, cfg: ExperimentConfig) -> Result<Self, CliError> {
        let mut opts = cfg.kernel_options();
        if let Some(b) = cli.budget {
            opts.budget = b;
        }
        if let Some(dir) = &cli.cache {
            opts.cache = Some(Arc::new(KernelCache::with_disk_dir(dir)?));
        }
        Ok(Self {
            cfg,
            out_dir: cli.out.clone(),
            opts,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        let prefix = self.cfg.output_prefix.as_deref().unwrap_or("");
        self.out_dir.join(format!("{prefix}{name}"))
    }

    fn compute_joint(
        &self,
        cfg: &ExperimentConfig,
    ) -> Result<(JointCountDistribution, f64), CliError> {
        let (a, b) = cfg.build_sources()?;
        let array = cfg.build_array().map_err(KernelError::from)?;
        let t0 = Instant::now();
        let joint = mixture_joint(&a, &b, &array, cfg.backend.into(), &self.opts)?;
        Ok((joint, t0.elapsed().as_secs_f64()))
    }
}

// runtime is reported on stdout only, so reruns differ solely in the
// timestamp line
fn joint_meta(joint: &JointCountDistribution) -> Vec<(String, String)> {
    let mut meta = vec![
        ("timestamp".to_string(), timestamp()),
        (
            "backend".to_string(),
            joint.table.backend().as_str().to_string(),
        ),
        (
            "source_a".to_string(),
            joint.source_a.family_tag().to_string(),
        ),
        (
            "source_b".to_string(),
            joint.source_b.family_tag().to_string(),
        ),
        ("total_mass".to_string(), fmt_f64(joint.table.total_mass())),
        (
            "pruned_mass".to_string(),
            fmt_f64(joint.table.pruned_mass()),
        ),
    ];
    let nbar_a = moments(&joint.source_a).mean;
    let nbar_b = moments(&joint.source_b).mean;
    for (m, d) in joint.array.detectors().iter().enumerate() {
        let predicted = bosecount::detector::mean_count(d, nbar_a, nbar_b);
        meta.push((format!("mean_n{}", m + 1), fmt_f64(predicted)));
    }
    meta
}

fn run_joint(ctx: &RunContext) -> Result<(), CliError> {
    let (joint, runtime) = ctx.compute_joint(&ctx.cfg)?;
    let (columns, rows) = count_table_rows(&joint.table);
    let path = ctx.out_path("joint.csv");
    write_csv(
        &path,
        &CsvTable {
            meta: joint_meta(&joint),
            columns,
            rows,
        },
    )?;
    println!(
        "joint: {} entries, total mass {:.12}, backend {}, {:.3}s -> {}",
        joint.table.len(),
        joint.table.total_mass(),
        joint.table.backend().as_str(),
        runtime,
        path.display()
    );
    Ok(())
}

struct ConditionalOutcome {
    value_label: String,
    evidence: f64,
    dist: NumberDistribution,
    peak_rows: Vec<Vec<String>>,
    washed_out: bool,
    max_width_ratio: Option<f64>,
    estimate_meta: Vec<(String, String)>,
}

fn conditional_pipeline(
    ctx: &RunContext,
    cfg: &ExperimentConfig,
    value_label: String,
) -> Result<ConditionalOutcome, CliError> {
    let conditioning = cfg
        .conditioning
        .ok_or_else(|| CliError::new(2, "conditioning block required for this subcommand"))?;
    let (joint, _) = ctx.compute_joint(cfg)?;
    let evidence =
        joint.table.marginal_axis(conditioning.detector_index - 1)[conditioning.count as usize];
    let dist = conditional(&joint, conditioning.detector_index, conditioning.count)?;

    let mut peak_rows = Vec::new();
    let mut washed_out = false;
    let mut max_ratio = None;
    match find_peaks(&dist, PEAK_MIN_MASS) {
        Ok(report) => {
            max_ratio = Some(report.max_width_ratio());
            for (i, peak) in report.peaks.iter().enumerate() {
                peak_rows.push(vec![
                    peak.location.to_string(),
                    fmt_f64(peak.mass),
                    fmt_f64(peak.width),
                    fmt_f64(report.poisson_width_at_peak[i]),
                    report.narrower_than_poisson[i].to_string(),
                ]);
            }
        }
        Err(AnalysisError::NoPeaks { .. }) => washed_out = true,
        Err(e) => return Err(e.into()),
    }

    // mean-field phase inference from the conditioning outcome
    let nbar_a = moments(&joint.source_a).mean;
    let nbar_b = moments(&joint.source_b).mean;
    let d1 = &joint.array.detectors()[conditioning.detector_index - 1];
    let mut estimate_meta = Vec::new();
    match infer_phase(conditioning.count, d1, nbar_a, nbar_b) {
        Ok(PhaseSolution::Estimate(est)) => {
            estimate_meta.push(("delta_plus".to_string(), fmt_f64(est.delta_plus)));
            estimate_meta.push(("delta_minus".to_string(), fmt_f64(est.delta_minus)));
            for (m, d2) in joint.array.detectors().iter().enumerate() {
                if m + 1 == conditioning.detector_index {
                    continue;
                }
                let (p_plus, p_minus) = predict_counts(&est, d2, nbar_a, nbar_b);
                estimate_meta.push((format!("predicted_n{}_plus", m + 1), fmt_f64(p_plus)));
                estimate_meta.push((format!("predicted_n{}_minus", m + 1), fmt_f64(p_minus)));
            }
        }
        Ok(PhaseSolution::NoSolution { cosine }) => {
            estimate_meta.push(("phase_estimate".to_string(), "no_solution".to_string()));
            estimate_meta.push(("cosine".to_string(), fmt_f64(cosine)));
        }
        Err(AnalysisError::DegenerateDetector) => {
            estimate_meta.push(("phase_estimate".to_string(), "degenerate_detector".to_string()));
        }
        Err(e) => return Err(e.into()),
    }

    Ok(ConditionalOutcome {
        value_label,
        evidence,
        dist,
        peak_rows,
        washed_out,
        max_width_ratio: max_ratio,
        estimate_meta,
    })
}

fn run_conditional(ctx: &RunContext) -> Result<(), CliError> {
    let outcome = conditional_pipeline(ctx, &ctx.cfg, String::new())?;
    let conditioning = ctx.cfg.conditioning.unwrap();

    let mut meta = vec![
        ("timestamp".to_string(), timestamp()),
        (
            "given_detector".to_string(),
            conditioning.detector_index.to_string(),
        ),
        ("given_count".to_string(), conditioning.count.to_string()),
        ("evidence".to_string(), fmt_f64(outcome.evidence)),
    ];
    meta.extend(outcome.estimate_meta.clone());
    let rows = outcome
        .dist
        .pmf()
        .iter()
        .enumerate()
        .map(|(n, &p)| vec![n.to_string(), fmt_f64(p)])
        .collect();
    let cond_path = ctx.out_path("conditional.csv");
    write_csv(
        &cond_path,
        &CsvTable {
            meta: meta.clone(),
            columns: vec!["n".to_string(), "probability".to_string()],
            rows,
        },
    )?;

    meta.push(("washed_out".to_string(), outcome.washed_out.to_string()));
    if let Some(r) = outcome.max_width_ratio {
        meta.push(("max_width_ratio".to_string(), fmt_f64(r)));
    }
    let peaks_path = ctx.out_path("peaks.csv");
    write_csv(
        &peaks_path,
        &CsvTable {
            meta,
            columns: vec![
                "location".to_string(),
                "mass".to_string(),
                "width".to_string(),
                "poisson_width".to_string(),
                "narrower_than_poisson".to_string(),
            ],
            rows: outcome.peak_rows.clone(),
        },
    )?;
    println!(
        "conditional: evidence {:.6e}, {} peak(s){} -> {}, {}",
        outcome.evidence,
        outcome.peak_rows.len(),
        if outcome.washed_out { " (washed out)" } else { "" },
        cond_path.display(),
        peaks_path.display()
    );
    Ok(())
}

fn run_scaling_check(ctx: &RunContext) -> Result<(), CliError> {
    let scaling = ctx
        .cfg
        .scaling
        .ok_or_else(|| CliError::new(2, "scaling block required for scaling-check"))?;
    let (a, b) = ctx.cfg.build_sources()?;
    let array = ctx.cfg.build_array().map_err(KernelError::from)?;
    let backend: Backend = ctx.cfg.backend.into();

    let original = mixture_joint(&a, &b, &array, backend, &ctx.opts)?;
    let reference = if scaling.keep_m < array.len() {
        let axes: Vec<usize> = (0..scaling.keep_m).collect();
        original
            .table
            .marginalize_onto(&axes)
            .map_err(KernelError::from)?
    } else {
        original.table.clone()
    };
    let scaled_array =
        scale_array(&array, scaling.q, scaling.keep_m).map_err(KernelError::from)?;
    let thin = |d: &NumberDistribution| -> Result<NumberDistribution, CliError> {
        Ok(binomial_thinning(d, scaling.q)
            .map_err(KernelError::from)?
            .retruncate(ctx.opts.tail_tolerance))
    };
    let rescaled = mixture_joint(&thin(&a)?, &thin(&b)?, &scaled_array, backend, &ctx.opts)?;
    let tv = reference.tv_distance(&rescaled.table);

    let meta = vec![
        ("timestamp".to_string(), timestamp()),
        ("q".to_string(), fmt_f64(scaling.q)),
        ("keep_m".to_string(), scaling.keep_m.to_string()),
        ("tv_residual".to_string(), fmt_f64(tv)),
    ];
    for (name, table) in [("original.csv", &reference), ("rescaled.csv", &rescaled.table)] {
        let (columns, rows) = count_table_rows(table);
        write_csv(
            &ctx.out_path(name),
            &CsvTable {
                meta: meta.clone(),
                columns,
                rows,
            },
        )?;
    }
    write_csv(
        &ctx.out_path("scaling.csv"),
        &CsvTable {
            meta,
            columns: vec!["tv_residual".to_string()],
            rows: vec![vec![fmt_f64(tv)]],
        },
    )?;
    println!("scaling-check: tv residual {tv:.3e} at q = {}", scaling.q);
    Ok(())
}

/// Apply one sweep grid value to a copy of the base config.
fn apply_sweep_value(
    base: &ExperimentConfig,
    param: &SweepParameter,
    v: f64,
) -> Result<ExperimentConfig, String> {
    let mut cfg = base.clone();
    match param {
        SweepParameter::Q => {
            let mut touched = false;
            for s in &mut cfg.sources {
                if let SourceSpec::GammaP { q_param, .. } = s {
                    *q_param = v;
                    touched = true;
                }
            }
            if !touched {
                return Err("Q sweep requires a gamma_p source".to_string());
            }
        }
        SweepParameter::ScalingQ => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("scaling q {v} outside (0, 1]"));
            }
            cfg.scaling = Some(bosecount::config::Scaling {
                q: v,
                keep_m: cfg.detectors.len(),
            });
        }
        SweepParameter::R => {
            if v <= 0.0 {
                return Err(format!("R value {v} must be positive"));
            }
            for d in &mut cfg.detectors {
                d.r_aa *= v;
                d.r_bb *= v;
                d.r_ab_modulus *= v;
            }
            // the configured sources define the detected flux at R = 1;
            // dividing the means keeps R * nbar fixed across the sweep
            for s in &mut cfg.sources {
                match s {
                    SourceSpec::Fock { n } => *n = (*n as f64 / v).round() as usize,
                    SourceSpec::Poisson { mean } | SourceSpec::GammaP { mean, .. } => {
                        *mean /= v;
                    }
                    SourceSpec::Thermal { nbar } | SourceSpec::PhotonAddedThermal { nbar } => {
                        *nbar /= v;
                    }
                    SourceSpec::Binomial { n, .. } => *n = (*n as f64 / v).round() as usize,
                    SourceSpec::Custom { .. } => {
                        return Err("R sweep cannot rescale a custom pmf".to_string())
                    }
                }
            }
        }
        SweepParameter::ThetaDiff => {
            if cfg.detectors.len() < 2 {
                return Err("theta_diff sweep requires two detectors".to_string());
            }
            cfg.detectors[1].theta = cfg.detectors[0].theta + v;
        }
        SweepParameter::N1 => {
            let c = cfg
                .conditioning
                .as_mut()
                .ok_or("n1 sweep requires a conditioning block")?;
            if v < 0.0 {
                return Err(format!("n1 value {v} must be nonnegative"));
            }
            c.count = v.round() as u32;
        }
    }
    Ok(cfg)
}

fn run_sweep(ctx: &RunContext) -> Result<(), CliError> {
    let Sweep { parameter, values } = ctx
        .cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::new(2, "sweep block required for sweep"))?;
    let mut rows = Vec::new();
    for &v in &values {
        let label = fmt_f64(v);
        let outcome = apply_sweep_value(&ctx.cfg, &parameter, v)
            .map_err(|e| CliError::new(2, e))
            .and_then(|rebuilt| {
                if let Some(s) = rebuilt.scaling {
                    let (a, b) = rebuilt.build_sources()?;
                    let array = rebuilt.build_array().map_err(KernelError::from)?;
                    let scaled =
                        scale_array(&array, s.q, s.keep_m).map_err(KernelError::from)?;
                    let thin = |d: &NumberDistribution| -> Result<NumberDistribution, CliError> {
                        Ok(binomial_thinning(d, s.q)
                            .map_err(KernelError::from)?
                            .retruncate(rebuilt.tail_tolerance))
                    };
                    let (ta, tb) = (thin(&a)?, thin(&b)?);
                    conditional_pipeline_prebuilt(ctx, &rebuilt, &ta, &tb, &scaled, label.clone())
                } else {
                    conditional_pipeline(ctx, &rebuilt, label.clone())
                }
            });
        match outcome {
            Ok(o) => {
                let (locs, widths): (Vec<String>, Vec<String>) = o
                    .peak_rows
                    .iter()
                    .map(|r| (r[0].clone(), r[2].clone()))
                    .unzip();
                rows.push(vec![
                    o.value_label,
                    "ok".to_string(),
                    fmt_f64(o.evidence),
                    o.peak_rows.len().to_string(),
                    o.washed_out.to_string(),
                    o.max_width_ratio.map(fmt_f64).unwrap_or_default(),
                    locs.join(";"),
                    widths.join(";"),
                ]);
            }
            Err(e) => {
                // per-point failures are data: record and continue
                rows.push(vec![
                    label,
                    format!("error[{}] {}", e.code, e.message.replace(',', ";")),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    let path = ctx.out_path("sweep.csv");
    write_csv(
        &path,
        &CsvTable {
            meta: vec![
                ("timestamp".to_string(), timestamp()),
                ("parameter".to_string(), format!("{parameter:?}")),
                ("points".to_string(), values.len().to_string()),
            ],
            columns: [
                "value",
                "status",
                "evidence",
                "num_peaks",
                "washed_out",
                "max_width_ratio",
                "peak_locations",
                "peak_widths",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            rows,
        },
    )?;
    println!("sweep: {} points -> {}", values.len(), path.display());
    Ok(())
}

/// Conditional pipeline over already-built sources and array (used by the
/// scaling-q sweep, where thinning and rescaling replace the config values).
fn conditional_pipeline_prebuilt(
    ctx: &RunContext,
    cfg: &ExperimentConfig,
    a: &NumberDistribution,
    b: &NumberDistribution,
    array: &DetectorArray,
    value_label: String,
) -> Result<ConditionalOutcome, CliError> {
    let conditioning = cfg
        .conditioning
        .ok_or_else(|| CliError::new(2, "conditioning block required for this subcommand"))?;
    if conditioning.detector_index > array.len() {
        return Err(CliError::new(
            2,
            "conditioning detector dropped by the scaling block",
        ));
    }
    let joint = mixture_joint(a, b, array, cfg.backend.into(), &ctx.opts)?;
    let evidence =
        joint.table.marginal_axis(conditioning.detector_index - 1)[conditioning.count as usize];
    let dist = conditional(&joint, conditioning.detector_index, conditioning.count)?;
    let mut peak_rows = Vec::new();
    let mut washed_out = false;
    let mut max_ratio = None;
    match find_peaks(&dist, PEAK_MIN_MASS) {
        Ok(report) => {
            max_ratio = Some(report.max_width_ratio());
            for (i, peak) in report.peaks.iter().enumerate() {
                peak_rows.push(vec![
                    peak.location.to_string(),
                    fmt_f64(peak.mass),
                    fmt_f64(peak.width),
                    fmt_f64(report.poisson_width_at_peak[i]),
                    report.narrower_than_poisson[i].to_string(),
                ]);
            }
        }
        Err(AnalysisError::NoPeaks { .. }) => washed_out = true,
        Err(e) => return Err(e.into()),
    }
    Ok(ConditionalOutcome {
        value_label,
        evidence,
        dist,
        peak_rows,
        washed_out,
        max_width_ratio: max_ratio,
        estimate_meta: Vec::new(),
    })
}

fn run_cache(cli: &Cli, op: &CacheOp) -> Result<(), CliError> {
    let dir: &Path = cli
        .cache
        .as_ref()
        .map(|p| p.as_path())
        .ok_or_else(|| CliError::new(2, "--cache DIR is required for cache subcommands"))?;
    let cache = KernelCache::with_disk_dir(dir)?;
    match op {
        CacheOp::Stat => {
            println!("cache {}: {} kernel file(s)", dir.display(), cache.disk_files()?);
        }
        CacheOp::Clear => {
            let before = cache.disk_files()?;
            cache.clear()?;
            println!("cache {}: removed {before} kernel file(s)", dir.display());
        }
    }
    Ok(())
}
