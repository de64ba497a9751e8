use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedgain_core::experiment::{
    default_lambda_grid, gain_compare, matched_budgets, run_samples, GainComparePoint, RunSample, RunStats,
};
use fedgain_core::sim::{write_run_summary_csv, write_trace_log};
use fedgain_core::theory::{
    verify_appendix_inequality, verify_limsup, verify_theorem1, verify_theorem2_ensemble, GainSource,
};
use fedgain_core::{run, Error as CoreError, PolicyKind, TheoremReport, CSV_VERSION_LINE};

use crate::config::{ConfigError, ExperimentConfig};
use crate::svg::{Chart, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Sweep,
    GainCompare,
    Verify,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub no_plots: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("{0} verification check(s) failed")]
    VerificationFailed(usize),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::VerificationFailed(_) => 4,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        key: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(out) = &overrides.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = overrides.seed {
        cfg.run.seed = seed;
    }
    if let Some(reps) = overrides.replications {
        if reps == 0 {
            return Err(ConfigError {
                line: None,
                key: Some("--replications".into()),
                message: "must be at least 1".into(),
            }
            .into());
        }
        cfg.replications = reps;
    }
    if overrides.no_plots {
        cfg.emit_plots = false;
    }
    Ok(cfg)
}

/// Runs one command; on success returns the human-readable report.
pub fn execute(command: Command, config: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let cfg = load(config, overrides)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("effective.cfg"), cfg.effective())?;
    match command {
        Command::Run => cmd_run(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::GainCompare => cmd_gain_compare(&cfg),
        Command::Verify => cmd_verify(&cfg),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn csv_file(dir: &Path, name: &str, header: &str) -> Result<BufWriter<File>, CliError> {
    let mut f = create(dir, name)?;
    writeln!(f, "{CSV_VERSION_LINE}")?;
    writeln!(f, "{header}")?;
    Ok(f)
}

fn plot(cfg: &ExperimentConfig, name: &str, chart: Chart) -> Result<(), CliError> {
    if cfg.emit_plots {
        fs::write(cfg.output_dir.join(name), chart.render())?;
    }
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let rc = cfg.run_config()?;
    let trace = run(&rc)?;
    let dir = &cfg.output_dir;
    let mut log = create(dir, "trace.log")?;
    write_trace_log(&mut log, &trace)?;
    log.flush()?;
    let mut summary = create(dir, "summary.csv")?;
    write_run_summary_csv(&mut summary, &trace, rc.spec().optimal_objective())?;
    summary.flush()?;
    plot(
        cfg,
        "objective.svg",
        Chart {
            title: format!("objective, {}", rc.policy.label()),
            x_label: "iteration k".into(),
            y_label: "J(w_k)".into(),
            series: vec![Series {
                label: rc.policy.name().into(),
                points: trace
                    .objective_path()
                    .iter()
                    .enumerate()
                    .map(|(k, j)| (k as f64, *j))
                    .collect(),
            }],
        },
    )?;
    if let fedgain_core::RunStatus::Diverged { iteration } = trace.status {
        return Err(CliError::Diverged(format!(
            "objective blew up at iteration {iteration}"
        )));
    }
    Ok(format!(
        "run: seed {} policy {} K={} final J={} transmissions={} any={}\n",
        trace.seed,
        rc.policy.label(),
        trace.records.len(),
        trace.final_objective,
        trace.total_transmissions(),
        trace.any_transmissions()
    ))
}

/// Cartesian product of the sweep axes, first axis outermost.
fn grid_points(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let mut points = vec![(String::new(), cfg.clone())];
    for axis in &cfg.sweep {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (label, c) in &points {
            for &v in &axis.values {
                let sep = if label.is_empty() { "" } else { ";" };
                next.push((format!("{label}{sep}{}={v}", axis.path), c.with_value(&axis.path, v)?));
            }
        }
        points = next;
    }
    Ok(points)
}

struct CurvePoint {
    parameters: String,
    policy: PolicyKind,
    samples: Vec<RunSample>,
    stats: RunStats,
}

fn sweep_curve(cfg: &ExperimentConfig) -> Result<Vec<CurvePoint>, CliError> {
    grid_points(cfg)?
        .into_iter()
        .map(|(parameters, point)| {
            let rc = point.run_config()?;
            let samples = run_samples(&rc, cfg.replications, cfg.run.seed)?;
            let stats = RunStats::from_samples(&samples, rc.spec().optimal_objective());
            Ok(CurvePoint {
                parameters: if parameters.is_empty() {
                    "base".into()
                } else {
                    parameters
                },
                policy: rc.policy,
                samples,
                stats,
            })
        })
        .collect()
}

fn param_value(p: &PolicyKind) -> String {
    p.parameter().map(|(_, v)| v.to_string()).unwrap_or_default()
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut curves = vec![("primary", sweep_curve(cfg)?)];
    if let Some(cmp) = cfg.compare_config() {
        curves.push(("compare", sweep_curve(&cmp)?));
    }
    let dir = &cfg.output_dir;
    let mut out = csv_file(
        dir,
        "sweep.csv",
        "curve,grid_index,parameters,policy,policy_parameter,replications,seed_first,seed_last,\
         mean_final_objective,std_final_objective,se_final_objective,mean_excess_objective,\
         mean_comm_total,mean_comm_any,diverged",
    )?;
    let mut runs = csv_file(
        dir,
        "sweep_runs.csv",
        "curve,grid_index,seed,final_objective,comm_total,comm_any,diverged",
    )?;
    let mut report = String::new();
    let mut diverged = 0usize;
    for (curve, points) in &curves {
        for (i, p) in points.iter().enumerate() {
            let s = &p.stats;
            writeln!(
                out,
                "{curve},{i},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.parameters,
                p.policy.name(),
                param_value(&p.policy),
                s.replications,
                s.seed_first,
                s.seed_last,
                s.mean_final_objective,
                s.std_final_objective,
                s.se_final_objective,
                s.mean_excess_objective,
                s.mean_comm_total,
                s.mean_comm_any,
                s.diverged
            )?;
            for r in &p.samples {
                writeln!(
                    runs,
                    "{curve},{i},{},{},{},{},{}",
                    r.seed, r.final_objective, r.comm_total, r.comm_any, r.diverged as u8
                )?;
            }
            diverged += s.diverged;
            let _ = writeln!(
                report,
                "{curve} {}: mean J={} comm={} any={}",
                p.parameters, s.mean_final_objective, s.mean_comm_total, s.mean_comm_any
            );
        }
    }
    out.flush()?;
    runs.flush()?;
    if curves.len() == 2 {
        let excess = |pts: &[CurvePoint]| -> Vec<(f64, f64)> {
            pts.iter()
                .map(|p| (p.stats.mean_comm_total, p.stats.mean_excess_objective))
                .collect()
        };
        let mut m = csv_file(
            dir,
            "matched.csv",
            "budget,primary_excess_objective,compare_excess_objective,relative_gain",
        )?;
        match matched_budgets(&excess(&curves[0].1), &excess(&curves[1].1), 10) {
            Ok(rows) => {
                for r in rows {
                    writeln!(m, "{},{},{},{}", r.budget, r.first, r.second, r.relative_gain())?;
                }
            }
            Err(e) => {
                let _ = writeln!(report, "matched budgets: {e}");
            }
        }
        m.flush()?;
    }
    plot(
        cfg,
        "tradeoff.svg",
        Chart {
            title: "communication versus final objective".into(),
            x_label: "mean transmissions per run".into(),
            y_label: "mean J(w_K)".into(),
            series: curves
                .iter()
                .map(|(_, pts)| Series {
                    label: pts[0].policy.name().into(),
                    points: pts
                        .iter()
                        .map(|p| (p.stats.mean_comm_total, p.stats.mean_final_objective))
                        .collect(),
                })
                .collect(),
        },
    )?;
    if diverged > 0 {
        return Err(CliError::Diverged(format!("{diverged} replication(s) diverged")));
    }
    Ok(report)
}

fn cmd_gain_compare(cfg: &ExperimentConfig) -> Result<String, CliError> {
    if cfg.run.num_iterations != 1 {
        return Err(ConfigError {
            line: cfg.lines.get("run.num_iterations"),
            key: Some("run.num_iterations".into()),
            message: format!(
                "gain-compare is a single-step experiment; set 1, found {}",
                cfg.run.num_iterations
            ),
        }
        .into());
    }
    let rc = cfg.run_config()?;
    let lambdas = match cfg.sweep.iter().find(|a| a.path == "policy.lambda") {
        Some(a) => a.values.clone(),
        None => default_lambda_grid(),
    };
    let points = gain_compare(&rc, &lambdas, cfg.replications, cfg.run.seed)?;
    let mut out = csv_file(
        &cfg.output_dir,
        "gain_compare.csv",
        "lambda,replications,oracle_rate,estimated_rate,agreement,oracle_mean_objective,\
         oracle_se_objective,estimated_mean_objective,estimated_se_objective",
    )?;
    let mut report = String::new();
    for p in &points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.lambda,
            p.replications,
            p.oracle_rate,
            p.estimated_rate,
            p.agreement,
            p.oracle_mean_objective,
            p.oracle_se_objective,
            p.estimated_mean_objective,
            p.estimated_se_objective
        )?;
        let _ = writeln!(
            report,
            "lambda {}: oracle rate {} estimated rate {} agreement {}",
            p.lambda, p.oracle_rate, p.estimated_rate, p.agreement
        );
    }
    out.flush()?;
    let series = |label: &str, f: fn(&GainComparePoint) -> (f64, f64)| Series {
        label: label.into(),
        points: points.iter().map(f).collect(),
    };
    plot(
        cfg,
        "gain_compare.svg",
        Chart {
            title: "oracle versus estimated gain, one step".into(),
            x_label: "transmit rate".into(),
            y_label: "mean J after the step".into(),
            series: vec![
                series("oracle_gain", |p| (p.oracle_rate, p.oracle_mean_objective)),
                series("estimated_gain", |p| (p.estimated_rate, p.estimated_mean_objective)),
            ],
        },
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skipped,
    NotApplicable,
    ReportOnly,
    Error,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
            Status::NotApplicable => "NOT-APPLICABLE",
            Status::ReportOnly => "REPORT-ONLY",
            Status::Error => "ERROR",
        }
    }
}

struct VerifyRow {
    check: String,
    status: Status,
    report: Option<TheoremReport>,
    note: String,
}

impl VerifyRow {
    fn from_result(check: String, counted: bool, r: Result<TheoremReport, CoreError>, note: String) -> Self {
        match r {
            Ok(rep) => Self {
                status: match (counted, rep.pass) {
                    (false, _) => Status::ReportOnly,
                    (true, true) => Status::Pass,
                    (true, false) => Status::Fail,
                },
                check,
                report: Some(rep),
                note,
            },
            Err(CoreError::NotApplicable(why)) => Self::bare(check, Status::NotApplicable, why),
            Err(e) => Self::bare(check, Status::Error, e.to_string()),
        }
    }

    fn bare(check: String, status: Status, note: String) -> Self {
        Self {
            check,
            status,
            report: None,
            note,
        }
    }
}

fn cmd_verify(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let rc = cfg.run_config()?;
    let spec = rc.spec().clone();
    let opts = cfg.verify_options();
    let reps = cfg.replications;
    let oracle = matches!(rc.policy, PolicyKind::OracleGain { .. });
    let mut rows = Vec::new();

    if oracle {
        rows.push(VerifyRow::from_result(
            "theorem1".into(),
            true,
            verify_theorem1(&rc, reps, &opts),
            format!("mean J(w_K) at K={}", rc.num_iterations),
        ));
        rows.push(VerifyRow::from_result(
            "limsup".into(),
            true,
            verify_limsup(
                &rc.with_iterations(cfg.verify.limsup_iterations),
                reps,
                cfg.verify.burn_in,
                &opts,
            ),
            format!(
                "mean J(w_k) for {} < k <= {}",
                cfg.verify.burn_in, cfg.verify.limsup_iterations
            ),
        ));
        let t2_reps = cfg.verify.theorem2_replications.unwrap_or(reps);
        rows.push(match verify_theorem2_ensemble(&rc, t2_reps) {
            Ok((rep, violations)) => VerifyRow {
                check: "theorem2".into(),
                status: if rep.pass && violations == 0 {
                    Status::Pass
                } else {
                    Status::Fail
                },
                report: Some(rep),
                note: format!("{violations} violating run(s); observed is the worst run"),
            },
            Err(CoreError::NotApplicable(why)) => VerifyRow::bare("theorem2".into(), Status::NotApplicable, why),
            Err(e) => VerifyRow::bare("theorem2".into(), Status::Error, e.to_string()),
        });
    } else {
        let why = format!("bounds cover oracle_gain only, configured {}", rc.policy.label());
        for check in ["theorem1", "limsup", "theorem2"] {
            rows.push(VerifyRow::bare(check.into(), Status::Skipped, why.clone()));
        }
    }

    let w0 = rc.initial_weights.0.clone();
    let points = if cfg.verify.appendix_weights.is_empty() {
        let mid: Vec<f64> = w0.iter().zip(spec.true_weights()).map(|(a, b)| 0.5 * (a + b)).collect();
        vec![w0, mid]
    } else {
        cfg.verify.appendix_weights.clone()
    };
    let lambdas = if cfg.verify.appendix_lambdas.is_empty() {
        vec![rc.policy.lambda().unwrap_or(0.0)]
    } else {
        cfg.verify.appendix_lambdas.clone()
    };
    let batch = cfg.verify.appendix_batch_size.unwrap_or(rc.stream.batch_size());
    let mut index = 0u64;
    for w in &points {
        if w.len() != spec.dim() {
            return Err(ConfigError {
                line: cfg.lines.get("verify.appendix_weights"),
                key: Some("verify.appendix_weights".into()),
                message: format!("point has {} entries, problem has dimension {}", w.len(), spec.dim()),
            }
            .into());
        }
        for &lambda in &lambdas {
            let seed = rc.seed().wrapping_add(index);
            index += 1;
            let note = format!(
                "w=({}) lambda={lambda}",
                w.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
            );
            for (source, counted) in [(GainSource::Exact, oracle), (GainSource::Estimated, false)] {
                let r = verify_appendix_inequality(
                    &spec,
                    w,
                    rc.eps,
                    lambda,
                    batch,
                    cfg.verify.appendix_samples,
                    seed,
                    source,
                );
                let name = r
                    .as_ref()
                    .map(|r| r.name.clone())
                    .unwrap_or_else(|_| "appendix_inequality".into());
                rows.push(VerifyRow::from_result(name, counted, r, note.clone()));
            }
        }
    }

    let dir = &cfg.output_dir;
    let mut out = csv_file(
        dir,
        "verify.csv",
        "check,status,kind,bound,observed,margin,replications,standard_error,note",
    )?;
    let mut text = String::new();
    let _ = writeln!(text, "verification, policy {} seed {}", rc.policy.label(), rc.seed());
    let _ = writeln!(
        text,
        "{:<32} {:<15} {:>14} {:>14} {:>12} {:>8}  note",
        "check", "status", "bound", "observed", "se", "reps"
    );
    for r in &rows {
        match &r.report {
            Some(rep) => {
                let kind = match rep.kind {
                    fedgain_core::theory::BoundKind::Expectation => "expectation",
                    fedgain_core::theory::BoundKind::AlmostSure => "almost_sure",
                };
                writeln!(
                    out,
                    "{},{},{kind},{},{},{},{},{},{}",
                    r.check,
                    r.status.as_str(),
                    rep.bound_value,
                    rep.observed_value,
                    rep.margin,
                    rep.replications,
                    rep.standard_error,
                    r.note.replace(',', ";")
                )?;
                let _ = writeln!(
                    text,
                    "{:<32} {:<15} {:>14.6} {:>14.6} {:>12.3e} {:>8}  {}",
                    r.check,
                    r.status.as_str(),
                    rep.bound_value,
                    rep.observed_value,
                    rep.standard_error,
                    rep.replications,
                    r.note
                );
            }
            None => {
                writeln!(
                    out,
                    "{},{},,,,,,,{}",
                    r.check,
                    r.status.as_str(),
                    r.note.replace(',', ";")
                )?;
                let _ = writeln!(
                    text,
                    "{:<32} {:<15} {:>14} {:>14} {:>12} {:>8}  {}",
                    r.check,
                    r.status.as_str(),
                    "-",
                    "-",
                    "-",
                    "-",
                    r.note
                );
            }
        }
    }
    out.flush()?;
    let failures = rows
        .iter()
        .filter(|r| matches!(r.status, Status::Fail) || (oracle && r.status == Status::Error))
        .count();
    let _ = writeln!(text, "overall: {}", if failures == 0 { "PASS" } else { "FAIL" });
    fs::write(dir.join("verify.txt"), &text)?;
    if failures > 0 {
        eprint!("{text}");
        return Err(CliError::VerificationFailed(failures));
    }
    Ok(text)
}
