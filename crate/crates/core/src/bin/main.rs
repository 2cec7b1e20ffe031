//! Command-line driver for certification, robust mean estimation,
//! clustering, and accuracy sweeps.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or precondition error,
//! 3 solver failure.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use sos_moments::cluster::{solve_relaxation, RelaxationInput, RelaxationOutcome};
use sos_moments::config::ExperimentConfig;
use sos_moments::datagen::{self, Dataset, DistributionSpec, MixtureSpec, OutlierModel};
use sos_moments::matching;
use sos_moments::pipeline::{self, PipelineError};
use sos_moments::poincare;
use sos_moments::pseudomoments;
use sos_moments::tensor::SymmetricTensor;

#[derive(Parser)]
#[command(name = "sos-moments", version, about = "Moment-tensor certification and robust clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// experiment configuration file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// dataset path (.csv or binary)
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// output directory for reports
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// override the config seed list with a single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (falls back to SOS_THREADS, then the config)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// solver tolerance
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Certify injective-norm bounds on the moment tensors of a dataset
    Certify,
    /// Robust mean estimation under eps-corruption
    RobustMean,
    /// List-decodable or separated clustering
    Cluster,
    /// Error-vs-eps sweep across relaxation levels
    Sweep,
    /// Fast internal consistency checks
    Selftest,
}

#[derive(Debug)]
enum CliError {
    /// exit 1: a check that should hold failed
    Check(String),
    /// exit 2: bad usage, missing sections, violated preconditions
    Usage(String),
    /// exit 3: numerical solver failure
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Check(m) | CliError::Usage(m) | CliError::Solver(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::PreconditionViolated { .. }
            | PipelineError::BudgetTooLarge { .. }
            | PipelineError::SeparationTooSmall { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

/// Config plus the CLI overrides already applied.
struct Resolved {
    cfg: ExperimentConfig,
    tolerance: f64,
    output: PathBuf,
}

fn resolve(cli: &Cli) -> Result<Resolved, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(input) = &cli.input {
        cfg.input = Some(input.clone());
    }
    if let Some(out) = &cli.output {
        cfg.output = Some(out.clone());
    }
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("SOS_THREADS")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .or(cfg.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        cfg.threads = Some(n);
        // ignored if a pool already exists (e.g. repeated in-process use)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let tolerance = cli.tolerance.or(cfg.tolerance).unwrap_or(1e-6);
    if !(tolerance > 0.0) {
        return Err(CliError::Usage(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    cfg.tolerance = Some(tolerance);
    let output = cfg.output.clone().unwrap_or_else(|| PathBuf::from("."));
    Ok(Resolved {
        cfg,
        tolerance,
        output,
    })
}

/// Load the input dataset, or draw one from the configured generator.
/// Returns the dataset, the seed actually used, and a SHA-256 content hash.
fn obtain_dataset(res: &Resolved, seed: u64) -> Result<(Dataset, String), CliError> {
    if let Some(path) = &res.cfg.input {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let hash = hex_digest(&bytes);
        let ds = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => datagen::read_csv(path),
            _ => datagen::read_binary(path),
        }
        .map_err(|e| CliError::Usage(e.to_string()))?;
        if ds.points.is_empty() {
            return Err(CliError::Usage("dataset is empty".into()));
        }
        Ok((ds, hash))
    } else if let Some(spec) = &res.cfg.data {
        let mut spec: MixtureSpec = spec.clone();
        spec.seed = seed;
        let ds = spec
            .sample(res.cfg.n)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let hash = hash_points(&ds.points);
        Ok((ds, hash))
    } else {
        Err(CliError::Usage(
            "no dataset: pass --input or add a [data] generator to the config".into(),
        ))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn hash_points(points: &[DVector<f64>]) -> String {
    let mut h = Sha256::new();
    for p in points {
        for v in p.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn write_report(res: &Resolved, name: &str, body: serde_json::Value) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&res.output)
        .map_err(|e| CliError::Usage(format!("cannot create output dir: {e}")))?;
    let path = res.output.join(name);
    let report = serde_json::json!({
        "config": serde_json::to_value(&res.cfg).expect("config serializes"),
        "result": body,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Derive matching ground truth: planted means when available, otherwise
/// the empirical means of the labelled (non-negative) groups.
fn truth_means(ds: &Dataset) -> Vec<DVector<f64>> {
    if !ds.means.is_empty() {
        return ds.means.clone();
    }
    let mut groups: std::collections::BTreeMap<i32, (DVector<f64>, usize)> = Default::default();
    for (p, &l) in ds.points.iter().zip(&ds.labels) {
        if l < 0 {
            continue;
        }
        let e = groups
            .entry(l)
            .or_insert_with(|| (DVector::zeros(p.len()), 0));
        e.0 += p;
        e.1 += 1;
    }
    groups
        .into_values()
        .map(|(sum, cnt)| sum / cnt as f64)
        .collect()
}

fn cmd_certify(res: &Resolved) -> Result<serde_json::Value, CliError> {
    let t = res.cfg.certify.as_ref().map(|c| c.t).unwrap_or(1);
    let (ds, hash) = obtain_dataset(res, res.cfg.seeds[0])?;
    let report =
        poincare::certify(&ds.points, t).map_err(|e| CliError::Solver(e.to_string()))?;
    let n = ds.points.len();
    let d = ds.points[0].len();
    // exact SOS value of the top moment tensor, alongside the recursive bound
    let mean = ds.points.iter().sum::<DVector<f64>>() / n as f64;
    let weights = vec![1.0; n];
    let m2t = SymmetricTensor::moment_tensor(&ds.points, &weights, &mean, 2 * t)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let sos = pseudomoments::sos_norm(&m2t, res.tolerance)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    Ok(serde_json::json!({
        "input_sha256": hash,
        "n": n,
        "d": d,
        "t": t,
        "certified": serde_json::to_value(&report).unwrap(),
        "b": report.b(),
        "sos_norm_m2t": sos.value,
        "sos_stationarity_residual": sos.certificate.stationarity_residual,
    }))
}

fn cmd_robust_mean(res: &Resolved) -> Result<serde_json::Value, CliError> {
    let section = res
        .cfg
        .robust_mean
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs a [robust_mean] section".into()))?
        .clone();
    let mut runs = Vec::new();
    for &seed in &res.cfg.seeds {
        let (ds, hash) = obtain_dataset(res, seed)?;
        let b = match section.b {
            Some(b) => b,
            None => pipeline::estimate_b(&ds.points, section.eps, section.t)?,
        };
        let r0 = section.r0.unwrap_or_else(|| pipeline::initial_radius(&ds.points));
        let mean = pipeline::robust_mean(
            &ds.points,
            b,
            section.eps,
            section.t,
            r0,
            &res.cfg.calibration,
        )?;
        let planted_error = ds
            .means
            .first()
            .map(|mu| (mu - &mean).norm());
        runs.push(serde_json::json!({
            "seed": seed,
            "input_sha256": hash,
            "b": b,
            "r0": r0,
            "estimate": mean.iter().cloned().collect::<Vec<f64>>(),
            "planted_error": planted_error,
        }));
    }
    Ok(serde_json::json!({ "t": section.t, "eps": section.eps, "runs": runs }))
}

fn cmd_cluster(res: &Resolved) -> Result<serde_json::Value, CliError> {
    let section = res
        .cfg
        .cluster
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs a [cluster] section".into()))?
        .clone();
    let mut runs = Vec::new();
    for &seed in &res.cfg.seeds {
        let (ds, hash) = obtain_dataset(res, seed)?;
        let b = match section.b {
            Some(b) => b,
            None => pipeline::estimate_b(&ds.points, section.eps, section.t)?,
        };
        let out = match (section.k, section.c_sep) {
            (Some(k), Some(c_sep)) => pipeline::cluster_separated(
                &ds.points,
                b,
                section.alpha,
                section.eps,
                c_sep,
                section.t,
                k,
                &res.cfg.calibration,
            )?,
            _ => {
                let r0 = section
                    .r0
                    .unwrap_or_else(|| pipeline::initial_radius(&ds.points));
                pipeline::recluster(
                    &ds.points,
                    b,
                    section.alpha,
                    r0,
                    section.t,
                    &res.cfg.calibration,
                )?
            }
        };
        let truth = truth_means(&ds);
        let report = if truth.is_empty() {
            None
        } else {
            match matching::match_means(&truth, &out.means) {
                Ok(r) => Some(serde_json::to_value(&r).unwrap()),
                Err(e) => return Err(CliError::Check(e.to_string())),
            }
        };
        runs.push(serde_json::json!({
            "seed": seed,
            "input_sha256": hash,
            "b": b,
            "means": out.means.iter().map(|m| m.iter().cloned().collect::<Vec<f64>>()).collect::<Vec<_>>(),
            "sizes": out.sizes,
            "radii": out.radii,
            "final_r": out.final_r,
            "match": report,
        }));
    }
    Ok(serde_json::json!({
        "t": section.t,
        "alpha": section.alpha,
        "eps": section.eps,
        "runs": runs,
    }))
}

/// Least-squares slope of log(median error) against log(eps).
fn fit_slope(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(eps, err) in pairs {
        let (x, y) = (eps.ln(), err.max(1e-300).ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values[values.len() / 2]
}

fn cmd_sweep(res: &Resolved) -> Result<serde_json::Value, CliError> {
    let section = res
        .cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Usage("config needs a [sweep] section".into()))?
        .clone();
    std::fs::create_dir_all(&res.output)
        .map_err(|e| CliError::Usage(format!("cannot create output dir: {e}")))?;
    let csv_path = res.output.join("sweep.csv");
    let mut csv = std::io::BufWriter::new(
        std::fs::File::create(&csv_path)
            .map_err(|e| CliError::Usage(format!("cannot write sweep.csv: {e}")))?,
    );
    writeln!(csv, "t,eps,seed,error").unwrap();
    let d = section.d;
    let mut direction = vec![0.0; d];
    direction[0] = 1.0;
    let mut per_t = Vec::new();
    for &t in &section.t_values {
        let mut medians = Vec::new();
        for &eps in &section.eps_values {
            // worst-case placement: a tail right at the detection threshold
            let distance = section.outlier_scale * eps.powf(-1.0 / (2.0 * t as f64));
            let spec = MixtureSpec {
                components: vec![(1.0 - eps, DistributionSpec::standard_gaussian(d))],
                outliers: if eps > 0.0 {
                    OutlierModel::AdversarialTail {
                        direction: direction.clone(),
                        distance,
                        fraction: eps,
                    }
                } else {
                    OutlierModel::None
                },
                seed: 0,
            };
            let mut errors = Vec::new();
            for &seed in &res.cfg.seeds {
                let mut s = spec.clone();
                s.seed = seed;
                let ds = s
                    .sample(section.n)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                let b = pipeline::estimate_b(&ds.points, eps, t)?;
                let r0 = pipeline::initial_radius(&ds.points);
                let mean =
                    pipeline::robust_mean(&ds.points, b, eps, t, r0, &res.cfg.calibration)?;
                let err = mean.norm();
                writeln!(csv, "{t},{eps},{seed},{err}").unwrap();
                errors.push(err);
            }
            medians.push((eps, median(&mut errors)));
        }
        let slope = fit_slope(&medians);
        per_t.push(serde_json::json!({
            "t": t,
            "medians": medians.iter().map(|&(e, m)| serde_json::json!({"eps": e, "median_error": m})).collect::<Vec<_>>(),
            "slope": slope,
        }));
    }
    csv.flush().unwrap();
    Ok(serde_json::json!({
        "csv": csv_path.display().to_string(),
        "n": section.n,
        "d": section.d,
        "levels": per_t,
    }))
}

fn cmd_selftest(res: &Resolved) -> Result<serde_json::Value, CliError> {
    let mut checks: Vec<(String, bool, String)> = Vec::new();
    let mut record = |name: &str, ok: bool, detail: String| {
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, name);
        checks.push((name.to_string(), ok, detail));
    };

    // rank-one tensors have injective norm equal to the vector norm power
    let v = DVector::from_vec(vec![0.6, 0.8, 0.0]);
    let t4 = SymmetricTensor::rank_one(&v, 4);
    match pseudomoments::sos_norm(&t4, 1e-7) {
        Ok(r) => record(
            "sos-norm-rank-one",
            (r.value - 1.0).abs() < 1e-4,
            format!("value {}", r.value),
        ),
        Err(e) => record("sos-norm-rank-one", false, e.to_string()),
    }

    // packing duality on random instances
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = true;
    let mut detail = String::new();
    for _ in 0..5 {
        let g: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let sol = sos_moments::cluster::solve_packing(&g, 1e-9, 4000);
        let gap = sol.dual_value - sol.primal_value;
        if gap < -1e-7 || gap > 1e-4 * sol.dual_value.max(1.0) {
            ok = false;
            detail = format!("duality gap {gap}");
        }
    }
    record("packing-duality", ok, detail);

    // the relaxation recovers a clean mean exactly at lambda = 0
    let x = DVector::from_vec(vec![1.0, 2.0]);
    let input = RelaxationInput {
        points: vec![x.clone(), x.clone()],
        weights: vec![1.0, 1.0],
        lambda: 0.0,
        gamma: 10.0,
        t: 1,
    };
    match solve_relaxation(&input, 1e-8) {
        Ok(RelaxationOutcome::Primal { w, .. }) => record(
            "relaxation-clean-primal",
            w.iter().all(|wi| (wi - &x).norm() < 1e-8),
            String::new(),
        ),
        other => record("relaxation-clean-primal", false, format!("{other:?}")),
    }

    // Hungarian matching agrees with brute force on a fixed instance
    let cost = vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ];
    match matching::min_cost_assignment(&cost) {
        Ok((_, total)) => record("matching-exact", (total - 5.0).abs() < 1e-12, format!("{total}")),
        Err(e) => record("matching-exact", false, e.to_string()),
    }

    // robust mean on clean gaussian data lands near the origin
    let spec = MixtureSpec {
        components: vec![(1.0, DistributionSpec::standard_gaussian(3))],
        outliers: OutlierModel::None,
        seed: res.cfg.seeds[0],
    };
    let ds = spec.sample(400).map_err(|e| CliError::Solver(e.to_string()))?;
    let b = pipeline::estimate_b(&ds.points, 0.0, 1)?;
    let r0 = pipeline::initial_radius(&ds.points);
    match pipeline::robust_mean(&ds.points, b, 0.0, 1, r0, &res.cfg.calibration) {
        Ok(mean) => record(
            "robust-mean-clean",
            mean.norm() < 0.5,
            format!("norm {}", mean.norm()),
        ),
        Err(e) => record("robust-mean-clean", false, e.to_string()),
    }

    let failed: Vec<&(String, bool, String)> = checks.iter().filter(|c| !c.1).collect();
    let body = serde_json::json!({
        "checks": checks
            .iter()
            .map(|(n, ok, d)| serde_json::json!({"name": n, "ok": ok, "detail": d}))
            .collect::<Vec<_>>(),
    });
    if failed.is_empty() {
        Ok(body)
    } else {
        // report is still written by the caller before exiting
        let _ = write_report(res, "selftest.json", body);
        Err(CliError::Check(format!(
            "{} selftest check(s) failed",
            failed.len()
        )))
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let res = resolve(cli)?;
    let (name, body) = match cli.command {
        Command::Certify => ("certify.json", cmd_certify(&res)?),
        Command::RobustMean => ("robust_mean.json", cmd_robust_mean(&res)?),
        Command::Cluster => ("cluster.json", cmd_cluster(&res)?),
        Command::Sweep => ("sweep.json", cmd_sweep(&res)?),
        Command::Selftest => ("selftest.json", cmd_selftest(&res)?),
    };
    let path = write_report(&res, name, body)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
