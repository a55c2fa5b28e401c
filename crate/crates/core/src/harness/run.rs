//! Batch sampling and sweeps.
//!
//! Trajectory `i` of a run always draws its class from stream
//! `(seed, Class, 0, i)` and its noise from `(seed, Noise, 0, i)`, whatever the
//! cell, so every cell of a sweep consumes the identical `z0` batch. Reference
//! sets come from their own `Reference` streams.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::csvfmt::num;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::flow::{Condition, CountingField, TimeGrid, TrajectoryRecord, VelocityField};
use crate::gmm::{GaussianMixture, SmoothedField};
use crate::guidance::{sample_mg, sample_mg_endpoint, AutoguidedField, GuidanceConfig};
use crate::harness::config::{ExperimentConfig, FieldSpec, GridSpec};
use crate::metrics::{MetricReport, SampleSet};
use crate::mlp::Checkpoint;
use crate::rng::{self, Domain};

/// Reference-stream cell of the regular sweep reference set.
const REFERENCE_CELL: u64 = 0;
/// Reference-stream cell of the enlarged set used for promoted cells.
const PROMOTION_CELL: u64 = 1;
/// Sample-size multiplier for promoted cells.
pub const PROMOTION_FACTOR: usize = 4;

/// Builds the velocity field named by `spec`.
pub fn build_field(spec: &FieldSpec, gmm: &GaussianMixture) -> Result<Box<dyn VelocityField>> {
    Ok(match spec {
        FieldSpec::Analytic => Box::new(gmm.clone()),
        FieldSpec::Smoothed { epsilon } => Box::new(SmoothedField::new(gmm, *epsilon)?),
        FieldSpec::Mlp { checkpoint, ema } => {
            let ck = Checkpoint::load(checkpoint)?;
            let net = if *ema { ck.ema_params } else { ck.params };
            if net.dim() != gmm.dim() || net.n_classes() != gmm.n_classes() {
                return Err(Error::Config(format!(
                    "checkpoint {} has dim {} and {} classes; mixture has dim {} and {} classes",
                    checkpoint.display(),
                    net.dim(),
                    net.n_classes(),
                    gmm.dim(),
                    gmm.n_classes()
                )));
            }
            Box::new(net)
        }
    })
}

/// The sampler's field: the configured field, wrapped in autoguidance when
/// `guidance.auto_weight` is set.
pub fn experiment_field(cfg: &ExperimentConfig, gmm: &GaussianMixture) -> Result<Box<dyn VelocityField>> {
    let main = build_field(&cfg.field, gmm)?;
    match (cfg.guidance.auto_weight, &cfg.weak_field) {
        (Some(w), Some(weak)) => Ok(Box::new(AutoguidedField::new(main, build_field(weak, gmm)?, w)?)),
        (Some(_), None) => Err(Error::Config("guidance.auto_weight needs a weak_field".into())),
        (None, _) => Ok(main),
    }
}

/// Condition and initial noise of trajectory `i`.
pub fn trajectory_input(cfg: &ExperimentConfig, gmm: &GaussianMixture, i: usize) -> (Condition, Vec<f64>) {
    let c = cfg.fixed_condition().unwrap_or_else(|| {
        let mut r = rng::substream(cfg.seed, Domain::Class, 0, i as u64);
        Some(draw_class(gmm, &mut r))
    });
    let mut r = rng::substream(cfg.seed, Domain::Noise, 0, i as u64);
    (c, rng::standard_normal(&mut r, gmm.dim()))
}

fn draw_class<R: rand::Rng>(gmm: &GaussianMixture, r: &mut R) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    let last = gmm.n_classes().saturating_sub(1);
    for c in 0..gmm.n_classes() {
        acc += gmm.class_prior(c);
        if u < acc {
            return c;
        }
    }
    last
}

/// Target the generated samples are compared against.
pub fn target_mixture(cfg: &ExperimentConfig, gmm: &GaussianMixture) -> Result<GaussianMixture> {
    match cfg.fixed_condition() {
        Some(Some(c)) => gmm.class_conditional(c),
        _ => Ok(gmm.clone()),
    }
}

/// `n` independent draws from `target`, point `i` from stream `(seed, Reference, cell, i)`.
pub fn reference_set(
    target: &GaussianMixture,
    seed: u64,
    cell: u64,
    n: usize,
    policy: ExecPolicy,
) -> Result<SampleSet> {
    let draws = policy.map(n, |i| {
        let mut r = rng::substream(seed, Domain::Reference, cell, i as u64);
        target.sample(&mut r, None)
    });
    let coords = draws.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    SampleSet::from_flat(target.dim(), coords, None, format!("reference seed={seed} cell={cell} n={n}"))
}

/// Endpoints of `n` trajectories plus the first `record` full records.
pub struct SampleOutput {
    pub samples: SampleSet,
    pub trajectories: Vec<TrajectoryRecord>,
}

#[allow(clippy::too_many_arguments)]
fn sample_batch(
    cfg: &ExperimentConfig,
    gmm: &GaussianMixture,
    field: &dyn VelocityField,
    grid: &TimeGrid,
    guidance: &GuidanceConfig,
    n: usize,
    record: usize,
    policy: ExecPolicy,
) -> Result<SampleOutput> {
    if n == 0 {
        return Err(Error::EmptySet("n_trajectories is 0".into()));
    }
    let results = policy.map(n, |i| {
        let (c, z0) = trajectory_input(cfg, gmm, i);
        if i < record {
            sample_mg(field, grid, &z0, c, guidance).map(|rec| (rec.endpoint.clone(), c, Some(rec)))
        } else {
            sample_mg_endpoint(field, grid, &z0, c, guidance).map(|z| (z, c, None))
        }
    });
    let mut coords = Vec::with_capacity(n * gmm.dim());
    let mut labels = Vec::with_capacity(n);
    let mut trajectories = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let (z, c, rec) = r.map_err(|e| annotate(e, i))?;
        coords.extend(z);
        labels.push(c);
        trajectories.extend(rec);
    }
    let labels = labels.iter().all(Option::is_some).then(|| labels.iter().flatten().copied().collect());
    let provenance = format!(
        "seed={} n={n} steps={} alpha={} beta={} omega={}",
        cfg.seed,
        grid.steps(),
        guidance.alpha,
        guidance.beta,
        guidance.cfg_omega
    );
    Ok(SampleOutput { samples: SampleSet::from_flat(gmm.dim(), coords, labels, provenance)?, trajectories })
}

fn annotate(e: Error, trajectory: usize) -> Error {
    match e {
        Error::NumericAtStep { step, detail } => {
            Error::NumericAtStep { step, detail: format!("trajectory {trajectory}: {detail}") }
        }
        Error::Numeric(detail) => Error::Numeric(format!("trajectory {trajectory}: {detail}")),
        other => other,
    }
}

/// Samples `cfg.n_trajectories` endpoints with the configured field and guidance.
pub fn run_sample(cfg: &ExperimentConfig, policy: ExecPolicy) -> Result<SampleOutput> {
    cfg.validate()?;
    let gmm = cfg.load_mixture()?;
    let field = experiment_field(cfg, &gmm)?;
    let grid = cfg.grid.build()?;
    sample_batch(cfg, &gmm, field.as_ref(), &grid, &cfg.guidance, cfg.n_trajectories, cfg.record_trajectories, policy)
}

/// One sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub cfg_omega: f64,
    pub n_steps: usize,
    /// Metrics, or the error that stopped this cell.
    pub report: std::result::Result<MetricReport, String>,
    /// Field evaluations counted while sampling the cell.
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Best cells by Fréchet distance, re-evaluated at larger sample size.
    pub promoted: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str =
        "alpha,beta,cfg_omega,n_steps,frechet,precision,recall,mmd2,n_real,n_fake,k,evaluations,error";

    pub fn write_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in rows {
            let (metrics, err) = match &r.report {
                Ok(m) => (m.csv_row(), String::new()),
                Err(e) => (",,,,,,".to_string(), e.replace([',', '\n', '\r'], ";")),
            };
            writeln!(
                w,
                "{},{},{},{},{metrics},{},{err}",
                num(r.alpha),
                num(r.beta),
                num(r.cfg_omega),
                r.n_steps,
                r.evaluations
            )?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    cfg: &ExperimentConfig,
    gmm: &GaussianMixture,
    field: &dyn VelocityField,
    reference: &SampleSet,
    guidance: &GuidanceConfig,
    n_steps: usize,
    n: usize,
    policy: ExecPolicy,
) -> SweepRow {
    let counter = CountingField::new(field);
    let mut row = SweepRow {
        alpha: guidance.alpha,
        beta: guidance.beta,
        cfg_omega: guidance.cfg_omega,
        n_steps,
        report: Err(String::new()),
        evaluations: 0,
    };
    let result = (|| {
        let grid = GridSpec { n_steps, ..cfg.grid.clone() }.build()?;
        let out = sample_batch(cfg, gmm, &counter, &grid, guidance, n, 0, policy)?;
        let expected = (n * guidance.evaluations_per_trajectory(&grid)) as u64;
        if counter.total_calls() != expected {
            return Err(Error::InvalidState(format!(
                "evaluation audit: counted {} field evaluations, expected {expected}",
                counter.total_calls()
            )));
        }
        MetricReport::compute(reference, &out.samples, cfg.metrics.k, cfg.metrics.mmd_bandwidth, policy)
    })();
    row.evaluations = counter.total_calls();
    row.report = result.map_err(|e| e.to_string());
    row
}

/// Runs every `(alpha, beta, cfg_omega, n_steps)` cell against one shared
/// reference draw, then re-evaluates the best `promote_top` cells with
/// [`PROMOTION_FACTOR`] times more samples and a fresh, larger reference.
///
/// Errors inside a cell are recorded in its row; only setup errors abort.
pub fn run_sweep(cfg: &ExperimentConfig, policy: ExecPolicy) -> Result<SweepResult> {
    cfg.validate()?;
    let axes = cfg.sweep_axes()?;
    let gmm = cfg.load_mixture()?;
    let field = experiment_field(cfg, &gmm)?;
    let target = target_mixture(cfg, &gmm)?;
    if cfg.n_trajectories == 0 {
        return Err(Error::EmptySet("n_trajectories is 0".into()));
    }
    let reference = reference_set(&target, cfg.seed, REFERENCE_CELL, cfg.metrics.n_reference, policy)?;

    let mut rows = Vec::new();
    for &n_steps in &axes.n_steps {
        for &cfg_omega in &axes.cfg_omega {
            for &alpha in &axes.alpha {
                for &beta in &axes.beta {
                    let g = GuidanceConfig { alpha, beta, cfg_omega, ..cfg.guidance.clone() };
                    rows.push(evaluate_cell(
                        cfg,
                        &gmm,
                        field.as_ref(),
                        &reference,
                        &g,
                        n_steps,
                        cfg.n_trajectories,
                        policy,
                    ));
                }
            }
        }
    }

    let mut ranked: Vec<&SweepRow> = rows.iter().filter(|r| r.report.is_ok()).collect();
    ranked.sort_by(|a, b| frechet(a).total_cmp(&frechet(b)));
    ranked.truncate(cfg.promote_top);
    let promoted = if ranked.is_empty() {
        Vec::new()
    } else {
        let big_reference =
            reference_set(&target, cfg.seed, PROMOTION_CELL, cfg.metrics.n_reference * PROMOTION_FACTOR, policy)?;
        ranked
            .into_iter()
            .map(|r| {
                let g = GuidanceConfig { alpha: r.alpha, beta: r.beta, cfg_omega: r.cfg_omega, ..cfg.guidance.clone() };
                let n = cfg.n_trajectories * PROMOTION_FACTOR;
                evaluate_cell(cfg, &gmm, field.as_ref(), &big_reference, &g, r.n_steps, n, policy)
            })
            .collect()
    };
    Ok(SweepResult { rows, promoted })
}

fn frechet(r: &SweepRow) -> f64 {
    r.report.as_ref().map_or(f64::INFINITY, |m| m.frechet)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes through `f` into a buffered file at `path`.
pub fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<PathBuf> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// `samples.csv` and `trajectory_<i>.csv` under `dir`.
pub fn write_sample_output(out: &SampleOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![write_file(&dir.join("samples.csv"), |w| out.samples.write_csv(w))?];
    for (i, rec) in out.trajectories.iter().enumerate() {
        written.push(write_file(&dir.join(format!("trajectory_{i}.csv")), |w| rec.write_csv(w))?);
    }
    Ok(written)
}

/// `sweep.csv`, plus `promoted.csv` when any cell was promoted.
pub fn write_sweep_output(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![write_file(&dir.join("sweep.csv"), |w| SweepResult::write_csv(&result.rows, w))?];
    if !result.promoted.is_empty() {
        written.push(write_file(&dir.join("promoted.csv"), |w| SweepResult::write_csv(&result.promoted, w))?);
    }
    Ok(written)
}
