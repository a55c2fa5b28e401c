//! Invariant battery behind the `check` command.
//!
//! Each check returns a [`CheckItem`] with its measured residual instead of
//! failing fast, so one report shows every result.

use std::io::Write;

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::flow::{integrate, make_uniform_grid, CountingField, FnField, VelocityField};
use crate::gmm::GaussianMixture;
use crate::guidance::{momentum_read, sample_mg, GuidanceConfig, MomentumState};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{experiment_field, trajectory_input};
use crate::mlp::{FlowSample, MlpParams};
use crate::rng::{self, Domain};

/// Maximum relative residual accepted by [`identity`].
pub const IDENTITY_TOL: f64 = 1e-8;
/// Required share of oracle probes within three standard errors.
pub const ORACLE_MIN_SHARE: f64 = 0.95;
/// Relative tolerance of the gradient check.
pub const GRADIENT_TOL: f64 = 1e-4;
/// Seed of the fixed oracle probe battery; independent of the config seed.
pub const ORACLE_PROBE_SEED: u64 = 1;
/// Denominator floor of the gradient check's relative error.
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckItem {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    /// One `PASS name: detail` or `FAIL name: detail` line per check.
    pub fn render(&self) -> String {
        self.items
            .iter()
            .map(|i| format!("{} {}: {}\n", if i.passed { "PASS" } else { "FAIL" }, i.name, i.detail))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "check,passed,detail")?;
        for i in &self.items {
            writeln!(w, "{},{},{}", i.name, i.passed, i.detail.replace([',', '\n'], ";"))?;
        }
        Ok(())
    }
}

/// Random probe point: half the probes are draws from the time-`t` marginal,
/// half are uniform on a box around the data.
fn probe_point<R: Rng>(gmm: &GaussianMixture, t: f64, r: &mut R, uniform: bool) -> Vec<f64> {
    if uniform {
        (0..gmm.dim()).map(|_| r.random_range(-2.0..2.0)).collect()
    } else {
        let (x1, _) = gmm.sample(r, None);
        let x0 = rng::standard_normal(r, gmm.dim());
        x1.iter().zip(&x0).map(|(a, b)| t * a + (1.0 - t) * b).collect()
    }
}

/// Score/velocity identity `(t v - x)/(1 - t) = ∇ log π_t(x)` against the
/// independent Cholesky score, relative to `1 + |score|`, for `t ∈ [0, 0.99]`.
pub fn identity(gmm: &GaussianMixture, n_probes: usize, seed: u64) -> CheckItem {
    let run = || {
        let mut r = rng::substream(seed, Domain::Probe, 1, 0);
        let mut worst: f64 = 0.0;
        for i in 0..n_probes {
            let t = r.random_range(0.0..=0.99);
            let x = probe_point(gmm, t, &mut r, i % 2 == 1);
            worst = worst.max(gmm.score_velocity_identity_check(&x, t)?.relative());
        }
        Ok((
            worst < IDENTITY_TOL,
            format!("max relative residual {worst:.3e} over {n_probes} probes (tol {IDENTITY_TOL:.0e})"),
        ))
    };
    CheckItem::from_result("score-velocity identity", run())
}

/// Kernel Monte-Carlo velocity against the closed form on probes drawn from
/// the marginal at `t ∈ [0.1, 0.8]`.
pub fn oracle_agreement(
    gmm: &GaussianMixture,
    n_probes: usize,
    n_pairs: usize,
    bandwidth: f64,
    seed: u64,
    policy: ExecPolicy,
) -> CheckItem {
    let outcomes = policy.map(n_probes, |i| {
        let mut r = rng::substream(seed, Domain::Probe, 2, i as u64);
        let t = r.random_range(0.1..=0.8);
        let x = probe_point(gmm, t, &mut r, false);
        let exact = gmm.optimal_velocity(&x, t, None)?;
        let mut oracle_rng = rng::substream(seed, Domain::Oracle, 0, i as u64);
        let est = gmm.mc_velocity(&x, t, None, n_pairs, bandwidth, &mut oracle_rng)?;
        Ok::<_, Error>(est.agrees_with(&exact, 3.0))
    });
    let mut agree = 0;
    let mut errors = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(true) => agree += 1,
            Ok(false) => {}
            Err(e) => errors.push(format!("probe {i}: {e}")),
        }
    }
    let share = agree as f64 / n_probes.max(1) as f64;
    let mut detail = format!(
        "{agree}/{n_probes} probes within 3 standard errors (need {:.0}%), n={n_pairs}, h={bandwidth}",
        ORACLE_MIN_SHARE * 100.0
    );
    if !errors.is_empty() {
        detail.push_str(&format!("; {}", errors.join("; ")));
    }
    CheckItem::new("mc oracle agreement", n_probes > 0 && share >= ORACLE_MIN_SHARE, detail)
}

fn trajectory_seed_input(gmm: &GaussianMixture, seed: u64, i: usize) -> (Option<usize>, Vec<f64>) {
    let cfg = ExperimentConfig::new("", seed);
    trajectory_input(&cfg, gmm, i)
}

/// `alpha = 0` (several betas), `omega = 1` sampler against plain Euler,
/// compared bit for bit at every step.
pub fn reduction(
    field: &dyn VelocityField,
    gmm: &GaussianMixture,
    n_trajectories: usize,
    n_steps: usize,
    seed: u64,
    policy: ExecPolicy,
) -> CheckItem {
    let run = || {
        let grid = make_uniform_grid(n_steps)?;
        let betas = [0.0, 0.5, 0.8, 0.95];
        let mismatches = policy.try_map(n_trajectories, |i| {
            let (c, z0) = trajectory_seed_input(gmm, seed, i);
            let euler = integrate(field, &grid, &z0, c)?;
            let mut bad = 0usize;
            for &beta in &betas {
                for unbiased in [false, true] {
                    let g = GuidanceConfig { unbiased, ..GuidanceConfig::momentum(0.0, beta) };
                    let mg = sample_mg(field, &grid, &z0, c, &g)?;
                    let same = mg.endpoint == euler.endpoint
                        && mg.steps.iter().zip(&euler.steps).all(|(a, b)| a.z == b.z && a.v == b.v);
                    bad += usize::from(!same);
                }
            }
            Ok::<_, Error>(bad)
        })?;
        let bad: usize = mismatches.iter().sum();
        let runs = n_trajectories * betas.len() * 2;
        Ok((
            bad == 0,
            format!("{bad} of {runs} alpha=0 runs differ from Euler ({n_trajectories} trajectories, N={n_steps})"),
        ))
    };
    CheckItem::from_result("alpha=0 reduction", run())
}

/// Step 0 of momentum guidance equals an Euler step on `field`, and the whole
/// trajectory equals Euler on a constant field (velocity-initialized EMA).
pub fn inertness(field: &dyn VelocityField, gmm: &GaussianMixture, n_trajectories: usize, seed: u64) -> CheckItem {
    let run = || {
        let grid = make_uniform_grid(16)?;
        let settings: Vec<GuidanceConfig> =
            [0.3, 0.6, 1.5].iter().flat_map(|&a| [0.0, 0.5, 0.8].map(|b| GuidanceConfig::momentum(a, b))).collect();
        let d = gmm.dim();
        let constant: Vec<f64> = (0..d).map(|j| 0.7 - 0.9 * j as f64).collect();
        let flat = FnField::new(d, move |_x: &[f64], _t, _c| constant.clone());
        let (mut step0_bad, mut const_bad) = (0, 0);
        for i in 0..n_trajectories {
            let (c, z0) = trajectory_seed_input(gmm, seed, i);
            let euler = integrate(field, &grid, &z0, c)?;
            let euler_flat = integrate(&flat, &grid, &z0, c)?;
            for g in &settings {
                let mg = sample_mg(field, &grid, &z0, c, g)?;
                step0_bad += usize::from(mg.steps[1].z != euler.steps[1].z || mg.steps[0].g.iter().any(|&x| x != 0.0));
                let mg_flat = sample_mg(&flat, &grid, &z0, c, g)?;
                let same = mg_flat.endpoint == euler_flat.endpoint
                    && mg_flat.steps.iter().zip(&euler_flat.steps).all(|(a, b)| a.z == b.z)
                    && mg_flat.steps.iter().all(|s| s.g.iter().all(|&x| x == 0.0));
                const_bad += usize::from(!same);
            }
        }
        let runs = n_trajectories * settings.len();
        Ok((
            step0_bad == 0 && const_bad == 0,
            format!("step-0 mismatches {step0_bad}/{runs}, constant-field mismatches {const_bad}/{runs}"),
        ))
    };
    CheckItem::from_result("step-0 and constant-field inertness", run())
}

/// Counted field evaluations per trajectory: `N` with `omega = 1` for every
/// `(alpha, beta)`, and `N + #{t_i >= 0.125}` with `omega = 2` on
/// `cfg_interval = [0.125, 1]`.
pub fn evaluation_budget(field: &dyn VelocityField, gmm: &GaussianMixture, n_steps: usize, seed: u64) -> CheckItem {
    let run = || {
        let grid = make_uniform_grid(n_steps)?;
        let late = grid.nodes()[..n_steps].iter().filter(|&&t| t >= 0.125).count();
        let counter = CountingField::new(field);
        let mut failures = Vec::new();
        let mut cells = 0;
        for alpha in [0.0, 0.4, 1.0] {
            for beta in [0.0, 0.5, 0.9] {
                for (omega, expected) in [(1.0, n_steps), (2.0, n_steps + late)] {
                    let g = GuidanceConfig {
                        cfg_omega: omega,
                        cfg_interval: [0.125, 1.0],
                        ..GuidanceConfig::momentum(alpha, beta)
                    };
                    for i in 0..4 {
                        let (c, z0) = trajectory_seed_input(gmm, seed, i);
                        let c = c.or(Some(0));
                        counter.reset();
                        sample_mg(&counter, &grid, &z0, c, &g)?;
                        cells += 1;
                        if counter.total_calls() != expected as u64 {
                            failures.push(format!(
                                "alpha={alpha} beta={beta} omega={omega}: {} != {expected}",
                                counter.total_calls()
                            ));
                        }
                    }
                }
            }
        }
        let detail = if failures.is_empty() {
            format!("{cells} trajectories: N={n_steps} with omega=1, N+{late} with omega=2 on [0.125, 1]")
        } else {
            failures.join("; ")
        };
        Ok((failures.is_empty(), detail))
    };
    CheckItem::from_result("evaluation budget", run())
}

/// Bias-corrected EMA: the `beta = 0.5` stream `[1, 0]` reads `1` then `1/3`
/// exactly, and constant streams read back the constant bit for bit for
/// `beta` on a grid in `[0, 0.99]` and `s` up to 200.
pub fn ema_arithmetic() -> CheckItem {
    let run = || {
        let mut st = MomentumState::zeroed(1);
        st.update(&[1.0], 0.5);
        let first = momentum_read(&st, true, false, &[1.0])?[0];
        st.update(&[0.0], 0.5);
        let second = momentum_read(&st, true, false, &[0.0])?[0];
        let example_ok = st.raw()[0] == 0.25 && first == 1.0 && second == 1.0 / 3.0;

        let mut exact = 0usize;
        let mut total = 0usize;
        for bi in 0..=99 {
            let beta = bi as f64 / 100.0;
            for v in [1.0, -0.3, 7.25, 1e-3, 123.456] {
                let mut st = MomentumState::zeroed(1);
                for _ in 0..200 {
                    st.update(&[v], beta);
                    let m = momentum_read(&st, true, false, &[v])?[0];
                    exact += usize::from(m == v);
                    total += 1;
                }
            }
        }
        Ok((
            example_ok && exact == total,
            format!("stream [1,0] at beta=0.5 reads {first} then {second:e}; constant streams: {exact}/{total} exact"),
        ))
    };
    CheckItem::from_result("unbiased ema arithmetic", run())
}

/// Largest relative gap between backprop and central differences (`h = 1e-5`)
/// over every parameter, for `n_batches` random 4-sample batches.
pub fn gradient(dim: usize, n_classes: usize, hidden: usize, n_batches: usize, seed: u64) -> CheckItem {
    let run = || {
        let p = MlpParams::init(dim, hidden, n_classes, seed)?;
        let mut r = rng::substream(seed, Domain::Probe, 3, 0);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..n_batches {
            let batch: Vec<FlowSample> = (0..4)
                .map(|i| FlowSample {
                    x0: rng::standard_normal(&mut r, dim),
                    x1: rng::standard_normal(&mut r, dim),
                    t: r.random(),
                    c: if i == 0 || n_classes == 0 { None } else { Some(r.random_range(0..n_classes)) },
                })
                .collect();
            let (_, grad) = p.loss_and_grad(&batch)?;
            let mut q = p.clone();
            for i in 0..p.len() {
                let x = p.get(i);
                q.set(i, x + h);
                let up = q.loss_and_grad(&batch)?.0;
                q.set(i, x - h);
                let down = q.loss_and_grad(&batch)?.0;
                q.set(i, x);
                let fd = (up - down) / (2.0 * h);
                let an = grad.get(i);
                worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(GRADIENT_FLOOR));
            }
        }
        Ok((
            worst < GRADIENT_TOL,
            format!(
                "max relative gap {worst:.3e} over {} parameters x {n_batches} batches (tol {GRADIENT_TOL:.0e})",
                p.len()
            ),
        ))
    };
    CheckItem::from_result("mlp gradient", run())
}

/// Mean implied-score norm `|(t v - x)/(1 - t)|` of `trained` against the
/// mixture's own field on probes drawn from each component's time-`t`
/// marginal, `t ∈ [0.5, 0.9]`. Passes when a paired one-sided t test at 5%
/// finds the trained field smaller.
pub fn oversmoothing(trained: &dyn VelocityField, gmm: &GaussianMixture, n_probes: usize, seed: u64) -> CheckItem {
    let run = || {
        let mut r = rng::substream(seed, Domain::Probe, 4, 0);
        let score = |f: &dyn VelocityField, x: &[f64], t: f64| -> Result<f64> {
            let v = f.evaluate(x, t, None)?;
            Ok(x.iter().zip(&v).map(|(x, v)| ((t * v - x) / (1.0 - t)).powi(2)).sum::<f64>().sqrt())
        };
        let mut diffs = Vec::with_capacity(n_probes);
        let (mut s_trained, mut s_exact) = (0.0, 0.0);
        for i in 0..n_probes {
            let k = i % gmm.n_components();
            let t = r.random_range(0.5..=0.9);
            let spread = (t * t * gmm.component_max_variance(k) + (1.0 - t).powi(2)).sqrt();
            let noise = rng::standard_normal(&mut r, gmm.dim());
            let x: Vec<f64> = gmm.component_mean(k).iter().zip(&noise).map(|(m, e)| t * m + spread * e).collect();
            let a = score(trained, &x, t)?;
            let b = score(gmm, &x, t)?;
            s_trained += a;
            s_exact += b;
            diffs.push(b - a);
        }
        let n = n_probes as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t_stat = mean / sd * n.sqrt();
        Ok((
            t_stat > 1.645,
            format!(
                "mean implied score trained {:.3} vs analytic {:.3}; paired t = {t_stat:.2} (need > 1.645, n={n_probes})",
                s_trained / n,
                s_exact / n
            ),
        ))
    };
    CheckItem::from_result("oversmoothing witness", run())
}

/// The default battery on the configured mixture and field.
pub fn check(cfg: &ExperimentConfig, policy: ExecPolicy) -> CheckReport {
    let mut items = Vec::new();
    let loaded = cfg.load_mixture().and_then(|g| {
        let field = experiment_field(cfg, &g)?;
        Ok((g, field))
    });
    match loaded {
        Err(e) => items.push(CheckItem::new("mixture validation", false, e.to_string())),
        Ok((gmm, field)) => {
            items.push(CheckItem::new(
                "mixture validation",
                true,
                format!("{} components, {} classes, dim {}", gmm.n_components(), gmm.n_classes(), gmm.dim()),
            ));
            items.push(identity(&gmm, 1000, cfg.seed));
            items.push(oracle_agreement(&gmm, 20, 200_000, 0.05, ORACLE_PROBE_SEED, policy));
            items.push(reduction(field.as_ref(), &gmm, 1000, 32, cfg.seed, policy));
            items.push(inertness(field.as_ref(), &gmm, 32, cfg.seed));
            items.push(evaluation_budget(field.as_ref(), &gmm, cfg.grid.n_steps, cfg.seed));
        }
    }
    items.push(ema_arithmetic());
    items.push(gradient(2, 2, 16, 3, cfg.seed));
    CheckReport { items }
}
