//! 2D toy panels: trajectories with and without momentum guidance, a quiver
//! of `v` and of the extrapolation term `v - m` at one step, and the per-step
//! clean-sample estimates `x̂ = z + (1 - t) v`.

use std::path::{Path, PathBuf};

use crate::csvfmt::num;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::flow::{Condition, TrajectoryRecord, VelocityField};
use crate::gmm::GaussianMixture;
use crate::guidance::{sample_mg, GuidanceConfig};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::{experiment_field, trajectory_input, write_file};
use crate::svg::{class_color, Canvas, Frame, VIEW};

/// Half-width of the square of initial points used for the quiver lattice.
pub const LATTICE_HALF_WIDTH: f64 = 2.5;
const XHAT_PANELS: usize = 16;

/// State of one lattice trajectory at the quiver step.
#[derive(Debug, Clone, PartialEq)]
pub struct QuiverArrow {
    pub z: [f64; 2],
    pub v: [f64; 2],
    /// Extrapolation term `v - m`.
    pub g: [f64; 2],
    pub class: Condition,
}

/// Trajectories of the toy panels and the quiver at `step_index`.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub baseline: Vec<TrajectoryRecord>,
    pub momentum: Vec<TrajectoryRecord>,
    /// Condition of each baseline/momentum trajectory.
    pub classes: Vec<Condition>,
    pub step_index: usize,
    pub t: f64,
    pub arrows: Vec<QuiverArrow>,
}

fn pair(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

fn baseline_of(g: &GuidanceConfig) -> GuidanceConfig {
    GuidanceConfig { alpha: 0.0, ..g.clone() }
}

/// Runs the toy trajectories. The baseline is the configured guidance with
/// `alpha = 0`; both share the `z0` batch.
pub fn toy_run(cfg: &ExperimentConfig, policy: ExecPolicy) -> Result<ToyRun> {
    cfg.validate()?;
    let gmm = cfg.load_mixture()?;
    if gmm.dim() != 2 {
        return Err(Error::UnsupportedDimension { got: gmm.dim(), expected: 2 });
    }
    let field = experiment_field(cfg, &gmm)?;
    toy_run_with(cfg, &gmm, field.as_ref(), policy)
}

/// [`toy_run`] with an explicit field.
pub fn toy_run_with(
    cfg: &ExperimentConfig,
    gmm: &GaussianMixture,
    field: &dyn VelocityField,
    policy: ExecPolicy,
) -> Result<ToyRun> {
    if field.dim() != 2 {
        return Err(Error::UnsupportedDimension { got: field.dim(), expected: 2 });
    }
    let grid = cfg.grid.build()?;
    let step_index = cfg.toy.step_index.unwrap_or(grid.steps() / 2);
    if step_index >= grid.steps() {
        return Err(Error::Config(format!("toy.step_index {step_index} must be < n_steps {}", grid.steps())));
    }
    let run = |g: &GuidanceConfig| {
        policy.try_map(cfg.toy.n_trajectories, |i| {
            let (c, z0) = trajectory_input(cfg, gmm, i);
            sample_mg(field, &grid, &z0, c, g)
        })
    };
    let classes = (0..cfg.toy.n_trajectories).map(|i| trajectory_input(cfg, gmm, i).0).collect();
    let baseline = run(&baseline_of(&cfg.guidance))?;
    let momentum = run(&cfg.guidance)?;

    let l = cfg.toy.lattice;
    let arrows = policy.try_map(l * l, |k| {
        let (row, col) = (k / l, k % l);
        let coord = |j: usize| {
            if l == 1 {
                0.0
            } else {
                -LATTICE_HALF_WIDTH + 2.0 * LATTICE_HALF_WIDTH * j as f64 / (l - 1) as f64
            }
        };
        let z0 = [coord(col), coord(row)];
        // conditions follow the same per-index law as sampled trajectories
        let (c, _) = trajectory_input(cfg, gmm, k);
        let rec = sample_mg(field, &grid, &z0, c, &cfg.guidance)?;
        let s = &rec.steps[step_index];
        Ok::<_, Error>(QuiverArrow { z: pair(&s.z), v: pair(&s.v), g: pair(&s.g), class: c })
    })?;
    Ok(ToyRun { baseline, momentum, classes, step_index, t: grid.nodes()[step_index], arrows })
}

/// Fraction of arrows within two marginal standard deviations of a component
/// mean `t μ_k` whose extrapolation term points away from that mean. `None`
/// when no arrow is that close to any mode.
pub fn outward_fraction(arrows: &[QuiverArrow], gmm: &GaussianMixture, t: f64) -> Option<(f64, usize)> {
    let mut near = 0;
    let mut outward = 0;
    for a in arrows {
        let closest = (0..gmm.n_components())
            .map(|k| {
                let mean = gmm.component_mean(k);
                let d = [a.z[0] - t * mean[0], a.z[1] - t * mean[1]];
                let sd = (t * t * gmm.component_max_variance(k) + (1.0 - t).powi(2)).sqrt();
                (d, sd)
            })
            .min_by(|(a, _), (b, _)| norm2(a).total_cmp(&norm2(b)));
        let Some((d, sd)) = closest else { continue };
        if norm2(&d).sqrt() <= 2.0 * sd {
            near += 1;
            if d[0] * a.g[0] + d[1] * a.g[1] > 0.0 {
                outward += 1;
            }
        }
    }
    (near > 0).then(|| (outward as f64 / near as f64, near))
}

fn norm2(v: &[f64; 2]) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

fn mode_markers(c: &mut Canvas, gmm: &GaussianMixture) {
    for k in 0..gmm.n_components() {
        c.cross(pair(gmm.component_mean(k)), 5.0, "#000000");
    }
}

fn trajectory_panel(records: &[TrajectoryRecord], classes: &[Condition], gmm: &GaussianMixture, title: &str) -> String {
    let paths: Vec<Vec<[f64; 2]>> = records
        .iter()
        .map(|r| {
            let mut pts: Vec<[f64; 2]> = r.steps.iter().map(|s| pair(&s.z)).collect();
            pts.push(pair(&r.endpoint));
            pts
        })
        .collect();
    let means = (0..gmm.n_components()).map(|k| pair(gmm.component_mean(k)));
    let frame = Frame::fit(paths.iter().flatten().copied().chain(means));
    let mut c = Canvas::new(frame);
    for (pts, &class) in paths.iter().zip(classes) {
        let color = class_color(class);
        c.polyline(pts, color, 1.0, 0.5);
        c.circle(*pts.last().expect("nonempty"), 2.5, color, 0.9);
    }
    mode_markers(&mut c, gmm);
    c.label(12.0, 24.0, title);
    c.finish()
}

fn quiver_half(arrows: &[QuiverArrow], pick: impl Fn(&QuiverArrow) -> [f64; 2], title: &str, spacing: f64) -> String {
    let frame = Frame::fit(arrows.iter().map(|a| a.z));
    let longest = arrows.iter().map(|a| norm2(&pick(a)).sqrt()).fold(0.0, f64::max);
    let scale = if longest > 0.0 { spacing / longest } else { 0.0 };
    let mut c = Canvas::new(frame);
    for a in arrows {
        c.circle(a.z, 2.0, "#999999", 0.8);
        c.arrow(a.z, pick(a), scale, class_color(a.class));
    }
    c.label(12.0, 24.0, title);
    c.into_group(0.0, 0.0, 1.0)
}

fn quiver_panel(run: &ToyRun) -> String {
    let spread = run
        .arrows
        .iter()
        .flat_map(|a| a.z)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let n = (run.arrows.len() as f64).sqrt().max(1.0);
    let spacing = ((spread.1 - spread.0) / n).max(1e-6);
    let left = quiver_half(&run.arrows, |a| a.v, &format!("v at t = {:.3}", run.t), spacing);
    let right = quiver_half(&run.arrows, |a| a.g, &format!("v - m at t = {:.3}", run.t), spacing);
    let mut c = Canvas::new(Frame::fit([[0.0, 0.0], [1.0, 1.0]]));
    c.raw(&format!("<g transform=\"translate(0 {:.2}) scale(0.5)\">\n{left}</g>\n", VIEW / 4.0));
    c.raw(&format!("<g transform=\"translate({:.2} {:.2}) scale(0.5)\">\n{right}</g>\n", VIEW / 2.0, VIEW / 4.0));
    c.finish()
}

fn xhat_panel(records: &[TrajectoryRecord], classes: &[Condition], gmm: &GaussianMixture) -> String {
    let n_steps = records.first().map_or(0, |r| r.steps.len());
    let shown: Vec<usize> = if n_steps <= XHAT_PANELS {
        (0..n_steps).collect()
    } else {
        (0..XHAT_PANELS).map(|j| j * (n_steps - 1) / (XHAT_PANELS - 1)).collect()
    };
    let frame = Frame::fit(
        records
            .iter()
            .flat_map(|r| r.steps.iter().map(|s| pair(&s.x_hat)))
            .chain((0..gmm.n_components()).map(|k| pair(gmm.component_mean(k)))),
    );
    let cols = (shown.len() as f64).sqrt().ceil().max(1.0) as usize;
    let cell = VIEW / cols as f64;
    let mut page = Canvas::new(frame);
    for (j, &step) in shown.iter().enumerate() {
        let mut c = Canvas::new(frame);
        for (r, &class) in records.iter().zip(classes) {
            c.circle(pair(&r.steps[step].x_hat), 3.0, class_color(class), 0.7);
        }
        mode_markers(&mut c, gmm);
        let t = records[0].steps[step].t;
        c.label(12.0, 30.0, &format!("step {step}, t = {t:.3}"));
        page.raw(&c.into_group((j % cols) as f64 * cell, (j / cols) as f64 * cell, 1.0 / cols as f64));
    }
    page.finish()
}

/// `quiver.csv`: one row per lattice point, `z_*,v_*,g_*,class`.
fn write_quiver_csv(run: &ToyRun, w: &mut dyn std::io::Write) -> std::io::Result<()> {
    writeln!(w, "z_0,z_1,v_0,v_1,g_0,g_1,class")?;
    for a in &run.arrows {
        let class = a.class.map_or(String::new(), |c| c.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{},{class}",
            num(a.z[0]),
            num(a.z[1]),
            num(a.v[0]),
            num(a.v[1]),
            num(a.g[0]),
            num(a.g[1])
        )?;
    }
    Ok(())
}

/// Writes `panel_baseline.svg`, `panel_mg.svg`, `panel_velocity.svg`,
/// `panel_xhat.svg` and `quiver.csv` into `dir`.
pub fn emit_toy_panels(cfg: &ExperimentConfig, dir: &Path, policy: ExecPolicy) -> Result<Vec<PathBuf>> {
    let run = toy_run(cfg, policy)?;
    let gmm = cfg.load_mixture()?;
    let g = &cfg.guidance;
    let panels = [
        (
            "panel_baseline.svg",
            trajectory_panel(
                &run.baseline,
                &run.classes,
                &gmm,
                &format!("baseline (alpha = 0, {} steps)", cfg.grid.n_steps),
            ),
        ),
        (
            "panel_mg.svg",
            trajectory_panel(
                &run.momentum,
                &run.classes,
                &gmm,
                &format!("momentum guidance (alpha = {}, beta = {})", g.alpha, g.beta),
            ),
        ),
        ("panel_velocity.svg", quiver_panel(&run)),
        ("panel_xhat.svg", xhat_panel(&run.momentum, &run.classes, &gmm)),
    ];
    let mut written = Vec::new();
    for (name, body) in panels {
        written.push(write_file(&dir.join(name), |w| w.write_all(body.as_bytes()))?);
    }
    written.push(write_file(&dir.join("quiver.csv"), |w| write_quiver_csv(&run, w))?);
    Ok(written)
}
