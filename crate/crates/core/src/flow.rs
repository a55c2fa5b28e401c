//! Time grids, the Euler integrator and the velocity-field contract.
//!
//! Sampling runs forward from Gaussian noise at `t = 0` to data at `t = 1`
//! along `dz/dt = v(z, t, c)`.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::csvfmt::num;
use crate::error::{Error, Result};

/// Class condition; `None` is the unconditional branch.
pub type Condition = Option<usize>;

/// `(point, time, condition) -> velocity`.
///
/// Implementations must be deterministic and safe to evaluate concurrently
/// from many trajectories.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `v(x, t, c)` into `out` (length `dim`).
    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()>;

    fn evaluate(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, t, c, &mut out)?;
        Ok(out)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        (**self).evaluate_into(x, t, c, out)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        (**self).evaluate_into(x, t, c, out)
    }
}

/// A field given by a closure, mostly for tests and toy dynamics.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, Condition) -> Vec<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        let v = (self.f)(x, t, c);
        if v.len() != self.dim {
            return Err(Error::invalid(format!("field returned {} components, expected {}", v.len(), self.dim)));
        }
        out.copy_from_slice(&v);
        Ok(())
    }
}

/// Wraps a field and counts its evaluations, split by conditional and
/// unconditional calls.
pub struct CountingField<F> {
    inner: F,
    conditional: AtomicU64,
    unconditional: AtomicU64,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self { inner, conditional: AtomicU64::new(0), unconditional: AtomicU64::new(0) }
    }

    pub fn conditional_calls(&self) -> u64 {
        self.conditional.load(Ordering::Relaxed)
    }

    pub fn unconditional_calls(&self) -> u64 {
        self.unconditional.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        self.conditional_calls() + self.unconditional_calls()
    }

    pub fn reset(&self) {
        self.conditional.store(0, Ordering::Relaxed);
        self.unconditional.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> F {
        self.inner
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        match c {
            Some(_) => self.conditional.fetch_add(1, Ordering::Relaxed),
            None => self.unconditional.fetch_add(1, Ordering::Relaxed),
        };
        self.inner.evaluate_into(x, t, c, out)
    }
}

/// Strictly increasing times from 0 to 1; `N = nodes.len() - 1` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Validates the grid invariants.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("time grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 || nodes[nodes.len() - 1] != 1.0 {
            return Err(Error::invalid("time grid must start at 0 and end at 1"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of Euler steps (one field evaluation each without CFG).
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }
}

/// Uniform grid `{i / n_steps}`.
pub fn make_uniform_grid(n_steps: usize) -> Result<TimeGrid> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    let n = n_steps as f64;
    TimeGrid::from_nodes((0..=n_steps).map(|i| i as f64 / n).collect())
}

/// Rational resolution shift `u -> s u / (1 + (s - 1) u)` applied to the
/// uniform grid. `shift = 1` is the uniform grid; larger shifts pack the
/// nodes more densely toward `t = 1`.
pub fn make_shifted_grid(n_steps: usize, shift: f64) -> Result<TimeGrid> {
    if !(shift >= 1.0) || !shift.is_finite() {
        return Err(Error::invalid(format!("shift must be finite and >= 1, got {shift}")));
    }
    let uniform = make_uniform_grid(n_steps)?;
    if shift == 1.0 {
        return Ok(uniform);
    }
    let mut nodes: Vec<f64> = uniform.nodes.iter().map(|&u| shift * u / (1.0 + (shift - 1.0) * u)).collect();
    // pin the endpoints against rounding
    nodes[0] = 0.0;
    nodes[n_steps] = 1.0;
    TimeGrid::from_nodes(nodes)
}

fn check_finite(label: &str, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {label}")))
    }
}

/// `z + dt * v`.
pub fn euler_step(z: &[f64], v: &[f64], dt: f64) -> Result<Vec<f64>> {
    if z.len() != v.len() {
        return Err(Error::invalid("point and velocity dimensions differ"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
    }
    check_finite("point", z)?;
    check_finite("velocity", v)?;
    let next: Vec<f64> = z.iter().zip(v).map(|(zi, vi)| zi + dt * vi).collect();
    check_finite("point", &next)?;
    Ok(next)
}

/// Implied clean-sample estimate `z + (1 - t) v`.
pub fn data_estimate(z: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    let s = 1.0 - t;
    z.iter().zip(v).map(|(zi, vi)| zi + s * vi).collect()
}

/// State of one step, taken at the step's left endpoint `t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub z: Vec<f64>,
    /// Velocity used by the sampler before extrapolation.
    pub v: Vec<f64>,
    /// Momentum as read for the extrapolation (zero for plain Euler).
    pub m: Vec<f64>,
    /// Extrapolation term `v - m` (zero for plain Euler).
    pub g: Vec<f64>,
    pub x_hat: Vec<f64>,
}

impl StepRecord {
    pub fn new(t: f64, z: Vec<f64>, v: Vec<f64>, m: Vec<f64>, g: Vec<f64>) -> Self {
        let x_hat = data_estimate(&z, t, &v);
        Self { t, z, v, m, g, x_hat }
    }
}

/// Per-step log of a trajectory plus its endpoint `z_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub dim: usize,
    pub steps: Vec<StepRecord>,
    pub endpoint: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn csv_header(dim: usize) -> String {
        let mut cols = vec!["step".to_string(), "t".to_string()];
        for prefix in ["z", "v", "m", "g", "xhat"] {
            cols.extend((0..dim).map(|j| format!("{prefix}_{j}")));
        }
        cols.join(",")
    }

    /// One row per step: `step,t,z_*,v_*,m_*,g_*,xhat_*`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::csv_header(self.dim))?;
        for (i, s) in self.steps.iter().enumerate() {
            let mut row = vec![i.to_string(), num(s.t)];
            for vec in [&s.z, &s.v, &s.m, &s.g, &s.x_hat] {
                row.extend(vec.iter().map(|&x| num(x)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Plain Euler integration of `field` over `grid` from `z0`.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    grid: &TimeGrid,
    z0: &[f64],
    c: Condition,
) -> Result<TrajectoryRecord> {
    let d = z0.len();
    if field.dim() != d {
        return Err(Error::UnsupportedDimension { got: d, expected: field.dim() });
    }
    check_finite("initial point", z0)?;
    let mut z = z0.to_vec();
    let mut v = vec![0.0; d];
    let mut steps = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let t = grid.nodes[i];
        field.evaluate_into(&z, t, c, &mut v).map_err(|e| e.at_step(i))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericAtStep { step: i, detail: "non-finite velocity".into() });
        }
        let next = euler_step(&z, &v, grid.dt(i)).map_err(|e| e.at_step(i))?;
        steps.push(StepRecord::new(t, z, v.clone(), vec![0.0; d], vec![0.0; d]));
        z = next;
    }
    Ok(TrajectoryRecord { dim: d, steps, endpoint: z })
}
