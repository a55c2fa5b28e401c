//! Velocity-level guidance and the momentum-guided Euler sampler.
//!
//! Momentum guidance keeps an exponential moving average `m` of the velocities
//! already seen on a trajectory and steps with the extrapolated velocity
//! `v + alpha (v - m)`. It reuses the velocity the sampler evaluates anyway, so
//! it adds no field evaluations. With classifier-free guidance enabled, the
//! CFG-combined velocity is the stream the momentum tracks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{euler_step, Condition, StepRecord, TimeGrid, TrajectoryRecord, VelocityField};

/// Added to the momentum norm when rescaling it to the velocity norm.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Every knob of a guided sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Momentum-guidance weight; 0 disables the extrapolation.
    pub alpha: f64,
    /// EMA decay in `[0, 1)`.
    pub beta: f64,
    /// Closed interval of `t_i` on which the extrapolation is applied.
    pub mg_interval: [f64; 2],
    /// CFG scale; 1 means no unconditional evaluation.
    pub cfg_omega: f64,
    /// Closed interval of `t_i` on which CFG is applied.
    pub cfg_interval: [f64; 2],
    /// Zero-initialized EMA with bias correction.
    pub unbiased: bool,
    /// Rescale the momentum to the norm of the current velocity.
    pub normalize: bool,
    /// Autoguidance weight, consumed when building the field.
    pub auto_weight: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.8,
            mg_interval: [0.0, 1.0],
            cfg_omega: 1.0,
            cfg_interval: [0.0, 1.0],
            unbiased: false,
            normalize: false,
            auto_weight: None,
        }
    }
}

impl GuidanceConfig {
    pub fn momentum(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.cfg_omega >= 1.0) || !self.cfg_omega.is_finite() {
            return Err(Error::invalid(format!("cfg_omega must be >= 1, got {}", self.cfg_omega)));
        }
        for (name, [lo, hi]) in [("mg_interval", self.mg_interval), ("cfg_interval", self.cfg_interval)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::invalid(format!("{name} [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if let Some(w) = self.auto_weight {
            if !(w > 1.0) || !w.is_finite() {
                return Err(Error::invalid(format!("auto_weight must be > 1, got {w}")));
            }
        }
        Ok(())
    }

    pub fn init_mode(&self) -> InitMode {
        if self.unbiased {
            InitMode::Zero
        } else {
            InitMode::Velocity
        }
    }

    fn cfg_active(&self, t: f64) -> bool {
        self.cfg_omega > 1.0 && in_interval(t, self.cfg_interval)
    }

    fn mg_active(&self, t: f64) -> bool {
        self.alpha != 0.0 && in_interval(t, self.mg_interval)
    }

    /// Field evaluations one trajectory costs on `grid`.
    pub fn evaluations_per_trajectory(&self, grid: &TimeGrid) -> usize {
        let n = grid.steps();
        let cfg_steps = grid.nodes()[..n].iter().filter(|&&t| self.cfg_active(t)).count();
        n + cfg_steps
    }
}

fn in_interval(t: f64, [lo, hi]: [f64; 2]) -> bool {
    lo <= t && t <= hi
}

/// `omega v_cond + (1 - omega) v_uncond`; exactly `v_cond` when `omega = 1`.
pub fn cfg_velocity(v_cond: &[f64], v_uncond: &[f64], omega: f64) -> Result<Vec<f64>> {
    if !(omega >= 1.0) {
        return Err(Error::invalid(format!("cfg omega must be >= 1, got {omega}")));
    }
    if omega == 1.0 {
        return Ok(v_cond.to_vec());
    }
    Ok(extrapolate(v_cond, v_uncond, omega))
}

/// `w v_main + (1 - w) v_weak`.
pub fn auto_velocity(v_main: &[f64], v_weak: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(w > 1.0) {
        return Err(Error::invalid(format!("autoguidance weight must be > 1, got {w}")));
    }
    Ok(extrapolate(v_main, v_weak, w))
}

/// `w s + (1 - w) k`, written as `s + (w - 1)(s - k)` so that equal inputs
/// come back unchanged.
fn extrapolate(strong: &[f64], weak: &[f64], w: f64) -> Vec<f64> {
    strong.iter().zip(weak).map(|(s, k)| s + (w - 1.0) * (s - k)).collect()
}

/// Autoguided field: a main field extrapolated away from a weaker one.
pub struct AutoguidedField<M, W> {
    main: M,
    weak: W,
    weight: f64,
}

impl<M: VelocityField, W: VelocityField> AutoguidedField<M, W> {
    pub fn new(main: M, weak: W, weight: f64) -> Result<Self> {
        if main.dim() != weak.dim() {
            return Err(Error::invalid("autoguidance fields differ in dimension"));
        }
        if !(weight > 1.0) {
            return Err(Error::invalid(format!("autoguidance weight must be > 1, got {weight}")));
        }
        Ok(Self { main, weak, weight })
    }
}

impl<M: VelocityField, W: VelocityField> VelocityField for AutoguidedField<M, W> {
    fn dim(&self) -> usize {
        self.main.dim()
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        let mut weak = vec![0.0; out.len()];
        self.main.evaluate_into(x, t, c, out)?;
        self.weak.evaluate_into(x, t, c, &mut weak)?;
        for (o, k) in out.iter_mut().zip(&weak) {
            *o += (self.weight - 1.0) * (*o - k);
        }
        Ok(())
    }
}

/// How the EMA is seeded before the first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `m = v_0`.
    Velocity,
    /// `m = 0`, then one EMA update with `v_0`.
    Zero,
}

/// EMA of the guided velocities of one trajectory.
///
/// The state keeps the bias-corrected average `m_hat` together with its mass
/// `1 - beta^s`; the raw EMA is their product. Updates use the weighted form
/// `(beta mass m_hat + (1 - beta) v) / mass'`, except that a coordinate whose
/// input equals the current average is left untouched, so constant streams
/// are exact fixed points.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    /// Bias-corrected EMA.
    pub m_hat: Vec<f64>,
    /// `1 - beta^s`; 1 for velocity-initialized states.
    pub mass: f64,
    /// Number of EMA updates folded in.
    pub update_count: u64,
    pub init_mode: InitMode,
}

impl MomentumState {
    pub fn zeroed(dim: usize) -> Self {
        Self { m_hat: vec![0.0; dim], mass: 0.0, update_count: 0, init_mode: InitMode::Zero }
    }

    /// State before step 0, seeded from the step-0 velocity. Both modes end
    /// with `update_count = 1`.
    pub fn init(v0: &[f64], mode: InitMode, beta: f64) -> Self {
        match mode {
            InitMode::Velocity => Self { m_hat: v0.to_vec(), mass: 1.0, update_count: 1, init_mode: mode },
            InitMode::Zero => {
                let mut state = Self::zeroed(v0.len());
                state.update(v0, beta);
                state
            }
        }
    }

    /// Raw EMA `m` (zero-initialized states carry the bias).
    pub fn raw(&self) -> Vec<f64> {
        if self.mass == 1.0 {
            return self.m_hat.clone();
        }
        self.m_hat.iter().map(|m| m * self.mass).collect()
    }

    /// `m <- (1 - beta) v + beta m`.
    pub fn update(&mut self, v: &[f64], beta: f64) {
        self.update_count += 1;
        let old = self.mass;
        if beta == 0.0 || old == 0.0 {
            self.m_hat.copy_from_slice(v);
            self.mass = if beta == 0.0 { 1.0 } else { 1.0 - beta };
            return;
        }
        let rate = 1.0 - beta;
        self.mass = if old == 1.0 { 1.0 } else { old + rate * (1.0 - old) };
        let keep = beta * old;
        for (m, &v) in self.m_hat.iter_mut().zip(v) {
            if *m != v {
                *m = (keep * *m + rate * v) / self.mass;
            }
        }
    }
}

/// Momentum as used by the extrapolation: optionally bias-corrected by
/// `1 / (1 - beta^s)` and optionally rescaled to `|v_ref|`.
pub fn momentum_read(state: &MomentumState, unbiased: bool, normalize: bool, v_ref: &[f64]) -> Result<Vec<f64>> {
    let mut m_hat = if unbiased {
        if state.init_mode != InitMode::Zero {
            return Err(Error::InvalidState("bias correction requires a zero-initialized EMA".into()));
        }
        if state.update_count == 0 {
            return Err(Error::InvalidState("bias correction before the first EMA update".into()));
        }
        state.m_hat.clone()
    } else {
        state.raw()
    };
    if normalize {
        let norm_v = l2(v_ref);
        let norm_m = l2(&m_hat);
        let scale = norm_v / (norm_m + NORMALIZE_EPS);
        m_hat.iter_mut().for_each(|m| *m *= scale);
    }
    Ok(m_hat)
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Velocity decomposition of one guided step.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveVelocity {
    /// Velocity actually used for the position update.
    pub v_eff: Vec<f64>,
    /// Guided (CFG-combined or plain) velocity.
    pub v_guided: Vec<f64>,
    /// Momentum as read for this step.
    pub m: Vec<f64>,
    /// Extrapolation term `v_guided - m`.
    pub g: Vec<f64>,
}

/// One momentum-guided Euler step at time `t` with step `dt`; updates `state`.
///
/// The EMA is updated on every step; only the extrapolation is gated by
/// `mg_interval`. Gated-off steps (and `alpha = 0`) take the plain Euler path.
pub fn mg_step(
    z: &[f64],
    v_guided: &[f64],
    state: &mut MomentumState,
    dt: f64,
    cfg: &GuidanceConfig,
    t: f64,
) -> Result<(Vec<f64>, EffectiveVelocity)> {
    let m = momentum_read(state, cfg.unbiased, cfg.normalize, v_guided)?;
    let g: Vec<f64> = v_guided.iter().zip(&m).map(|(v, m)| v - m).collect();
    let (z_next, v_eff) = if cfg.mg_active(t) {
        let v_eff: Vec<f64> = v_guided.iter().zip(&g).map(|(v, g)| v + cfg.alpha * g).collect();
        (euler_step(z, &v_eff, dt)?, v_eff)
    } else {
        (euler_step(z, v_guided, dt)?, v_guided.to_vec())
    };
    state.update(v_guided, cfg.beta);
    Ok((z_next, EffectiveVelocity { v_eff, v_guided: v_guided.to_vec(), m, g }))
}

fn guided_velocity<F: VelocityField + ?Sized>(
    field: &F,
    z: &[f64],
    t: f64,
    c: Condition,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let v_cond = field.evaluate(z, t, c)?;
    if cfg.cfg_active(t) {
        let v_uncond = field.evaluate(z, t, None)?;
        cfg_velocity(&v_cond, &v_uncond, cfg.cfg_omega)
    } else {
        Ok(v_cond)
    }
}

fn run_sampler<F: VelocityField + ?Sized>(
    field: &F,
    grid: &TimeGrid,
    z0: &[f64],
    c: Condition,
    cfg: &GuidanceConfig,
    mut record: Option<&mut Vec<StepRecord>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = z0.len();
    if field.dim() != d {
        return Err(Error::UnsupportedDimension { got: d, expected: field.dim() });
    }
    if cfg.cfg_omega > 1.0 && c.is_none() {
        return Err(Error::invalid("classifier-free guidance needs a class condition"));
    }
    if z0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite initial point".into()));
    }
    let nodes = grid.nodes();
    let mut z = z0.to_vec();
    // The step-0 velocity seeds the momentum and is reused by step 0.
    let mut v = guided_velocity(field, &z, nodes[0], c, cfg).map_err(|e| e.at_step(0))?;
    let mut state = MomentumState::init(&v, cfg.init_mode(), cfg.beta);
    for i in 0..grid.steps() {
        if i > 0 {
            v = guided_velocity(field, &z, nodes[i], c, cfg).map_err(|e| e.at_step(i))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericAtStep { step: i, detail: "non-finite velocity".into() });
        }
        let (z_next, eff) = mg_step(&z, &v, &mut state, grid.dt(i), cfg, nodes[i]).map_err(|e| e.at_step(i))?;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(StepRecord::new(nodes[i], z, eff.v_guided, eff.m, eff.g));
        }
        z = z_next;
    }
    Ok(z)
}

/// Guided sampling with a full per-step record.
pub fn sample_mg<F: VelocityField + ?Sized>(
    field: &F,
    grid: &TimeGrid,
    z0: &[f64],
    c: Condition,
    cfg: &GuidanceConfig,
) -> Result<TrajectoryRecord> {
    let mut steps = Vec::with_capacity(grid.steps());
    let endpoint = run_sampler(field, grid, z0, c, cfg, Some(&mut steps))?;
    Ok(TrajectoryRecord { dim: z0.len(), steps, endpoint })
}

/// Guided sampling returning only `z_N`.
pub fn sample_mg_endpoint<F: VelocityField + ?Sized>(
    field: &F,
    grid: &TimeGrid,
    z0: &[f64],
    c: Condition,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    run_sampler(field, grid, z0, c, cfg, None)
}
