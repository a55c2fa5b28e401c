//! Experiment configuration files.
//!
//! A config is a TOML document whose field names mirror [`ExperimentConfig`].
//! Relative paths inside it resolve against the directory of the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{make_shifted_grid, make_uniform_grid, Condition, TimeGrid};
use crate::gmm::GaussianMixture;
use crate::guidance::GuidanceConfig;
use crate::mlp::TrainConfig;
use crate::rng::RNG_ALGORITHM;

/// Which velocity field drives the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    /// Closed-form optimal velocity of the mixture.
    #[default]
    Analytic,
    /// Optimal velocity of the mixture with covariances inflated by `epsilon`.
    Smoothed { epsilon: f64 },
    /// Trained network; the parameter average is used unless `ema = false`.
    Mlp {
        checkpoint: PathBuf,
        #[serde(default = "yes")]
        ema: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_steps: usize,
    /// Time shift; 1 gives the uniform grid.
    pub shift: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_steps: 16, shift: 1.0 }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        if self.shift == 1.0 {
            make_uniform_grid(self.n_steps)
        } else {
            make_shifted_grid(self.n_steps, self.shift)
        }
    }
}

/// Grid axes of a sweep. A missing axis takes the single value of the base
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub cfg_omega: Option<Vec<f64>>,
    pub n_steps: Option<Vec<usize>>,
}

/// Fully resolved sweep axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxes {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub cfg_omega: Vec<f64>,
    pub n_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub n_reference: usize,
    pub k: usize,
    pub mmd_bandwidth: f64,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self { n_reference: 8192, k: 3, mmd_bandwidth: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    /// Step at which the quiver panel is drawn; defaults to the middle step.
    pub step_index: Option<usize>,
    /// Quiver lattice points per axis.
    pub lattice: usize,
    /// Trajectories drawn in the baseline and momentum panels.
    pub n_trajectories: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { step_index: None, lattice: 15, n_trajectories: 64 }
    }
}

/// How each trajectory picks its condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditionMode {
    /// Class drawn from the class priors, one per trajectory.
    #[default]
    Prior,
    /// No condition.
    Unconditional,
    /// The fixed class given by `class`.
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generator name; must equal [`RNG_ALGORITHM`].
    #[serde(default = "default_rng")]
    pub rng: String,
    pub seed: u64,
    pub mixture: PathBuf,
    #[serde(default)]
    pub field: FieldSpec,
    /// Weaker field for autoguidance (`guidance.auto_weight`).
    #[serde(default)]
    pub weak_field: Option<FieldSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_trajectories")]
    pub n_trajectories: usize,
    /// Trajectories whose per-step record is written by `sample`.
    #[serde(default = "default_recorded")]
    pub record_trajectories: usize,
    #[serde(default)]
    pub condition: ConditionMode,
    #[serde(default)]
    pub class: Option<usize>,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub toy: ToySpec,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Best sweep cells re-evaluated at 4x sample size.
    #[serde(default = "default_promote")]
    pub promote_top: usize,
}

fn default_rng() -> String {
    RNG_ALGORITHM.into()
}
fn default_trajectories() -> usize {
    8192
}
fn default_recorded() -> usize {
    4
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_promote() -> usize {
    3
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub omega: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Minimal config around a mixture file, everything else at defaults.
    pub fn new(mixture: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            rng: default_rng(),
            seed,
            mixture: mixture.into(),
            field: FieldSpec::default(),
            weak_field: None,
            grid: GridSpec::default(),
            guidance: GuidanceConfig::default(),
            sweep: SweepSpec::default(),
            n_trajectories: default_trajectories(),
            record_trajectories: default_recorded(),
            condition: ConditionMode::default(),
            class: None,
            metrics: MetricsSpec::default(),
            train: TrainConfig::default(),
            toy: ToySpec::default(),
            out: default_out(),
            promote_top: default_promote(),
        }
    }

    /// Parses `text`; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.mixture = base_dir.join(&cfg.mixture);
        cfg.out = base_dir.join(&cfg.out);
        for spec in std::iter::once(&mut cfg.field).chain(cfg.weak_field.as_mut()) {
            if let FieldSpec::Mlp { checkpoint, .. } = spec {
                *checkpoint = base_dir.join(&*checkpoint);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies overrides. A sweep axis named by an override collapses to the
    /// override value; `seed` also reseeds training.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(a) = o.alpha {
            self.guidance.alpha = a;
            self.sweep.alpha = self.sweep.alpha.as_ref().map(|_| vec![a]);
        }
        if let Some(b) = o.beta {
            self.guidance.beta = b;
            self.sweep.beta = self.sweep.beta.as_ref().map(|_| vec![b]);
        }
        if let Some(w) = o.omega {
            self.guidance.cfg_omega = w;
            self.sweep.cfg_omega = self.sweep.cfg_omega.as_ref().map(|_| vec![w]);
        }
        if let Some(n) = o.steps {
            self.grid.n_steps = n;
            self.sweep.n_steps = self.sweep.n_steps.as_ref().map(|_| vec![n]);
        }
        if let Some(s) = o.seed {
            self.seed = s;
            self.train.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rng != RNG_ALGORITHM {
            return bad(format!("rng {:?} is not supported; expected {RNG_ALGORITHM:?}", self.rng));
        }
        self.guidance.validate().map_err(|e| Error::Config(format!("guidance: {e}")))?;
        self.grid.build().map_err(|e| Error::Config(format!("grid: {e}")))?;
        if let FieldSpec::Smoothed { epsilon } = self.field {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return bad(format!("smoothed field epsilon must be >= 0, got {epsilon}"));
            }
        }
        if self.guidance.auto_weight.is_some() && self.weak_field.is_none() {
            return bad("guidance.auto_weight needs a weak_field".into());
        }
        match (self.condition, self.class) {
            (ConditionMode::Class, None) => return bad("condition = \"class\" needs `class`".into()),
            (ConditionMode::Prior | ConditionMode::Unconditional, Some(_)) => {
                return bad("`class` is only read with condition = \"class\"".into())
            }
            _ => {}
        }
        if self.condition == ConditionMode::Unconditional && self.guidance.cfg_omega > 1.0 {
            return bad("classifier-free guidance needs conditioned trajectories".into());
        }
        let m = &self.metrics;
        if m.k == 0 || m.n_reference <= m.k {
            return bad(format!("metrics need k >= 1 and n_reference > k, got k={} n={}", m.k, m.n_reference));
        }
        if !(m.mmd_bandwidth > 0.0 && m.mmd_bandwidth.is_finite()) {
            return bad(format!("mmd_bandwidth must be positive, got {}", m.mmd_bandwidth));
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if self.toy.lattice == 0 {
            return bad("toy.lattice must be positive".into());
        }
        self.sweep_axes().map(|_| ())
    }

    /// Sweep axes with defaults filled in; every axis nonempty and strictly
    /// increasing, every cell a valid guidance setting.
    pub fn sweep_axes(&self) -> Result<SweepAxes> {
        let axes = SweepAxes {
            alpha: self.sweep.alpha.clone().unwrap_or_else(|| vec![self.guidance.alpha]),
            beta: self.sweep.beta.clone().unwrap_or_else(|| vec![self.guidance.beta]),
            cfg_omega: self.sweep.cfg_omega.clone().unwrap_or_else(|| vec![self.guidance.cfg_omega]),
            n_steps: self.sweep.n_steps.clone().unwrap_or_else(|| vec![self.grid.n_steps]),
        };
        check_axis("alpha", &axes.alpha)?;
        check_axis("beta", &axes.beta)?;
        check_axis("cfg_omega", &axes.cfg_omega)?;
        let steps: Vec<f64> = axes.n_steps.iter().map(|&n| n as f64).collect();
        check_axis("n_steps", &steps)?;
        for &alpha in &axes.alpha {
            for &beta in &axes.beta {
                for &cfg_omega in &axes.cfg_omega {
                    let g = GuidanceConfig { alpha, beta, cfg_omega, ..self.guidance.clone() };
                    g.validate().map_err(|e| Error::Config(format!("sweep cell: {e}")))?;
                }
            }
        }
        for &n in &axes.n_steps {
            GridSpec { n_steps: n, ..self.grid.clone() }
                .build()
                .map_err(|e| Error::Config(format!("sweep n_steps: {e}")))?;
        }
        Ok(axes)
    }

    pub fn load_mixture(&self) -> Result<GaussianMixture> {
        let g = GaussianMixture::load(&self.mixture).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Config(format!("{}: {other}", self.mixture.display())),
        })?;
        if let Some(c) = self.class {
            if c >= g.n_classes() {
                return Err(Error::Config(format!("class {c} out of range: mixture has {} classes", g.n_classes())));
            }
        }
        if self.guidance.cfg_omega > 1.0 && g.n_classes() == 0 {
            return Err(Error::Config("classifier-free guidance needs a labeled mixture".into()));
        }
        Ok(g)
    }

    /// Fixed condition, or `None` when conditions are drawn per trajectory.
    pub fn fixed_condition(&self) -> Option<Condition> {
        match self.condition {
            ConditionMode::Prior => None,
            ConditionMode::Unconditional => Some(None),
            ConditionMode::Class => Some(self.class),
        }
    }
}

fn check_axis(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("sweep axis {name} is empty")));
    }
    if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("sweep axis {name} must be finite and strictly increasing: {values:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 3
        mixture = "tree2d.toml"
    "#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml_str(BASE, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.rng, RNG_ALGORITHM);
        assert_eq!(cfg.mixture, Path::new("/cfg/tree2d.toml"));
        assert_eq!(cfg.out, Path::new("/cfg/out"));
        assert_eq!(cfg.metrics.n_reference, 8192);
        assert_eq!(cfg.promote_top, 3);
        assert_eq!(cfg.field, FieldSpec::Analytic);
        let axes = cfg.sweep_axes().unwrap();
        assert_eq!(axes.alpha, vec![0.0]);
        assert_eq!(axes.n_steps, vec![16]);
    }

    #[test]
    fn field_variants_parse() {
        let text = format!("{BASE}\n[field]\nkind = \"smoothed\"\nepsilon = 0.1\n");
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new("/c")).unwrap();
        assert_eq!(cfg.field, FieldSpec::Smoothed { epsilon: 0.1 });
        let text = format!("{BASE}\n[field]\nkind = \"mlp\"\ncheckpoint = \"net.json\"\n");
        let cfg = ExperimentConfig::from_toml_str(&text, Path::new("/c")).unwrap();
        assert_eq!(cfg.field, FieldSpec::Mlp { checkpoint: "/c/net.json".into(), ema: true });
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "rng = \"pcg64\"",
            "unknown_key = 1",
            "[sweep]\nalpha = [0.2, 0.2]",
            "[sweep]\nbeta = []",
            "[sweep]\nbeta = [0.5, 1.0]",
            "[guidance]\nalpha = -1.0",
            "condition = \"class\"",
            "condition = \"unconditional\"\n[guidance]\ncfg_omega = 2.0",
            "[metrics]\nk = 0",
            "[guidance]\nauto_weight = 2.0",
            "[grid]\nn_steps = 0",
        ];
        for extra in bad {
            let text = format!("{BASE}\n{extra}\n");
            let err = ExperimentConfig::from_toml_str(&text, Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}: {err:?}");
        }
    }

    #[test]
    fn overrides_collapse_sweep_axes() {
        let text = format!("{BASE}\n[sweep]\nalpha = [0.0, 0.5]\nbeta = [0.2, 0.4]\n");
        let mut cfg = ExperimentConfig::from_toml_str(&text, Path::new(".")).unwrap();
        cfg.apply(&Overrides { alpha: Some(0.3), steps: Some(8), seed: Some(9), ..Default::default() }).unwrap();
        let axes = cfg.sweep_axes().unwrap();
        assert_eq!(axes.alpha, vec![0.3]);
        assert_eq!(axes.beta, vec![0.2, 0.4]);
        assert_eq!(axes.n_steps, vec![8]);
        assert_eq!(cfg.seed, 9);
        assert!(cfg.apply(&Overrides { beta: Some(1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::new("/m.toml", 5);
        cfg.field = FieldSpec::Smoothed { epsilon: 0.1 };
        cfg.sweep.alpha = Some(vec![0.0, 0.2]);
        cfg.out = "/out".into();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml_str(&text, Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }
}
