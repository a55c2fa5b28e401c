//! Closed-form ground truth for Gaussian-mixture targets.
//!
//! For data `X1 ~ sum_k w_k N(mu_k, Sigma_k)` and independent noise
//! `X0 ~ N(0, I)`, the interpolant `X_t = t X1 + (1 - t) X0` is again a
//! mixture with components `N(t mu_k, S_k)`, `S_k = t^2 Sigma_k + (1 - t)^2 I`.
//! Everything the samplers need (marginal density, score, optimal velocity
//! `E[X1 - X0 | X_t = x]`) follows from Gaussian conditioning per component
//! and a responsibility-weighted blend.
//!
//! Velocities are computed in each covariance's eigenbasis, which is fixed in
//! `t`. Densities and scores of [`MarginalMixture`] go through an independent
//! Cholesky route so the two can check each other.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Condition, VelocityField};
use crate::rng::standard_normal;

/// Added to every `S_k` before inversion.
pub const COV_REGULARIZATION: f64 = 1e-12;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// On-disk mixture definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureFile {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dim: usize,
    /// Declared class count; labels must then cover `0..n_classes`.
    #[serde(default)]
    pub n_classes: Option<usize>,
    pub components: Vec<ComponentSpec>,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub class: usize,
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    log_weight: f64,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    class: usize,
    /// Eigenvalues of `cov`, clamped at zero.
    eigvals: Vec<f64>,
    /// Row-major `d x d`; column `j` is the eigenvector of `eigvals[j]`.
    eigvecs: Vec<f64>,
}

/// Class-labeled Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    n_classes: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Builds and validates a mixture from `(weight, mean, cov, class)` parts.
    pub fn new(dim: usize, specs: &[ComponentSpec]) -> Result<Self> {
        Self::from_file(&MixtureFile { version: 1, dim, n_classes: None, components: specs.to_vec() })
    }

    pub fn from_file(file: &MixtureFile) -> Result<Self> {
        let d = file.dim;
        if d == 0 {
            return Err(Error::Config("mixture dim must be positive".into()));
        }
        if file.components.is_empty() {
            return Err(Error::Config("mixture has no components".into()));
        }
        let mut components = Vec::with_capacity(file.components.len());
        for (k, spec) in file.components.iter().enumerate() {
            components.push(build_component(k, d, spec)?);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1 (tolerance {WEIGHT_SUM_TOL:e})"
            )));
        }
        let max_label = components.iter().map(|c| c.class).max().unwrap_or(0);
        let n_classes = file.n_classes.unwrap_or(max_label + 1);
        if max_label >= n_classes {
            return Err(Error::Config(format!("class label {max_label} outside declared n_classes = {n_classes}")));
        }
        for class in 0..n_classes {
            if !components.iter().any(|c| c.class == class) {
                return Err(Error::Config(format!("class {class} has no component")));
            }
        }
        Ok(Self { dim: d, n_classes, components })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MixtureFile = toml::from_str(text).map_err(|e| Error::Config(format!("mixture file: {e}")))?;
        Self::from_file(&file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_file(&self) -> MixtureFile {
        MixtureFile {
            version: 1,
            dim: self.dim,
            n_classes: Some(self.n_classes),
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    weight: c.weight,
                    mean: c.mean.clone(),
                    cov: (0..self.dim).map(|i| (0..self.dim).map(|j| c.cov[(i, j)]).collect()).collect(),
                    class: c.class,
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn component_mean(&self, k: usize) -> &[f64] {
        &self.components[k].mean
    }

    pub fn component_class(&self, k: usize) -> usize {
        self.components[k].class
    }

    /// Largest covariance eigenvalue of component `k`.
    pub fn component_max_variance(&self, k: usize) -> f64 {
        self.components[k].eigvals.iter().cloned().fold(0.0, f64::max)
    }

    /// Total weight of `class`.
    pub fn class_prior(&self, class: usize) -> f64 {
        self.components.iter().filter(|c| c.class == class).map(|c| c.weight).sum()
    }

    /// Same mixture with `epsilon * I` added to every covariance.
    pub fn inflated(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let mut out = self.clone();
        for c in &mut out.components {
            for i in 0..self.dim {
                c.cov[(i, i)] += epsilon;
            }
            for l in &mut c.eigvals {
                *l += epsilon;
            }
        }
        Ok(out)
    }

    /// Analytic mean and covariance of the mixture.
    pub fn moments(&self) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for c in &self.components {
            mean += DVector::from_column_slice(&c.mean) * c.weight;
        }
        let mut cov = DMatrix::zeros(d, d);
        for c in &self.components {
            let dm = DVector::from_column_slice(&c.mean) - &mean;
            cov += (&c.cov + &dm * dm.transpose()) * c.weight;
        }
        (mean.as_slice().to_vec(), cov)
    }

    /// Mixture restricted to one class, weights renormalized.
    pub fn class_conditional(&self, class: usize) -> Result<Self> {
        self.check_class(Some(class))?;
        let prior = self.class_prior(class);
        let components = self
            .components
            .iter()
            .filter(|c| c.class == class)
            .map(|c| {
                let mut c = c.clone();
                c.weight /= prior;
                c.log_weight = c.weight.ln();
                c
            })
            .collect();
        Ok(Self { dim: self.dim, n_classes: self.n_classes, components })
    }

    fn check_class(&self, c: Condition) -> Result<()> {
        match c {
            Some(class) if class >= self.n_classes => {
                Err(Error::invalid(format!("class {class} outside 0..{}", self.n_classes)))
            }
            _ => Ok(()),
        }
    }

    /// One draw from the mixture (restricted to `class` if given); returns the
    /// point and the class of the component it came from.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, class: Condition) -> (Vec<f64>, usize) {
        let total = match class {
            Some(c) => self.class_prior(c),
            None => 1.0,
        };
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (k, comp) in self.components.iter().enumerate() {
            if class.is_some_and(|c| comp.class != c) {
                continue;
            }
            pick = Some(k);
            acc += comp.weight;
            if u < acc {
                break;
            }
        }
        let comp = &self.components[pick.expect("class has a component")];
        let z = standard_normal(rng, self.dim);
        let d = self.dim;
        let mut x = comp.mean.clone();
        for j in 0..d {
            let scale = comp.eigvals[j].sqrt() * z[j];
            for (i, xi) in x.iter_mut().enumerate() {
                *xi += comp.eigvecs[i * d + j] * scale;
            }
        }
        (x, comp.class)
    }

    /// The marginal law of `X_t`.
    pub fn marginal_at(&self, t: f64) -> Result<MarginalMixture> {
        check_time(t)?;
        let d = self.dim;
        let noise = (1.0 - t) * (1.0 - t);
        let components = self
            .components
            .iter()
            .map(|c| MarginalComponent {
                weight: c.weight,
                mean: c.mean.iter().map(|m| t * m).collect(),
                cov: &c.cov * (t * t) + DMatrix::identity(d, d) * noise,
                class: c.class,
            })
            .collect();
        Ok(MarginalMixture { t, dim: d, components })
    }

    /// Log of `w_k N(x; t mu_k, S_k)` for every component admitted by `c`,
    /// together with the component's conditional velocity.
    fn component_terms(
        &self,
        x: &[f64],
        t: f64,
        c: Condition,
        mut visit: impl FnMut(usize, f64, &[f64]),
    ) -> Result<()> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::UnsupportedDimension { got: x.len(), expected: d });
        }
        check_time(t)?;
        self.check_class(c)?;
        let noise = (1.0 - t) * (1.0 - t);
        let half_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
        let mut yq = vec![0.0; d];
        let mut coef = vec![0.0; d];
        let mut vk = vec![0.0; d];
        for (k, comp) in self.components.iter().enumerate() {
            if c.is_some_and(|class| comp.class != class) {
                continue;
            }
            let mut quad = 0.0;
            let mut log_det = 0.0;
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += comp.eigvecs[i * d + j] * (x[i] - t * comp.mean[i]);
                }
                yq[j] = acc;
                let base = t * t * comp.eigvals[j] + noise;
                if !(base > 0.0) {
                    return Err(Error::PoleAtData { component: k, t });
                }
                let s = base + COV_REGULARIZATION;
                quad += acc * acc / s;
                log_det += s.ln();
                coef[j] = (t * comp.eigvals[j] - (1.0 - t)) / s * acc;
            }
            for i in 0..d {
                let mut acc = comp.mean[i];
                for j in 0..d {
                    acc += comp.eigvecs[i * d + j] * coef[j];
                }
                vk[i] = acc;
            }
            let log_p = comp.log_weight - 0.5 * quad - 0.5 * log_det - half_log_2pi;
            visit(k, log_p, &vk);
        }
        Ok(())
    }

    /// Posterior component responsibilities at `(x, t)`, restricted to class
    /// `c` if given. Components outside the class get zero.
    pub fn responsibilities(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let mut log_p = vec![f64::NEG_INFINITY; self.components.len()];
        self.component_terms(x, t, c, |k, lp, _| log_p[k] = lp)?;
        normalize_log_weights(&mut log_p);
        Ok(log_p)
    }

    /// Posterior class probabilities `P(c | X_t = x)`.
    pub fn class_posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let r = self.responsibilities(x, t, None)?;
        let mut out = vec![0.0; self.n_classes];
        for (k, comp) in self.components.iter().enumerate() {
            out[comp.class] += r[k];
        }
        Ok(out)
    }

    /// Exact optimal velocity `E[X1 - X0 | X_t = x, c]`.
    pub fn optimal_velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.velocity_into(x, t, c, &mut out)?;
        Ok(out)
    }

    /// Marginal velocity over all classes.
    pub fn unconditional_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.optimal_velocity(x, t, None)
    }

    fn velocity_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let mut log_p = Vec::with_capacity(self.components.len());
        let mut vel = Vec::with_capacity(self.components.len() * d);
        self.component_terms(x, t, c, |_, lp, vk| {
            log_p.push(lp);
            vel.extend_from_slice(vk);
        })?;
        normalize_log_weights(&mut log_p);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (k, r) in log_p.iter().enumerate() {
            for i in 0..d {
                out[i] += r * vel[k * d + i];
            }
        }
        Ok(())
    }

    /// Kernel-regression estimate of `E[X1 - X0 | X_t ~ x]` from `n_pairs`
    /// independent draws, for validating [`GaussianMixture::optimal_velocity`].
    pub fn mc_velocity<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        t: f64,
        c: Condition,
        n_pairs: usize,
        bandwidth: f64,
        rng: &mut R,
    ) -> Result<McEstimate> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::UnsupportedDimension { got: x.len(), expected: d });
        }
        if n_pairs < MC_MIN_PAIRS {
            return Err(Error::invalid(format!("n_pairs must be >= {MC_MIN_PAIRS}")));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!("mc oracle needs t in (0, 1), got {t}")));
        }
        self.check_class(c)?;
        let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut sum_w = 0.0;
        let mut sum_w2 = 0.0;
        let mut sum_wy = vec![0.0; d];
        let mut sum_w2y = vec![0.0; d];
        let mut sum_w2y2 = vec![0.0; d];
        let mut y = vec![0.0; d];
        for _ in 0..n_pairs {
            let x0 = standard_normal(rng, d);
            let (x1, _) = self.sample(rng, c);
            let mut r2 = 0.0;
            for i in 0..d {
                let xt = t * x1[i] + (1.0 - t) * x0[i];
                r2 += (xt - x[i]) * (xt - x[i]);
                y[i] = x1[i] - x0[i];
            }
            let w = (-r2 * inv_two_h2).exp();
            if w == 0.0 {
                continue;
            }
            sum_w += w;
            sum_w2 += w * w;
            for i in 0..d {
                sum_wy[i] += w * y[i];
                sum_w2y[i] += w * w * y[i];
                sum_w2y2[i] += w * w * y[i] * y[i];
            }
        }
        // Kish size alone is blind to uniformly tiny weights, so a total
        // kernel mass below one draw counts as no overlap at all.
        let ess = if sum_w >= 1.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
        if !(ess >= MC_MIN_ESS) {
            return Err(Error::InsufficientOverlap { ess, min: MC_MIN_ESS });
        }
        let velocity: Vec<f64> = sum_wy.iter().map(|s| s / sum_w).collect();
        let stderr = (0..d)
            .map(|i| {
                let m = velocity[i];
                let num = sum_w2y2[i] - 2.0 * m * sum_w2y[i] + m * m * sum_w2;
                (num.max(0.0)).sqrt() / sum_w
            })
            .collect();
        Ok(McEstimate { velocity, stderr, ess })
    }

    /// Residual of the score/velocity identity
    /// `score = (t v - x) / (1 - t)` at `(x, t)`.
    pub fn score_velocity_identity_check(&self, x: &[f64], t: f64) -> Result<IdentityResidual> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::invalid(format!("identity needs t in [0, 1), got {t}")));
        }
        let v = self.unconditional_velocity(x, t)?;
        let (_, score) = self.marginal_at(t)?.log_density_and_score(x)?;
        let mut res2 = 0.0;
        let mut score2 = 0.0;
        for i in 0..self.dim {
            let implied = (t * v[i] - x[i]) / (1.0 - t);
            res2 += (implied - score[i]).powi(2);
            score2 += score[i] * score[i];
        }
        Ok(IdentityResidual { residual: res2.sqrt(), score_norm: score2.sqrt() })
    }
}

/// Smallest accepted Monte-Carlo sample count.
pub const MC_MIN_PAIRS: usize = 1000;
/// Smallest accepted kernel effective sample size.
pub const MC_MIN_ESS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub velocity: Vec<f64>,
    /// Per-coordinate standard error of the self-normalized estimate.
    pub stderr: Vec<f64>,
    /// Kish effective sample size of the kernel weights; 0 when their total
    /// mass is below one draw.
    pub ess: f64,
}

impl McEstimate {
    /// True if every coordinate of `v` is within `z` standard errors.
    pub fn agrees_with(&self, v: &[f64], z: f64) -> bool {
        self.velocity.iter().zip(&self.stderr).zip(v).all(|((m, s), v)| (m - v).abs() <= z * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResidual {
    pub residual: f64,
    pub score_norm: f64,
}

impl IdentityResidual {
    /// Residual relative to `1 + |score|`.
    pub fn relative(&self) -> f64 {
        self.residual / (1.0 + self.score_norm)
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("t must lie in [0, 1], got {t}")))
    }
}

/// In place: log-weights to normalized weights.
fn normalize_log_weights(log_p: &mut [f64]) {
    let max = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for lp in log_p.iter_mut() {
        *lp = (*lp - max).exp();
        total += *lp;
    }
    for lp in log_p.iter_mut() {
        *lp /= total;
    }
}

fn build_component(k: usize, d: usize, spec: &ComponentSpec) -> Result<Component> {
    let bad = |msg: String| Error::Config(format!("component {k}: {msg}"));
    if !(spec.weight > 0.0) || !spec.weight.is_finite() {
        return Err(bad(format!("weight must be positive, got {}", spec.weight)));
    }
    if spec.mean.len() != d || spec.mean.iter().any(|m| !m.is_finite()) {
        return Err(bad(format!("mean must have {d} finite entries")));
    }
    if spec.cov.len() != d || spec.cov.iter().any(|row| row.len() != d) {
        return Err(bad(format!("cov must be {d}x{d}")));
    }
    let cov = DMatrix::from_fn(d, d, |i, j| spec.cov[i][j]);
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(bad("cov has non-finite entries".into()));
    }
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (cov[(i, j)], cov[(j, i)]);
            if (a - b).abs() > PSD_TOL * a.abs().max(b.abs()).max(1.0) {
                return Err(bad("cov is not symmetric".into()));
            }
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    if let Some(min) = eig.eigenvalues.iter().cloned().reduce(f64::min) {
        if min < -PSD_TOL {
            return Err(bad(format!("cov is not PSD (eigenvalue {min:e})")));
        }
    }
    let mut eigvecs = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            eigvecs[i * d + j] = eig.eigenvectors[(i, j)];
        }
    }
    Ok(Component {
        weight: spec.weight,
        log_weight: spec.weight.ln(),
        mean: spec.mean.clone(),
        cov,
        class: spec.class,
        eigvals: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
        eigvecs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub class: usize,
}

/// Law of `X_t`: components `N(t mu_k, t^2 Sigma_k + (1 - t)^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMixture {
    pub t: f64,
    pub dim: usize,
    pub components: Vec<MarginalComponent>,
}

impl MarginalMixture {
    /// `log pi_t(x)` and `grad log pi_t(x)`.
    pub fn log_density_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim;
        if x.len() != d {
            return Err(Error::UnsupportedDimension { got: x.len(), expected: d });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite point".into()));
        }
        let xv = DVector::from_column_slice(x);
        let mut log_terms = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(self.components.len());
        for (k, comp) in self.components.iter().enumerate() {
            let s = &comp.cov + DMatrix::identity(d, d) * COV_REGULARIZATION;
            let chol =
                s.cholesky().ok_or_else(|| Error::Numeric(format!("component {k}: degenerate marginal covariance")))?;
            let y = &xv - DVector::from_column_slice(&comp.mean);
            let sol = chol.solve(&y);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|l| l.ln()).sum::<f64>();
            let log_p = comp.weight.ln() - 0.5 * y.dot(&sol) - 0.5 * log_det - 0.5 * d as f64 * (2.0 * PI).ln();
            log_terms.push(log_p);
            scores.push(-sol);
        }
        let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
        let log_density = max + total.ln();
        let mut score = DVector::zeros(d);
        for (l, s) in log_terms.iter().zip(&scores) {
            score += s * ((l - log_density).exp());
        }
        Ok((log_density, score.as_slice().to_vec()))
    }

    /// The marginal as a mixture in its own right.
    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        let specs: Vec<ComponentSpec> = self
            .components
            .iter()
            .map(|c| ComponentSpec {
                weight: c.weight,
                mean: c.mean.clone(),
                cov: (0..self.dim).map(|i| (0..self.dim).map(|j| c.cov[(i, j)]).collect()).collect(),
                class: c.class,
            })
            .collect();
        GaussianMixture::new(self.dim, &specs)
    }
}

impl VelocityField for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        self.velocity_into(x, t, c, out)
    }
}

/// Optimal velocity of the mixture with `epsilon * I` added to every
/// covariance: a deterministic, deliberately oversmoothed field.
#[derive(Debug, Clone)]
pub struct SmoothedField {
    epsilon: f64,
    inflated: GaussianMixture,
}

impl SmoothedField {
    pub fn new(gmm: &GaussianMixture, epsilon: f64) -> Result<Self> {
        Ok(Self { epsilon, inflated: gmm.inflated(epsilon)? })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.inflated
    }
}

impl VelocityField for SmoothedField {
    fn dim(&self) -> usize {
        self.inflated.dim
    }

    fn evaluate_into(&self, x: &[f64], t: f64, c: Condition, out: &mut [f64]) -> Result<()> {
        self.inflated.velocity_into(x, t, c, out)
    }
}

/// One-shot form of [`SmoothedField`].
pub fn smoothed_velocity(gmm: &GaussianMixture, x: &[f64], t: f64, epsilon: f64, c: Condition) -> Result<Vec<f64>> {
    gmm.inflated(epsilon)?.optimal_velocity(x, t, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};

    pub(crate) fn iso(weight: f64, mean: &[f64], var: f64, class: usize) -> ComponentSpec {
        let d = mean.len();
        ComponentSpec {
            weight,
            mean: mean.to_vec(),
            cov: (0..d).map(|i| (0..d).map(|j| if i == j { var } else { 0.0 }).collect()).collect(),
            class,
        }
    }

    fn std_normal_2d() -> GaussianMixture {
        GaussianMixture::new(2, &[iso(1.0, &[0.0, 0.0], 1.0, 0)]).unwrap()
    }

    fn two_component() -> GaussianMixture {
        GaussianMixture::new(
            2,
            &[
                ComponentSpec {
                    weight: 0.3,
                    mean: vec![1.0, -0.5],
                    cov: vec![vec![0.2, 0.05], vec![0.05, 0.1]],
                    class: 0,
                },
                iso(0.7, &[-0.8, 0.6], 0.05, 1),
            ],
        )
        .unwrap()
    }

    fn fixture() -> GaussianMixture {
        GaussianMixture::from_toml_str(include_str!("../../../configs/tree2d.toml")).unwrap()
    }

    #[test]
    fn fixture_loads() {
        let g = fixture();
        assert_eq!((g.dim(), g.n_classes(), g.n_components()), (2, 2, 16));
        assert!((g.class_prior(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        let bad_weights = [iso(0.5, &[0.0], 1.0, 0), iso(0.4, &[1.0], 1.0, 0)];
        let err = GaussianMixture::new(1, &bad_weights).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("weights sum")), "{err}");

        let not_psd =
            ComponentSpec { weight: 1.0, mean: vec![0.0, 0.0], cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]], class: 0 };
        assert!(GaussianMixture::new(2, &[not_psd]).is_err());

        let asym =
            ComponentSpec { weight: 1.0, mean: vec![0.0, 0.0], cov: vec![vec![1.0, 0.1], vec![0.0, 1.0]], class: 0 };
        assert!(GaussianMixture::new(2, &[asym]).is_err());

        let gap = [iso(0.5, &[0.0], 1.0, 0), iso(0.5, &[1.0], 1.0, 2)];
        assert!(GaussianMixture::new(1, &gap).is_err());
    }

    #[test]
    fn marginal_endpoints() {
        let g = two_component();
        let m0 = g.marginal_at(0.0).unwrap();
        for c in &m0.components {
            assert_eq!(c.mean, vec![0.0, 0.0]);
            assert_eq!(c.cov, DMatrix::identity(2, 2));
        }
        let m1 = g.marginal_at(1.0).unwrap();
        for (k, c) in m1.components.iter().enumerate() {
            assert_eq!(c.mean, g.components[k].mean);
            assert_eq!(c.cov, g.components[k].cov);
        }
        assert!(g.marginal_at(1.5).is_err());
        assert!(g.marginal_at(-0.1).is_err());
    }

    #[test]
    fn point_mass_marginal_is_gaussian_kernel() {
        let g = GaussianMixture::new(2, &[iso(1.0, &[2.0, -1.0], 0.0, 0)]).unwrap();
        let m = g.marginal_at(0.25).unwrap();
        assert_eq!(m.components[0].mean, vec![0.5, -0.25]);
        assert_eq!(m.components[0].cov, DMatrix::identity(2, 2) * 0.5625);
    }

    #[test]
    fn marginal_at_zero_is_standard_normal_in_moments() {
        let (mean, cov) = fixture().marginal_at(0.0).unwrap().to_mixture().unwrap().moments();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        assert!((cov - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn standard_normal_scores() {
        let g = std_normal_2d();
        let x = [0.7, -1.3];
        let (_, s) = g.marginal_at(1.0).unwrap().log_density_and_score(&x).unwrap();
        assert!((s[0] + 0.7).abs() < 1e-10 && (s[1] - 1.3).abs() < 1e-10);
        for t in [0.1, 0.5, 0.8] {
            let (_, s) = g.marginal_at(t).unwrap().log_density_and_score(&x).unwrap();
            let var = t * t + (1.0 - t) * (1.0 - t);
            for i in 0..2 {
                assert!((s[i] + x[i] / var).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let g = two_component();
        let mut rng = substream(1, Domain::Probe, 0, 0);
        for _ in 0..20 {
            let t: f64 = rng.random_range(0.05..0.95);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let m = g.marginal_at(t).unwrap();
            let (_, s) = m.log_density_and_score(&x).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd =
                    (m.log_density_and_score(&xp).unwrap().0 - m.log_density_and_score(&xm).unwrap().0) / (2.0 * h);
                assert!((fd - s[i]).abs() <= 1e-4 * s[i].abs().max(1.0), "{fd} vs {}", s[i]);
            }
        }
    }

    #[test]
    fn gaussian_velocity_closed_form() {
        let g = std_normal_2d();
        for &t in &[0.0, 0.2, 0.5, 0.9, 1.0] {
            let x = [0.4, -1.1];
            let v = g.optimal_velocity(&x, t, Some(0)).unwrap();
            let k = (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t));
            for i in 0..2 {
                assert!((v[i] - k * x[i]).abs() < 1e-10, "t={t}: {} vs {}", v[i], k * x[i]);
            }
        }
    }

    #[test]
    fn data_estimate_is_posterior_mean() {
        // x + (1 - t) v equals E[X1 | X_t = x] = t x / (t^2 + (1 - t)^2).
        let g = std_normal_2d();
        for &t in &[0.1, 0.3, 0.6, 0.95] {
            let x = [0.9, 0.2];
            let v = g.optimal_velocity(&x, t, None).unwrap();
            let est = crate::flow::data_estimate(&x, t, &v);
            let denom = t * t + (1.0 - t) * (1.0 - t);
            for i in 0..2 {
                assert!((est[i] - t * x[i] / denom).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn velocity_at_time_zero_is_mean_minus_point() {
        let g = fixture();
        let x = [0.8, -0.3];
        for c in [None, Some(0), Some(1)] {
            let v = g.optimal_velocity(&x, 0.0, c).unwrap();
            let target = match c {
                Some(class) => g.class_conditional(class).unwrap().moments().0,
                None => g.moments().0,
            };
            for i in 0..2 {
                assert!((v[i] - (target[i] - x[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn point_mass_pole_at_one() {
        let g = GaussianMixture::new(1, &[iso(1.0, &[1.0], 0.0, 0)]).unwrap();
        assert!(matches!(g.optimal_velocity(&[0.5], 1.0, None), Err(Error::PoleAtData { component: 0, .. })));
        assert!(g.optimal_velocity(&[0.5], 0.999, None).unwrap()[0].is_finite());
    }

    #[test]
    fn responsibilities_are_a_distribution() {
        let g = fixture();
        let mut rng = substream(2, Domain::Probe, 0, 0);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.0..1.0);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            for c in [None, Some(0), Some(1)] {
                let r = g.responsibilities(&x, t, c).unwrap();
                assert!(r.iter().all(|&p| p >= 0.0));
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_class_unconditional_equals_conditional() {
        let g = GaussianMixture::new(2, &[iso(0.4, &[1.0, 0.0], 0.1, 0), iso(0.6, &[0.0, 1.0], 0.2, 0)]).unwrap();
        let x = [0.3, 0.1];
        assert_eq!(g.optimal_velocity(&x, 0.4, Some(0)).unwrap(), g.unconditional_velocity(&x, 0.4).unwrap());
    }

    #[test]
    fn symmetric_mixture_has_no_drift_along_axis_at_origin() {
        let g = GaussianMixture::new(2, &[iso(0.5, &[1.5, 0.5], 0.1, 0), iso(0.5, &[-1.5, -0.5], 0.1, 1)]).unwrap();
        for t in [0.2, 0.5, 0.9] {
            let v = g.unconditional_velocity(&[0.0, 0.0], t).unwrap();
            assert!((v[0] * 1.5 + v[1] * 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn unconditional_is_posterior_blend_of_classes() {
        let g = fixture();
        let mut rng = substream(3, Domain::Probe, 0, 0);
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.0..0.99);
            let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let post = g.class_posterior(&x, t).unwrap();
            let mut blend = [0.0; 2];
            for (c, p) in post.iter().enumerate() {
                let vc = g.optimal_velocity(&x, t, Some(c)).unwrap();
                for i in 0..2 {
                    blend[i] += p * vc[i];
                }
            }
            let v = g.unconditional_velocity(&x, t).unwrap();
            for i in 0..2 {
                assert!((v[i] - blend[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn smoothed_velocity_limits() {
        let g = fixture();
        let x = [0.3, 0.6];
        let exact = g.optimal_velocity(&x, 0.7, Some(0)).unwrap();
        assert_eq!(smoothed_velocity(&g, &x, 0.7, 0.0, Some(0)).unwrap(), exact);
        let near = smoothed_velocity(&g, &x, 0.7, 1e-9, Some(0)).unwrap();
        assert!((near[0] - exact[0]).abs() < 1e-6 && (near[1] - exact[1]).abs() < 1e-6);

        let point = GaussianMixture::new(2, &[iso(1.0, &[1.0, 2.0], 0.0, 0)]).unwrap();
        let gauss = GaussianMixture::new(2, &[iso(1.0, &[1.0, 2.0], 0.3, 0)]).unwrap();
        assert_eq!(
            smoothed_velocity(&point, &x, 0.6, 0.3, None).unwrap(),
            gauss.optimal_velocity(&x, 0.6, None).unwrap()
        );
        assert!(smoothed_velocity(&g, &x, 0.5, -1.0, None).is_err());
    }

    #[test]
    fn identity_holds_for_single_gaussian() {
        let g = two_component().class_conditional(1).unwrap();
        let mut rng = substream(4, Domain::Probe, 0, 0);
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.0..0.99);
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let r = g.score_velocity_identity_check(&x, t).unwrap();
            // the 1e-12 regularization contributes 1e-12 / (1 - t) * |score|
            assert!(r.relative() < 1e-9, "t={t} x={x:?} {r:?}");
        }
        let r = std_normal_2d().score_velocity_identity_check(&[1.2, -0.4], 0.0).unwrap();
        assert!(r.residual < 1e-11);
    }

    #[test]
    fn mc_oracle_standard_normal_midpoint() {
        let g = std_normal_2d();
        let mut rng = substream(5, Domain::Oracle, 0, 0);
        let est = g.mc_velocity(&[1.0, 0.0], 0.5, None, 200_000, 0.05, &mut rng).unwrap();
        assert!(est.agrees_with(&[0.0, 0.0], 3.0), "{est:?}");
    }

    #[test]
    fn mc_oracle_rejects_collapsed_support() {
        let g = GaussianMixture::new(2, &[iso(0.5, &[1.0, 0.0], 0.0, 0), iso(0.5, &[-1.0, 0.0], 0.0, 0)]).unwrap();
        let mut rng = substream(6, Domain::Oracle, 0, 0);
        let err = g.mc_velocity(&[0.0, 0.3], 0.999, None, 5000, 0.05, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientOverlap { .. }));
        assert!(g.mc_velocity(&[0.0, 0.3], 0.5, None, 10, 0.05, &mut rng).is_err());
    }

    #[test]
    fn sampling_matches_moments() {
        let g = two_component();
        let mut rng = substream(8, Domain::Reference, 0, 0);
        let n = 100_000;
        let mut mean = [0.0; 2];
        let mut counts = [0usize; 2];
        for _ in 0..n {
            let (x, c) = g.sample(&mut rng, None);
            mean[0] += x[0] / n as f64;
            mean[1] += x[1] / n as f64;
            counts[c] += 1;
        }
        let (m, _) = g.moments();
        assert!((mean[0] - m[0]).abs() < 0.02 && (mean[1] - m[1]).abs() < 0.02);
        assert!((counts[0] as f64 / n as f64 - 0.3).abs() < 0.01);
        for _ in 0..100 {
            assert_eq!(g.sample(&mut rng, Some(1)).1, 1);
        }
    }
}
