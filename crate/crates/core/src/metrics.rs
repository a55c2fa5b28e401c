//! Sample-set metrics: Gaussian-fit Fréchet distance on raw coordinates,
//! k-NN precision/recall and an unbiased RBF-kernel MMD².
//!
//! All pairwise loops reduce per row and then sum rows in index order, so the
//! results are identical under every [`ExecPolicy`].

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::csvfmt::num;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;

/// Tolerance for negative eigenvalues / determinants in the matrix square root.
pub const SQRT_PSD_TOL: f64 = 1e-9;

/// Points in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    coords: Vec<f64>,
    labels: Option<Vec<usize>>,
    pub provenance: String,
}

impl SampleSet {
    pub fn from_flat(
        dim: usize,
        coords: Vec<f64>,
        labels: Option<Vec<usize>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::invalid("coordinate buffer is not a whole number of points"));
        }
        if coords.is_empty() {
            return Err(Error::EmptySet("sample set has no points".into()));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("sample set has non-finite coordinates".into()));
        }
        if let Some(l) = &labels {
            if l.len() != coords.len() / dim {
                return Err(Error::invalid("label count differs from point count"));
            }
        }
        Ok(Self { dim, coords, labels, provenance: provenance.into() })
    }

    pub fn from_points(points: &[Vec<f64>], provenance: impl Into<String>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("points differ in dimension"));
        }
        Self::from_flat(dim.max(1), points.concat(), None, provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// `x_0..x_{d-1},class`; the class column is empty for unlabeled sets.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x_{j}")).collect();
        header.push("class".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, p) in self.points().enumerate() {
            let mut row: Vec<String> = p.iter().map(|&x| num(x)).collect();
            row.push(self.labels.as_ref().map_or(String::new(), |l| l[i].to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Mean and unbiased (`n - 1`) covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let n = self.len();
        let mut mean = DVector::zeros(d);
        for p in self.points() {
            for j in 0..d {
                mean[j] += p[j];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for p in self.points() {
            for i in 0..d {
                let di = p[i] - mean[i];
                for j in 0..d {
                    cov[(i, j)] += di * (p[j] - mean[j]);
                }
            }
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        (mean, cov)
    }
}

/// Square root of a 2x2 matrix with nonnegative real eigenvalues (e.g. a
/// PSD matrix or a product of two PSD matrices):
/// `sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
pub fn sqrtm_2x2(m: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let tr = m[0][0] + m[1][1];
    if det < -SQRT_PSD_TOL {
        return Err(Error::Numeric(format!("matrix sqrt: negative determinant {det:e}")));
    }
    let s = det.max(0.0).sqrt();
    let t2 = tr + 2.0 * s;
    if t2 < -SQRT_PSD_TOL {
        return Err(Error::Numeric(format!("matrix sqrt: negative trace {tr:e}")));
    }
    let t = t2.max(0.0).sqrt();
    if t == 0.0 {
        return Ok([[0.0; 2]; 2]);
    }
    Ok([[(m[0][0] + s) / t, m[0][1] / t], [m[1][0] / t, (m[1][1] + s) / t]])
}

/// `tr sqrt(A B)` for PSD `A`, `B`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let d = a.nrows();
    if d == 2 {
        let p = a * b;
        let r = sqrtm_2x2([[p[(0, 0)], p[(0, 1)]], [p[(1, 0)], p[(1, 1)]]])?;
        return Ok(r[0][0] + r[1][1]);
    }
    // tr sqrt(AB) = tr sqrt(A^1/2 B A^1/2), which is symmetric PSD
    let root_a = psd_sqrt(a)?;
    let inner = &root_a * b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    eig.eigenvalues.iter().try_fold(0.0, |acc, &l| {
        if l < -SQRT_PSD_TOL {
            Err(Error::Numeric(format!("matrix sqrt: negative eigenvalue {l:e}")))
        } else {
            Ok(acc + l.max(0.0).sqrt())
        }
    })
}

fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -SQRT_PSD_TOL) {
        return Err(Error::Numeric(format!("covariance has negative eigenvalue {l:e}")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two sample sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
pub fn gaussian_frechet(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::invalid("sample sets differ in dimension"));
    }
    let d = a.dim;
    for (name, s) in [("first", a), ("second", b)] {
        if s.len() < d + 1 {
            return Err(Error::invalid(format!("{name} set needs at least {} points", d + 1)));
        }
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let cross = trace_sqrt_product(&cov_a, &cov_b)?;
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The set with exact duplicate points removed (order: lexicographic).
fn distinct(set: &SampleSet) -> SampleSet {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        set.point(*a)
            .iter()
            .zip(set.point(*b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    idx.sort_by(cmp);
    idx.dedup_by(|a, b| cmp(a, b).is_eq());
    let coords = idx.iter().flat_map(|&i| set.point(i).iter().copied()).collect();
    SampleSet { dim: set.dim, coords, labels: None, provenance: set.provenance.clone() }
}

/// Squared distance from each point of a duplicate-free set, sorted by its
/// first coordinate, to its k-th nearest neighbor in the same set.
fn knn_radii_sq(set: &SampleSet, k: usize, policy: ExecPolicy) -> Vec<f64> {
    let n = set.len();
    policy.map(n, |i| {
        let p = set.point(i);
        // ascending k smallest
        let mut best = vec![f64::INFINITY; k];
        // walk outward; the first-axis gap bounds the distance from below
        let (mut lo, mut hi) = (i, i + 1);
        loop {
            let gap_lo = (lo > 0).then(|| p[0] - set.point(lo - 1)[0]);
            let gap_hi = (hi < n).then(|| set.point(hi)[0] - p[0]);
            let take_lo = match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), Some(b)) => a <= b,
                (Some(_), None) => true,
                (None, Some(_)) => false,
            };
            let j = if take_lo { lo - 1 } else { hi };
            let gap = if take_lo { gap_lo.unwrap() } else { gap_hi.unwrap() };
            if gap * gap >= best[k - 1] {
                break;
            }
            let dist = sq_dist(p, set.point(j));
            if dist < best[k - 1] {
                let mut pos = k - 1;
                while pos > 0 && best[pos - 1] > dist {
                    best[pos] = best[pos - 1];
                    pos -= 1;
                }
                best[pos] = dist;
            }
            if take_lo {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
        // fewer than k neighbors: use the farthest one found
        best.iter().rev().find(|d| d.is_finite()).copied().unwrap_or(0.0)
    })
}

/// Fraction of `queries` inside at least one ball of `centers` (sorted by
/// first coordinate).
fn coverage(centers: &SampleSet, radii_sq: &[f64], queries: &SampleSet, policy: ExecPolicy) -> f64 {
    let reach = radii_sq.iter().cloned().fold(0.0, f64::max).sqrt();
    let first: Vec<f64> = centers.points().map(|c| c[0]).collect();
    let hits = policy.map(queries.len(), |i| {
        let q = queries.point(i);
        let start = first.partition_point(|&x| x < q[0] - reach);
        let end = first.partition_point(|&x| x <= q[0] + reach);
        (start..end).any(|j| sq_dist(q, centers.point(j)) <= radii_sq[j])
    });
    hits.iter().filter(|&&h| h).count() as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall of `fake` against `real`.
pub fn knn_precision_recall(real: &SampleSet, fake: &SampleSet, k: usize, policy: ExecPolicy) -> Result<(f64, f64)> {
    if real.dim != fake.dim {
        return Err(Error::invalid("sample sets differ in dimension"));
    }
    if k == 0 || k >= real.len() || k >= fake.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be positive and below both set sizes ({}, {})",
            real.len(),
            fake.len()
        )));
    }
    // Balls are built on distinct points so duplicated samples neither
    // shrink radii nor count twice as centers.
    let real_centers = distinct(real);
    let fake_centers = distinct(fake);
    let real_radii = knn_radii_sq(&real_centers, k, policy);
    let fake_radii = knn_radii_sq(&fake_centers, k, policy);
    let precision = coverage(&real_centers, &real_radii, fake, policy);
    let recall = coverage(&fake_centers, &fake_radii, real, policy);
    Ok((precision, recall))
}

fn kernel_row_sums(a: &SampleSet, b: &SampleSet, gamma: f64, skip_diag: bool, policy: ExecPolicy) -> f64 {
    let rows = policy.map(a.len(), |i| {
        let p = a.point(i);
        b.points()
            .enumerate()
            .filter(|(j, _)| !(skip_diag && *j == i))
            .map(|(_, q)| (-gamma * sq_dist(p, q)).exp())
            .sum::<f64>()
    });
    rows.iter().sum()
}

/// Unbiased MMD² with kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd2_rbf(a: &SampleSet, b: &SampleSet, bandwidth: f64, policy: ExecPolicy) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::invalid("sample sets differ in dimension"));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (m, n) = (a.len() as f64, b.len() as f64);
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("unbiased MMD needs at least two points per set"));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let aa = kernel_row_sums(a, a, gamma, true, policy) / (m * (m - 1.0));
    let bb = kernel_row_sums(b, b, gamma, true, policy) / (n * (n - 1.0));
    let ab = kernel_row_sums(a, b, gamma, false, policy) / (m * n);
    Ok(aa + bb - 2.0 * ab)
}

/// Every metric for one generated set against a reference set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub mmd2: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub k: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frechet,precision,recall,mmd2,n_real,n_fake,k";

    pub fn compute(
        real: &SampleSet,
        fake: &SampleSet,
        k: usize,
        mmd_bandwidth: f64,
        policy: ExecPolicy,
    ) -> Result<Self> {
        let frechet = gaussian_frechet(real, fake)?;
        let (precision, recall) = knn_precision_recall(real, fake, k, policy)?;
        let mmd2 = mmd2_rbf(real, fake, mmd_bandwidth, policy)?;
        Ok(Self { frechet, precision, recall, mmd2, n_real: real.len(), n_fake: fake.len(), k })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            num(self.frechet),
            num(self.precision),
            num(self.recall),
            num(self.mmd2),
            self.n_real,
            self.n_fake,
            self.k
        )
    }
}
