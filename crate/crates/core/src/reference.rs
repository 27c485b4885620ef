//! Reference priors `p_r(z)`.
//!
//! Gaussian-family kinds (gaussian, gmm, subsampled-gmm, and diffused versions
//! of those) have closed-form densities and scores at every noise level: under
//! the linear path component `k` diffuses to `N(alpha mu_k, alpha^2 Sigma_k + sigma^2 I)`.
//! They serve both as training targets and as oracles for the learned scores.
//! The structured kinds (two-rings, spiral, checkerboard, empirical) can only be
//! sampled.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::math::{self, LN_2PI};
use crate::rng::{self, Rng};
use crate::schedules::NoiseSchedule;
use crate::{Array, Error, Result};

/// Samples with optional per-row component labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub points: Array,
    pub labels: Option<Vec<usize>>,
}

impl Labeled {
    /// Labels as optional classes, for conditioning a velocity net.
    pub fn classes(&self) -> Option<Vec<Option<usize>>> {
        self.labels.as_ref().map(|l| l.iter().map(|&c| Some(c)).collect())
    }
}

/// A Gaussian mixture with full covariances.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// `d x d` symmetric positive definite.
    pub covs: Vec<Array>,
}

impl Gmm {
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, std: f64) -> Self {
        let d = means.first().map_or(0, Vec::len);
        let covs = means.iter().map(|_| Array::identity(d).scale(std * std)).collect();
        Self { weights, means, covs }
    }

    /// `k` equal-weight isotropic components evenly spaced on a circle.
    pub fn ring(k: usize, radius: f64, std: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / k as f64;
                vec![radius * math::cos(a), radius * math::sin(a)]
            })
            .collect();
        Self::isotropic(vec![1.0 / k as f64; k], means, std)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Component `k` on its own.
    pub fn component(&self, k: usize) -> Gmm {
        Gmm {
            weights: vec![1.0],
            means: vec![self.means[k].clone()],
            covs: vec![self.covs[k].clone()],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.is_empty() || d == 0 {
            return Err(Error::InvalidSpec("mixture needs at least one component of positive dimension".into()));
        }
        if self.means.len() != self.len() || self.covs.len() != self.len() {
            return Err(Error::InvalidSpec("weights, means and covariances differ in length".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "mixture weights must be non-negative and sum to 1, got {:?}",
                self.weights
            )));
        }
        for (m, c) in self.means.iter().zip(&self.covs) {
            if m.len() != d || c.shape() != (d, d) {
                return Err(Error::InvalidSpec("component dimensions disagree".into()));
            }
            for i in 0..d {
                for j in 0..i {
                    if (c.get(i, j) - c.get(j, i)).abs() > 1e-12 {
                        return Err(Error::InvalidSpec("covariance is not symmetric".into()));
                    }
                }
            }
            cholesky(c)?;
        }
        Ok(())
    }

    /// The marginal of `alpha z_0 + sigma eps` for `z_0` drawn from this mixture.
    pub fn diffused(&self, schedule: &NoiseSchedule, t: f64) -> Gmm {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let d = self.dim();
        Gmm {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|v| a * v).collect()).collect(),
            covs: self
                .covs
                .iter()
                .map(|c| {
                    let mut out = c.scale(a * a);
                    for i in 0..d {
                        out.set(i, i, out.get(i, i) + s * s);
                    }
                    out
                })
                .collect(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Labeled> {
        let d = self.dim();
        let chols = self.covs.iter().map(cholesky).collect::<Result<Vec<_>>>()?;
        let mut points = Array::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut eps = vec![0.0; d];
        for r in 0..n {
            let k = rng::categorical(rng, &self.weights);
            eps.iter_mut().for_each(|e| *e = rng::normal(rng));
            let l = &chols[k];
            let row = points.row_mut(r);
            for i in 0..d {
                row[i] = self.means[k][i] + (0..=i).map(|j| l.get(i, j) * eps[j]).sum::<f64>();
            }
            labels.push(k);
        }
        Ok(Labeled {
            points,
            labels: Some(labels),
        })
    }

    fn prepare(&self) -> Result<Prepared> {
        let mut comps = Vec::with_capacity(self.len());
        for ((&w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let l = cholesky(c)?;
            let logdet = 2.0 * (0..l.rows()).map(|i| math::ln(l.get(i, i))).sum::<f64>();
            comps.push(PreparedComponent {
                log_weight: if w > 0.0 { math::ln(w) } else { f64::NEG_INFINITY },
                mean: m.clone(),
                precision: spd_inverse(&l),
                log_norm: -0.5 * (self.dim() as f64 * LN_2PI + logdet),
            });
        }
        Ok(Prepared { comps })
    }

    pub fn log_density(&self, z: &Array) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let p = self.prepare()?;
        let mut logs = vec![0.0; self.len()];
        let mut diff = vec![0.0; self.dim()];
        Ok(z.iter_rows()
            .map(|row| {
                for (k, c) in p.comps.iter().enumerate() {
                    logs[k] = c.log_prob(row, &mut diff);
                }
                math::log_sum_exp(&logs)
            })
            .collect())
    }

    /// `grad_z log p(z)`, row by row.
    pub fn score(&self, z: &Array) -> Result<Array> {
        self.check_dim(z)?;
        let p = self.prepare()?;
        let d = self.dim();
        let mut out = Array::zeros(z.rows(), d);
        let mut logs = vec![0.0; self.len()];
        let mut diff = vec![0.0; d];
        for (r, row) in z.iter_rows().enumerate() {
            for (k, c) in p.comps.iter().enumerate() {
                logs[k] = c.log_prob(row, &mut diff);
            }
            let lse = math::log_sum_exp(&logs);
            let o = out.row_mut(r);
            for (k, c) in p.comps.iter().enumerate() {
                let resp = math::exp(logs[k] - lse);
                if resp == 0.0 {
                    continue;
                }
                for i in 0..d {
                    diff[i] = row[i] - c.mean[i];
                }
                for i in 0..d {
                    let pd: f64 = (0..d).map(|j| c.precision.get(i, j) * diff[j]).sum();
                    o[i] -= resp * pd;
                }
            }
        }
        Ok(out)
    }

    fn check_dim(&self, z: &Array) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "gmm_eval",
                left: z.shape(),
                right: (z.rows(), self.dim()),
            });
        }
        Ok(())
    }
}

struct PreparedComponent {
    log_weight: f64,
    mean: Vec<f64>,
    precision: Array,
    log_norm: f64,
}

impl PreparedComponent {
    fn log_prob(&self, z: &[f64], diff: &mut [f64]) -> f64 {
        let d = z.len();
        for i in 0..d {
            diff[i] = z[i] - self.mean[i];
        }
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += diff[i] * self.precision.get(i, j) * diff[j];
            }
        }
        self.log_weight + self.log_norm - 0.5 * quad
    }
}

struct Prepared {
    comps: Vec<PreparedComponent>,
}

/// Lower-triangular `L` with `L L^T = a`.
pub(crate) fn cholesky(a: &Array) -> Result<Array> {
    let n = a.rows();
    let mut l = Array::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let v = a.get(i, i) - s;
                if !(v > 0.0) {
                    return Err(Error::InvalidSpec("covariance is not positive definite".into()));
                }
                l.set(i, i, math::sqrt(v));
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// `(L L^T)^{-1}` from a Cholesky factor.
fn spd_inverse(l: &Array) -> Array {
    let n = l.rows();
    // Invert L by forward substitution, then A^{-1} = L^{-T} L^{-1}.
    let mut linv = Array::zeros(n, n);
    for c in 0..n {
        for i in 0..n {
            let rhs = if i == c { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|k| l.get(i, k) * linv.get(k, c)).sum();
            linv.set(i, c, (rhs - s) / l.get(i, i));
        }
    }
    linv.transpose().matmul(&linv).expect("square factors")
}

/// Reference distribution kinds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ReferenceDistribution {
    Gaussian {
        mean: Vec<f64>,
        cov: Array,
    },
    Gmm(Gmm),
    /// Only the listed components of `base`, with renormalized weights.
    SubsampledGmm {
        base: Gmm,
        keep: Vec<usize>,
    },
    /// Two concentric circles with radial Gaussian noise, equal mass on each.
    TwoRings {
        inner: f64,
        outer: f64,
        noise: f64,
    },
    /// Archimedean spiral `r = radius * theta / (2 pi turns)`.
    Spiral {
        turns: f64,
        radius: f64,
        noise: f64,
    },
    /// Uniform on the "black" cells of a `cells x cells` board over `[-half_width, half_width]^2`.
    Checkerboard {
        cells: usize,
        half_width: f64,
    },
    /// Uniform over a fixed point set.
    Empirical {
        points: Array,
    },
    /// The noisy marginal of `source` at a fixed path time.
    Diffused {
        source: Box<ReferenceDistribution>,
        t: f64,
    },
}

impl ReferenceDistribution {
    pub fn standard_gaussian(d: usize) -> Self {
        ReferenceDistribution::Gaussian {
            mean: vec![0.0; d],
            cov: Array::identity(d),
        }
    }

    /// Eight components of std 0.1 on a radius-2 circle.
    pub fn ring8() -> Self {
        ReferenceDistribution::Gmm(Gmm::ring(8, 2.0, 0.1))
    }

    /// Two opposite modes of the eight-mode ring.
    pub fn ring8_subsampled() -> Self {
        ReferenceDistribution::SubsampledGmm {
            base: Gmm::ring(8, 2.0, 0.1),
            keep: vec![0, 4],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferenceDistribution::Gaussian { .. } => "gaussian",
            ReferenceDistribution::Gmm(_) => "gmm",
            ReferenceDistribution::SubsampledGmm { .. } => "subsampled_gmm",
            ReferenceDistribution::TwoRings { .. } => "two_rings",
            ReferenceDistribution::Spiral { .. } => "spiral",
            ReferenceDistribution::Checkerboard { .. } => "checkerboard",
            ReferenceDistribution::Empirical { .. } => "empirical",
            ReferenceDistribution::Diffused { .. } => "diffused",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ReferenceDistribution::Gaussian { mean, .. } => mean.len(),
            ReferenceDistribution::Gmm(g) | ReferenceDistribution::SubsampledGmm { base: g, .. } => g.dim(),
            ReferenceDistribution::TwoRings { .. }
            | ReferenceDistribution::Spiral { .. }
            | ReferenceDistribution::Checkerboard { .. } => 2,
            ReferenceDistribution::Empirical { points } => points.cols(),
            ReferenceDistribution::Diffused { source, .. } => source.dim(),
        }
    }

    /// Synthetic (data-independent) priors as opposed to structured, feature-like ones.
    pub fn is_synthetic(&self) -> bool {
        matches!(
            self,
            ReferenceDistribution::Gaussian { .. }
                | ReferenceDistribution::Gmm(_)
                | ReferenceDistribution::SubsampledGmm { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ReferenceDistribution::Gaussian { mean, cov } => {
                if mean.is_empty() || cov.shape() != (mean.len(), mean.len()) {
                    return Err(Error::InvalidSpec("gaussian mean/covariance shapes disagree".into()));
                }
                self.as_gmm().expect("gaussian is analytic").validate()
            }
            ReferenceDistribution::Gmm(g) => g.validate(),
            ReferenceDistribution::SubsampledGmm { base, keep } => {
                base.validate()?;
                if keep.is_empty() || keep.iter().any(|&k| k >= base.len()) {
                    return Err(Error::InvalidSpec(format!("subsample indices {keep:?} invalid")));
                }
                Ok(())
            }
            ReferenceDistribution::TwoRings { inner, outer, noise } => {
                if !(*inner > 0.0 && outer > inner && *noise >= 0.0) {
                    return Err(Error::InvalidSpec("two_rings needs 0 < inner < outer, noise >= 0".into()));
                }
                Ok(())
            }
            ReferenceDistribution::Spiral { turns, radius, noise } => {
                if !(*turns > 0.0 && *radius > 0.0 && *noise >= 0.0) {
                    return Err(Error::InvalidSpec("spiral needs positive turns and radius".into()));
                }
                Ok(())
            }
            ReferenceDistribution::Checkerboard { cells, half_width } => {
                if *cells < 2 || !(*half_width > 0.0) {
                    return Err(Error::InvalidSpec("checkerboard needs >= 2 cells and positive width".into()));
                }
                Ok(())
            }
            ReferenceDistribution::Empirical { points } => {
                if points.rows() == 0 || points.cols() == 0 {
                    return Err(Error::InvalidSpec("empirical point set is empty".into()));
                }
                Ok(())
            }
            ReferenceDistribution::Diffused { source, t } => {
                if !(0.0..=1.0).contains(t) {
                    return Err(Error::TimeOutOfRange { t: *t, lo: 0.0, hi: 1.0 });
                }
                source.validate()
            }
        }
    }

    /// Number of label classes returned by [`Self::sample`], if any.
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            ReferenceDistribution::Gmm(g) => Some(g.len()),
            ReferenceDistribution::SubsampledGmm { keep, .. } => Some(keep.len()),
            ReferenceDistribution::TwoRings { .. } => Some(2),
            ReferenceDistribution::Diffused { source, .. } => source.num_classes(),
            _ => None,
        }
    }

    /// The closed-form mixture, for analytic kinds.
    pub fn as_gmm(&self) -> Option<Gmm> {
        match self {
            ReferenceDistribution::Gaussian { mean, cov } => Some(Gmm {
                weights: vec![1.0],
                means: vec![mean.clone()],
                covs: vec![cov.clone()],
            }),
            ReferenceDistribution::Gmm(g) => Some(g.clone()),
            ReferenceDistribution::SubsampledGmm { base, keep } => {
                let total: f64 = keep.iter().map(|&k| base.weights[k]).sum();
                Some(Gmm {
                    weights: keep.iter().map(|&k| base.weights[k] / total).collect(),
                    means: keep.iter().map(|&k| base.means[k].clone()).collect(),
                    covs: keep.iter().map(|&k| base.covs[k].clone()).collect(),
                })
            }
            ReferenceDistribution::Diffused { source, t } => {
                source.as_gmm().map(|g| g.diffused(&NoiseSchedule::default(), *t))
            }
            _ => None,
        }
    }

    pub fn is_analytic(&self) -> bool {
        self.as_gmm().is_some()
    }

    fn analytic_at(&self, t: f64) -> Result<Gmm> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { t, lo: 0.0, hi: 1.0 });
        }
        let g = self.as_gmm().ok_or(Error::NotAnalytic(self.name()))?;
        Ok(if t == 0.0 {
            g
        } else {
            g.diffused(&NoiseSchedule::default(), t)
        })
    }

    /// `grad log p_{r,t}(z)` of the diffused marginal (`t = 0` is the prior itself).
    pub fn analytic_score(&self, z: &Array, t: f64) -> Result<Array> {
        self.analytic_at(t)?.score(z)
    }

    /// Per-row scores with one diffusion time per row.
    pub fn analytic_score_rows(&self, z: &Array, t: &[f64]) -> Result<Array> {
        let mut out = Array::zeros(z.rows(), z.cols());
        for (r, &ti) in t.iter().enumerate() {
            let s = self.analytic_score(&Array::row_vector(z.row(r)), ti)?;
            out.row_mut(r).copy_from_slice(s.row(0));
        }
        Ok(out)
    }

    pub fn log_density(&self, z: &Array, t: f64) -> Result<Vec<f64>> {
        self.analytic_at(t)?.log_density(z)
    }

    /// Class-conditional scores: row `i` uses mixture component `labels[i]` alone.
    pub fn component_score_rows(&self, z: &Array, t: &[f64], labels: &[usize]) -> Result<Array> {
        let g = self.as_gmm().ok_or(Error::NotAnalytic(self.name()))?;
        let s = NoiseSchedule::default();
        let mut out = Array::zeros(z.rows(), z.cols());
        for (r, (&ti, &k)) in t.iter().zip(labels).enumerate() {
            if k >= g.len() {
                return Err(Error::InvalidSpec(format!("component {k} out of range 0..{}", g.len())));
            }
            let sc = g.component(k).diffused(&s, ti).score(&Array::row_vector(z.row(r)))?;
            out.row_mut(r).copy_from_slice(sc.row(0));
        }
        Ok(out)
    }

    /// Mode centers and the common hit scale, for mixture kinds.
    pub fn modes(&self) -> Option<(Vec<Vec<f64>>, f64)> {
        let g = match self {
            ReferenceDistribution::Gmm(_) | ReferenceDistribution::SubsampledGmm { .. } => self.as_gmm()?,
            _ => return None,
        };
        let d = g.dim() as f64;
        let mean_var = g
            .covs
            .iter()
            .map(|c| (0..c.rows()).map(|i| c.get(i, i)).sum::<f64>() / d)
            .sum::<f64>()
            / g.len() as f64;
        Some((g.means.clone(), math::sqrt(mean_var)))
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Labeled> {
        match self {
            ReferenceDistribution::Gaussian { .. } => {
                let mut s = self.as_gmm().expect("analytic").sample(n, rng)?;
                s.labels = None;
                Ok(s)
            }
            ReferenceDistribution::Gmm(g) => g.sample(n, rng),
            ReferenceDistribution::SubsampledGmm { .. } => self.as_gmm().expect("analytic").sample(n, rng),
            ReferenceDistribution::TwoRings { inner, outer, noise } => {
                let mut points = Array::zeros(n, 2);
                let mut labels = Vec::with_capacity(n);
                for r in 0..n {
                    let k = rng::index(rng, 2);
                    let radius = if k == 0 { *inner } else { *outer } + noise * rng::normal(rng);
                    let a = rng::uniform(rng, 0.0, 2.0 * PI);
                    points.row_mut(r).copy_from_slice(&[radius * math::cos(a), radius * math::sin(a)]);
                    labels.push(k);
                }
                Ok(Labeled {
                    points,
                    labels: Some(labels),
                })
            }
            ReferenceDistribution::Spiral { turns, radius, noise } => {
                let span = 2.0 * PI * turns;
                let mut points = Array::zeros(n, 2);
                for r in 0..n {
                    // sqrt makes the density roughly uniform along the arc.
                    let theta = math::sqrt(rng::uniform(rng, 0.0, 1.0)) * span;
                    let rr = radius * theta / span;
                    let x = rr * math::cos(theta) + noise * rng::normal(rng);
                    let y = rr * math::sin(theta) + noise * rng::normal(rng);
                    points.row_mut(r).copy_from_slice(&[x, y]);
                }
                Ok(Labeled { points, labels: None })
            }
            ReferenceDistribution::Checkerboard { cells, half_width } => {
                let cell = 2.0 * half_width / *cells as f64;
                let black: Vec<(usize, usize)> = (0..*cells)
                    .flat_map(|i| (0..*cells).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                let mut points = Array::zeros(n, 2);
                for r in 0..n {
                    let (i, j) = black[rng::index(rng, black.len())];
                    let x = -half_width + cell * (i as f64 + rng::uniform(rng, 0.0, 1.0));
                    let y = -half_width + cell * (j as f64 + rng::uniform(rng, 0.0, 1.0));
                    points.row_mut(r).copy_from_slice(&[x, y]);
                }
                Ok(Labeled { points, labels: None })
            }
            ReferenceDistribution::Empirical { points } => {
                let idx: Vec<usize> = (0..n).map(|_| rng::index(rng, points.rows())).collect();
                Ok(Labeled {
                    points: points.select_rows(&idx),
                    labels: None,
                })
            }
            ReferenceDistribution::Diffused { source, t } => {
                let s = source.sample(n, rng)?;
                let eps = rng::normal_array(rng, n, source.dim());
                let ts = vec![*t; n];
                Ok(Labeled {
                    points: NoiseSchedule::default().perturb(&s.points, &ts, &eps)?,
                    labels: s.labels,
                })
            }
        }
    }
}

/// Parses a point set: one point per line, values separated by commas and/or
/// whitespace. Blank lines and lines starting with `#` are skipped.
pub fn parse_points(text: &str) -> Result<Array> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidSpec(format!("line {}: `{s}` is not a number", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::InvalidSpec(format!(
                    "line {}: expected {c} values, found {}",
                    lineno + 1,
                    vals.len()
                )))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::InvalidSpec("point file contains no points".into()))?;
    Array::from_vec(rows, cols, data)
}
