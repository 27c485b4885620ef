//! Sample-based distribution comparisons and run-quality metrics.
//!
//! All functions are pure over their inputs. `kl_knn` is asymmetric; the
//! others are symmetric in their two point sets.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Array, Error, Result};

/// Added to every nearest-neighbour distance so duplicates stay finite.
pub const KNN_JITTER: f64 = 1e-9;

/// Pooled points used for the median bandwidth.
const MEDIAN_POOL: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(sq_dist(a, b))
}

fn check_pair(a: &Array, b: &Array, need: usize) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let got = a.rows().min(b.rows());
    if got < need {
        return Err(Error::TooFewSamples { need, got });
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("metric input".into()));
    }
    Ok(())
}

/// Mean of `f(x, y)` over all cross pairs.
fn cross_mean(a: &Array, b: &Array, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut s = 0.0;
    for x in a.iter_rows() {
        for y in b.iter_rows() {
            s += f(x, y);
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Mean of `f(x_i, x_j)` over `i != j` (f symmetric).
fn within_mean(a: &Array, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += f(a.row(i), a.row(j));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Median pairwise distance over (a strided subset of) the pooled points.
pub fn median_bandwidth(a: &Array, b: &Array) -> Result<f64> {
    let pooled = a.concat_rows(b)?;
    let stride = pooled.rows().div_ceil(MEDIAN_POOL).max(1);
    let idx: Vec<usize> = (0..pooled.rows()).step_by(stride).collect();
    let p = pooled.select_rows(&idx);
    let mut d = Vec::with_capacity(p.rows() * (p.rows() - 1) / 2);
    for i in 0..p.rows() {
        for j in i + 1..p.rows() {
            d.push(dist(p.row(i), p.row(j)));
        }
    }
    if d.is_empty() {
        return Err(Error::DegenerateBandwidth);
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if !(m > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(m)
}

/// Unbiased MMD² with a Gaussian kernel, median-heuristic bandwidth, clamped at 0.
pub fn mmd_rbf(a: &Array, b: &Array) -> Result<f64> {
    check_pair(a, b, 10)?;
    let h = median_bandwidth(a, b)?;
    let inv = 1.0 / (2.0 * h * h);
    let k = |x: &[f64], y: &[f64]| math::exp(-sq_dist(x, y) * inv);
    let v = within_mean(a, k) + within_mean(b, k) - 2.0 * cross_mean(a, b, k);
    Ok(v.max(0.0))
}

fn kth_smallest(d: &mut [f64], k: usize) -> f64 {
    let (_, v, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    *v
}

/// k-nearest-neighbour estimate of `KL(a || b)`.
///
/// `D = d/n sum_i ln(nu_k(i) / rho_k(i)) + ln(m / (n - 1))` where `rho_k` is the
/// k-th neighbour distance within `a` and `nu_k` the k-th neighbour distance in `b`.
pub fn kl_knn(a: &Array, b: &Array, k: usize) -> Result<f64> {
    check_pair(a, b, k + 1)?;
    let (n, m, d) = (a.rows(), b.rows(), a.cols());
    let mut within = vec![0.0; n - 1];
    let mut cross = vec![0.0; m];
    let mut acc = 0.0;
    for i in 0..n {
        let x = a.row(i);
        let mut w = 0;
        for j in (0..n).filter(|&j| j != i) {
            within[w] = dist(x, a.row(j));
            w += 1;
        }
        for (j, y) in b.iter_rows().enumerate() {
            cross[j] = dist(x, y);
        }
        let rho = kth_smallest(&mut within, k) + KNN_JITTER;
        let nu = kth_smallest(&mut cross, k) + KNN_JITTER;
        acc += math::ln(nu / rho);
    }
    Ok(d as f64 * acc / n as f64 + math::ln(m as f64 / (n - 1) as f64))
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` (U-statistic, clamped at 0).
pub fn energy_distance(a: &Array, b: &Array) -> Result<f64> {
    check_pair(a, b, 2)?;
    let v = 2.0 * cross_mean(a, b, dist) - within_mean(a, dist) - within_mean(b, dist);
    Ok(v.max(0.0))
}

/// Mean pairwise Euclidean distance.
pub fn spread(a: &Array) -> Result<f64> {
    if a.rows() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: a.rows() });
    }
    Ok(within_mean(a, dist))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModeStats {
    /// Fraction of modes with at least one sample within the hit radius.
    pub recall: f64,
    /// Fraction of samples within the hit radius of their nearest mode.
    pub precision: f64,
    /// Hits per mode.
    pub counts: Vec<usize>,
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(k, c)| (k, sq_dist(x, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one center")
}

/// Mode coverage with hit radius `3 * sigma`.
pub fn mode_recall(samples: &Array, centers: &[Vec<f64>], sigma: f64) -> ModeStats {
    let mut counts = vec![0; centers.len()];
    if centers.is_empty() || samples.rows() == 0 {
        return ModeStats {
            recall: 0.0,
            precision: 0.0,
            counts,
        };
    }
    let r2 = (3.0 * sigma) * (3.0 * sigma);
    let mut hits = 0;
    for x in samples.iter_rows() {
        let (k, d2) = nearest(x, centers);
        if d2 <= r2 {
            counts[k] += 1;
            hits += 1;
        }
    }
    ModeStats {
        recall: counts.iter().filter(|&&c| c > 0).count() as f64 / centers.len() as f64,
        precision: hits as f64 / samples.rows() as f64,
        counts,
    }
}

/// Pooled within-mode variance: samples are grouped by nearest center and
/// each group is measured around its own sample mean, so a cluster that
/// tightens while drifting off its center still counts as sharper.
pub fn intra_mode_variance(samples: &Array, centers: &[Vec<f64>]) -> f64 {
    if samples.rows() == 0 || centers.is_empty() {
        return 0.0;
    }
    let group: Vec<usize> = samples.iter_rows().map(|x| nearest(x, centers).0).collect();
    let mut n = vec![0usize; centers.len()];
    let mut mean = vec![vec![0.0; samples.cols()]; centers.len()];
    for (x, &k) in samples.iter_rows().zip(&group) {
        n[k] += 1;
        for (m, v) in mean[k].iter_mut().zip(x) {
            *m += v;
        }
    }
    for (m, &c) in mean.iter_mut().zip(&n) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    samples.iter_rows().zip(&group).map(|(x, &k)| sq_dist(x, &mean[k])).sum::<f64>() / samples.rows() as f64
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub mmd: f64,
    pub kl_knn: f64,
    /// `None` when the reference has no modes.
    pub mode_recall: Option<f64>,
    pub mode_precision: Option<f64>,
    pub energy_distance: f64,
    /// Spread of `samples`.
    pub spread: f64,
    pub n_samples: usize,
    pub n_reference: usize,
}

impl MetricReport {
    pub const KNN_K: usize = 5;

    pub fn compute(samples: &Array, reference: &Array, modes: Option<(&[Vec<f64>], f64)>) -> Result<Self> {
        let ms = modes.map(|(c, s)| mode_recall(samples, c, s));
        let report = MetricReport {
            mmd: mmd_rbf(samples, reference)?,
            kl_knn: kl_knn(samples, reference, Self::KNN_K)?,
            mode_recall: ms.as_ref().map(|m| m.recall),
            mode_precision: ms.as_ref().map(|m| m.precision),
            energy_distance: energy_distance(samples, reference)?,
            spread: spread(samples)?,
            n_samples: samples.rows(),
            n_reference: reference.rows(),
        };
        let scalars = [report.mmd, report.kl_knn, report.energy_distance, report.spread];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(report)
    }
}
