//! Embedding-cache anomaly scores, leave-one-out threshold calibration and
//! evaluation metrics.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Covariance regularizer for the Mahalanobis score.
pub const MAHALANOBIS_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dimension mismatch: got {got}, expected {want}")]
    Dimension { got: usize, want: usize },
}

fn input<T>(msg: impl Into<String>) -> Result<T, DetectorError> {
    Err(DetectorError::Input(msg.into()))
}

/// `N × e` matrix of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    vectors: DMatrix<f64>,
}

impl EmbeddingCache {
    /// Normalizes every row; rejects zero or non-finite rows and `N < 2`.
    pub fn new(mut vectors: DMatrix<f64>) -> Result<Self, DetectorError> {
        if vectors.nrows() < 2 {
            return input(format!("cache needs at least 2 rows, got {}", vectors.nrows()));
        }
        if vectors.ncols() == 0 {
            return input("cache rows are empty");
        }
        for i in 0..vectors.nrows() {
            let norm = vectors.row(i).norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return input(format!("row {i} cannot be normalized"));
            }
            vectors.row_mut(i).unscale_mut(norm);
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self, DetectorError> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return input("rows have different lengths");
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    fn check_dim(&self, e: &DVector<f64>) -> Result<(), DetectorError> {
        if e.len() != self.dim() {
            return Err(DetectorError::Dimension { got: e.len(), want: self.dim() });
        }
        if e.iter().any(|x| !x.is_finite()) {
            return input("embedding must be finite");
        }
        Ok(())
    }

    fn check(&self, e: &DVector<f64>) -> Result<f64, DetectorError> {
        self.check_dim(e)?;
        let norm = e.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return input("embedding must be nonzero and finite");
        }
        Ok(norm)
    }

    fn cosines(&self, e: &DVector<f64>) -> Result<DVector<f64>, DetectorError> {
        let norm = self.check(e)?;
        Ok(&self.vectors * e / norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    MaxCos,
    TopK,
    Mahalanobis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFn {
    MaxCos,
    TopK(usize),
    Mahalanobis,
}

impl ScoreFn {
    pub fn from_parts(kind: ScoreKind, k: usize) -> Result<Self, DetectorError> {
        match kind {
            ScoreKind::MaxCos => Ok(ScoreFn::MaxCos),
            ScoreKind::TopK if k >= 1 => Ok(ScoreFn::TopK(k)),
            ScoreKind::TopK => input("top_k needs k >= 1"),
            ScoreKind::Mahalanobis => Ok(ScoreFn::Mahalanobis),
        }
    }

    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreFn::MaxCos => ScoreKind::MaxCos,
            ScoreFn::TopK(_) => ScoreKind::TopK,
            ScoreFn::Mahalanobis => ScoreKind::Mahalanobis,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            ScoreFn::TopK(k) => *k,
            _ => 1,
        }
    }
}

fn desc(a: &f64, b: &f64) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

/// `−max_i cos(e_i, e)`.
pub fn score_max_cos(e: &DVector<f64>, cache: &EmbeddingCache) -> Result<f64, DetectorError> {
    let c = cache.cosines(e)?;
    Ok(-c.max())
}

/// Negative mean of the `k` largest cosine similarities.
pub fn score_topk(e: &DVector<f64>, cache: &EmbeddingCache, k: usize) -> Result<f64, DetectorError> {
    if k == 0 || k > cache.len() {
        return input(format!("k = {k} outside 1..={}", cache.len()));
    }
    let c = cache.cosines(e)?;
    Ok(-mean_top(c.as_slice().to_vec(), k))
}

fn mean_top(mut v: Vec<f64>, k: usize) -> f64 {
    if k == 1 {
        return v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    }
    v.sort_by(desc);
    v[..k].iter().sum::<f64>() / k as f64
}

/// Gaussian fit used by the Mahalanobis score.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianFit {
    /// Mean and population covariance of the rows, covariance regularized by
    /// `MAHALANOBIS_EPS·I`.
    pub fn new(rows: &DMatrix<f64>) -> Result<Self, DetectorError> {
        let n = rows.nrows();
        if n < 2 {
            return input("need at least 2 rows");
        }
        let mean = rows.row_mean().transpose();
        let centered = DMatrix::from_fn(n, rows.ncols(), |i, j| rows[(i, j)] - mean[j]);
        let cov = centered.tr_mul(&centered) / n as f64;
        Self::from_moments(mean, cov)
    }

    fn from_moments(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self, DetectorError> {
        for i in 0..cov.nrows() {
            cov[(i, i)] += MAHALANOBIS_EPS;
        }
        let chol = Cholesky::new(cov).ok_or_else(|| DetectorError::Input("covariance is not positive definite".into()))?;
        Ok(Self { mean, chol })
    }

    pub fn distance(&self, e: &DVector<f64>) -> Result<f64, DetectorError> {
        if e.len() != self.mean.len() {
            return Err(DetectorError::Dimension { got: e.len(), want: self.mean.len() });
        }
        let d = e - &self.mean;
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .ok_or_else(|| DetectorError::Input("singular covariance factor".into()))?;
        Ok(w.norm())
    }
}

/// `√((e−μ)ᵀ(Σ+εI)⁻¹(e−μ))` against the cache's Gaussian fit.
pub fn score_mahalanobis(e: &DVector<f64>, cache: &EmbeddingCache) -> Result<f64, DetectorError> {
    cache.check_dim(e)?;
    GaussianFit::new(cache.vectors())?.distance(e)
}

pub fn score(e: &DVector<f64>, cache: &EmbeddingCache, f: ScoreFn) -> Result<f64, DetectorError> {
    match f {
        ScoreFn::MaxCos => score_max_cos(e, cache),
        ScoreFn::TopK(k) => score_topk(e, cache, k),
        ScoreFn::Mahalanobis => score_mahalanobis(e, cache),
    }
}

/// Score of every cache row against the cache without that row.
pub fn loo_scores(cache: &EmbeddingCache, f: ScoreFn) -> Result<Vec<f64>, DetectorError> {
    let n = cache.len();
    let v = cache.vectors();
    match f {
        ScoreFn::MaxCos | ScoreFn::TopK(_) => {
            let k = f.k();
            if k > n - 1 {
                return input(format!("k = {k} exceeds leave-one-out cache size {}", n - 1));
            }
            let gram = v * v.transpose();
            Ok((0..n)
                .map(|i| {
                    let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| gram[(i, j)]).collect();
                    -mean_top(others, k)
                })
                .collect())
        }
        ScoreFn::Mahalanobis => {
            if n < 3 {
                return input("leave-one-out Mahalanobis needs at least 3 rows");
            }
            let dim = cache.dim();
            let sum = v.row_sum().transpose();
            let second = v.tr_mul(v);
            let m = (n - 1) as f64;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let xi = v.row(i).transpose();
                let mean = (&sum - &xi) / m;
                let mut cov = (&second - &xi * xi.transpose()) / m - &mean * mean.transpose();
                for a in 0..dim {
                    for b in 0..a {
                        let s = 0.5 * (cov[(a, b)] + cov[(b, a)]);
                        cov[(a, b)] = s;
                        cov[(b, a)] = s;
                    }
                }
                out.push(GaussianFit::from_moments(mean, cov)?.distance(&xi)?);
            }
            Ok(out)
        }
    }
}

/// `⌈pn⌉`-th smallest sample: the smallest `q` with `|{s ≤ q}|/n ≥ p`.
pub fn order_statistic(samples: &[f64], p: f64) -> Result<f64, DetectorError> {
    if samples.is_empty() {
        return input("no samples");
    }
    if !(p > 0.0 && p < 1.0) {
        return input(format!("level {p} outside (0, 1)"));
    }
    if samples.iter().any(|s| s.is_nan()) {
        return input("NaN sample");
    }
    let n = samples.len();
    let k = (1..=n).find(|&k| k as f64 / n as f64 >= p).unwrap_or(n);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(sorted[k - 1])
}

pub fn calibrate_threshold(cache: &EmbeddingCache, f: ScoreFn, alpha: f64) -> Result<f64, DetectorError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return input(format!("alpha {alpha} outside (0, 1)"));
    }
    order_statistic(&loo_scores(cache, f)?, alpha)
}

/// `⌈pn⌉`-th smallest latency sample.
pub fn latency_quantile(samples: &[f64], p: f64) -> Result<f64, DetectorError> {
    order_statistic(samples, p)
}

/// Mann–Whitney AUROC: probability that an anomaly score exceeds a nominal
/// score, ties counting one half.
pub fn auroc(nominal: &[f64], anomaly: &[f64]) -> Result<f64, DetectorError> {
    if nominal.is_empty() || anomaly.is_empty() {
        return input("score lists must be nonempty");
    }
    if nominal.iter().chain(anomaly).any(|s| s.is_nan()) {
        return input("NaN score");
    }
    let mut all: Vec<(f64, bool)> = nominal
        .iter()
        .map(|&s| (s, false))
        .chain(anomaly.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // count pairs (nominal < anomaly) with doubled weights to stay in integers
    let mut twice: u128 = 0;
    let mut nominal_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut nom, mut ano) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                ano += 1;
            } else {
                nom += 1;
            }
            j += 1;
        }
        twice += ano * (2 * nominal_below + nom);
        nominal_below += nom;
        i = j;
    }
    Ok(twice as f64 / (2.0 * nominal.len() as f64 * anomaly.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Nominal,
    Anomaly,
}

/// Calibrated fast reasoner.
#[derive(Debug, Clone)]
pub struct Detector {
    cache: EmbeddingCache,
    score_fn: ScoreFn,
    alpha: f64,
    tau: f64,
    fit: Option<GaussianFit>,
}

/// Serialized detector state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorFile {
    pub score_fn: ScoreKind,
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub cache_file: String,
}

impl Detector {
    pub fn calibrate(cache: EmbeddingCache, score_fn: ScoreFn, alpha: f64) -> Result<Self, DetectorError> {
        let tau = calibrate_threshold(&cache, score_fn, alpha)?;
        Self::with_threshold(cache, score_fn, alpha, tau)
    }

    /// Restores a detector from a known threshold.
    pub fn with_threshold(cache: EmbeddingCache, score_fn: ScoreFn, alpha: f64, tau: f64) -> Result<Self, DetectorError> {
        if let ScoreFn::TopK(k) = score_fn {
            if k == 0 || k > cache.len() {
                return input(format!("k = {k} outside 1..={}", cache.len()));
            }
        }
        let fit = match score_fn {
            ScoreFn::Mahalanobis => Some(GaussianFit::new(cache.vectors())?),
            _ => None,
        };
        Ok(Self { cache, score_fn, alpha, tau, fit })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn score_fn(&self) -> ScoreFn {
        self.score_fn
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn score(&self, e: &DVector<f64>) -> Result<f64, DetectorError> {
        match (&self.fit, self.score_fn) {
            (Some(fit), ScoreFn::Mahalanobis) => {
                self.cache.check_dim(e)?;
                fit.distance(e)
            }
            (_, f) => score(e, &self.cache, f),
        }
    }

    /// Anomaly iff the score is strictly above τ.
    pub fn classify(&self, e: &DVector<f64>) -> Result<(f64, Classification), DetectorError> {
        let s = self.score(e)?;
        let c = if s > self.tau { Classification::Anomaly } else { Classification::Nominal };
        Ok((s, c))
    }

    pub fn to_file(&self, cache_file: impl Into<String>) -> DetectorFile {
        DetectorFile {
            score_fn: self.score_fn.kind(),
            k: self.score_fn.k(),
            alpha: self.alpha,
            tau: self.tau,
            cache_file: cache_file.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn cache(rows: &[&[f64]]) -> EmbeddingCache {
        EmbeddingCache::from_rows(&rows.iter().map(|r| v(r)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn max_cos_examples() {
        let c = cache(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(score_max_cos(&v(&[1.0, 0.0]), &c).unwrap(), -1.0);
        let h = 0.5f64.sqrt();
        assert_abs_diff_eq!(score_max_cos(&v(&[h, h]), &c).unwrap(), -h, epsilon = 1e-12);
        let c3 = cache(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(score_max_cos(&v(&[0.0, 0.0, 2.0]), &c3).unwrap(), 0.0);
        assert!(score_max_cos(&v(&[0.0, 0.0]), &c).is_err());
        assert!(score_max_cos(&v(&[1.0]), &c).is_err());
    }

    #[test]
    fn topk_examples() {
        let c = cache(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(score_topk(&v(&[1.0, 0.0]), &c, 2).unwrap(), -0.5, epsilon = 1e-15);
        assert!(score_topk(&v(&[1.0, 0.0]), &c, 3).is_err());
        let same = cache(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let e = v(&[0.3, 0.9]);
        let cos = (0.3 + 0.9) / (2.0f64.sqrt() * e.norm());
        assert_abs_diff_eq!(score_topk(&e, &same, 3).unwrap(), -cos, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_examples() {
        let c = cache(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        assert_abs_diff_eq!(score_mahalanobis(&v(&[1.0, 1.0]), &c).unwrap(), 2.0, epsilon = 1e-3);
        assert_eq!(score_mahalanobis(&v(&[0.0, 0.0]), &c).unwrap(), 0.0);
    }

    #[test]
    fn calibration_example() {
        let s = [-0.99, -0.95, -0.9, -0.85, -0.8, -0.75, -0.7, -0.65, -0.6, -0.5];
        assert_eq!(order_statistic(&s, 0.9).unwrap(), -0.6);
        assert_eq!(order_statistic(&s, 0.999).unwrap(), -0.5);
        assert!(order_statistic(&s, 1.0).is_err());
        assert!(order_statistic(&[], 0.5).is_err());
    }

    #[test]
    fn identical_rows_calibrate_to_minus_one() {
        let c = cache(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let tau = calibrate_threshold(&c, ScoreFn::MaxCos, 0.5).unwrap();
        assert_abs_diff_eq!(tau, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn classify_is_strict() {
        let c = cache(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = Detector::with_threshold(c.clone(), ScoreFn::MaxCos, 0.9, -1.0).unwrap();
        assert_eq!(d.classify(&v(&[1.0, 0.0])).unwrap().1, Classification::Nominal);
        let d = Detector::calibrate(c, ScoreFn::MaxCos, 0.9).unwrap();
        assert_eq!(d.tau(), 0.0);
        assert_eq!(d.classify(&v(&[1.0, 0.0])).unwrap().1, Classification::Nominal);
        assert_eq!(d.classify(&v(&[-1.0, -1.0])).unwrap().1, Classification::Anomaly);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn latency_examples() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(latency_quantile(&s, 0.95).unwrap(), 10.0);
        assert_eq!(latency_quantile(&[2.5; 7], 0.3).unwrap(), 2.5);
    }

    #[test]
    fn cache_rejects_degenerate_rows() {
        assert!(EmbeddingCache::from_rows(&[v(&[1.0, 0.0]), v(&[0.0, 0.0])]).is_err());
        assert!(EmbeddingCache::from_rows(&[v(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn loo_mahalanobis_matches_direct_refit() {
        let rows: Vec<DVector<f64>> = (0..6)
            .map(|i| v(&[(i as f64).sin() + 1.5, (i as f64 * 0.7).cos(), 0.3 * i as f64 - 0.4]))
            .collect();
        let c = EmbeddingCache::from_rows(&rows).unwrap();
        let loo = loo_scores(&c, ScoreFn::Mahalanobis).unwrap();
        for i in 0..6 {
            let others = DMatrix::from_fn(5, 3, |r, j| {
                let src = if r < i { r } else { r + 1 };
                c.vectors()[(src, j)]
            });
            let direct = GaussianFit::new(&others).unwrap().distance(&c.vectors().row(i).transpose()).unwrap();
            assert_abs_diff_eq!(loo[i], direct, epsilon = 1e-6 * direct.max(1.0));
        }
    }
}
