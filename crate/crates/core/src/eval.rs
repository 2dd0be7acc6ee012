//! Embedding evaluation: affine-fit R² (consistency and reconstruction),
//! behavior-binned alignment, kNN decoding and decoding error metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::stats::median;

/// Least-squares affine map `x -> y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    /// `p x q` linear part.
    pub weights: Matrix,
    /// Length `q` offset.
    pub intercept: Vec<f64>,
    pub r2: f64,
    /// Summed squared residuals over every output dimension.
    pub residual_ss: f64,
    /// Numerical rank of the centered design.
    pub rank: usize,
    /// Set when the design lacks full column rank; the minimum-norm solution is used.
    pub rank_deficient: bool,
}

impl AffineFit {
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weights)?;
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        Ok(out)
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut mu = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (a, v) in mu.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = m.rows().max(1) as f64;
    mu.iter_mut().for_each(|v| *v /= n);
    mu
}

fn centered(m: &Matrix, mu: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) - mu[j])
}

/// Variance-weighted multi-output R²: `1 - sum SS_res / sum SS_tot`.
pub fn r2_score(prediction: &Matrix, truth: &Matrix) -> Result<f64> {
    if prediction.rows() != truth.rows() || prediction.cols() != truth.cols() {
        return Err(shape_err(
            "r2_score",
            format!("{}x{}", truth.rows(), truth.cols()),
            format!("{}x{}", prediction.rows(), prediction.cols()),
        ));
    }
    let mu = column_means(truth);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p, t) in prediction.iter_rows().zip(truth.iter_rows()) {
        for j in 0..t.len() {
            ss_res += (t[j] - p[j]) * (t[j] - p[j]);
            ss_tot += (t[j] - mu[j]) * (t[j] - mu[j]);
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::InvalidConfig("R² is undefined for a constant target".into()));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Fits `y ≈ x W + b` by least squares on centered data (SVD, minimum-norm).
pub fn affine_fit(x: &Matrix, y: &Matrix) -> Result<AffineFit> {
    if x.rows() != y.rows() {
        return Err(shape_err(
            "affine_fit",
            format!("{} rows", x.rows()),
            format!("{} rows", y.rows()),
        ));
    }
    if x.rows() < 2 || x.cols() == 0 || y.cols() == 0 {
        return Err(Error::EmptyRange("affine fit needs at least two rows and one column".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("affine fit input".into()));
    }
    let mx = column_means(x);
    let my = column_means(y);
    let xc = centered(x, &mx);
    let yc = centered(y, &my);
    let svd = xc.svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * x.rows().max(x.cols()) as f64;
    let rank = s.iter().filter(|&&v| v > tol).count();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    // W = V diag(1/s) U^T Y over the retained singular values
    let mut uty = u.transpose() * &yc;
    for (i, &sv) in s.iter().enumerate() {
        let inv = if sv > tol { 1.0 / sv } else { 0.0 };
        uty.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    let w = vt.transpose() * uty;
    let (p, q) = (x.cols(), y.cols());
    let weights = Matrix::from_vec(p, q, (0..p * q).map(|k| w[(k / q, k % q)]).collect())?;
    let intercept: Vec<f64> = (0..q)
        .map(|j| my[j] - (0..p).map(|i| mx[i] * weights.get(i, j)).sum::<f64>())
        .collect();
    let mut fit = AffineFit {
        weights,
        intercept,
        r2: 0.0,
        residual_ss: 0.0,
        rank,
        rank_deficient: rank < p,
    };
    let pred = fit.predict(x)?;
    fit.residual_ss = pred
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    fit.r2 = r2_score(&pred, y)?;
    Ok(fit)
}

/// R² of the best affine map from `source` to `target`.
pub fn consistency_r2(source: &Matrix, target: &Matrix) -> Result<AffineFit> {
    affine_fit(source, target)
}

/// R² of the best affine map from a learned embedding to the true latent.
pub fn reconstruction_score(true_latent: &Matrix, embedding: &Matrix) -> Result<f64> {
    Ok(affine_fit(embedding, true_latent)?.r2)
}

/// Pairwise source-to-target consistency between aligned embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Entry `(i, j)` is the R² of predicting embedding `j` from embedding `i`.
    pub r2: Matrix,
    pub residual_ss: Matrix,
    pub rank_deficient: Vec<(usize, usize)>,
}

impl ConsistencyReport {
    /// Off-diagonal R² values in row-major order.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.r2.rows();
        (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.r2.get(i, j))
            .collect()
    }
}

pub fn consistency_matrix(embeddings: &[Matrix]) -> Result<ConsistencyReport> {
    let n = embeddings.len();
    let mut r2 = Matrix::zeros(n, n);
    let mut residual_ss = Matrix::zeros(n, n);
    let mut rank_deficient = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                r2.set(i, i, 1.0);
                continue;
            }
            let f = consistency_r2(&embeddings[i], &embeddings[j])?;
            r2.set(i, j, f.r2);
            residual_ss.set(i, j, f.residual_ss);
            if f.rank_deficient {
                rank_deficient.push((i, j));
            }
        }
    }
    Ok(ConsistencyReport {
        r2,
        residual_ss,
        rank_deficient,
    })
}

/// Bin-averaged embedding: one block of `bins` rows per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEmbedding {
    pub rows: Matrix,
    pub occupancy: Vec<usize>,
    /// Rows that were empty and filled from their neighbors.
    pub filled: Vec<bool>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateNormalization);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Averages normalized embeddings per position bin (and direction), then
/// re-normalizes each average. An empty bin takes the re-normalized mean of the
/// pooled samples of its adjacent bins in the same direction.
pub fn bin_align(
    embedding: &Matrix,
    position: &[f64],
    direction: Option<&[u32]>,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<AlignedEmbedding> {
    let n = embedding.rows();
    let d = embedding.cols();
    if position.len() != n || direction.is_some_and(|dir| dir.len() != n) {
        return Err(shape_err(
            "bin_align",
            format!("{n} positions and directions"),
            format!("{} positions", position.len()),
        ));
    }
    if bins == 0 || n == 0 {
        return Err(Error::EmptyRange("bin_align needs samples and at least one bin".into()));
    }
    let (lo, hi) = match range {
        Some(r) => r,
        None => position
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p), b.max(p))),
    };
    if !(hi > lo) {
        return Err(Error::InvalidConfig(format!("track range [{lo}, {hi}] is empty")));
    }
    let blocks = if direction.is_some() { 2 } else { 1 };
    let total = blocks * bins;
    let mut sums = Matrix::zeros(total, d);
    let mut occupancy = vec![0usize; total];
    for i in 0..n {
        let p = position[i];
        if !(lo..=hi).contains(&p) {
            return Err(Error::InvalidConfig(format!("position {p} in row {i} lies outside [{lo}, {hi}]")));
        }
        let block = match direction {
            Some(dir) if dir[i] > 1 => {
                return Err(Error::InvalidConfig(format!("direction {} in row {i} is not 0 or 1", dir[i])))
            }
            Some(dir) => dir[i] as usize,
            None => 0,
        };
        let b = (((p - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
        let row = block * bins + b;
        let z = normalized(embedding.row(i))?;
        for (a, v) in sums.row_mut(row).iter_mut().zip(&z) {
            *a += v;
        }
        occupancy[row] += 1;
    }
    let mut rows = Matrix::zeros(total, d);
    let mut filled = vec![false; total];
    for block in 0..blocks {
        for b in 0..bins {
            let r = block * bins + b;
            let src = if occupancy[r] > 0 {
                sums.row(r).to_vec()
            } else {
                let neighbors = [b.checked_sub(1), (b + 1 < bins).then_some(b + 1)];
                let mut pooled = vec![0.0; d];
                let mut count = 0;
                for nb in neighbors.into_iter().flatten() {
                    let nr = block * bins + nb;
                    count += occupancy[nr];
                    for (a, v) in pooled.iter_mut().zip(sums.row(nr)) {
                        *a += v;
                    }
                }
                if count == 0 {
                    return Err(Error::EmptyRange(format!(
                        "bin {b} (direction block {block}) and its neighbors are empty"
                    )));
                }
                filled[r] = true;
                pooled
            };
            rows.row_mut(r).copy_from_slice(&normalized(&src)?);
        }
    }
    Ok(AlignedEmbedding {
        rows,
        occupancy,
        filled,
    })
}

/// Targets for kNN decoding.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Continuous(&'a Matrix),
    Classes(&'a [u32]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Continuous(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Continuous(Matrix),
    Classes(Vec<u32>),
}

fn unit_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let z = normalized(m.row(i))?;
        out.row_mut(i).copy_from_slice(&z);
    }
    Ok(out)
}

/// Indices of the `k` most cosine-similar training rows to every query, best
/// first; equal similarities rank the smaller index first.
pub fn nearest_neighbors(train: &Matrix, queries: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > train.rows() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must lie in [1, {}] (training set size)",
            train.rows()
        )));
    }
    if train.cols() != queries.cols() {
        return Err(shape_err(
            "nearest_neighbors",
            format!("{} columns", train.cols()),
            format!("{}", queries.cols()),
        ));
    }
    let tn = unit_rows(train)?;
    let qn = unit_rows(queries)?;
    let mut out = Vec::with_capacity(qn.rows());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(tn.rows());
    for q in qn.iter_rows() {
        scored.clear();
        scored.extend(tn.iter_rows().enumerate().map(|(i, t)| (dot(q, t), i)));
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        out.push(scored.iter().map(|s| s.1).collect());
    }
    Ok(out)
}

fn predict_from(neighbors: &[Vec<usize>], k: usize, targets: Targets<'_>) -> Predictions {
    match targets {
        Targets::Continuous(y) => {
            let q = y.cols();
            let mut out = Matrix::zeros(neighbors.len(), q);
            for (i, nb) in neighbors.iter().enumerate() {
                let row = out.row_mut(i);
                for &j in &nb[..k] {
                    for (a, v) in row.iter_mut().zip(y.row(j)) {
                        *a += v;
                    }
                }
                row.iter_mut().for_each(|v| *v /= k as f64);
            }
            Predictions::Continuous(out)
        }
        Targets::Classes(labels) => {
            let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
            let mut votes = vec![0usize; classes];
            Predictions::Classes(
                neighbors
                    .iter()
                    .map(|nb| {
                        votes.iter_mut().for_each(|v| *v = 0);
                        for &j in &nb[..k] {
                            votes[labels[j] as usize] += 1;
                        }
                        // first maximum, so ties go to the smallest label
                        let mut best = 0;
                        for (c, &v) in votes.iter().enumerate() {
                            if v > votes[best] {
                                best = c;
                            }
                        }
                        best as u32
                    })
                    .collect(),
            )
        }
    }
}

/// kNN predictions with a fixed `k`.
pub fn knn_predict(train: &Matrix, targets: Targets<'_>, queries: &Matrix, k: usize) -> Result<Predictions> {
    if targets.len() != train.rows() {
        return Err(shape_err(
            "knn_predict",
            format!("{} targets", train.rows()),
            format!("{}", targets.len()),
        ));
    }
    let nb = nearest_neighbors(train, queries, k)?;
    Ok(predict_from(&nb, k, targets))
}

/// Score of predictions against truth: R² for regression, accuracy for classes.
pub fn prediction_score(pred: &Predictions, truth: Targets<'_>) -> Result<f64> {
    match (pred, truth) {
        (Predictions::Continuous(p), Targets::Continuous(t)) => r2_score(p, t),
        (Predictions::Classes(p), Targets::Classes(t)) => {
            if p.len() != t.len() || p.is_empty() {
                return Err(shape_err("prediction_score", format!("{}", t.len()), format!("{}", p.len())));
            }
            Ok(p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64)
        }
        _ => Err(Error::InvalidConfig("prediction and target kinds differ".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnDecode {
    pub k: usize,
    /// Validation score of every `k` tried, in grid order.
    pub validation_scores: Vec<(usize, f64)>,
    pub predictions: Predictions,
}

/// Chooses `k` from `k_grid` by validation score (the first best wins), then
/// predicts the test set.
pub fn knn_decode(
    train: &Matrix,
    train_targets: Targets<'_>,
    validation: &Matrix,
    validation_targets: Targets<'_>,
    test: &Matrix,
    k_grid: &[usize],
) -> Result<KnnDecode> {
    let kmax = k_grid
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::InvalidConfig("empty k grid".into()))?;
    if train_targets.len() != train.rows() {
        return Err(shape_err("knn_decode", format!("{} targets", train.rows()), format!("{}", train_targets.len())));
    }
    let val_nb = nearest_neighbors(train, validation, kmax)?;
    let mut scores = Vec::with_capacity(k_grid.len());
    let mut best: Option<(usize, f64)> = None;
    for &k in k_grid {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        let s = prediction_score(&predict_from(&val_nb, k, train_targets), validation_targets)?;
        scores.push((k, s));
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    let k = best.expect("non-empty grid").0;
    let predictions = knn_predict(train, train_targets, test, k)?;
    Ok(KnnDecode {
        k,
        validation_scores: scores,
        predictions,
    })
}

/// The neighbor grid `{1, 4, 9, 16, 25}`.
pub fn square_k_grid() -> Vec<usize> {
    (1..=5).map(|i| i * i).collect()
}

/// Powers of two up to `max`, then `max` itself.
pub fn exponential_k_grid(max: usize) -> Vec<usize> {
    let mut g: Vec<usize> = core::iter::successors(Some(1usize), |&k| k.checked_mul(2))
        .take_while(|&k| k < max)
        .collect();
    g.push(max.max(1));
    g
}

/// Median absolute error.
pub fn median_abs_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err("median_abs_error", format!("{}", truth.len()), format!("{}", pred.len())));
    }
    let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    median(&errs)
}

/// Fraction of predictions within `window` of the truth.
pub fn accuracy_within(pred: &[f64], truth: &[f64], window: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err("accuracy_within", format!("{}", truth.len()), format!("{}", pred.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyRange("no predictions to score".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| (*p - *t).abs() <= window).count();
    Ok(hits as f64 / pred.len() as f64)
}
