//! Similarity measures, the InfoNCE criterion and the hybrid partitioned loss.
//!
//! All losses return their value split into an alignment part (the mean
//! negative positive-pair score) and a uniformity part (the mean log-sum-exp
//! over negatives), together with exact gradients for every input embedding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, gemm_nn, gemm_nt, gemm_tn, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityKind {
    /// Dot product between unit vectors.
    #[default]
    Dot,
    /// Negative squared Euclidean distance.
    NegMse,
}

/// Raw similarity `phi(z, z')`, before temperature scaling.
pub fn similarity(z: &[f64], other: &[f64], kind: SimilarityKind) -> Result<f64> {
    if z.len() != other.len() {
        return Err(shape_err("similarity", format!("{}", z.len()), format!("{}", other.len())));
    }
    match kind {
        SimilarityKind::Dot => {
            for v in [z, other] {
                let n = norm(v);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "dot similarity needs unit vectors, got norm {n}"
                    )));
                }
            }
            Ok(dot(z, other))
        }
        SimilarityKind::NegMse => Ok(-z.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub positive_term: f64,
    pub negative_term: f64,
}

impl LossReport {
    fn new(positive_term: f64, negative_term: f64) -> Self {
        Self {
            total: positive_term + negative_term,
            positive_term,
            negative_term,
        }
    }

    fn plus(self, other: LossReport) -> Self {
        Self::new(
            self.positive_term + other.positive_term,
            self.negative_term + other.negative_term,
        )
    }
}

/// Loss value and gradients with respect to scaled similarity scores.
#[derive(Debug, Clone)]
pub struct ScoreGrad {
    pub report: LossReport,
    /// `dL / dpsi(x_i, y+_i)`, one per batch row.
    pub positive: Vec<f64>,
    /// `dL / dpsi(x_i, y_j)`, `batch x n`.
    pub negative: Matrix,
}

/// InfoNCE on precomputed scores `psi`.
///
/// Loss is `mean_i [ -pos_i + log sum_j exp(neg_ij) ]`, with the row maximum
/// subtracted inside the log-sum-exp and treated as a constant. When
/// `positive_in_negatives` is set the positive score joins the sum.
pub fn infonce_from_scores(positive: &[f64], negative: &Matrix, positive_in_negatives: bool) -> Result<ScoreGrad> {
    let b = positive.len();
    if negative.rows() != b {
        return Err(shape_err("infonce", format!("{b} score rows"), format!("{}", negative.rows())));
    }
    if b == 0 || negative.cols() == 0 {
        return Err(Error::InvalidConfig("InfoNCE needs a non-empty batch and at least one negative".into()));
    }
    if positive.iter().any(|v| v.is_nan()) || negative.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN similarity score".into()));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad_neg = Matrix::zeros(b, negative.cols());
    let mut grad_pos = vec![-inv_b; b];
    let mut lse_sum = 0.0;
    for i in 0..b {
        let row = negative.row(i);
        let mut c = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if positive_in_negatives {
            c = c.max(positive[i]);
        }
        let g = grad_neg.row_mut(i);
        let mut s = 0.0;
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = libm::exp(v - c);
            s += *gj;
        }
        let pos_w = if positive_in_negatives {
            let w = libm::exp(positive[i] - c);
            s += w;
            w
        } else {
            0.0
        };
        lse_sum += c + libm::log(s);
        for gj in g.iter_mut() {
            *gj *= inv_b / s;
        }
        grad_pos[i] += pos_w * inv_b / s;
    }
    let pos_mean = positive.iter().sum::<f64>() * inv_b;
    Ok(ScoreGrad {
        report: LossReport::new(-pos_mean, lse_sum * inv_b),
        positive: grad_pos,
        negative: grad_neg,
    })
}

/// InfoNCE configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce {
    pub similarity: SimilarityKind,
    pub temperature: f64,
    pub positive_in_negatives: bool,
}

impl Default for InfoNce {
    fn default() -> Self {
        Self {
            similarity: SimilarityKind::Dot,
            temperature: 1.0,
            positive_in_negatives: false,
        }
    }
}

/// Loss and gradients with respect to the reference, positive and negative embeddings.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub report: LossReport,
    pub reference: Matrix,
    pub positive: Matrix,
    pub negative: Matrix,
}

impl InfoNce {
    pub fn new(similarity: SimilarityKind, temperature: f64) -> Result<Self> {
        let out = Self {
            similarity,
            temperature,
            ..Self::default()
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// InfoNCE over a batch: `reference` and `positive` are `batch x d`, the
    /// `n x d` negatives are shared by every reference row.
    pub fn loss(&self, reference: &Matrix, positive: &Matrix, negative: &Matrix) -> Result<LossGrad> {
        self.validate()?;
        let (b, d) = (reference.rows(), reference.cols());
        if positive.rows() != b || positive.cols() != d || negative.cols() != d {
            return Err(shape_err(
                "InfoNce::loss",
                format!("positive {b}x{d} and negatives nx{d}"),
                format!(
                    "positive {}x{}, negatives {}x{}",
                    positive.rows(),
                    positive.cols(),
                    negative.rows(),
                    negative.cols()
                ),
            ));
        }
        let n = negative.rows();
        let inv_t = 1.0 / self.temperature;
        let (pos_scores, neg_scores) = match self.similarity {
            SimilarityKind::Dot => {
                let pos: Vec<f64> = (0..b).map(|i| dot(reference.row(i), positive.row(i)) * inv_t).collect();
                let mut neg = Matrix::zeros(b, n);
                gemm_nt(reference.as_slice(), negative.as_slice(), neg.as_mut_slice(), b, d, n);
                neg.as_mut_slice().iter_mut().for_each(|v| *v *= inv_t);
                (pos, neg)
            }
            SimilarityKind::NegMse => {
                let pos: Vec<f64> = (0..b).map(|i| -sq_dist(reference.row(i), positive.row(i)) * inv_t).collect();
                let mut neg = Matrix::zeros(b, n);
                for i in 0..b {
                    for j in 0..n {
                        neg.set(i, j, -sq_dist(reference.row(i), negative.row(j)) * inv_t);
                    }
                }
                (pos, neg)
            }
        };
        let sg = infonce_from_scores(&pos_scores, &neg_scores, self.positive_in_negatives)?;

        let mut g_ref = Matrix::zeros(b, d);
        let mut g_pos = Matrix::zeros(b, d);
        let mut g_neg = Matrix::zeros(n, d);
        match self.similarity {
            SimilarityKind::Dot => {
                for i in 0..b {
                    let w = sg.positive[i] * inv_t;
                    for k in 0..d {
                        g_ref.as_mut_slice()[i * d + k] = w * positive.get(i, k);
                        g_pos.as_mut_slice()[i * d + k] = w * reference.get(i, k);
                    }
                }
                let mut wn = sg.negative.clone();
                wn.as_mut_slice().iter_mut().for_each(|v| *v *= inv_t);
                gemm_nn(wn.as_slice(), negative.as_slice(), g_ref.as_mut_slice(), b, n, d);
                gemm_tn(wn.as_slice(), reference.as_slice(), g_neg.as_mut_slice(), b, n, d);
            }
            SimilarityKind::NegMse => {
                // d/dr of -|r - y|^2 / t is -2 (r - y) / t
                for i in 0..b {
                    let w = sg.positive[i] * inv_t * 2.0;
                    for k in 0..d {
                        let diff = reference.get(i, k) - positive.get(i, k);
                        g_ref.as_mut_slice()[i * d + k] = -w * diff;
                        g_pos.as_mut_slice()[i * d + k] = w * diff;
                    }
                    for j in 0..n {
                        let w = sg.negative.get(i, j) * inv_t * 2.0;
                        for k in 0..d {
                            let diff = reference.get(i, k) - negative.get(j, k);
                            g_ref.as_mut_slice()[i * d + k] -= w * diff;
                            g_neg.as_mut_slice()[j * d + k] += w * diff;
                        }
                    }
                }
            }
        }
        Ok(LossGrad {
            report: sg.report,
            reference: g_ref,
            positive: g_pos,
            negative: g_neg,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Coordinate split of a hybrid embedding: the first `behavior` coordinates are
/// trained with behavior positives, the last `time` with time positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridSplit {
    pub behavior: usize,
    pub time: usize,
}

#[derive(Debug, Clone)]
pub struct HybridLossGrad {
    pub report: LossReport,
    pub behavior: Option<LossReport>,
    pub time: Option<LossReport>,
    pub reference: Matrix,
    pub positive_behavior: Matrix,
    pub positive_time: Matrix,
    pub negative: Matrix,
}

/// Sum of a behavior-conditioned InfoNCE on the leading coordinates and a
/// time-conditioned InfoNCE on the trailing coordinates. Each slice is
/// re-normalized onto its own sphere before the dot similarity.
pub fn hybrid_loss(
    criterion: &InfoNce,
    reference: &Matrix,
    positive_behavior: &Matrix,
    positive_time: &Matrix,
    negative: &Matrix,
    split: HybridSplit,
) -> Result<HybridLossGrad> {
    let d = reference.cols();
    if split.behavior + split.time != d {
        return Err(Error::InvalidConfig(format!(
            "hybrid split {}+{} does not match embedding dimension {d}",
            split.behavior, split.time
        )));
    }
    let mut out = HybridLossGrad {
        report: LossReport::default(),
        behavior: None,
        time: None,
        reference: Matrix::zeros(reference.rows(), d),
        positive_behavior: Matrix::zeros(positive_behavior.rows(), d),
        positive_time: Matrix::zeros(positive_time.rows(), d),
        negative: Matrix::zeros(negative.rows(), d),
    };
    let parts = [(0..split.behavior, true), (d - split.time..d, false)];
    for (range, is_behavior) in parts {
        if range.is_empty() {
            continue;
        }
        let positive = if is_behavior { positive_behavior } else { positive_time };
        let r = SphereSlice::new(reference, range.clone())?;
        let p = SphereSlice::new(positive, range.clone())?;
        let n = SphereSlice::new(negative, range.clone())?;
        let lg = criterion.loss(&r.unit, &p.unit, &n.unit)?;
        r.backward(&lg.reference, &mut out.reference);
        let pos_grad = if is_behavior {
            &mut out.positive_behavior
        } else {
            &mut out.positive_time
        };
        p.backward(&lg.positive, pos_grad);
        n.backward(&lg.negative, &mut out.negative);
        out.report = out.report.plus(lg.report);
        if is_behavior {
            out.behavior = Some(lg.report);
        } else {
            out.time = Some(lg.report);
        }
    }
    Ok(out)
}

/// A column slice projected onto the unit sphere, remembering what the
/// backward pass needs.
struct SphereSlice {
    range: Range<usize>,
    unit: Matrix,
    norms: Vec<f64>,
}

impl SphereSlice {
    fn new(m: &Matrix, range: Range<usize>) -> Result<Self> {
        let mut unit = m.slice_cols(range.start, range.end);
        let mut norms = Vec::with_capacity(unit.rows());
        for i in 0..unit.rows() {
            let row = unit.row_mut(i);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateNormalization);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Self { range, unit, norms })
    }

    fn backward(&self, grad: &Matrix, full: &mut Matrix) {
        for i in 0..grad.rows() {
            let y = self.unit.row(i);
            let g = grad.row(i);
            let yg = dot(y, g);
            let dst = &mut full.row_mut(i)[self.range.clone()];
            for ((o, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                *o += (gv - yv * yg) / self.norms[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn unit_rows(rows: usize, d: usize, rng: &mut crate::rng::SeededRng) -> Matrix {
        let mut m = Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for i in 0..rows {
            let r = m.row_mut(i);
            let n = norm(r);
            r.iter_mut().for_each(|v| *v /= n);
        }
        m
    }

    /// Direct evaluation without any stabilization.
    fn naive_infonce(r: &Matrix, p: &Matrix, n: &Matrix, t: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..r.rows() {
            let pos = dot(r.row(i), p.row(i)) / t;
            let s: f64 = (0..n.rows()).map(|j| (dot(r.row(i), n.row(j)) / t).exp()).sum();
            total += -pos + s.ln();
        }
        total / r.rows() as f64
    }

    #[test]
    fn similarity_reference_values() {
        let e = [0.6, 0.8];
        assert!((similarity(&e, &e, SimilarityKind::Dot).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], SimilarityKind::Dot).unwrap(), 0.0);
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 1.0], SimilarityKind::NegMse).unwrap(), -2.0);
        assert!(similarity(&[2.0, 0.0], &[1.0, 0.0], SimilarityKind::Dot).is_err());
    }

    #[test]
    fn equal_scores_give_log_n() {
        for n in [1usize, 10, 100] {
            for common in [-3.5, 0.0, 2.25] {
                let neg = Matrix::from_vec(4, n, vec![common; 4 * n]).unwrap();
                let sg = infonce_from_scores(&[common; 4], &neg, false).unwrap();
                assert!((sg.report.total - (n as f64).ln()).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn orthogonal_negative_example() {
        let r = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let neg = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        let lg = InfoNce::default().loss(&r, &r, &neg).unwrap();
        assert!((lg.report.total + 1.0).abs() < 1e-15);
        assert_eq!(lg.report.positive_term, -1.0);
        assert_eq!(lg.report.negative_term, 0.0);
    }

    #[test]
    fn matches_naive_formula_on_random_batch() {
        let mut rng = stream(11, 0);
        for t in [0.1, 0.5, 1.0] {
            let r = unit_rows(16, 5, &mut rng);
            let p = unit_rows(16, 5, &mut rng);
            let n = unit_rows(16, 5, &mut rng);
            let lg = InfoNce::new(SimilarityKind::Dot, t).unwrap().loss(&r, &p, &n).unwrap();
            assert!((lg.report.total - naive_infonce(&r, &p, &n, t)).abs() < 1e-10);
        }
    }

    #[test]
    fn shift_invariance_of_scores() {
        let mut rng = stream(12, 0);
        let pos: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let neg = Matrix::from_vec(8, 6, (0..48).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let base = infonce_from_scores(&pos, &neg, false).unwrap().report.total;
        for shift in [-700.0, -3.0, 1e-3, 40.0, 650.0] {
            let p2: Vec<f64> = pos.iter().map(|v| v + shift).collect();
            let mut n2 = neg.clone();
            n2.as_mut_slice().iter_mut().for_each(|v| *v += shift);
            let shifted = infonce_from_scores(&p2, &n2, false).unwrap().report.total;
            assert!((shifted - base).abs() < 1e-10, "shift {shift}");
        }
    }

    #[test]
    fn raising_positive_score_lowers_loss() {
        let neg = Matrix::from_vec(2, 3, vec![0.1, -0.4, 0.3, 0.2, 0.0, -0.1]).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let l = infonce_from_scores(&[step as f64 * 0.3, 0.5], &neg, true).unwrap().report.total;
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn rejects_bad_temperature_and_nan() {
        assert!(InfoNce::new(SimilarityKind::Dot, 0.0).is_err());
        assert!(InfoNce::new(SimilarityKind::Dot, -1.0).is_err());
        let neg = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(infonce_from_scores(&[0.0], &neg, false).is_err());
    }

    fn check_embedding_grads(crit: InfoNce, seed: u64) {
        let mut rng = stream(seed, 0);
        let r = unit_rows(5, 4, &mut rng);
        let p = unit_rows(5, 4, &mut rng);
        let n = unit_rows(7, 4, &mut rng);
        let lg = crit.loss(&r, &p, &n).unwrap();
        let h = 1e-6;
        let mats = [(&r, &lg.reference), (&p, &lg.positive), (&n, &lg.negative)];
        for (which, (m, g)) in mats.iter().enumerate() {
            for e in 0..m.as_slice().len() {
                let eval = |delta: f64| {
                    let mut mm = [r.clone(), p.clone(), n.clone()];
                    mm[which].as_mut_slice()[e] += delta;
                    crit.loss(&mm[0], &mm[1], &mm[2]).unwrap().report.total
                };
                let cd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.as_slice()[e];
                let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
                assert!(rel < 1e-6 || (a - cd).abs() < 1e-10, "{which}/{e}: {a} vs {cd}");
            }
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        for seed in 0..4 {
            check_embedding_grads(InfoNce::default(), seed);
            check_embedding_grads(
                InfoNce {
                    temperature: 0.3,
                    positive_in_negatives: true,
                    ..InfoNce::default()
                },
                seed,
            );
            check_embedding_grads(InfoNce::new(SimilarityKind::NegMse, 2.0).unwrap(), seed);
        }
    }

    #[test]
    fn hybrid_degenerate_splits() {
        let mut rng = stream(21, 0);
        let r = unit_rows(6, 5, &mut rng);
        let pb = unit_rows(6, 5, &mut rng);
        let pt = unit_rows(6, 5, &mut rng);
        let n = unit_rows(6, 5, &mut rng);
        let crit = InfoNce::default();
        let behavior_only = crit.loss(&r, &pb, &n).unwrap().report.total;
        let time_only = crit.loss(&r, &pt, &n).unwrap().report.total;
        let h = hybrid_loss(&crit, &r, &pb, &pt, &n, HybridSplit { behavior: 5, time: 0 }).unwrap();
        assert!((h.report.total - behavior_only).abs() < 1e-12);
        let h = hybrid_loss(&crit, &r, &pb, &pt, &n, HybridSplit { behavior: 0, time: 5 }).unwrap();
        assert!((h.report.total - time_only).abs() < 1e-12);
        assert!(hybrid_loss(&crit, &r, &pb, &pt, &n, HybridSplit { behavior: 4, time: 2 }).is_err());
    }

    #[test]
    fn hybrid_three_two_is_sum_of_independent_sub_losses() {
        let mut rng = stream(22, 0);
        let r = unit_rows(6, 5, &mut rng);
        let pb = unit_rows(6, 5, &mut rng);
        let pt = unit_rows(6, 5, &mut rng);
        let n = unit_rows(9, 5, &mut rng);
        let renorm = |m: &Matrix, a: usize, b: usize| {
            let mut s = m.slice_cols(a, b);
            for i in 0..s.rows() {
                let row = s.row_mut(i);
                let nr = norm(row);
                row.iter_mut().for_each(|v| *v /= nr);
            }
            s
        };
        let want = naive_infonce(&renorm(&r, 0, 3), &renorm(&pb, 0, 3), &renorm(&n, 0, 3), 1.0)
            + naive_infonce(&renorm(&r, 3, 5), &renorm(&pt, 3, 5), &renorm(&n, 3, 5), 1.0);
        let crit = InfoNce::default();
        let h = hybrid_loss(&crit, &r, &pb, &pt, &n, HybridSplit { behavior: 3, time: 2 }).unwrap();
        assert!((h.report.total - want).abs() < 1e-10);

        // gradient through the slice re-normalization
        let hh = 1e-6;
        for e in 0..r.as_slice().len() {
            let eval = |delta: f64| {
                let mut rr = r.clone();
                rr.as_mut_slice()[e] += delta;
                hybrid_loss(&crit, &rr, &pb, &pt, &n, HybridSplit { behavior: 3, time: 2 })
                    .unwrap()
                    .report
                    .total
            };
            let cd = (eval(hh) - eval(-hh)) / (2.0 * hh);
            assert!((cd - h.reference.as_slice()[e]).abs() < 1e-8);
        }
    }
}
