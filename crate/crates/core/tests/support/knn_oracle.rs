//! Brute-force cosine kNN used as the decoding oracle.

use cebra_core::Matrix;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Full sort of every training row by cosine similarity, ties to the smaller index.
pub fn brute_neighbors(train: &Matrix, q: &[f64]) -> Vec<usize> {
    let q = unit(q);
    let mut scored: Vec<(f64, usize)> = (0..train.rows())
        .map(|i| (unit(train.row(i)).iter().zip(&q).map(|(a, b)| a * b).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|s| s.1).collect()
}

pub fn brute_predict(train: &Matrix, labels: &[u32], y: &Matrix, queries: &Matrix, k: usize) -> (Vec<u32>, Matrix) {
    let mut classes = Vec::new();
    let mut values = Matrix::zeros(queries.rows(), y.cols());
    for i in 0..queries.rows() {
        let nb = &brute_neighbors(train, queries.row(i))[..k];
        let mut votes = std::collections::BTreeMap::<u32, usize>::new();
        for &j in nb {
            *votes.entry(labels[j]).or_default() += 1;
            for c in 0..y.cols() {
                values.set(i, c, values.get(i, c) + y.get(j, c));
            }
        }
        let top = votes.values().copied().max().unwrap();
        classes.push(*votes.iter().find(|(_, &v)| v == top).unwrap().0);
        for c in 0..y.cols() {
            values.set(i, c, values.get(i, c) / k as f64);
        }
    }
    (classes, values)
}

pub fn accuracy(p: &[u32], t: &[u32]) -> f64 {
    p.iter().zip(t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}
