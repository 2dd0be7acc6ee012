//! Dense boundary-matrix reduction over every simplex of a small point
//! cloud, shared by the persistence tests.

use cebra_core::topology::distance_matrix;
use cebra_core::Matrix;

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            cur.push(v);
            rec(v + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Textbook column reduction of the full filtered boundary matrix.
pub fn oracle(points: &Matrix, max_dim: usize, radius: f64) -> Vec<Vec<(f64, f64)>> {
    let d = distance_matrix(points);
    let n = points.rows();
    let mut simplices: Vec<(f64, Vec<usize>)> = Vec::new();
    for k in 1..=(max_dim + 2).min(n) {
        for s in combinations(n, k) {
            let mut diam: f64 = 0.0;
            for a in 0..s.len() {
                for b in 0..a {
                    diam = diam.max(d.get(s[a], s[b]));
                }
            }
            if diam <= radius {
                simplices.push((diam, s));
            }
        }
    }
    simplices.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.len().cmp(&b.1.len())).then(a.1.cmp(&b.1)));
    let position: std::collections::HashMap<Vec<usize>, usize> =
        simplices.iter().enumerate().map(|(i, s)| (s.1.clone(), i)).collect();
    let mut columns: Vec<Vec<usize>> = simplices
        .iter()
        .map(|(_, s)| {
            let mut col: Vec<usize> = if s.len() == 1 {
                Vec::new()
            } else {
                (0..s.len())
                    .map(|drop| {
                        let face: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, &v)| v).collect();
                        position[&face]
                    })
                    .collect()
            };
            col.sort_unstable();
            col
        })
        .collect();
    let mut low_owner: std::collections::HashMap<usize, usize> = Default::default();
    let mut paired = vec![false; simplices.len()];
    let mut bars = vec![Vec::new(); max_dim + 1];
    for j in 0..columns.len() {
        while let Some(&low) = columns[j].last() {
            match low_owner.get(&low) {
                Some(&other) => {
                    let mut merged = Vec::new();
                    let (a, b) = (&columns[j], &columns[other]);
                    let (mut x, mut y) = (0, 0);
                    while x < a.len() || y < b.len() {
                        if y == b.len() || (x < a.len() && a[x] < b[y]) {
                            merged.push(a[x]);
                            x += 1;
                        } else if x == a.len() || b[y] < a[x] {
                            merged.push(b[y]);
                            y += 1;
                        } else {
                            x += 1;
                            y += 1;
                        }
                    }
                    columns[j] = merged;
                }
                None => break,
            }
        }
        if let Some(&low) = columns[j].last() {
            low_owner.insert(low, j);
            paired[low] = true;
            paired[j] = true;
            let dim = simplices[low].1.len() - 1;
            let (birth, death) = (simplices[low].0, simplices[j].0);
            if dim <= max_dim && (dim == 0 || death > birth) {
                bars[dim].push((birth, death));
            }
        }
    }
    for (i, (diam, s)) in simplices.iter().enumerate() {
        let dim = s.len() - 1;
        if !paired[i] && dim <= max_dim {
            bars[dim].push((*diam, f64::INFINITY));
        }
    }
    for b in &mut bars {
        b.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    }
    bars
}
