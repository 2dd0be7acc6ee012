use cebra_core::eval::{
    bin_align, consistency_r2, knn_decode, knn_predict, nearest_neighbors, Predictions, Targets,
};
use cebra_core::Matrix;
use proptest::prelude::*;

#[path = "support/knn_oracle.rs"]
mod knn_oracle;
use knn_oracle::{accuracy, brute_neighbors, brute_predict};

/// Nonzero integer rows so that exact cosine ties are common.
fn int_rows(n: usize, d: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(proptest::collection::vec(-2i32..=2, d), n).prop_map(move |rows| {
        let data = rows
            .into_iter()
            .flat_map(|mut r| {
                if r.iter().all(|&v| v == 0) {
                    r[0] = 1;
                }
                r.into_iter().map(f64::from)
            })
            .collect();
        Matrix::from_vec(n, d, data).unwrap()
    })
}

fn instance() -> impl Strategy<Value = (Matrix, Vec<u32>, Matrix, Matrix, Matrix)> {
    (2usize..=300, 1usize..=60, 1usize..=4).prop_flat_map(|(n, nq, d)| {
        (
            int_rows(n, d),
            proptest::collection::vec(0u32..4, n),
            int_rows(nq, d),
            int_rows(nq, d),
        )
            .prop_map(|(train, labels, val, test)| {
                let y = Matrix::from_vec(
                    labels.len(),
                    1,
                    labels.iter().enumerate().map(|(i, &l)| (i % 7) as f64 + l as f64 * 0.5).collect(),
                )
                .unwrap();
                (train, labels, y, val, test)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn knn_decode_matches_brute_force((train, labels, y, val, test) in instance()) {
        let n = train.rows();
        let grid: Vec<usize> = [1usize, 4, 9, 16, 25].into_iter().filter(|&k| k <= n).collect();
        let val_labels: Vec<u32> = (0..val.rows()).map(|i| (i % 4) as u32).collect();

        // oracle: score every k on validation, keep the first best, predict test
        let mut best = (0, f64::NEG_INFINITY);
        for &k in &grid {
            let s = accuracy(&brute_predict(&train, &labels, &y, &val, k).0, &val_labels);
            if s > best.1 {
                best = (k, s);
            }
        }
        let got = knn_decode(&train, Targets::Classes(&labels), &val, Targets::Classes(&val_labels), &test, &grid).unwrap();
        prop_assert_eq!(got.k, best.0);
        let (want_classes, _) = brute_predict(&train, &labels, &y, &test, best.0);
        prop_assert_eq!(got.predictions, Predictions::Classes(want_classes));

        for &k in &grid {
            let nb = nearest_neighbors(&train, &test, k).unwrap();
            for (i, row) in nb.iter().enumerate() {
                prop_assert_eq!(&row[..], &brute_neighbors(&train, test.row(i))[..k]);
            }
            let (_, want_values) = brute_predict(&train, &labels, &y, &test, k);
            match knn_predict(&train, Targets::Continuous(&y), &test, k).unwrap() {
                Predictions::Continuous(m) => {
                    for (a, b) in m.as_slice().iter().zip(want_values.as_slice()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }

    #[test]
    fn one_neighbor_self_decoding_is_perfect(n in 1usize..=500, d in 2usize..=5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<u32> = (0..n as u32).collect();
        let pred = knn_predict(&x, Targets::Classes(&labels), &x, 1).unwrap();
        prop_assert_eq!(pred, Predictions::Classes(labels));
    }

    #[test]
    fn consistency_is_invariant_to_affine_maps_of_the_source(
        n in 20usize..=200,
        p in 1usize..=4,
        q in 1usize..=4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = |r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let source = g(n, p);
        let noise = g(n, q);
        let mix = g(p, q);
        let mut target = source.matmul(&mix).unwrap();
        for (t, e) in target.as_mut_slice().iter_mut().zip(noise.as_slice()) {
            *t = t.sin() + 0.3 * e;
        }
        // well-conditioned invertible map: identity plus a small perturbation
        let mut a = g(p, p);
        for v in a.as_mut_slice() {
            *v *= 0.2;
        }
        for i in 0..p {
            a.set(i, i, a.get(i, i) + 1.5);
        }
        let shift = g(1, p);
        let mut moved = source.matmul(&a).unwrap();
        for i in 0..n {
            for (v, b) in moved.row_mut(i).iter_mut().zip(shift.row(0)) {
                *v += 3.0 * b;
            }
        }
        let r0 = consistency_r2(&source, &target).unwrap().r2;
        let r1 = consistency_r2(&moved, &target).unwrap().r2;
        prop_assert!((r0 - r1).abs() < 1e-9, "{} vs {}", r0, r1);
    }

    #[test]
    fn bin_align_rows_are_unit_norm(
        extra in 0usize..=200,
        d in 1usize..=6,
        bins in 1usize..=30,
        two_directions in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let width = 1.6 / bins as f64;
        let directions = if two_directions { 2 } else { 1 };
        // one sample per bin and direction, except every third bin which is
        // left to be filled from its neighbors
        let mut pos = Vec::new();
        let mut dir = Vec::new();
        for k in 0..directions {
            for b in (0..bins).filter(|b| b % 3 != 1 || bins == 1) {
                pos.push((b as f64 + 0.5) * width);
                dir.push(k as u32);
            }
        }
        for _ in 0..extra {
            pos.push(rng.random_range(0.0..1.6));
            dir.push(rng.random_range(0..directions as u32));
        }
        let n = pos.len();
        let mut emb = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for i in 0..n {
            emb.set(i, 0, emb.get(i, 0).abs() + 0.1);
        }
        let aligned = bin_align(&emb, &pos, two_directions.then_some(&dir[..]), bins, Some((0.0, 1.6))).unwrap();
        prop_assert_eq!(aligned.rows.rows(), bins * directions);
        for row in aligned.rows.iter_rows() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12, "norm {}", norm);
        }
    }
}
