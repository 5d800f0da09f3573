//! Randomized invariant checks across the numeric core.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsyn::autodiff::Graph;
use segsyn::checkpoint;
use segsyn::gradcheck::grad_check;
use segsyn::latent::{tree_marginals, MttVariant};
use segsyn::matrix::Matrix;
use segsyn::oracle::hard_segment_band;
use segsyn::params::{Init, ParamStore};
use segsyn::segment::segment_mask;
use segsyn::train::sweep_modes;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

fn random_instance(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edge = random_matrix(&mut rng, n, n, 0.05, 5.0);
    for i in 0..n {
        edge.set(i, i, 0.0);
    }
    let root = (0..n).map(|_| rng.gen_range(0.05..5.0)).collect();
    (edge, root)
}

/// Softmax each row so boundary matrices are genuine distributions.
fn row_distributions(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut m = random_matrix(rng, n, n, -2.0, 2.0);
    for i in 0..n {
        let mx = (0..n).map(|j| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            z += (m.get(i, j) - mx).exp();
        }
        for j in 0..n {
            m.set(i, j, (m.get(i, j) - mx).exp() / z);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn marginals_obey_distribution_laws(n in 2usize..=6, seed in any::<u64>()) {
        let (edge, root) = random_instance(n, seed);
        let g = Graph::new();
        let phi = Matrix::from_vec(n, 1, root);
        let tm = tree_marginals(&g, g.constant(edge), g.constant(phi), MttVariant::FirstRow).unwrap();
        let marg = tm.marginals.value();
        let roots = tm.root_probs.value();

        let root_sum: f64 = (0..n).map(|i| roots.get(i, 0)).sum();
        prop_assert!((root_sum - 1.0).abs() <= 1e-8, "root sum {root_sum}");
        for j in 0..n {
            let col: f64 = (0..n).map(|i| marg.get(i, j)).sum();
            prop_assert!((roots.get(j, 0) + col - 1.0).abs() <= 1e-8, "column {j} law");
            for i in 0..n {
                let m = marg.get(i, j);
                prop_assert!((-1e-8..=1.0 + 1e-8).contains(&m), "marginal [{i}][{j}] = {m}");
            }
        }
    }

    #[test]
    fn scaling_all_weights_preserves_marginals(n in 2usize..=5, seed in any::<u64>(), scale in 0.2f64..5.0) {
        let (edge, root) = random_instance(n, seed);
        let g = Graph::new();
        let phi = Matrix::from_vec(n, 1, root.clone());
        let base = tree_marginals(&g, g.constant(edge.clone()), g.constant(phi), MttVariant::FirstRow).unwrap();

        let mut scaled_edge = edge;
        for i in 0..n {
            for j in 0..n {
                scaled_edge.set(i, j, scaled_edge.get(i, j) * scale);
            }
        }
        let scaled_phi = Matrix::from_vec(n, 1, root.iter().map(|w| w * scale).collect());
        let scaled = tree_marginals(&g, g.constant(scaled_edge), g.constant(scaled_phi), MttVariant::FirstRow).unwrap();

        prop_assert!(base.marginals.value().max_abs_diff(&scaled.marginals.value()) <= 1e-7);
        prop_assert!(base.root_probs.value().max_abs_diff(&scaled.root_probs.value()) <= 1e-7);
    }

    #[test]
    fn diagonal_variant_stays_finite(n in 2usize..=5, seed in any::<u64>()) {
        let (edge, root) = random_instance(n, seed);
        let g = Graph::new();
        let phi = Matrix::from_vec(n, 1, root);
        let tm = tree_marginals(&g, g.constant(edge), g.constant(phi), MttVariant::Diagonal).unwrap();
        prop_assert!(tm.marginals.value().data().iter().all(|v| v.is_finite()));
        prop_assert!(tm.root_probs.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_softmax_rows_are_conditional_distributions(rows in 1usize..=5, cols in 2usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, rows, cols, -3.0, 3.0);
        // Finite entries keep a cell, negative infinity kills it.
        let mut mask = Matrix::filled(rows, cols, f64::NEG_INFINITY);
        for i in 0..rows {
            let keep = rng.gen_range(1..=cols);
            let mut cols_idx: Vec<usize> = (0..cols).collect();
            for k in (1..cols_idx.len()).rev() {
                cols_idx.swap(k, rng.gen_range(0..=k));
            }
            for &j in cols_idx.iter().take(keep) {
                mask.set(i, j, 1.0);
            }
        }
        let g = Graph::new();
        let p = g.masked_softmax(g.constant(x), &mask).unwrap().value();
        for i in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                if mask.get(i, j) == f64::NEG_INFINITY {
                    prop_assert_eq!(p.get(i, j), 0.0, "killed entry must be exactly zero");
                } else {
                    prop_assert!(p.get(i, j) >= 0.0);
                    sum += p.get(i, j);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn soft_segment_mask_stays_in_unit_interval(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_l = row_distributions(&mut rng, n);
        let phi_r = row_distributions(&mut rng, n);
        let g = Graph::new();
        let m = segment_mask(&g, g.constant(phi_l), g.constant(phi_r)).value();
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v), "mask [{i}][{j}] = {v}");
            }
        }
    }

    #[test]
    fn hard_band_contains_its_own_token(n in 1usize..=10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp: Vec<usize> = (0..n).map(|i| rng.gen_range(0..=i)).collect();
        let rp: Vec<usize> = (0..n).map(|i| rng.gen_range(i..n)).collect();
        let band = hard_segment_band(&lp, &rp).unwrap();
        for i in 0..n {
            prop_assert_eq!(band.get(i, i), 1.0, "token {} outside its own window", i);
            for j in 0..n {
                let inside = lp[i] <= j && j <= rp[i];
                prop_assert_eq!(band.get(i, j), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>(), count in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(0);
        for k in 0..count {
            let rows = rng.gen_range(1..=5);
            let cols = rng.gen_range(1..=5);
            store.insert(format!("p{k}"), random_matrix(&mut rng, rows, cols, -10.0, 10.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        checkpoint::save(&store, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        prop_assert_eq!(loaded.len(), store.len());
        for p in store.iter() {
            let got = loaded.get(&p.name).expect("name survives");
            prop_assert_eq!(got.shape(), p.value.shape());
            prop_assert_eq!(got.max_abs_diff(&p.value), 0.0);
        }
    }

    #[test]
    fn softmax_chain_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.gen_range(1..=3);
        let inner = rng.gen_range(1..=4);
        let targets = random_matrix(&mut rng, rows, 3, 0.0, 1.0);

        let mut store = ParamStore::new(seed);
        let report = grad_check(
            &mut store,
            |s, with_grads| {
                let g = Graph::new();
                let x = g.param(s, "x", rows, inner, Init::Uniform);
                let w = g.param(s, "w", inner, 3, Init::Uniform);
                let p = g.softmax_rows(g.matmul(x, w));
                let loss = g.bce_probs_sum(p, &targets);
                if with_grads {
                    g.backward(loss)?;
                    g.export_grads(s);
                }
                Ok(loss.scalar_value())
            },
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err());
    }
}

#[test]
fn sweep_mode_list_is_stable() {
    let cfg = segsyn::config::Config::default();
    let names: Vec<String> = sweep_modes(&cfg).into_iter().map(|(m, _)| m).collect();
    assert_eq!(
        names,
        ["full", "no_sesg", "no_sylg", "no_fusion", "concat", "sum", "gate"]
    );
}
