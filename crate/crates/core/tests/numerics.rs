use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tpc_core::numerics::{
    analytic_gradients, compare_with_central_differences, finite_difference_check, GradCheckOptions,
    Graph, ParamStore, Tensor,
};

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut r, 3, 4);
    let b = random(&mut r, 4, 2);
    let c = a.matmul(&b).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.get(i, k) * b.get(k, j);
            }
            assert!((c.get(i, j) - s).abs() < 1e-12);
        }
    }
}

fn composite_store(seed: u64) -> ParamStore {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.add("x", random(&mut r, 3, 4), true).unwrap();
    store.add("w", random(&mut r, 4, 4), true).unwrap();
    store.add("g", Tensor::vector(random(&mut r, 1, 4).into_data()), true).unwrap();
    store.add("b", Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]), true).unwrap();
    store.add("frozen", random(&mut r, 4, 4), false).unwrap();
    store
}

fn composite<'s>(g: &mut Graph<'s>, s: &'s ParamStore) -> tpc_core::Result<tpc_core::numerics::Var> {
    let x = g.param(s, s.id("x").unwrap());
    let w = g.param(s, s.id("w").unwrap());
    let gain = g.param(s, s.id("g").unwrap());
    let bias = g.param(s, s.id("b").unwrap());
    let f = g.param(s, s.id("frozen").unwrap());
    let h = g.matmul(x, w)?;
    let h = g.layer_norm(h, gain, bias)?;
    let h = g.gelu(h)?;
    let ht = g.transpose(h)?;
    let scores = g.matmul(h, ht)?;
    let attn = g.softmax_rows(scores, None)?;
    let mixed = g.matmul(attn, h)?;
    let y = g.matmul(mixed, f)?;
    let y = g.sigmoid(y)?;
    let y = g.square(y)?;
    g.mean(y)
}

#[test]
fn corrupted_gradient_is_detected() {
    let mut store = composite_store(1);
    let mut objective = composite;
    let (_, mut grads) = analytic_gradients(&store, &mut objective).unwrap();
    let clean = compare_with_central_differences(&mut store, &mut objective, &grads, &GradCheckOptions::default()).unwrap();
    assert!(clean.max_rel_error < 1e-6, "{clean:?}");
    grads.scale(1.01);
    let bad = compare_with_central_differences(&mut store, &mut objective, &grads, &GradCheckOptions::default()).unwrap();
    assert!(bad.max_rel_error > 1e-3, "{bad:?}");
}

#[test]
fn frozen_parameters_are_not_checked_or_touched() {
    let mut store = composite_store(2);
    let before = store.clone();
    let report = finite_difference_check(&mut store, composite, &GradCheckOptions::default()).unwrap();
    assert_eq!(report.checked, 12 + 16 + 4 + 4);
    for (id, p) in store.iter() {
        assert_eq!(p.value, *before.value(id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_agree(seed in 0u64..10_000) {
        let mut store = composite_store(seed);
        let report = finite_difference_check(&mut store, composite, &GradCheckOptions::default()).unwrap();
        prop_assert!(report.max_rel_error < 1e-5, "{:?}", report);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, data).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        for i in 0..3 {
            let s: f64 = g.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
