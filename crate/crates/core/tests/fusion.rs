#![allow(clippy::needless_range_loop)]

use mmff::fusion::{
    build_combined, decision_fusion, gcn_fusion_head, lstm_fusion, relation_fusion, sum_fusion,
    GcnFusionHead, Logits, LstmFusion, RelationApply, RelationFusion, SumFusion,
};
use mmff::params::ParamStore;
use mmff::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn eye(out: usize, inp: usize) -> Tensor {
    Tensor::from_fn(&[out, inp], |i| if i / inp == i % inp { 1.0 } else { 0.0 })
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn lstm_fusion_hand_set_two_plus_two() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let head = LstmFusion::new(&mut store, "f", 4, 4, 2, &mut rng);
    *store.get_mut(head.fc1.w) = eye(4, 4);
    *store.get_mut(head.fc1.b.unwrap()) = Tensor::zeros(&[4]);
    *store.get_mut(head.fc2.w) = eye(4, 4);
    *store.get_mut(head.fc2.b.unwrap()) = Tensor::zeros(&[4]);
    *store.get_mut(head.fc3.w) =
        Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    *store.get_mut(head.fc3.b.unwrap()) = Tensor::zeros(&[2]);

    let out = lstm_fusion(
        &Tensor::from_vec(vec![3.0, 0.0]),
        &Tensor::from_vec(vec![0.0, 4.0]),
        &store,
        &head,
    )
    .unwrap();
    assert!((out.scores[0] - 0.6).abs() <= 1e-12 && (out.scores[1] - 0.8).abs() <= 1e-12);
    assert_eq!(out.argmax(), 1);

    // negative pre-activation goes through the leaky slope
    let out = lstm_fusion(
        &Tensor::from_vec(vec![-3.0, 0.0]),
        &Tensor::from_vec(vec![0.0, 4.0]),
        &store,
        &head,
    )
    .unwrap();
    assert!((out.scores[0] + 0.006).abs() <= 1e-12);

    let z = Tensor::zeros(&[2]);
    assert!(matches!(
        lstm_fusion(&z, &z, &store, &head),
        Err(Error::ZeroVector)
    ));
}

#[test]
fn build_combined_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (cs, cr, s, v, t) = (2, 3, 4, 2, 3);
    let gcn = random(&[cs, t, v], &mut rng, 1.0);
    let rgb = random(&[cr, s], &mut rng, 1.0);
    let com = build_combined(&gcn, &rgb).unwrap();
    assert_eq!(com.shape(), &[cs + cr, s + v]);

    let skel = |c: usize, j: usize| {
        (0..t)
            .map(|ti| gcn.at3(c, ti, j))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let skel_mean = |c: usize| (0..v).map(|j| skel(c, j)).sum::<f64>() / v as f64;
    let rgb_mean = |c: usize| (0..s).map(|k| rgb.at2(c, k)).sum::<f64>() / s as f64;
    for r in 0..cs + cr {
        for col in 0..s + v {
            let e = match (r < cr, col < s) {
                (true, true) => rgb.at2(r, col),
                (true, false) => rgb_mean(r),
                (false, true) => skel_mean(r - cr),
                (false, false) => skel(r - cr, col - s),
            };
            assert!((com.at2(r, col) - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn relation_fusion_hand_set() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rel = RelationFusion::new(&mut store, "r", 2, 2, RelationApply::Aggregate, &mut rng);
    let th = Tensor::new(&[2, 2], vec![1.0, 0.5, -0.5, 2.0]).unwrap();
    let ph = Tensor::new(&[2, 2], vec![0.3, -1.0, 1.0, 0.2]).unwrap();
    *store.get_mut(rel.theta.w) = th.clone();
    *store.get_mut(rel.theta.b.unwrap()) = Tensor::from_vec(vec![0.1, -0.2]);
    *store.get_mut(rel.phi.w) = ph.clone();
    *store.get_mut(rel.phi.b.unwrap()) = Tensor::from_vec(vec![0.0, 0.4]);
    let f = Tensor::new(&[2, 3], vec![1.0, -1.0, 0.5, 0.2, 0.7, -0.3]).unwrap();
    let (f_rel, m) = relation_fusion(&f, &store, &rel).unwrap();

    let proj = |w: &Tensor, b: [f64; 2], k: usize| -> [f64; 2] {
        [
            w.at2(0, 0) * f.at2(0, k) + w.at2(0, 1) * f.at2(1, k) + b[0],
            w.at2(1, 0) * f.at2(0, k) + w.at2(1, 1) * f.at2(1, k) + b[1],
        ]
    };
    for i in 0..3 {
        let a = proj(&th, [0.1, -0.2], i);
        let row: Vec<f64> = (0..3)
            .map(|k| {
                let p = proj(&ph, [0.0, 0.4], k);
                a[0] * p[0] + a[1] * p[1]
            })
            .collect();
        let sm = softmax(&row);
        for k in 0..3 {
            assert!((m.at2(i, k) - sm[k]).abs() <= 1e-12);
        }
        for c in 0..2 {
            let e: f64 = (0..3).map(|k| sm[k] * f.at2(c, k)).sum();
            assert!((f_rel.at2(c, i) - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_relation_weights_give_uniform_mask_and_column_means() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rel = RelationFusion::new(&mut store, "r", 5, 3, RelationApply::Aggregate, &mut rng);
    for id in [rel.theta.w, rel.phi.w] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let f = random(&[5, 7], &mut rng, 1.0);
    let (f_rel, m) = relation_fusion(&f, &store, &rel).unwrap();
    assert!(m.data().iter().all(|&v| (v - 1.0 / 7.0).abs() <= 1e-15));
    for c in 0..5 {
        let mean = (0..7).map(|k| f.at2(c, k)).sum::<f64>() / 7.0;
        for i in 0..7 {
            assert!((f_rel.at2(c, i) - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn gcn_head_two_classes_and_random_draws() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let head = GcnFusionHead::new(&mut store, "h", 3, 4, 5, 2, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let out = gcn_fusion_head(&random(&[3, 6], &mut rng, 1.0), &store, &head).unwrap();
    assert_eq!(out.probs, vec![0.5, 0.5]);

    let mut store = ParamStore::new();
    let head = GcnFusionHead::new(&mut store, "h", 3, 4, 5, 2, &mut rng);
    for _ in 0..100 {
        let f = random(&[3, 6], &mut rng, 3.0);
        let out = gcn_fusion_head(&f, &store, &head).unwrap();
        assert_eq!(out.classes(), 2);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(out.probs.iter().all(|p| (0.0..=1.0).contains(p)));

        // scalar reference of conv → relu → mean → fc → relu → fc
        let lin = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            (0..w.shape()[0])
                .map(|o| b.data()[o] + (0..x.len()).map(|i| w.at2(o, i) * x[i]).sum::<f64>())
                .collect()
        };
        let p = |id| store.get(id);
        let mut pooled = vec![0.0; 4];
        for k in 0..6 {
            let col: Vec<f64> = (0..3).map(|c| f.at2(c, k)).collect();
            for (acc, v) in
                pooled
                    .iter_mut()
                    .zip(lin(p(head.conv.w), p(head.conv.b.unwrap()), &col))
            {
                *acc += v.max(0.0) / 6.0;
            }
        }
        let h: Vec<f64> = lin(p(head.fc1.w), p(head.fc1.b.unwrap()), &pooled)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let s = lin(p(head.fc2.w), p(head.fc2.b.unwrap()), &h);
        for (a, b) in out.scores.iter().zip(&s) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn decision_fusion_weighted_average() {
    let a = Logits::from_scores(vec![2.0, 0.0, -1.0]);
    let b = Logits::from_scores(vec![0.0, 1.0, 0.5]);
    let out = decision_fusion(&a, &b, 0.3).unwrap();
    let (pa, pb) = (softmax(&a.scores), softmax(&b.scores));
    for k in 0..3 {
        assert!((out.probs[k] - (0.3 * pa[k] + 0.7 * pb[k])).abs() <= 1e-15);
    }
    assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    assert!(decision_fusion(&a, &Logits::from_scores(vec![0.0; 2]), 0.5).is_err());
}

#[test]
fn sum_fusion_zero_rgb_and_symmetric_swap() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let head = SumFusion::new(&mut store, "s", 4, 4, 3, 2, &mut rng);
    let fs = random(&[4], &mut rng, 1.0);
    let fr = random(&[4], &mut rng, 1.0);

    let zero_rgb = sum_fusion(&fs, &Tensor::zeros(&[4]), &store, &head).unwrap();
    let ws = store.get(head.proj_skel.w).clone();
    let (wf, bf) = (
        store.get(head.fc.w).clone(),
        store.get(head.fc.b.unwrap()).clone(),
    );
    let z: Vec<f64> = (0..3)
        .map(|o| (0..4).map(|i| ws.at2(o, i) * fs.data()[i]).sum())
        .collect();
    for k in 0..2 {
        let e = bf.data()[k] + (0..3).map(|o| wf.at2(k, o) * z[o]).sum::<f64>();
        assert!((zero_rgb.scores[k] - e).abs() <= 1e-12);
    }

    let before = sum_fusion(&fs, &fr, &store, &head).unwrap();
    let wr = store.get(head.proj_rgb.w).clone();
    *store.get_mut(head.proj_skel.w) = wr;
    *store.get_mut(head.proj_rgb.w) = ws;
    let after = sum_fusion(&fr, &fs, &store, &head).unwrap();
    for (a, b) in before.scores.iter().zip(&after.scores) {
        assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn relation_mask_rows_are_distributions(seed in 0u64..10_000, n in 1usize..9, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rel = RelationFusion::new(&mut store, "r", c, 2, RelationApply::Aggregate, &mut rng);
        let f = random(&[c, n], &mut rng, 4.0);
        let (f_rel, m) = relation_fusion(&f, &store, &rel).unwrap();
        for i in 0..n {
            let s: f64 = (0..n).map(|k| m.at2(i, k)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        // every output column is a convex combination of the input columns
        for ch in 0..c {
            let lo = (0..n).map(|k| f.at2(ch, k)).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|k| f.at2(ch, k)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                prop_assert!(f_rel.at2(ch, i) >= lo - 1e-12 && f_rel.at2(ch, i) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn relation_fusion_is_permutation_equivariant(seed in 0u64..10_000, n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rel = RelationFusion::new(&mut store, "r", 3, 2, RelationApply::Aggregate, &mut rng);
        let f = random(&[3, n], &mut rng, 2.0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let fp = Tensor::from_fn(&[3, n], |i| f.at2(i / n, perm[i % n]));
        let (a, ma) = relation_fusion(&f, &store, &rel).unwrap();
        let (b, mb) = relation_fusion(&fp, &store, &rel).unwrap();
        for i in 0..n {
            for ch in 0..3 {
                prop_assert!((b.at2(ch, i) - a.at2(ch, perm[i])).abs() <= 1e-10);
            }
            for k in 0..n {
                prop_assert!((mb.at2(i, k) - ma.at2(perm[i], perm[k])).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn lstm_fusion_ignores_positive_scale(seed in 0u64..10_000, s in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = LstmFusion::new(&mut store, "f", 5, 4, 3, &mut rng);
        let (a, b) = (random(&[2], &mut rng, 1.0), random(&[3], &mut rng, 1.0));
        let x = lstm_fusion(&a, &b, &store, &head).unwrap();
        let y = lstm_fusion(&a.map(|v| v * s), &b.map(|v| v * s), &store, &head).unwrap();
        for (p, q) in x.scores.iter().zip(&y.scores) {
            prop_assert!((p - q).abs() <= 1e-9);
        }
    }

    #[test]
    fn combined_shape(cs in 1usize..5, cr in 1usize..5, s in 1usize..6, v in 1usize..6, t in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64((cs * 1000 + cr * 100 + s * 10 + v) as u64);
        let com = build_combined(&random(&[cs, t, v], &mut rng, 1.0), &random(&[cr, s], &mut rng, 1.0)).unwrap();
        prop_assert_eq!(com.shape(), &[cs + cr, s + v]);
    }
}
