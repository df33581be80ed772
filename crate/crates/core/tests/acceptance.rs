#![allow(clippy::needless_range_loop)]

//! End-to-end acceptance gates, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL` line with its measurements and wall time.
//!
//! Tests take a shared lock so the per-criterion timings are not inflated by
//! each other on small machines.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mmff::augmentation::{
    augment_rotate, augment_scale, rotation_matrix, CropTransform, RotationSpec, ScaleSpec,
};
use mmff::autograd::Graph;
use mmff::checkpoint::Checkpoint;
use mmff::complexity::{complexity, VIDEO_FRAMES};
use mmff::config::RunConfig;
use mmff::fusion::{
    build_combined, lstm_fusion, relation_fusion, GcnFusionHead, LstmFusion, RelationApply,
    RelationFusion,
};
use mmff::gradcheck::{check_input, check_params, probe, GradCheckReport};
use mmff::model::{Model, Stream};
use mmff::nn::bind;
use mmff::params::ParamStore;
use mmff::rgb_stream::{
    max_moving_joint, self_attention, skeleton_attention, skeleton_attention_mask,
    skeleton_mask_geometry, AttentionMask, Backbone, BackboneConfig, SelfAttentionBranch,
};
use mmff::skeleton_io::{va_pre_normalize, CameraParams, Dataset, SkeletonSequence};
use mmff::skeleton_stream::lstm::lstm_step;
use mmff::skeleton_stream::{
    build_graph, graph_conv, GraphConv, LstmCellWeights, PartitionStrategy, DEGREE_EPS,
};
use mmff::synthdata::{generate_dataset, SynthSpec};
use mmff::training::{
    evaluate, prepare_split, split_indices, train_stages, Experiment, Predictor, Trainer,
    VariantResult,
};
use mmff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line and fails the test if any check failed.
struct Verdict {
    id: u8,
    start: Instant,
    budget: Duration,
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Verdict {
    fn new(id: u8, budget_s: u64) -> Self {
        Self {
            id,
            start: Instant::now(),
            budget: Duration::from_secs(budget_s),
            notes: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(mut self) {
        let took = self.start.elapsed();
        self.check(
            took < self.budget,
            format!(
                "runtime {:.2}s < {}s",
                took.as_secs_f64(),
                self.budget.as_secs()
            ),
        );
        let status = if self.failures.is_empty() {
            "PASS"
        } else {
            "FAIL"
        };
        let detail = if self.failures.is_empty() {
            self.notes.join("; ")
        } else {
            format!("failed: {}", self.failures.join("; "))
        };
        // straight to the stderr handle: libtest only captures the print macros
        let line = format!("criterion {}: {status} ({detail})\n", self.id);
        let _ = std::io::stderr().write_all(line.as_bytes());
        assert!(
            self.failures.is_empty(),
            "criterion {} failed: {:?}",
            self.id,
            self.failures
        );
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random(&shape, rng, scale);
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn random_seq(rng: &mut ChaCha8Rng, t: usize, n: usize) -> SkeletonSequence {
    SkeletonSequence::new(
        t,
        n,
        (0..t * n * 3)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect(),
    )
    .unwrap()
}

#[test]
fn criterion_01_geometry() {
    let _g = serial();
    let mut v = Verdict::new(1, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut orth, mut det_dev, mut rot_rel, mut scale_rel) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let spec = RotationSpec {
            alpha: rng.random_range(-180.0..180.0),
            beta: rng.random_range(-180.0..180.0),
            gamma: rng.random_range(-180.0..180.0),
        };
        let r = rotation_matrix(&spec);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                orth = orth.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        det_dev = det_dev.max((det - 1.0).abs());

        let seq = random_seq(&mut rng, 2, 9);
        let rot = augment_rotate(&seq, &spec);
        let s = rng.random_range(0.1..5.0);
        let scaled = augment_scale(
            &seq,
            &ScaleSpec {
                sx: s,
                sy: s,
                sz: s,
            },
        );
        for t in 0..2 {
            for a in 0..9 {
                for b in a + 1..9 {
                    let d0 = dist(seq.joint(t, a), seq.joint(t, b));
                    rot_rel = rot_rel.max((dist(rot.joint(t, a), rot.joint(t, b)) - d0).abs() / d0);
                    scale_rel = scale_rel.max(
                        (dist(scaled.joint(t, a), scaled.joint(t, b)) - s * d0).abs() / (s * d0),
                    );
                }
            }
        }
    }
    v.check(orth <= 1e-9, format!("max |RᵀR-I| {orth:.1e}"));
    v.check(det_dev <= 1e-9, format!("max |det-1| {det_dev:.1e}"));
    v.check(
        rot_rel <= 1e-9,
        format!("rotation distance rel {rot_rel:.1e}"),
    );
    v.check(
        scale_rel <= 1e-9,
        format!("scale distance rel {scale_rel:.1e}"),
    );
    v.finish();
}

#[test]
fn criterion_02_va_pre() {
    let _g = serial();
    let mut v = Verdict::new(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut mean_dev, mut idem, mut equi) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let (t, n) = (rng.random_range(1..10), rng.random_range(1..26));
        let seq = random_seq(&mut rng, t, n);
        let out = va_pre_normalize(&seq);
        for c in 0..3 {
            let m = (0..n).map(|j| out.joint(0, j)[c]).sum::<f64>() / n as f64;
            mean_dev = mean_dev.max(m.abs());
        }
        let twice = va_pre_normalize(&out);
        idem = idem.max(
            twice
                .data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let d = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        ];
        let moved = va_pre_normalize(&seq.map_joints(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]));
        equi = equi.max(
            moved
                .data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    v.check(mean_dev <= 1e-12, format!("frame-1 mean {mean_dev:.1e}"));
    v.check(idem <= 1e-12, format!("idempotence {idem:.1e}"));
    v.check(equi <= 1e-12, format!("translation {equi:.1e}"));
    v.finish();
}

/// Every connected simple graph on `v` nodes, one representative per isomorphism class.
fn connected_graphs(v: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..v)
        .flat_map(|a| (a + 1..v).map(move |b| (a, b)))
        .collect();
    let perms = permutations(v);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &e)| e)
            .collect();
        if !is_connected(v, &edges) {
            continue;
        }
        let canon = perms
            .iter()
            .map(|p| {
                let mut e: Vec<(usize, usize)> = edges
                    .iter()
                    .map(|&(a, b)| (p[a].min(p[b]), p[a].max(p[b])))
                    .collect();
                e.sort();
                e
            })
            .min()
            .unwrap();
        if seen.insert(canon) {
            out.push(edges);
        }
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn is_connected(v: usize, edges: &[(usize, usize)]) -> bool {
    let mut reached = vec![false; v];
    reached[0] = true;
    let mut changed = true;
    while changed {
        changed = false;
        for &(a, b) in edges {
            if reached[a] != reached[b] {
                reached[a] = true;
                reached[b] = true;
                changed = true;
            }
        }
    }
    reached.iter().all(|&r| r)
}

/// `b + Σ_j Λ_j^{-1/2} A_j Λ'_j^{-1/2} f W_j` with dense matrices and plain loops.
fn dense_graph_conv(parts: &[Tensor], f: &Tensor, ws: &[Tensor], bias: &[f64]) -> Tensor {
    let (cin, t, v) = f.dims3().unwrap();
    let cout = ws[0].shape()[1];
    let mut out = Tensor::from_fn(&[cout, t, v], |i| bias[i / (t * v)]);
    for (a, w) in parts.iter().zip(ws) {
        let row: Vec<f64> = (0..v)
            .map(|i| (0..v).map(|k| a.at2(i, k)).sum::<f64>() + DEGREE_EPS)
            .collect();
        let col: Vec<f64> = (0..v)
            .map(|k| (0..v).map(|i| a.at2(i, k)).sum::<f64>() + DEGREE_EPS)
            .collect();
        for o in 0..cout {
            for ti in 0..t {
                for i in 0..v {
                    let mut s = 0.0;
                    for k in 0..v {
                        let norm = a.at2(i, k) / (row[i].sqrt() * col[k].sqrt());
                        for c in 0..cin {
                            s += norm * f.at3(c, ti, k) * w.at2(c, o);
                        }
                    }
                    let cur = out.at3(o, ti, i);
                    out.set3(o, ti, i, cur + s);
                }
            }
        }
    }
    out
}

fn graph_conv_case(
    edges: &[(usize, usize)],
    v: usize,
    strategy: PartitionStrategy,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let graph = build_graph(edges, v, strategy).unwrap();
    let (cin, cout, t) = (
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let mut store = ParamStore::new();
    let layer = GraphConv::new(
        &mut store,
        "g",
        graph.partition_count(),
        cin,
        cout,
        true,
        rng,
    );
    randomize(&mut store, rng, 2.0);
    let f = random(&[cin, t, v], rng, 3.0);
    let got = graph_conv(&f, &graph, &store, &layer).unwrap();

    // A + I built directly from the edge list; the partitions must add up to it
    let mut a_plus_i = vec![vec![0.0; v]; v];
    for (i, row) in a_plus_i.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(a, b) in edges {
        a_plus_i[a][b] = 1.0;
        a_plus_i[b][a] = 1.0;
    }
    for (i, row) in a_plus_i.iter().enumerate() {
        for (k, &e) in row.iter().enumerate() {
            let s: f64 = graph.partitions().iter().map(|p| p.at2(i, k)).sum();
            assert_eq!(s, e, "partitions do not sum to A + I");
        }
    }
    let parts: Vec<Tensor> = match strategy {
        PartitionStrategy::Uniform => vec![Tensor::from_fn(&[v, v], |i| a_plus_i[i / v][i % v])],
        PartitionStrategy::Spatial { .. } => graph.partitions().to_vec(),
    };
    let ws: Vec<Tensor> = layer
        .weights
        .iter()
        .map(|&id| store.get(id).clone())
        .collect();
    let bias = store.get(layer.bias.unwrap()).data().to_vec();
    got.max_abs_diff(&dense_graph_conv(&parts, &f, &ws, &bias))
}

#[test]
fn criterion_03_graph_conv_oracle() {
    let _g = serial();
    let mut v = Verdict::new(3, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    let mut graphs = 0;
    for n in 1..=5 {
        for edges in connected_graphs(n) {
            graphs += 1;
            worst = worst.max(graph_conv_case(
                &edges,
                n,
                PartitionStrategy::Uniform,
                &mut rng,
            ));
            for center in 0..n {
                worst = worst.max(graph_conv_case(
                    &edges,
                    n,
                    PartitionStrategy::Spatial { center },
                    &mut rng,
                ));
            }
        }
    }
    v.check(
        graphs == 1 + 1 + 2 + 6 + 21,
        format!("{graphs} connected graphs up to isomorphism"),
    );
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|b| (rng.random_range(0..b), b)).collect();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.3) && !edges.contains(&(a, b)) {
                    edges.push((a, b));
                }
            }
        }
        let strategy = if rng.random_bool(0.5) {
            PartitionStrategy::Uniform
        } else {
            PartitionStrategy::Spatial {
                center: rng.random_range(0..n),
            }
        };
        worst = worst.max(graph_conv_case(&edges, n, strategy, &mut rng));
    }
    v.check(
        worst <= 1e-12,
        format!("max abs diff {worst:.1e} over exhaustive + 100 random"),
    );
    v.finish();
}

#[test]
fn criterion_04_attention_contracts() {
    let _g = serial();
    let mut v = Verdict::new(4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cam = CameraParams {
        fx: 20.0,
        fy: 20.0,
        cx: 16.0,
        cy: 16.0,
        image_w: 32,
        image_h: 32,
    };
    let crop = CropTransform::full_frame(32, 32, 32, 32);
    let (mut in_range, mut binary, mut shrinks) = (true, true, true);
    for _ in 0..300 {
        let data = (0..4 * 6 * 3)
            .map(|i| {
                if i % 3 == 2 {
                    rng.random_range(1.5..3.0)
                } else {
                    rng.random_range(-0.5..0.5)
                }
            })
            .collect();
        let seq = SkeletonSequence::new(4, 6, data).unwrap();
        let frac = rng.random_range(0.01..1.0);
        let geo = skeleton_mask_geometry(&seq, 2, &cam, &crop, frac).unwrap();
        binary &= geo.raster.iter().all(|&x| x == 0.0 || x == 1.0);
        let mask = skeleton_attention_mask(&seq, 2, &cam, &crop, 8, 8, frac).unwrap();
        in_range &= mask.values().iter().all(|x| (0.0..=1.0).contains(x));

        let f = random(&[3, 8, 8], &mut rng, 5.0);
        let out = skeleton_attention(&f, &mask).unwrap();
        shrinks &= out
            .data()
            .iter()
            .zip(f.data())
            .all(|(o, i)| o.abs() <= i.abs());

        let mut store = ParamStore::new();
        let br = SelfAttentionBranch::new(&mut store, "sa", 3, 2, &mut rng);
        randomize(&mut store, &mut rng, 3.0);
        let (fs, m) = self_attention(&f, &store, &br).unwrap();
        in_range &= m.values().iter().all(|x| (0.0..=1.0).contains(x));
        shrinks &= fs
            .data()
            .iter()
            .zip(f.data())
            .all(|(o, i)| o.abs() <= i.abs());
    }
    v.check(in_range, "masks in [0,1]");
    v.check(binary, "skeleton raster binary");
    v.check(shrinks, "|F_out| <= |F_in|");

    let mut store = ParamStore::new();
    let br = SelfAttentionBranch::new(&mut store, "sa", 4, 2, &mut rng);
    *store.get_mut(br.conv.w) = Tensor::zeros(&[1, 4, 1, 1]);
    *store.get_mut(br.conv.b.unwrap()) = Tensor::zeros(&[1]);
    let (_, m) = self_attention(&random(&[4, 5, 6], &mut rng, 4.0), &store, &br).unwrap();
    v.check(
        m.values().iter().all(|&x| x == 0.5),
        "zero-weight self-attention mask is 0.5",
    );

    let mut agree = 0;
    for _ in 0..1000 {
        let (t, n) = (rng.random_range(2..10), rng.random_range(1..26));
        let seq = random_seq(&mut rng, t, n);
        let mid = rng.random_range(0..t);
        let d: Vec<f64> = (0..n)
            .map(|j| dist(seq.joint(0, j), seq.joint(mid, j)))
            .collect();
        let mut best = 0;
        for j in 1..n {
            if d[j] > d[best] {
                best = j;
            }
        }
        if max_moving_joint(&seq, mid) == (best, d[best]) {
            agree += 1;
        }
    }
    v.check(
        agree == 1000,
        format!("max_moving_joint {agree}/1000 match brute force"),
    );
    v.finish();
}

#[test]
fn criterion_05_fusion_contracts() {
    let _g = serial();
    let mut v = Verdict::new(5, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut row_dev, mut shapes_ok, mut scale_dev) = (0.0f64, true, 0.0f64);
    for _ in 0..300 {
        let (cs, cr, s, joints, t) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..10),
            rng.random_range(1..10),
            rng.random_range(1..4),
        );
        let com = build_combined(
            &random(&[cs, t, joints], &mut rng, 2.0),
            &random(&[cr, s], &mut rng, 2.0),
        )
        .unwrap();
        shapes_ok &= com.shape() == [cs + cr, s + joints];

        let mut store = ParamStore::new();
        let rel = RelationFusion::new(
            &mut store,
            "r",
            cs + cr,
            rng.random_range(1..5),
            RelationApply::Aggregate,
            &mut rng,
        );
        let (_, m) = relation_fusion(&com, &store, &rel).unwrap();
        let n = s + joints;
        for i in 0..n {
            row_dev = row_dev.max(((0..n).map(|k| m.at2(i, k)).sum::<f64>() - 1.0).abs());
        }

        let mut store = ParamStore::new();
        let head = LstmFusion::new(
            &mut store,
            "l",
            cs + cr,
            rng.random_range(1..5),
            3,
            &mut rng,
        );
        let (a, b) = (random(&[cs], &mut rng, 2.0), random(&[cr], &mut rng, 2.0));
        let k = rng.random_range(1e-3..1e3);
        let x = lstm_fusion(&a, &b, &store, &head).unwrap();
        let y = lstm_fusion(&a.map(|z| z * k), &b.map(|z| z * k), &store, &head).unwrap();
        for (p, q) in x.scores.iter().zip(&y.scores) {
            scale_dev = scale_dev.max((p - q).abs());
        }
    }
    v.check(
        row_dev <= 1e-6,
        format!("relation rows sum to 1 ({row_dev:.1e})"),
    );
    v.check(shapes_ok, "combined shape (C_S+C_R)x(S+V)");
    v.check(
        scale_dev <= 1e-6,
        format!("lstm_fusion scale invariance {scale_dev:.1e}"),
    );

    let mut store = ParamStore::new();
    let rel = RelationFusion::new(&mut store, "r", 6, 3, RelationApply::Aggregate, &mut rng);
    for id in [
        rel.theta.w,
        rel.phi.w,
        rel.theta.b.unwrap(),
        rel.phi.b.unwrap(),
    ] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let (s, joints) = (5, 4);
    let com = build_combined(
        &random(&[2, 3, joints], &mut rng, 2.0),
        &random(&[4, s], &mut rng, 2.0),
    )
    .unwrap();
    let (f_rel, m) = relation_fusion(&com, &store, &rel).unwrap();
    let n = s + joints;
    let uniform = m
        .data()
        .iter()
        .all(|&x| (x - 1.0 / n as f64).abs() <= 1e-12);
    let mut col_mean_dev = 0.0f64;
    for c in 0..6 {
        let mean = (0..n).map(|k| com.at2(c, k)).sum::<f64>() / n as f64;
        for i in 0..n {
            col_mean_dev = col_mean_dev.max((f_rel.at2(c, i) - mean).abs());
        }
    }
    v.check(uniform, format!("zero weights give uniform 1/{n} rows"));
    v.check(
        col_mean_dev <= 1e-12,
        format!("zero weights give column means ({col_mean_dev:.1e})"),
    );
    v.finish();
}

fn params_ok(v: &mut Verdict, name: &str, report: &GradCheckReport, input_rel: f64) {
    let rel = report.max_rel_error().max(input_rel);
    v.check(rel <= 1e-4, format!("{name} {rel:.1e}"));
}

#[test]
fn criterion_06_gradient_checks() {
    let _g = serial();
    let mut v = Verdict::new(6, 120);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let h = 1e-5;

    // self-attention: mask branch and pooled projection
    let mut store = ParamStore::new();
    let br = SelfAttentionBranch::new(&mut store, "sa", 4, 3, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let f = random(&[4, 3, 3], &mut rng, 1.0);
    let (r1, r2) = (
        random(&[4, 3, 3], &mut rng, 1.0),
        random(&[3], &mut rng, 1.0),
    );
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let (fs, _) = br.forward(g, s, x)?;
        let pooled = br.pooled(g, s, fs)?;
        let a = probe(g, fs, &r1)?;
        let b = probe(g, pooled, &r2)?;
        g.add(a, b)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(f.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&f, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "self_attention", &rep, inp);

    // skeleton-attention path: backbone features gated by a fixed binary-square mask
    let mut store = ParamStore::new();
    let cfg = BackboneConfig {
        input_size: 8,
        channels: vec![4],
        strides: vec![2],
        kernel: 3,
    };
    let net = Backbone::new(&mut store, "bb", &cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let image = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0));
    let mask =
        AttentionMask::new(Tensor::from_fn(&[1, 4, 4], |i| [0.0, 0.25, 1.0][i % 3])).unwrap();
    let r = random(&[4, 4, 4], &mut rng, 1.0);
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let feat = net.forward(g, s, x)?;
        let m = g.constant(mask.tensor().clone());
        let y = g.mask_mul(feat, m)?;
        probe(g, y, &r)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(image.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&image, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "skeleton_attention", &rep, inp);

    // relation fusion: both the fused features and the mask
    let mut store = ParamStore::new();
    let rel = RelationFusion::new(&mut store, "rel", 5, 3, RelationApply::Aggregate, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let com = random(&[5, 6], &mut rng, 1.0);
    let (r1, r2) = (
        random(&[5, 6], &mut rng, 1.0),
        random(&[6, 6], &mut rng, 1.0),
    );
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let (fr, m) = rel.forward(g, s, x)?;
        let a = probe(g, fr, &r1)?;
        let b = probe(g, m, &r2)?;
        g.add(a, b)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(com.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&com, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "relation_fusion", &rep, inp);

    // gcn head under the training loss
    let mut store = ParamStore::new();
    let head = GcnFusionHead::new(&mut store, "head", 5, 4, 6, 3, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let x0 = random(&[5, 7], &mut rng, 1.0);
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let logits = head.forward(g, s, x)?;
        g.cross_entropy(logits, 1)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(x0.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&x0, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "gcn_head", &rep, inp);

    // one lstm cell step: weights [4H, in + H] with H = 2
    let mut store = ParamStore::new();
    let cell = LstmCellWeights::new(&mut store, "cell", 3, 2, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let (x0, h0, c0) = (
        random(&[3], &mut rng, 1.0),
        random(&[2], &mut rng, 1.0),
        random(&[2], &mut rng, 1.0),
    );
    let (rh, rc) = (random(&[2], &mut rng, 1.0), random(&[2], &mut rng, 1.0));
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let (w, b) = (bind(g, s, cell.w), bind(g, s, cell.b));
        let (hv, cv) = (g.constant(h0.clone()), g.constant(c0.clone()));
        let (hn, cn) = lstm_step(g, w, b, 2, x, hv, cv)?;
        let a = probe(g, hn, &rh)?;
        let b = probe(g, cn, &rc)?;
        g.add(a, b)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(x0.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&x0, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "lstm_cell", &rep, inp);

    // graph_conv with three spatial partitions
    let graph = build_graph(
        &[(0, 1), (1, 2), (1, 3), (3, 4)],
        5,
        PartitionStrategy::Spatial { center: 1 },
    )
    .unwrap();
    let mut store = ParamStore::new();
    let layer = GraphConv::new(
        &mut store,
        "gc",
        graph.partition_count(),
        3,
        4,
        true,
        &mut rng,
    );
    randomize(&mut store, &mut rng, 0.8);
    let x0 = random(&[3, 4, 5], &mut rng, 1.0);
    let r = random(&[4, 4, 5], &mut rng, 1.0);
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let y = layer.forward(g, s, &graph, x)?;
        probe(g, y, &r)
    };
    let rep = check_params(&store, h, |g, s| {
        let x = g.constant(x0.clone());
        loss(g, s, x)
    })
    .unwrap();
    let inp = check_input(&x0, h, |g, x| loss(g, &store, x)).unwrap();
    params_ok(&mut v, "graph_conv", &rep, inp);
    v.finish();
}

/// Criterion-7 budget.
const END_TO_END_BUDGET_S: u64 = 600;

struct Reference {
    _dir: TempDir,
    dataset: Dataset,
    base: RunConfig,
    test_idx: Vec<usize>,
    results: BTreeMap<String, VariantResult>,
    full: Model,
    elapsed: Duration,
}

/// The reference dataset, every criterion-7 variant and the trained full model.
fn reference() -> &'static Reference {
    static R: OnceLock<Reference> = OnceLock::new();
    R.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::reference(3, 3);
        assert_eq!(
            (spec.seed, spec.train_per_class, spec.test_per_class),
            (7, 60, 20)
        );
        generate_dataset(&spec, dir.path()).unwrap();
        let dataset = Dataset::open(dir.path()).unwrap();
        let base = RunConfig::reference();
        let mut exp = Experiment::new(dataset.clone(), base.clone()).unwrap();
        let (full_result, full) = exp.run_variant_model("full").unwrap();
        let mut results = BTreeMap::from([("full".to_string(), full_result)]);
        for name in [
            "skeleton_only",
            "rgb_only",
            "decision",
            "sum",
            "no_self_attn",
            "no_skel_attn",
        ] {
            results.insert(name.to_string(), exp.run_variant(name).unwrap());
        }
        Reference {
            _dir: dir,
            dataset,
            base,
            test_idx: exp.test_idx.clone(),
            results,
            full,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn criterion_07_end_to_end_complementarity() {
    let _g = serial();
    let mut v = Verdict::new(7, END_TO_END_BUDGET_S);
    let r = reference();
    let fam = |name: &str, f: &str| r.results[name].family_accuracy[f];
    let acc = |name: &str| r.results[name].accuracy;

    v.check(
        fam("full", "C") >= 0.95,
        format!("(a) full on C {:.3} >= 0.95", fam("full", "C")),
    );
    v.check(
        fam("skeleton_only", "B") <= 0.45,
        format!(
            "(b) skeleton-only on B {:.3} <= 0.45",
            fam("skeleton_only", "B")
        ),
    );
    v.check(
        fam("rgb_only", "A") <= 0.45,
        format!("(c) rgb-only on A {:.3} <= 0.45", fam("rgb_only", "A")),
    );
    for other in ["skeleton_only", "rgb_only", "decision", "sum"] {
        v.check(
            acc("full") > acc(other),
            format!("(d) full {:.3} > {other} {:.3}", acc("full"), acc(other)),
        );
    }
    for ablated in ["no_skel_attn", "no_self_attn"] {
        v.check(
            acc(ablated) <= acc("full") + 0.01,
            format!("(e) {ablated} {:.3} <= full + 0.01", acc(ablated)),
        );
    }
    // training happened inside the shared fixture; its wall time is the one that counts
    v.start = Instant::now() - r.elapsed;
    v.finish();
}

#[test]
fn criterion_08_frame_fraction_robustness() {
    let _g = serial();
    let r = reference();
    let mut v = Verdict::new(8, 120);
    let mut accs = Vec::new();
    for f in [0.3, 0.4, 0.5, 0.6, 0.7] {
        let mut cfg = r.base.clone();
        cfg.data.frame_fractions = vec![f];
        let test = prepare_split(&r.dataset, &r.test_idx, false, &cfg).unwrap();
        accs.push(evaluate(&r.full, &test, Predictor::Full).unwrap().accuracy);
    }
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    v.check(
        hi - lo <= 0.03,
        format!(
            "accuracy over 0.3..0.7 [{}], spread {:.1} pp",
            shown.join(", "),
            100.0 * (hi - lo)
        ),
    );
    v.finish();
}

fn param_bits(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<u64>)> {
    store
        .ids()
        .filter(|&id| store.param(id).name.starts_with(prefix))
        .map(|id| {
            (
                store.param(id).name.clone(),
                store.get(id).data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn criterion_09_training_procedure() {
    let _g = serial();
    let mut v = Verdict::new(9, END_TO_END_BUDGET_S);

    let t = RunConfig::default().train;
    v.check(t.lr_at(10) == 1e-5, format!("lr(10) = {:e}", t.lr_at(10)));
    v.check(t.lr_at(20) == 1e-6, format!("lr(20) = {:e}", t.lr_at(20)));

    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        frames: 12,
        train_per_class: 6,
        test_per_class: 2,
        ..SynthSpec::reference(3, 3)
    };
    generate_dataset(&spec, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let mut cfg = RunConfig::reference();
    cfg.dataset = dir.path().to_path_buf();
    cfg.deterministic = true;
    cfg.data.augment.n_rot = 1;
    cfg.data.augment.n_scale = 1;
    cfg.data.crop_variants = 2;
    cfg.train.epochs_stream = 3;
    cfg.train.epochs_fusion = 3;
    cfg.train.epochs_finetune = 2;

    // stage 2 on trained streams
    let (train_idx, _) = split_indices(&ds);
    let train = prepare_split(&ds, &train_idx, true, &cfg).unwrap();
    let mut model = Model::new(&cfg.model, ds.class_count(), cfg.seed).unwrap();
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.seed);
    trainer
        .train_stream(&mut model, Stream::Skeleton, &train)
        .unwrap();
    trainer
        .train_stream(&mut model, Stream::Rgb, &train)
        .unwrap();
    let before = [
        param_bits(&model.store, "skel."),
        param_bits(&model.store, "rgb."),
    ];
    let fusion_before = param_bits(&model.store, "fusion.");
    trainer.train_fusion(&mut model, &train).unwrap();
    let after = [
        param_bits(&model.store, "skel."),
        param_bits(&model.store, "rgb."),
    ];
    v.check(
        before == after,
        "stage 2 leaves stream weights bit-identical",
    );
    v.check(
        param_bits(&model.store, "fusion.") != fusion_before,
        "stage 2 moves the fusion",
    );

    let run = || {
        let mut bytes = Vec::new();
        train_stages(&cfg, &ds, 3, None, false, |m, stage| {
            bytes.push(Checkpoint::from_model(m, &cfg, stage).to_bytes()?);
            Ok(())
        })
        .unwrap();
        bytes
    };
    let (a, b) = (run(), run());
    v.check(
        a.len() == 3 && a == b,
        format!("{} stage checkpoints byte-identical across runs", a.len()),
    );
    v.finish();
}

#[test]
fn criterion_10_complexity_self_consistency() {
    let _g = serial();
    let mut v = Verdict::new(10, 5);
    let cfg = RunConfig::reference().model;
    let classes = 9;
    let frames = 24;
    let model = Model::new(&cfg, classes, 7).unwrap();
    let report = complexity(&model, frames, 1);

    // hand count of the desk configuration
    let joints = cfg.joints;
    let p = model.graph.partition_count();
    let nnz: usize = model
        .graph
        .partitions()
        .iter()
        .map(|a| a.data().iter().filter(|&&x| x != 0.0).count())
        .sum();
    let sc = &cfg.stgcn;
    let (mut params, mut macs) = (0usize, 0usize);
    let (mut cin, mut t) = (sc.in_channels, frames);
    for (&cout, &s) in sc.channels.iter().zip(&sc.strides) {
        let t_out = (t + 2 * (sc.kernel / 2) - sc.kernel) / s + 1;
        params += p * cin * cout + cout; // graph conv
        macs += p * cin * cout * t * joints + nnz * cout * t;
        params += cout * cout * sc.kernel + cout; // temporal conv
        macs += cout * cout * sc.kernel * t_out * joints;
        if cin != cout || s != 1 {
            params += cin * cout + cout; // 1x1 residual projection
            macs += cin * cout * t_out * joints;
        }
        cin = cout;
        t = t_out;
    }
    let c_s = cin;

    let rb = &cfg.rgb;
    let (mut rgb_params, mut rgb_macs) = (0usize, 0usize);
    let (mut ch, mut side) = (3, rb.input_size);
    for (&cout, &s) in rb.channels.iter().zip(&rb.strides) {
        let out = (side + 2 * (rb.kernel / 2) - rb.kernel) / s + 1;
        rgb_params += ch * cout * rb.kernel * rb.kernel + cout;
        rgb_macs += ch * cout * rb.kernel * rb.kernel * out * out;
        ch = cout;
        side = out;
    }
    let c_r = ch;
    // two self-attention masks, each a 1x1 conv to one channel
    rgb_params += 2 * (c_r + 1);
    rgb_macs += 2 * c_r * side * side;
    params += rgb_params;
    macs += rgb_macs;

    let n = side * side + t * joints;
    let c = c_s + c_r;
    let inner = c / 2;
    params += 2 * (c * inner + inner);
    macs += 2 * c * inner * n + inner * n * n + c * n * n;
    let (hc, hid) = (cfg.head_channels, cfg.fusion_hidden);
    params += c * hc + hc + hc * hid + hid + hid * classes + classes;
    macs += c * hc * n + hc * hid + hid * classes;

    v.check(
        report.total_params == params,
        format!("params {} = hand {params}", report.total_params),
    );
    v.check(
        report.total_macs == macs as u64,
        format!("MACs {} = hand {macs}", report.total_macs),
    );
    v.check(report.total_flops == 2 * macs as u64, "FLOPs = 2 x MACs");
    v.check(
        report.rgb_macs == rgb_macs as u64,
        format!("rgb MACs {} = hand {rgb_macs}", report.rgb_macs),
    );
    v.check(
        report.rgb_macs * 10 < report.video_rgb_macs,
        format!(
            "single frame {} < 1/10 of {VIDEO_FRAMES}-frame {}",
            report.rgb_macs, report.video_rgb_macs
        ),
    );
    v.finish();
}
