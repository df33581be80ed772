//! The fusion heads side by side on random stream features: the relation
//! mask with its GCN head, the LSTM-style MLP head, decision averaging and
//! feature summation.
//!
//! `cargo run --release --example fusion`

use mmff::fusion::{
    build_combined, decision_fusion, gcn_fusion_head, lstm_fusion, relation_fusion, sum_fusion,
    GcnFusionHead, LstmFusion, RelationApply, RelationFusion, SumFusion,
};
use mmff::params::ParamStore;
use mmff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mmff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let classes = 5;
    // skeleton map: 6 channels x 4 frames x 3 joints; RGB map: 6 channels over 4x4 cells
    let f_gcn = Tensor::from_fn(&[6, 4, 3], |_| rng.random_range(-1.0..1.0));
    let f_rgb = Tensor::from_fn(&[6, 16], |_| rng.random_range(-1.0..1.0));

    let mut store = ParamStore::new();
    let f_com = build_combined(&f_gcn, &f_rgb)?;
    let rel = RelationFusion::new(
        &mut store,
        "rel",
        f_com.shape()[0],
        4,
        RelationApply::Aggregate,
        &mut rng,
    );
    let (f_rel, m_rel) = relation_fusion(&f_com, &store, &rel)?;
    let n = m_rel.shape()[0];
    let row0: f64 = m_rel.data()[..n].iter().sum();
    println!(
        "F_com {:?}, relation mask {:?} (row 0 sums to {row0:.6}), F_rel {:?}",
        f_com.shape(),
        m_rel.shape(),
        f_rel.shape()
    );

    let head = GcnFusionHead::new(
        &mut store,
        "gcn",
        f_rel.shape()[0],
        8,
        16,
        classes,
        &mut rng,
    );
    let gcn = gcn_fusion_head(&f_rel, &store, &head)?;
    println!(
        "relation + GCN head -> class {} {:.3?}",
        gcn.argmax(),
        gcn.probs
    );

    let v_skel = Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0));
    let v_rgb = Tensor::from_fn(&[14], |_| rng.random_range(-1.0..1.0));
    let mlp = LstmFusion::new(&mut store, "mlp", 24, 16, classes, &mut rng);
    let a = lstm_fusion(&v_skel, &v_rgb, &store, &mlp)?;
    println!("MLP head -> class {} {:.3?}", a.argmax(), a.probs);

    let sum = SumFusion::new(&mut store, "sum", 10, 14, 12, classes, &mut rng);
    let b = sum_fusion(&v_skel, &v_rgb, &store, &sum)?;
    println!("sum fusion -> class {} {:.3?}", b.argmax(), b.probs);

    let avg = decision_fusion(&a, &b, 0.5)?;
    println!(
        "decision average of the two -> class {} {:.3?}",
        avg.argmax(),
        avg.probs
    );
    Ok(())
}
