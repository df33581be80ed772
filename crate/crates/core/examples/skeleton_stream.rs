//! The temporal stream: partitioned skeleton graph, one graph convolution, an
//! ST-GCN backbone and the Bi-LSTM alternative.
//!
//! `cargo run --release --example skeleton_stream`

use mmff::params::ParamStore;
use mmff::skeleton_stream::{
    bilstm_forward, build_graph, graph_conv, skeleton_to_ctv, stgcn_forward, BiLstm, GraphConv,
    LstmConfig, PartitionStrategy, Stgcn, StgcnConfig,
};
use mmff::synthdata::{generate_samples, SynthSpec, EDGES, TORSO};
use mmff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmff::Result<()> {
    let spec = SynthSpec {
        train_per_class: 1,
        test_per_class: 0,
        ..SynthSpec::reference(3, 3)
    };
    let sample = &generate_samples(&spec)?[0];
    let v = sample.skeleton.joint_count();

    let graph = build_graph(&EDGES, v, PartitionStrategy::Spatial { center: TORSO })?;
    println!(
        "{} joints, {} partitions, {} nonzeros",
        v,
        graph.partition_count(),
        graph.nonzeros()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let x = skeleton_to_ctv(&sample.skeleton);
    let layer = GraphConv::new(
        &mut store,
        "demo.gcn",
        graph.partition_count(),
        3,
        8,
        true,
        &mut rng,
    );
    println!(
        "graph_conv {:?} -> {:?}",
        x.shape(),
        graph_conv(&x, &graph, &store, &layer)?.shape()
    );

    let net = Stgcn::new(
        &mut store,
        "demo.stgcn",
        &StgcnConfig::default(),
        &graph,
        &mut rng,
    )?;
    let y = stgcn_forward(&x, &graph, &store, &net)?;
    println!(
        "ST-GCN {:?} -> {:?} ({} parameters)",
        x.shape(),
        y.shape(),
        net.param_count()
    );

    // the Bi-LSTM reads one flattened frame per step
    let steps = Tensor::from_fn(&[spec.frames, 3 * v], |i| sample.skeleton.data()[i]);
    let lstm = BiLstm::new(
        &mut store,
        "demo.lstm",
        3 * v,
        &LstmConfig {
            layers: 2,
            hidden: 8,
        },
        &mut rng,
    )?;
    println!(
        "Bi-LSTM {:?} -> {:?}",
        steps.shape(),
        bilstm_forward(&steps, &store, &lstm)?.shape()
    );
    Ok(())
}
