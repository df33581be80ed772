//! Checks hand-written backward passes against central differences: the
//! relation fusion (parameters and input) and one LSTM step.
//!
//! `cargo run --release --example gradient_check`

use mmff::autograd::Graph;
use mmff::fusion::{RelationApply, RelationFusion};
use mmff::gradcheck::{check_input, check_params, probe};
use mmff::nn::bind;
use mmff::params::ParamStore;
use mmff::skeleton_stream::lstm::lstm_step;
use mmff::skeleton_stream::LstmCellWeights;
use mmff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mmff::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let step = 1e-5;

    let mut store = ParamStore::new();
    let rel = RelationFusion::new(
        &mut store,
        "rel",
        5,
        3,
        RelationApply::Aggregate,
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let com = rand(&[5, 6]);
    let weights = rand(&[5, 6]);
    let loss = |g: &mut Graph, s: &ParamStore, x| {
        let (f_rel, _) = rel.forward(g, s, x)?;
        probe(g, f_rel, &weights)
    };
    let report = check_params(&store, step, |g, s| {
        let x = g.constant(com.clone());
        loss(g, s, x)
    })?;
    for p in &report.params {
        println!(
            "{:<14} rel error {:.2e}  |grad| {:.3}",
            p.name, p.rel_error, p.analytic_norm
        );
    }
    println!(
        "relation input rel error {:.2e}",
        check_input(&com, step, |g, x| loss(g, &store, x))?
    );

    let mut store = ParamStore::new();
    let cell = LstmCellWeights::new(&mut store, "cell", 4, 2, &mut ChaCha8Rng::seed_from_u64(2));
    let (h0, c0, probe_w) = (rand(&[2]), rand(&[2]), rand(&[2]));
    let x0 = rand(&[4]);
    let report = check_params(&store, step, |g, s| {
        let (w, b) = (bind(g, s, cell.w), bind(g, s, cell.b));
        let (x, h, c) = (
            g.constant(x0.clone()),
            g.constant(h0.clone()),
            g.constant(c0.clone()),
        );
        let (h1, c1) = lstm_step(g, w, b, 2, x, h, c)?;
        let both = g.add(h1, c1)?;
        probe(g, both, &probe_w)
    })?;
    println!("LSTM step max rel error {:.2e}", report.max_rel_error());
    Ok(())
}
