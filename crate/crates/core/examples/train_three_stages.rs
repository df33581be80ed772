//! Trains the full model through its three stages on a small synthetic set,
//! checkpointing after each stage, then resumes stage 3 from the stage-2
//! checkpoint and confirms the result is bit-identical.
//!
//! `cargo run --release --example train_three_stages`

use mmff::checkpoint::Checkpoint;
use mmff::config::RunConfig;
use mmff::skeleton_io::Dataset;
use mmff::synthdata::{generate_dataset, SynthSpec};
use mmff::training::{evaluate, prepare_split, split_indices, train_stages, Predictor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let spec = SynthSpec {
        frames: 12,
        train_per_class: 8,
        test_per_class: 4,
        ..SynthSpec::reference(2, 2)
    };
    generate_dataset(&spec, &dir.path().join("data"))?;
    let ds = Dataset::open(dir.path().join("data"))?;

    let mut cfg = RunConfig::reference();
    cfg.dataset = dir.path().join("data");
    cfg.data.augment.n_rot = 1;
    cfg.data.augment.n_scale = 0;
    cfg.data.crop_variants = 2;
    cfg.train.epochs_stream = 12;
    cfg.train.epochs_fusion = 10;
    cfg.train.epochs_finetune = 4;

    let ckpt = |stage: u8| dir.path().join(format!("stage{stage}.ckpt"));
    let (model, log) = train_stages(&cfg, &ds, 3, None, false, |m, stage| {
        Checkpoint::from_model(m, &cfg, stage).save(&ckpt(stage))
    })?;
    for row in &log {
        println!(
            "{:<16} epoch {:>2}  lr {:.1e}  loss {:.4}  acc {:.3}",
            row.stage, row.epoch, row.lr, row.loss, row.train_accuracy
        );
    }

    let (_, test_idx) = split_indices(&ds);
    let test = prepare_split(&ds, &test_idx, false, &cfg)?;
    println!(
        "test accuracy after stage 3: {:.3}",
        evaluate(&model, &test, Predictor::Full)?.accuracy
    );

    let stage2 = Checkpoint::load(&ckpt(2))?;
    stage2.require_stage(2)?;
    let (resumed, _) = train_stages(&cfg, &ds, 3, Some(&stage2), false, |_, _| Ok(()))?;
    let same = resumed.store.fingerprint("") == model.store.fingerprint("");
    println!("resumed stage 3 from checkpoint: parameters identical = {same}");
    Ok(())
}
