//! Trains a model once, then scores it with the RGB frame taken at different
//! points of the clip and with each stream on its own.
//!
//! `cargo run --release --example evaluate`

use mmff::config::RunConfig;
use mmff::model::Stream;
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
    generate_dataset(&spec, dir.path())?;
    let ds = Dataset::open(dir.path())?;

    let mut cfg = RunConfig::reference();
    cfg.dataset = dir.path().to_path_buf();
    cfg.data.augment.n_rot = 1;
    cfg.data.augment.n_scale = 0;
    cfg.train.epochs_stream = 12;
    cfg.train.epochs_fusion = 10;
    cfg.train.epochs_finetune = 0;
    let (model, _) = train_stages(&cfg, &ds, 2, None, false, |_, _| Ok(()))?;
    let (_, test_idx) = split_indices(&ds);

    for fraction in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let mut at = cfg.clone();
        at.data.frame_fractions = vec![fraction];
        let test = prepare_split(&ds, &test_idx, false, &at)?;
        let report = evaluate(&model, &test, Predictor::Full)?;
        println!(
            "frame at {:.0}% of the clip: accuracy {:.3}",
            100.0 * fraction,
            report.accuracy
        );
    }

    let test = prepare_split(&ds, &test_idx, false, &cfg)?;
    for (name, p) in [
        ("skeleton", Predictor::Stream(Stream::Skeleton)),
        ("rgb", Predictor::Stream(Stream::Rgb)),
    ] {
        println!(
            "{name} stream alone: {:.3}",
            evaluate(&model, &test, p)?.accuracy
        );
    }
    let report = evaluate(&model, &test, Predictor::Full)?;
    println!("confusion (rows = true class):");
    for row in &report.confusion {
        println!("  {row:?}");
    }
    Ok(())
}
