//! Runs a few ablation variants on the same data and seed and reports
//! accuracy per synthetic family. Family A is decidable from motion alone,
//! family B from object colour alone, family C only from both.
//!
//! `cargo run --release --example ablation [variant ...]`

use mmff::config::RunConfig;
use mmff::skeleton_io::Dataset;
use mmff::synthdata::{generate_dataset, SynthSpec};
use mmff::training::run_ablation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut variants: Vec<String> = std::env::args().skip(1).collect();
    if variants.is_empty() {
        variants = ["full", "skeleton_only", "rgb_only", "decision"]
            .map(String::from)
            .to_vec();
    }
    let dir = tempfile::tempdir()?;
    let spec = SynthSpec {
        frames: 12,
        train_per_class: 10,
        test_per_class: 5,
        ..SynthSpec::reference(3, 3)
    };
    generate_dataset(&spec, dir.path())?;

    let mut cfg = RunConfig::reference();
    cfg.dataset = dir.path().to_path_buf();
    cfg.data.augment.n_rot = 1;
    cfg.data.augment.n_scale = 0;
    cfg.train.epochs_stream = 12;
    cfg.train.epochs_fusion = 10;
    cfg.train.epochs_finetune = 4;

    let rows = run_ablation(Dataset::open(dir.path())?, &variants, &cfg, false)?;
    println!(
        "{:<16} {:>8} {:>6} {:>6} {:>6} {:>8}",
        "variant", "acc", "A", "B", "C", "params"
    );
    for r in rows {
        let fam = |k: &str| r.family_accuracy.get(k).copied().unwrap_or(f64::NAN);
        println!(
            "{:<16} {:>8.3} {:>6.2} {:>6.2} {:>6.2} {:>8}",
            r.name,
            r.accuracy,
            fam("A"),
            fam("B"),
            fam("C"),
            r.params
        );
    }
    Ok(())
}
