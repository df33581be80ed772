//! Generates a small synthetic dataset and shows what each family looks like.
//!
//! `cargo run --release --example synth_data [out_dir]`

use mmff::skeleton_io::Dataset;
use mmff::synthdata::{generate_dataset, Family, SynthSpec};

fn main() -> mmff::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synth_demo".into());
    let spec = SynthSpec {
        frames: 16,
        train_per_class: 4,
        test_per_class: 2,
        ..SynthSpec::reference(3, 3)
    };
    let samples = generate_dataset(&spec, out.as_ref())?;

    for family in [Family::A, Family::B, Family::C] {
        let s = samples
            .iter()
            .find(|s| s.family == family)
            .expect("every family has samples");
        println!(
            "family {}: class {} ({}), moving joint {}, object colour {:?}",
            family.name(),
            s.label,
            spec.classes[s.label].name,
            s.moving_joint,
            s.object_color
        );
    }

    // the written tree reads back through the regular loader
    let ds = Dataset::open(&out)?;
    let first = ds.load_sample(0)?;
    println!(
        "{} samples, {} classes in {out}; sample 0 has {} frames x {} joints and {} PNGs",
        ds.len(),
        ds.class_count(),
        first.skeleton.frame_count(),
        first.skeleton.joint_count(),
        first.frame_paths.len()
    );
    Ok(())
}
