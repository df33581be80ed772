//! Parameter and multiply-accumulate counts per module, and what the RGB
//! path would cost on a 16-frame clip instead of a single frame.
//!
//! `cargo run --release --example complexity`

use mmff::complexity::{complexity, VIDEO_FRAMES};
use mmff::config::{FusionMode, ModelConfig};
use mmff::model::Model;

fn main() -> mmff::Result<()> {
    for fusion in [FusionMode::Gcn, FusionMode::Lstm] {
        let cfg = ModelConfig {
            fusion,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 9, 0)?;
        let report = complexity(&model, 32, 1);
        println!("== {fusion:?} fusion ==\n{}", report.to_table());
        println!(
            "one RGB frame costs {:.1}% of a {VIDEO_FRAMES}-frame clip\n",
            100.0 * report.rgb_macs as f64 / report.video_rgb_macs as f64
        );
    }
    Ok(())
}
