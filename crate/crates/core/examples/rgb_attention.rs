//! The spatial stream on one synthetic frame: backbone features, a
//! self-attention branch, and the skeleton attention square around the joint
//! that moved most.
//!
//! `cargo run --release --example rgb_attention`

use mmff::augmentation::CropTransform;
use mmff::frame::FrameTensor;
use mmff::params::ParamStore;
use mmff::rgb_stream::{
    backbone_forward, self_attention, skeleton_attention, skeleton_attention_mask,
    skeleton_mask_geometry, Backbone, BackboneConfig, SelfAttentionBranch,
};
use mmff::skeleton_io::select_frame_index;
use mmff::synthdata::{generate_samples, SynthSpec, JOINT_NAMES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmff::Result<()> {
    let spec = SynthSpec {
        train_per_class: 1,
        test_per_class: 0,
        ..SynthSpec::reference(3, 3)
    };
    let sample = &generate_samples(&spec)?[0];
    let mid = select_frame_index(spec.frames, 0.5).index;

    let cfg = BackboneConfig::default();
    let crop = CropTransform::full_frame(
        spec.image_size as usize,
        spec.image_size as usize,
        cfg.input_size,
        cfg.input_size,
    );
    let image = crop.render(&FrameTensor::from_rgb8(&sample.render(mid, &spec)?));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let net = Backbone::new(&mut store, "bb", &cfg, &mut rng)?;
    let (c, h, w) = cfg.out_shape();
    let features = backbone_forward(&image, &store, &net)?;
    println!(
        "backbone {:?} -> {:?}",
        image.tensor().shape(),
        features.shape()
    );

    let branch = SelfAttentionBranch::new(&mut store, "sa", c, 8, &mut rng);
    let (f_self, mask) = self_attention(&features, &store, &branch)?;
    let (lo, hi) = mask
        .values()
        .iter()
        .fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "self-attention mask {h}x{w}, values in [{lo:.3}, {hi:.3}], output {:?}",
        f_self.shape()
    );

    let geo = skeleton_mask_geometry(&sample.skeleton, mid, &sample.camera, &crop, 0.25)?;
    println!(
        "j_max = {} ({}), displacement {:.3}, square centre ({:.1}, {:.1}) side {:.1}px",
        geo.joint, JOINT_NAMES[geo.joint], geo.displacement, geo.center[0], geo.center[1], geo.side
    );
    let ske = skeleton_attention_mask(&sample.skeleton, mid, &sample.camera, &crop, w, h, 0.25)?;
    for row in ske.values().chunks(w) {
        let line: String = row
            .iter()
            .map(|&v| {
                if v > 0.5 {
                    '#'
                } else if v > 0.0 {
                    '+'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {line}");
    }
    let gated = skeleton_attention(&features, &ske)?;
    println!(
        "skeleton attention keeps {:.1}% of feature energy",
        100.0 * gated.norm() / features.norm()
    );
    Ok(())
}
