//! Skeleton geometry: VA-pre, rotation and scale augmentation, pinhole
//! projection and the projection crop.
//!
//! `cargo run --release --example geometry`

use mmff::augmentation::{
    augment_rotate, augment_scale, project_to_image, projection_crop, rotation_matrix, CropCorner,
    CropSpec, RotationSpec, ScaleSpec,
};
use mmff::frame::FrameTensor;
use mmff::skeleton_io::{va_pre_normalize, SkeletonSequence};
use mmff::synthdata::SynthSpec;

fn main() -> mmff::Result<()> {
    let spec = SynthSpec::reference(3, 3);
    let camera = spec.camera();
    let seq = SkeletonSequence::from_frames(&[
        vec![[-0.2, 0.1, 3.0], [0.0, -0.3, 3.1], [0.25, 0.2, 2.9]],
        vec![[-0.1, 0.15, 3.0], [0.05, -0.3, 3.1], [0.3, 0.1, 2.95]],
    ])?;

    let centred = va_pre_normalize(&seq);
    println!("VA-pre frame 0: {:?}", centred.frame_joints(0));

    let rot = RotationSpec {
        alpha: 10.0,
        beta: -25.0,
        gamma: 40.0,
    };
    let r = rotation_matrix(&rot);
    println!("rotation matrix rows: {:.4?}", r);
    let rotated = augment_rotate(&centred, &rot);
    let scaled = augment_scale(
        &centred,
        &ScaleSpec {
            sx: 1.1,
            sy: 0.9,
            sz: 1.0,
        },
    );
    println!(
        "rotated joint 0: {:.4?}, scaled joint 0: {:.4?}",
        rotated.joint(0, 0),
        scaled.joint(0, 0)
    );

    // the crop is computed from the raw camera-space skeleton
    let pixels = project_to_image(&seq.frame_joints(1), &camera)?;
    println!("projected joints (px): {:.1?}", pixels);
    let image = FrameTensor::filled(3, camera.image_h as usize, camera.image_w as usize, 0.5);
    let crop = CropSpec {
        margin_w: 6.0,
        margin_h: 6.0,
        corner: CropCorner::TopLeft,
    };
    let (out, t) = projection_crop(&image, &pixels, &crop, 32, 32)?;
    println!(
        "crop window origin ({:.1}, {:.1}) size {:.1} x {:.1} -> {}x{}; joint 0 lands at {:.2?}",
        t.origin_x,
        t.origin_y,
        t.crop_w,
        t.crop_h,
        out.width(),
        out.height(),
        t.apply(pixels[0])
    );
    Ok(())
}
