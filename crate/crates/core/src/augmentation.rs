//! Geometric data enhancement: skeleton rotation/scaling, pinhole projection,
//! and the projection crop that keeps the RGB frame aligned with the skeleton.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameTensor;
use crate::skeleton_io::{ActionSample, CameraParams, SkeletonSequence};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

/// Rotation angles in degrees about the x, y and z axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Per-axis scale factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub sx: f64,
    pub sy: f64,
    pub sz: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            sx: 1.0,
            sy: 1.0,
            sz: 1.0,
        }
    }
}

/// Sampling ranges for skeleton augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Upper bound (degrees) for α and β; both are drawn from `[0, rot_max_deg]`.
    pub rot_max_deg: f64,
    /// Upper bound (degrees) for γ, drawn from `[0, gamma_max_deg]`.
    pub gamma_max_deg: f64,
    /// Range for `sx` and `sy`; `sz` stays 1.
    pub scale_range: (f64, f64),
    pub n_rot: usize,
    pub n_scale: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot_max_deg: 30.0,
            gamma_max_deg: 0.0,
            scale_range: (1.0, 1.2),
            n_rot: 2,
            n_scale: 2,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl RotationSpec {
    pub fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            alpha: uniform(rng, 0.0, cfg.rot_max_deg),
            beta: uniform(rng, 0.0, cfg.rot_max_deg),
            gamma: uniform(rng, 0.0, cfg.gamma_max_deg),
        }
    }
}

impl ScaleSpec {
    pub fn sample(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        let (lo, hi) = cfg.scale_range;
        Self {
            sx: uniform(rng, lo, hi),
            sy: uniform(rng, lo, hi),
            sz: 1.0,
        }
    }
}

pub fn rot_x(alpha_deg: f64) -> Mat3 {
    let (s, c) = alpha_deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(beta_deg: f64) -> Mat3 {
    let (s, c) = beta_deg.to_radians().sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(gamma_deg: f64) -> Mat3 {
    let (s, c) = gamma_deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, p: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// `R = R_z(γ) · R_y(β) · R_x(α)`.
pub fn rotation_matrix(spec: &RotationSpec) -> Mat3 {
    mat_mul(
        &rot_z(spec.gamma),
        &mat_mul(&rot_y(spec.beta), &rot_x(spec.alpha)),
    )
}

pub fn augment_rotate(seq: &SkeletonSequence, spec: &RotationSpec) -> SkeletonSequence {
    let r = rotation_matrix(spec);
    seq.map_joints(|p| mat_vec(&r, p))
}

pub fn augment_scale(seq: &SkeletonSequence, spec: &ScaleSpec) -> SkeletonSequence {
    seq.map_joints(|p| [spec.sx * p[0], spec.sy * p[1], spec.sz * p[2]])
}

/// How one expanded copy was derived from its source sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SkeletonAugment {
    Identity,
    Rotate(RotationSpec),
    Scale(ScaleSpec),
}

impl SkeletonAugment {
    pub fn apply(&self, seq: &SkeletonSequence) -> SkeletonSequence {
        match self {
            SkeletonAugment::Identity => seq.clone(),
            SkeletonAugment::Rotate(r) => augment_rotate(seq, r),
            SkeletonAugment::Scale(s) => augment_scale(seq, s),
        }
    }
}

/// The list of `(source index, transform)` pairs that [`expand_dataset`] materializes:
/// all originals first, then per sample `n_rot` rotations followed by `n_scale` scalings.
pub fn plan_expansion(
    count: usize,
    n_rot: usize,
    n_scale: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, SkeletonAugment)> {
    let mut plan: Vec<(usize, SkeletonAugment)> =
        (0..count).map(|i| (i, SkeletonAugment::Identity)).collect();
    for i in 0..count {
        for _ in 0..n_rot {
            plan.push((i, SkeletonAugment::Rotate(RotationSpec::sample(cfg, rng))));
        }
        for _ in 0..n_scale {
            plan.push((i, SkeletonAugment::Scale(ScaleSpec::sample(cfg, rng))));
        }
    }
    plan
}

/// An expanded sample with its provenance.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub source: usize,
    pub augment: SkeletonAugment,
    pub sample: ActionSample,
}

/// Appends rotated and scaled copies of every sample. Only the skeleton is
/// transformed; frame paths, label and camera are shared with the source.
pub fn expand_dataset(
    samples: &[ActionSample],
    n_rot: usize,
    n_scale: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<AugmentedSample> {
    plan_expansion(samples.len(), n_rot, n_scale, cfg, rng)
        .into_iter()
        .map(|(source, augment)| {
            let mut sample = samples[source].clone();
            sample.skeleton = augment.apply(&sample.skeleton);
            AugmentedSample {
                source,
                augment,
                sample,
            }
        })
        .collect()
}

/// Pinhole projection `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project_to_image(joints: &[[f64; 3]], camera: &CameraParams) -> Result<Vec<[f64; 2]>> {
    joints
        .iter()
        .enumerate()
        .map(|(j, p)| {
            if p[2] <= 0.0 {
                return Err(Error::BehindCamera { joint: j, z: p[2] });
            }
            Ok([
                camera.fx * p[0] / p[2] + camera.cx,
                camera.fy * p[1] / p[2] + camera.cy,
            ])
        })
        .collect()
}

/// Which bounding-box corner anchors the crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropCorner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    /// Margins split evenly on both sides; used for deterministic evaluation crops.
    Center,
}

impl CropCorner {
    pub const ALL_FOUR: [CropCorner; 4] = [
        CropCorner::TopLeft,
        CropCorner::TopRight,
        CropCorner::BottomLeft,
        CropCorner::BottomRight,
    ];
}

/// Affine map from source-image pixels to crop-output pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub crop_w: f64,
    pub crop_h: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropTransform {
    /// The identity-like transform that resizes the full image.
    pub fn full_frame(image_w: usize, image_h: usize, out_w: usize, out_h: usize) -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            crop_w: image_w as f64,
            crop_h: image_h as f64,
            out_w,
            out_h,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin_x) * self.out_w as f64 / self.crop_w,
            (p[1] - self.origin_y) * self.out_h as f64 / self.crop_h,
        ]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        [
            q[0] * self.crop_w / self.out_w as f64 + self.origin_x,
            q[1] * self.crop_h / self.out_h as f64 + self.origin_y,
        ]
    }

    /// Resamples `image` through this transform (bilinear).
    pub fn render(&self, image: &FrameTensor) -> FrameTensor {
        let c = image.channels();
        let (oh, ow) = (self.out_h, self.out_w);
        let mut data = vec![0.0; c * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let [u, v] = self.invert([x as f64 + 0.5, y as f64 + 0.5]);
                for ch in 0..c {
                    data[(ch * oh + y) * ow + x] = image.sample(ch, u, v);
                }
            }
        }
        FrameTensor::new(Tensor::new(&[c, oh, ow], data).expect("sized")).expect("finite")
    }
}

/// Crop window and resize target for one projection crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub margin_w: f64,
    pub margin_h: f64,
    pub corner: CropCorner,
}

impl CropSpec {
    /// Draws margins independently from `range` for one crop variant.
    pub fn sample(range: (f64, f64), corner: CropCorner, rng: &mut ChaCha8Rng) -> Self {
        Self {
            margin_w: uniform(rng, range.0, range.1),
            margin_h: uniform(rng, range.0, range.1),
            corner,
        }
    }
}

fn clamp_window(start: f64, size: f64, limit: f64) -> (f64, f64) {
    if size >= limit {
        return (0.0, limit);
    }
    let start = start.clamp(0.0, limit - size);
    (start, size)
}

/// Computes the crop window around the bounding box of `joints2d` without resampling.
pub fn crop_window(
    joints2d: &[[f64; 2]],
    image_w: usize,
    image_h: usize,
    spec: &CropSpec,
    out_w: usize,
    out_h: usize,
) -> Result<CropTransform> {
    if joints2d.is_empty() {
        return Err(Error::EmptyBox);
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in joints2d {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let cw = (x1 - x0) + spec.margin_w.max(0.0);
    let ch = (y1 - y0) + spec.margin_h.max(0.0);
    if cw <= 0.0 || ch <= 0.0 {
        return Err(Error::EmptyBox);
    }
    let (left, top) = match spec.corner {
        CropCorner::TopLeft => (x0, y0),
        CropCorner::TopRight => (x1 - cw, y0),
        CropCorner::BottomLeft => (x0, y1 - ch),
        CropCorner::BottomRight => (x1 - cw, y1 - ch),
        CropCorner::Center => (
            x0 - spec.margin_w.max(0.0) / 2.0,
            y0 - spec.margin_h.max(0.0) / 2.0,
        ),
    };
    let (ox, cw) = clamp_window(left, cw, image_w as f64);
    let (oy, ch) = clamp_window(top, ch, image_h as f64);
    Ok(CropTransform {
        origin_x: ox,
        origin_y: oy,
        crop_w: cw,
        crop_h: ch,
        out_w,
        out_h,
    })
}

/// Crops `image` around the projected skeleton and resizes to `out_w × out_h`.
pub fn projection_crop(
    image: &FrameTensor,
    joints2d: &[[f64; 2]],
    spec: &CropSpec,
    out_w: usize,
    out_h: usize,
) -> Result<(FrameTensor, CropTransform)> {
    let t = crop_window(joints2d, image.width(), image.height(), spec, out_w, out_h)?;
    Ok((t.render(image), t))
}
