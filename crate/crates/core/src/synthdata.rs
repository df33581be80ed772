//! Deterministic stick-figure action clips with paired skeletons and frames.
//!
//! Three class families separate the two modalities:
//! * A: a distinct single-joint motion per class, no object;
//! * B: one shared motion, a distinct colored object per class;
//! * C: label `(motion + object) mod P`, so neither cue alone fixes the label.
//!
//! Every motion is a sinusoid that passes through the rest pose at the middle
//! frame, so the middle RGB frame shows no motion cue at all.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::project_to_image;
use crate::error::{Error, Result};
use crate::skeleton_io::{
    to_ntu_text, va_pre_normalize, CameraParams, Manifest, ManifestSample, SampleMeta,
    SkeletonSequence,
};

pub const HEAD: usize = 0;
pub const TORSO: usize = 1;
pub const L_ELBOW: usize = 2;
pub const L_HAND: usize = 3;
pub const R_ELBOW: usize = 4;
pub const R_HAND: usize = 5;
pub const PELVIS: usize = 6;
pub const L_FOOT: usize = 7;
pub const R_FOOT: usize = 8;

pub const JOINT_NAMES: [&str; 9] = [
    "head", "torso", "l_elbow", "l_hand", "r_elbow", "r_hand", "pelvis", "l_foot", "r_foot",
];

/// Bones of the 9-joint figure.
pub const EDGES: [(usize, usize); 8] = [
    (HEAD, TORSO),
    (TORSO, L_ELBOW),
    (L_ELBOW, L_HAND),
    (TORSO, R_ELBOW),
    (R_ELBOW, R_HAND),
    (TORSO, PELVIS),
    (PELVIS, L_FOOT),
    (PELVIS, R_FOOT),
];

/// Rest pose in meters, body-centered, y pointing down.
pub const REST_POSE: [[f64; 3]; 9] = [
    [0.0, -0.70, 0.0],
    [0.0, -0.45, 0.0],
    [-0.22, -0.30, 0.0],
    [-0.30, -0.08, 0.0],
    [0.22, -0.30, 0.0],
    [0.30, -0.08, 0.0],
    [0.0, 0.05, 0.0],
    [-0.15, 0.80, 0.0],
    [0.15, 0.80, 0.0],
];

/// A single joint oscillating along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionPattern {
    pub joint: usize,
    pub axis: usize,
}

/// Class-specific motions, indexed by motion id.
pub const MOTIONS: [MotionPattern; 6] = [
    MotionPattern {
        joint: L_HAND,
        axis: 1,
    },
    MotionPattern {
        joint: R_HAND,
        axis: 0,
    },
    MotionPattern {
        joint: R_FOOT,
        axis: 2,
    },
    MotionPattern {
        joint: L_FOOT,
        axis: 1,
    },
    MotionPattern {
        joint: R_ELBOW,
        axis: 2,
    },
    MotionPattern {
        joint: L_ELBOW,
        axis: 0,
    },
];

/// The motion shared by every family-B class.
pub const SHARED_MOTION: MotionPattern = MotionPattern {
    joint: HEAD,
    axis: 0,
};

/// Object colors, indexed by object id.
pub const COLORS: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 180, 40],
    [40, 60, 220],
    [220, 200, 40],
    [200, 40, 200],
    [40, 200, 200],
];

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
pub const LIMB: [u8; 3] = [40, 40, 40];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
    C,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::A => "A",
            Family::B => "B",
            Family::C => "C",
        }
    }
}

/// One generating configuration: a motion id (`None` = shared motion) and an object id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub motion: Option<usize>,
    pub object: Option<usize>,
}

/// A class and the variants its samples cycle through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub family: Family,
    pub variants: Vec<Variant>,
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub image_size: u32,
    pub focal: f64,
    /// Gaussian skeleton noise (meters); frames are rendered from the clean pose.
    pub noise: f64,
    pub amplitude: f64,
    pub object_joint: usize,
    pub object_size: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: Vec<ClassDef>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::reference(3, 3)
    }
}

impl SynthSpec {
    /// `motions` family-A classes, `objects` family-B classes and `objects`
    /// cyclic family-C classes (requires `motions == objects` for C).
    pub fn reference(motions: usize, objects: usize) -> Self {
        let mut classes = Vec::new();
        for m in 0..motions {
            classes.push(ClassDef {
                name: format!("A{m}_motion_{}", JOINT_NAMES[MOTIONS[m].joint]),
                family: Family::A,
                variants: vec![Variant {
                    motion: Some(m),
                    object: None,
                }],
            });
        }
        for k in 0..objects {
            classes.push(ClassDef {
                name: format!("B{k}_object_{k}"),
                family: Family::B,
                variants: vec![Variant {
                    motion: None,
                    object: Some(k),
                }],
            });
        }
        if motions == objects {
            for c in 0..objects {
                let variants = (0..motions)
                    .map(|m| Variant {
                        motion: Some(m),
                        object: Some((c + objects - m) % objects),
                    })
                    .collect();
                classes.push(ClassDef {
                    name: format!("C{c}_sum_mod_{objects}"),
                    family: Family::C,
                    variants,
                });
            }
        }
        Self {
            seed: 7,
            frames: 24,
            image_size: 64,
            focal: 80.0,
            noise: 0.005,
            amplitude: 0.3,
            object_joint: R_HAND,
            object_size: 5.0,
            train_per_class: 60,
            test_per_class: 20,
            classes,
        }
    }

    /// Parses and validates a TOML spec; missing fields take the reference values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn camera(&self) -> CameraParams {
        let c = self.image_size as f64 / 2.0;
        CameraParams {
            fx: self.focal,
            fy: self.focal,
            cx: c,
            cy: c,
            image_w: self.image_size,
            image_h: self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.frames < 2 {
            return bad(format!("frames = {} (need at least 2)", self.frames));
        }
        if self.image_size == 0 || self.focal <= 0.0 {
            return bad("image size and focal length must be positive".into());
        }
        if self.noise < 0.0 || !self.noise.is_finite() || !self.amplitude.is_finite() {
            return bad("noise must be finite and non-negative".into());
        }
        if self.object_joint >= REST_POSE.len() {
            return bad(format!("object joint {} out of range", self.object_joint));
        }
        if self.train_per_class + self.test_per_class == 0 {
            return bad("no samples per class".into());
        }
        for c in &self.classes {
            if c.variants.is_empty() {
                return bad(format!("class {} has no variants", c.name));
            }
            for v in &c.variants {
                if v.motion.is_some_and(|m| m >= MOTIONS.len()) {
                    return bad(format!("class {}: unknown motion", c.name));
                }
                if v.object.is_some_and(|k| k >= COLORS.len()) {
                    return bad(format!("class {}: unknown object", c.name));
                }
            }
        }
        Ok(())
    }

    pub fn samples_per_class(&self) -> usize {
        self.train_per_class + self.test_per_class
    }

    pub fn total_samples(&self) -> usize {
        self.classes.len() * self.samples_per_class()
    }
}

/// Displacement of the moving joint at frame `t`: zero at the middle frame, `−A` at frame 0.
pub fn swing(t: usize, frames: usize, amplitude: f64) -> f64 {
    let mid = ((frames - 1) / 2).max(1) as f64;
    amplitude * (FRAC_PI_2 * (t as f64 - mid) / mid).sin()
}

/// A generated sample with its ground truth.
#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub id: String,
    pub label: usize,
    pub family: Family,
    pub variant: Variant,
    pub split: &'static str,
    /// Noisy skeleton as stored on disk.
    pub skeleton: SkeletonSequence,
    /// Noise-free joints used for rendering.
    pub clean: Vec<Vec<[f64; 3]>>,
    pub camera: CameraParams,
    pub moving_joint: usize,
    pub object_joint: Option<usize>,
    pub object_color: Option<usize>,
}

impl RenderedSample {
    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            family: self.family.name().into(),
            motion: self.variant.motion,
            moving_joint: self.moving_joint,
            object_joint: self.object_joint,
            object_color: self.object_color,
            split: self.split.into(),
        }
    }

    pub fn render(&self, t: usize, spec: &SynthSpec) -> Result<RgbImage> {
        let object = self.object_color.map(|k| (spec.object_joint, COLORS[k]));
        render_frame(
            &self.clean[t],
            &EDGES,
            object,
            &self.camera,
            spec.object_size,
        )
    }
}

fn generate_one(spec: &SynthSpec, index: usize) -> Result<RenderedSample> {
    let per = spec.samples_per_class();
    let label = index / per;
    let within = index % per;
    let class = &spec.classes[label];
    let variant = class.variants[within % class.variants.len()];
    let split = if within < spec.train_per_class {
        "train"
    } else {
        "test"
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let offset = [
        rng.random_range(-0.25..0.25),
        rng.random_range(-0.1..0.1),
        rng.random_range(2.8..3.2),
    ];
    let motion = variant.motion.map(|m| MOTIONS[m]).unwrap_or(SHARED_MOTION);
    let clean: Vec<Vec<[f64; 3]>> = (0..spec.frames)
        .map(|t| {
            let d = swing(t, spec.frames, spec.amplitude);
            REST_POSE
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut q = [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]];
                    if j == motion.joint {
                        q[motion.axis] += d;
                    }
                    q
                })
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let noisy: Vec<Vec<[f64; 3]>> = clean
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|p| {
                    if spec.noise == 0.0 {
                        *p
                    } else {
                        [
                            p[0] + normal.sample(&mut rng),
                            p[1] + normal.sample(&mut rng),
                            p[2] + normal.sample(&mut rng),
                        ]
                    }
                })
                .collect()
        })
        .collect();
    let camera = spec.camera();
    let mut color = Vec::with_capacity(spec.frames * REST_POSE.len() * 2);
    for frame in &clean {
        for p in project_to_image(frame, &camera)? {
            color.extend_from_slice(&p);
        }
    }
    let skeleton = SkeletonSequence::from_frames(&noisy)?.with_color(color)?;
    Ok(RenderedSample {
        id: format!("s{index:05}"),
        label,
        family: class.family,
        variant,
        split,
        skeleton,
        clean,
        camera,
        moving_joint: motion.joint,
        object_joint: variant.object.map(|_| spec.object_joint),
        object_color: variant.object,
    })
}

/// Generates every sample in memory (no frames are rendered yet).
pub fn generate_samples(spec: &SynthSpec) -> Result<Vec<RenderedSample>> {
    spec.validate()?;
    (0..spec.total_samples())
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

/// Draws the figure: anti-aliased 1-px limbs and an optional filled object square.
pub fn render_frame(
    joints: &[[f64; 3]],
    edges: &[(usize, usize)],
    object: Option<(usize, [u8; 3])>,
    camera: &CameraParams,
    object_size: f64,
) -> Result<RgbImage> {
    let pts = project_to_image(joints, camera)?;
    let (w, h) = (camera.image_w, camera.image_h);
    let mut cover = vec![0.0f64; (w * h) as usize];
    for &(a, b) in edges {
        let (p, q) = (pts[a], pts[b]);
        let x0 = (p[0].min(q[0]) - 1.5).floor().max(0.0) as i64;
        let x1 = (p[0].max(q[0]) + 1.5).ceil().min(w as f64) as i64;
        let y0 = (p[1].min(q[1]) - 1.5).floor().max(0.0) as i64;
        let y1 = (p[1].max(q[1]) + 1.5).ceil().min(h as f64) as i64;
        for y in y0..y1 {
            for x in x0..x1 {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                let d = point_segment_distance(c, p, q);
                let v = (1.0 - d).clamp(0.0, 1.0);
                let slot = &mut cover[(y as u32 * w + x as u32) as usize];
                *slot = slot.max(v);
            }
        }
    }
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let a = cover[(y * w + x) as usize];
        let mix = |bg: u8, fg: u8| ((1.0 - a) * bg as f64 + a * fg as f64).round() as u8;
        Rgb([
            mix(BACKGROUND[0], LIMB[0]),
            mix(BACKGROUND[1], LIMB[1]),
            mix(BACKGROUND[2], LIMB[2]),
        ])
    });
    if let Some((joint, color)) = object {
        let c = pts[joint];
        let half = object_size / 2.0;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if (px - c[0]).abs() <= half && (py - c[1]).abs() <= half {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    Ok(img)
}

fn point_segment_distance(c: [f64; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
    let d = [q[0] - p[0], q[1] - p[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((c[0] - p[0]) * d[0] + (c[1] - p[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let e = [p[0] + t * d[0] - c[0], p[1] + t * d[1] - c[1]];
    (e[0] * e[0] + e[1] * e[1]).sqrt()
}

/// Writes `manifest.json`, `skeletons/<id>.skeleton` and `frames/<id>/<t>.png` under `root`.
pub fn generate_dataset(spec: &SynthSpec, root: &Path) -> Result<Vec<RenderedSample>> {
    let samples = generate_samples(spec)?;
    let skel_dir = root.join("skeletons");
    fs::create_dir_all(&skel_dir).map_err(|e| Error::io(&skel_dir, e))?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let path = skel_dir.join(format!("{}.skeleton", s.id));
        fs::write(&path, to_ntu_text(&s.skeleton)).map_err(|e| Error::io(&path, e))?;
        let dir = root.join("frames").join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for t in 0..spec.frames {
            let path = dir.join(format!("{t:03}.png"));
            s.render(t, spec)?
                .save(&path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    })?;
    let manifest = Manifest {
        samples: samples
            .iter()
            .map(|s| ManifestSample {
                skeleton_file: format!("skeletons/{}.skeleton", s.id),
                frame_dir: format!("frames/{}", s.id),
                label: s.label,
                camera: s.camera,
                meta: Some(s.meta()),
            })
            .collect(),
        classes: spec.classes.iter().map(|c| c.name.clone()).collect(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    let spec_path = root.join("spec.toml");
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(samples)
}

/// 1-NN over VA-pre-normalized raw skeletons (squared Euclidean distance).
/// Ties go to the earliest training sample.
pub fn nn_skeleton_classifier(
    train: &[(SkeletonSequence, usize)],
    query: &SkeletonSequence,
) -> usize {
    let q = va_pre_normalize(query);
    let mut best = (f64::INFINITY, 0);
    for (s, label) in train {
        let n = va_pre_normalize(s);
        let d: f64 = n
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.0 {
            best = (d, *label);
        }
    }
    best.1
}

/// Histogram of chromatic pixels over `bins` hue sectors. Gray pixels
/// (channel spread below 60) are ignored.
pub fn color_histogram(img: &RgbImage, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    for px in img.pixels() {
        let [r, g, b] = px.0.map(|v| v as f64);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        if max - min < 60.0 {
            continue;
        }
        let d = max - min;
        let hue = if max == r {
            ((g - b) / d).rem_euclid(6.0)
        } else if max == g {
            (b - r) / d + 2.0
        } else {
            (r - g) / d + 4.0
        } / 6.0;
        hist[((hue * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    hist
}

/// 1-NN over color histograms (L1 distance). Ties go to the earliest training sample.
pub fn color_histogram_classifier(train: &[(Vec<f64>, usize)], query: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (h, label) in train {
        let d: f64 = h.iter().zip(query).map(|(a, b)| (a - b).abs()).sum();
        if d < best.0 {
            best = (d, *label);
        }
    }
    best.1
}
