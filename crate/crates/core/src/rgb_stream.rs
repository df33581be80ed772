//! The RGB stream: a small strided CNN backbone, the two-branch
//! self-attention module, and skeleton attention (early fusion).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{project_to_image, CropTransform};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frame::{area_resize, FrameTensor};
use crate::nn::{eval_with, Conv2d, Init, Linear};
use crate::params::ParamStore;
use crate::skeleton_io::{CameraParams, SkeletonSequence};
use crate::tensor::Tensor;

/// Backbone hyperparameters: one `kernel × kernel` conv + ReLU per entry of `channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Square input size in pixels.
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: vec![16, 32],
            strides: vec![2, 2],
            kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty()
            || self.channels.len() != self.strides.len()
            || self.strides.contains(&0)
        {
            return Err(Error::Config(
                "backbone: channels and strides must be non-empty and equal length".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.input_size == 0 {
            return Err(Error::Config(
                "backbone: kernel must be odd and input_size positive".into(),
            ));
        }
        Ok(())
    }

    /// `(C, H', W')` of the feature map.
    pub fn out_shape(&self) -> (usize, usize, usize) {
        let pad = self.kernel / 2;
        let s = self.strides.iter().fold(self.input_size, |n, &st| {
            (n + 2 * pad - self.kernel) / st + 1
        });
        (*self.channels.last().expect("validated"), s, s)
    }
}

/// Stacked strided conv + ReLU blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut cin = 3;
        let convs = config
            .channels
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&cout, &s))| {
                let c = Conv2d::new(
                    store,
                    &format!("{name}.conv{i}"),
                    cin,
                    cout,
                    (k, k),
                    (s, s),
                    (k / 2, k / 2),
                    true,
                    Init::He,
                    rng,
                );
                cin = cout;
                c
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            convs,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    /// MACs for an input with `in_ch` channels (3 for a single frame).
    pub fn macs(&self) -> u64 {
        let mut n = self.config.input_size;
        let mut total = 0;
        for c in &self.convs {
            total += c.macs(n, n);
            n = c.out_size(n, n).0;
        }
        total
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (c, h, w) = g.value(x).dims3()?;
        let n = self.config.input_size;
        if c != 3 || h != n || w != n {
            return Err(Error::shape(format!(
                "backbone expects 3×{n}×{n}, got {c}×{h}×{w}"
            )));
        }
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(g, store, y)?;
            y = g.relu(y);
        }
        Ok(y)
    }
}

/// Plain-tensor backbone pass.
pub fn backbone_forward(image: &FrameTensor, store: &ParamStore, net: &Backbone) -> Result<Tensor> {
    eval_with(image.tensor(), |g, x| net.forward(g, store, x))
}

/// A `1 × H × W` weight map with every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    data: Tensor,
}

impl AttentionMask {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, _, _) = data.dims3()?;
        if c != 1 {
            return Err(Error::shape("attention mask must have one channel"));
        }
        if data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::shape("attention mask entries must lie in [0, 1]"));
        }
        Ok(Self { data })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::ones(&[1, h, w]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }
}

/// One self-attention branch: `M = σ(conv1×1(F))`, `F_self = M ⊙ F`,
/// plus the pooled projection `linear(GAP(F_self))` used in LSTM mode.
#[derive(Clone, Debug)]
pub struct SelfAttentionBranch {
    pub conv: Conv2d,
    pub proj: Linear,
}

impl SelfAttentionBranch {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.mask"),
            channels,
            1,
            (1, 1),
            (1, 1),
            (0, 0),
            true,
            Init::Glorot,
            rng,
        );
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            channels,
            dim,
            true,
            Init::Glorot,
            rng,
        );
        Self { conv, proj }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.proj.param_count()
    }

    /// Returns `(F_self, M_self)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let logits = self.conv.forward(g, store, f)?;
        let m = g.sigmoid(logits);
        let out = g.mask_mul(f, m)?;
        Ok((out, m))
    }

    /// `linear(GAP(F_self))`.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, f_self: Var) -> Result<Var> {
        let p = g.mean_pool(f_self)?;
        self.proj.forward(g, store, p)
    }
}

/// Plain-tensor self-attention of `F_in[C, H, W]`.
pub fn self_attention(
    f_in: &Tensor,
    store: &ParamStore,
    branch: &SelfAttentionBranch,
) -> Result<(Tensor, AttentionMask)> {
    let mut g = Graph::new();
    let x = g.constant(f_in.clone());
    let (out, m) = branch.forward(&mut g, store, x)?;
    Ok((
        g.value(out).clone(),
        AttentionMask::new(g.value(m).clone())?,
    ))
}

/// The joint with the largest displacement between frame 0 and `mid_index`,
/// with that displacement. Ties go to the lowest joint index.
pub fn max_moving_joint(seq: &SkeletonSequence, mid_index: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..seq.joint_count() {
        let a = seq.joint(0, j);
        let b = seq.joint(mid_index, j);
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        if d > best.1 {
            best = (j, d);
        }
    }
    best
}

/// Binary `out_h × out_w` raster of an axis-aligned square of side `side`
/// centered at `center` (crop pixels). A pixel belongs to the square when its
/// center lies in `[c − side/2, c + side/2)` on both axes. A square too small
/// to contain any pixel center still marks the pixel containing `center`.
pub fn rasterize_square(center: [f64; 2], side: f64, out_w: usize, out_h: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_w * out_h];
    let half = side / 2.0;
    let inside = |p: f64, c: f64| p >= c - half && p < c + half;
    let mut any = false;
    for y in 0..out_h {
        let py = y as f64 + 0.5;
        if !inside(py, center[1]) {
            continue;
        }
        for x in 0..out_w {
            if inside(x as f64 + 0.5, center[0]) {
                out[y * out_w + x] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (x, y) = (center[0].floor(), center[1].floor());
        if x >= 0.0 && y >= 0.0 && (x as usize) < out_w && (y as usize) < out_h {
            out[y as usize * out_w + x as usize] = 1.0;
        }
    }
    out
}

/// Skeleton attention mask on the full-resolution crop, before resizing.
#[derive(Clone, Debug)]
pub struct SkeletonMaskGeometry {
    pub joint: usize,
    pub displacement: f64,
    /// `j_max` in crop pixel coordinates.
    pub center: [f64; 2],
    pub side: f64,
    /// Binary raster of size `crop.out_h × crop.out_w`.
    pub raster: Vec<f64>,
}

/// Locates `j_max`, projects it at `mid_index` through `camera` and `crop`,
/// and rasterizes the square at crop resolution.
pub fn skeleton_mask_geometry(
    seq: &SkeletonSequence,
    mid_index: usize,
    camera: &CameraParams,
    crop: &CropTransform,
    square_frac: f64,
) -> Result<SkeletonMaskGeometry> {
    if mid_index >= seq.frame_count() {
        return Err(Error::shape(format!(
            "mid index {mid_index} outside {} frames",
            seq.frame_count()
        )));
    }
    let (joint, displacement) = max_moving_joint(seq, mid_index);
    let p = project_to_image(&[seq.joint(mid_index, joint)], camera).map_err(|e| match e {
        Error::BehindCamera { z, .. } => Error::BehindCamera { joint, z },
        other => other,
    })?[0];
    let center = crop.apply(p);
    let side = square_frac * crop.out_w.min(crop.out_h) as f64;
    let raster = rasterize_square(center, side, crop.out_w, crop.out_h);
    Ok(SkeletonMaskGeometry {
        joint,
        displacement,
        center,
        side,
        raster,
    })
}

/// The skeleton attention mask area-resized to `feat_w × feat_h`.
pub fn skeleton_attention_mask(
    seq: &SkeletonSequence,
    mid_index: usize,
    camera: &CameraParams,
    crop: &CropTransform,
    feat_w: usize,
    feat_h: usize,
    square_frac: f64,
) -> Result<AttentionMask> {
    let geo = skeleton_mask_geometry(seq, mid_index, camera, crop, square_frac)?;
    let small = area_resize(&geo.raster, crop.out_h, crop.out_w, feat_h, feat_w);
    let small = small.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    AttentionMask::new(Tensor::new(&[1, feat_h, feat_w], small)?)
}

/// `F_ske = M_ske ⊙ F_in`.
pub fn skeleton_attention(f_in: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (_, h, w) = f_in.dims3()?;
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(format!(
            "mask {}×{} against feature {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }
    eval_with(f_in, |g, x| {
        let m = g.constant(mask.tensor().clone());
        g.mask_mul(x, m)
    })
}

/// How the RGB attention features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbMode {
    /// Pooled vectors concatenated: two self-attention branches and the skeleton part.
    Lstm,
    /// Average of the self- and skeleton-attention maps, flattened to `C_R × S`.
    Gcn,
}

/// Output of [`rgb_feature`].
#[derive(Clone, Debug, PartialEq)]
pub enum RgbFeature {
    Vector(Tensor),
    Map(Tensor),
}

impl RgbFeature {
    pub fn tensor(&self) -> &Tensor {
        match self {
            RgbFeature::Vector(t) | RgbFeature::Map(t) => t,
        }
    }
}

/// GCN mode on the tape: `((F_self_a + F_self_b)/2 + F_ske)/2` as `C × S`.
pub fn rgb_map_var(g: &mut Graph, self_parts: &[Var], f_ske: Var) -> Result<Var> {
    let (c, h, w) = g.value(f_ske).dims3()?;
    let mut acc = self_parts[0];
    for &p in &self_parts[1..] {
        acc = g.add(acc, p)?;
    }
    let f_self = g.scale(acc, 1.0 / self_parts.len() as f64);
    let sum = g.add(f_self, f_ske)?;
    let avg = g.scale(sum, 0.5);
    g.reshape(avg, &[c, h * w])
}

/// Combines attention features.
///
/// `lstm` mode expects the branch vectors (each of length `D`) in
/// `self_parts` and the already-projected skeleton vector in `f_ske`; it
/// returns their concatenation of length `3D`. `gcn` mode expects feature
/// maps and returns the averaged `C_R × S` map.
pub fn rgb_feature(self_parts: &[Tensor], f_ske: &Tensor, mode: RgbMode) -> Result<RgbFeature> {
    if self_parts.is_empty() {
        return Err(Error::shape(
            "rgb_feature needs at least one self-attention part",
        ));
    }
    let mut g = Graph::new();
    let parts: Vec<Var> = self_parts.iter().map(|t| g.constant(t.clone())).collect();
    let ske = g.constant(f_ske.clone());
    for &p in &parts {
        if g.value(p).shape() != g.value(parts[0]).shape() {
            return Err(Error::shape("self-attention parts differ in shape"));
        }
    }
    match mode {
        RgbMode::Lstm => {
            if g.value(ske).ndim() != 1 || g.value(parts[0]).ndim() != 1 {
                return Err(Error::shape("lstm mode expects pooled vectors"));
            }
            let mut all = parts.clone();
            all.push(ske);
            let v = g.concat(&all, 0)?;
            Ok(RgbFeature::Vector(g.value(v).clone()))
        }
        RgbMode::Gcn => {
            if g.value(ske).shape() != g.value(parts[0]).shape() {
                return Err(Error::shape("gcn mode expects equal-shaped maps"));
            }
            let v = rgb_map_var(&mut g, &parts, ske)?;
            Ok(RgbFeature::Map(g.value(v).clone()))
        }
    }
}
