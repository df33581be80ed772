//! Late fusion of skeleton and RGB features into class scores.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Class scores with their softmax probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Logits {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let probs = softmax(&scores);
        Self { scores, probs }
    }

    /// Wraps a probability vector; scores are its logarithm.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let scores = probs.iter().map(|p| p.ln()).collect();
        Self { scores, probs }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the highest probability; ties go to the lowest class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Concatenation → L2 normalization → FC + leaky ReLU → FC → FC.
#[derive(Clone, Debug)]
pub struct LstmFusion {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub slope: f64,
}

/// Epsilon under the square root of the L2 normalization.
pub const L2_EPS: f64 = 1e-12;

impl LstmFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                in_dim,
                hidden,
                true,
                Init::He,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                hidden,
                true,
                Init::Glorot,
                rng,
            ),
            fc3: Linear::new(
                store,
                &format!("{name}.fc3"),
                hidden,
                classes,
                true,
                Init::Glorot,
                rng,
            ),
            slope: 0.01,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.fc3.param_count()
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs() + self.fc3.macs()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_skel: Var,
        f_rgb: Var,
    ) -> Result<Var> {
        let cat = g.concat(&[f_skel, f_rgb], 0)?;
        if g.value(cat).data().iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroVector);
        }
        let n = g.l2_normalize(cat, L2_EPS);
        let h = self.fc1.forward(g, store, n)?;
        let h = g.leaky_relu(h, self.slope);
        let h = self.fc2.forward(g, store, h)?;
        self.fc3.forward(g, store, h)
    }
}

/// Plain-tensor LSTM-mode fusion.
pub fn lstm_fusion(
    f_skel: &Tensor,
    f_rgb: &Tensor,
    store: &ParamStore,
    head: &LstmFusion,
) -> Result<Logits> {
    let mut g = Graph::new();
    let s = g.constant(f_skel.clone());
    let r = g.constant(f_rgb.clone());
    let out = head.forward(&mut g, store, s, r)?;
    Ok(Logits::from_scores(g.value(out).data().to_vec()))
}

/// Builds `F_com` on the tape from `F_GCN[C_S, T', V]` and `F_RGB[C_R, S]`.
///
/// Rows are ordered `[RGB channels; skeleton channels]`, columns
/// `[S RGB positions, V joints]`. The skeleton map is max-pooled over time;
/// the pooled vectors are global averages of the two maps.
pub fn build_combined_var(g: &mut Graph, f_gcn: Var, f_rgb: Var) -> Result<Var> {
    let (_, s) = g.value(f_rgb).dims2()?;
    let (_, _, v) = g.value(f_gcn).dims3()?;
    let skel = g.max_over_time(f_gcn)?;
    let skel_vec = g.mean_pool(skel)?;
    let rgb_vec = g.mean_pool(f_rgb)?;
    let skel_rep = g.repeat_cols(skel_vec, s)?;
    let rgb_rep = g.repeat_cols(rgb_vec, v)?;
    let rgb_cols = g.concat(&[f_rgb, skel_rep], 0)?;
    let skel_cols = g.concat(&[rgb_rep, skel], 0)?;
    g.concat(&[rgb_cols, skel_cols], 1)
}

/// Plain-tensor combined feature of shape `(C_R + C_S) × (S + V)`.
pub fn build_combined(f_gcn: &Tensor, f_rgb: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(f_gcn.clone());
    let b = g.constant(f_rgb.clone());
    let out = build_combined_var(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

/// How the relation mask is applied to `F_com`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationApply {
    /// `F_rel = F_com · M_relᵀ`.
    #[default]
    Aggregate,
    /// `F_rel = F_com ⊙ m`, with `m` the column mean of `M_rel` broadcast over rows.
    Broadcast,
}

/// Two 1×1 convolutions `θ`, `φ` and the row-softmax relation mask.
#[derive(Clone, Debug)]
pub struct RelationFusion {
    pub theta: Linear,
    pub phi: Linear,
    pub apply: RelationApply,
}

impl RelationFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        inner: usize,
        apply: RelationApply,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            theta: Linear::new(
                store,
                &format!("{name}.theta"),
                channels,
                inner,
                true,
                Init::Glorot,
                rng,
            ),
            phi: Linear::new(
                store,
                &format!("{name}.phi"),
                channels,
                inner,
                true,
                Init::Glorot,
                rng,
            ),
            apply,
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.param_count() + self.phi.param_count()
    }

    /// θ/φ projections, the `N × N` product, and the aggregation.
    pub fn macs(&self, n: usize) -> u64 {
        let c = self.theta.in_dim as u64;
        let inner = self.theta.out_dim as u64;
        let n = n as u64;
        2 * c * inner * n + inner * n * n + c * n * n
    }

    /// Returns `(F_rel, M_rel)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_com: Var) -> Result<(Var, Var)> {
        let (c, _) = g.value(f_com).dims2()?;
        if c != self.theta.in_dim {
            return Err(Error::shape(format!(
                "relation fusion expects {} channels, got {c}",
                self.theta.in_dim
            )));
        }
        let th = self.theta.forward_cols(g, store, f_com)?;
        let ph = self.phi.forward_cols(g, store, f_com)?;
        let th_t = g.transpose(th)?;
        let pre = g.matmul(th_t, ph)?;
        let m = g.softmax_rows(pre)?;
        let f_rel = match self.apply {
            RelationApply::Aggregate => {
                let mt = g.transpose(m)?;
                g.matmul(f_com, mt)?
            }
            RelationApply::Broadcast => {
                let mt = g.transpose(m)?;
                let col_mean = g.mean_pool(mt)?;
                g.mask_mul(f_com, col_mean)?
            }
        };
        Ok((f_rel, m))
    }
}

/// Plain-tensor relation fusion: returns `(F_rel, M_rel)`.
pub fn relation_fusion(
    f_com: &Tensor,
    store: &ParamStore,
    rel: &RelationFusion,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(f_com.clone());
    let (f, m) = rel.forward(&mut g, store, x)?;
    Ok((g.value(f).clone(), g.value(m).clone()))
}

/// 1×1 conv + ReLU → global average pool → FC + ReLU → FC.
#[derive(Clone, Debug)]
pub struct GcnFusionHead {
    pub conv: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GcnFusionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        conv_out: usize,
        hidden: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Linear::new(
                store,
                &format!("{name}.conv"),
                channels,
                conv_out,
                true,
                Init::He,
                rng,
            ),
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                conv_out,
                hidden,
                true,
                Init::He,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                classes,
                true,
                Init::Glorot,
                rng,
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self, n: usize) -> u64 {
        self.conv.macs() * n as u64 + self.fc1.macs() + self.fc2.macs()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_rel: Var) -> Result<Var> {
        let h = self.conv.forward_cols(g, store, f_rel)?;
        let h = g.relu(h);
        let p = g.mean_pool(h)?;
        let h = self.fc1.forward(g, store, p)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Plain-tensor GCN fusion head.
pub fn gcn_fusion_head(f_rel: &Tensor, store: &ParamStore, head: &GcnFusionHead) -> Result<Logits> {
    let mut g = Graph::new();
    let x = g.constant(f_rel.clone());
    let out = head.forward(&mut g, store, x)?;
    Ok(Logits::from_scores(g.value(out).data().to_vec()))
}

/// `w · softmax(a) + (1 − w) · softmax(b)`.
pub fn decision_fusion(a: &Logits, b: &Logits, w: f64) -> Result<Logits> {
    if a.classes() != b.classes() {
        return Err(Error::shape(format!(
            "decision fusion of {} and {} classes",
            a.classes(),
            b.classes()
        )));
    }
    let probs = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(pa, pb)| w * pa + (1.0 - w) * pb)
        .collect();
    Ok(Logits::from_probs(probs))
}

/// Projects both features to a common width, sums them and classifies.
#[derive(Clone, Debug)]
pub struct SumFusion {
    pub proj_skel: Linear,
    pub proj_rgb: Linear,
    pub fc: Linear,
}

impl SumFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        skel_dim: usize,
        rgb_dim: usize,
        common: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            proj_skel: Linear::new(
                store,
                &format!("{name}.proj_skel"),
                skel_dim,
                common,
                false,
                Init::Glorot,
                rng,
            ),
            proj_rgb: Linear::new(
                store,
                &format!("{name}.proj_rgb"),
                rgb_dim,
                common,
                false,
                Init::Glorot,
                rng,
            ),
            fc: Linear::new(
                store,
                &format!("{name}.fc"),
                common,
                classes,
                true,
                Init::Glorot,
                rng,
            ),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj_skel.param_count() + self.proj_rgb.param_count() + self.fc.param_count()
    }

    pub fn macs(&self) -> u64 {
        self.proj_skel.macs() + self.proj_rgb.macs() + self.fc.macs()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_skel: Var,
        f_rgb: Var,
    ) -> Result<Var> {
        let a = self.proj_skel.forward(g, store, f_skel)?;
        let b = self.proj_rgb.forward(g, store, f_rgb)?;
        let s = g.add(a, b)?;
        self.fc.forward(g, store, s)
    }
}

/// Plain-tensor sum fusion.
pub fn sum_fusion(
    f_skel: &Tensor,
    f_rgb: &Tensor,
    store: &ParamStore,
    head: &SumFusion,
) -> Result<Logits> {
    let mut g = Graph::new();
    let s = g.constant(f_skel.clone());
    let r = g.constant(f_rgb.clone());
    let out = head.forward(&mut g, store, s, r)?;
    Ok(Logits::from_scores(g.value(out).data().to_vec()))
}
