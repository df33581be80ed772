//! The assembled two-stream network: skeleton stream, RGB stream with
//! attention, temporary per-stream heads, and the fusion module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{FrameMerge, FusionMode, ModelConfig, SkeletonBackbone};
use crate::error::{Error, Result};
use crate::fusion::{
    build_combined_var, decision_fusion, GcnFusionHead, Logits, LstmFusion, RelationFusion,
    SumFusion,
};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::rgb_stream::{rgb_map_var, AttentionMask, Backbone, RgbMode, SelfAttentionBranch};
use crate::skeleton_stream::{build_graph, BiLstm, SkeletonGraph, Stgcn};
use crate::tensor::Tensor;

/// Parameter name prefixes of the model parts.
pub const SKEL: &str = "skel.";
pub const RGB: &str = "rgb.";
pub const HEADS: &str = "head.";
pub const FUSION: &str = "fusion.";

/// Which stream a temporary head sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Skeleton,
    Rgb,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Skeleton => SKEL,
            Stream::Rgb => RGB,
        }
    }

    pub fn head_prefix(self) -> &'static str {
        match self {
            Stream::Skeleton => "head.skel.",
            Stream::Rgb => "head.rgb.",
        }
    }
}

/// One RGB frame ready for the network: the normalized crop and its skeleton mask.
#[derive(Clone, Debug)]
pub struct FrameInput {
    /// `3 × n × n`, centered to `[-0.5, 0.5]`.
    pub image: Tensor,
    /// `1 × H' × W'` skeleton-attention mask.
    pub mask: Tensor,
}

/// Network input for one sample.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `3 × T × V` for ST-GCN, `T × 3V` for the Bi-LSTM.
    pub skeleton: Tensor,
    pub frames: Vec<FrameInput>,
}

#[derive(Clone, Debug)]
pub enum SkeletonNet {
    Stgcn(Stgcn),
    Bilstm(BiLstm),
}

#[derive(Clone, Debug)]
pub enum FusionNet {
    Gcn {
        rel: RelationFusion,
        head: GcnFusionHead,
    },
    Lstm(LstmFusion),
    Sum(SumFusion),
    /// Mixes the two stream heads' probabilities; no parameters of its own.
    Decision,
}

/// Skeleton stream outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SkelOut {
    /// `C_S × T' × V` (ST-GCN only).
    pub map: Option<Var>,
    pub vec: Var,
}

/// RGB stream outputs on the tape.
#[derive(Clone, Debug)]
pub struct RgbOut {
    /// `C_R × S` (GCN mode only).
    pub map: Option<Var>,
    pub vec: Var,
    /// Self-attention masks of the first frame, one per branch.
    pub self_masks: Vec<Var>,
}

/// Stream outputs detached from any graph, for training the fusion on frozen streams.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub skel_map: Option<Tensor>,
    pub skel_vec: Tensor,
    pub rgb_map: Option<Tensor>,
    pub rgb_vec: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub classes: usize,
    pub store: ParamStore,
    pub graph: SkeletonGraph,
    pub skel: SkeletonNet,
    pub backbone: Backbone,
    pub self_att: Vec<SelfAttentionBranch>,
    /// Projects the max-pooled skeleton-attention feature to `D` in LSTM mode.
    pub ske_proj: Linear,
    pub skel_head: Linear,
    pub rgb_head: Linear,
    pub fusion: FusionNet,
}

impl Model {
    /// Builds and initializes every parameter from `seed`. Parameters are
    /// created in a fixed order, so the streams' initial values do not depend
    /// on the fusion mode or the attention toggles.
    pub fn new(config: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let graph = build_graph(&config.edges, config.joints, config.partition)?;

        let skel = match config.backbone {
            SkeletonBackbone::Stgcn => SkeletonNet::Stgcn(Stgcn::new(
                &mut store,
                "skel.stgcn",
                &config.stgcn,
                &graph,
                &mut rng,
            )?),
            SkeletonBackbone::Bilstm => SkeletonNet::Bilstm(BiLstm::new(
                &mut store,
                "skel.bilstm",
                3 * config.joints,
                &config.lstm,
                &mut rng,
            )?),
        };
        let backbone = Backbone::new(&mut store, "rgb.backbone", &config.rgb, &mut rng)?;
        let (c_r, _, _) = config.rgb.out_shape();
        let d = config.feature_dim;
        let self_att = (0..2)
            .map(|i| {
                SelfAttentionBranch::new(&mut store, &format!("rgb.self{i}"), c_r, d, &mut rng)
            })
            .collect();
        let ske_proj = Linear::new(
            &mut store,
            "rgb.ske_proj",
            c_r,
            d,
            true,
            Init::Glorot,
            &mut rng,
        );

        let s_dim = match &skel {
            SkeletonNet::Stgcn(n) => n.config.out_channels(),
            SkeletonNet::Bilstm(n) => n.out_dim(),
        };
        let r_dim = match config.backbone {
            SkeletonBackbone::Stgcn => c_r,
            SkeletonBackbone::Bilstm => 3 * d,
        };
        let skel_head = Linear::new(
            &mut store,
            "head.skel.fc",
            s_dim,
            classes,
            true,
            Init::Glorot,
            &mut rng,
        );
        let rgb_head = Linear::new(
            &mut store,
            "head.rgb.fc",
            r_dim,
            classes,
            true,
            Init::Glorot,
            &mut rng,
        );

        let mut fusion_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4655_5349);
        let fusion = match config.fusion {
            FusionMode::Gcn => {
                let c = s_dim + c_r;
                let inner = if config.relation_inner == 0 {
                    (c / 2).max(1)
                } else {
                    config.relation_inner
                };
                FusionNet::Gcn {
                    rel: RelationFusion::new(
                        &mut store,
                        "fusion.rel",
                        c,
                        inner,
                        config.relation_apply,
                        &mut fusion_rng,
                    ),
                    head: GcnFusionHead::new(
                        &mut store,
                        "fusion.head",
                        c,
                        config.head_channels,
                        config.fusion_hidden,
                        classes,
                        &mut fusion_rng,
                    ),
                }
            }
            FusionMode::Lstm => FusionNet::Lstm(LstmFusion::new(
                &mut store,
                "fusion.lstm",
                s_dim + r_dim,
                config.fusion_hidden,
                classes,
                &mut fusion_rng,
            )),
            FusionMode::Sum => FusionNet::Sum(SumFusion::new(
                &mut store,
                "fusion.sum",
                s_dim,
                r_dim,
                config.fusion_hidden,
                classes,
                &mut fusion_rng,
            )),
            FusionMode::Decision => FusionNet::Decision,
        };
        Ok(Self {
            config: config.clone(),
            classes,
            store,
            graph,
            skel,
            backbone,
            self_att,
            ske_proj,
            skel_head,
            rgb_head,
            fusion,
        })
    }

    pub fn rgb_mode(&self) -> RgbMode {
        match self.config.backbone {
            SkeletonBackbone::Stgcn => RgbMode::Gcn,
            SkeletonBackbone::Bilstm => RgbMode::Lstm,
        }
    }

    /// `C_S`: channels of the skeleton feature map (or vector length for the Bi-LSTM).
    pub fn skel_channels(&self) -> usize {
        match &self.skel {
            SkeletonNet::Stgcn(n) => n.config.out_channels(),
            SkeletonNet::Bilstm(n) => n.out_dim(),
        }
    }

    /// Length of the pooled skeleton vector.
    pub fn skel_dim(&self) -> usize {
        self.skel_channels()
    }

    /// Length of the pooled RGB vector.
    pub fn rgb_dim(&self) -> usize {
        match self.rgb_mode() {
            RgbMode::Gcn => self.config.rgb.out_shape().0,
            RgbMode::Lstm => 3 * self.config.feature_dim,
        }
    }

    /// `(H', W')` of the RGB feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let (_, h, w) = self.config.rgb.out_shape();
        (h, w)
    }

    pub fn skel_forward(&self, g: &mut Graph, input: &ModelInput) -> Result<SkelOut> {
        let store = &self.store;
        match &self.skel {
            SkeletonNet::Stgcn(net) => {
                let x = g.constant(input.skeleton.clone());
                let map = net.forward(g, store, &self.graph, x)?;
                let vec = g.mean_pool(map)?;
                Ok(SkelOut {
                    map: Some(map),
                    vec,
                })
            }
            SkeletonNet::Bilstm(net) => {
                let (t, d) = input.skeleton.dims2()?;
                let steps: Vec<Var> = (0..t)
                    .map(|k| {
                        g.constant(Tensor::from_vec(
                            input.skeleton.data()[k * d..(k + 1) * d].to_vec(),
                        ))
                    })
                    .collect();
                let vec = net.forward(g, store, &steps)?;
                Ok(SkelOut { map: None, vec })
            }
        }
    }

    pub fn rgb_forward(&self, g: &mut Graph, input: &ModelInput) -> Result<RgbOut> {
        if input.frames.is_empty() {
            return Err(Error::shape("no RGB frames in the input"));
        }
        let store = &self.store;
        let mode = self.rgb_mode();
        let mut maps = Vec::new();
        let mut vecs = Vec::new();
        let mut self_masks = Vec::new();
        for (fi, frame) in input.frames.iter().enumerate() {
            let x = g.constant(frame.image.clone());
            let f = self.backbone.forward(g, store, x)?;
            let mut parts = Vec::with_capacity(self.self_att.len());
            for br in &self.self_att {
                if self.config.self_attention {
                    let (fs, m) = br.forward(g, store, f)?;
                    if fi == 0 {
                        self_masks.push(m);
                    }
                    parts.push(fs);
                } else {
                    parts.push(f);
                }
            }
            let ske = if self.config.skeleton_attention {
                let m = g.constant(frame.mask.clone());
                g.mask_mul(f, m)?
            } else {
                f
            };
            match mode {
                RgbMode::Gcn => {
                    let map = rgb_map_var(g, &parts, ske)?;
                    vecs.push(g.mean_pool(map)?);
                    maps.push(map);
                }
                RgbMode::Lstm => {
                    let mut pieces = Vec::with_capacity(parts.len() + 1);
                    for (br, &p) in self.self_att.iter().zip(&parts) {
                        pieces.push(br.pooled(g, store, p)?);
                    }
                    let mx = g.max_pool(ske)?;
                    pieces.push(self.ske_proj.forward(g, store, mx)?);
                    vecs.push(g.concat(&pieces, 0)?);
                }
            }
        }
        let merge = self.config.frame_merge;
        let combine = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
            let mut acc = xs[0];
            for &x in &xs[1..] {
                acc = match merge {
                    FrameMerge::Mean => g.add(acc, x)?,
                    FrameMerge::Max => g.maximum(acc, x)?,
                };
            }
            Ok(match merge {
                FrameMerge::Mean if xs.len() > 1 => g.scale(acc, 1.0 / xs.len() as f64),
                _ => acc,
            })
        };
        let map = if maps.is_empty() {
            None
        } else {
            Some(combine(g, &maps)?)
        };
        let vec = combine(g, &vecs)?;
        Ok(RgbOut {
            map,
            vec,
            self_masks,
        })
    }

    pub fn head_forward(&self, g: &mut Graph, stream: Stream, vec: Var) -> Result<Var> {
        match stream {
            Stream::Skeleton => self.skel_head.forward(g, &self.store, vec),
            Stream::Rgb => self.rgb_head.forward(g, &self.store, vec),
        }
    }

    /// Fused class scores. Decision fusion has no single differentiable score
    /// vector; use [`Model::predict`] for it.
    pub fn fuse(
        &self,
        g: &mut Graph,
        skel_map: Option<Var>,
        skel_vec: Var,
        rgb_map: Option<Var>,
        rgb_vec: Var,
    ) -> Result<Var> {
        let store = &self.store;
        match &self.fusion {
            FusionNet::Gcn { rel, head } => {
                let (Some(sm), Some(rm)) = (skel_map, rgb_map) else {
                    return Err(Error::Config("gcn fusion needs both feature maps".into()));
                };
                let com = build_combined_var(g, sm, rm)?;
                let (f_rel, _) = rel.forward(g, store, com)?;
                head.forward(g, store, f_rel)
            }
            FusionNet::Lstm(head) => head.forward(g, store, skel_vec, rgb_vec),
            FusionNet::Sum(head) => head.forward(g, store, skel_vec, rgb_vec),
            FusionNet::Decision => Err(Error::Config(
                "decision fusion has no fused score tensor".into(),
            )),
        }
    }

    /// Runs both streams and detaches their outputs.
    pub fn features(&self, input: &ModelInput) -> Result<FeatureCache> {
        let mut g = Graph::new();
        let s = self.skel_forward(&mut g, input)?;
        let r = self.rgb_forward(&mut g, input)?;
        Ok(FeatureCache {
            skel_map: s.map.map(|v| g.value(v).clone()),
            skel_vec: g.value(s.vec).clone(),
            rgb_map: r.map.map(|v| g.value(v).clone()),
            rgb_vec: g.value(r.vec).clone(),
        })
    }

    /// Class probabilities of the full model.
    pub fn predict(&self, input: &ModelInput) -> Result<Logits> {
        let mut g = Graph::new();
        let s = self.skel_forward(&mut g, input)?;
        let r = self.rgb_forward(&mut g, input)?;
        self.predict_from(&mut g, s.map, s.vec, r.map, r.vec)
    }

    /// Prediction from stream outputs already on `g`.
    pub fn predict_from(
        &self,
        g: &mut Graph,
        skel_map: Option<Var>,
        skel_vec: Var,
        rgb_map: Option<Var>,
        rgb_vec: Var,
    ) -> Result<Logits> {
        if let FusionNet::Decision = self.fusion {
            let a = self.head_forward(g, Stream::Skeleton, skel_vec)?;
            let b = self.head_forward(g, Stream::Rgb, rgb_vec)?;
            let la = Logits::from_scores(g.value(a).data().to_vec());
            let lb = Logits::from_scores(g.value(b).data().to_vec());
            return decision_fusion(&la, &lb, self.config.decision_weight);
        }
        let out = self.fuse(g, skel_map, skel_vec, rgb_map, rgb_vec)?;
        Ok(Logits::from_scores(g.value(out).data().to_vec()))
    }

    /// Class probabilities of one stream through its temporary head.
    pub fn predict_stream(&self, stream: Stream, input: &ModelInput) -> Result<Logits> {
        let mut g = Graph::new();
        let vec = match stream {
            Stream::Skeleton => self.skel_forward(&mut g, input)?.vec,
            Stream::Rgb => self.rgb_forward(&mut g, input)?.vec,
        };
        let out = self.head_forward(&mut g, stream, vec)?;
        Ok(Logits::from_scores(g.value(out).data().to_vec()))
    }

    /// Self-attention masks (per branch) of the first frame and its skeleton mask.
    pub fn attention_maps(
        &self,
        input: &ModelInput,
    ) -> Result<(Vec<AttentionMask>, AttentionMask)> {
        let mut g = Graph::new();
        let r = self.rgb_forward(&mut g, input)?;
        let masks = r
            .self_masks
            .iter()
            .map(|&m| AttentionMask::new(g.value(m).clone()))
            .collect::<Result<Vec<_>>>()?;
        let skel = AttentionMask::new(input.frames[0].mask.clone())?;
        Ok((masks, skel))
    }
}
