//! Parameter and multiply-accumulate counts of the inference path.

use serde::{Deserialize, Serialize};

use crate::model::{FusionNet, Model, SkeletonNet};
use crate::rgb_stream::RgbMode;

/// Frames stacked by the video-input variant the single-frame RGB stream is compared against.
pub const VIDEO_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub modules: Vec<ModuleCost>,
    pub total_params: usize,
    pub total_macs: u64,
    /// Two FLOPs per MAC.
    pub total_flops: u64,
    /// Backbone plus attention MACs for the configured RGB frames.
    pub rgb_macs: u64,
    /// The same RGB path run on [`VIDEO_FRAMES`] frames.
    pub video_rgb_macs: u64,
}

impl ComplexityReport {
    pub fn from_modules(modules: Vec<ModuleCost>, rgb_macs: u64, video_rgb_macs: u64) -> Self {
        let total_params = modules.iter().map(|m| m.params).sum();
        let total_macs = modules.iter().map(|m| m.macs).sum();
        Self {
            modules,
            total_params,
            total_macs,
            total_flops: 2 * total_macs,
            rgb_macs,
            video_rgb_macs,
        }
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>16}\n", "module", "params", "MACs");
        for m in &self.modules {
            s += &format!("{:<28} {:>12} {:>16}\n", m.name, m.params, m.macs);
        }
        s += &format!(
            "{:<28} {:>12} {:>16}\n",
            "total", self.total_params, self.total_macs
        );
        s += &format!("FLOPs {}\n", self.total_flops);
        s += &format!(
            "rgb path {} MACs, {VIDEO_FRAMES}-frame variant {} MACs\n",
            self.rgb_macs, self.video_rgb_macs
        );
        s
    }
}

fn cost(name: impl Into<String>, params: usize, macs: u64) -> ModuleCost {
    ModuleCost {
        name: name.into(),
        params,
        macs,
    }
}

/// Counts every layer the model runs at inference for a `frames`-step
/// skeleton and `rgb_frames` RGB frames. Temporary heads only count for
/// decision fusion, where they are the classifier; elementwise products and
/// pooling are not counted.
pub fn complexity(model: &Model, frames: usize, rgb_frames: usize) -> ComplexityReport {
    let cfg = &model.config;
    let mut modules = Vec::new();

    let mut t_out = frames;
    match &model.skel {
        SkeletonNet::Stgcn(net) => {
            for (b, (name, macs)) in net.blocks.iter().zip(net.macs(&model.graph, frames)) {
                modules.push(cost(format!("skeleton.{name}"), b.param_count(), macs));
            }
            t_out = net.config.out_frames(frames);
        }
        SkeletonNet::Bilstm(net) => {
            modules.push(cost("skeleton.bilstm", net.param_count(), net.macs(frames)))
        }
    }

    let (h, w) = model.feature_size();
    let lstm_mode = model.rgb_mode() == RgbMode::Lstm;
    let mut per_frame = Vec::new();
    per_frame.push(cost(
        "rgb.backbone",
        model.backbone.param_count(),
        model.backbone.macs(),
    ));
    if cfg.self_attention {
        for (i, br) in model.self_att.iter().enumerate() {
            let mut p = br.conv.param_count();
            let mut m = br.conv.macs(h, w);
            if lstm_mode {
                p += br.proj.param_count();
                m += br.proj.macs();
            }
            per_frame.push(cost(format!("rgb.self_attention{i}"), p, m));
        }
    } else if lstm_mode {
        for (i, br) in model.self_att.iter().enumerate() {
            per_frame.push(cost(
                format!("rgb.pool_proj{i}"),
                br.proj.param_count(),
                br.proj.macs(),
            ));
        }
    }
    if lstm_mode {
        per_frame.push(cost(
            "rgb.ske_proj",
            model.ske_proj.param_count(),
            model.ske_proj.macs(),
        ));
    }
    let frame_macs: u64 = per_frame.iter().map(|m| m.macs).sum();
    for m in per_frame {
        modules.push(cost(m.name, m.params, m.macs * rgb_frames as u64));
    }

    match &model.fusion {
        FusionNet::Gcn { rel, head } => {
            let n = h * w + t_out * cfg.joints;
            modules.push(cost("fusion.relation", rel.param_count(), rel.macs(n)));
            modules.push(cost("fusion.head", head.param_count(), head.macs(n)));
        }
        FusionNet::Lstm(f) => modules.push(cost("fusion.lstm", f.param_count(), f.macs())),
        FusionNet::Sum(f) => modules.push(cost("fusion.sum", f.param_count(), f.macs())),
        FusionNet::Decision => {
            modules.push(cost(
                "head.skeleton",
                model.skel_head.param_count(),
                model.skel_head.macs(),
            ));
            modules.push(cost(
                "head.rgb",
                model.rgb_head.param_count(),
                model.rgb_head.macs(),
            ));
        }
    }
    ComplexityReport::from_modules(
        modules,
        frame_macs * rgb_frames as u64,
        frame_macs * VIDEO_FRAMES as u64,
    )
}
