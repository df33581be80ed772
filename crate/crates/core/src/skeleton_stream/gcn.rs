//! Spatial graph convolution and the ST-GCN backbone.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::SkeletonGraph;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, eval_with, Conv2d, Init};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `f_out = Σ_j Â_j f_in W_j + b`, with one `C_in × C_out` weight per partition.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub weights: Vec<ParamId>,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl GraphConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        partitions: usize,
        in_ch: usize,
        out_ch: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weights = (0..partitions)
            .map(|j| {
                store.add(
                    format!("{name}.w{j}"),
                    glorot(&[in_ch, out_ch], in_ch * partitions, out_ch, rng),
                )
            })
            .collect();
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_ch])));
        Self {
            weights,
            bias,
            in_ch,
            out_ch,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() * self.in_ch * self.out_ch
            + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    /// Channel mixing per partition plus neighbour aggregation over the nonzeros.
    pub fn macs(&self, graph: &SkeletonGraph, t: usize) -> u64 {
        let v = graph.joint_count();
        let mix = self.weights.len() * self.in_ch * self.out_ch * t * v;
        let agg = graph.nonzeros() * self.out_ch * t;
        (mix + agg) as u64
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &SkeletonGraph,
        x: Var,
    ) -> Result<Var> {
        let (c, t, v) = g.value(x).dims3()?;
        if c != self.in_ch
            || v != graph.joint_count()
            || self.weights.len() != graph.partition_count()
        {
            return Err(Error::shape(format!(
                "graph conv expects {}×T×{} with {} partitions, got {c}×{t}×{v}",
                self.in_ch,
                graph.joint_count(),
                graph.partition_count()
            )));
        }
        let flat = g.reshape(x, &[c, t * v])?;
        let mut acc: Option<Var> = None;
        for (w, norm) in self.weights.iter().zip(graph.normalized()) {
            let w = bind(g, store, *w);
            let wt = g.transpose(w)?;
            let mixed = g.matmul(wt, flat)?;
            let mixed = g.reshape(mixed, &[self.out_ch, t, v])?;
            let agg = g.node_mix(mixed, norm.clone())?;
            acc = Some(match acc {
                Some(a) => g.add(a, agg)?,
                None => agg,
            });
        }
        let y = acc.expect("at least one partition");
        match self.bias {
            Some(b) => {
                let b = bind(g, store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Plain-tensor graph convolution of `f_in[C_in, T, V]`.
pub fn graph_conv(
    f_in: &Tensor,
    graph: &SkeletonGraph,
    store: &ParamStore,
    layer: &GraphConv,
) -> Result<Tensor> {
    eval_with(f_in, |g, x| layer.forward(g, store, graph, x))
}

/// ST-GCN hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StgcnConfig {
    pub in_channels: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Temporal stride of each block.
    pub strides: Vec<usize>,
    /// Temporal kernel width (odd).
    pub kernel: usize,
    pub residual: bool,
    pub relu: bool,
}

impl Default for StgcnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![16, 16, 16],
            strides: vec![1, 2, 2],
            kernel: 3,
            residual: true,
            relu: true,
        }
    }
}

impl StgcnConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    /// Temporal length after all strided blocks.
    pub fn out_frames(&self, t: usize) -> usize {
        let pad = self.kernel / 2;
        self.strides
            .iter()
            .fold(t, |t, &s| (t + 2 * pad - self.kernel) / s + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "stgcn: channels and strides must be non-empty and equal length".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.strides.contains(&0) {
            return Err(Error::Config(
                "stgcn: kernel must be odd and strides positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Residual {
    None,
    Identity,
    Project(Conv2d),
}

/// Graph conv → ReLU → temporal conv (+ residual) → ReLU.
#[derive(Clone, Debug)]
pub struct StgcnBlock {
    pub gcn: GraphConv,
    pub tcn: Conv2d,
    residual: Residual,
    relu: bool,
}

impl StgcnBlock {
    pub fn param_count(&self) -> usize {
        self.gcn.param_count()
            + self.tcn.param_count()
            + match &self.residual {
                Residual::Project(c) => c.param_count(),
                _ => 0,
            }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &SkeletonGraph,
        x: Var,
    ) -> Result<Var> {
        let mut y = self.gcn.forward(g, store, graph, x)?;
        if self.relu {
            y = g.relu(y);
        }
        y = self.tcn.forward(g, store, y)?;
        match &self.residual {
            Residual::None => {}
            Residual::Identity => y = g.add(y, x)?,
            Residual::Project(c) => {
                let r = c.forward(g, store, x)?;
                y = g.add(y, r)?;
            }
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }
}

/// Stack of ST-GCN blocks mapping `C0 × T × V` to `C_S × T' × V`.
#[derive(Clone, Debug)]
pub struct Stgcn {
    pub config: StgcnConfig,
    pub blocks: Vec<StgcnBlock>,
}

impl Stgcn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &StgcnConfig,
        graph: &SkeletonGraph,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for (i, (&cout, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let bname = format!("{name}.block{i}");
            let gcn = GraphConv::new(
                store,
                &format!("{bname}.gcn"),
                graph.partition_count(),
                cin,
                cout,
                true,
                rng,
            );
            let tcn = Conv2d::new(
                store,
                &format!("{bname}.tcn"),
                cout,
                cout,
                (k, 1),
                (s, 1),
                (k / 2, 0),
                true,
                Init::He,
                rng,
            );
            let residual = if !config.residual {
                Residual::None
            } else if cin == cout && s == 1 {
                Residual::Identity
            } else {
                Residual::Project(Conv2d::new(
                    store,
                    &format!("{bname}.res"),
                    cin,
                    cout,
                    (1, 1),
                    (s, 1),
                    (0, 0),
                    true,
                    Init::He,
                    rng,
                ))
            };
            blocks.push(StgcnBlock {
                gcn,
                tcn,
                residual,
                relu: config.relu,
            });
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    /// Per-block MACs for an input of `t` frames.
    pub fn macs(&self, graph: &SkeletonGraph, t: usize) -> Vec<(String, u64)> {
        let v = graph.joint_count();
        let mut t_in = t;
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let mut m = b.gcn.macs(graph, t_in) + b.tcn.macs(t_in, v);
            if let Residual::Project(c) = &b.residual {
                m += c.macs(t_in, v);
            }
            out.push((format!("stgcn.block{i}"), m));
            t_in = b.tcn.out_size(t_in, v).0;
        }
        out
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &SkeletonGraph,
        x: Var,
    ) -> Result<Var> {
        let (c, _, v) = g.value(x).dims3()?;
        if c != self.config.in_channels || v != graph.joint_count() {
            return Err(Error::shape(format!(
                "stgcn expects {}×T×{}, got {c}×_×{v}",
                self.config.in_channels,
                graph.joint_count()
            )));
        }
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(g, store, graph, y)?;
        }
        Ok(y)
    }
}

/// Plain-tensor ST-GCN forward pass.
pub fn stgcn_forward(
    seq: &Tensor,
    graph: &SkeletonGraph,
    store: &ParamStore,
    net: &Stgcn,
) -> Result<Tensor> {
    eval_with(seq, |g, x| net.forward(g, store, graph, x))
}

/// Lays out a `T × N × 3` skeleton as the `3 × T × N` ST-GCN input.
pub fn skeleton_to_ctv(seq: &crate::skeleton_io::SkeletonSequence) -> Tensor {
    let (t, n) = (seq.frame_count(), seq.joint_count());
    let d = seq.data();
    Tensor::from_fn(&[3, t, n], |idx| {
        let c = idx / (t * n);
        let rest = idx % (t * n);
        d[rest * 3 + c]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton_stream::graph::{build_graph, PartitionStrategy};
    use rand::SeedableRng;

    #[test]
    fn single_node_identity_weight_passes_input_through() {
        let graph = build_graph(&[], 1, PartitionStrategy::Uniform).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = GraphConv::new(&mut store, "g", 1, 2, 2, false, &mut rng);
        *store.get_mut(layer.weights[0]) = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::from_fn(&[2, 3, 1], |i| i as f64 - 2.0);
        let out = graph_conv(&f, &graph, &store, &layer).unwrap();
        // the self-loop degree is 1 + ε
        assert!(out.max_abs_diff(&f) < 1e-5);
    }

    #[test]
    fn desk_stride_arithmetic() {
        let graph = build_graph(
            &[(0, 1), (1, 2), (2, 3), (3, 4)],
            5,
            PartitionStrategy::Spatial { center: 2 },
        )
        .unwrap();
        let cfg = StgcnConfig {
            channels: vec![8, 16, 16],
            strides: vec![1, 2, 2],
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Stgcn::new(&mut store, "s", &cfg, &graph, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 12, 5], |i| (i as f64 * 0.37).sin());
        let y = stgcn_forward(&x, &graph, &store, &net).unwrap();
        assert_eq!(y.shape(), &[16, 3, 5]);
        assert_eq!(cfg.out_frames(12), 3);
        assert_eq!(cfg.out_frames(300), 75);
    }

    #[test]
    fn zero_input_gives_zero_output_with_zero_biases() {
        let graph = build_graph(&[(0, 1)], 2, PartitionStrategy::Uniform).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Stgcn::new(&mut store, "s", &StgcnConfig::default(), &graph, &mut rng).unwrap();
        let y = stgcn_forward(&Tensor::zeros(&[3, 8, 2]), &graph, &store, &net).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
