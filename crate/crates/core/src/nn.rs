//! Parameterized layers. Each layer holds [`ParamId`]s into a [`ParamStore`]
//! and binds them into a [`Graph`] on every forward pass.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{glorot, he, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Puts parameter `id` on the tape, trainable unless frozen in `store`.
pub fn bind(g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
    g.param(id, store.get(id), store.is_trainable(id))
}

/// Weight initialization scheme for a new layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Glorot,
    He,
    Zero,
}

fn init_tensor(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    match init {
        Init::Glorot => glorot(shape, fan_in, fan_out, rng),
        Init::He => he(shape, fan_in, rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

/// Fully connected layer `y = W x + b`, `W` stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_tensor(&[out_dim, in_dim], in_dim, out_dim, init, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }

    pub fn macs(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }

    /// Vector input `[in] → [out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = bind(g, store, self.w);
        let y = g.matvec(w, x)?;
        match self.b {
            Some(b) => {
                let b = bind(g, store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Column-wise application to a matrix `[in, n] → [out, n]` (a 1×1 convolution).
    pub fn forward_cols(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = bind(g, store, self.w);
        let y = g.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = bind(g, store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution over `[C, H, W]` inputs.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let fan_out = out_ch * kernel.0 * kernel.1;
        let w = store.add(
            format!("{name}.w"),
            init_tensor(
                &[out_ch, in_ch, kernel.0, kernel.1],
                fan_in,
                fan_out,
                init,
                rng,
            ),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_ch])));
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel.0 * self.kernel.1
            + if self.b.is_some() { self.out_ch } else { 0 }
    }

    /// Output spatial size for an `h × w` input.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// `C_in · C_out · kh · kw · H_out · W_out`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_size(h, w);
        (self.in_ch * self.out_ch * self.kernel.0 * self.kernel.1 * ho * wo) as u64
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = bind(g, store, self.w);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.b {
            Some(b) => {
                let b = bind(g, store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Evaluates `f` on a fresh graph with `x` as a constant and returns the output value.
pub fn eval_with<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_counts_match_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::new(&mut store, "fc", 4, 3, true, Init::Glorot, &mut rng);
        assert_eq!(fc.param_count(), 15);
        assert_eq!(fc.macs(), 12);
        assert_eq!(store.count("fc"), 15);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fc = Linear::new(&mut store, "fc", 2, 2, true, Init::Zero, &mut rng);
        *store.get_mut(fc.w) = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        *store.get_mut(fc.b.unwrap()) = Tensor::from_vec(vec![0.5, -0.5]);
        let y = eval_with(&Tensor::from_vec(vec![1.0, -1.0]), |g, x| {
            fc.forward(g, &store, x)
        })
        .unwrap();
        assert_eq!(y.data(), &[-0.5, -1.5]);
    }

    #[test]
    fn conv_output_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(
            &mut store,
            "c",
            3,
            16,
            (3, 3),
            (2, 2),
            (1, 1),
            true,
            Init::He,
            &mut rng,
        );
        assert_eq!(c.out_size(32, 32), (16, 16));
        assert_eq!(c.out_size(299, 299), (150, 150));
        assert_eq!(c.macs(32, 32), 3 * 16 * 9 * 256);
    }
}
