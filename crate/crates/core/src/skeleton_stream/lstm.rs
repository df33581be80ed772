//! Stacked bidirectional LSTM over flattened skeleton frames.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::bind;
use crate::params::{glorot, ParamId, ParamStore};
use crate::skeleton_io::SkeletonSequence;
use crate::tensor::Tensor;

/// Bi-LSTM hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub layers: usize,
    /// Hidden size per direction; the output feature has length `2 × hidden`.
    pub hidden: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 16,
        }
    }
}

/// Gate weights of one direction of one layer: `W[4h, in + h]` stacked as
/// input, forget, output, candidate; bias `b[4h]`.
#[derive(Clone, Debug)]
pub struct LstmCellWeights {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCellWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            glorot(&[4 * hidden, input + hidden], input + hidden, hidden, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[4 * hidden]));
        Self {
            w,
            b,
            input,
            hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    pub fn macs_per_step(&self) -> u64 {
        (4 * self.hidden * (self.input + self.hidden)) as u64
    }
}

/// One LSTM transition on the tape with already-bound `w` and `b`.
pub fn lstm_step(
    g: &mut Graph,
    w: Var,
    b: Var,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xh = g.concat(&[x, h], 0)?;
    let z = g.matvec(w, xh)?;
    let z = g.add(z, b)?;
    let zi = g.slice(z, 0, hidden)?;
    let zf = g.slice(z, hidden, hidden)?;
    let zo = g.slice(z, 2 * hidden, hidden)?;
    let zu = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let u = g.tanh(zu);
    let fc = g.mul(f, c)?;
    let iu = g.mul(i, u)?;
    let c_new = g.add(fc, iu)?;
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// Gate activations of one step, exposed for contract checks.
#[derive(Clone, Debug)]
pub struct Gates {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub u: Vec<f64>,
}

/// Plain-tensor LSTM cell: returns `(h_t, c_t)` and the gate values.
pub fn lstm_cell(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    w: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor, Gates)> {
    let hidden = h_prev.len();
    if w.shape() != [4 * hidden, x.len() + hidden]
        || b.len() != 4 * hidden
        || c_prev.len() != hidden
    {
        return Err(Error::shape(format!(
            "lstm cell: W {:?}, b {:?}, x {}, h {}, c {}",
            w.shape(),
            b.shape(),
            x.len(),
            hidden,
            c_prev.len()
        )));
    }
    let mut g = Graph::new();
    let (xv, hv, cv) = (
        g.constant(x.clone()),
        g.constant(h_prev.clone()),
        g.constant(c_prev.clone()),
    );
    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
    let (h, c) = lstm_step(&mut g, wv, bv, hidden, xv, hv, cv)?;
    let xh: Vec<f64> = x.data().iter().chain(h_prev.data()).copied().collect();
    let z: Vec<f64> = (0..4 * hidden)
        .map(|r| {
            w.data()[r * xh.len()..(r + 1) * xh.len()]
                .iter()
                .zip(&xh)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b.data()[r]
        })
        .collect();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gates = Gates {
        i: z[..hidden].iter().map(|&v| sig(v)).collect(),
        f: z[hidden..2 * hidden].iter().map(|&v| sig(v)).collect(),
        o: z[2 * hidden..3 * hidden].iter().map(|&v| sig(v)).collect(),
        u: z[3 * hidden..].iter().map(|&v| v.tanh()).collect(),
    };
    Ok((g.value(h).clone(), g.value(c).clone(), gates))
}

/// Stacked bidirectional LSTM.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub config: LstmConfig,
    pub input: usize,
    /// `(forward, backward)` per layer.
    pub layers: Vec<(LstmCellWeights, LstmCellWeights)>,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        config: &LstmConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 {
            return Err(Error::Config(
                "bilstm: layers and hidden must be positive".into(),
            ));
        }
        let mut layers = Vec::new();
        let mut inp = input;
        for l in 0..config.layers {
            let fwd =
                LstmCellWeights::new(store, &format!("{name}.l{l}.fwd"), inp, config.hidden, rng);
            let bwd =
                LstmCellWeights::new(store, &format!("{name}.l{l}.bwd"), inp, config.hidden, rng);
            layers.push((fwd, bwd));
            inp = 2 * config.hidden;
        }
        Ok(Self {
            config: config.clone(),
            input,
            layers,
        })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.config.hidden
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(f, b)| f.param_count() + b.param_count())
            .sum()
    }

    pub fn macs(&self, t: usize) -> u64 {
        self.layers
            .iter()
            .map(|(f, b)| (f.macs_per_step() + b.macs_per_step()) * t as u64)
            .sum()
    }

    /// `steps` are the per-frame input vectors; returns `[c_fwd(T−1); c_bwd(0)]` of the top layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::shape("bilstm needs at least one step"));
        }
        let h = self.config.hidden;
        let t = steps.len();
        let mut inputs = steps.to_vec();
        let mut last = None;
        for (fwd, bwd) in &self.layers {
            let run = |g: &mut Graph,
                       cell: &LstmCellWeights,
                       order: &mut dyn Iterator<Item = usize>|
             -> Result<(Vec<Option<Var>>, Var)> {
                let w = bind(g, store, cell.w);
                let b = bind(g, store, cell.b);
                let mut hs = g.constant(Tensor::zeros(&[h]));
                let mut cs = g.constant(Tensor::zeros(&[h]));
                let mut outs = vec![None; t];
                for k in order {
                    let (hn, cn) = lstm_step(g, w, b, h, inputs[k], hs, cs)?;
                    hs = hn;
                    cs = cn;
                    outs[k] = Some(hn);
                }
                Ok((outs, cs))
            };
            let (hf, cf) = run(g, fwd, &mut (0..t))?;
            let (hb, cb) = run(g, bwd, &mut (0..t).rev())?;
            let mut next = Vec::with_capacity(t);
            for k in 0..t {
                next.push(g.concat(&[hf[k].expect("filled"), hb[k].expect("filled")], 0)?);
            }
            inputs = next;
            last = Some((cf, cb));
        }
        let (cf, cb) = last.expect("at least one layer");
        g.concat(&[cf, cb], 0)
    }
}

/// Per-frame input vectors: the `N` joints' `(x, y, z)` concatenated in joint order.
pub fn skeleton_steps(seq: &SkeletonSequence) -> Vec<Tensor> {
    (0..seq.frame_count())
        .map(|t| Tensor::from_vec(seq.frame(t).to_vec()))
        .collect()
}

/// Plain-tensor Bi-LSTM forward over `seq[T, D]`.
pub fn bilstm_forward(seq: &Tensor, store: &ParamStore, net: &BiLstm) -> Result<Tensor> {
    let (t, d) = seq.dims2()?;
    if d != net.input {
        return Err(Error::shape(format!(
            "bilstm expects {} inputs per step, got {d}",
            net.input
        )));
    }
    let mut g = Graph::new();
    let steps: Vec<Var> = (0..t)
        .map(|k| g.constant(Tensor::from_vec(seq.data()[k * d..(k + 1) * d].to_vec())))
        .collect();
    let out = net.forward(&mut g, store, &steps)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_halve_the_cell() {
        let c_prev = Tensor::from_vec(vec![1.0, -2.0]);
        let (h, c, gates) = lstm_cell(
            &Tensor::from_vec(vec![0.3]),
            &Tensor::from_vec(vec![0.1, 0.2]),
            &c_prev,
            &Tensor::zeros(&[8, 3]),
            &Tensor::zeros(&[8]),
        )
        .unwrap();
        assert_eq!(c.data(), &[0.5, -1.0]);
        assert_eq!(h.data(), &[0.5 * 0.5f64.tanh(), 0.5 * (-1.0f64).tanh()]);
        assert!(gates
            .i
            .iter()
            .chain(&gates.f)
            .chain(&gates.o)
            .all(|&v| v == 0.5));
    }

    #[test]
    fn zero_state_and_weights_stay_zero() {
        let (h, c, _) = lstm_cell(
            &Tensor::from_vec(vec![0.3, 0.4]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[12, 5]),
            &Tensor::zeros(&[12]),
        )
        .unwrap();
        assert!(h.data().iter().chain(c.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_bilstm_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = BiLstm::new(
            &mut store,
            "l",
            6,
            &LstmConfig {
                layers: 3,
                hidden: 4,
            },
            &mut rng,
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let seq = Tensor::from_fn(&[5, 6], |i| i as f64 * 0.1);
        let out = bilstm_forward(&seq, &store, &net).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_sequence_is_well_defined() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = BiLstm::new(
            &mut store,
            "l",
            3,
            &LstmConfig {
                layers: 2,
                hidden: 3,
            },
            &mut rng,
        )
        .unwrap();
        let out = bilstm_forward(
            &Tensor::from_vec(vec![0.1, 0.2, 0.3])
                .reshape(&[1, 3])
                .unwrap(),
            &store,
            &net,
        )
        .unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.is_finite());
    }
}
