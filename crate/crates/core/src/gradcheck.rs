//! Central finite-difference checks for the analytic gradients of the tape.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst relative error found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Below this norm a gradient counts as zero and the error is effectively absolute.
/// Central differences carry round-off of about `ε·|L| / step` (≈1e-11 at step 1e-5),
/// so an exactly vanishing gradient, such as a bias that shifts every softmax
/// logit of a row equally, would otherwise read as a large relative error.
pub const ZERO_GRAD_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, ZERO_GRAD_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(ZERO_GRAD_FLOOR)
}

/// Compares tape gradients of a scalar `loss` against central differences,
/// for every trainable parameter in `store`.
///
/// `loss` builds the full forward pass into the supplied graph and returns the
/// scalar output node.
pub fn check_params<F>(store: &ParamStore, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out);
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (id, grad) in g.param_grads(&grads) {
        match &mut analytic[id.0] {
            Some(t) => t.add_assign(&grad),
            slot => *slot = Some(grad),
        }
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        Ok(g.value(out).data()[0])
    };

    let mut work = store.clone();
    let mut params = Vec::new();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let a = analytic[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut numeric = vec![0.0; p.value.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        params.push(ParamCheck {
            name: p.name.clone(),
            rel_error: relative_error(a.data(), &numeric),
            analytic_norm: a.norm(),
        });
    }
    Ok(GradCheckReport { params })
}

/// Builds a scalar probe `Σ r ⊙ y` so that every output entry gets a distinct weight.
pub fn probe(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let r = g.constant(weights.clone());
    let y = if g.value(y).shape() == weights.shape() {
        y
    } else {
        let shape = weights.shape().to_vec();
        g.reshape(y, &shape)?
    };
    let prod = g.mul(y, r)?;
    Ok(g.sum(prod))
}

/// Gradient of a differentiable input leaf checked against central differences.
pub fn check_input<F>(x: &Tensor, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out);
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut numeric = vec![0.0; x.len()];
    let mut work = x.clone();
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + step;
        let plus = {
            let mut g = Graph::new();
            let v = g.input(work.clone());
            let o = f(&mut g, v)?;
            g.value(o).data()[0]
        };
        work.data_mut()[i] = orig - step;
        let minus = {
            let mut g = Graph::new();
            let v = g.input(work.clone());
            let o = f(&mut g, v)?;
            g.value(o).data()[0]
        };
        work.data_mut()[i] = orig;
        *n = (plus - minus) / (2.0 * step);
    }
    Ok(relative_error(analytic.data(), &numeric))
}

/// Convenience: looks up `name` and returns its id, panicking if absent.
pub fn id_of(store: &ParamStore, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
}
