use rand::Rng;

use super::{Tensor, Var};
use crate::error::{shape_err, Result};
use crate::param::{join, Named};

/// Single-layer unidirectional tanh RNN:
/// `h_t = tanh(W_ih x_t + W_hh h_{t-1} + b)` with `h_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams<P = Tensor> {
    /// `[hidden, input]`
    pub w_ih: P,
    /// `[hidden, hidden]`
    pub w_hh: P,
    /// `[hidden]`
    pub b: P,
}

impl RnnParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_ih: Tensor::uniform(&[hidden, input], 1.0 / (input as f64).sqrt(), rng),
            w_hh: Tensor::uniform(&[hidden, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[hidden, input]),
            w_hh: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
        }
    }
}

impl<P> Named<P> for RnnParams<P> {
    type With<Q> = RnnParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> RnnParams<Q> {
        RnnParams {
            w_ih: f(&join(prefix, "w_ih"), &self.w_ih),
            w_hh: f(&join(prefix, "w_hh"), &self.w_hh),
            b: f(&join(prefix, "b"), &self.b),
        }
    }

    fn for_each_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "b"), &mut self.b);
    }
}

/// Runs the recurrence over `seq: [T, C]` and returns every hidden state,
/// `[T, hidden]`.
pub fn rnn_forward<'t>(seq: &Var<'t>, params: &RnnParams<Var<'t>>) -> Result<Var<'t>> {
    let shape = seq.shape();
    let w_shape = params.w_ih.shape();
    let &[steps, input] = shape.as_slice() else {
        return Err(shape_err("rnn_forward", &shape, &w_shape));
    };
    let hidden = w_shape[0];
    if w_shape[1] != input
        || params.w_hh.shape() != [hidden, hidden]
        || params.b.shape() != [hidden]
    {
        return Err(shape_err("rnn_forward", &shape, &w_shape));
    }
    let w_ih_t = params.w_ih.transpose()?;
    let w_hh_t = params.w_hh.transpose()?;
    let bias = params.b.reshape(&[1, hidden])?;
    // Input projections for all steps at once: [T, hidden].
    let projected = seq.matmul(&w_ih_t)?.add(&bias)?;

    let mut states = Vec::with_capacity(steps);
    let mut prev: Option<Var<'t>> = None;
    for t in 0..steps {
        let mut pre = projected.slice(0, t, 1)?;
        if let Some(h) = prev {
            pre = pre.add(&h.matmul(&w_hh_t)?)?;
        }
        let h = pre.tanh()?;
        states.push(h);
        prev = Some(h);
    }
    seq.tape().concat(&states, 0)
}
