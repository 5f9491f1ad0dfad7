use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Single-layer LSTM without peepholes. Gate rows are stacked as
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

impl LstmParams {
    /// Uniform(±1/sqrt(fan_in)) weights, zero bias except a forget-gate bias of 1.
    pub fn register(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_ih = params.add(&format!("{prefix}.w_ih"), uniform(rng, &[4 * hidden, input], input));
        let w_hh = params.add(&format!("{prefix}.w_hh"), uniform(rng, &[4 * hidden, hidden], hidden));
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = params.add(&format!("{prefix}.bias"), Tensor::vector(b));
        LstmParams {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    pub fn lookup(params: &ParamSet, prefix: &str) -> Result<Self> {
        let find = |n: &str| {
            params
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))
        };
        let (w_ih, w_hh, bias) = (find("w_ih")?, find("w_hh")?, find("bias")?);
        let shape = params.get(w_ih).shape();
        if shape.len() != 2 || shape[0] % 4 != 0 {
            return Err(Error::Checkpoint(format!("bad LSTM weight shape {shape:?}")));
        }
        Ok(LstmParams {
            w_ih,
            w_hh,
            bias,
            input: shape[1],
            hidden: shape[0] / 4,
        })
    }
}

/// One LSTM cell update; returns the new `(h, c)`.
pub fn lstm_step(tape: &mut Tape, lstm: &LstmParams, h_prev: Var, c_prev: Var, x: Var) -> Result<(Var, Var)> {
    let hidden = lstm.hidden;
    for (name, v, n) in [("h", h_prev, hidden), ("c", c_prev, hidden), ("x", x, lstm.input)] {
        if tape.shape(v) != [n] {
            return Err(Error::contract(format!(
                "lstm {name} has shape {:?}, expected [{n}]",
                tape.shape(v)
            )));
        }
    }
    let (w_ih, w_hh, b) = (tape.param(lstm.w_ih), tape.param(lstm.w_hh), tape.param(lstm.bias));
    let xi = tape.matvec(w_ih, x);
    let hh = tape.matvec(w_hh, h_prev);
    let pre = tape.add(xi, hh);
    let pre = tape.add(pre, b);
    let gate = |tape: &mut Tape, k: usize| tape.slice(pre, k * hidden, hidden);
    let (i, f, g, o) = (gate(tape, 0), gate(tape, 1), gate(tape, 2), gate(tape, 3));
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed);
    Ok((h, c))
}
