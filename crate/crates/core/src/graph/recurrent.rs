//! LSTM and GRU cells used to aggregate shot-level features over time.
//! Hidden and cell states start at zero; both cells operate on vectors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::glorot_uniform;
use crate::tensor::{Tape, Tensor, Var};

/// One gate's affine map: w_x [hidden, input], w_h [hidden, hidden],
/// bias [hidden].
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl GateParams {
    fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Self {
        GateParams {
            w_x: glorot_uniform(&[hidden, input], input, hidden, rng).with_grad(),
            w_h: glorot_uniform(&[hidden, hidden], hidden, hidden, rng).with_grad(),
            b: Tensor::zeros(&[hidden]).with_grad(),
        }
    }

    fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w_x"), &self.w_x),
            (format!("{prefix}.w_h"), &self.w_h),
            (format!("{prefix}.b"), &self.b),
        ]
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w_x"), &mut self.w_x),
            (format!("{prefix}.w_h"), &mut self.w_h),
            (format!("{prefix}.b"), &mut self.b),
        ]
    }

    /// w_x·x + w_h·h + b
    fn affine(&self, tape: &mut Tape, prefix: &str, x: Var, h: Var) -> Result<Var> {
        let wx = tape.leaf_keyed(&format!("{prefix}.w_x"), &self.w_x);
        let wh = tape.leaf_keyed(&format!("{prefix}.w_h"), &self.w_h);
        let b = tape.leaf_keyed(&format!("{prefix}.b"), &self.b);
        let xa = tape.matmul(wx, x)?;
        let ha = tape.matmul(wh, h)?;
        let s = tape.add(xa, ha)?;
        tape.add(s, b)
    }
}

/// LSTM with input, forget, cell and output gates.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub cell: GateParams,
    pub output: GateParams,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<R: Rng>(hidden: usize, input_dim: usize, rng: &mut R) -> Self {
        LstmParams {
            input: GateParams::init(hidden, input_dim, rng),
            forget: GateParams::init(hidden, input_dim, rng),
            cell: GateParams::init(hidden, input_dim, rng),
            output: GateParams::init(hidden, input_dim, rng),
            hidden,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = self.input.params(&format!("{prefix}.input"));
        out.extend(self.forget.params(&format!("{prefix}.forget")));
        out.extend(self.cell.params(&format!("{prefix}.cell")));
        out.extend(self.output.params(&format!("{prefix}.output")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.input.params_mut(&format!("{prefix}.input"));
        out.extend(self.forget.params_mut(&format!("{prefix}.forget")));
        out.extend(self.cell.params_mut(&format!("{prefix}.cell")));
        out.extend(self.output.params_mut(&format!("{prefix}.output")));
        out
    }
}

/// Standard LSTM recurrence from zero initial hidden/cell state; returns
/// every hidden state in order.
pub fn lstm_forward(
    tape: &mut Tape,
    prefix: &str,
    params: &LstmParams,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Contract("lstm_forward on an empty sequence".into()));
    }
    let mut h = tape.zeros(&[params.hidden]);
    let mut c = tape.zeros(&[params.hidden]);
    let mut hiddens = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let ia = params.input.affine(tape, &format!("{prefix}.input"), x, h)?;
        let i = tape.sigmoid(ia)?;
        let fa = params.forget.affine(tape, &format!("{prefix}.forget"), x, h)?;
        let f = tape.sigmoid(fa)?;
        let ga = params.cell.affine(tape, &format!("{prefix}.cell"), x, h)?;
        let g = tape.tanh(ga)?;
        let oa = params.output.affine(tape, &format!("{prefix}.output"), x, h)?;
        let o = tape.sigmoid(oa)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let ct = tape.tanh(c)?;
        h = tape.mul(o, ct)?;
        hiddens.push(h);
    }
    Ok(hiddens)
}

/// GRU with update, reset and candidate gates.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
    pub hidden: usize,
}

impl GruParams {
    pub fn init<R: Rng>(hidden: usize, input_dim: usize, rng: &mut R) -> Self {
        GruParams {
            update: GateParams::init(hidden, input_dim, rng),
            reset: GateParams::init(hidden, input_dim, rng),
            candidate: GateParams::init(hidden, input_dim, rng),
            hidden,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = self.update.params(&format!("{prefix}.update"));
        out.extend(self.reset.params(&format!("{prefix}.reset")));
        out.extend(self.candidate.params(&format!("{prefix}.candidate")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.update.params_mut(&format!("{prefix}.update"));
        out.extend(self.reset.params_mut(&format!("{prefix}.reset")));
        out.extend(self.candidate.params_mut(&format!("{prefix}.candidate")));
        out
    }
}

/// Standard GRU recurrence from zero initial state; returns the final
/// hidden state. With the update gate saturated at 1 the hidden state
/// keeps its previous value.
pub fn gru_forward(
    tape: &mut Tape,
    prefix: &str,
    params: &GruParams,
    inputs: &[Var],
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Contract("gru_forward on an empty sequence".into()));
    }
    let mut h = tape.zeros(&[params.hidden]);
    let one = tape.ones(&[params.hidden]);
    for &x in inputs {
        let za = params.update.affine(tape, &format!("{prefix}.update"), x, h)?;
        let z = tape.sigmoid(za)?;
        let ra = params.reset.affine(tape, &format!("{prefix}.reset"), x, h)?;
        let r = tape.sigmoid(ra)?;
        let rh = tape.mul(r, h)?;
        let na = params.candidate.affine(tape, &format!("{prefix}.candidate"), x, rh)?;
        let n = tape.tanh(na)?;
        let zh = tape.mul(z, h)?;
        let omz = tape.sub(one, z)?;
        let zn = tape.mul(omz, n)?;
        h = tape.add(zh, zn)?;
    }
    Ok(h)
}
