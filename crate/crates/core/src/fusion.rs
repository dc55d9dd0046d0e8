//! Adaptive weighted fusion of the two branch embeddings, the two-stage
//! reduction head, and the cross-entropy loss.
//!
//! The fused vector is a convex combination steered by a sigmoid-bounded
//! scalar. Two sources for that scalar exist: a gate computed per sample
//! from the concatenated embeddings (default), and a single global
//! learnable logit. A plain concatenation path exists as an ablation
//! baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ActivationKind, BatchNormState, LinearParams, Mode};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FusionMode {
    /// Per-sample alpha from a gate over the concatenated embeddings.
    Gated,
    /// One global learnable alpha, input-independent.
    Global,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(FusionMode::Gated),
            "global" => Ok(FusionMode::Global),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (gated|global)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Gated => "gated",
            FusionMode::Global => "global",
        }
    }
}

/// Parameters of the fusion scalar.
#[derive(Debug, Clone)]
pub enum FusionParams {
    Gated { gate: LinearParams },
    Global { logit: Tensor },
}

impl FusionParams {
    pub fn init<R: Rng>(mode: FusionMode, dim: usize, rng: &mut R) -> Self {
        match mode {
            FusionMode::Gated => FusionParams::Gated {
                gate: LinearParams::init(1, 2 * dim, rng),
            },
            FusionMode::Global => FusionParams::Global {
                logit: Tensor::scalar(0.0).with_grad(),
            },
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            FusionParams::Gated { .. } => FusionMode::Gated,
            FusionParams::Global { .. } => FusionMode::Global,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        match self {
            FusionParams::Gated { gate } => gate.params(&format!("{prefix}.gate")),
            FusionParams::Global { logit } => vec![(format!("{prefix}.alpha_logit"), logit)],
        }
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        match self {
            FusionParams::Gated { gate } => gate.params_mut(&format!("{prefix}.gate")),
            FusionParams::Global { logit } => vec![(format!("{prefix}.alpha_logit"), logit)],
        }
    }
}

/// Produces the fusion weight as a scalar node in (0, 1).
pub fn gate_alpha(
    tape: &mut Tape,
    f_vis: Var,
    f_land: Var,
    params: &FusionParams,
    prefix: &str,
) -> Result<Var> {
    if tape.shape(f_vis) != tape.shape(f_land) {
        return Err(Error::Shape {
            op: "gate_alpha",
            lhs: tape.shape(f_vis).to_vec(),
            rhs: tape.shape(f_land).to_vec(),
        });
    }
    match params {
        FusionParams::Gated { gate } => {
            let joint = tape.concat(0, &[f_vis, f_land])?;
            let raw = gate.forward(tape, &format!("{prefix}.gate"), joint)?;
            let scalar = tape.reshape(raw, &[])?;
            tape.sigmoid(scalar)
        }
        FusionParams::Global { logit } => {
            let l = tape.leaf_keyed(&format!("{prefix}.alpha_logit"), logit);
            tape.sigmoid(l)
        }
    }
}

/// Fusion weight argument: a tape node (gated or global mode) or a fixed
/// constant.
#[derive(Debug, Clone, Copy)]
pub enum Alpha {
    Const(f64),
    Node(Var),
}

/// Convex combination `alpha·F_vis + (1-alpha)·F_land`, computed as
/// `F_land + alpha·(F_vis - F_land)`. Constant endpoint weights short-
/// circuit to the respective branch so alpha = 0 and alpha = 1 are exact.
pub fn fuse(tape: &mut Tape, f_vis: Var, f_land: Var, alpha: Alpha) -> Result<Var> {
    if tape.shape(f_vis) != tape.shape(f_land) {
        return Err(Error::Shape {
            op: "fuse",
            lhs: tape.shape(f_vis).to_vec(),
            rhs: tape.shape(f_land).to_vec(),
        });
    }
    let alpha_var = match alpha {
        Alpha::Const(c) => {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Contract(format!("fusion weight {c} outside [0, 1]")));
            }
            if c == 0.0 {
                return Ok(f_land);
            }
            if c == 1.0 {
                return Ok(f_vis);
            }
            tape.scalar(c)
        }
        Alpha::Node(v) => v,
    };
    let diff = tape.sub(f_vis, f_land)?;
    let scaled = tape.mul(diff, alpha_var)?;
    tape.add(f_land, scaled)
}

/// Concatenation baseline: [F_vis ∥ F_land], dimension 2D. The visual
/// half comes first.
pub fn concat_fuse(tape: &mut Tape, f_vis: Var, f_land: Var) -> Result<Var> {
    tape.concat(0, &[f_vis, f_land])
}

/// Two-stage reduction head: fc → BN → LeakyReLU-family activation →
/// dropout, twice, then the output projection to two logits.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub fc1: LinearParams,
    pub bn1: BatchNormState,
    pub fc2: LinearParams,
    pub bn2: BatchNormState,
    pub fc_out: LinearParams,
    pub dropout_rate: f64,
}

impl HeadParams {
    /// `in_dim` is D (or 2D in the concat ablation); hidden dims follow
    /// the halving pattern in_dim -> d/2 -> d/4 -> 2 of the base dim `d`.
    pub fn init<R: Rng>(
        in_dim: usize,
        base_dim: usize,
        dropout_rate: f64,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut R,
    ) -> Self {
        let h1 = (base_dim / 2).max(1);
        let h2 = (base_dim / 4).max(1);
        HeadParams {
            fc1: LinearParams::init(h1, in_dim, rng),
            bn1: BatchNormState::init(h1, bn_momentum, bn_eps),
            fc2: LinearParams::init(h2, h1, rng),
            bn2: BatchNormState::init(h2, bn_momentum, bn_eps),
            fc_out: LinearParams::init(2, h2, rng),
            dropout_rate,
        }
    }

    /// Input [N, in_dim] -> logits [N, 2].
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        mode: Mode,
        act: ActivationKind,
        slope: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let y = self.fc1.forward(tape, &format!("{prefix}.fc1"), x)?;
        let y = self.bn1.forward(tape, &format!("{prefix}.bn1"), y, mode)?;
        let y = nn::activation(tape, y, act, slope)?;
        let y = nn::dropout(tape, y, self.dropout_rate, mode, rng)?;
        let y = self.fc2.forward(tape, &format!("{prefix}.fc2"), y)?;
        let y = self.bn2.forward(tape, &format!("{prefix}.bn2"), y, mode)?;
        let y = nn::activation(tape, y, act, slope)?;
        let y = nn::dropout(tape, y, self.dropout_rate, mode, rng)?;
        self.fc_out.forward(tape, &format!("{prefix}.out"), y)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = self.fc1.params(&format!("{prefix}.fc1"));
        out.extend(self.bn1.params(&format!("{prefix}.bn1")));
        out.extend(self.fc2.params(&format!("{prefix}.fc2")));
        out.extend(self.bn2.params(&format!("{prefix}.bn2")));
        out.extend(self.fc_out.params(&format!("{prefix}.out")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = self.fc1.params_mut(&format!("{prefix}.fc1"));
        out.extend(self.bn1.params_mut(&format!("{prefix}.bn1")));
        out.extend(self.fc2.params_mut(&format!("{prefix}.fc2")));
        out.extend(self.bn2.params_mut(&format!("{prefix}.bn2")));
        out.extend(self.fc_out.params_mut(&format!("{prefix}.out")));
        out
    }
}

/// Cross-entropy of a two-class logit pair against label 0 or 1, computed
/// through a shifted log-sum-exp so huge logits cannot overflow.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape != [2] {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![2],
        });
    }
    if label > 1 {
        return Err(Error::Contract(format!("invalid class label {label}")));
    }
    let data = tape.data(logits);
    let m = data[0].max(data[1]);
    let shifted = tape.add_scalar(logits, -m)?;
    let exps = tape.exp(shifted)?;
    let total = tape.sum_all(exps)?;
    let lse_shifted = tape.ln(total)?;
    let lse = tape.add_scalar(lse_shifted, m)?;
    let picked = tape.slice(logits, 0, label, 1)?;
    let picked = tape.reshape(picked, &[])?;
    tape.sub(lse, picked)
}

/// Mean cross-entropy over the rows of a logit matrix [N, 2].
pub fn cross_entropy_mean(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "cross_entropy_mean",
            lhs: shape,
            rhs: vec![labels.len(), 2],
        });
    }
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = tape.slice(logits, 0, i, 1)?;
        let row = tape.reshape(row, &[2])?;
        losses.push(cross_entropy(tape, row, label)?);
    }
    nn::mean_pool(tape, &losses)
}
