//! Layers shared by both branches: linear, activations, softmax, batch
//! normalization, dropout, 3D convolution, pooling. Layers are pure
//! functions of their parameters; parameters change only between steps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv3dImpl, Tape, Tensor, Var};

/// Forward-pass mode. `GradCheck` behaves like `Train` for batch
/// statistics but freezes running-stat updates and bypasses dropout, so
/// finite-difference oracles see a deterministic pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    GradCheck,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::GradCheck)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Swish,
    Sigmoid,
}

impl ActivationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "leaky_relu" => Ok(ActivationKind::LeakyRelu),
            "swish" => Ok(ActivationKind::Swish),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            other => Err(Error::Config(format!(
                "unknown activation kind {other:?} (relu|leaky_relu|swish|sigmoid)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Swish => "swish",
            ActivationKind::Sigmoid => "sigmoid",
        }
    }
}

/// Elementwise activation. `leaky_slope` only applies to `LeakyRelu`.
pub fn activation(tape: &mut Tape, x: Var, kind: ActivationKind, leaky_slope: f64) -> Result<Var> {
    match kind {
        ActivationKind::Relu => tape.relu(x),
        ActivationKind::LeakyRelu => tape.leaky_relu(x, leaky_slope),
        ActivationKind::Swish => {
            let s = tape.sigmoid(x)?;
            tape.mul(x, s)
        }
        ActivationKind::Sigmoid => tape.sigmoid(x),
    }
}

/// Softmax along `axis`; positive outputs summing to 1 per lane.
pub fn softmax(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    tape.softmax(x, axis)
}

/// Uniform init in ±sqrt(6/(fan_in+fan_out)).
pub fn glorot_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// Fully connected layer: y = x·W^T + b with weight [out, in].
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        LinearParams {
            weight: glorot_uniform(&[out_dim, in_dim], in_dim, out_dim, rng).with_grad(),
            bias: Tensor::zeros(&[out_dim]).with_grad(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Accepts [in] or [N, in].
    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.leaf_keyed(&format!("{prefix}.w"), &self.weight);
        let b = tape.leaf_keyed(&format!("{prefix}.b"), &self.bias);
        let y = match tape.shape(x).len() {
            1 => tape.matmul(w, x)?,
            2 => {
                let wt = tape.transpose2d(w)?;
                tape.matmul(x, wt)?
            }
            _ => {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: tape.shape(x).to_vec(),
                    rhs: self.weight.shape().to_vec(),
                })
            }
        };
        tape.add(y, b)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w"), &self.weight),
            (format!("{prefix}.b"), &self.bias),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.w"), &mut self.weight),
            (format!("{prefix}.b"), &mut self.bias),
        ]
    }
}

/// Per-channel batch normalization state. Train mode standardizes with
/// batch statistics and folds them into the running estimates; eval mode
/// uses the running estimates only.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn init(channels: usize, momentum: f64, eps: f64) -> Self {
        let mut gamma = Tensor::zeros(&[channels]);
        gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut running_var = Tensor::zeros(&[channels]);
        running_var.data_mut().iter_mut().for_each(|v| *v = 1.0);
        BatchNormState {
            gamma: gamma.with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var,
            momentum,
            eps,
        }
    }

    /// Input is [N, C] or [N, C, spatial...]; channel axis is 1.
    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.leaf_keyed(&format!("{prefix}.gamma"), &self.gamma);
        let beta = tape.leaf_keyed(&format!("{prefix}.beta"), &self.beta);
        if mode.uses_batch_stats() {
            let (y, mean, var_unbiased) = tape.batch_norm(x, gamma, beta, None, self.eps)?;
            if mode == Mode::Train {
                let m = self.momentum;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * *b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var_unbiased) {
                    *r = (1.0 - m) * *r + m * *b;
                }
            }
            Ok(y)
        } else {
            let (y, _, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                Some((self.running_mean.data(), self.running_var.data())),
                self.eps,
            )?;
            Ok(y)
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
            (format!("{prefix}.running_mean"), &self.running_mean),
            (format!("{prefix}.running_var"), &self.running_var),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
            (format!("{prefix}.running_mean"), &mut self.running_mean),
            (format!("{prefix}.running_var"), &mut self.running_var),
        ]
    }
}

/// Inverted dropout: train mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); eval and gradcheck modes are the identity.
pub fn dropout<R: Rng>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode != Mode::Train || rate == 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - rate);
    let n = tape.data(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let shape = tape.shape(x).to_vec();
    let m = tape.constant(&shape, mask)?;
    tape.mul(x, m)
}

/// 3D convolution over [C,T,H,W] or [N,C,T,H,W] input; output rank
/// matches the input rank.
pub fn conv3d(
    tape: &mut Tape,
    x: Var,
    kernels: Var,
    stride: [usize; 3],
    pad: [usize; 3],
    imp: Conv3dImpl,
) -> Result<Var> {
    match tape.shape(x).len() {
        5 => tape.conv3d(x, kernels, stride, pad, imp),
        4 => {
            let mut batched = vec![1];
            batched.extend_from_slice(tape.shape(x));
            let xb = tape.reshape(x, &batched)?;
            let y = tape.conv3d(xb, kernels, stride, pad, imp)?;
            let out_shape = tape.shape(y)[1..].to_vec();
            tape.reshape(y, &out_shape)
        }
        _ => Err(Error::Shape {
            op: "conv3d",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(kernels).to_vec(),
        }),
    }
}

/// Adaptive average pooling over the trailing three axes.
pub fn adaptive_avg_pool3d(tape: &mut Tape, x: Var, out_dims: [usize; 3]) -> Result<Var> {
    tape.adaptive_avg_pool3d(x, out_dims)
}

/// Elementwise arithmetic mean of a nonempty list of same-shape vars.
pub fn mean_pool(tape: &mut Tape, seq: &[Var]) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::Contract("mean_pool of an empty sequence".into()));
    }
    let mut acc = seq[0];
    for &v in &seq[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.mul_scalar(acc, 1.0 / seq.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    #[test]
    fn linear_identity_weight_passes_input_through() {
        let p = LinearParams {
            weight: t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            bias: Tensor::zeros(&[3]),
        };
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[3], vec![0.5, -2.0, 7.0]).unwrap();
        let y = p.forward(&mut tape, "id", x).unwrap();
        assert_eq!(tape.data(y), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn linear_zero_weight_returns_bias() {
        let p = LinearParams {
            weight: Tensor::zeros(&[2, 3]),
            bias: t(&[2], &[4.0, -1.0]),
        };
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[2, 3], vec![9.0; 6]).unwrap();
        let y = p.forward(&mut tape, "zero", x).unwrap();
        assert_eq!(tape.data(y), &[4.0, -1.0, 4.0, -1.0]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let p = LinearParams::init(3, 4, &mut rng);
        let x_vals: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let run = |w: &Tensor| -> crate::error::Result<f64> {
            let probe = LinearParams {
                weight: w.clone(),
                bias: p.bias.clone(),
            };
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&[2, 4], x_vals.clone())?;
            let y = probe.forward(&mut tape, "l", x)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum_all(sq)?;
            tape.item(s)
        };
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[2, 4], x_vals.clone()).unwrap();
        let y = p.forward(&mut tape, "l", x).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        let analytic = tape.grad(tape.keyed_leaf("l.w").unwrap()).unwrap().to_vec();
        let numeric = finite_diff_grad(run, &p.weight, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, numeric.data()) < 1e-6);
    }

    #[test]
    fn activation_values_at_reference_points() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let leaky = activation(&mut tape, x, ActivationKind::LeakyRelu, 0.01).unwrap();
        assert_eq!(tape.data(leaky), &[-0.01, 0.0, 2.0]);
        let sig = activation(&mut tape, x, ActivationKind::Sigmoid, 0.01).unwrap();
        assert_eq!(tape.data(sig)[1], 0.5);
        let swish = activation(&mut tape, x, ActivationKind::Swish, 0.01).unwrap();
        assert_eq!(tape.data(swish)[1], 0.0);
        let relu = activation(&mut tape, x, ActivationKind::Relu, 0.01).unwrap();
        assert_eq!(tape.data(relu), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unknown_activation_kind_is_config_error() {
        assert!(matches!(
            ActivationKind::parse("gelu"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn softmax_uniform_input_gives_uniform_output() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[4], vec![3.0; 4]).unwrap();
        let y = softmax(&mut tape, x, 0).unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[2], vec![1000.0, 0.0]).unwrap();
        let y = softmax(&mut tape, x, 0).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-12);
        assert!(tape.data(y)[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_invariant_to_additive_constant() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[3], vec![0.3, -1.1, 0.7]).unwrap();
        let y1 = softmax(&mut tape, x, 0).unwrap();
        let shifted = tape.add_scalar(x, 5.0).unwrap();
        let y2 = softmax(&mut tape, shifted, 0).unwrap();
        for (a, b) in tape.data(y1).iter().zip(tape.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_eval_with_identity_stats_is_epsilon_scaled_identity() {
        let mut bn = BatchNormState::init(3, 0.1, 1e-5);
        let mut tape: Tape = Tape::new();
        let vals = [0.05, -0.15, 0.2, 0.1, 0.0, -0.12];
        let x = tape.constant(&[2, 3], vals.to_vec()).unwrap();
        let y = bn.forward(&mut tape, "bn", x, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in tape.data(y).iter().zip(&vals) {
            assert!((o - i).abs() <= 1e-6);
            assert!((o - i * scale).abs() <= 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_standardizes_to_beta_and_gamma() {
        // spread data so eps is negligible against the batch variance
        let mut bn = BatchNormState::init(1, 0.1, 1e-5);
        bn.gamma.data_mut()[0] = 2.0;
        bn.beta.data_mut()[0] = 0.7;
        let vals: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) * 10.0).collect();
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[16, 1], vals).unwrap();
        let y = bn.forward(&mut tape, "bn", x, Mode::Train).unwrap();
        let out = tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!((mean - 0.7).abs() < 1e-6);
        assert!((var - 4.0).abs() < 1e-6);
        // running stats moved toward the batch stats
        assert!(bn.running_mean.data()[0].abs() < 1e-9);
        assert!(bn.running_var.data()[0] > 1.0);
    }

    #[test]
    fn batchnorm_eval_is_deterministic_pure_function() {
        let mut bn = BatchNormState::init(2, 0.1, 1e-5);
        bn.running_mean.data_mut().copy_from_slice(&[0.3, -0.2]);
        bn.running_var.data_mut().copy_from_slice(&[1.5, 0.8]);
        let snapshot = (bn.running_mean.clone(), bn.running_var.clone());
        let run = |bn: &mut BatchNormState| {
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&[2, 2], vec![0.1, 0.9, -0.4, 0.2]).unwrap();
            let y = bn.forward(&mut tape, "bn", x, Mode::Eval).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(&mut bn), run(&mut bn));
        assert_eq!(bn.running_mean, snapshot.0);
        assert_eq!(bn.running_var, snapshot.1);
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y0 = dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.data(y0), tape.data(x));
        let ye = dropout(&mut tape, x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.data(ye), tape.data(x));
        let yg = dropout(&mut tape, x, 0.9, Mode::GradCheck, &mut rng).unwrap();
        assert_eq!(tape.data(yg), tape.data(x));
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut tape: Tape = Tape::new();
        let x = tape.zeros(&[2]);
        assert!(dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_concentrates_at_half() {
        let n = 100_000;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(42);
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[n], vec![1.0; n]).unwrap();
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = tape.data(y).iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        // survivors carry the 1/(1-rate) scale
        let nonzero = tape.data(y).iter().find(|&&v| v != 0.0).unwrap();
        assert_eq!(*nonzero, 2.0);
    }

    #[test]
    fn mean_pool_basics_and_gradient_split() {
        let mut tape: Tape = Tape::new();
        let a = tape.constant(&[2], vec![1.0, 3.0]).unwrap();
        let single = mean_pool(&mut tape, &[a]).unwrap();
        assert_eq!(tape.data(single), &[1.0, 3.0]);
        let b = tape.constant(&[2], vec![-1.0, -3.0]).unwrap();
        let zero = mean_pool(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.data(zero), &[0.0, 0.0]);
        assert!(mean_pool(&mut tape, &[]).is_err());

        // each element receives 1/n of the upstream gradient
        let xs: Vec<Tensor> = (0..4)
            .map(|i| t(&[2], &[i as f64, -(i as f64)]).with_grad())
            .collect();
        let run = |probe: &Tensor| -> crate::error::Result<f64> {
            let mut tape: Tape = Tape::new();
            let vars: Vec<Var> = std::iter::once(tape.leaf(probe))
                .chain(xs[1..].iter().map(|x| tape.leaf(x)))
                .collect();
            let m = mean_pool(&mut tape, &vars)?;
            let sq = tape.mul(m, m)?;
            let s = tape.sum_all(sq)?;
            tape.item(s)
        };
        let mut tape2: Tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape2.leaf(x)).collect();
        let m = mean_pool(&mut tape2, &vars).unwrap();
        let sq = tape2.mul(m, m).unwrap();
        let s = tape2.sum_all(sq).unwrap();
        tape2.backward(s).unwrap();
        let analytic = tape2.grad(vars[0]).unwrap().to_vec();
        let numeric = finite_diff_grad(run, &xs[0], 1e-5).unwrap();
        assert!(max_rel_err(&analytic, numeric.data()) < 1e-6);
    }

    #[test]
    fn conv3d_wrapper_accepts_unbatched_input() {
        let mut tape: Tape = Tape::new();
        let x = tape.constant(&[1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let k = tape.constant(&[1, 1, 2, 2, 2], vec![1.0; 8]).unwrap();
        let y = conv3d(&mut tape, x, k, [1, 1, 1], [0, 0, 0], Conv3dImpl::Direct).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[8.0]);
    }
}
