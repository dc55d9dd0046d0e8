//! Visual pathway: a small 3D residual CNN over clips, adaptive average
//! pooling, and shot-level mean pooling. The backbone is configurable; the
//! default profile is a two-stage variant small enough for CPU training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ActivationKind, BatchNormState, LinearParams, Mode};
use crate::tensor::{Conv3dImpl, Tape, Tensor, Var};

/// One shot's sampled frame volume, values in [0, 1], layout [C, T, H, W].
#[derive(Debug, Clone)]
pub struct Clip {
    pub voxels: Vec<f64>,
    pub dims: [usize; 4],
    pub shot_id: String,
}

impl Clip {
    pub fn new(shot_id: String, dims: [usize; 4], voxels: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if voxels.len() != n {
            return Err(Error::Shape {
                op: "clip_new",
                lhs: dims.to_vec(),
                rhs: vec![voxels.len()],
            });
        }
        if let Some(bad) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "clip voxel {bad} outside [0, 1]"
            )));
        }
        Ok(Clip {
            voxels,
            dims,
            shot_id,
        })
    }
}

fn conv_init<R: Rng>(shape: [usize; 5], rng: &mut R) -> Tensor {
    let k_vol = shape[2] * shape[3] * shape[4];
    let fan_in = shape[1] * k_vol;
    let fan_out = shape[0] * k_vol;
    nn::glorot_uniform(&shape, fan_in, fan_out, rng).with_grad()
}

/// conv → BN → act → conv → BN, summed with an identity or strided
/// 1x1x1-conv shortcut, then activated.
#[derive(Debug, Clone)]
pub struct ResidualBlock3d {
    pub conv1: Tensor,
    pub bn1: BatchNormState,
    pub conv2: Tensor,
    pub bn2: BatchNormState,
    /// Present when the block changes channel count or stride.
    pub down: Option<(Tensor, BatchNormState)>,
    pub stride: usize,
}

impl ResidualBlock3d {
    pub fn init<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut R,
    ) -> Self {
        let down = if stride != 1 || in_ch != out_ch {
            Some((
                conv_init([out_ch, in_ch, 1, 1, 1], rng),
                BatchNormState::init(out_ch, bn_momentum, bn_eps),
            ))
        } else {
            None
        };
        ResidualBlock3d {
            conv1: conv_init([out_ch, in_ch, 3, 3, 3], rng),
            bn1: BatchNormState::init(out_ch, bn_momentum, bn_eps),
            conv2: conv_init([out_ch, out_ch, 3, 3, 3], rng),
            bn2: BatchNormState::init(out_ch, bn_momentum, bn_eps),
            down,
            stride,
        }
    }

#[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        mode: Mode,
        act: ActivationKind,
        slope: f64,
        imp: Conv3dImpl,
    ) -> Result<Var> {
        let s = self.stride;
        let k1 = tape.leaf_keyed(&format!("{prefix}.conv1"), &self.conv1);
        let y = tape.conv3d(x, k1, [s, s, s], [1, 1, 1], imp)?;
        let y = self.bn1.forward(tape, &format!("{prefix}.bn1"), y, mode)?;
        let y = nn::activation(tape, y, act, slope)?;
        let k2 = tape.leaf_keyed(&format!("{prefix}.conv2"), &self.conv2);
        let y = tape.conv3d(y, k2, [1, 1, 1], [1, 1, 1], imp)?;
        let y = self.bn2.forward(tape, &format!("{prefix}.bn2"), y, mode)?;
        let shortcut = match &mut self.down {
            Some((k, bn)) => {
                let kd = tape.leaf_keyed(&format!("{prefix}.down.conv"), k);
                let d = tape.conv3d(x, kd, [s, s, s], [0, 0, 0], imp)?;
                bn.forward(tape, &format!("{prefix}.down.bn"), d, mode)?
            }
            None => x,
        };
        let sum = tape.add(y, shortcut)?;
        nn::activation(tape, sum, act, slope)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("{prefix}.conv1"), &self.conv1)];
        out.extend(self.bn1.params(&format!("{prefix}.bn1")));
        out.push((format!("{prefix}.conv2"), &self.conv2));
        out.extend(self.bn2.params(&format!("{prefix}.bn2")));
        if let Some((k, bn)) = &self.down {
            out.push((format!("{prefix}.down.conv"), k));
            out.extend(bn.params(&format!("{prefix}.down.bn")));
        }
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(format!("{prefix}.conv1"), &mut self.conv1)];
        out.extend(self.bn1.params_mut(&format!("{prefix}.bn1")));
        out.push((format!("{prefix}.conv2"), &mut self.conv2));
        out.extend(self.bn2.params_mut(&format!("{prefix}.bn2")));
        if let Some((k, bn)) = &mut self.down {
            out.push((format!("{prefix}.down.conv"), k));
            out.extend(bn.params_mut(&format!("{prefix}.down.bn")));
        }
        out
    }
}

/// Backbone shape: stage widths and blocks per stage. The first stage
/// keeps resolution; later stages stride by 2.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct R3dConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub out_dim: usize,
}

/// Stem + residual stages + adaptive pooling + projection to the common
/// fusion dimension.
#[derive(Debug, Clone)]
pub struct R3dParams {
    pub stem_conv: Tensor,
    pub stem_bn: BatchNormState,
    pub stages: Vec<Vec<ResidualBlock3d>>,
    pub proj: LinearParams,
    pub config: R3dConfig,
}

/// Forward products the interpretability pass needs: the embedding plus
/// the last conv stage's activations.
pub struct R3dTrace {
    pub embedding: Var,
    pub last_stage: Var,
}

impl R3dParams {
    pub fn init<R: Rng>(config: R3dConfig, bn_momentum: f64, bn_eps: f64, rng: &mut R) -> Result<Self> {
        if config.stage_widths.len() != config.stage_blocks.len() || config.stage_widths.is_empty() {
            return Err(Error::Config(
                "r3d stage widths and block counts must align and be nonempty".into(),
            ));
        }
        let stem_conv = conv_init(
            [config.stem_width, config.in_channels, 3, 7, 7],
            rng,
        );
        let stem_bn = BatchNormState::init(config.stem_width, bn_momentum, bn_eps);
        let mut stages = Vec::new();
        let mut in_ch = config.stem_width;
        for (si, (&width, &blocks)) in config
            .stage_widths
            .iter()
            .zip(&config.stage_blocks)
            .enumerate()
        {
            let mut stage = Vec::new();
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                stage.push(ResidualBlock3d::init(
                    in_ch, width, stride, bn_momentum, bn_eps, rng,
                ));
                in_ch = width;
            }
            stages.push(stage);
        }
        let proj = LinearParams::init(config.out_dim, in_ch, rng);
        Ok(R3dParams {
            stem_conv,
            stem_bn,
            stages,
            proj,
            config,
        })
    }

    /// Batched forward over [N, C, T, H, W]; returns [N, out_dim] and the
    /// last stage's activations.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        act: ActivationKind,
        slope: f64,
        imp: Conv3dImpl,
    ) -> Result<R3dTrace> {
        let k = tape.leaf_keyed("r3d.stem.conv", &self.stem_conv);
        let y = tape.conv3d(x, k, [1, 2, 2], [1, 3, 3], imp)?;
        let y = self.stem_bn.forward(tape, "r3d.stem.bn", y, mode)?;
        let mut y = nn::activation(tape, y, act, slope)?;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                y = block.forward(
                    tape,
                    &format!("r3d.s{si}.b{bi}"),
                    y,
                    mode,
                    act,
                    slope,
                    imp,
                )?;
            }
        }
        let last_stage = y;
        let pooled = tape.adaptive_avg_pool3d(y, [1, 1, 1])?;
        let n = tape.shape(pooled)[0];
        let c = tape.shape(pooled)[1];
        let flat = tape.reshape(pooled, &[n, c])?;
        let embedding = self.proj.forward(tape, "r3d.proj", flat)?;
        Ok(R3dTrace {
            embedding,
            last_stage,
        })
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("{prefix}.stem.conv"), &self.stem_conv)];
        out.extend(self.stem_bn.params(&format!("{prefix}.stem.bn")));
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                out.extend(block.params(&format!("{prefix}.s{si}.b{bi}")));
            }
        }
        out.extend(self.proj.params(&format!("{prefix}.proj")));
        out
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![(format!("{prefix}.stem.conv"), &mut self.stem_conv)];
        out.extend(self.stem_bn.params_mut(&format!("{prefix}.stem.bn")));
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                out.extend(block.params_mut(&format!("{prefix}.s{si}.b{bi}")));
            }
        }
        out.extend(self.proj.params_mut(&format!("{prefix}.proj")));
        out
    }
}

/// Single-clip forward: stem, stages, adaptive pooling to (1,1,1) and
/// the projection to the fusion dimension. Returns the embedding vector.
#[allow(clippy::too_many_arguments)]
pub fn r3d_forward(
    tape: &mut Tape,
    clip: &Clip,
    params: &mut R3dParams,
    mode: Mode,
    act: ActivationKind,
    slope: f64,
    imp: Conv3dImpl,
) -> Result<Var> {
    let x = clip_to_var(tape, clip)?;
    let trace = params.forward_batch(tape, x, mode, act, slope, imp)?;
    let d = params.config.out_dim;
    tape.reshape(trace.embedding, &[d])
}

/// Binds a clip as a [1, C, T, H, W] constant on the tape.
pub fn clip_to_var(tape: &mut Tape, clip: &Clip) -> Result<Var> {
    let [c, t, h, w] = clip.dims;
    tape.constant(&[1, c, t, h, w], clip.voxels.clone())
}

/// Elementwise mean across per-shot embeddings.
pub fn shots_mean_pool(tape: &mut Tape, vs: &[Var]) -> Result<Var> {
    nn::mean_pool(tape, vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err};
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn clip_rejects_out_of_range_voxels() {
        assert!(Clip::new("s".into(), [1, 1, 1, 2], vec![0.5, 1.5]).is_err());
        assert!(Clip::new("s".into(), [1, 1, 1, 2], vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn zeroed_block_with_identity_shortcut_is_activation_of_input() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let mut block = ResidualBlock3d::init(2, 2, 1, 0.1, 1e-5, &mut rng);
        block.conv1.data_mut().iter_mut().for_each(|v| *v = 0.0);
        block.conv2.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(block.down.is_none());
        let mut tape: Tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = tape.constant(&[1, 2, 2, 2, 2], vals.clone()).unwrap();
        let y = block
            .forward(&mut tape, "b", x, Mode::Eval, ActivationKind::LeakyRelu, 0.01, Conv3dImpl::Direct)
            .unwrap();
        for (o, i) in tape.data(y).iter().zip(&vals) {
            let expect = if *i > 0.0 { *i } else { 0.01 * i };
            assert!((o - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_block_halves_dims_with_ceil_semantics() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut block = ResidualBlock3d::init(1, 2, 2, 0.1, 1e-5, &mut rng);
        let mut tape: Tape = Tape::new();
        let x = tape.zeros(&[1, 1, 5, 6, 7]);
        let y = block
            .forward(&mut tape, "b", x, Mode::Eval, ActivationKind::Relu, 0.0, Conv3dImpl::Direct)
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 3, 3, 4]); // ceil(5/2), ceil(6/2), ceil(7/2)
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let block = ResidualBlock3d::init(1, 1, 1, 0.1, 1e-5, &mut rng);
        use rand::Rng;
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_f64s(&[1, 1, 4, 4, 4], &vals).unwrap().with_grad();
        let run = |xt: &Tensor| -> crate::error::Result<f64> {
            let mut b = block.clone();
            let mut tape: Tape = Tape::new();
            let xv = tape.leaf(xt);
            let y = b.forward(&mut tape, "b", xv, Mode::GradCheck, ActivationKind::Swish, 0.0, Conv3dImpl::Direct)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum_all(sq)?;
            tape.item(s)
        };
        let mut b = block.clone();
        let mut tape: Tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = b
            .forward(&mut tape, "b", xv, Mode::GradCheck, ActivationKind::Swish, 0.0, Conv3dImpl::Direct)
            .unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        let analytic = tape.grad(xv).unwrap().to_vec();
        let numeric = finite_diff_grad(run, &x, 1e-5).unwrap();
        assert!(max_rel_err(&analytic, numeric.data()) < 1e-6);
        // kernel gradient too
        let gk = tape.grad(tape.keyed_leaf("b.conv1").unwrap()).unwrap().to_vec();
        let nk = finite_diff_grad(
            |kt: &Tensor| {
                let mut b = block.clone();
                b.conv1 = kt.clone();
                let mut tape: Tape = Tape::new();
                let xv = tape.leaf(&x);
                let y = b.forward(&mut tape, "b", xv, Mode::GradCheck, ActivationKind::Swish, 0.0, Conv3dImpl::Direct)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum_all(sq)?;
                tape.item(s)
            },
            &block.conv1,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_err(&gk, nk.data()) < 1e-6);
    }

    fn desk_backbone(seed: u64) -> R3dParams {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        R3dParams::init(
            R3dConfig {
                in_channels: 3,
                stem_width: 8,
                stage_widths: vec![8, 16],
                stage_blocks: vec![1, 1],
                out_dim: 64,
            },
            0.1,
            1e-5,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn backbone_output_dim_and_eval_determinism() {
        let mut p = desk_backbone(7);
        use rand::Rng;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let vox: Vec<f64> = (0..3 * 8 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |p: &mut R3dParams| {
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&[1, 3, 8, 32, 32], vox.clone()).unwrap();
            let tr = p
                .forward_batch(&mut tape, x, Mode::Eval, ActivationKind::LeakyRelu, 0.01, Conv3dImpl::Im2col)
                .unwrap();
            assert_eq!(tape.shape(tr.embedding), &[1, 64]);
            tape.data(tr.embedding).to_vec()
        };
        let a = run(&mut p);
        let b = run(&mut p);
        assert_eq!(a, b);
    }

    #[test]
    fn backbone_desk_forward_agrees_across_conv_paths() {
        let mut p = desk_backbone(13);
        use rand::Rng;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let vox: Vec<f64> = (0..3 * 8 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |p: &mut R3dParams, imp: Conv3dImpl| {
            let mut tape: Tape = Tape::new();
            let x = tape.constant(&[1, 3, 8, 32, 32], vox.clone()).unwrap();
            let tr = p
                .forward_batch(&mut tape, x, Mode::Eval, ActivationKind::LeakyRelu, 0.01, imp)
                .unwrap();
            tape.data(tr.embedding).to_vec()
        };
        let direct = run(&mut p, Conv3dImpl::Direct);
        let im2col = run(&mut p, Conv3dImpl::Im2col);
        for (a, b) in direct.iter().zip(&im2col) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn shots_mean_pool_trivials() {
        let mut tape: Tape = Tape::new();
        let v = tape.constant(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let same = shots_mean_pool(&mut tape, &[v]).unwrap();
        assert_eq!(tape.data(same), &[1.0, -2.0, 0.5]);
        let neg = tape.neg(v).unwrap();
        let zero = shots_mean_pool(&mut tape, &[v, neg]).unwrap();
        assert_eq!(tape.data(zero), &[0.0, 0.0, 0.0]);
        assert!(shots_mean_pool(&mut tape, &[]).is_err());
    }
}
