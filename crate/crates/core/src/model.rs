//! The full classifier: landmark branch (GAT per frame → shot mean →
//! LSTM → GRU), visual branch (3D residual backbone → adaptive pool →
//! shot mean), fusion, and the reduction head. Ablation variants rewire
//! which branches exist and how they join.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::fusion::{self, Alpha, FusionMode, FusionParams, HeadParams};
use crate::graph::gat::GatStack;
use crate::graph::recurrent::{gru_forward, lstm_forward, GruParams, LstmParams};
use crate::graph::{FacialGraph, LandmarkFrame};
use crate::nn::{ActivationKind, LinearParams, Mode};
use crate::tensor::{Conv3dImpl, Tape, Tensor, Var};
use crate::visual::{Clip, R3dConfig, R3dParams};

pub const LABEL_SOBER: usize = 0;
pub const LABEL_INTOXICATED: usize = 1;

/// Which pathways feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    FusedWeighted,
    FusedConcat,
    LandmarksOnly,
    VisualOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused_weighted" => Ok(Variant::FusedWeighted),
            "fused_concat" => Ok(Variant::FusedConcat),
            "landmarks_only" => Ok(Variant::LandmarksOnly),
            "visual_only" => Ok(Variant::VisualOnly),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (fused_weighted|fused_concat|landmarks_only|visual_only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FusedWeighted => "fused_weighted",
            Variant::FusedConcat => "fused_concat",
            Variant::LandmarksOnly => "landmarks_only",
            Variant::VisualOnly => "visual_only",
        }
    }

    pub fn uses_landmarks(self) -> bool {
        self != Variant::VisualOnly
    }

    pub fn uses_clips(self) -> bool {
        self != Variant::LandmarksOnly
    }
}

/// Auxiliary per-sample features concatenated to the landmark embedding
/// behind a widening projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AuxKind {
    Ear,
    Mar,
    Demographics,
}

impl AuxKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ear" => Ok(AuxKind::Ear),
            "mar" => Ok(AuxKind::Mar),
            "demographics" => Ok(AuxKind::Demographics),
            other => Err(Error::Config(format!(
                "unknown aux feature {other:?} (ear|mar|demographics)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Ear => "ear",
            AuxKind::Mar => "mar",
            AuxKind::Demographics => "demographics",
        }
    }

    /// Width of the feature vector: mean/std for the ratios, a 10-wide
    /// one-hot block stack for demographics.
    pub fn dim(self) -> usize {
        match self {
            AuxKind::Ear | AuxKind::Mar => 2,
            AuxKind::Demographics => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Common fusion dimension D; also the LSTM/GRU hidden size.
    pub fusion_dim: usize,
    /// Frame embedding width produced by the GAT stack.
    pub gat_dim: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    /// Leaky slope inside the attention score nonlinearity.
    pub attn_slope: f64,
    /// Leaky slope of the model-wide activation when it is leaky_relu.
    pub leaky_slope: f64,
    pub activation: ActivationKind,
    /// Append per-frame coordinate velocities to the node features.
    pub velocity_features: bool,
    pub clip_dims: [usize; 4],
    pub r3d_stem_width: usize,
    pub r3d_stage_widths: Vec<usize>,
    pub r3d_stage_blocks: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub variant: Variant,
    pub aux: Option<AuxKind>,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub conv_impl: Conv3dImpl,
}

impl ModelConfig {
    /// CPU-sized default profile (D = 64).
    pub fn desk() -> Self {
        ModelConfig {
            fusion_dim: 64,
            gat_dim: 32,
            gat_layers: 2,
            gat_heads: 2,
            attn_slope: 0.2,
            leaky_slope: 0.01,
            activation: ActivationKind::LeakyRelu,
            velocity_features: true,
            clip_dims: [3, 8, 32, 32],
            r3d_stem_width: 8,
            r3d_stage_widths: vec![8, 16],
            r3d_stage_blocks: vec![1, 1],
            fusion_mode: FusionMode::Gated,
            variant: Variant::FusedWeighted,
            aux: None,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_impl: Conv3dImpl::Im2col,
        }
    }

    /// Faithful-dimension profile (D = 512, 18-layer-style backbone).
    /// Runnable but slow without acceleration.
    pub fn paper() -> Self {
        ModelConfig {
            fusion_dim: 512,
            gat_dim: 512,
            gat_layers: 2,
            gat_heads: 2,
            attn_slope: 0.2,
            leaky_slope: 0.01,
            activation: ActivationKind::LeakyRelu,
            velocity_features: true,
            clip_dims: [3, 16, 112, 112],
            r3d_stem_width: 64,
            r3d_stage_widths: vec![64, 128, 256, 512],
            r3d_stage_blocks: vec![2, 2, 2, 2],
            fusion_mode: FusionMode::Gated,
            variant: Variant::FusedWeighted,
            aux: None,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_impl: Conv3dImpl::Im2col,
        }
    }

    fn node_feat_dim(&self) -> usize {
        if self.velocity_features {
            4
        } else {
            2
        }
    }

    fn head_in_dim(&self) -> usize {
        match self.variant {
            Variant::FusedConcat => 2 * self.fusion_dim,
            _ => self.fusion_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aux.is_some() && !self.variant.uses_landmarks() {
            return Err(Error::Config(
                "aux features attach to the landmark embedding; visual_only cannot use them".into(),
            ));
        }
        if self.variant == Variant::FusedConcat && self.fusion_mode == FusionMode::Global {
            // concat ablation has no fusion scalar at all; mode is ignored
        }
        if self.fusion_dim == 0 || self.gat_dim == 0 {
            return Err(Error::Config("zero model dimension".into()));
        }
        Ok(())
    }
}

/// One shot's model input: normalized landmark frames plus the sampled
/// clip. The clip is absent when a landmarks-only variant loads data, so
/// that path never reads clip files at all.
#[derive(Debug, Clone)]
pub struct ShotInput {
    pub frames: Vec<LandmarkFrame>,
    pub clip: Option<Clip>,
}

/// One classifiable sample: a nonempty shot sequence with an optional
/// auxiliary feature vector.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub sample_id: String,
    pub shots: Vec<ShotInput>,
    pub aux: Option<Vec<f64>>,
    pub label: usize,
}

/// Everything a forward pass can hand back for training, evaluation and
/// interpretability.
pub struct BatchForward {
    /// [N, 2] logits, one row per sample.
    pub logits: Var,
    /// Per-sample fusion weight nodes (gated/global fused mode only).
    pub alphas: Vec<Option<Var>>,
    /// Last conv stage activations [total_shots, C, T', H', W'].
    pub last_stage: Option<Var>,
    /// Rows of the clip batch belonging to each sample.
    pub clip_rows: Vec<std::ops::Range<usize>>,
    /// Per-sample, per-frame coordinate leaves (filled when
    /// `coords_grad` was requested).
    pub coord_leaves: Vec<Vec<Var>>,
}

/// Full parameter set of both branches, the fusion scalar and the head.
pub struct FusionModel {
    pub config: ModelConfig,
    pub graph: FacialGraph,
    pub gat: Option<GatStack>,
    pub lstm: Option<LstmParams>,
    pub gru: Option<GruParams>,
    pub aux_proj: Option<LinearParams>,
    pub r3d: Option<R3dParams>,
    pub fusion: Option<FusionParams>,
    pub head: HeadParams,
}

impl FusionModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(crate::data::derive_seed(seed, 0x6d6f64656c)); // "model"
        let graph = crate::graph::build_facial_graph();
        let (gat, lstm, gru) = if config.variant.uses_landmarks() {
            let gat = GatStack::init(
                config.node_feat_dim(),
                config.gat_dim,
                config.gat_layers,
                config.gat_heads,
                config.attn_slope,
                config.activation,
                config.leaky_slope,
                &mut rng,
            )?;
            let lstm = LstmParams::init(config.fusion_dim, config.gat_dim, &mut rng);
            let gru = GruParams::init(config.fusion_dim, config.fusion_dim, &mut rng);
            (Some(gat), Some(lstm), Some(gru))
        } else {
            (None, None, None)
        };
        let aux_proj = match config.aux {
            Some(kind) => Some(LinearParams::init(
                config.fusion_dim,
                config.fusion_dim + kind.dim(),
                &mut rng,
            )),
            None => None,
        };
        let r3d = if config.variant.uses_clips() {
            Some(R3dParams::init(
                R3dConfig {
                    in_channels: config.clip_dims[0],
                    stem_width: config.r3d_stem_width,
                    stage_widths: config.r3d_stage_widths.clone(),
                    stage_blocks: config.r3d_stage_blocks.clone(),
                    out_dim: config.fusion_dim,
                },
                config.bn_momentum,
                config.bn_eps,
                &mut rng,
            )?)
        } else {
            None
        };
        let fusion = if config.variant == Variant::FusedWeighted {
            Some(FusionParams::init(
                config.fusion_mode,
                config.fusion_dim,
                &mut rng,
            ))
        } else {
            None
        };
        let head = HeadParams::init(
            config.head_in_dim(),
            config.fusion_dim,
            config.dropout,
            config.bn_momentum,
            config.bn_eps,
            &mut rng,
        );
        Ok(FusionModel {
            config,
            graph,
            gat,
            lstm,
            gru,
            aux_proj,
            r3d,
            fusion,
            head,
        })
    }

    /// Landmark pathway for one sample: per-frame GAT embeddings, mean
    /// pooled per shot, then LSTM→GRU across shots.
    fn landmark_embedding(
        &self,
        tape: &mut Tape,
        sample: &SampleInput,
        coords_grad: bool,
        coord_leaves: &mut Vec<Var>,
    ) -> Result<Var> {
        let gat = self.gat.as_ref().expect("landmark branch present");
        let lstm = self.lstm.as_ref().expect("landmark branch present");
        let gru = self.gru.as_ref().expect("landmark branch present");
        let mut g_seq = Vec::with_capacity(sample.shots.len());
        for shot in &sample.shots {
            if shot.frames.is_empty() {
                return Err(Error::Contract(format!(
                    "sample {} has a shot without frames",
                    sample.sample_id
                )));
            }
            let mut zs = Vec::with_capacity(shot.frames.len());
            let mut prev: Option<Var> = None;
            for frame in &shot.frames {
                let flat = frame.flat_coords();
                let coords = if coords_grad {
                    let t = Tensor::from_f64s(&[crate::graph::LANDMARK_COUNT, 2], &flat)?
                        .with_grad();
                    let v = tape.leaf(&t);
                    coord_leaves.push(v);
                    v
                } else {
                    tape.constant(&[crate::graph::LANDMARK_COUNT, 2], flat)?
                };
                let feats = if self.config.velocity_features {
                    let vel = match prev {
                        Some(p) => tape.sub(coords, p)?,
                        None => tape.zeros(&[crate::graph::LANDMARK_COUNT, 2]),
                    };
                    tape.concat(1, &[coords, vel])?
                } else {
                    coords
                };
                prev = Some(coords);
                zs.push(gat.frame_embed(tape, feats, &self.graph, "land")?);
            }
            g_seq.push(crate::nn::mean_pool(tape, &zs)?);
        }
        let hiddens = lstm_forward(tape, "land.lstm", lstm, &g_seq)?;
        let mut f_land = gru_forward(tape, "land.gru", gru, &hiddens)?;
        if let (Some(proj), Some(kind)) = (&self.aux_proj, self.config.aux) {
            let aux = sample.aux.as_ref().ok_or_else(|| {
                Error::Contract(format!(
                    "sample {} lacks the {} aux vector",
                    sample.sample_id,
                    kind.name()
                ))
            })?;
            if aux.len() != kind.dim() {
                return Err(Error::Contract(format!(
                    "aux vector of sample {} has length {}, expected {}",
                    sample.sample_id,
                    aux.len(),
                    kind.dim()
                )));
            }
            let a = tape.constant(&[aux.len()], aux.clone())?;
            let joint = tape.concat(0, &[f_land, a])?;
            f_land = proj.forward(tape, "land.aux_proj", joint)?;
        }
        Ok(f_land)
    }

    /// Batched forward pass. All clips across all samples run through the
    /// backbone as one batch (train-mode batch norm is batch-scoped);
    /// landmark sequences are processed per sample.
    pub fn forward_batch<R: Rng>(
        &mut self,
        tape: &mut Tape,
        samples: &[SampleInput],
        mode: Mode,
        rng: &mut R,
        coords_grad: bool,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Contract("forward_batch on no samples".into()));
        }
        for s in samples {
            if s.shots.is_empty() {
                return Err(Error::Contract(format!(
                    "sample {} has no shots",
                    s.sample_id
                )));
            }
        }
        let variant = self.config.variant;
        // visual branch: one conv batch over every shot of every sample
        let (mut v_rows, mut last_stage, mut clip_rows) = (None, None, Vec::new());
        if variant.uses_clips() {
            let [c, t, h, w] = self.config.clip_dims;
            let mut voxels = Vec::new();
            let mut row = 0usize;
            for s in samples {
                let start = row;
                for shot in &s.shots {
                    let clip = shot.clip.as_ref().ok_or_else(|| {
                        Error::Contract(format!(
                            "variant {} needs clips, but sample {} has none loaded",
                            variant.name(),
                            s.sample_id
                        ))
                    })?;
                    if clip.dims != self.config.clip_dims {
                        return Err(Error::Shape {
                            op: "forward_batch",
                            lhs: clip.dims.to_vec(),
                            rhs: self.config.clip_dims.to_vec(),
                        });
                    }
                    voxels.extend_from_slice(&clip.voxels);
                    row += 1;
                }
                clip_rows.push(start..row);
            }
            let x = tape.constant(&[row, c, t, h, w], voxels)?;
            let trace = self.r3d.as_mut().expect("visual branch present").forward_batch(
                tape,
                x,
                mode,
                self.config.activation,
                self.config.leaky_slope,
                self.config.conv_impl,
            )?;
            v_rows = Some(trace.embedding);
            last_stage = Some(trace.last_stage);
        } else {
            clip_rows = samples.iter().map(|_| 0..0).collect();
        }

        let mut fused_rows = Vec::with_capacity(samples.len());
        let mut alphas = Vec::with_capacity(samples.len());
        let mut coord_leaves = Vec::with_capacity(samples.len());
        for (si, sample) in samples.iter().enumerate() {
            let mut sample_coords = Vec::new();
            let f_land = if variant.uses_landmarks() {
                Some(self.landmark_embedding(tape, sample, coords_grad, &mut sample_coords)?)
            } else {
                None
            };
            coord_leaves.push(sample_coords);
            let f_vis = match v_rows {
                Some(rows) => {
                    let range = clip_rows[si].clone();
                    let mut vs = Vec::with_capacity(range.len());
                    for r in range {
                        let row = tape.slice(rows, 0, r, 1)?;
                        vs.push(tape.reshape(row, &[self.config.fusion_dim])?);
                    }
                    Some(crate::visual::shots_mean_pool(tape, &vs)?)
                }
                None => None,
            };
            let (fused, alpha) = match variant {
                Variant::FusedWeighted => {
                    let (fv, fl) = (f_vis.unwrap(), f_land.unwrap());
                    let a = fusion::gate_alpha(
                        tape,
                        fv,
                        fl,
                        self.fusion.as_ref().expect("fusion params present"),
                        "fusion",
                    )?;
                    (fusion::fuse(tape, fv, fl, Alpha::Node(a))?, Some(a))
                }
                Variant::FusedConcat => {
                    (fusion::concat_fuse(tape, f_vis.unwrap(), f_land.unwrap())?, None)
                }
                Variant::LandmarksOnly => (f_land.unwrap(), None),
                Variant::VisualOnly => (f_vis.unwrap(), None),
            };
            let width = tape.data(fused).len();
            fused_rows.push(tape.reshape(fused, &[1, width])?);
            alphas.push(alpha);
        }
        let stacked = if fused_rows.len() == 1 {
            fused_rows[0]
        } else {
            tape.concat(0, &fused_rows)?
        };
        let logits = self.head.forward(
            tape,
            "head",
            stacked,
            mode,
            self.config.activation,
            self.config.leaky_slope,
            rng,
        )?;
        Ok(BatchForward {
            logits,
            alphas,
            last_stage,
            clip_rows,
            coord_leaves,
        })
    }

    /// Ordered (name, tensor) registry over every parameter and buffer.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(gat) = &self.gat {
            out.extend(gat.params("land"));
        }
        if let Some(lstm) = &self.lstm {
            out.extend(lstm.params("land.lstm"));
        }
        if let Some(gru) = &self.gru {
            out.extend(gru.params("land.gru"));
        }
        if let Some(proj) = &self.aux_proj {
            out.extend(proj.params("land.aux_proj"));
        }
        if let Some(r3d) = &self.r3d {
            out.extend(r3d.params("r3d"));
        }
        if let Some(fusion) = &self.fusion {
            out.extend(fusion.params("fusion"));
        }
        out.extend(self.head.params("head"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(gat) = &mut self.gat {
            out.extend(gat.params_mut("land"));
        }
        if let Some(lstm) = &mut self.lstm {
            out.extend(lstm.params_mut("land.lstm"));
        }
        if let Some(gru) = &mut self.gru {
            out.extend(gru.params_mut("land.gru"));
        }
        if let Some(proj) = &mut self.aux_proj {
            out.extend(proj.params_mut("land.aux_proj"));
        }
        if let Some(r3d) = &mut self.r3d {
            out.extend(r3d.params_mut("r3d"));
        }
        if let Some(fusion) = &mut self.fusion {
            out.extend(fusion.params_mut("fusion"));
        }
        out.extend(self.head.params_mut("head"));
        out
    }

    /// Adds the tape's leaf adjoints into each parameter's gradient
    /// accumulator.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, tensor) in self.params_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            if let Some(var) = tape.keyed_leaf(&name) {
                if let Some(grad) = tape.grad(var) {
                    tensor.accumulate_grad(grad);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, tensor) in self.params_mut() {
            tensor.zero_grad();
        }
    }

    /// Byte-stable digest of all parameter values, used by determinism
    /// checks.
    pub fn param_digest(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (name, t) in self.params() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(&v.to_le_bytes());
            }
        }
        hasher.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LANDMARK_COUNT;

    pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            fusion_dim: 8,
            gat_dim: 4,
            gat_layers: 2,
            gat_heads: 2,
            attn_slope: 0.2,
            leaky_slope: 0.01,
            activation: ActivationKind::LeakyRelu,
            velocity_features: true,
            clip_dims: [2, 4, 8, 8],
            r3d_stem_width: 4,
            r3d_stage_widths: vec![4, 8],
            r3d_stage_blocks: vec![1, 1],
            fusion_mode: FusionMode::Gated,
            variant,
            aux: None,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_impl: Conv3dImpl::Im2col,
        }
    }

    pub(crate) fn tiny_sample(id: &str, seed: u64, label: usize, cfg: &ModelConfig) -> SampleInput {
        use rand::Rng;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let frames: Vec<LandmarkFrame> = (0..3)
            .map(|_| {
                let coords: Vec<[f64; 2]> = (0..LANDMARK_COUNT)
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect();
                LandmarkFrame::new(coords).unwrap()
            })
            .collect();
        let n: usize = cfg.clip_dims.iter().product();
        let voxels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let clip = Clip::new(format!("{id}-c"), cfg.clip_dims, voxels).unwrap();
        SampleInput {
            sample_id: id.to_string(),
            shots: vec![ShotInput { frames, clip: Some(clip) }],
            aux: None,
            label,
        }
    }

    #[test]
    fn forward_shapes_for_all_variants() {
        for variant in [
            Variant::FusedWeighted,
            Variant::FusedConcat,
            Variant::LandmarksOnly,
            Variant::VisualOnly,
        ] {
            let cfg = tiny_config(variant);
            let mut model = FusionModel::init(cfg.clone(), 7).unwrap();
            let samples = vec![
                tiny_sample("a", 1, 0, &cfg),
                tiny_sample("b", 2, 1, &cfg),
            ];
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
            let mut tape: Tape = Tape::new();
            let out = model
                .forward_batch(&mut tape, &samples, Mode::Eval, &mut rng, false)
                .unwrap();
            assert_eq!(tape.shape(out.logits), &[2, 2], "variant {variant:?}");
            let has_alpha = matches!(variant, Variant::FusedWeighted);
            assert_eq!(out.alphas[0].is_some(), has_alpha);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config(Variant::FusedWeighted);
        let mut model = FusionModel::init(cfg.clone(), 3).unwrap();
        let samples = vec![tiny_sample("a", 5, 0, &cfg)];
        let run = |model: &mut FusionModel| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
            let mut tape: Tape = Tape::new();
            let out = model
                .forward_batch(&mut tape, &samples, Mode::Eval, &mut rng, false)
                .unwrap();
            tape.data(out.logits).to_vec()
        };
        assert_eq!(run(&mut model), run(&mut model));
    }

    #[test]
    fn landmark_variant_has_no_visual_params_and_vice_versa() {
        let lm = FusionModel::init(tiny_config(Variant::LandmarksOnly), 1).unwrap();
        assert!(lm.params().iter().all(|(n, _)| !n.starts_with("r3d")));
        let vis = FusionModel::init(tiny_config(Variant::VisualOnly), 1).unwrap();
        assert!(vis.params().iter().all(|(n, _)| !n.starts_with("land")));
        assert!(vis.params().iter().any(|(n, _)| n.starts_with("r3d")));
    }

    #[test]
    fn aux_requires_landmark_branch() {
        let mut cfg = tiny_config(Variant::VisualOnly);
        cfg.aux = Some(AuxKind::Ear);
        assert!(FusionModel::init(cfg, 1).is_err());
    }

    #[test]
    fn aux_vector_is_consumed_by_projection() {
        let mut cfg = tiny_config(Variant::LandmarksOnly);
        cfg.aux = Some(AuxKind::Ear);
        let mut model = FusionModel::init(cfg.clone(), 2).unwrap();
        let mut sample = tiny_sample("a", 3, 0, &cfg);
        sample.aux = Some(vec![0.3, 0.05]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let mut tape: Tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &[sample.clone()], Mode::Eval, &mut rng, false)
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[1, 2]);
        // missing aux is a contract error
        sample.aux = None;
        let mut tape2: Tape = Tape::new();
        assert!(model
            .forward_batch(&mut tape2, &[sample], Mode::Eval, &mut rng, false)
            .is_err());
    }

    #[test]
    fn full_model_gradcheck_on_tiny_config() {
        // end-to-end composite gradient vs finite differences through
        // fusion, recurrence, attention and convolution
        use crate::tensor::gradcheck::{finite_diff_grad, max_rel_err};
        let cfg = tiny_config(Variant::FusedWeighted);
        let mut model = FusionModel::init(cfg.clone(), 11).unwrap();
        let samples = vec![
            tiny_sample("a", 21, 0, &cfg),
            tiny_sample("b", 22, 1, &cfg),
        ];
        let labels = [0usize, 1usize];
        let loss_of = |model: &mut FusionModel| -> crate::error::Result<(Tape, Var)> {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
            let mut tape: Tape = Tape::new();
            let out = model.forward_batch(&mut tape, &samples, Mode::GradCheck, &mut rng, false)?;
            let loss = fusion::cross_entropy_mean(&mut tape, out.logits, &labels)?;
            Ok((tape, loss))
        };
        let (mut tape, loss) = loss_of(&mut model).unwrap();
        tape.backward(loss).unwrap();
        // spot-check three parameter groups across the architecture
        for key in ["land.gat0.head0.w", "fusion.gate.w", "r3d.stem.conv"] {
            let analytic = tape
                .grad(tape.keyed_leaf(key).unwrap())
                .unwrap_or_else(|| panic!("no grad for {key}"))
                .to_vec();
            let original = model
                .params()
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| (*t).clone())
                .unwrap();
            let numeric = finite_diff_grad(
                |probe: &Tensor| {
                    for (n, t) in model.params_mut() {
                        if n == key {
                            *t = probe.clone().with_grad();
                        }
                    }
                    let (tp, l) = loss_of(&mut model)?;
                    tp.item(l)
                },
                &original,
                1e-5,
            )
            .unwrap();
            for (n, t) in model.params_mut() {
                if n == key {
                    *t = original.clone().with_grad();
                }
            }
            let err = max_rel_err(&analytic, numeric.data());
            assert!(err < 1e-6, "{key}: rel err {err}");
        }
    }
}
