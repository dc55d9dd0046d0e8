//! Gradient-based interpretability: per-landmark saliency from input
//! gradients, and class-activation maps over the last conv stage of the
//! visual backbone. Both read the model without mutating any parameter.

use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::LANDMARK_COUNT;
use crate::model::{FusionModel, SampleInput};
use crate::nn::Mode;
use crate::tensor::Tape;

/// Mean node score over an index set, reported under a human-readable
/// name.
#[derive(Debug, Clone, Serialize)]
pub struct RegionAggregate {
    pub name: String,
    pub nodes: Vec<usize>,
    pub score: f64,
}

/// Per-node saliency normalized to max 1 (or flagged all-zero), plus
/// region aggregates. Named point ranges are reported under both the
/// 0-indexed and 1-indexed reading of their bounds.
#[derive(Debug, Clone, Serialize)]
pub struct SaliencyReport {
    pub sample_id: String,
    pub target_class: usize,
    pub scores: Vec<f64>,
    pub all_zero: bool,
    pub regions: Vec<RegionAggregate>,
    pub named_ranges: Vec<RegionAggregate>,
}

fn aggregate(scores: &[f64], name: &str, nodes: Vec<usize>) -> RegionAggregate {
    let score = nodes.iter().map(|&n| scores[n]).sum::<f64>() / nodes.len() as f64;
    RegionAggregate {
        name: name.to_string(),
        nodes,
        score,
    }
}

impl SaliencyReport {
    pub fn region(&self, name: &str) -> Option<f64> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.score)
    }
}

/// Gradient of the target-class logit with respect to every input
/// landmark coordinate; per-node score is the frame-mean L2 norm of the
/// (x, y) gradient, normalized by the maximum node score.
pub fn landmark_saliency(
    model: &mut FusionModel,
    sample: &SampleInput,
    target_class: usize,
) -> Result<SaliencyReport> {
    if target_class > 1 {
        return Err(Error::Contract(format!(
            "target class {target_class} out of range"
        )));
    }
    if !model.config.variant.uses_landmarks() {
        return Err(Error::Contract(
            "landmark saliency needs the landmark branch".into(),
        ));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut tape: Tape = Tape::new();
    let out = model.forward_batch(&mut tape, std::slice::from_ref(sample), Mode::Eval, &mut rng, true)?;
    let row = tape.slice(out.logits, 0, 0, 1)?;
    let flat = tape.reshape(row, &[2])?;
    let target = tape.slice(flat, 0, target_class, 1)?;
    let target = tape.reshape(target, &[])?;
    tape.backward(target)?;

    let leaves = &out.coord_leaves[0];
    let mut scores = vec![0.0f64; LANDMARK_COUNT];
    for &leaf in leaves {
        match tape.grad(leaf) {
            Some(g) => {
                for node in 0..LANDMARK_COUNT {
                    let (gx, gy) = (g[node * 2], g[node * 2 + 1]);
                    scores[node] += (gx * gx + gy * gy).sqrt();
                }
            }
            None => continue,
        }
    }
    let frames = leaves.len().max(1) as f64;
    scores.iter_mut().for_each(|s| *s /= frames);
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    let all_zero = max == 0.0;
    if !all_zero {
        scores.iter_mut().for_each(|s| *s /= max);
    }
    let regions = vec![
        aggregate(&scores, "jaw", (0..=16).collect()),
        aggregate(&scores, "brows", (17..=26).collect()),
        aggregate(&scores, "nose_bridge", (27..=30).collect()),
        aggregate(&scores, "nose_base", (31..=35).collect()),
        aggregate(&scores, "eyes", (36..=47).collect()),
        aggregate(&scores, "mouth", (48..=67).collect()),
    ];
    // named point ranges under both indexing conventions
    let named_ranges = vec![
        aggregate(&scores, "jawline_points_12_15_zero_indexed", (12..=15).collect()),
        aggregate(&scores, "jawline_points_12_15_one_indexed", (11..=14).collect()),
        aggregate(&scores, "eyes_points_43_46_zero_indexed", (43..=46).collect()),
        aggregate(&scores, "eyes_points_43_46_one_indexed", (42..=45).collect()),
        aggregate(&scores, "mouth_corners_points_49_54_zero_indexed", (49..=54).collect()),
        aggregate(&scores, "mouth_corners_points_49_54_one_indexed", (48..=53).collect()),
    ];
    Ok(SaliencyReport {
        sample_id: sample.sample_id.clone(),
        target_class,
        scores,
        all_zero,
        regions,
        named_ranges,
    })
}

/// Class-activation map of one sample's first shot: rectified, channel-
/// weighted sum of the last conv stage, plus an upsampling to clip
/// resolution (nearest in time, bilinear in space).
#[derive(Debug, Clone, Serialize)]
pub struct ActivationMap {
    pub sample_id: String,
    pub target_class: usize,
    /// [T', H', W'] nonnegative map from the last conv stage.
    pub map: Vec<f64>,
    pub map_dims: [usize; 3],
    /// Upsampled to the clip's [T, H, W].
    pub upsampled: Vec<f64>,
    pub upsampled_dims: [usize; 3],
}

fn bilinear_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize, dst: &mut [f64]) {
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let v = src[y0 * sw + x0] * (1.0 - wy) * (1.0 - wx)
                + src[y0 * sw + x1] * (1.0 - wy) * wx
                + src[y1 * sw + x0] * wy * (1.0 - wx)
                + src[y1 * sw + x1] * wy * wx;
            dst[y * dw + x] = v;
        }
    }
}

pub fn grad_cam3d(
    model: &mut FusionModel,
    sample: &SampleInput,
    target_class: usize,
) -> Result<ActivationMap> {
    if target_class > 1 {
        return Err(Error::Contract(format!(
            "target class {target_class} out of range"
        )));
    }
    if !model.config.variant.uses_clips() {
        return Err(Error::Contract(
            "class-activation maps need the visual branch".into(),
        ));
    }
    let clip_dims = model.config.clip_dims;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut tape: Tape = Tape::new();
    let out = model.forward_batch(&mut tape, std::slice::from_ref(sample), Mode::Eval, &mut rng, false)?;
    let stage = out
        .last_stage
        .ok_or_else(|| Error::Contract("no conv stage recorded".into()))?;
    let row = tape.slice(out.logits, 0, 0, 1)?;
    let flat = tape.reshape(row, &[2])?;
    let target = tape.slice(flat, 0, target_class, 1)?;
    let target = tape.reshape(target, &[])?;
    tape.backward(target)?;
    let grads = tape
        .grad(stage)
        .ok_or_else(|| Error::Contract("no gradient reached the conv stage".into()))?;
    let acts = tape.data(stage);
    let shape = tape.shape(stage).to_vec(); // [shots, C', T', H', W']
    let (c, t, h, w) = (shape[1], shape[2], shape[3], shape[4]);
    let vol = t * h * w;
    // channel weights: global average of the target-logit gradient over
    // the first shot's spatiotemporal extent
    let mut weights = vec![0.0f64; c];
    for (ci, w) in weights.iter_mut().enumerate() {
        let base = ci * vol;
        *w = grads[base..base + vol].iter().sum::<f64>() / vol as f64;
    }
    let mut map = vec![0.0f64; vol];
    for (ci, &w) in weights.iter().enumerate() {
        let base = ci * vol;
        for (i, m) in map.iter_mut().enumerate() {
            *m += w * acts[base + i];
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    // upsample: nearest in time, bilinear in space
    let [_, t_out, h_out, w_out] = clip_dims;
    let mut upsampled = vec![0.0f64; t_out * h_out * w_out];
    for ti in 0..t_out {
        let src_t = (ti * t) / t_out;
        let src_plane = &map[src_t * h * w..(src_t + 1) * h * w];
        let dst_plane = &mut upsampled[ti * h_out * w_out..(ti + 1) * h_out * w_out];
        bilinear_plane(src_plane, h, w, h_out, w_out, dst_plane);
    }
    Ok(ActivationMap {
        sample_id: sample.sample_id.clone(),
        target_class,
        map,
        map_dims: [t, h, w],
        upsampled,
        upsampled_dims: [t_out, h_out, w_out],
    })
}

/// Binary 8-bit PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64], max: f64) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let scaled = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
        bytes.push(scaled.clamp(0.0, 255.0) as u8);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes one spatially-upsampled PGM per map frame (T' files) plus a
/// JSON index, returning the written image paths.
pub fn export_activation_pgms(
    dir: &Path,
    stem: &str,
    cam: &ActivationMap,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let [t, h, w] = cam.map_dims;
    let [_, h_out, w_out] = cam.upsampled_dims;
    let global_max = cam.map.iter().cloned().fold(0.0f64, f64::max);
    let mut paths = Vec::with_capacity(t);
    let mut plane = vec![0.0f64; h_out * w_out];
    for ti in 0..t {
        let src = &cam.map[ti * h * w..(ti + 1) * h * w];
        bilinear_plane(src, h, w, h_out, w_out, &mut plane);
        let path = dir.join(format!("{stem}_t{ti:02}.pgm"));
        write_pgm(&path, w_out, h_out, &plane, global_max)?;
        paths.push(path);
    }
    let index = serde_json::json!({
        "sample_id": cam.sample_id,
        "target_class": cam.target_class,
        "map_dims": cam.map_dims,
        "upsampled_dims": cam.upsampled_dims,
        "max_activation": global_max,
        "frames": paths.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
    });
    std::fs::write(
        dir.join(format!("{stem}_index.json")),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use crate::graph::LandmarkFrame;
    use crate::model::{ModelConfig, ShotInput, Variant};
    use crate::nn::ActivationKind;
    use crate::tensor::Conv3dImpl;
    use crate::visual::Clip;
    use rand::Rng;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            fusion_dim: 8,
            gat_dim: 4,
            gat_layers: 1,
            gat_heads: 2,
            attn_slope: 0.2,
            leaky_slope: 0.01,
            activation: ActivationKind::LeakyRelu,
            velocity_features: true,
            clip_dims: [3, 4, 16, 16],
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

    fn sample(seed: u64, c: &ModelConfig) -> SampleInput {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let frames: Vec<LandmarkFrame> = (0..3)
            .map(|_| {
                LandmarkFrame::new(
                    (0..LANDMARK_COUNT)
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let n: usize = c.clip_dims.iter().product();
        let clip = Clip::new(
            "s".into(),
            c.clip_dims,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        SampleInput {
            sample_id: "s0".into(),
            shots: vec![ShotInput {
                frames,
                clip: Some(clip),
            }],
            aux: None,
            label: 0,
        }
    }

    #[test]
    fn saliency_is_normalized_and_leaves_params_untouched() {
        let c = cfg(Variant::FusedWeighted);
        let mut model = FusionModel::init(c.clone(), 5).unwrap();
        let before = model.param_digest();
        let s = sample(1, &c);
        let report = landmark_saliency(&mut model, &s, 1).unwrap();
        assert_eq!(model.param_digest(), before);
        assert_eq!(report.scores.len(), 68);
        assert!(!report.all_zero);
        let max = report.scores.iter().cloned().fold(0.0f64, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(report.scores.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(report.regions.len(), 6);
        assert_eq!(report.named_ranges.len(), 6);
    }

    #[test]
    fn zeroed_landmark_branch_gives_flagged_all_zero_report() {
        let c = cfg(Variant::FusedWeighted);
        let mut model = FusionModel::init(c.clone(), 5).unwrap();
        for (name, t) in model.params_mut() {
            if name.starts_with("land") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let s = sample(2, &c);
        let report = landmark_saliency(&mut model, &s, 0).unwrap();
        assert!(report.all_zero);
        assert!(report.scores.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_cam_is_nonnegative_with_last_stage_shape() {
        let c = cfg(Variant::FusedWeighted);
        let mut model = FusionModel::init(c.clone(), 6).unwrap();
        let before = model.param_digest();
        let s = sample(3, &c);
        let cam = grad_cam3d(&mut model, &s, 1).unwrap();
        assert_eq!(model.param_digest(), before);
        // stem keeps T, halves H/W; stage 1 strides by 2
        assert_eq!(cam.map_dims, [2, 4, 4]);
        assert_eq!(cam.map.len(), 2 * 4 * 4);
        assert!(cam.map.iter().all(|&v| v >= 0.0));
        assert_eq!(cam.upsampled_dims, [4, 16, 16]);
        assert!(cam.upsampled.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn grad_cam_invariant_to_shifting_both_logit_biases() {
        let c = cfg(Variant::VisualOnly);
        let mut model = FusionModel::init(c.clone(), 9).unwrap();
        let s = sample(4, &c);
        let base = grad_cam3d(&mut model, &s, 1).unwrap();
        for (name, t) in model.params_mut() {
            if name == "head.out.b" {
                t.data_mut().iter_mut().for_each(|v| *v += 3.7);
            }
        }
        let shifted = grad_cam3d(&mut model, &s, 1).unwrap();
        assert_eq!(base.map, shifted.map);
    }

    #[test]
    fn grad_cam_rejects_bad_class_and_missing_branch() {
        let c = cfg(Variant::FusedWeighted);
        let mut model = FusionModel::init(c.clone(), 2).unwrap();
        let s = sample(5, &c);
        assert!(grad_cam3d(&mut model, &s, 2).is_err());
        let c2 = cfg(Variant::LandmarksOnly);
        let mut lm = FusionModel::init(c2.clone(), 2).unwrap();
        assert!(grad_cam3d(&mut lm, &sample(6, &c2), 0).is_err());
    }

    #[test]
    fn pgm_export_writes_one_file_per_map_frame() {
        let dir = tempfile::tempdir().unwrap();
        let cam = ActivationMap {
            sample_id: "x".into(),
            target_class: 1,
            map: (0..2 * 3 * 3).map(|i| i as f64).collect(),
            map_dims: [2, 3, 3],
            upsampled: vec![0.0; 4 * 6 * 6],
            upsampled_dims: [4, 6, 6],
        };
        let paths = export_activation_pgms(dir.path(), "cam", &cam).unwrap();
        assert_eq!(paths.len(), 2);
        for p in &paths {
            let bytes = std::fs::read(p).unwrap();
            assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
            assert_eq!(bytes.len(), "P5\n6 6\n255\n".len() + 36);
        }
        assert!(dir.path().join("cam_index.json").exists());
    }
}
