//! Training loop and evaluation. Single-threaded and fully seeded: the
//! epoch shuffle and every dropout mask come from one RNG stream whose
//! state rides along in checkpoints, so a resumed run is bit-identical to
//! an uninterrupted one.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{derive_seed, load_sample_input, DatasetManifest, SplitTag};
use crate::error::{Error, Result};
use crate::fusion::cross_entropy_mean;
use crate::metrics::{EpochStats, MetricsReport, PredictionRecord};
use crate::model::{FusionModel, SampleInput};
use crate::nn::Mode;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Fraction of train subjects held out, subject-disjoint, for the
    /// per-epoch validation curve.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 4,
            seed: 42,
            adam: AdamConfig::default(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Everything `train` leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best: Option<(usize, f64)>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub epochs_run: usize,
}

fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}

/// Splits the train records into train/validation subject-disjointly:
/// per class, roughly `val_fraction` of the subjects (at least one when a
/// class has two or more) move to validation.
pub fn carve_validation(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let records = &manifest.records;
    let mut val_subjects: Vec<String> = Vec::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, 0x76616c)); // "val"
    for label in 0..2usize {
        let mut subjects: Vec<String> = Vec::new();
        for r in records {
            if r.split == SplitTag::Train && r.label == label && !subjects.contains(&r.subject_id)
            {
                subjects.push(r.subject_id.clone());
            }
        }
        if subjects.len() < 2 || val_fraction == 0.0 {
            continue;
        }
        for i in (1..subjects.len()).rev() {
            let j = rng.gen_range(0..=i);
            subjects.swap(i, j);
        }
        let n_val = ((val_fraction * subjects.len() as f64).round() as usize)
            .clamp(1, subjects.len() - 1);
        val_subjects.extend(subjects.into_iter().take(n_val));
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.split != SplitTag::Train {
            continue;
        }
        if val_subjects.contains(&r.subject_id) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, val_idx)
}

fn load_inputs(
    manifest: &DatasetManifest,
    indices: &[usize],
    model: &FusionModel,
) -> Result<Vec<SampleInput>> {
    indices
        .iter()
        .map(|&i| {
            load_sample_input(
                &manifest.root,
                &manifest.records[i],
                model.config.aux,
                model.config.variant.uses_clips(),
            )
        })
        .collect()
}

/// Mean loss and accuracy of a sample set in eval mode, one sample at a
/// time.
fn eval_loss_acc(model: &mut FusionModel, samples: &[SampleInput]) -> Result<(f64, f64)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0); // eval path draws nothing
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let mut tape: Tape = Tape::new();
        let out = model.forward_batch(&mut tape, std::slice::from_ref(s), Mode::Eval, &mut rng, false)?;
        let loss = cross_entropy_mean(&mut tape, out.logits, &[s.label])?;
        loss_sum += tape.item(loss)?;
        if argmax2(tape.data(out.logits)) == s.label {
            correct += 1;
        }
    }
    Ok((
        loss_sum / samples.len() as f64,
        correct as f64 / samples.len() as f64,
    ))
}

/// Runs the §training loop: seeded shuffles, batched forward/backward,
/// Adam steps, per-epoch train/validation stats, a checkpoint per epoch
/// plus a best-by-validation copy. `resume` continues a previous run
/// bit-exactly. A non-finite loss or gradient aborts with the divergence
/// error; checkpoints already on disk stay.
pub fn train(
    model: &mut FusionModel,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    config_snapshot: String,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train_idx, val_idx) = carve_validation(manifest, cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let train_samples = load_inputs(manifest, &train_idx, model)?;
    let val_samples = load_inputs(manifest, &val_idx, model)?;

    let mut adam;
    let mut rng;
    let mut history;
    let mut best: Option<(usize, f64)>;
    let mut best_loss = f64::INFINITY;
    let start_epoch;
    match resume {
        Some(ckpt) => {
            ckpt.restore_into(model)?;
            adam = ckpt.adam_state().unwrap_or_else(|| AdamState::new(cfg.adam));
            rng = ckpt.rng()?;
            history = ckpt.history.clone();
            best = ckpt.best;
            if let Some((epoch, _)) = best {
                if let Some(h) = history.iter().find(|h| h.epoch == epoch) {
                    best_loss = h.val_loss;
                }
            }
            start_epoch = ckpt.epochs_done;
        }
        None => {
            adam = AdamState::new(cfg.adam);
            rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(cfg.seed, 0x747261696e)); // "train"
            history = Vec::new();
            best = None;
            start_epoch = 0;
        }
    }

    let best_path = out_dir.join("best.ckpt");
    let mut last_path = out_dir.join(format!("epoch_{start_epoch:03}.ckpt"));
    for epoch in start_epoch..cfg.epochs {
        // seeded epoch shuffle
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        // batch boundaries; a trailing singleton merges into the previous
        // batch so batch-norm always sees at least two samples
        let mut batches: Vec<Vec<usize>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.to_vec())
            .collect();
        if batches.len() > 1 && batches.last().map(|b| b.len()) == Some(1) {
            let tail = batches.pop().expect("nonempty");
            batches.last_mut().expect("nonempty").extend(tail);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let epoch_result: Result<()> = (|| {
            for batch in &batches {
                let samples: Vec<SampleInput> =
                    batch.iter().map(|&i| train_samples[i].clone()).collect();
                let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                let mut tape: Tape = Tape::new();
                let out = model.forward_batch(&mut tape, &samples, Mode::Train, &mut rng, false)?;
                let loss = cross_entropy_mean(&mut tape, out.logits, &labels)?;
                let loss_val = tape.item(loss)?;
                if !loss_val.is_finite() {
                    return Err(Error::Contract("non-finite loss".into()));
                }
                loss_sum += loss_val * batch.len() as f64;
                let logits = tape.data(out.logits);
                for (bi, &label) in labels.iter().enumerate() {
                    if argmax2(&logits[bi * 2..(bi + 1) * 2]) == label {
                        correct += 1;
                    }
                }
                tape.backward(loss)?;
                model.accumulate_grads(&tape);
                adam.step(model.params_mut())?;
                model.zero_grads();
            }
            Ok(())
        })();
        if let Err(e) = epoch_result {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                detail: e.to_string(),
            });
        }
        let train_loss = loss_sum / train_samples.len() as f64;
        let train_accuracy = correct as f64 / train_samples.len() as f64;
        let (val_loss, val_accuracy) = if val_samples.is_empty() {
            (train_loss, train_accuracy)
        } else {
            match eval_loss_acc(model, &val_samples) {
                Ok(v) => v,
                Err(e) => {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        detail: e.to_string(),
                    })
                }
            }
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        // better accuracy wins; equal accuracy falls back to lower loss
        let improved = match best {
            None => true,
            Some((_, acc)) => {
                val_accuracy > acc || (val_accuracy == acc && val_loss < best_loss)
            }
        };
        if improved {
            best = Some((epoch + 1, val_accuracy));
            best_loss = val_loss;
        }
        let ckpt = Checkpoint::capture(
            config_snapshot.clone(),
            model,
            Some(&adam),
            &rng,
            epoch + 1,
            history.clone(),
            best,
        )?;
        last_path = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save_checkpoint(&last_path, &ckpt)?;
        if improved {
            save_checkpoint(&best_path, &ckpt)?;
        }
    }
    Ok(TrainOutcome {
        history,
        best,
        best_path,
        last_path,
        epochs_run: cfg.epochs.saturating_sub(start_epoch),
    })
}

/// Which samples to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train|test)"))),
        }
    }

    fn tag(self) -> SplitTag {
        match self {
            EvalSplit::Train => SplitTag::Train,
            EvalSplit::Test => SplitTag::Test,
        }
    }
}

/// Single-sample eval-mode prediction (argmax of the logits).
pub fn predict_one(model: &mut FusionModel, sample: &SampleInput) -> Result<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut tape: Tape = Tape::new();
    let out = model.forward_batch(&mut tape, std::slice::from_ref(sample), Mode::Eval, &mut rng, false)?;
    Ok(argmax2(tape.data(out.logits)))
}

/// Evaluates the model on a split: argmax prediction per sample,
/// confusion counts, metrics by the defining formulas, and the mean
/// fusion weight when the model has one.
pub fn evaluate(
    model: &mut FusionModel,
    manifest: &DatasetManifest,
    split: EvalSplit,
) -> Result<MetricsReport> {
    let indices: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split.tag())
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
    let mut predictions = Vec::with_capacity(indices.len());
    for &i in &indices {
        let record = &manifest.records[i];
        let sample = load_sample_input(
            &manifest.root,
            record,
            model.config.aux,
            model.config.variant.uses_clips(),
        )?;
        let mut tape: Tape = Tape::new();
        let out = model.forward_batch(&mut tape, std::slice::from_ref(&sample), Mode::Eval, &mut rng, false)?;
        let predicted = argmax2(tape.data(out.logits));
        let alpha = out.alphas[0].map(|a| tape.data(a)[0]);
        predictions.push(PredictionRecord {
            sample_id: record.sample_id.clone(),
            subject_id: record.subject_id.clone(),
            label: record.label,
            predicted,
            alpha,
        });
    }
    MetricsReport::from_predictions(predictions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate::generate_dataset;
    use crate::data::GenConfig;
    use crate::fusion::FusionMode;
    use crate::model::{ModelConfig, Variant};
    use crate::nn::ActivationKind;
    use crate::tensor::Conv3dImpl;
    use tempfile::tempdir;

    pub(crate) fn mini_model_cfg(variant: Variant) -> ModelConfig {
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
            r3d_stage_widths: vec![4],
            r3d_stage_blocks: vec![1],
            fusion_mode: FusionMode::Gated,
            variant,
            aux: None,
            dropout: 0.5,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_impl: Conv3dImpl::Im2col,
        }
    }

    fn mini_gen_cfg() -> GenConfig {
        GenConfig {
            subjects_per_class: 3,
            shots_per_subject: 2,
            frames_per_shot: 6,
            clip_dims: [3, 4, 16, 16],
            ..GenConfig::default()
        }
    }

    #[test]
    fn one_epoch_touches_each_sample_once_and_writes_a_checkpoint() {
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 3, data_dir.path(), 1).unwrap();
        let mut model = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 1).unwrap();
        let out_dir = tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            seed: 5,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let outcome = train(
            &mut model,
            &manifest,
            &cfg,
            "mini".into(),
            out_dir.path(),
            None,
        )
        .unwrap();
        assert_eq!(outcome.history.len(), 1);
        assert!(out_dir.path().join("epoch_001.ckpt").exists());
        // train split has 2 subjects/class * 2 shots = 8 samples; the
        // accuracy denominator proves each was visited exactly once
        let h = &outcome.history[0];
        let n = (h.train_accuracy * 8.0).round();
        assert!((h.train_accuracy * 8.0 - n).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_training_is_bitwise_reproducible() {
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 7, data_dir.path(), 1).unwrap();
        let run = |dir: &Path| -> (u32, Vec<u8>) {
            let mut model = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 2).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 4,
                seed: 11,
                val_fraction: 0.2,
                ..TrainConfig::default()
            };
            train(&mut model, &manifest, &cfg, "mini".into(), dir, None).unwrap();
            (
                model.param_digest(),
                std::fs::read(dir.join("epoch_002.ckpt")).unwrap(),
            )
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let (dig1, bytes1) = run(d1.path());
        let (dig2, bytes2) = run(d2.path());
        assert_eq!(dig1, dig2);
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn resume_reproduces_an_uninterrupted_run_bit_for_bit() {
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 9, data_dir.path(), 1).unwrap();
        let cfg_full = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let straight = tempdir().unwrap();
        let mut model_a = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 8).unwrap();
        train(&mut model_a, &manifest, &cfg_full, "mini".into(), straight.path(), None).unwrap();

        let resumed = tempdir().unwrap();
        let mut model_b = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 8).unwrap();
        let cfg_one = TrainConfig { epochs: 1, ..cfg_full.clone() };
        train(&mut model_b, &manifest, &cfg_one, "mini".into(), resumed.path(), None).unwrap();
        let ckpt = crate::checkpoint::load_checkpoint(&resumed.path().join("epoch_001.ckpt")).unwrap();
        let mut model_c = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 8).unwrap();
        train(&mut model_c, &manifest, &cfg_full, "mini".into(), resumed.path(), Some(&ckpt)).unwrap();
        assert_eq!(
            std::fs::read(straight.path().join("epoch_002.ckpt")).unwrap(),
            std::fs::read(resumed.path().join("epoch_002.ckpt")).unwrap()
        );
        // the optimizer stepped through both epochs
        let final_ckpt =
            crate::checkpoint::load_checkpoint(&resumed.path().join("epoch_002.ckpt")).unwrap();
        let straight_ckpt =
            crate::checkpoint::load_checkpoint(&straight.path().join("epoch_002.ckpt")).unwrap();
        assert_eq!(
            final_ckpt.adam.as_ref().unwrap().step,
            straight_ckpt.adam.as_ref().unwrap().step
        );
        assert!(final_ckpt.adam.unwrap().step >= 2);
    }

    #[test]
    fn divergence_aborts_with_epoch_and_keeps_prior_checkpoints() {
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 1, data_dir.path(), 1).unwrap();
        let mut model = FusionModel::init(mini_model_cfg(Variant::FusedWeighted), 4).unwrap();
        let out_dir = tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 1,
            val_fraction: 0.0,
            adam: AdamConfig {
                lr: 1e200,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let err = train(&mut model, &manifest, &cfg, "mini".into(), out_dir.path(), None)
            .unwrap_err();
        match err {
            Error::Divergence { epoch, .. } => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn loss_decreases_after_one_step_for_fresh_models() {
        // sanity property, not a theorem: at lr = 1e-4, one step on a
        // batch lowers that batch's dropout-free loss in at least 19 of
        // 20 seeded trials
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 5, data_dir.path(), 1).unwrap();
        let samples: Vec<SampleInput> = manifest
            .records
            .iter()
            .take(4)
            .map(|r| load_sample_input(&manifest.root, r, None, false).unwrap())
            .collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut wins = 0;
        for seed in 0..20u64 {
            let mut model = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), seed).unwrap();
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let loss_now = |model: &mut FusionModel, rng: &mut Xoshiro256PlusPlus| -> f64 {
                let mut tape: Tape = Tape::new();
                let out = model
                    .forward_batch(&mut tape, &samples, Mode::GradCheck, rng, false)
                    .unwrap();
                let loss = cross_entropy_mean(&mut tape, out.logits, &labels).unwrap();
                tape.item(loss).unwrap()
            };
            let before = loss_now(&mut model, &mut rng);
            let mut tape: Tape = Tape::new();
            let out = model
                .forward_batch(&mut tape, &samples, Mode::GradCheck, &mut rng, false)
                .unwrap();
            let loss = cross_entropy_mean(&mut tape, out.logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            model.accumulate_grads(&tape);
            let mut adam = AdamState::new(AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            });
            adam.step(model.params_mut()).unwrap();
            model.zero_grads();
            let after = loss_now(&mut model, &mut rng);
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 19, "loss decreased in only {wins}/20 trials");
    }

    #[test]
    fn evaluate_empty_split_errors_and_metrics_recompute() {
        let data_dir = tempdir().unwrap();
        let manifest = generate_dataset(&mini_gen_cfg(), 2, data_dir.path(), 1).unwrap();
        let mut model = FusionModel::init(mini_model_cfg(Variant::LandmarksOnly), 6).unwrap();
        let report = evaluate(&mut model, &manifest, EvalSplit::Test).unwrap();
        // recompute metrics from dumped per-sample predictions
        let recount = MetricsReport::from_predictions(report.predictions.clone()).unwrap();
        assert_eq!(report.accuracy, recount.accuracy);
        assert_eq!(report.precision, recount.precision);
        assert_eq!(report.recall, recount.recall);
        assert_eq!(report.confusion, recount.confusion);
        // untrained landmarks-only model emits no alpha
        assert!(report.mean_alpha.is_none());
    }
}
