//! Ablation matrix runner: trains and evaluates model variants on the
//! same dataset with a shared seed protocol and emits a comparison table.
//!
//! A variant spec is a '+'-joined token list: a base variant
//! (fused_weighted | fused_concat | landmarks_only | visual_only,
//! defaulting to fused_weighted when omitted), optional aux features
//! (ear | mar | demographics) and an optional activation override
//! (act=relu | act=swish | act=leaky_relu). Examples: "landmarks_only",
//! "+ear", "landmarks_only+mar", "act=swish".

use std::path::Path;

use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{AuxKind, FusionModel, ModelConfig, Variant};
use crate::nn::ActivationKind;
use crate::train::{evaluate, train, EvalSplit, TrainConfig};

pub const VALID_VARIANTS: &str =
    "fused_weighted | fused_concat | landmarks_only | visual_only | +ear | +mar | +demographics | act=relu|swish|leaky_relu (combinable with '+')";

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub variant: Variant,
    pub aux: Option<AuxKind>,
    pub activation: Option<ActivationKind>,
}

pub fn parse_variant_spec(s: &str) -> Result<VariantSpec> {
    let mut variant = None;
    let mut aux = None;
    let mut activation = None;
    let unknown = |tok: &str| Error::UnknownVariant {
        found: tok.to_string(),
        valid: VALID_VARIANTS.to_string(),
    };
    for tok in s.split('+') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        if let Some(act) = tok.strip_prefix("act=") {
            if activation.replace(ActivationKind::parse(act).map_err(|_| unknown(tok))?).is_some() {
                return Err(unknown(tok));
            }
        } else if let Ok(kind) = AuxKind::parse(tok) {
            if aux.replace(kind).is_some() {
                return Err(unknown(tok));
            }
        } else if let Ok(v) = Variant::parse(tok) {
            if variant.replace(v).is_some() {
                return Err(unknown(tok));
            }
        } else {
            return Err(unknown(tok));
        }
    }
    if variant.is_none() && aux.is_none() && activation.is_none() {
        return Err(unknown(s));
    }
    Ok(VariantSpec {
        name: s.trim().to_string(),
        variant: variant.unwrap_or(Variant::FusedWeighted),
        aux,
        activation,
    })
}

impl VariantSpec {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.variant = self.variant;
        cfg.aux = self.aux;
        if let Some(act) = self.activation {
            cfg.activation = act;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_alpha: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantMedian {
    pub variant: String,
    pub median_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub medians: Vec<VariantMedian>,
}

/// Trains one variant with the given seed (model init, shuffling and data
/// splits all derive from it) and evaluates the best-by-validation
/// checkpoint on the test split.
pub fn ablation_run(
    manifest: &DatasetManifest,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    spec: &VariantSpec,
    seed: u64,
    workdir: &Path,
) -> Result<AblationRow> {
    let model_cfg = spec.apply(base_model);
    let mut model = FusionModel::init(model_cfg.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let run_dir = workdir.join(format!("{}_s{seed}", spec.name.replace(['+', '='], "_")));
    let outcome = train(
        &mut model,
        manifest,
        &cfg,
        format!("ablation variant = {}\nseed = {seed}\n", spec.name),
        &run_dir,
        None,
    )?;
    let ckpt = load_checkpoint(&outcome.best_path)?;
    let mut best_model = FusionModel::init(model_cfg, seed)?;
    ckpt.restore_into(&mut best_model)?;
    let report = evaluate(&mut best_model, manifest, EvalSplit::Test)?;
    Ok(AblationRow {
        variant: spec.name.clone(),
        seed,
        accuracy: report.accuracy,
        precision: report.precision,
        recall: report.recall,
        mean_alpha: report.mean_alpha,
    })
}

fn median(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    }
}

/// Runs every variant × seed combination and aggregates per-variant
/// median accuracy.
pub fn run_ablations(
    manifest: &DatasetManifest,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    specs: &[VariantSpec],
    seeds: &[u64],
    workdir: &Path,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if specs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for spec in specs {
        for &seed in seeds {
            let row = ablation_run(manifest, base_model, train_cfg, spec, seed, workdir)?;
            progress(&row);
            rows.push(row);
        }
    }
    let mut medians = Vec::new();
    for spec in specs {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == spec.name)
            .map(|r| r.accuracy)
            .collect();
        medians.push(VariantMedian {
            variant: spec.name.clone(),
            median_accuracy: median(accs),
        });
    }
    Ok(AblationTable { rows, medians })
}

/// Fixed-width text rendering of the table.
pub fn render_table(table: &AblationTable) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<28} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
        "variant", "seed", "accuracy", "precision", "recall", "mean_alpha"
    ));
    for r in &table.rows {
        let alpha = r
            .mean_alpha
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<28} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10}\n",
            r.variant, r.seed, r.accuracy, r.precision, r.recall, alpha
        ));
    }
    s.push('\n');
    for m in &table.medians {
        s.push_str(&format!(
            "{:<28} median accuracy {:.4}\n",
            m.variant, m.median_accuracy
        ));
    }
    s
}
