//! shotfuse: synthesize a seeded dataset, train the dual-branch fusion
//! classifier, evaluate it, run the ablation matrix, and explain
//! predictions.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error,
//! 4 training divergence, 5 checkpoint/file-format mismatch,
//! 6 unknown sample id, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shotfuse::ablate::{parse_variant_spec, render_table, run_ablations};
use shotfuse::checkpoint::load_checkpoint;
use shotfuse::config::RunConfig;
use shotfuse::data::format::read_manifest;
use shotfuse::data::generate::{dataset_digest, generate_dataset};
use shotfuse::data::{load_sample_input, SplitTag};
use shotfuse::error::Error;
use shotfuse::interpret::{export_activation_pgms, grad_cam3d, landmark_saliency};
use shotfuse::model::FusionModel;
use shotfuse::train::{evaluate, predict_one, train, EvalSplit};

#[derive(Parser)]
#[command(name = "shotfuse", version, about = "dual-branch recurrent-fusion video classifier")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Master seed; every derived RNG stream hangs off it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (data synthesis only; everything else is
    /// single-threaded for determinism).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Dimension profile: desk (default) or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (landmarks, clips, manifest).
    Synth {
        #[arg(long)]
        subjects_per_class: Option<usize>,
        #[arg(long)]
        shots_per_subject: Option<usize>,
        /// Parallel workers for generation; output bytes are identical
        /// for any value.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train on a manifest; writes per-epoch checkpoints, best.ckpt and
    /// train_metrics.json.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Model variant (fused_weighted | fused_concat | landmarks_only
        /// | visual_only), optionally +ear/+mar/+demographics/act=...
        #[arg(long)]
        variant: Option<String>,
        /// Continue from a checkpoint, bit-exactly.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split; prints metrics and writes
    /// metrics.json when --out is given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate a variant x seed matrix; emits JSON and an
    /// aligned text table.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated variant specs.
        #[arg(long)]
        variants: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Gradient-based explanations for one sample.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        sample_id: String,
        /// saliency (landmark scores) or cam (activation heatmaps).
        #[arg(long, default_value = "saliency")]
        mode: String,
        /// Defaults to the model's predicted class.
        #[arg(long)]
        target_class: Option<usize>,
    },
    /// Print the header of a checkpoint, manifest, or data file.
    Inspect {
        #[arg(long)]
        path: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownVariant { .. } | Error::Contract(_) => 2,
        Error::Io(_) => 3,
        Error::Divergence { .. } => 4,
        Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::ChecksumMismatch { .. }
        | Error::MalformedHeader { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Json(_) => 5,
        Error::UnknownSample(_) => 6,
        _ => 1,
    }
}

/// Builds the run config: defaults, then the config file, then flags
/// (flags win; overrides of file-set keys are logged).
fn build_config(cli: &Cli, extra_flags: &[(&str, String)]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    let mut file_keys: Vec<String> = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if let Some((k, _)) = line.split_once('=') {
                file_keys.push(k.trim().to_string());
            }
        }
        cfg.apply_text(&text)?;
    }
    let mut flag_pairs: Vec<(&str, String)> = Vec::new();
    if let Some(p) = &cli.profile {
        flag_pairs.push(("profile", p.clone()));
    }
    if let Some(s) = cli.seed {
        flag_pairs.push(("seed", s.to_string()));
    }
    flag_pairs.extend(extra_flags.iter().cloned());
    for (k, v) in &flag_pairs {
        if file_keys.iter().any(|fk| fk == k) {
            eprintln!("note: flag --{k} overrides config-file value");
        }
        cfg.apply_key(k, v)?;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.gen.validate()?;
    Ok(cfg)
}

fn require_out(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Synth {
            subjects_per_class,
            shots_per_subject,
            jobs,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = subjects_per_class {
                extra.push(("subjects_per_class", n.to_string()));
            }
            if let Some(n) = shots_per_subject {
                extra.push(("shots_per_subject", n.to_string()));
            }
            let cfg = build_config(&cli, &extra)?;
            let out = require_out(&cli)?;
            let workers = jobs.unwrap_or(cli.threads).max(1);
            let manifest = generate_dataset(&cfg.gen, cfg.seed, &out, workers)?;
            manifest.check_invariants()?;
            let digest = dataset_digest(&out)?;
            let count = |split: SplitTag, label: usize| {
                manifest
                    .records
                    .iter()
                    .filter(|r| r.split == split && r.label == label)
                    .count()
            };
            println!("dataset written to {}", out.display());
            println!(
                "samples: {} total | train: {} sober + {} intoxicated | test: {} sober + {} intoxicated",
                manifest.records.len(),
                count(SplitTag::Train, 0),
                count(SplitTag::Train, 1),
                count(SplitTag::Test, 0),
                count(SplitTag::Test, 1),
            );
            println!("subjects: {} per class", cfg.gen.subjects_per_class);
            println!("checksum: {digest:016x}");
            Ok(())
        }
        Cmd::Train {
            manifest,
            epochs,
            batch_size,
            variant,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(("epochs", e.to_string()));
            }
            if let Some(b) = batch_size {
                extra.push(("batch_size", b.to_string()));
            }
            if let Some(v) = variant {
                // variant specs can carry aux/activation riders
                let spec = parse_variant_spec(v)?;
                extra.push(("variant", spec.variant.name().to_string()));
                extra.push((
                    "aux",
                    spec.aux.map(|a| a.name().to_string()).unwrap_or_else(|| "none".into()),
                ));
                if let Some(act) = spec.activation {
                    extra.push(("activation", act.name().to_string()));
                }
            }
            let out = require_out(&cli)?;
            let manifest = read_manifest(manifest)?;
            let (cfg, resume_ckpt) = match resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    let mut cfg = RunConfig::parse(&ckpt.config_text)?;
                    for (k, v) in &extra {
                        cfg.apply_key(k, v)?;
                    }
                    if let Some(s) = cli.seed {
                        cfg.apply_key("seed", &s.to_string())?;
                    }
                    (cfg, Some(ckpt))
                }
                None => (build_config(&cli, &extra)?, None),
            };
            let mut model = FusionModel::init(cfg.model.clone(), cfg.seed)?;
            let outcome = train(
                &mut model,
                &manifest,
                &cfg.train,
                cfg.to_kv(),
                &out,
                resume_ckpt.as_ref(),
            )?;
            let report = serde_json::json!({
                "history": outcome.history,
                "best_epoch": outcome.best.map(|(e, _)| e),
                "best_val_accuracy": outcome.best.map(|(_, a)| a),
                "epochs_run": outcome.epochs_run,
                "best_checkpoint": outcome.best_path.display().to_string(),
                "last_checkpoint": outcome.last_path.display().to_string(),
            });
            std::fs::write(
                out.join("train_metrics.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} epochs | train acc {:.4} | val acc {:.4}",
                    outcome.history.len(),
                    last.train_accuracy,
                    last.val_accuracy
                );
            }
            if let Some((e, a)) = outcome.best {
                println!("best epoch {e} (val acc {a:.4}) -> {}", outcome.best_path.display());
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let split = EvalSplit::parse(split)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let cfg = RunConfig::parse(&ckpt.config_text)?;
            let mut model = FusionModel::init(cfg.model.clone(), cfg.seed)?;
            ckpt.restore_into(&mut model)?;
            let manifest = read_manifest(manifest)?;
            let report = evaluate(&mut model, &manifest, split)?;
            println!(
                "accuracy {:.4} | precision {:.4} | recall {:.4}",
                report.accuracy, report.precision, report.recall
            );
            println!(
                "confusion: TP {} TN {} FP {} FN {}",
                report.confusion.true_pos,
                report.confusion.true_neg,
                report.confusion.false_pos,
                report.confusion.false_neg
            );
            match report.mean_alpha {
                Some(a) => println!("mean fusion weight alpha: {a:.4}"),
                None => println!("mean fusion weight alpha: n/a (no gate in this variant)"),
            }
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                let path = out.join("metrics.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("metrics written to {}", path.display());
            }
            Ok(())
        }
        Cmd::Ablate {
            manifest,
            variants,
            seeds,
            epochs,
        } => {
            let mut extra = Vec::new();
            if let Some(e) = epochs {
                extra.push(("epochs", e.to_string()));
            }
            let cfg = build_config(&cli, &extra)?;
            let out = require_out(&cli)?;
            std::fs::create_dir_all(&out)?;
            let manifest = read_manifest(manifest)?;
            let specs = variants
                .split(',')
                .map(|v| parse_variant_spec(v.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            let seed_list = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("bad seed {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let table = run_ablations(
                &manifest,
                &cfg.model,
                &cfg.train,
                &specs,
                &seed_list,
                &out,
                |row| {
                    println!(
                        "done: {} seed {} -> accuracy {:.4}",
                        row.variant, row.seed, row.accuracy
                    );
                },
            )?;
            let text = render_table(&table);
            print!("{text}");
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
            std::fs::write(out.join("ablation.txt"), text)?;
            Ok(())
        }
        Cmd::Explain {
            checkpoint,
            manifest,
            sample_id,
            mode,
            target_class,
        } => {
            let out = require_out(&cli)?;
            std::fs::create_dir_all(&out)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let cfg = RunConfig::parse(&ckpt.config_text)?;
            let mut model = FusionModel::init(cfg.model.clone(), cfg.seed)?;
            ckpt.restore_into(&mut model)?;
            let manifest = read_manifest(manifest)?;
            let record = manifest.find(sample_id)?.clone();
            let sample = load_sample_input(
                &manifest.root,
                &record,
                model.config.aux,
                model.config.variant.uses_clips(),
            )?;
            let target = match target_class {
                Some(t) => *t,
                None => predict_one(&mut model, &sample)?,
            };
            match mode.as_str() {
                "saliency" => {
                    let report = landmark_saliency(&mut model, &sample, target)?;
                    let path = out.join(format!("saliency_{sample_id}.json"));
                    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                    println!(
                        "saliency for {sample_id} (class {target}): 68 scores, max-normalized{}",
                        if report.all_zero { " [all-zero]" } else { "" }
                    );
                    for r in &report.regions {
                        println!("  {:<12} {:.4}", r.name, r.score);
                    }
                    println!("written to {}", path.display());
                }
                "cam" => {
                    let cam = grad_cam3d(&mut model, &sample, target)?;
                    let paths = export_activation_pgms(&out, &format!("cam_{sample_id}"), &cam)?;
                    println!(
                        "activation map for {sample_id} (class {target}): {} frames of {}x{}",
                        paths.len(),
                        cam.upsampled_dims[2],
                        cam.upsampled_dims[1]
                    );
                    println!("written to {}", out.display());
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown explain mode {other:?} (saliency|cam)"
                    )))
                }
            }
            Ok(())
        }
        Cmd::Inspect { path } => inspect(path),
    }
}

fn inspect(path: &Path) -> Result<(), Error> {
    if path.is_dir() || path.extension().is_some_and(|e| e == "jsonl") {
        let m = read_manifest(path)?;
        println!("manifest: {} records, seed {}", m.records.len(), m.seed);
        for split in [SplitTag::Train, SplitTag::Test] {
            let recs = m.records_in(split);
            let pos = recs.iter().filter(|r| r.label == 1).count();
            println!(
                "  {:?}: {} samples ({} intoxicated, {} sober), {} subjects",
                split,
                recs.len(),
                pos,
                recs.len() - pos,
                m.subjects_in(split).len()
            );
        }
        println!(
            "  clip dims {:?}, {} frames/shot at {} fps",
            m.config.clip_dims, m.config.frames_per_shot, m.config.fps
        );
        return Ok(());
    }
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        f.read_exact(&mut magic)?;
    }
    match &magic {
        b"CKP1" => {
            let ckpt = load_checkpoint(path)?;
            println!("checkpoint: version 1, crc ok");
            println!("  epochs done: {}", ckpt.epochs_done);
            if let Some((e, a)) = ckpt.best {
                println!("  best epoch: {e} (val acc {a:.4})");
            }
            let n_values: usize = ckpt.params.iter().map(|(_, t)| t.numel()).sum();
            println!("  parameters: {} tensors, {} values", ckpt.params.len(), n_values);
            if let Some(adam) = &ckpt.adam {
                println!("  optimizer: adam, step {}", adam.step);
            }
            for line in ckpt.config_text.lines().take(6) {
                println!("  config: {line}");
            }
        }
        b"LMK1" => {
            let shot = shotfuse::data::format::read_landmarks(path, "inspect")?;
            println!("landmark file: {} frames of 68 points, crc ok", shot.frames.len());
        }
        b"CLP1" => {
            let clip = shotfuse::data::format::read_clip(path, "inspect")?;
            println!("clip file: dims {:?}, crc ok", clip.dims);
        }
        other => {
            return Err(Error::BadMagic {
                path: path.display().to_string(),
                expected: format!("CKP1|LMK1|CLP1, found {:?}", String::from_utf8_lossy(other)),
            })
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
