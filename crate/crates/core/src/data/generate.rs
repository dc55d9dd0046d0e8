//! Dataset synthesis, subject-independent splitting, and demographic
//! attachment. Everything derives from (config, seed) through per-subject
//! seed streams, so `--jobs N` parallelism cannot change a single byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::data::{
    derive_seed, format, template, DatasetManifest, DemographicsMode, GenConfig, LatentRange,
    SampleRecord, SplitTag, Subject, SubjectLatents,
};
use crate::error::{Error, Result};

fn draw(range: LatentRange, rng: &mut Xoshiro256PlusPlus) -> f64 {
    if range.max > range.min {
        rng.gen_range(range.min..range.max)
    } else {
        range.min
    }
}

/// Stream constant for a subject: class in the high bits, index below.
fn subject_stream(label: usize, idx: usize) -> u64 {
    0x5348_0000_0000_0000 | ((label as u64) << 32) | idx as u64
}

pub fn subject_roster(cfg: &GenConfig, seed: u64) -> Vec<Subject> {
    let mut subjects = Vec::with_capacity(2 * cfg.subjects_per_class);
    for label in 0..2usize {
        for idx in 0..cfg.subjects_per_class {
            let mut rng =
                Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, subject_stream(label, idx)));
            let latents = SubjectLatents {
                blink_interval_s: draw(cfg.interval_range(label), &mut rng),
                blink_duration_s: draw(cfg.duration_range(label), &mut rng),
                sway_amplitude: draw(cfg.sway_range(label), &mut rng),
                mouth_jitter: draw(cfg.jitter_range(label), &mut rng),
            };
            subjects.push(Subject {
                subject_id: format!("{}{:03}", if label == 0 { "s" } else { "i" }, idx),
                label,
                latents,
            });
        }
    }
    subjects
}

/// One subject's generated files, returned so workers can run in
/// parallel and the writer can stay ordered.
struct SubjectOutput {
    records: Vec<SampleRecord>,
}

fn generate_subject(cfg: &GenConfig, seed: u64, subject: &Subject, root: &Path) -> Result<SubjectOutput> {
    let mut records = Vec::with_capacity(cfg.shots_per_subject);
    let base = derive_seed(seed, subject_stream(subject.label, 0))
        ^ crc32fast::hash(subject.subject_id.as_bytes()) as u64;
    for shot_idx in 0..cfg.shots_per_subject {
        let sample_id = format!("{}_k{:02}", subject.subject_id, shot_idx);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(
            base,
            0x7368_6f74_0000_0000 | shot_idx as u64,
        ));
        let anim = template::animate_shot(
            &subject.latents,
            cfg.frames_per_shot,
            cfg.fps,
            &mut rng,
        );
        let clip = template::rasterize_clip(&sample_id, &anim.frames, cfg.clip_dims);
        let landmark_path = format!("landmarks/{sample_id}.lmk");
        let clip_path = format!("clips/{sample_id}.clp");
        format::write_landmarks(&root.join(&landmark_path), &anim.frames)?;
        format::write_clip(&root.join(&clip_path), &clip)?;
        records.push(SampleRecord {
            sample_id,
            subject_id: subject.subject_id.clone(),
            label: subject.label,
            split: SplitTag::Train,
            landmark_path,
            clip_path,
            demo_vector: None,
        });
    }
    Ok(SubjectOutput { records })
}

/// Generates the full dataset under `root`: landmark and clip files plus
/// `manifest.jsonl` and `gen_config.txt`. `jobs` parallelizes across
/// subjects; output bytes are identical for any job count.
pub fn generate_dataset(cfg: &GenConfig, seed: u64, root: &Path, jobs: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    let subjects = subject_roster(cfg, seed);
    let jobs = jobs.max(1);
    let mut outputs: Vec<Option<SubjectOutput>> = (0..subjects.len()).map(|_| None).collect();
    if jobs == 1 {
        for (i, s) in subjects.iter().enumerate() {
            outputs[i] = Some(generate_subject(cfg, seed, s, root)?);
        }
    } else {
        let results: Vec<(usize, Result<SubjectOutput>)> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in subjects
                .iter()
                .enumerate()
                .collect::<Vec<_>>()
                .chunks(subjects.len().div_ceil(jobs))
            {
                let chunk: Vec<(usize, &Subject)> = chunk.to_vec();
                handles.push(scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, s)| (i, generate_subject(cfg, seed, s, root)))
                        .collect::<Vec<_>>()
                }));
            }
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
        for (i, r) in results {
            outputs[i] = Some(r?);
        }
    }
    let mut records: Vec<SampleRecord> = outputs
        .into_iter()
        .flat_map(|o| o.expect("all subjects generated").records)
        .collect();
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut manifest = DatasetManifest {
        records,
        config: cfg.clone(),
        seed,
        root: root.to_path_buf(),
    };
    manifest = subject_split(manifest, cfg.train_fraction, seed)?;
    if cfg.demographics != DemographicsMode::None {
        manifest = attach_demographics(manifest, seed, cfg.demographics)?;
    }
    format::write_manifest(root, &manifest)?;
    Ok(manifest)
}

/// Partitions subjects (not samples) per class at `train_fraction`; every
/// sample of a subject shares its split. At least one subject per class
/// lands on each side.
pub fn subject_split(
    mut manifest: DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(seed, 0x73706c6974)); // "split"
    let mut assignment = std::collections::BTreeMap::new();
    for label in 0..2usize {
        let mut subjects: Vec<String> = Vec::new();
        for r in &manifest.records {
            if r.label == label && !subjects.contains(&r.subject_id) {
                subjects.push(r.subject_id.clone());
            }
        }
        if subjects.len() < 2 {
            return Err(Error::Config(format!(
                "class {label} has {} subjects; subject-independent splitting needs at least 2",
                subjects.len()
            )));
        }
        // Fisher-Yates with the split stream
        for i in (1..subjects.len()).rev() {
            let j = rng.gen_range(0..=i);
            subjects.swap(i, j);
        }
        let n = subjects.len();
        let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
        for (i, s) in subjects.into_iter().enumerate() {
            assignment.insert(
                s,
                if i < n_train {
                    SplitTag::Train
                } else {
                    SplitTag::Test
                },
            );
        }
    }
    for r in &mut manifest.records {
        r.split = *assignment
            .get(&r.subject_id)
            .expect("every subject assigned");
    }
    manifest.check_invariants()?;
    Ok(manifest)
}

/// FNV-1a digest over every file under `root` (sorted by path), used by
/// the synth command's checksum line and determinism checks. Not CRC32:
/// the data files carry their own CRC32 trailers, which makes a rolling
/// CRC over whole files land on the fixed residue regardless of content.
pub fn dataset_digest(root: &Path) -> Result<u64> {
    fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(root, &mut paths)?;
    paths.sort();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for p in paths {
        eat(p.file_name().expect("file has a name").to_string_lossy().as_bytes());
        eat(&std::fs::read(&p)?);
    }
    Ok(h)
}

/// Gives each subject a static 10-wide vector: age one-hot (2), gender
/// one-hot (2), race one-hot (6), constant across the subject's samples.
/// `Noise` draws independently of the label; `Informative` correlates the
/// age bucket with the label at 0.9.
pub fn attach_demographics(
    mut manifest: DatasetManifest,
    seed: u64,
    mode: DemographicsMode,
) -> Result<DatasetManifest> {
    if mode == DemographicsMode::None {
        for r in &mut manifest.records {
            r.demo_vector = None;
        }
        return Ok(manifest);
    }
    let mut per_subject: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for r in &manifest.records {
        if per_subject.contains_key(&r.subject_id) {
            continue;
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(derive_seed(
            seed ^ 0x64656d6f, // "demo"
            crc32fast::hash(r.subject_id.as_bytes()) as u64,
        ));
        let age = match mode {
            DemographicsMode::Informative => {
                if rng.gen::<f64>() < 0.9 {
                    r.label
                } else {
                    1 - r.label
                }
            }
            _ => rng.gen_range(0..2),
        };
        let gender = rng.gen_range(0..2usize);
        let race = rng.gen_range(0..6usize);
        let mut v = vec![0.0; 10];
        v[age] = 1.0;
        v[2 + gender] = 1.0;
        v[4 + race] = 1.0;
        per_subject.insert(r.subject_id.clone(), v);
    }
    for r in &mut manifest.records {
        r.demo_vector = per_subject.get(&r.subject_id).cloned();
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::format::read_manifest;
    use tempfile::tempdir;

    fn small_cfg() -> GenConfig {
        GenConfig {
            subjects_per_class: 3,
            shots_per_subject: 2,
            frames_per_shot: 8,
            clip_dims: [3, 4, 16, 16],
            ..GenConfig::default()
        }
    }

    fn dir_digest(root: &Path) -> u64 {
        dataset_digest(root).unwrap()
    }

    #[test]
    fn same_config_and_seed_give_byte_identical_datasets() {
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        generate_dataset(&small_cfg(), 7, d1.path(), 1).unwrap();
        generate_dataset(&small_cfg(), 7, d2.path(), 1).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
        let d3 = tempdir().unwrap();
        generate_dataset(&small_cfg(), 8, d3.path(), 1).unwrap();
        assert_ne!(dir_digest(d1.path()), dir_digest(d3.path()));
    }

    #[test]
    fn parallel_generation_matches_serial_bytes() {
        let (d1, d2) = (tempdir().unwrap(), tempdir().unwrap());
        generate_dataset(&small_cfg(), 11, d1.path(), 1).unwrap();
        generate_dataset(&small_cfg(), 11, d2.path(), 3).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn sample_counts_match_configuration() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.subjects_per_class = 10;
        cfg.shots_per_subject = 4;
        let m = generate_dataset(&cfg, 1, dir.path(), 2).unwrap();
        assert_eq!(m.records.len(), 80);
        let pos = m.records.iter().filter(|r| r.label == 1).count();
        assert_eq!(pos, 40);
        m.check_invariants().unwrap();
    }

    #[test]
    fn split_is_subject_disjoint_and_seeded() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.subjects_per_class = 10;
        let m = generate_dataset(&cfg, 5, dir.path(), 1).unwrap();
        // 10 subjects/class at 0.8 -> 8 train + 2 test per class
        for label in 0..2 {
            let train: std::collections::BTreeSet<_> = m
                .records
                .iter()
                .filter(|r| r.label == label && r.split == SplitTag::Train)
                .map(|r| r.subject_id.clone())
                .collect();
            let test: std::collections::BTreeSet<_> = m
                .records
                .iter()
                .filter(|r| r.label == label && r.split == SplitTag::Test)
                .map(|r| r.subject_id.clone())
                .collect();
            assert_eq!(train.len(), 8);
            assert_eq!(test.len(), 2);
            assert!(train.is_disjoint(&test));
        }
        // re-split with the same seed reproduces the assignment
        let m2 = subject_split(m.clone(), 0.8, 5).unwrap();
        for (a, b) in m.records.iter().zip(&m2.records) {
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn three_subjects_per_class_still_split_disjointly() {
        let dir = tempdir().unwrap();
        let m = generate_dataset(&small_cfg(), 3, dir.path(), 1).unwrap();
        // floor(0.8*3) = 2 train, 1 test per class
        for label in 0..2 {
            let subjects: Vec<_> = m
                .records
                .iter()
                .filter(|r| r.label == label && r.split == SplitTag::Test)
                .map(|r| &r.subject_id)
                .collect();
            let unique: std::collections::BTreeSet<_> = subjects.iter().collect();
            assert_eq!(unique.len(), 1);
        }
        m.check_invariants().unwrap();
    }

    #[test]
    fn demographics_are_one_hot_and_subject_constant() {
        let dir = tempdir().unwrap();
        let m = generate_dataset(&small_cfg(), 9, dir.path(), 1).unwrap();
        let mut by_subject: std::collections::BTreeMap<&str, &Vec<f64>> = Default::default();
        for r in &m.records {
            let v = r.demo_vector.as_ref().expect("demographics attached");
            assert_eq!(v.len(), 10);
            assert_eq!(v[0..2].iter().sum::<f64>(), 1.0);
            assert_eq!(v[2..4].iter().sum::<f64>(), 1.0);
            assert_eq!(v[4..10].iter().sum::<f64>(), 1.0);
            if let Some(prev) = by_subject.get(r.subject_id.as_str()) {
                assert_eq!(*prev, v);
            } else {
                by_subject.insert(&r.subject_id, v);
            }
        }
    }

    #[test]
    fn blink_frames_depress_ear_on_generated_data() {
        use crate::graph::{compute_ear, Eye};
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.frames_per_shot = 24;
        let m = generate_dataset(&cfg, 13, dir.path(), 1).unwrap();
        // on intoxicated subjects the blink occupies a large frame span:
        // min EAR should sit well below max EAR in nearly every shot
        let mut checked = 0;
        for r in m.records.iter().filter(|r| r.label == 1) {
            let shot =
                format::read_landmarks(&m.root.join(&r.landmark_path), &r.sample_id).unwrap();
            let ears: Vec<f64> = shot
                .frames
                .iter()
                .map(|f| {
                    (compute_ear(f, Eye::Right).unwrap() + compute_ear(f, Eye::Left).unwrap())
                        / 2.0
                })
                .collect();
            let min = ears.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = ears.iter().cloned().fold(0.0f64, f64::max);
            if min < 0.5 * max {
                checked += 1;
            }
        }
        assert!(checked >= 4, "only {checked} shots show a blink dip");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let m = generate_dataset(&small_cfg(), 21, dir.path(), 1).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.config, m.config);
        assert_eq!(back.seed, 21);
    }

    #[test]
    fn load_sample_input_produces_normalized_frames() {
        let dir = tempdir().unwrap();
        let m = generate_dataset(&small_cfg(), 2, dir.path(), 1).unwrap();
        let rec = &m.records[0];
        let sample =
            crate::data::load_sample_input(&m.root, rec, Some(crate::model::AuxKind::Ear), true)
                .unwrap();
        assert_eq!(sample.shots.len(), 1);
        assert_eq!(sample.shots[0].frames.len(), 8);
        assert_eq!(sample.aux.as_ref().unwrap().len(), 2);
        // normalized: inter-ocular distance 1
        let f = &sample.shots[0].frames[0];
        let re: [f64; 2] = {
            let pts: Vec<[f64; 2]> = (36..=41).map(|i| f.coords[i]).collect();
            [
                pts.iter().map(|p| p[0]).sum::<f64>() / 6.0,
                pts.iter().map(|p| p[1]).sum::<f64>() / 6.0,
            ]
        };
        let le: [f64; 2] = {
            let pts: Vec<[f64; 2]> = (42..=47).map(|i| f.coords[i]).collect();
            [
                pts.iter().map(|p| p[0]).sum::<f64>() / 6.0,
                pts.iter().map(|p| p[1]).sum::<f64>() / 6.0,
            ]
        };
        let d = ((re[0] - le[0]).powi(2) + (re[1] - le[1]).powi(2)).sqrt();
        assert!((d - 1.0).abs() < 1e-9);
    }
}
