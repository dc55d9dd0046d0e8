//! On-disk formats. All binary files are little-endian with a 4-byte
//! magic up front and a CRC32 (IEEE) of every preceding byte appended.
//!
//! Landmark file: "LMK1" | u32 frame count | frames as 68x2 f32 | crc32.
//! Clip file:     "CLP1" | u32 C,T,H,W | C*T*H*W f32 row-major | crc32.
//! Manifest:      JSON lines, one sample record per line.
//! Generator config: `key = value` lines, '#' comments, unknown keys
//! rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{
    DatasetManifest, DemographicsMode, GenConfig, LatentRange, SampleRecord,
};
use crate::error::{Error, Result};
use crate::graph::{LandmarkFrame, LandmarkShot, LANDMARK_COUNT};
use crate::visual::Clip;

pub const LANDMARK_MAGIC: &[u8; 4] = b"LMK1";
pub const CLIP_MAGIC: &[u8; 4] = b"CLP1";

fn crc(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(bytes);
    h.finalize()
}

/// Appends the CRC of everything written so far and writes the file.
fn write_with_crc(path: &Path, mut bytes: Vec<u8>) -> Result<()> {
    let checksum = crc(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a file, validates magic and trailing CRC, and returns the body
/// bytes between them.
fn read_with_crc<'a>(path: &Path, magic: &[u8; 4], buf: &'a mut Vec<u8>) -> Result<&'a [u8]> {
    *buf = fs::read(path)?;
    let p = path.display().to_string();
    if buf.len() < 8 {
        return Err(Error::Truncated {
            path: p,
            detail: format!("{} bytes is too short for magic and checksum", buf.len()),
        });
    }
    if &buf[..4] != magic {
        return Err(Error::BadMagic {
            path: p,
            expected: String::from_utf8_lossy(magic).to_string(),
        });
    }
    let body_end = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let computed = crc(&buf[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch {
            path: p,
            stored,
            computed,
        });
    }
    Ok(&buf[4..body_end])
}

pub fn write_landmarks(path: &Path, frames: &[LandmarkFrame]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + frames.len() * LANDMARK_COUNT * 8);
    bytes.extend_from_slice(LANDMARK_MAGIC);
    bytes.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        for p in &f.coords {
            bytes.extend_from_slice(&(p[0] as f32).to_le_bytes());
            bytes.extend_from_slice(&(p[1] as f32).to_le_bytes());
        }
    }
    write_with_crc(path, bytes)
}

pub fn read_landmarks(path: &Path, shot_id: &str) -> Result<LandmarkShot> {
    let mut buf = Vec::new();
    let body = read_with_crc(path, LANDMARK_MAGIC, &mut buf)?;
    let p = path.display().to_string();
    if body.len() < 4 {
        return Err(Error::Truncated {
            path: p,
            detail: "missing frame count".into(),
        });
    }
    let count = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
    let payload = &body[4..];
    let frame_bytes = LANDMARK_COUNT * 2 * 4;
    if payload.len() != count * frame_bytes {
        return Err(Error::MalformedHeader {
            path: p,
            detail: format!(
                "declared {count} frames need {} payload bytes, found {}",
                count * frame_bytes,
                payload.len()
            ),
        });
    }
    let mut frames = Vec::with_capacity(count);
    for fi in 0..count {
        let base = fi * frame_bytes;
        let coords: Vec<[f64; 2]> = (0..LANDMARK_COUNT)
            .map(|ni| {
                let off = base + ni * 8;
                let x = f32::from_le_bytes(payload[off..off + 4].try_into().expect("4 bytes"));
                let y = f32::from_le_bytes(payload[off + 4..off + 8].try_into().expect("4 bytes"));
                [x as f64, y as f64]
            })
            .collect();
        frames.push(LandmarkFrame::new(coords)?);
    }
    LandmarkShot::new(shot_id.to_string(), frames)
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    let mut bytes = Vec::with_capacity(20 + clip.voxels.len() * 4);
    bytes.extend_from_slice(CLIP_MAGIC);
    for d in clip.dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &clip.voxels {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_with_crc(path, bytes)
}

pub fn read_clip(path: &Path, shot_id: &str) -> Result<Clip> {
    let mut buf = Vec::new();
    let body = read_with_crc(path, CLIP_MAGIC, &mut buf)?;
    let p = path.display().to_string();
    if body.len() < 16 {
        return Err(Error::Truncated {
            path: p,
            detail: "missing clip extents".into(),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(body[i * 4..(i + 1) * 4].try_into().expect("4 bytes")) as usize;
    }
    let payload = &body[16..];
    let expect: usize = dims.iter().product::<usize>() * 4;
    if payload.len() != expect {
        return Err(Error::MalformedHeader {
            path: p,
            detail: format!(
                "extents {dims:?} need {expect} payload bytes, found {}",
                payload.len()
            ),
        });
    }
    let voxels: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Clip::new(shot_id.to_string(), dims, voxels)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut lines = String::new();
    for r in &manifest.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), lines)?;
    fs::write(
        dir.join("gen_config.txt"),
        gen_config_to_kv(&manifest.config, manifest.seed),
    )?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .ok_or_else(|| Error::Config(format!("manifest path {} has no parent", manifest_path.display())))?
        .to_path_buf();
    let text = fs::read_to_string(&manifest_path)?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| Error::MalformedHeader {
            path: manifest_path.display().to_string(),
            detail: format!("line {}: {e}", ln + 1),
        })?;
        records.push(rec);
    }
    let (config, seed) = parse_gen_config(&fs::read_to_string(root.join("gen_config.txt"))?)?;
    Ok(DatasetManifest {
        records,
        config,
        seed,
        root,
    })
}

/// Serializes the generator config (plus the seed) as key = value lines.
pub fn gen_config_to_kv(cfg: &GenConfig, seed: u64) -> String {
    let mut s = String::from("# synthetic dataset generator configuration\n");
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("seed", seed.to_string());
    kv("subjects_per_class", cfg.subjects_per_class.to_string());
    kv("shots_per_subject", cfg.shots_per_subject.to_string());
    kv("frames_per_shot", cfg.frames_per_shot.to_string());
    kv("fps", cfg.fps.to_string());
    kv("clip_channels", cfg.clip_dims[0].to_string());
    kv("clip_t", cfg.clip_dims[1].to_string());
    kv("clip_h", cfg.clip_dims[2].to_string());
    kv("clip_w", cfg.clip_dims[3].to_string());
    kv("train_fraction", cfg.train_fraction.to_string());
    for (name, r) in [
        ("sober_blink_interval", cfg.sober_blink_interval),
        ("intox_blink_interval", cfg.intox_blink_interval),
        ("sober_blink_duration", cfg.sober_blink_duration),
        ("intox_blink_duration", cfg.intox_blink_duration),
        ("sober_sway", cfg.sober_sway),
        ("intox_sway", cfg.intox_sway),
        ("sober_jitter", cfg.sober_jitter),
        ("intox_jitter", cfg.intox_jitter),
    ] {
        kv(&format!("{name}_min"), r.min.to_string());
        kv(&format!("{name}_max"), r.max.to_string());
    }
    kv("demographics", cfg.demographics.name().to_string());
    s
}

/// Parses key = value text into a generator config and seed; unknown
/// keys are rejected.
pub fn parse_gen_config(text: &str) -> Result<(GenConfig, u64)> {
    let mut cfg = GenConfig::default();
    let mut seed = 0u64;
    for (pairs_ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("gen config line {}: missing '='", pairs_ln + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        apply_gen_key(&mut cfg, &mut seed, k, v)?;
    }
    cfg.validate()?;
    Ok((cfg, seed))
}

pub fn apply_gen_key(cfg: &mut GenConfig, seed: &mut u64, k: &str, v: &str) -> Result<()> {
    let parse_u = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Config(format!("bad integer {v:?} for {k}")))
    };
    let parse_f = |v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| Error::Config(format!("bad number {v:?} for {k}")))
    };
    let set_range = |r: &mut LatentRange, is_min: bool, v: f64| {
        if is_min {
            r.min = v;
        } else {
            r.max = v;
        }
    };
    match k {
        "seed" => {
            *seed = v
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {v:?}")))?
        }
        "subjects_per_class" => cfg.subjects_per_class = parse_u(v)?,
        "shots_per_subject" => cfg.shots_per_subject = parse_u(v)?,
        "frames_per_shot" => cfg.frames_per_shot = parse_u(v)?,
        "fps" => cfg.fps = parse_f(v)?,
        "clip_channels" => cfg.clip_dims[0] = parse_u(v)?,
        "clip_t" => cfg.clip_dims[1] = parse_u(v)?,
        "clip_h" => cfg.clip_dims[2] = parse_u(v)?,
        "clip_w" => cfg.clip_dims[3] = parse_u(v)?,
        "train_fraction" => cfg.train_fraction = parse_f(v)?,
        "demographics" => cfg.demographics = DemographicsMode::parse(v)?,
        _ => {
            let (base, is_min) = if let Some(b) = k.strip_suffix("_min") {
                (b, true)
            } else if let Some(b) = k.strip_suffix("_max") {
                (b, false)
            } else {
                return Err(Error::Config(format!("unknown generator config key {k:?}")));
            };
            let val = parse_f(v)?;
            let range = match base {
                "sober_blink_interval" => &mut cfg.sober_blink_interval,
                "intox_blink_interval" => &mut cfg.intox_blink_interval,
                "sober_blink_duration" => &mut cfg.sober_blink_duration,
                "intox_blink_duration" => &mut cfg.intox_blink_duration,
                "sober_sway" => &mut cfg.sober_sway,
                "intox_sway" => &mut cfg.intox_sway,
                "sober_jitter" => &mut cfg.sober_jitter,
                "intox_jitter" => &mut cfg.intox_jitter,
                _ => return Err(Error::Config(format!("unknown generator config key {k:?}"))),
            };
            set_range(range, is_min, val);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use tempfile::tempdir;

    fn random_frames(n: usize, seed: u64) -> Vec<LandmarkFrame> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                LandmarkFrame::new(
                    (0..LANDMARK_COUNT)
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn landmark_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.lmk");
        let frames = random_frames(5, 1);
        write_landmarks(&path, &frames).unwrap();
        let shot = read_landmarks(&path, "a").unwrap();
        assert_eq!(shot.frames.len(), 5);
        for (orig, back) in frames.iter().zip(&shot.frames) {
            for (p, q) in orig.coords.iter().zip(&back.coords) {
                // f32 storage: round-trip through f32 exactly
                assert_eq!(p[0] as f32, q[0] as f32);
                assert_eq!(q[0], q[0] as f32 as f64);
                assert_eq!(p[1] as f32, q[1] as f32);
            }
        }
    }

    #[test]
    fn clip_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.clp");
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let dims = [3usize, 2, 4, 4];
        let voxels: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| (rng.gen_range(0.0..1.0f64) as f32) as f64)
            .collect();
        let clip = Clip::new("c".into(), dims, voxels.clone()).unwrap();
        write_clip(&path, &clip).unwrap();
        let back = read_clip(&path, "c").unwrap();
        assert_eq!(back.dims, dims);
        assert_eq!(back.voxels, voxels);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.lmk");
        write_landmarks(&path, &random_frames(2, 3)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_landmarks(&path, "bad"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn corrupted_payload_is_a_checksum_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.clp");
        let clip = Clip::new("c".into(), [3, 1, 2, 2], vec![0.5; 12]).unwrap();
        write_clip(&path, &clip).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_clip(&path, "c"),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn truncated_file_is_a_truncation_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("short.lmk");
        std::fs::write(&path, b"LMK").unwrap();
        assert!(matches!(
            read_landmarks(&path, "s"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn header_payload_mismatch_is_malformed_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lying.lmk");
        // declare 3 frames but store 1
        let mut bytes = Vec::new();
        bytes.extend_from_slice(LANDMARK_MAGIC);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, LANDMARK_COUNT * 8));
        let checksum = crc(&bytes);
        bytes.extend_from_slice(&checksum.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_landmarks(&path, "l"),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn gen_config_kv_round_trip_and_unknown_key() {
        let cfg = GenConfig::default();
        let text = gen_config_to_kv(&cfg, 99);
        let (back, seed) = parse_gen_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(seed, 99);
        assert!(matches!(
            parse_gen_config("bogus_key = 3\n"),
            Err(Error::Config(_))
        ));
    }
}
