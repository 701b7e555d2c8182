//! Dataset directory: `manifest.json`, binary PGM images, raw depth files
//! and a correspondence text file per split, all checksummed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ConditionTransform, DatasetConfig, DepthMap, Frame, RelocCandidate, Split, Surface, SyntheticScene};
use super::Dataset;
use crate::geometry::SE3Pose;
use crate::image::GrayImage;
use crate::losses::{CorrespondenceBatch, PixelPair};

pub const DATASET_MAGIC: &str = "gnnet-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("version mismatch: {0}")]
    Version(String),
    #[error("{path}: truncated ({found} bytes, expected {expected})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct FileRef {
    path: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    id: usize,
    scene: usize,
    index: usize,
    condition: usize,
    pose: [f64; 16],
    image: FileRef,
    depth: FileRef,
}

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    candidate: usize,
    reference: usize,
    gt_relative: [f64; 16],
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    surface: Surface,
    conditions: Vec<ConditionTransform>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    name: String,
    seed: u64,
    scenes: Vec<SceneRecord>,
    frames: Vec<FrameRecord>,
    candidates: Vec<CandidateRecord>,
    correspondences: FileRef,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    format_version: u32,
    generator: String,
    config: DatasetConfig,
    splits: Vec<SplitRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn put(root: &Path, rel: String, bytes: &[u8]) -> Result<FileRef, DatasetError> {
    let path = root.join(&rel);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(FileRef {
        path: rel,
        sha256: sha256_hex(bytes),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * d.data.len());
    out.extend_from_slice(&(d.width as u32).to_le_bytes());
    out.extend_from_slice(&(d.height as u32).to_le_bytes());
    for v in &d.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_correspondences(pairs: &[CorrespondenceBatch]) -> String {
    let mut s = String::new();
    for (k, b) in pairs.iter().enumerate() {
        let _ = writeln!(s, "# pair {k}");
        for (label, set) in [("pos", &b.positives), ("neg", &b.negatives)] {
            for p in set.iter() {
                let _ = writeln!(
                    s,
                    "{} {} {} {} {} {} {label}",
                    b.frame_a, b.frame_b, p.ua.x, p.ua.y, p.ub.x, p.ub.y
                );
            }
        }
    }
    s
}

/// Writes `dataset` under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut splits = Vec::new();
    for split in &dataset.splits {
        let sub = dir.join(&split.name);
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let mut frames = Vec::new();
        for f in split.frames() {
            frames.push(FrameRecord {
                id: f.id,
                scene: f.scene,
                index: f.index,
                condition: f.condition,
                pose: f.pose.to_row_major(),
                image: put(dir, format!("{}/frame_{:05}.pgm", split.name, f.id), &encode_pgm(&f.image))?,
                depth: put(dir, format!("{}/frame_{:05}.depth", split.name, f.id), &encode_depth(&f.depth))?,
            });
        }
        let correspondences = put(
            dir,
            format!("{}/correspondences.txt", split.name),
            encode_correspondences(&split.pairs).as_bytes(),
        )?;
        splits.push(SplitRecord {
            name: split.name.clone(),
            seed: split.seed,
            scenes: split
                .scenes
                .iter()
                .map(|s| SceneRecord {
                    seed: s.seed,
                    surface: s.surface.clone(),
                    conditions: s.conditions.clone(),
                })
                .collect(),
            frames,
            candidates: split
                .candidates()
                .map(|c| CandidateRecord {
                    candidate: c.candidate,
                    reference: c.reference,
                    gt_relative: c.gt_relative.to_row_major(),
                })
                .collect(),
            correspondences,
        });
    }
    let manifest = Manifest {
        magic: DATASET_MAGIC.to_string(),
        format_version: DATASET_FORMAT_VERSION,
        generator: crate::version_string(),
        config: dataset.config.clone(),
        splits,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Format(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn fetch(root: &Path, r: &FileRef) -> Result<(PathBuf, Vec<u8>), DatasetError> {
    let path = root.join(&r.path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok((path, bytes))
}

fn verify(path: &Path, bytes: &[u8], r: &FileRef) -> Result<(), DatasetError> {
    if sha256_hex(bytes) != r.sha256 {
        return Err(DatasetError::Checksum { path: path.to_path_buf() });
    }
    Ok(())
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage, DatasetError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DatasetError::Version(format!("{}: not a binary PGM (P5)", path.display())));
    }
    // Header: magic, width, height, maxval separated by single whitespace runs.
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err(DatasetError::Format(format!("{}: bad PGM header", path.display())));
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Format(format!("{}: bad PGM header", path.display())))?;
        fields.push(v);
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(DatasetError::Format(format!("{}: bad PGM header", path.display())));
    }
    i += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(DatasetError::Format(format!("{}: maxval {maxval} unsupported", path.display())));
    }
    let expected = i + w * h;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::Format(format!("{}: trailing bytes", path.display())));
    }
    Ok(GrayImage::new(w, h, bytes[i..].to_vec()))
}

pub fn decode_depth(path: &Path, bytes: &[u8]) -> Result<DepthMap, DatasetError> {
    let truncated = |expected| DatasetError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 8 * w * h;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(DatasetError::Format(format!("{}: trailing bytes", path.display())));
    }
    let data = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DepthMap { width: w, height: h, data })
}

pub fn decode_correspondences(text: &str) -> Result<Vec<CorrespondenceBatch>, DatasetError> {
    let mut out: Vec<CorrespondenceBatch> = Vec::new();
    let mut open = false;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            open = false;
            continue;
        }
        let bad = || DatasetError::Format(format!("correspondences line {}: {line:?}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let fa: usize = f[0].parse().map_err(|_| bad())?;
        let fb: usize = f[1].parse().map_err(|_| bad())?;
        let mut v = [0.0; 4];
        for (k, s) in f[2..6].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad())?;
        }
        let pair = PixelPair::new([v[0], v[1]], [v[2], v[3]]);
        let same = open && out.last().is_some_and(|b| b.frame_a == fa && b.frame_b == fb);
        if !same {
            out.push(CorrespondenceBatch {
                frame_a: fa,
                frame_b: fb,
                ..Default::default()
            });
            open = true;
        }
        let batch = out.last_mut().expect("pushed");
        match f[6] {
            "pos" => batch.positives.push(pair),
            "neg" => batch.negatives.push(pair),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

fn pose(values: &[f64; 16], what: &str) -> Result<SE3Pose, DatasetError> {
    SE3Pose::from_row_major(values).map_err(|e| DatasetError::Format(format!("{what}: {e}")))
}

/// Reads and verifies a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("manifest.json: {e}")))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if magic != DATASET_MAGIC {
        return Err(DatasetError::Version(format!("manifest magic {magic:?}, expected {DATASET_MAGIC:?}")));
    }
    if version != Some(DATASET_FORMAT_VERSION as u64) {
        return Err(DatasetError::Version(format!(
            "manifest format version {version:?}, expected {DATASET_FORMAT_VERSION}"
        )));
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| DatasetError::Format(format!("manifest.json: {e}")))?;

    let mut splits = Vec::new();
    for rec in manifest.splits {
        let mut scenes: Vec<SyntheticScene> = rec
            .scenes
            .into_iter()
            .map(|s| SyntheticScene {
                seed: s.seed,
                surface: s.surface,
                conditions: s.conditions,
                frames: Vec::new(),
                candidates: Vec::new(),
            })
            .collect();
        for fr in rec.frames {
            let (ipath, ibytes) = fetch(dir, &fr.image)?;
            let image = decode_pgm(&ipath, &ibytes)?;
            verify(&ipath, &ibytes, &fr.image)?;
            let (dpath, dbytes) = fetch(dir, &fr.depth)?;
            let depth = decode_depth(&dpath, &dbytes)?;
            verify(&dpath, &dbytes, &fr.depth)?;
            if depth.width != image.width() || depth.height != image.height() {
                return Err(DatasetError::Format(format!("frame {}: image and depth sizes differ", fr.id)));
            }
            let scene = scenes
                .get_mut(fr.scene)
                .ok_or_else(|| DatasetError::Format(format!("frame {}: unknown scene {}", fr.id, fr.scene)))?;
            scene.frames.push(Frame {
                id: fr.id,
                scene: fr.scene,
                index: fr.index,
                condition: fr.condition,
                pose: pose(&fr.pose, &format!("frame {} pose", fr.id))?,
                image,
                depth,
            });
        }
        for c in rec.candidates {
            let owner = scenes
                .iter_mut()
                .find(|s| s.frames.iter().any(|f| f.id == c.candidate))
                .ok_or_else(|| DatasetError::Format(format!("candidate frame {} not found", c.candidate)))?;
            owner.candidates.push(RelocCandidate {
                candidate: c.candidate,
                reference: c.reference,
                gt_relative: pose(&c.gt_relative, "candidate pose")?,
            });
        }
        let (cpath, cbytes) = fetch(dir, &rec.correspondences)?;
        verify(&cpath, &cbytes, &rec.correspondences)?;
        let ctext = String::from_utf8(cbytes).map_err(|_| DatasetError::Format(format!("{}: not UTF-8", cpath.display())))?;
        splits.push(Split {
            name: rec.name,
            seed: rec.seed,
            scenes,
            pairs: decode_correspondences(&ctext)?,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        splits,
    })
}
