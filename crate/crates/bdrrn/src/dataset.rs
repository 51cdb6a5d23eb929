//! Dataset manifests and 64x64 stride-64 patch extraction.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{mean_mask, MeanMask};
use crate::partition::parse_partition_file;
use crate::plane::{read_yuv420_y, Plane8};

pub const PATCH_SIZE: usize = 64;
pub const PATCH_STRIDE: usize = 64;
pub const FRAMES_PER_CLIP: usize = 4;
pub const VALID_QPS: [u32; 4] = [22, 27, 32, 37];

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub original: PathBuf,
    pub decoded: PathBuf,
    pub partition: PathBuf,
    pub qp: u32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

/// Aligned decoded/original/mask views cut from identical coordinates.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub decoded: Vec<f64>,
    pub original: Vec<f64>,
    pub mask: Vec<f64>,
    pub frame_id: usize,
    pub offset: (usize, usize),
}

/// Parses the manifest text format: one entry per line,
/// `<original> <decoded> <partition> <qp> <width> <height> <frames>`,
/// paths relative to the manifest's directory, `#` comments.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening manifest {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("reading manifest", e))?;
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => &line[..],
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let fail = |message: String| Error::Manifest { line: lineno, message };
        if fields.len() != 7 {
            return Err(fail("expected 7 fields".into()));
        }
        let qp: u32 = fields[3].parse().map_err(|_| fail(format!("bad qp `{}`", fields[3])))?;
        if !VALID_QPS.contains(&qp) {
            return Err(fail(format!("qp {qp} not in {VALID_QPS:?}")));
        }
        let width: usize = fields[4].parse().map_err(|_| fail(format!("bad width `{}`", fields[4])))?;
        let height: usize = fields[5].parse().map_err(|_| fail(format!("bad height `{}`", fields[5])))?;
        let frames: usize = fields[6].parse().map_err(|_| fail(format!("bad frames `{}`", fields[6])))?;
        entries.push(ManifestEntry {
            original: base.join(fields[0]),
            decoded: base.join(fields[1]),
            partition: base.join(fields[2]),
            qp,
            width,
            height,
            frames,
        });
    }
    Ok(entries)
}

/// Extracts aligned full patches at stride offsets; partial border patches
/// are dropped. Row-major order over offsets.
pub fn extract_patches(
    decoded: &Plane8,
    original: &Plane8,
    mask: &MeanMask,
    frame_id: usize,
    size: usize,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    let (w, h) = (decoded.width, decoded.height);
    if original.width != w || original.height != h || mask.width != w || mask.height != h {
        return Err(Error::shape(
            "extract_patches",
            format!("{w}x{h}"),
            format!(
                "original {}x{}, mask {}x{}",
                original.width, original.height, mask.width, mask.height
            ),
        ));
    }
    let mut patches = Vec::new();
    if w < size || h < size {
        return Ok(patches);
    }
    let mut oy = 0;
    while oy + size <= h {
        let mut ox = 0;
        while ox + size <= w {
            let mut dec = Vec::with_capacity(size * size);
            let mut orig = Vec::with_capacity(size * size);
            let mut msk = Vec::with_capacity(size * size);
            for y in oy..oy + size {
                for x in ox..ox + size {
                    dec.push(decoded.at(x, y) as f64 / 255.0);
                    orig.push(original.at(x, y) as f64 / 255.0);
                    msk.push(mask.at(x, y));
                }
            }
            patches.push(PatchPair {
                decoded: dec,
                original: orig,
                mask: msk,
                frame_id,
                offset: (ox, oy),
            });
            ox += stride;
        }
        oy += stride;
    }
    Ok(patches)
}

pub fn patch_grid(w: usize, h: usize, size: usize, stride: usize) -> usize {
    if w < size || h < size {
        return 0;
    }
    ((w - size) / stride + 1) * ((h - size) / stride + 1)
}

/// k distinct frame indices, uniform without replacement, deterministic per
/// seed.
pub fn select_frames(seed: u64, frame_count: usize, k: usize) -> Result<Vec<usize>> {
    if k > frame_count {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} frames from {frame_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, frame_count, k).into_vec();
    indices.sort_unstable();
    Ok(indices)
}

/// Stable per-(clip, qp) selection seed.
pub fn clip_seed(base_seed: u64, clip: &Path, qp: u32) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ base_seed;
    for b in clip.to_string_lossy().bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash ^ qp as u64
}

/// A decoded/original/partition frame triple for whole-frame evaluation.
pub struct EvalFrame {
    pub decoded: Plane8,
    pub original: Plane8,
    pub mask: MeanMask,
}

/// Builds the training patch set for one QP from a manifest: masks are
/// rendered per full frame before patching, then FRAMES_PER_CLIP frames are
/// selected per (clip, qp) entry.
pub fn build_patch_dataset(entries: &[ManifestEntry], qp: u32, seed: u64) -> Result<Vec<PatchPair>> {
    let mut patches = Vec::new();
    for entry in entries.iter().filter(|e| e.qp == qp) {
        let decoded = read_yuv420_y(&entry.decoded, entry.width, entry.height, Some(entry.frames))?;
        let original = read_yuv420_y(&entry.original, entry.width, entry.height, Some(entry.frames))?;
        let partitions = parse_partition_file(&entry.partition)?;
        let available = decoded.len().min(original.len()).min(partitions.len());
        if available < entry.frames {
            return Err(Error::InvalidArgument(format!(
                "{}: manifest declares {} frames, files provide {}",
                entry.decoded.display(),
                entry.frames,
                available
            )));
        }
        let k = FRAMES_PER_CLIP.min(entry.frames);
        let selected = select_frames(clip_seed(seed, &entry.decoded, qp), entry.frames, k)?;
        for f in selected {
            let mask = mean_mask(&decoded[f], &partitions[f])?;
            patches.extend(extract_patches(
                &decoded[f],
                &original[f],
                &mask,
                f,
                PATCH_SIZE,
                PATCH_STRIDE,
            )?);
        }
    }
    Ok(patches)
}

/// Loads whole frames for evaluation (all frames of every matching entry).
pub fn build_eval_frames(entries: &[ManifestEntry], qp: u32) -> Result<Vec<EvalFrame>> {
    let mut frames = Vec::new();
    for entry in entries.iter().filter(|e| e.qp == qp) {
        let decoded = read_yuv420_y(&entry.decoded, entry.width, entry.height, Some(entry.frames))?;
        let original = read_yuv420_y(&entry.original, entry.width, entry.height, Some(entry.frames))?;
        let partitions = parse_partition_file(&entry.partition)?;
        for f in 0..entry.frames.min(decoded.len()).min(partitions.len()) {
            let mask = mean_mask(&decoded[f], &partitions[f])?;
            frames.push(EvalFrame {
                decoded: decoded[f].clone(),
                original: original[f].clone(),
                mask,
            });
        }
    }
    Ok(frames)
}
