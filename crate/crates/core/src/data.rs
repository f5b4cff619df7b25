//! Synthetic tracked-sprite videos and their manifests.
//!
//! A 12x12 target sprite moves at constant speed in one of four directions;
//! its pattern (two choices) and direction together give the label. Two
//! distractor sprites with other patterns move independently. Every clip is
//! a pure function of `(seed, label)` and the generator version.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use glitr_substrate::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlitrError, Result};
use crate::glimpse::{GlimpseGeometry, GlimpseLocation};

pub const GENERATOR_VERSION: &str = "sprites-v1";
pub const SPRITE: usize = 12;
/// Pixels moved per frame.
pub const SPEED: i64 = 3;
pub const NOISE_STD: f64 = 0.1;
pub const BACKGROUND: f32 = 0.5;
pub const DISTRACTORS: usize = 2;
/// Largest offset of the target's starting center from the frame center
/// in the centered variant.
pub const CENTER_SPREAD: i64 = 14;
const DIRECTIONS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
const LABEL_PATTERNS: usize = 2;
const DISTRACTOR_PATTERNS: [usize; 2] = [2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Centered,
    Bottomleft,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Centered => "centered",
            Variant::Bottomleft => "bottomleft",
        })
    }
}

impl FromStr for Variant {
    type Err = GlitrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Variant::Centered),
            "bottomleft" => Ok(Variant::Bottomleft),
            _ => Err(GlitrError::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Everything that determines a clip besides its seed and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub geometry: GlimpseGeometry,
    pub frames: usize,
    pub num_classes: usize,
    pub variant: Variant,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let g = &self.geometry;
        if g.frame_h < SPRITE || g.frame_w < SPRITE {
            return Err(GlitrError::Geometry(format!("frame smaller than the {SPRITE}px sprite")));
        }
        if self.frames == 0 {
            return Err(GlitrError::Config("clips need at least one frame".into()));
        }
        if self.num_classes < 2 || self.num_classes > DIRECTIONS.len() * LABEL_PATTERNS {
            return Err(GlitrError::Config(format!(
                "num_classes {} outside 2..={}",
                self.num_classes,
                DIRECTIONS.len() * LABEL_PATTERNS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    /// `[T, C, H, W]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub label: usize,
    /// True target centers per frame.
    pub sprite_track: Vec<GlimpseLocation>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// FNV-1a over the frame bits and label.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let bytes = self
            .frames
            .data()
            .iter()
            .flat_map(|v| v.to_bits().to_le_bytes())
            .chain((self.label as u64).to_le_bytes());
        for b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

fn pattern(kind: usize, i: usize, j: usize) -> bool {
    match kind {
        // ring
        0 => i < 2 || j < 2 || i >= SPRITE - 2 || j >= SPRITE - 2,
        // plus
        1 => (4..8).contains(&i) || (4..8).contains(&j),
        // checkerboard of 3x3 cells
        2 => (i / 3 + j / 3) % 2 == 0,
        // diagonal stripes
        _ => ((i + j) / 3) % 2 == 0,
    }
}

struct Mover {
    pos: (i64, i64),
    vel: (i64, i64),
    max: (i64, i64),
}

fn reflect(p: i64, v: i64, max: i64) -> (i64, i64) {
    let q = p + v;
    if q < 0 {
        (-q, -v)
    } else if q > max {
        (2 * max - q, -v)
    } else {
        (q, v)
    }
}

impl Mover {
    fn advance(&mut self) {
        let (y, vy) = reflect(self.pos.0, self.vel.0, self.max.0);
        let (x, vx) = reflect(self.pos.1, self.vel.1, self.max.1);
        self.pos = (y, x);
        self.vel = (vy, vx);
    }
}

fn draw(frame: &mut [f32], w: usize, channels: usize, h: usize, top: i64, left: i64, kind: usize) {
    for c in 0..channels {
        for i in 0..SPRITE {
            for j in 0..SPRITE {
                let y = top as usize + i;
                let x = left as usize + j;
                frame[(c * h + y) * w + x] = if pattern(kind, i, j) { 1.0 } else { 0.0 };
            }
        }
    }
}

/// Renders the clip for `(seed, label)`.
pub fn generate_clip(seed: u64, label: usize, spec: &ClipSpec) -> Result<VideoClip> {
    spec.validate()?;
    if label >= spec.num_classes {
        return Err(GlitrError::Label {
            label,
            classes: spec.num_classes,
        });
    }
    let geom = &spec.geometry;
    let (h, w, c, t_len) = (geom.frame_h, geom.frame_w, geom.channels, spec.frames);
    let max = ((h - SPRITE) as i64, (w - SPRITE) as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dir = DIRECTIONS[label % DIRECTIONS.len()];
    let kind = label / DIRECTIONS.len();
    let start = match spec.variant {
        Variant::Centered => {
            let (cy, cx) = (max.0 / 2, max.1 / 2);
            let sy = CENTER_SPREAD.min(cy);
            let sx = CENTER_SPREAD.min(cx);
            (rng.random_range(cy - sy..=cy + sy), rng.random_range(cx - sx..=cx + sx))
        }
        Variant::Bottomleft => {
            let top = (h as i64 / 2).min(max.0);
            let right = (w as i64 / 2 - SPRITE as i64).max(0);
            (rng.random_range(top..=max.0), rng.random_range(0..=right))
        }
    };
    let mut target = Mover {
        pos: start,
        vel: (dir.0 * SPEED, dir.1 * SPEED),
        max,
    };
    let mut distractors: Vec<(Mover, usize)> = (0..DISTRACTORS)
        .map(|_| {
            let pos = (rng.random_range(0..=max.0), rng.random_range(0..=max.1));
            let d = DIRECTIONS[rng.random_range(0..DIRECTIONS.len())];
            let kind = DISTRACTOR_PATTERNS[rng.random_range(0..DISTRACTOR_PATTERNS.len())];
            (
                Mover {
                    pos,
                    vel: (d.0 * SPEED, d.1 * SPEED),
                    max,
                },
                kind,
            )
        })
        .collect();

    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    let n = c * h * w;
    let mut data = vec![BACKGROUND; t_len * n];
    let mut track = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frame = &mut data[t * n..(t + 1) * n];
        for (m, k) in &distractors {
            draw(frame, w, c, h, m.pos.0, m.pos.1, *k);
        }
        draw(frame, w, c, h, target.pos.0, target.pos.1, kind);
        for v in frame.iter_mut() {
            let e: f64 = noise.sample(&mut rng);
            *v = (*v + e as f32).clamp(0.0, 1.0);
        }
        let half = (SPRITE as f64 - 1.0) / 2.0;
        track.push(geom.normalize(target.pos.0 as f64 + half, target.pos.1 as f64 + half));
        target.advance();
        for (m, _) in distractors.iter_mut() {
            m.advance();
        }
    }
    Ok(VideoClip {
        frames: Tensor::new(vec![t_len, c, h, w], data)?,
        label,
        sprite_track: track,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub split: Split,
    pub spec: ClipSpec,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    split: Split,
    spec: ClipSpec,
    count: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clip(&self, i: usize) -> Result<VideoClip> {
        let e = &self.entries[i];
        generate_clip(e.seed, e.label, &self.spec)
    }

    /// Materializes every clip, in entry order.
    pub fn clips(&self) -> Result<Vec<VideoClip>> {
        (0..self.entries.len()).into_par_iter().map(|i| self.clip(i)).collect()
    }

    /// Writes the manifest, refusing to replace one from another generator version.
    pub fn write(&self, path: &Path) -> Result<()> {
        if path.exists() {
            let header = read_header(path)?;
            if header.version != self.version {
                return Err(GlitrError::VersionMismatch {
                    found: header.version,
                    expected: self.version.clone(),
                });
            }
        }
        let mut out = String::new();
        let header = Header {
            version: self.version.clone(),
            split: self.split,
            spec: self.spec,
            count: self.entries.len(),
        };
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| GlitrError::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| GlitrError::io(path, e))
    }
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> GlitrError {
    GlitrError::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_header(path: &Path) -> Result<Header> {
    let f = fs::File::open(path).map_err(|e| GlitrError::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f)
        .read_line(&mut line)
        .map_err(|e| GlitrError::io(path, e))?;
    serde_json::from_str(&line).map_err(|e| manifest_err(path, format!("header: {e}")))
}

/// Reads and validates a manifest written by [`DatasetManifest::write`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| GlitrError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| manifest_err(path, "empty file"))?;
    let header: Header = serde_json::from_str(first).map_err(|e| manifest_err(path, format!("header: {e}")))?;
    if header.version != GENERATOR_VERSION {
        return Err(GlitrError::VersionMismatch {
            found: header.version,
            expected: GENERATOR_VERSION.into(),
        });
    }
    header.spec.validate()?;
    let mut entries = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let e: ManifestEntry =
            serde_json::from_str(line).map_err(|e| manifest_err(path, format!("entry {}: {e}", n + 1)))?;
        if e.label >= header.spec.num_classes {
            return Err(manifest_err(path, format!("entry {}: label {} out of range", n + 1, e.label)));
        }
        entries.push(e);
    }
    if entries.len() != header.count {
        return Err(manifest_err(
            path,
            format!("header declares {} entries, found {}", header.count, entries.len()),
        ));
    }
    let mut ids: Vec<usize> = entries.iter().map(|e| e.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != entries.len() {
        return Err(manifest_err(path, "duplicate clip ids"));
    }
    Ok(DatasetManifest {
        version: header.version,
        split: header.split,
        spec: header.spec,
        entries,
    })
}

/// Seed of clip `i` in a split: splits draw from disjoint halves of the
/// root seed's 2^32 block.
pub fn clip_seed(root_seed: u64, split: Split, i: usize) -> u64 {
    let base = root_seed.wrapping_shl(32);
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1u64 << 31,
    };
    base.wrapping_add(offset).wrapping_add(i as u64)
}

fn split_manifest(n: usize, split: Split, spec: &ClipSpec, root_seed: u64) -> Result<DatasetManifest> {
    if n == 0 || n % spec.num_classes != 0 {
        return Err(GlitrError::Config(format!(
            "{split} size {n} must be a positive multiple of {} classes",
            spec.num_classes
        )));
    }
    if n >= 1 << 31 {
        return Err(GlitrError::Config(format!("{split} size {n} too large")));
    }
    let entries = (0..n)
        .map(|i| ManifestEntry {
            id: i,
            seed: clip_seed(root_seed, split, i),
            label: i % spec.num_classes,
        })
        .collect();
    Ok(DatasetManifest {
        version: GENERATOR_VERSION.into(),
        split,
        spec: *spec,
        entries,
    })
}

/// Balanced train and validation manifests.
pub fn build_dataset(
    n_train: usize,
    n_val: usize,
    spec: &ClipSpec,
    root_seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    Ok((
        split_manifest(n_train, Split::Train, spec, root_seed)?,
        split_manifest(n_val, Split::Val, spec, root_seed)?,
    ))
}

/// Builds both splits and writes `train.jsonl` and `val.jsonl` under `dir`.
pub fn write_dataset(dir: &Path, n_train: usize, n_val: usize, spec: &ClipSpec, root_seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, val) = build_dataset(n_train, n_val, spec, root_seed)?;
    fs::create_dir_all(dir).map_err(|e| GlitrError::io(dir, e))?;
    train.write(&dir.join("train.jsonl"))?;
    val.write(&dir.join("val.jsonl"))?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ClipSpec {
        ClipSpec {
            geometry: GlimpseGeometry::default(),
            frames: 8,
            num_classes: 8,
            variant: Variant::Centered,
        }
    }

    #[test]
    fn reflection_stays_in_range() {
        assert_eq!(reflect(1, -3, 52), (2, 3));
        assert_eq!(reflect(51, 3, 52), (50, -3));
        assert_eq!(reflect(10, 3, 52), (13, 3));
    }

    #[test]
    fn patterns_differ() {
        let grids: Vec<Vec<bool>> = (0..4)
            .map(|k| (0..SPRITE * SPRITE).map(|i| pattern(k, i / SPRITE, i % SPRITE)).collect())
            .collect();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(grids[a], grids[b]);
            }
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        assert!(matches!(generate_clip(0, 8, &spec()), Err(GlitrError::Label { .. })));
    }

    #[test]
    fn first_frame_track_is_target_box() {
        let clip = generate_clip(3, 5, &spec()).unwrap();
        assert_eq!(clip.sprite_track.len(), 8);
        assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unbalanced_split_is_rejected() {
        assert!(build_dataset(10, 8, &spec(), 0).is_err());
    }
}
