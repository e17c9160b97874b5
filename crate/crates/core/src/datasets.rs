//! Synthetic classification tasks with deterministic generation and a
//! checksummed on-disk format.
//!
//! Every family produces inputs in [−1, 1]. Train and test rows come from
//! separate random substreams of the task seed.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use steallab_autodiff::Tensor;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::models::InputKind;
use crate::seed::{SeedStreams, DATA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    GaussianBlobs,
    ConcentricRings,
    GridDigits8x8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub num_classes: usize,
    /// Input dimension of the vector families; digits are always 1×8×8.
    #[serde(default)]
    pub dim: Option<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Blob center spacing in standard deviations, ring spacing, or inverse pixel-noise level for digits.
    pub separation: f64,
    pub seed: u64,
}

/// Names accepted by [`TaskSpec::preset`].
pub const PRESETS: [&str; 4] = ["blobs-4", "blobs-10", "rings-3", "digits"];

impl TaskSpec {
    pub fn blobs(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Self {
        Self {
            family: TaskFamily::GaussianBlobs,
            num_classes,
            dim: Some(dim),
            train_per_class: 500,
            test_per_class: 250,
            separation,
            seed,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "blobs-4" => Self::blobs(4, 16, 5.0, 0),
            "blobs-10" => Self {
                train_per_class: 800,
                test_per_class: 200,
                ..Self::blobs(10, 16, 3.5, 0)
            },
            "rings-3" => Self {
                family: TaskFamily::ConcentricRings,
                ..Self::blobs(3, 2, 1.0, 0)
            },
            "digits" => Self {
                family: TaskFamily::GridDigits8x8,
                num_classes: 10,
                dim: None,
                train_per_class: 300,
                test_per_class: 100,
                separation: 20.0,
                seed: 0,
            },
            _ => return None,
        })
    }

    pub fn input_kind(&self) -> InputKind {
        match self.family {
            TaskFamily::GridDigits8x8 => InputKind::Image {
                channels: 1,
                height: 8,
                width: 8,
            },
            _ => InputKind::Vector {
                dim: self.dim.unwrap_or(0),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(
                "task.num_classes",
                format!("{:?} needs at least 2 classes, got {}", self.family, self.num_classes),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("task.train_per_class", "samples per class must be at least 1"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::config("task.separation", "must be positive"));
        }
        match self.family {
            TaskFamily::GaussianBlobs | TaskFamily::ConcentricRings => match self.dim {
                Some(d) if d >= 2 => Ok(()),
                _ => Err(Error::config("task.dim", "vector tasks need dim ≥ 2")),
            },
            TaskFamily::GridDigits8x8 => {
                if self.num_classes > GLYPHS.len() {
                    return Err(Error::config("task.num_classes", "digits has at most 10 classes"));
                }
                match self.dim {
                    None | Some(64) => Ok(()),
                    Some(d) => Err(Error::config("task.dim", format!("digits are 8×8, got dim {d}"))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Class-count subsampling applied after generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub counts: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: TaskSpec,
    pub split: Split,
    #[serde(default)]
    pub subsample: Option<Subsample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.provenance.split
    }

    pub fn input_kind(&self) -> InputKind {
        self.provenance.task.input_kind()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }
}

/// Generates the train and test splits of a task.
pub fn generate(spec: &TaskSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let make = |split: Split, per_class: usize| {
        let mut rng = streams.rng(&format!("{DATA}/{split:?}"));
        let kind = spec.input_kind();
        let n = per_class * spec.num_classes;
        let mut data = Vec::with_capacity(n * kind.numel());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..per_class {
            for k in 0..spec.num_classes {
                match spec.family {
                    TaskFamily::GaussianBlobs => blob_sample(spec, k, &mut rng, &mut data),
                    TaskFamily::ConcentricRings => ring_sample(spec, k, &mut rng, &mut data),
                    TaskFamily::GridDigits8x8 => digit_sample(spec, k, &mut rng, &mut data),
                }
                labels.push(k);
            }
        }
        LabeledDataset {
            inputs: Tensor::new(&kind.batch_shape(n), data).expect("rows match spec"),
            labels,
            num_classes: spec.num_classes,
            provenance: Provenance {
                task: *spec,
                split,
                subsample: None,
            },
        }
    };
    Ok((make(Split::Train, spec.train_per_class), make(Split::Test, spec.test_per_class)))
}

fn standard_normal() -> Normal<f64> {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Per-coordinate standard deviation of every blob.
const BLOB_SIGMA: f64 = 0.1;
/// Coordinate value at the middle of the blob chain.
const BLOB_MIDPOINT: f64 = -0.5;

/// Blobs sit in a chain along the main diagonal, centred on the point with
/// every coordinate at [`BLOB_MIDPOINT`]; neighbouring centers are
/// `separation` standard deviations apart.
fn blob_sample(spec: &TaskSpec, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let d = spec.dim.expect("validated");
    let step = spec.separation * BLOB_SIGMA / (d as f64).sqrt();
    let center = BLOB_MIDPOINT + step * (k as f64 - (spec.num_classes as f64 - 1.0) / 2.0);
    let normal = standard_normal();
    for _ in 0..d {
        out.push((center + BLOB_SIGMA * normal.sample(rng)).clamp(-1.0, 1.0));
    }
}

fn ring_sample(spec: &TaskSpec, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let d = spec.dim.expect("validated");
    let outer = spec.separation * spec.num_classes as f64;
    let scale = 1.0 / (outer + 1.0);
    let normal = standard_normal();
    let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let r = spec.separation * (k + 1) as f64 + 0.1 * spec.separation * normal.sample(rng);
    out.push((r * theta.cos() * scale).clamp(-1.0, 1.0));
    out.push((r * theta.sin() * scale).clamp(-1.0, 1.0));
    for _ in 2..d {
        out.push((0.1 * normal.sample(rng)).clamp(-1.0, 1.0));
    }
}

const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..", ".##..##.", ".##..##.", ".##..##.", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        "...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........",
    ],
    [
        "..####..", ".##..##.", ".....##.", "....##..", "...##...", "..##....", ".######.", "........",
    ],
    [
        "..####..", ".##..##.", ".....##.", "...###..", ".....##.", ".##..##.", "..####..", "........",
    ],
    [
        "....##..", "...###..", "..####..", ".##.##..", ".######.", "....##..", "....##..", "........",
    ],
    [
        ".######.", ".##.....", ".#####..", ".....##.", ".....##.", ".##..##.", "..####..", "........",
    ],
    [
        "..####..", ".##.....", ".#####..", ".##..##.", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        ".######.", ".....##.", "....##..", "...##...", "...##...", "...##...", "...##...", "........",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..####..", ".##..##.", ".##..##.", "..####..", "........",
    ],
    [
        "..####..", ".##..##.", ".##..##.", "..#####.", ".....##.", "....##..", "..###...", "........",
    ],
];

const DIGIT_BACKGROUND: f64 = -0.6;
const DIGIT_STROKE: f64 = -0.3;

/// Glyph `k` shifted by up to one pixel each way, with Gaussian pixel noise.
/// Strokes sit at −0.3 on a background of −0.6.
fn digit_sample(spec: &TaskSpec, k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let shift = Uniform::new_inclusive(-1i32, 1).expect("valid range");
    let (dy, dx) = (shift.sample(rng), shift.sample(rng));
    let noise = Normal::new(0.0, 1.0 / spec.separation).expect("positive std");
    let glyph = GLYPHS[k];
    for y in 0..8i32 {
        for x in 0..8i32 {
            let (sy, sx) = (y - dy, x - dx);
            let on = (0..8).contains(&sy) && (0..8).contains(&sx) && glyph[sy as usize].as_bytes()[sx as usize] == b'#';
            let base = if on { DIGIT_STROKE } else { DIGIT_BACKGROUND };
            out.push((base + noise.sample(rng)).clamp(-1.0, 1.0));
        }
    }
}

/// Keeps exactly `counts[k]` rows of each class `k`, chosen uniformly without
/// replacement, in shuffled order.
pub fn make_unbalanced(dataset: &LabeledDataset, counts: &[usize], seed: u64) -> Result<LabeledDataset> {
    if counts.len() != dataset.num_classes {
        return Err(Error::config(
            "counts",
            format!("expected {} class counts, got {}", dataset.num_classes, counts.len()),
        ));
    }
    let mut by_class = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = SeedStreams::new(seed).rng("unbalanced");
    let mut chosen = Vec::with_capacity(counts.iter().sum());
    for (class, (&want, rows)) in counts.iter().zip(&by_class).enumerate() {
        if want > rows.len() {
            return Err(Error::InsufficientSamples {
                class,
                available: rows.len(),
                requested: want,
            });
        }
        chosen.extend(index::sample(&mut rng, rows.len(), want).into_iter().map(|j| rows[j]));
    }
    chosen.shuffle(&mut rng);
    let mut out = dataset.subset(&chosen)?;
    out.provenance.subsample = Some(Subsample {
        counts: counts.to_vec(),
        seed,
    });
    Ok(out)
}

/// Arithmetic-progression class counts `start, start + step, …`.
pub fn progression_counts(num_classes: usize, start: usize, step: usize) -> Vec<usize> {
    (0..num_classes).map(|k| start + k * step).collect()
}

const MAGIC: &[u8; 8] = b"STLDATA\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;

fn encode(d: &LabeledDataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(DATASET_FORMAT_VERSION);
    w.bytes(serde_json::to_string(&d.provenance)?.as_bytes());
    w.u32(d.num_classes as u32);
    w.u32(d.inputs.ndim() as u32);
    for &s in d.inputs.shape() {
        w.u64(s as u64);
    }
    w.f64s(d.inputs.data());
    for &l in &d.labels {
        w.u32(l as u32);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

fn decode(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let header = MAGIC.len() + 4;
    if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "not a dataset file".into(),
        });
    }
    if bytes.len() < header + 4 {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let mut r = Reader::new(&body[header..], path);
    let provenance: Provenance = serde_json::from_slice(r.bytes()?)?;
    let num_classes = r.u32()? as usize;
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
    let inputs = Tensor::new(&shape, r.f64s(shape.iter().product())?)?;
    let labels = (0..shape[0]).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>>>()?;
    if !r.is_done() {
        return Err(r.corrupt("trailing bytes after labels"));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(r.corrupt(format!("label {l} outside [0, {num_classes})")));
    }
    Ok(LabeledDataset {
        inputs,
        labels,
        num_classes,
        provenance,
    })
}

pub fn save(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    write_file(path, &encode(dataset)?)
}

pub fn load(path: &Path) -> Result<LabeledDataset> {
    decode(&read_file(path)?, path)
}
