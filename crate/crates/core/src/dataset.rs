//! Training and ensemble datasets built from simulator runs, plus their
//! on-disk formats.
//!
//! Pair dataset layout (little-endian):
//!
//! ```text
//! "PCDS" | u32 version | u32 pair_count | u32 H | u32 W | u8 kind
//! repeated pair_count times: H*W f32 input | H*W f32 target
//! ```
//!
//! `kind` is 0 for binary training pairs and 1 for ensemble pairs. A
//! manifest text file records the per-trajectory seeds and ignitions.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ca::{CaModel, CaParams, CellState, FireGrid, TerrainLayers, Trajectory};
use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, put_u64, Reader};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"PCDS";
pub const DATASET_VERSION: u32 = 1;
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"PCTR";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const FRAMES_MAGIC: &[u8; 4] = b"PCFS";
pub const FRAMES_VERSION: u32 = 1;
const MAX_CELLS: usize = 1 << 24;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

/// An `H x W` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FireFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl FireFrame {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} frame",
                values.len()
            )));
        }
        check_range(&values, 0)?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn same_dims(&self, other: &FireFrame) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }
}

fn check_range(values: &[f32], offset: usize) -> Result<()> {
    match values
        .iter()
        .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
    {
        Some(i) => Err(Error::RangeViolation {
            index: offset + i,
            value: values[i],
        }),
        None => Ok(()),
    }
}

/// Burning and burnt cells map to 1, everything else to 0.
pub fn binarize(grid: &FireGrid) -> FireFrame {
    FireFrame {
        width: grid.width,
        height: grid.height,
        values: grid
            .cells
            .iter()
            .map(|s| if s.is_fire() { 1.0 } else { 0.0 })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Train,
    Ensemble,
}

impl DatasetKind {
    fn code(self) -> u8 {
        match self {
            DatasetKind::Train => 0,
            DatasetKind::Ensemble => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DatasetKind::Train),
            1 => Some(DatasetKind::Ensemble),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Train => "train",
            DatasetKind::Ensemble => "ensemble",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetKind::Train),
            "ensemble" => Ok(DatasetKind::Ensemble),
            _ => Err(Error::InvalidConfig(format!("unknown dataset kind {s:?}"))),
        }
    }
}

/// An input frame and the frame that follows it (binary for training data,
/// an ensemble average for test data).
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub input: FireFrame,
    pub target: FireFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub width: usize,
    pub height: usize,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-trajectory provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub seed: u64,
    pub ignition: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub width: usize,
    pub height: usize,
    pub master_seed: u64,
    pub n_steps: usize,
    pub stride: usize,
    pub ensemble_size: usize,
    pub params_hash: String,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    pub fn pairs_per_trajectory(&self) -> usize {
        self.n_steps / self.stride
    }

    /// Position of pair `i` within its trajectory, counted in subsampled
    /// frames.
    pub fn frame_index(&self, pair: usize) -> usize {
        pair % self.pairs_per_trajectory().max(1)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# pyrocast dataset manifest").unwrap();
        writeln!(s, "format_version = {DATASET_VERSION}").unwrap();
        writeln!(s, "kind = {}", self.kind.as_str()).unwrap();
        writeln!(s, "height = {}", self.height).unwrap();
        writeln!(s, "width = {}", self.width).unwrap();
        writeln!(s, "master_seed = {}", self.master_seed).unwrap();
        writeln!(s, "n_steps = {}", self.n_steps).unwrap();
        writeln!(s, "stride = {}", self.stride).unwrap();
        writeln!(s, "ensemble_size = {}", self.ensemble_size).unwrap();
        writeln!(s, "params_hash = {}", self.params_hash).unwrap();
        writeln!(s, "samples = {}", self.samples.len()).unwrap();
        for (i, r) in self.samples.iter().enumerate() {
            writeln!(s, "sample.{i} = seed={} ignition={}", r.seed, r.ignition).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut samples: Vec<Option<SampleRecord>> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| corrupt(format!("manifest line {}: missing '='", lineno + 1)))?;
            if let Some(idx) = key.strip_prefix("sample.") {
                let idx: usize = idx
                    .parse()
                    .map_err(|_| corrupt(format!("manifest line {}: bad index", lineno + 1)))?;
                let count = samples.len();
                let slot = samples
                    .get_mut(idx)
                    .ok_or_else(|| corrupt(format!("sample index {idx} out of range ({count})")))?;
                if slot.is_some() {
                    return Err(corrupt(format!("duplicate sample.{idx}")));
                }
                *slot = Some(parse_sample(value)?);
                continue;
            }
            if key == "samples" {
                let n: usize = value
                    .parse()
                    .map_err(|_| corrupt("bad sample count"))?;
                if n > text.len() {
                    return Err(corrupt("sample count exceeds manifest size"));
                }
                if !samples.is_empty() {
                    return Err(corrupt("duplicate samples key"));
                }
                samples = vec![None; n];
            }
            if fields.insert(key.to_string(), value.to_string()).is_some() {
                return Err(corrupt(format!("duplicate key {key:?}")));
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| corrupt(format!("manifest missing {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| corrupt(format!("manifest field {k} is not an integer")))
        };
        let version = num("format_version")?;
        if version != DATASET_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version.min(u32::MAX as u64) as u32,
            });
        }
        let kind: DatasetKind = get("kind")?.parse().map_err(|_| corrupt("bad kind"))?;
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| corrupt(format!("missing sample.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let m = Manifest {
            kind,
            width: num("width")? as usize,
            height: num("height")? as usize,
            master_seed: num("master_seed")?,
            n_steps: num("n_steps")? as usize,
            stride: num("stride")? as usize,
            ensemble_size: num("ensemble_size")? as usize,
            params_hash: get("params_hash")?.to_string(),
            samples,
        };
        if m.stride == 0 {
            return Err(corrupt("manifest stride is zero"));
        }
        Ok(m)
    }
}

fn parse_sample(value: &str) -> Result<SampleRecord> {
    let mut seed = None;
    let mut ignition = None;
    for tok in value.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| corrupt(format!("bad sample token {tok:?}")))?;
        let slot = match k {
            "seed" => &mut seed,
            "ignition" => &mut ignition,
            _ => return Err(corrupt(format!("unknown sample field {k:?}"))),
        };
        *slot = Some(v.parse::<u64>().map_err(|_| corrupt(format!("bad number {v:?}")))?);
    }
    Ok(SampleRecord {
        seed: seed.ok_or_else(|| corrupt("sample without seed"))?,
        ignition: ignition.ok_or_else(|| corrupt("sample without ignition"))? as usize,
    })
}

/// Generation settings shared by both dataset kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of trajectories.
    pub n_samples: usize,
    /// Simulator steps per trajectory (frames = n_steps + 1).
    pub n_steps: usize,
    /// Steps between kept frames.
    pub stride: usize,
    /// Continuations per ensemble target.
    pub ensemble_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: 900,
            n_steps: 50,
            stride: 10,
            ensemble_size: 50,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        if self.stride < 1 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if self.n_steps < self.stride {
            return Err(Error::InvalidConfig(
                "n_steps must be at least one stride".into(),
            ));
        }
        if self.ensemble_size < 1 {
            return Err(Error::InvalidEnsembleSize(self.ensemble_size));
        }
        Ok(())
    }
}

const TRAIN_STREAM: u64 = 0;
const ENSEMBLE_STREAM: u64 = 1;

/// Seed and uniformly drawn single-cell ignition for trajectory `index`.
fn draw_sample(burnable: &[usize], master_seed: u64, stream: u64, index: u64) -> SampleRecord {
    let seed = rng::derive_path(master_seed, &[stream, index]);
    let mut r = rng::stream(rng::derive_seed(seed, 0));
    let ignition = burnable[r.gen_range(0..burnable.len())];
    SampleRecord { seed, ignition }
}

fn ca_seed(sample: &SampleRecord) -> u64 {
    rng::derive_seed(sample.seed, 1)
}

fn run_trajectory(model: &CaModel, sample: &SampleRecord, n_steps: usize) -> Result<Trajectory> {
    model.simulate(&[sample.ignition], n_steps, ca_seed(sample))
}

/// Runs `cfg.n_samples` simulations from random ignitions and returns the
/// consecutive pairs of the frames `s_0, s_stride, ...`.
pub fn make_training_dataset(
    terrain: &TerrainLayers,
    params: &CaParams,
    cfg: &DatasetConfig,
    master_seed: u64,
) -> Result<(Dataset, Manifest)> {
    cfg.validate()?;
    let model = CaModel::new(terrain, *params)?;
    let burnable = terrain.burnable_cells();
    if burnable.is_empty() {
        return Err(Error::NoBurnableCells);
    }
    let samples: Vec<SampleRecord> = (0..cfg.n_samples as u64)
        .map(|i| draw_sample(&burnable, master_seed, TRAIN_STREAM, i))
        .collect();
    let per_traj = samples
        .par_iter()
        .map(|s| {
            let traj = run_trajectory(&model, s, cfg.n_steps)?;
            let frames: Vec<FireFrame> = traj
                .states
                .iter()
                .step_by(cfg.stride)
                .map(binarize)
                .collect();
            Ok(frames
                .windows(2)
                .map(|w| Pair {
                    input: w[0].clone(),
                    target: w[1].clone(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        kind: DatasetKind::Train,
        width: terrain.width,
        height: terrain.height,
        pairs: per_traj.into_iter().flatten().collect(),
    };
    let manifest = Manifest {
        kind: DatasetKind::Train,
        width: terrain.width,
        height: terrain.height,
        master_seed,
        n_steps: cfg.n_steps,
        stride: cfg.stride,
        ensemble_size: 1,
        params_hash: params.hash_hex(),
        samples,
    };
    Ok((dataset, manifest))
}

/// Builds `(x_n, mean of m continuations)` pairs from fresh trajectories.
///
/// Trajectories draw from a seed stream separate from the training one; any
/// `(seed, ignition)` that also appears in `exclude` is skipped.
pub fn make_ensemble_dataset(
    terrain: &TerrainLayers,
    params: &CaParams,
    cfg: &DatasetConfig,
    master_seed: u64,
    exclude: Option<&Manifest>,
) -> Result<(Dataset, Manifest)> {
    cfg.validate()?;
    let model = CaModel::new(terrain, *params)?;
    let burnable = terrain.burnable_cells();
    if burnable.is_empty() {
        return Err(Error::NoBurnableCells);
    }
    let taken: HashSet<&SampleRecord> = exclude.map(|m| m.samples.iter().collect()).unwrap_or_default();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut index = 0u64;
    while samples.len() < cfg.n_samples {
        let s = draw_sample(&burnable, master_seed, ENSEMBLE_STREAM, index);
        index += 1;
        if !taken.contains(&s) {
            samples.push(s);
        }
    }
    let pairs_per_traj = cfg.n_steps / cfg.stride;
    let jobs: Vec<(usize, usize)> = (0..samples.len())
        .flat_map(|i| (0..pairs_per_traj).map(move |k| (i, k)))
        .collect();
    let trajectories = samples
        .par_iter()
        .map(|s| run_trajectory(&model, s, cfg.n_steps))
        .collect::<Result<Vec<_>>>()?;
    let pairs = jobs
        .par_iter()
        .map(|&(i, k)| {
            let state = &trajectories[i].states[k * cfg.stride];
            let seed = rng::derive_path(samples[i].seed, &[2, k as u64]);
            let mean = model.ensemble_next(state, cfg.ensemble_size, cfg.stride, seed)?;
            Ok(Pair {
                input: binarize(state),
                target: FireFrame {
                    width: terrain.width,
                    height: terrain.height,
                    values: mean,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        kind: DatasetKind::Ensemble,
        width: terrain.width,
        height: terrain.height,
        pairs,
    };
    let manifest = Manifest {
        kind: DatasetKind::Ensemble,
        width: terrain.width,
        height: terrain.height,
        master_seed,
        n_steps: cfg.n_steps,
        stride: cfg.stride,
        ensemble_size: cfg.ensemble_size,
        params_hash: params.hash_hex(),
        samples,
    };
    Ok((dataset, manifest))
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let n = ds.width * ds.height;
    let mut out = Vec::with_capacity(21 + ds.pairs.len() * 8 * n);
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_u32(&mut out, ds.pairs.len() as u32);
    put_u32(&mut out, ds.height as u32);
    put_u32(&mut out, ds.width as u32);
    out.push(ds.kind.code());
    for p in &ds.pairs {
        put_f32s(&mut out, &p.input.values);
        put_f32s(&mut out, &p.target.values);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(corrupt("bad dataset magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = checked_cells(height, width)?;
    let kind = DatasetKind::from_code(r.u8()?).ok_or_else(|| corrupt("unknown dataset kind"))?;
    let expected = count
        .checked_mul(n)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| corrupt("pair count overflow"))?;
    if r.remaining() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            r.remaining()
        )));
    }
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let input = r.f32_vec(n)?;
        check_range(&input, 2 * i * n)?;
        let target = r.f32_vec(n)?;
        check_range(&target, (2 * i + 1) * n)?;
        pairs.push(Pair {
            input: FireFrame {
                width,
                height,
                values: input,
            },
            target: FireFrame {
                width,
                height,
                values: target,
            },
        });
    }
    Ok(Dataset {
        kind,
        width,
        height,
        pairs,
    })
}

fn checked_cells(height: usize, width: usize) -> Result<usize> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0 && n <= MAX_CELLS)
        .ok_or_else(|| corrupt(format!("bad dimensions {height}x{width}")))
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    std::fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

/// Trajectory layout: `"PCTR" | u32 version | u32 H | u32 W | u32 frames |
/// u64 seed | u32 n_ignition | n_ignition x u32 | frames x H*W u8 states`.
pub fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let (h, w) = t
        .states
        .first()
        .map(|s| (s.height, s.width))
        .unwrap_or((0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    put_u32(&mut out, TRAJECTORY_VERSION);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    put_u32(&mut out, t.states.len() as u32);
    put_u64(&mut out, t.seed);
    put_u32(&mut out, t.ignition.len() as u32);
    for &c in &t.ignition {
        put_u32(&mut out, c as u32);
    }
    for s in &t.states {
        out.extend(s.cells.iter().map(|&c| c as u8));
    }
    out
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TRAJECTORY_MAGIC {
        return Err(corrupt("bad trajectory magic"));
    }
    let version = r.u32()?;
    if version != TRAJECTORY_VERSION {
        return Err(Error::VersionMismatch {
            expected: TRAJECTORY_VERSION,
            found: version,
        });
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = checked_cells(height, width)?;
    let frames = r.u32()? as usize;
    let seed = r.u64()?;
    let n_ign = r.u32()? as usize;
    if n_ign > n {
        return Err(corrupt("more ignition cells than grid cells"));
    }
    let ignition = (0..n_ign)
        .map(|_| {
            let c = r.u32()? as usize;
            if c >= n {
                return Err(corrupt(format!("ignition cell {c} outside grid")));
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    if frames == 0 || frames.checked_mul(n) != Some(r.remaining()) {
        return Err(corrupt("trajectory payload size does not match header"));
    }
    let mut states = Vec::with_capacity(frames);
    for _ in 0..frames {
        let cells = r
            .take(n)?
            .iter()
            .map(|&b| CellState::from_u8(b).ok_or_else(|| corrupt(format!("bad cell state {b}"))))
            .collect::<Result<Vec<_>>>()?;
        states.push(FireGrid {
            width,
            height,
            cells,
        });
    }
    Ok(Trajectory {
        states,
        seed,
        ignition,
    })
}

/// Frame stack layout: `"PCFS" | u32 version | u32 count | u32 H | u32 W |
/// count x H*W f32`.
pub fn encode_frames(frames: &[FireFrame]) -> Result<Vec<u8>> {
    let (h, w) = frames
        .first()
        .map(FireFrame::dims)
        .ok_or_else(|| Error::InvalidConfig("empty frame stack".into()))?;
    let mut out = Vec::with_capacity(20 + frames.len() * 4 * h * w);
    out.extend_from_slice(FRAMES_MAGIC);
    put_u32(&mut out, FRAMES_VERSION);
    put_u32(&mut out, frames.len() as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    for f in frames {
        if f.dims() != (h, w) {
            return Err(Error::DimensionMismatch {
                expected: (h, w),
                got: f.dims(),
            });
        }
        put_f32s(&mut out, &f.values);
    }
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Vec<FireFrame>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FRAMES_MAGIC {
        return Err(corrupt("bad frame-stack magic"));
    }
    let version = r.u32()?;
    if version != FRAMES_VERSION {
        return Err(Error::VersionMismatch {
            expected: FRAMES_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = checked_cells(height, width)?;
    if count == 0 || count.checked_mul(n * 4) != Some(r.remaining()) {
        return Err(corrupt("frame-stack payload size does not match header"));
    }
    (0..count)
        .map(|i| {
            let values = r.f32_vec(n)?;
            check_range(&values, i * n)?;
            Ok(FireFrame {
                width,
                height,
                values,
            })
        })
        .collect()
}

pub fn save_frames(path: &Path, frames: &[FireFrame]) -> Result<()> {
    std::fs::write(path, encode_frames(frames)?).map_err(|e| Error::io(path, e))
}

pub fn load_frames(path: &Path) -> Result<Vec<FireFrame>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frames(&bytes)
}

pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    std::fs::write(path, encode_trajectory(t)).map_err(|e| Error::io(path, e))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectory(&bytes)
}

/// 8-bit grey level of a frame value, rounding halves up.
pub fn grey_level(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8
}

pub fn frame_to_image(frame: &FireFrame) -> image::GrayImage {
    image::GrayImage::from_fn(frame.width as u32, frame.height as u32, |x, y| {
        image::Luma([grey_level(frame.values[y as usize * frame.width + x as usize])])
    })
}

pub fn export_png(frame: &FireFrame, path: &Path) -> Result<()> {
    frame_to_image(frame)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}
