//! Terrain raster I/O and a synthetic terrain generator.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! "PCST" | u32 version | u32 H | u32 W | u32 layer_count
//! repeated layer_count times: [u8; 16] ASCII name (NUL padded) | H*W f32 row-major
//! ```
//!
//! Recognised layer names are `p_veg`, `p_den`, `slope_deg`, `elevation` and
//! `unburnable` (non-zero means unburnable). `p_veg` and `p_den` are required.
//!
//! The text form holds one whitespace-separated matrix per `[name]` section;
//! `#` starts a comment.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ca::TerrainLayers;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::rng;

pub const TERRAIN_MAGIC: &[u8; 4] = b"PCST";
pub const TERRAIN_VERSION: u32 = 1;
const NAME_LEN: usize = 16;
const MAX_CELLS: usize = 1 << 24;
const LAYER_NAMES: [&str; 5] = ["p_veg", "p_den", "slope_deg", "elevation", "unburnable"];

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptFile(msg.into())
}

#[derive(Default)]
struct LayerSet {
    layers: Vec<(String, Vec<f64>)>,
}

impl LayerSet {
    fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if !LAYER_NAMES.contains(&name) {
            return Err(corrupt(format!("unknown layer {name:?}")));
        }
        if self.layers.iter().any(|(n, _)| n == name) {
            return Err(corrupt(format!("duplicate layer {name:?}")));
        }
        self.layers.push((name.to_string(), values));
        Ok(())
    }

    fn take(&mut self, name: &str) -> Option<Vec<f64>> {
        let i = self.layers.iter().position(|(n, _)| n == name)?;
        Some(self.layers.swap_remove(i).1)
    }

    fn into_terrain(mut self, height: usize, width: usize) -> Result<TerrainLayers> {
        let n = height * width;
        let p_veg = self
            .take("p_veg")
            .ok_or_else(|| corrupt("missing layer p_veg"))?;
        let p_den = self
            .take("p_den")
            .ok_or_else(|| corrupt("missing layer p_den"))?;
        let slope_deg = self.take("slope_deg").unwrap_or_else(|| vec![0.0; n]);
        let elevation = self.take("elevation");
        let unburnable = self
            .take("unburnable")
            .map(|v| v.iter().map(|&x| x != 0.0).collect())
            .unwrap_or_else(|| vec![false; n]);
        let t = TerrainLayers {
            width,
            height,
            p_veg,
            p_den,
            slope_deg,
            elevation,
            cell_size: 1.0,
            unburnable,
        };
        t.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(t)
    }
}

/// Decodes a binary terrain raster.
pub fn decode_terrain(bytes: &[u8]) -> Result<TerrainLayers> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TERRAIN_MAGIC {
        return Err(corrupt("bad terrain magic"));
    }
    let version = r.u32()?;
    if version != TERRAIN_VERSION {
        return Err(Error::VersionMismatch {
            expected: TERRAIN_VERSION,
            found: version,
        });
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = height
        .checked_mul(width)
        .filter(|&n| n > 0 && n <= MAX_CELLS)
        .ok_or_else(|| corrupt(format!("bad dimensions {height}x{width}")))?;
    let count = r.u32()? as usize;
    if count > LAYER_NAMES.len() {
        return Err(corrupt(format!("too many layers: {count}")));
    }
    let mut set = LayerSet::default();
    for _ in 0..count {
        let raw = r.take(NAME_LEN)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
        if raw[end..].iter().any(|&b| b != 0) {
            return Err(corrupt("layer name has bytes after NUL padding"));
        }
        let name = std::str::from_utf8(&raw[..end])
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| corrupt("layer name is not ASCII"))?;
        let values = r.f32_vec(n)?.into_iter().map(f64::from).collect();
        set.insert(name, values)?;
    }
    if !r.is_empty() {
        return Err(corrupt("trailing bytes after terrain layers"));
    }
    set.into_terrain(height, width)
}

/// Encodes a terrain raster; the inverse of [`decode_terrain`] up to f32
/// rounding.
pub fn encode_terrain(t: &TerrainLayers) -> Vec<u8> {
    let n = t.len();
    let mut layers: Vec<(&str, Vec<f32>)> = vec![
        ("p_veg", t.p_veg.iter().map(|&v| v as f32).collect()),
        ("p_den", t.p_den.iter().map(|&v| v as f32).collect()),
        ("slope_deg", t.slope_deg.iter().map(|&v| v as f32).collect()),
    ];
    if let Some(e) = &t.elevation {
        layers.push(("elevation", e.iter().map(|&v| v as f32).collect()));
    }
    layers.push((
        "unburnable",
        t.unburnable.iter().map(|&u| u as u8 as f32).collect(),
    ));
    let mut out = Vec::with_capacity(20 + layers.len() * (NAME_LEN + 4 * n));
    out.extend_from_slice(TERRAIN_MAGIC);
    out.extend_from_slice(&TERRAIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.height as u32).to_le_bytes());
    out.extend_from_slice(&(t.width as u32).to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for (name, values) in layers {
        let mut raw = [0u8; NAME_LEN];
        raw[..name.len()].copy_from_slice(name.as_bytes());
        out.extend_from_slice(&raw);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses the plain-text terrain form.
pub fn parse_terrain_text(text: &str) -> Result<TerrainLayers> {
    let mut set = LayerSet::default();
    let mut dims: Option<(usize, usize)> = None;
    let mut current: Option<(String, Vec<Vec<f64>>)> = None;

    let mut finish = |section: Option<(String, Vec<Vec<f64>>)>,
                      set: &mut LayerSet|
     -> Result<()> {
        let Some((name, rows)) = section else {
            return Ok(());
        };
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if h == 0 || w == 0 {
            return Err(corrupt(format!("section [{name}] is empty")));
        }
        if rows.iter().any(|r| r.len() != w) {
            return Err(corrupt(format!("section [{name}] has ragged rows")));
        }
        if h.saturating_mul(w) > MAX_CELLS {
            return Err(corrupt(format!("section [{name}] is too large")));
        }
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(corrupt(format!(
                    "section [{name}] is {h}x{w}, expected {}x{}",
                    d.0, d.1
                )))
            }
            _ => {}
        }
        set.insert(&name, rows.into_iter().flatten().collect())
    };

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| corrupt(format!("line {}: unterminated section", lineno + 1)))?
                .trim()
                .to_string();
            finish(current.take(), &mut set)?;
            current = Some((name, Vec::new()));
            continue;
        }
        let (_, rows) = current
            .as_mut()
            .ok_or_else(|| corrupt(format!("line {}: values before any section", lineno + 1)))?;
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| corrupt(format!("line {}: bad number {tok:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    finish(current.take(), &mut set)?;
    let (h, w) = dims.ok_or_else(|| corrupt("no sections"))?;
    set.into_terrain(h, w)
}

/// Renders terrain in the plain-text form.
pub fn terrain_to_text(t: &TerrainLayers) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let mut section = |name: &str, values: &mut dyn Iterator<Item = f64>| {
        writeln!(s, "[{name}]").unwrap();
        let values: Vec<f64> = values.collect();
        for row in values.chunks(t.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
    };
    section("p_veg", &mut t.p_veg.iter().copied());
    section("p_den", &mut t.p_den.iter().copied());
    section("slope_deg", &mut t.slope_deg.iter().copied());
    if let Some(e) = &t.elevation {
        section("elevation", &mut e.iter().copied());
    }
    section(
        "unburnable",
        &mut t.unburnable.iter().map(|&u| u as u8 as f64),
    );
    s
}

/// Loads a terrain file, choosing the binary decoder when the file starts
/// with the binary magic and the text parser otherwise.
pub fn load_terrain(path: &Path) -> Result<TerrainLayers> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TERRAIN_MAGIC) {
        decode_terrain(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| corrupt("terrain text is not UTF-8"))?;
        parse_terrain_text(text)
    }
}

pub fn save_terrain(path: &Path, t: &TerrainLayers) -> Result<()> {
    std::fs::write(path, encode_terrain(t)).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic terrain generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTerrain {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub veg_mean: f64,
    pub veg_amplitude: f64,
    pub den_mean: f64,
    pub den_amplitude: f64,
    /// Elevation range in metres.
    pub relief: f64,
    pub cell_size: f64,
    /// Target fraction of unburnable cells, formed as smooth patches.
    pub unburnable_fraction: f64,
    /// Coarsest noise wavelength in cells.
    pub feature_scale: f64,
}

impl Default for SyntheticTerrain {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            seed: 1,
            veg_mean: 0.0,
            veg_amplitude: 0.3,
            den_mean: 0.0,
            den_amplitude: 0.3,
            relief: 60.0,
            cell_size: 30.0,
            unburnable_fraction: 0.08,
            feature_scale: 16.0,
        }
    }
}

impl SyntheticTerrain {
    pub fn generate(&self) -> Result<TerrainLayers> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return Err(Error::InvalidConfig("terrain dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unburnable_fraction) {
            return Err(Error::InvalidConfig(
                "unburnable_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.feature_scale >= 1.0 && self.cell_size > 0.0) {
            return Err(Error::InvalidConfig(
                "feature_scale must be >= 1 and cell_size > 0".into(),
            ));
        }
        let field = |k: u64| value_noise(w, h, self.feature_scale, rng::derive_seed(self.seed, k));
        let veg: Vec<f64> = field(0)
            .into_iter()
            .map(|z| (self.veg_mean + self.veg_amplitude * z).max(-1.0))
            .collect();
        let den: Vec<f64> = field(1)
            .into_iter()
            .map(|z| (self.den_mean + self.den_amplitude * z).max(-1.0))
            .collect();
        let elevation: Vec<f64> = field(2)
            .into_iter()
            .map(|z| 0.5 * self.relief * (z + 1.0))
            .collect();

        let mut slope_deg = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let at = |rr: usize, cc: usize| elevation[rr * w + cc];
                let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
                let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
                let dzdx = (at(r, c1) - at(r, c0)) / (((c1 - c0).max(1)) as f64 * self.cell_size);
                let dzdy = (at(r1, c) - at(r0, c)) / (((r1 - r0).max(1)) as f64 * self.cell_size);
                slope_deg[r * w + c] = dzdx.hypot(dzdy).atan().to_degrees();
            }
        }

        let mut unburnable = vec![false; w * h];
        if self.unburnable_fraction > 0.0 {
            let mask = field(3);
            let mut sorted = mask.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let k = ((self.unburnable_fraction * (w * h) as f64).round() as usize).min(w * h - 1);
            if k > 0 {
                let cut = sorted[k - 1];
                for (u, &m) in unburnable.iter_mut().zip(&mask) {
                    *u = m >= cut;
                }
            }
        }

        let t = TerrainLayers {
            width: w,
            height: h,
            p_veg: veg,
            p_den: den,
            slope_deg,
            elevation: Some(elevation),
            cell_size: self.cell_size,
            unburnable,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Smooth multi-octave value noise scaled to roughly `[-1, 1]`.
fn value_noise(w: usize, h: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut wavelength = scale;
    let mut octave = 0u64;
    while wavelength >= 2.0 || octave == 0 {
        let gw = (w as f64 / wavelength).ceil() as usize + 2;
        let gh = (h as f64 / wavelength).ceil() as usize + 2;
        let mut r = rng::stream(rng::derive_seed(seed, octave));
        let lattice: Vec<f64> = (0..gw * gh).map(|_| r.gen_range(-1.0..1.0)).collect();
        for y in 0..h {
            let fy = y as f64 / wavelength;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / wavelength;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let g = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                out[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        norm += amp;
        amp *= 0.5;
        wavelength *= 0.5;
        octave += 1;
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

#[inline]
fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_terrain_is_deterministic_and_valid() {
        let cfg = SyntheticTerrain {
            width: 20,
            height: 12,
            ..Default::default()
        };
        let a = cfg.generate().unwrap();
        let b = cfg.generate().unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let blocked = a.unburnable.iter().filter(|&&u| u).count();
        let target = (cfg.unburnable_fraction * 240.0).round() as usize;
        assert!(blocked >= target && blocked <= target + 3, "{blocked} vs {target}");
    }

    #[test]
    fn binary_round_trip() {
        let t = SyntheticTerrain {
            width: 7,
            height: 5,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let back = decode_terrain(&encode_terrain(&t)).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        assert_eq!(back.unburnable, t.unburnable);
        for (a, b) in back.p_veg.iter().zip(&t.p_veg) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(back.elevation.is_some());
    }

    #[test]
    fn text_form_parses_and_round_trips() {
        let text = "\
# hand fixture
[p_veg]
0.1 0.2
0.0 -0.5
[p_den]
0 0
0 0
[unburnable]
0 1
0 0
";
        let t = parse_terrain_text(text).unwrap();
        assert_eq!((t.height, t.width), (2, 2));
        assert_eq!(t.p_veg, vec![0.1, 0.2, 0.0, -0.5]);
        assert_eq!(t.unburnable, vec![false, true, false, false]);
        assert_eq!(t.slope_deg, vec![0.0; 4]);
        let again = parse_terrain_text(&terrain_to_text(&t)).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn text_form_errors() {
        assert!(parse_terrain_text("").is_err());
        assert!(parse_terrain_text("1 2\n").is_err());
        assert!(parse_terrain_text("[p_veg]\n1 2\n3\n[p_den]\n0 0\n0 0\n").is_err());
        assert!(parse_terrain_text("[p_veg]\n0\n[p_den]\n0 0\n").is_err());
        assert!(parse_terrain_text("[p_veg]\n0\n[p_den]\n0\n[wind]\n1\n").is_err());
        assert!(parse_terrain_text("[p_veg]\n-2\n[p_den]\n0\n").is_err());
        assert!(parse_terrain_text("[p_veg]\nx\n[p_den]\n0\n").is_err());
    }

    #[test]
    fn binary_errors() {
        let t = TerrainLayers::uniform(3, 2);
        let good = encode_terrain(&t);
        assert!(matches!(
            decode_terrain(&good[..good.len() - 1]),
            Err(Error::CorruptFile(_))
        ));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_terrain(&bad).is_err());
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_terrain(&v2),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        let mut huge = good;
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_terrain(&huge).is_err());
    }
}
