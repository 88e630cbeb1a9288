use crate::error::{Error, Result};

use super::NEIGHBOURS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CellState {
    Unburnable = 0,
    Unburnt = 1,
    Burning = 2,
    Burnt = 3,
}

impl CellState {
    /// Burning or burnt.
    #[inline]
    pub fn is_fire(self) -> bool {
        matches!(self, CellState::Burning | CellState::Burnt)
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => CellState::Unburnable,
            1 => CellState::Unburnt,
            2 => CellState::Burning,
            3 => CellState::Burnt,
            _ => return None,
        })
    }
}

/// Simulator state: a row-major `height x width` lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FireGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellState>,
}

impl FireGrid {
    /// All cells unburnt.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![CellState::Unburnt; width * height],
        }
    }

    /// Unburnt everywhere except the terrain's unburnable cells.
    pub fn from_terrain(terrain: &TerrainLayers) -> Self {
        Self {
            width: terrain.width,
            height: terrain.height,
            cells: terrain
                .unburnable
                .iter()
                .map(|&u| {
                    if u {
                        CellState::Unburnable
                    } else {
                        CellState::Unburnt
                    }
                })
                .collect(),
        }
    }

    pub fn fire_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_fire()).count()
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }
}

/// Per-cell inputs of the burn-probability model.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainLayers {
    pub width: usize,
    pub height: usize,
    /// Vegetation-cover factor, >= -1.
    pub p_veg: Vec<f64>,
    /// Vegetation-density factor, >= -1.
    pub p_den: Vec<f64>,
    /// Terrain slope in degrees, used when no elevation is given.
    pub slope_deg: Vec<f64>,
    /// Elevation in metres; when present the slope between two cells is
    /// derived from it.
    pub elevation: Option<Vec<f64>>,
    /// Cell edge length in metres.
    pub cell_size: f64,
    pub unburnable: Vec<bool>,
}

impl TerrainLayers {
    /// Flat, homogeneous, fully burnable terrain.
    pub fn uniform(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            p_veg: vec![0.0; n],
            p_den: vec![0.0; n],
            slope_deg: vec![0.0; n],
            elevation: None,
            cell_size: 1.0,
            unburnable: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidTerrain("dimensions must be positive".into()));
        }
        let n = self.len();
        let mut lens = vec![
            ("p_veg", self.p_veg.len()),
            ("p_den", self.p_den.len()),
            ("slope_deg", self.slope_deg.len()),
            ("unburnable", self.unburnable.len()),
        ];
        if let Some(e) = &self.elevation {
            lens.push(("elevation", e.len()));
        }
        for (name, len) in lens {
            if len != n {
                return Err(Error::InvalidTerrain(format!(
                    "layer {name} has {len} cells, expected {n}"
                )));
            }
        }
        for (name, layer) in [("p_veg", &self.p_veg), ("p_den", &self.p_den)] {
            if let Some((i, v)) = layer
                .iter()
                .enumerate()
                .find(|(_, v)| !(v.is_finite() && **v >= -1.0))
            {
                return Err(Error::InvalidTerrain(format!(
                    "{name}[{i}] = {v} must be finite and >= -1"
                )));
            }
        }
        if self.slope_deg.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTerrain("slope_deg must be finite".into()));
        }
        if let Some(e) = &self.elevation {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTerrain("elevation must be finite".into()));
            }
            if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
                return Err(Error::InvalidTerrain("cell_size must be positive".into()));
            }
        }
        Ok(())
    }

    /// Slope (degrees) seen by fire travelling from `from` to its neighbour
    /// `to` in direction `dir`.
    pub fn slope_between(&self, from: usize, to: usize, dir: usize) -> f64 {
        match &self.elevation {
            Some(elev) => {
                let (dr, dc) = NEIGHBOURS[dir];
                let dist = if dr != 0 && dc != 0 {
                    self.cell_size * std::f64::consts::SQRT_2
                } else {
                    self.cell_size
                };
                ((elev[to] - elev[from]) / dist).atan().to_degrees()
            }
            None => self.slope_deg[to],
        }
    }

    pub fn burnable_cells(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.unburnable[i]).collect()
    }
}
