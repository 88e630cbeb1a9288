//! Stochastic cellular-automaton wildfire simulator.
//!
//! Cells take one of four states. At every step each unburnt cell faces an
//! independent ignition trial from every burning 8-neighbour, with success
//! probability
//!
//! ```text
//! p_burn = p_h (1 + p_veg) (1 + p_den) p_wind p_slope
//! ```
//!
//! clamped to `[0, 1]`. Burning cells burn out after exactly one step.

mod grid;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};

pub use grid::{CellState, FireGrid, TerrainLayers};

/// Neighbour offsets `(drow, dcol)`, clockwise from north. Row 0 is the
/// northern edge of the grid.
pub const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

/// Compass bearing (degrees) of each entry in [`NEIGHBOURS`].
pub const BEARINGS: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

/// Constant wind forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindField {
    /// m/s
    pub speed: f64,
    /// Azimuth the wind blows toward, degrees clockwise from north.
    pub direction_deg: f64,
    /// Wind-speed coefficient (s/m).
    pub c1: f64,
    /// Wind-alignment coefficient (s/m).
    pub c2: f64,
}

impl Default for WindField {
    fn default() -> Self {
        Self {
            speed: 0.0,
            direction_deg: 0.0,
            c1: 0.045,
            c2: 0.131,
        }
    }
}

impl WindField {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "wind speed must be finite and >= 0, got {}",
                self.speed
            )));
        }
        if !(0.0..360.0).contains(&self.direction_deg) {
            return Err(Error::InvalidConfig(format!(
                "wind direction must lie in [0, 360), got {}",
                self.direction_deg
            )));
        }
        if !(self.c1.is_finite() && self.c2.is_finite()) {
            return Err(Error::InvalidConfig("wind coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters of the burn-probability model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaParams {
    /// Standard burning probability.
    pub p_h: f64,
    /// Slope coefficient, per degree.
    pub a_slope: f64,
    pub wind: WindField,
    pub seed: u64,
}

impl Default for CaParams {
    fn default() -> Self {
        Self {
            p_h: 0.58,
            a_slope: 0.078,
            wind: WindField::default(),
            seed: 0,
        }
    }
}

impl CaParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_h) {
            return Err(Error::InvalidConfig(format!(
                "p_h must lie in [0, 1], got {}",
                self.p_h
            )));
        }
        if !self.a_slope.is_finite() {
            return Err(Error::InvalidConfig("a_slope must be finite".into()));
        }
        self.wind.validate()
    }

    /// Short content hash of the physical parameters (the seed is excluded).
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in [
            self.p_h,
            self.a_slope,
            self.wind.speed,
            self.wind.direction_deg,
            self.wind.c1,
            self.wind.c2,
        ] {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// `exp(c1 V) exp(V c2 (cos θ - 1))`, θ being the angle between the wind
/// direction and the propagation bearing.
pub fn wind_factor(wind: &WindField, neighbor_bearing_deg: f64) -> f64 {
    let theta = (wind.direction_deg - neighbor_bearing_deg).to_radians();
    let v = wind.speed;
    (wind.c1 * v).exp() * (v * wind.c2 * (theta.cos() - 1.0)).exp()
}

/// `exp(a θ_s)` with θ_s in degrees; positive slopes are uphill.
pub fn slope_factor(a_slope: f64, slope_deg: f64) -> f64 {
    (a_slope * slope_deg).exp()
}

/// Index into [`NEIGHBOURS`] of the step from `from` to `to`, if adjacent.
pub fn direction_between(width: usize, height: usize, from: usize, to: usize) -> Option<usize> {
    let n = width * height;
    if from >= n || to >= n {
        return None;
    }
    let (fr, fc) = ((from / width) as isize, (from % width) as isize);
    let (tr, tc) = ((to / width) as isize, (to % width) as isize);
    NEIGHBOURS
        .iter()
        .position(|&(dr, dc)| fr + dr == tr && fc + dc == tc)
}

/// Ignition probability for fire spreading from `from` into its neighbour `to`.
pub fn burn_probability(
    params: &CaParams,
    terrain: &TerrainLayers,
    from: usize,
    to: usize,
) -> Result<f64> {
    let dir = direction_between(terrain.width, terrain.height, from, to)
        .ok_or(Error::NonAdjacentCells { from, to })?;
    Ok(burn_probability_dir(params, terrain, from, to, dir))
}

fn burn_probability_dir(
    params: &CaParams,
    terrain: &TerrainLayers,
    from: usize,
    to: usize,
    dir: usize,
) -> f64 {
    if terrain.unburnable[to] {
        return 0.0;
    }
    let slope = terrain.slope_between(from, to, dir);
    let p = params.p_h
        * (1.0 + terrain.p_veg[to])
        * (1.0 + terrain.p_den[to])
        * wind_factor(&params.wind, BEARINGS[dir])
        * slope_factor(params.a_slope, slope);
    p.clamp(0.0, 1.0)
}

/// A full simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<FireGrid>,
    pub seed: u64,
    pub ignition: Vec<usize>,
}

/// Terrain and parameters bound together with a precomputed table of
/// per-direction ignition probabilities.
#[derive(Debug, Clone)]
pub struct CaModel<'a> {
    terrain: &'a TerrainLayers,
    params: CaParams,
    /// `p_in[cell * 8 + d]`: probability that a burning cell at
    /// `cell + NEIGHBOURS[d]` ignites `cell`.
    p_in: Vec<f64>,
}

impl<'a> CaModel<'a> {
    pub fn new(terrain: &'a TerrainLayers, params: CaParams) -> Result<Self> {
        params.validate()?;
        terrain.validate()?;
        let (w, h) = (terrain.width, terrain.height);
        let mut p_in = vec![0.0; w * h * 8];
        for cell in 0..w * h {
            let (r, c) = ((cell / w) as isize, (cell % w) as isize);
            for (d, &(dr, dc)) in NEIGHBOURS.iter().enumerate() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let src = nr as usize * w + nc as usize;
                // propagation runs from src back toward cell: opposite direction
                p_in[cell * 8 + d] = burn_probability_dir(&params, terrain, src, cell, (d + 4) % 8);
            }
        }
        Ok(Self {
            terrain,
            params,
            p_in,
        })
    }

    pub fn terrain(&self) -> &TerrainLayers {
        self.terrain
    }

    pub fn params(&self) -> &CaParams {
        &self.params
    }

    /// Probability that a burning neighbour in direction `d` ignites `cell`.
    pub fn incoming_probability(&self, cell: usize, d: usize) -> f64 {
        self.p_in[cell * 8 + d]
    }

    fn check_dims(&self, grid: &FireGrid) -> Result<()> {
        if grid.width != self.terrain.width || grid.height != self.terrain.height {
            return Err(Error::DimensionMismatch {
                expected: (self.terrain.height, self.terrain.width),
                got: (grid.height, grid.width),
            });
        }
        Ok(())
    }

    /// One synchronous update; advances `rng` by one step.
    pub fn step(&self, grid: &FireGrid, rng: &mut CounterRng) -> Result<FireGrid> {
        self.check_dims(grid)?;
        let mut next = grid.clone();
        self.step_into(grid, &mut next, rng);
        Ok(next)
    }

    fn step_into(&self, grid: &FireGrid, next: &mut FireGrid, rng: &mut CounterRng) {
        let (w, h) = (grid.width as isize, grid.height as isize);
        for (cell, state) in grid.cells.iter().enumerate() {
            next.cells[cell] = match state {
                CellState::Burning => CellState::Burnt,
                CellState::Unburnt => {
                    let (r, c) = (cell as isize / w, cell as isize % w);
                    let mut ignited = false;
                    for (d, &(dr, dc)) in NEIGHBOURS.iter().enumerate() {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= h || nc >= w {
                            continue;
                        }
                        if grid.cells[(nr * w + nc) as usize] != CellState::Burning {
                            continue;
                        }
                        // every trial is drawn so the stream stays aligned
                        if rng.uniform(cell, d) < self.p_in[cell * 8 + d] {
                            ignited = true;
                        }
                    }
                    if ignited {
                        CellState::Burning
                    } else {
                        CellState::Unburnt
                    }
                }
                s => *s,
            };
        }
        rng.advance();
    }

    /// Initial state with the given cells burning.
    pub fn ignite(&self, ignition: &[usize]) -> Result<FireGrid> {
        let mut grid = FireGrid::from_terrain(self.terrain);
        for &cell in ignition {
            if cell >= grid.cells.len() {
                return Err(Error::IgnitionOutOfBounds(cell));
            }
            if self.terrain.unburnable[cell] {
                return Err(Error::IgnitionOnUnburnable(cell));
            }
            grid.cells[cell] = CellState::Burning;
        }
        Ok(grid)
    }

    /// Runs `n_steps` steps from an ignition set, returning `n_steps + 1` states.
    pub fn simulate(&self, ignition: &[usize], n_steps: usize, seed: u64) -> Result<Trajectory> {
        let mut rng = CounterRng::new(seed);
        let mut states = Vec::with_capacity(n_steps + 1);
        states.push(self.ignite(ignition)?);
        for _ in 0..n_steps {
            let prev = states.last().expect("non-empty");
            let mut next = prev.clone();
            self.step_into(prev, &mut next, &mut rng);
            states.push(next);
        }
        Ok(Trajectory {
            states,
            seed,
            ignition: ignition.to_vec(),
        })
    }

    /// Advances `state` by `steps` steps with a fresh stream for `seed`.
    pub fn continue_from(&self, state: &FireGrid, steps: usize, seed: u64) -> Result<FireGrid> {
        self.check_dims(state)?;
        let mut rng = CounterRng::new(seed);
        let mut cur = state.clone();
        let mut next = state.clone();
        for _ in 0..steps {
            self.step_into(&cur, &mut next, &mut rng);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Pixelwise fraction of `m` independent continuations in which each cell
    /// is burning or burnt after `steps_per_frame` steps.
    pub fn ensemble_next(
        &self,
        state: &FireGrid,
        m: usize,
        steps_per_frame: usize,
        seed: u64,
    ) -> Result<Vec<f32>> {
        if m < 1 {
            return Err(Error::InvalidEnsembleSize(m));
        }
        if steps_per_frame < 1 {
            return Err(Error::InvalidConfig("steps_per_frame must be >= 1".into()));
        }
        self.check_dims(state)?;
        let n = state.cells.len();
        let counts = (0..m)
            .into_par_iter()
            .map(|j| {
                let end = self
                    .continue_from(state, steps_per_frame, derive_seed(seed, j as u64))
                    .expect("dims checked");
                end.cells
                    .iter()
                    .map(|s| s.is_fire() as u32)
                    .collect::<Vec<u32>>()
            })
            .reduce(
                || vec![0u32; n],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        let inv = 1.0 / m as f64;
        Ok(counts.into_iter().map(|c| (c as f64 * inv) as f32).collect())
    }
}

/// Single synchronous step; see [`CaModel::step`].
pub fn step(
    grid: &FireGrid,
    terrain: &TerrainLayers,
    params: &CaParams,
    rng: &mut CounterRng,
) -> Result<FireGrid> {
    CaModel::new(terrain, *params)?.step(grid, rng)
}

/// Full run seeded by `params.seed`; see [`CaModel::simulate`].
pub fn simulate(
    terrain: &TerrainLayers,
    params: &CaParams,
    ignition: &[usize],
    n_steps: usize,
) -> Result<Trajectory> {
    CaModel::new(terrain, *params)?.simulate(ignition, n_steps, params.seed)
}

/// Ensemble-averaged binarized continuation; see [`CaModel::ensemble_next`].
pub fn ensemble_next(
    state: &FireGrid,
    terrain: &TerrainLayers,
    params: &CaParams,
    m: usize,
    steps_per_frame: usize,
) -> Result<Vec<f32>> {
    CaModel::new(terrain, *params)?.ensemble_next(state, m, steps_per_frame, params.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat(w: usize, h: usize) -> TerrainLayers {
        TerrainLayers::uniform(w, h)
    }

    #[test]
    fn wind_factor_values() {
        let calm = WindField::default();
        for b in BEARINGS {
            assert_eq!(wind_factor(&calm, b), 1.0);
        }
        let wind = WindField {
            speed: 2.0,
            direction_deg: 0.0,
            c1: 0.045,
            c2: 0.131,
        };
        assert_relative_eq!(wind_factor(&wind, 0.0), 1.094_174_283_705_210_4, epsilon = 1e-12);
        assert_relative_eq!(wind_factor(&wind, 180.0), 0.647_912_255_485_350_6, epsilon = 1e-12);
        // maximal when aligned
        for b in BEARINGS {
            assert!(wind_factor(&wind, b) <= wind_factor(&wind, 0.0));
        }
    }

    #[test]
    fn slope_factor_values() {
        assert_eq!(slope_factor(0.078, 0.0), 1.0);
        assert_relative_eq!(slope_factor(0.078, 10.0), 2.181_472_265_498_201, epsilon = 1e-9);
        assert_relative_eq!(slope_factor(0.078, -10.0), 0.458_406_011_305_223_5, epsilon = 1e-9);
    }

    #[test]
    fn burn_probability_cases() {
        let mut t = flat(3, 3);
        let p = CaParams {
            p_h: 0.5,
            ..CaParams::default()
        };
        assert_eq!(burn_probability(&p, &t, 4, 0).unwrap(), 0.5);
        t.unburnable[0] = true;
        assert_eq!(burn_probability(&p, &t, 4, 0).unwrap(), 0.0);

        let mut t = flat(3, 3);
        t.p_veg.iter_mut().for_each(|v| *v = 0.4);
        t.p_den.iter_mut().for_each(|v| *v = 0.3);
        let p = CaParams {
            p_h: 0.58,
            ..CaParams::default()
        };
        // 0.58 * 1.4 * 1.3 = 1.0556 before clamping
        assert_eq!(burn_probability(&p, &t, 4, 8).unwrap(), 1.0);
    }

    #[test]
    fn non_adjacent_is_rejected() {
        let t = flat(4, 4);
        let p = CaParams::default();
        assert!(matches!(
            burn_probability(&p, &t, 0, 2),
            Err(Error::NonAdjacentCells { from: 0, to: 2 })
        ));
        assert!(matches!(
            burn_probability(&p, &t, 0, 0),
            Err(Error::NonAdjacentCells { .. })
        ));
        // no wraparound: last column of row 0 and first column of row 1
        assert!(burn_probability(&p, &t, 3, 4).is_err());
    }

    #[test]
    fn elevation_slope_is_directional() {
        let mut t = flat(3, 3);
        let mut elev = vec![0.0; 9];
        elev[1] = 1.0; // north of centre is higher
        t.elevation = Some(elev);
        t.cell_size = 10.0;
        let deg = 0.1f64.atan().to_degrees();
        let p = CaParams {
            p_h: 0.2,
            ..CaParams::default()
        };
        let up = burn_probability(&p, &t, 4, 1).unwrap();
        let down = burn_probability(&p, &t, 1, 4).unwrap();
        assert_relative_eq!(up, 0.2 * slope_factor(0.078, deg), epsilon = 1e-12);
        assert_relative_eq!(down, 0.2 * slope_factor(0.078, -deg), epsilon = 1e-12);
    }

    #[test]
    fn no_burning_cells_is_a_fixed_point() {
        let t = flat(5, 5);
        let model = CaModel::new(&t, CaParams::default()).unwrap();
        let grid = FireGrid::from_terrain(&t);
        let mut rng = CounterRng::new(1);
        assert_eq!(model.step(&grid, &mut rng).unwrap(), grid);
    }

    #[test]
    fn isolated_fire_burns_out() {
        let mut t = flat(3, 3);
        t.unburnable.iter_mut().for_each(|u| *u = true);
        t.unburnable[4] = false;
        let model = CaModel::new(
            &t,
            CaParams {
                p_h: 1.0,
                ..CaParams::default()
            },
        )
        .unwrap();
        let traj = model.simulate(&[4], 3, 9).unwrap();
        assert_eq!(traj.states.len(), 4);
        assert_eq!(traj.states[0].cells[4], CellState::Burning);
        for s in &traj.states[1..] {
            for (i, c) in s.cells.iter().enumerate() {
                if i == 4 {
                    assert_eq!(*c, CellState::Burnt);
                } else {
                    assert_eq!(*c, CellState::Unburnable);
                }
            }
        }
    }

    #[test]
    fn deterministic_limit_ignites_all_neighbours() {
        let t = flat(3, 3);
        let model = CaModel::new(
            &t,
            CaParams {
                p_h: 1.0,
                ..CaParams::default()
            },
        )
        .unwrap();
        let s0 = model.ignite(&[4]).unwrap();
        let s1 = model.step(&s0, &mut CounterRng::new(3)).unwrap();
        for (i, c) in s1.cells.iter().enumerate() {
            let want = if i == 4 {
                CellState::Burnt
            } else {
                CellState::Burning
            };
            assert_eq!(*c, want, "cell {i}");
        }
    }

    #[test]
    fn zero_steps_gives_initial_state_only() {
        let t = flat(4, 4);
        let traj = simulate(&t, &CaParams::default(), &[5], 0).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.states[0].cells[5], CellState::Burning);
    }

    #[test]
    fn ignition_errors() {
        let mut t = flat(4, 4);
        t.unburnable[5] = true;
        assert!(matches!(
            simulate(&t, &CaParams::default(), &[5], 3),
            Err(Error::IgnitionOnUnburnable(5))
        ));
        assert!(matches!(
            simulate(&t, &CaParams::default(), &[16], 3),
            Err(Error::IgnitionOutOfBounds(16))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let t = flat(4, 4);
        let model = CaModel::new(&t, CaParams::default()).unwrap();
        let other = FireGrid::new(3, 4);
        assert!(matches!(
            model.step(&other, &mut CounterRng::new(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ensemble_of_one_matches_single_continuation() {
        let t = flat(6, 6);
        let model = CaModel::new(&t, CaParams::default()).unwrap();
        let s0 = model.ignite(&[14]).unwrap();
        let mean = model.ensemble_next(&s0, 1, 3, 77).unwrap();
        let single = model.continue_from(&s0, 3, derive_seed(77, 0)).unwrap();
        let bin: Vec<f32> = single.cells.iter().map(|c| c.is_fire() as u8 as f32).collect();
        assert_eq!(mean, bin);
        assert!(matches!(
            model.ensemble_next(&s0, 0, 3, 77),
            Err(Error::InvalidEnsembleSize(0))
        ));
    }

    #[test]
    fn ensemble_deterministic_limit_is_binary() {
        let t = flat(5, 5);
        let model = CaModel::new(
            &t,
            CaParams {
                p_h: 1.0,
                ..CaParams::default()
            },
        )
        .unwrap();
        let s0 = model.ignite(&[12]).unwrap();
        let mean = model.ensemble_next(&s0, 17, 1, 5).unwrap();
        assert!(mean.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
