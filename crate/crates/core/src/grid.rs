//! Shunting-neuron lattice.
//!
//! Every cell of the workspace is one neuron whose activity obeys
//!
//! ```text
//! dx_k/dt = -A x_k + (B - x_k)([I_k]+ + sum_l w_kl [x_l]+)
//!                  - (D + x_k)([I_k]- + sum_l g_kl [x_l - sigma]-)
//! ```
//!
//! with lateral connections restricted to the eight surrounding cells.
//! Excitation spreads over the whole lattice while inhibition only leaks
//! past cells whose activity has dropped below `sigma`, so obstacles repel
//! locally and sources attract globally.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("lateral weight is undefined between a neuron and itself at {0}")]
    SelfConnection(Cell),
    #[error("cell {cell} is outside the {width}x{height} lattice")]
    OutOfGrid { cell: Cell, width: usize, height: usize },
    #[error("activity integration diverged at cell {cell} (value {value}); step size too large")]
    Diverged { cell: Cell, value: f64 },
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("failed to write activity dump {path}: {message}")]
    Io { path: String, message: String },
}

/// Lattice coordinate: `col` runs along world x, `row` along world y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }

    pub fn distance(self, other: Cell) -> f64 {
        let dc = self.col as f64 - other.col as f64;
        let dr = self.row as f64 - other.row as f64;
        dc.hypot(dr)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShuntingParams {
    /// Passive decay rate.
    #[serde(rename = "A")]
    pub decay: f64,
    /// Upper activity bound.
    #[serde(rename = "B")]
    pub upper: f64,
    /// Lower activity bound (activity never drops below `-lower`).
    #[serde(rename = "D")]
    pub lower: f64,
    #[serde(rename = "mu")]
    pub lateral_gain: f64,
    #[serde(rename = "beta")]
    pub inhibitory_gain: f64,
    /// Inhibition propagates only from neighbors below this threshold.
    #[serde(rename = "sigma")]
    pub inhibitory_threshold: f64,
    #[serde(rename = "E")]
    pub input_magnitude: f64,
    /// Receptive-field radius in grid units.
    #[serde(rename = "r0")]
    pub receptive_radius: f64,
    /// Inner integration step.
    #[serde(rename = "h")]
    pub step: f64,
    /// Integration steps per simulation tick.
    pub n_relax: usize,
}

impl Default for ShuntingParams {
    fn default() -> Self {
        Self {
            decay: 15.0,
            upper: 1.0,
            lower: 1.0,
            lateral_gain: 1.0,
            inhibitory_gain: 1.0,
            inhibitory_threshold: -0.5,
            input_magnitude: 70.0,
            receptive_radius: std::f64::consts::SQRT_2,
            step: 0.01,
            n_relax: 50,
        }
    }
}

impl ShuntingParams {
    pub fn validate(&self) -> Result<(), GridError> {
        let checks: [(&'static str, f64, bool, &'static str); 9] = [
            ("A", self.decay, self.decay > 0.0, "must be positive"),
            ("B", self.upper, self.upper > 0.0, "must be positive"),
            ("D", self.lower, self.lower > 0.0, "must be positive"),
            ("mu", self.lateral_gain, self.lateral_gain > 0.0, "must be positive"),
            (
                "beta",
                self.inhibitory_gain,
                (0.0..=1.0).contains(&self.inhibitory_gain),
                "must lie in [0, 1]",
            ),
            (
                "sigma",
                self.inhibitory_threshold,
                self.inhibitory_threshold < 0.0,
                "must be negative",
            ),
            ("E", self.input_magnitude, self.input_magnitude > 0.0, "must be positive"),
            (
                "r0",
                self.receptive_radius,
                (1.0..2.0).contains(&self.receptive_radius),
                "must lie in [1, 2) so only the 8 surrounding cells connect",
            ),
            ("h", self.step, self.step > 0.0, "must be positive"),
        ];
        for (name, value, ok, reason) in checks {
            if !ok || !value.is_finite() {
                return Err(GridError::InvalidParam { name, value, reason });
            }
        }
        if self.n_relax == 0 {
            return Err(GridError::InvalidParam {
                name: "n_relax",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    /// World distance between adjacent neurons.
    pub spacing: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 70,
            height: 70,
            spacing: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if self.width < 2 {
            return Err(GridError::InvalidParam {
                name: "width",
                value: self.width as f64,
                reason: "must be at least 2",
            });
        }
        if self.height < 2 {
            return Err(GridError::InvalidParam {
                name: "height",
                value: self.height as f64,
                reason: "must be at least 2",
            });
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(GridError::InvalidParam {
                name: "spacing",
                value: self.spacing,
                reason: "must be positive",
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.col < self.width && cell.row < self.height
    }

    pub fn check(&self, cell: Cell) -> Result<(), GridError> {
        if self.contains(cell) {
            Ok(())
        } else {
            Err(GridError::OutOfGrid {
                cell,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    /// In-grid lateral neighbors of `cell` in row-major order.
    pub fn neighbors(&self, cell: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (col, row) = (cell.col as isize, cell.row as isize);
        (-1isize..=1)
            .flat_map(move |dr| (-1isize..=1).map(move |dc| (dc, dr)))
            .filter(|&(dc, dr)| dc != 0 || dr != 0)
            .filter_map(move |(dc, dr)| {
                let (c, r) = (col + dc, row + dr);
                (c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height)
                    .then(|| Cell::new(c as usize, r as usize))
            })
    }
}

/// Excitatory and inhibitory lateral gains between two neurons.
pub fn lateral_weight(
    k: Cell,
    l: Cell,
    params: &ShuntingParams,
    spec: &GridSpec,
) -> Result<(f64, f64), GridError> {
    spec.check(k)?;
    spec.check(l)?;
    if k == l {
        return Err(GridError::SelfConnection(k));
    }
    let w = connection_gain(k.distance(l), params);
    Ok((w, params.inhibitory_gain * w))
}

/// Rate of change of a single shunting neuron given its total excitatory
/// and inhibitory drive.
pub fn shunting_rate(params: &ShuntingParams, x: f64, excitation: f64, inhibition: f64) -> f64 {
    -params.decay * x + (params.upper - x) * excitation - (params.lower + x) * inhibition
}

/// Forward-Euler update of one neuron with no lateral connections, clamped
/// to the activity bounds.
pub fn isolated_neuron_step(params: &ShuntingParams, x: f64, input: f64) -> f64 {
    let rate = shunting_rate(params, x, input.max(0.0), (-input).max(0.0));
    (x + params.step * rate).clamp(-params.lower, params.upper)
}

/// Rows `r`, `r + 1` and `r + 2` of a padded buffer with row length `pw`.
fn three_rows(v: &[f64], r: usize, pw: usize) -> (&[f64], &[f64], &[f64]) {
    (
        &v[r * pw..(r + 1) * pw],
        &v[(r + 1) * pw..(r + 2) * pw],
        &v[(r + 2) * pw..(r + 3) * pw],
    )
}

fn connection_gain(distance: f64, params: &ShuntingParams) -> f64 {
    if distance > 0.0 && distance <= params.receptive_radius {
        params.lateral_gain / distance
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityGrid {
    spec: GridSpec,
    activity: Vec<f64>,
    input: Vec<f64>,
    sources: Vec<Cell>,
}

impl ActivityGrid {
    /// All activities and inputs start at zero.
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            activity: vec![0.0; spec.len()],
            input: vec![0.0; spec.len()],
            sources: Vec::new(),
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn activity(&self, cell: Cell) -> f64 {
        self.activity[self.spec.index(cell)]
    }

    pub fn input(&self, cell: Cell) -> f64 {
        self.input[self.spec.index(cell)]
    }

    pub fn activities(&self) -> &[f64] {
        &self.activity
    }

    pub fn activities_mut(&mut self) -> &mut [f64] {
        &mut self.activity
    }

    pub fn inputs(&self) -> &[f64] {
        &self.input
    }

    /// Cells that received a positive stamp (obstacle-overridden cells excluded).
    pub fn sources(&self) -> &[Cell] {
        &self.sources
    }

    pub fn set_activity(&mut self, cell: Cell, value: f64) -> Result<(), GridError> {
        self.spec.check(cell)?;
        let i = self.spec.index(cell);
        self.activity[i] = value;
        Ok(())
    }

    /// Replaces all external inputs: `+magnitude` at sources, `-magnitude`
    /// at obstacles (obstacles win on overlap), zero elsewhere.
    pub fn stamp_inputs(
        &mut self,
        sources: &[Cell],
        obstacles: &[Cell],
        magnitude: f64,
    ) -> Result<(), GridError> {
        for &c in sources.iter().chain(obstacles) {
            self.spec.check(c)?;
        }
        self.input.iter_mut().for_each(|v| *v = 0.0);
        for &c in sources {
            self.input[self.spec.index(c)] = magnitude;
        }
        for &c in obstacles {
            self.input[self.spec.index(c)] = -magnitude;
        }
        self.sources = sources
            .iter()
            .copied()
            .filter(|&c| self.input[self.spec.index(c)] > 0.0)
            .collect();
        self.sources.sort_unstable();
        self.sources.dedup();
        Ok(())
    }

    /// One synchronous forward-Euler step; returns the largest absolute change.
    pub fn step_activity(&mut self, params: &ShuntingParams) -> Result<f64, GridError> {
        let mut scratch = StepScratch::new(&self.spec);
        self.step_with(params, &mut scratch)
    }

    /// Runs `params.n_relax` steps; returns the residual of the final step.
    pub fn relax(&mut self, params: &ShuntingParams) -> Result<f64, GridError> {
        self.relax_steps(params, params.n_relax)
    }

    pub fn relax_steps(&mut self, params: &ShuntingParams, steps: usize) -> Result<f64, GridError> {
        let mut scratch = StepScratch::new(&self.spec);
        let mut residual = 0.0;
        for _ in 0..steps {
            residual = self.step_with(params, &mut scratch)?;
        }
        Ok(residual)
    }

    fn step_with(
        &mut self,
        params: &ShuntingParams,
        scratch: &mut StepScratch,
    ) -> Result<f64, GridError> {
        let (w, h) = (self.spec.width, self.spec.height);
        let pw = w + 2;
        let sigma = params.inhibitory_threshold;
        // Padded copies of [x]+ and [x - sigma]-; the zero border stands in
        // for missing neighbors.
        for r in 0..h {
            let src = &self.activity[r * w..(r + 1) * w];
            let base = (r + 1) * pw + 1;
            let pos = &mut scratch.excite[base..base + w];
            for (p, &x) in pos.iter_mut().zip(src) {
                *p = x.max(0.0);
            }
            let neg = &mut scratch.inhibit[base..base + w];
            for (n, &x) in neg.iter_mut().zip(src) {
                *n = (sigma - x).max(0.0);
            }
        }

        let w_orth = connection_gain(1.0, params);
        let w_diag = connection_gain(std::f64::consts::SQRT_2, params);
        let beta = params.inhibitory_gain;
        let (a, b, d, dt) = (params.decay, params.upper, params.lower, params.step);
        let mut residual = 0.0f64;
        let mut finite = true;
        for r in 0..h {
            let (eu, em, ed) = three_rows(&scratch.excite, r, pw);
            let (qu, qm, qd) = three_rows(&scratch.inhibit, r, pw);
            let span = r * w..(r + 1) * w;
            let xs = &self.activity[span.clone()];
            let inputs = &self.input[span.clone()];
            let out = &mut scratch.next[span];
            for c in 0..w {
                let lat_e = w_orth * (em[c] + em[c + 2] + eu[c + 1] + ed[c + 1])
                    + w_diag * (eu[c] + eu[c + 2] + ed[c] + ed[c + 2]);
                let lat_i = w_orth * (qm[c] + qm[c + 2] + qu[c + 1] + qd[c + 1])
                    + w_diag * (qu[c] + qu[c + 2] + qd[c] + qd[c + 2]);
                let x = xs[c];
                let input = inputs[c];
                let s_exc = input.max(0.0) + lat_e;
                let s_inh = (-input).max(0.0) + beta * lat_i;
                let dx = -a * x + (b - x) * s_exc - (d + x) * s_inh;
                let next = (x + dt * dx).clamp(-d, b);
                residual = residual.max((next - x).abs());
                finite &= next.is_finite();
                out[c] = next;
            }
        }
        if !finite {
            let k = scratch.next.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(GridError::Diverged {
                cell: self.spec.cell(k),
                value: scratch.next[k],
            });
        }
        std::mem::swap(&mut self.activity, &mut scratch.next);
        Ok(residual)
    }

    /// The in-grid lateral neighbors of `cell` with their activities, row-major.
    pub fn neighbor_activities(&self, cell: Cell) -> Result<Vec<(Cell, f64)>, GridError> {
        self.spec.check(cell)?;
        Ok(self
            .spec
            .neighbors(cell)
            .map(|n| (n, self.activity(n)))
            .collect())
    }

    /// Writes the activity matrix as plain text, one lattice row per line,
    /// six significant digits per value.
    pub fn write_matrix(&self, path: &Path) -> Result<(), GridError> {
        let io_err = |e: std::io::Error| GridError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut out = String::with_capacity(self.activity.len() * 14);
        for row in self.activity.chunks(self.spec.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.5e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(out.as_bytes()).map_err(io_err)
    }
}

/// Reusable buffers for [`ActivityGrid`] integration.
struct StepScratch {
    excite: Vec<f64>,
    inhibit: Vec<f64>,
    next: Vec<f64>,
}

impl StepScratch {
    fn new(spec: &GridSpec) -> Self {
        let padded = (spec.width + 2) * (spec.height + 2);
        Self {
            excite: vec![0.0; padded],
            inhibit: vec![0.0; padded],
            next: vec![0.0; spec.len()],
        }
    }
}
