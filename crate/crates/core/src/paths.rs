//! Time grids, Brownian increments and trajectories.
//!
//! Increment `k` of a [`BrownianPath`] is `ΔW` over `[t_k, t_{k+1}]`. All
//! discretized integrals evaluate coefficients at the left endpoint.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::schedule::NoiseSchedule;
use crate::scores::{Condition, ScoreOracle};
use crate::{Error, Result, Vector};

const SYMMETRY_TOL: f64 = 1e-12;

/// Nodes `0 = t_0 < t_1 < ... < t_N <= 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    symmetric: bool,
}

impl TimeGrid {
    /// `N` equal steps on `[0, 1]`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Grid("need at least one step".into()));
        }
        let n = steps as f64;
        let nodes = (0..=steps).map(|k| k as f64 / n).collect();
        Self::from_nodes(nodes)
    }

    /// Validates the nodes and records whether `t -> 1 - t` maps the node set
    /// onto itself.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Grid("need at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Grid(format!("first node must be 0, got {}", nodes[0])));
        }
        if nodes.iter().any(|t| !t.is_finite()) {
            return Err(Error::Grid("nodes must be finite".into()));
        }
        if let Some(w) = nodes.windows(2).find(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Grid(format!(
                "nodes must be strictly increasing (zero or negative step at {} -> {})",
                w[0], w[1]
            )));
        }
        let last = *nodes.last().unwrap();
        if last > 1.0 + SYMMETRY_TOL {
            return Err(Error::Grid(format!("last node {last} exceeds 1")));
        }
        let n = nodes.len() - 1;
        let symmetric = (0..=n).all(|k| (1.0 - nodes[k] - nodes[n - k]).abs() <= SYMMETRY_TOL);
        Ok(Self { nodes, symmetric })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    fn require_symmetric(&self) -> Result<()> {
        if self.symmetric {
            Ok(())
        } else {
            Err(Error::Grid("operation requires a grid symmetric under t -> 1 - t".into()))
        }
    }
}

/// Per-step Gaussian increments aligned to a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrownianPath {
    dim: usize,
    increments: Vec<Vector>,
}

impl BrownianPath {
    pub fn new(dim: usize, increments: Vec<Vector>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension { expected: 1, got: 0 });
        }
        if let Some(bad) = increments.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { dim, increments })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn increments(&self) -> &[Vector] {
        &self.increments
    }

    pub fn increment(&self, k: usize) -> &Vector {
        &self.increments[k]
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.steps() != grid.steps() {
            return Err(Error::Length {
                expected: grid.steps(),
                got: self.steps(),
            });
        }
        Ok(())
    }

    /// One row per step: `t_k, ΔW_k[0], ..., ΔW_k[d-1]`.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        self.check_grid(grid)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|i| format!("dw{i}")));
        write_row(&mut w, &header)?;
        for (k, inc) in self.increments.iter().enumerate() {
            let mut row = vec![grid.node(k).to_string()];
            row.extend(inc.iter().map(|v| v.to_string()));
            write_row(&mut w, &row)?;
        }
        w.flush().map_err(|e| Error::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    Forward,
    Reversed,
}

impl Direction {
    fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Reversed,
            Direction::Reversed => Direction::Forward,
        }
    }
}

/// States at the `N + 1` grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    states: Vec<Vector>,
    direction: Direction,
}

impl Trajectory {
    pub fn new(states: Vec<Vector>, direction: Direction) -> Result<Self> {
        let dim = states.first().map(|s| s.len()).ok_or_else(|| {
            Error::Invalid("trajectory needs at least one state".into())
        })?;
        if let Some(bad) = states.iter().find(|s| s.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Ok(Self { states, direction })
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &Vector {
        &self.states[k]
    }

    pub fn last(&self) -> &Vector {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.len() != grid.steps() + 1 {
            return Err(Error::Length {
                expected: grid.steps() + 1,
                got: self.len(),
            });
        }
        Ok(())
    }

    /// Largest Euclidean distance between aligned states.
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64> {
        self.sup_distance_from(other, 0)
    }

    /// [`Trajectory::sup_distance`] restricted to nodes `from..`.
    pub fn sup_distance_from(&self, other: &Trajectory, from: usize) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Length {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .skip(from)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// One row per node: `t_k, x[0], ..., x[d-1]`. For a reversed trajectory
    /// `t_k` is reverse time.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        self.check_grid(grid)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        write_row(&mut w, &header)?;
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![grid.node(k).to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            write_row(&mut w, &row)?;
        }
        w.flush().map_err(|e| Error::Invalid(e.to_string()))
    }
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| Error::Invalid(e.to_string()))
}

/// Forward kernels on the grid nodes.
///
/// `m[k] = m(t_k)` for every node (including the terminal limit), while
/// `g[k] = g(t_k)` is cached for the left endpoints `k < N` only.
#[derive(Debug, Clone)]
pub struct GridKernels {
    pub m: Vec<f64>,
    pub g: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl GridKernels {
    pub fn new(sched: &NoiseSchedule, grid: &TimeGrid) -> Result<Self> {
        let n = grid.steps();
        let m = grid
            .nodes()
            .iter()
            .map(|&t| sched.decay_m(t))
            .collect::<Result<Vec<_>>>()?;
        let g = (0..n)
            .map(|k| sched.diffusion(grid.node(k)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = (0..n)
            .map(|k| sched.alpha(grid.node(k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { m, g, alpha })
    }

    /// `Y_{t_k} = m(t_k) y0 + Σ_{j<k} Φ(t_k, t_j) g(t_j) ΔW_j` at a single node.
    pub fn closed_form_state(&self, y0: &Vector, path: &BrownianPath, k: usize) -> Vector {
        let mut acc = y0.clone();
        for j in 0..k {
            acc.axpy(self.g[j] / self.m[j], path.increment(j), 1.0);
        }
        acc * self.m[k]
    }
}

/// Draws `ΔW_k ~ N(0, Δt_k I_d)` independently for every step.
pub fn sample_brownian<R: Rng + ?Sized>(grid: &TimeGrid, dim: usize, rng: &mut R) -> Result<BrownianPath> {
    if dim == 0 {
        return Err(Error::Dimension { expected: 1, got: 0 });
    }
    let increments = (0..grid.steps())
        .map(|k| crate::rng::standard_normal_vector(dim, rng) * grid.dt(k).sqrt())
        .collect();
    BrownianPath::new(dim, increments)
}

fn check_dims(y0: &Vector, path: &BrownianPath, grid: &TimeGrid) -> Result<()> {
    if y0.len() != path.dim() {
        return Err(Error::Dimension {
            expected: path.dim(),
            got: y0.len(),
        });
    }
    path.check_grid(grid)
}

/// Exact solution of the forward OU SDE sampled on the grid, driven by
/// `path`: `Y_{t_k} = m(t_k) y0 + Σ_{j<k} Φ(t_k, t_j) g(t_j) ΔW_j`.
pub fn forward_closed_form(
    y0: &Vector,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    path: &BrownianPath,
) -> Result<Trajectory> {
    check_dims(y0, path, grid)?;
    let kernels = GridKernels::new(sched, grid)?;
    Ok(forward_closed_form_cached(y0, &kernels, path))
}

pub(crate) fn forward_closed_form_cached(y0: &Vector, kernels: &GridKernels, path: &BrownianPath) -> Trajectory {
    // Y_k = m_k (y0 + Σ_{j<k} g_j ΔW_j / m_j)
    let mut states = Vec::with_capacity(kernels.m.len());
    let mut acc = y0.clone();
    states.push(y0.clone());
    for k in 1..kernels.m.len() {
        acc.axpy(kernels.g[k - 1] / kernels.m[k - 1], path.increment(k - 1), 1.0);
        states.push(&acc * kernels.m[k]);
    }
    Trajectory {
        states,
        direction: Direction::Forward,
    }
}

/// Euler–Maruyama: `Y_{k+1} = Y_k - α(t_k) Y_k Δt_k + g(t_k) ΔW_k`.
pub fn forward_euler(
    y0: &Vector,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    path: &BrownianPath,
) -> Result<Trajectory> {
    check_dims(y0, path, grid)?;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(y0.clone());
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let (alpha, g) = (sched.alpha(t)?, sched.diffusion(t)?);
        let y = &states[k];
        let next = y * (1.0 - alpha * grid.dt(k)) + path.increment(k) * g;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        direction: Direction::Forward,
    })
}

/// State at node `t_k` of the output is the input state at node `1 - t_k`.
pub fn reverse_trajectory(traj: &Trajectory, grid: &TimeGrid) -> Result<Trajectory> {
    grid.require_symmetric()?;
    traj.check_grid(grid)?;
    let mut states = traj.states.clone();
    states.reverse();
    Ok(Trajectory {
        states,
        direction: traj.direction.flipped(),
    })
}

/// Structured backward increments that make the reverse SDE retrace the
/// forward path:
///
/// `ΔW̄_k = -ΔW_{N-1-k} - g(1 - t_k) S(Ȳ_k, c, 1 - t_k) Δt_k`.
///
/// Reverse step `k` covers forward time `[1 - t_{k+1}, 1 - t_k]`, which on a
/// symmetric grid is forward step `N - 1 - k`. Steps before `start_step`
/// carry only the flipped, negated forward increment; they are never used by
/// an integration starting at `start_step` and this keeps the construction
/// defined for schedules singular at forward time 1.
#[allow(clippy::too_many_arguments)]
pub fn backward_increments(
    path: &BrownianPath,
    rev_traj: &Trajectory,
    oracle: &ScoreOracle,
    cond: &Condition,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    start_step: usize,
) -> Result<BrownianPath> {
    grid.require_symmetric()?;
    if rev_traj.direction != Direction::Reversed {
        return Err(Error::Invalid("backward increments need a reversed trajectory".into()));
    }
    path.check_grid(grid)?;
    rev_traj.check_grid(grid)?;
    if rev_traj.dim() != path.dim() {
        return Err(Error::Dimension {
            expected: path.dim(),
            got: rev_traj.dim(),
        });
    }
    let n = grid.steps();
    let mut increments = Vec::with_capacity(n);
    for k in 0..n {
        let mut dw = -path.increment(n - 1 - k);
        if k >= start_step {
            let tau = 1.0 - grid.node(k);
            let g = sched.diffusion(tau)?;
            let s = oracle.guided_score(rev_traj.state(k), cond, tau, sched)?;
            dw.axpy(-g * grid.dt(k), &s, 1.0);
        }
        increments.push(dw);
    }
    BrownianPath::new(path.dim(), increments)
}
