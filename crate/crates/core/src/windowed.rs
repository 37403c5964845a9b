//! Time-windowed DEIM over right-hand-side snapshot streams and the tracking
//! of sampling points from window to window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, Matrix};
use crate::rom::{deim_indices, numerical_rank};
use crate::snapshot::SnapshotMatrix;
use crate::vortex::Grid2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub window_size: usize,
    pub stride: usize,
    pub n_points: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            window_size: 20,
            stride: 1,
            n_points: 16,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.n_points == 0 || self.window_size < self.n_points {
            return Err(Error::Parameter(format!("invalid window spec {self:?}")));
        }
        Ok(())
    }
}

/// `⌊(T − w)/s⌋ + 1` windows for a stream of `T` snapshots.
pub fn window_count(n_snapshots: usize, spec: &WindowSpec) -> Result<usize> {
    spec.validate()?;
    if n_snapshots < spec.window_size {
        return Err(Error::Input(format!(
            "stream of {n_snapshots} snapshots is shorter than the window ({})",
            spec.window_size
        )));
    }
    Ok((n_snapshots - spec.window_size) / spec.stride + 1)
}

/// Window matrices in order, built lazily since a full set of windows of a
/// large stream does not fit comfortably in memory.
pub fn window_snapshots<'a>(stream: &'a SnapshotMatrix, spec: &WindowSpec) -> Result<impl Iterator<Item = Result<Matrix>> + 'a> {
    let count = window_count(stream.n_cols(), spec)?;
    let (size, stride) = (spec.window_size, spec.stride);
    Ok((0..count).map(move |k| stream.window(k * stride, size)))
}

/// Greedy-ordered points of one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    pub indices: Vec<usize>,
    /// Numerical rank of the window.
    pub rank: usize,
    /// Fewer than the requested points could be placed.
    pub degraded: bool,
}

pub fn window_points(window: &Matrix, n_points: usize) -> Result<PointSet> {
    if n_points == 0 || n_points > window.rows() {
        return Err(Error::Parameter(format!("cannot place {n_points} points on {} cells", window.rows())));
    }
    let svd = thin_svd(window)?;
    let rank = numerical_rank(&svd.sigma);
    if rank == 0 {
        return Err(Error::Rank {
            requested: n_points,
            available: 0,
        });
    }
    let r = n_points.min(rank);
    let indices = deim_indices(&svd.u.leading_columns(r))?;
    Ok(PointSet {
        indices,
        rank,
        degraded: r < n_points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPoints {
    pub window: usize,
    pub start: usize,
    pub indices: Vec<usize>,
    pub coords: Vec<(f64, f64)>,
    pub rank: usize,
    pub degraded: bool,
}

/// Per-window points; slot `s` of every window holds the `s`-th greedy pick
/// unless the trajectory has been re-associated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTrajectory {
    pub spec: WindowSpec,
    pub windows: Vec<WindowPoints>,
}

impl PointTrajectory {
    /// Grid index of `slot` in every window (`None` where the window is degraded below it).
    pub fn slot_trace(&self, slot: usize) -> Vec<Option<usize>> {
        self.windows.iter().map(|w| w.indices.get(slot).copied()).collect()
    }

    pub fn degraded_windows(&self) -> usize {
        self.windows.iter().filter(|w| w.degraded).count()
    }
}

pub fn trajectories(stream: &SnapshotMatrix, grid: &Grid2D, spec: &WindowSpec) -> Result<PointTrajectory> {
    if stream.n_rows() != grid.len() {
        return Err(Error::Shape {
            op: "trajectories",
            lhs: grid.dims().to_vec(),
            rhs: stream.dims().to_vec(),
        });
    }
    let mut windows = Vec::new();
    for (k, win) in window_snapshots(stream, spec)?.enumerate() {
        let ps = window_points(&win?, spec.n_points)?;
        windows.push(WindowPoints {
            window: k,
            start: k * spec.stride,
            coords: ps.indices.iter().map(|&i| grid.coords(i)).collect(),
            indices: ps.indices,
            rank: ps.rank,
            degraded: ps.degraded,
        });
    }
    Ok(PointTrajectory { spec: *spec, windows })
}

/// Shortest distance on the periodic grid, in cells.
pub fn torus_distance(a: usize, b: usize, grid: &Grid2D) -> f64 {
    let (ai, aj) = (a % grid.nx, a / grid.nx);
    let (bi, bj) = (b % grid.nx, b / grid.nx);
    let di = ai.abs_diff(bi).min(grid.nx - ai.abs_diff(bi));
    let dj = aj.abs_diff(bj).min(grid.ny - aj.abs_diff(bj));
    ((di * di + dj * dj) as f64).sqrt()
}

/// Cost of leaving a point unmatched: the largest possible torus distance.
pub fn pad_cost(grid: &Grid2D) -> f64 {
    let (hx, hy) = ((grid.nx / 2) as f64, (grid.ny / 2) as f64);
    (hx * hx + hy * hy).sqrt()
}

/// Minimum-cost assignment for a square cost matrix (Hungarian method with
/// potentials). Returns the column assigned to each row and the total cost.
pub fn min_cost_assignment(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    if n != cost.cols() {
        return Err(Error::Shape {
            op: "min_cost_assignment",
            lhs: vec![n, n],
            rhs: cost.shape().to_vec(),
        });
    }
    if !cost.all_finite() {
        return Err(Error::Input("assignment costs must be finite".into()));
    }
    // 1-based arrays; column 0 is a virtual sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost[(i, assign[i])]).sum();
    Ok((assign, total))
}

/// Square cost matrix between two point sets, padded with `pad_cost` when
/// their sizes differ.
fn matching_cost(a: &[usize], b: &[usize], grid: &Grid2D) -> Matrix {
    let n = a.len().max(b.len());
    let pad = pad_cost(grid);
    Matrix::from_fn(n, n, |i, j| match (a.get(i), b.get(j)) {
        (Some(&p), Some(&q)) => torus_distance(p, q, grid),
        (None, None) => 0.0,
        _ => pad,
    })
}

/// Mean matched distance between two point sets under the optimal matching.
pub fn point_set_distance(a: &[usize], b: &[usize], grid: &Grid2D) -> Result<f64> {
    let n = a.len().max(b.len());
    if n == 0 {
        return Ok(0.0);
    }
    let (_, total) = min_cost_assignment(&matching_cost(a, b, grid))?;
    Ok(total / n as f64)
}

/// Reorders the slots of every window after the first to follow the previous
/// window's points as closely as possible (optimal matching on grid distance).
pub fn reassociate_nearest(traj: &PointTrajectory, grid: &Grid2D) -> Result<PointTrajectory> {
    let mut out = traj.clone();
    for k in 1..out.windows.len() {
        let prev = out.windows[k - 1].indices.clone();
        let cur = &mut out.windows[k];
        let (assign, _) = min_cost_assignment(&matching_cost(&prev, &cur.indices, grid))?;
        let mut slots: Vec<(usize, usize)> = assign
            .iter()
            .enumerate()
            .filter(|&(_, &j)| j < cur.indices.len())
            .map(|(i, &j)| (i, cur.indices[j]))
            .collect();
        slots.sort_by_key(|&(i, _)| i);
        cur.indices = slots.into_iter().map(|(_, p)| p).collect();
        cur.coords = cur.indices.iter().map(|&i| grid.coords(i)).collect();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Optimal-matching point-set distance per window, in cells.
    pub point_set: Vec<f64>,
    /// Slot-wise torus distance per window (`None` where either side lacks the slot).
    pub slot_displacement: Vec<Vec<Option<f64>>>,
}

pub fn compare_trajectories(truth: &PointTrajectory, other: &PointTrajectory, grid: &Grid2D) -> Result<DivergenceReport> {
    if truth.spec != other.spec || truth.windows.len() != other.windows.len() {
        return Err(Error::Input(format!(
            "trajectories differ in layout ({} vs {} windows)",
            truth.windows.len(),
            other.windows.len()
        )));
    }
    let mut point_set = Vec::with_capacity(truth.windows.len());
    let mut slot_displacement = Vec::with_capacity(truth.windows.len());
    for (a, b) in truth.windows.iter().zip(&other.windows) {
        point_set.push(point_set_distance(&a.indices, &b.indices, grid)?);
        slot_displacement.push(
            (0..truth.spec.n_points)
                .map(|s| match (a.indices.get(s), b.indices.get(s)) {
                    (Some(&p), Some(&q)) => Some(torus_distance(p, q, grid)),
                    _ => None,
                })
                .collect(),
        );
    }
    Ok(DivergenceReport {
        point_set,
        slot_displacement,
    })
}

pub fn compare_streams(truth: &SnapshotMatrix, other: &SnapshotMatrix, grid: &Grid2D, spec: &WindowSpec) -> Result<DivergenceReport> {
    if truth.n_cols() != other.n_cols() {
        return Err(Error::Input(format!(
            "stream lengths differ: {} vs {}",
            truth.n_cols(),
            other.n_cols()
        )));
    }
    compare_trajectories(&trajectories(truth, grid, spec)?, &trajectories(other, grid, spec)?, grid)
}

/// Windows whose `slot` point returns to a position held in some earlier
/// window after having moved away from it. Staying put is not a revisit.
pub fn revisit_count(traj: &PointTrajectory, slot: usize) -> usize {
    let trace = traj.slot_trace(slot);
    let mut count = 0;
    for k in 1..trace.len() {
        let Some(p) = trace[k] else { continue };
        if trace[k - 1] == Some(p) {
            continue;
        }
        if trace[..k - 1].contains(&Some(p)) {
            count += 1;
        }
    }
    count
}

/// Cumulative unwrapped angle (radians) of the `slot` point about the domain
/// centre, one value per window; windows without the slot repeat the last value.
pub fn winding(traj: &PointTrajectory, slot: usize, grid: &Grid2D) -> Vec<f64> {
    let (cx, cy) = (0.5 * grid.nx as f64 * grid.dx, 0.5 * grid.ny as f64 * grid.dy);
    let mut out = Vec::with_capacity(traj.windows.len());
    let mut total = 0.0;
    let mut last: Option<f64> = None;
    for w in &traj.windows {
        if let Some(&(x, y)) = w.coords.get(slot) {
            let ang = (y - cy).atan2(x - cx);
            if let Some(prev) = last {
                let mut d = ang - prev;
                while d > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                }
                while d <= -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                total += d;
            }
            last = Some(ang);
        }
        out.push(total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_formula() {
        let spec = WindowSpec::default();
        assert_eq!(window_count(20, &spec).unwrap(), 1);
        assert_eq!(window_count(200, &spec).unwrap(), 181);
        assert!(window_count(19, &spec).is_err());
        let tiling = WindowSpec {
            window_size: 20,
            stride: 20,
            n_points: 16,
        };
        assert_eq!(window_count(200, &tiling).unwrap(), 10);
    }

    #[test]
    fn rank_one_window_is_flagged() {
        let win = Matrix::from_fn(8, 5, |i, _| if i == 3 { 1.0 } else { 0.0 });
        let ps = window_points(&win, 4).unwrap();
        assert_eq!(ps.indices, vec![3]);
        assert!(ps.degraded);
        assert_eq!(ps.rank, 1);
    }

    #[test]
    fn assignment_on_known_matrix() {
        let c = Matrix::from_vec(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let (a, total) = min_cost_assignment(&c).unwrap();
        assert_eq!(a, vec![1, 0, 2]);
        assert_eq!(total, 5.0);
    }

    #[test]
    fn torus_wraps() {
        let g = Grid2D::square(16).unwrap();
        assert_eq!(torus_distance(0, 15, &g), 1.0);
        assert_eq!(torus_distance(0, 15 * 16, &g), 1.0);
    }

    #[test]
    fn revisits_ignore_dwelling() {
        let mk = |idx: &[usize]| PointTrajectory {
            spec: WindowSpec::default(),
            windows: idx
                .iter()
                .enumerate()
                .map(|(k, &i)| WindowPoints {
                    window: k,
                    start: k,
                    indices: vec![i],
                    coords: vec![(0.0, 0.0)],
                    rank: 1,
                    degraded: false,
                })
                .collect(),
        };
        assert_eq!(revisit_count(&mk(&[1, 1, 1, 2, 2]), 0), 0);
        assert_eq!(revisit_count(&mk(&[1, 2, 1, 2, 3]), 0), 2);
    }
}
