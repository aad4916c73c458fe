//! Solved maps on disk and the post-processing that turns them into an online
//! speed limit: bilinear lookup, the collision-free operating region, and the
//! per-position safe-velocity boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::driver::{DriverKind, DriverModel};
use crate::dynamics::{ControlGrid, DynamicsParams, StateGrid};
use crate::error::{Error, Result};
use crate::scalar::{clamp, index_slack, Scalar};
use crate::solver::{is_penalty_node, CostMode, CostSpec, Problem, Solution, SolveTrace, TerminalSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverInfo<T> {
    pub kind: DriverKind,
    pub sharpness: Option<T>,
    pub demand_values: Vec<T>,
    #[serde(default)]
    pub d_brake: Option<T>,
}

impl<T: Scalar> DriverInfo<T> {
    pub fn of(model: &DriverModel<T>) -> Self {
        Self {
            kind: model.kind,
            sharpness: model.sharpness,
            demand_values: model.demand_values.clone(),
            d_brake: model.d_brake,
        }
    }
}

/// Solver settings recorded for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverMetadata<T> {
    pub u_values: Vec<T>,
    pub eval_tol: T,
    pub max_sweeps: usize,
    pub mean_rel_tol: T,
    pub converged: bool,
}

/// Expected time to a safe stop at every grid node, with the policy that
/// achieves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMap<T> {
    pub format_version: u32,
    pub grid: StateGrid<T>,
    pub params: DynamicsParams<T>,
    pub cost_spec: CostSpec<T>,
    pub terminal: TerminalSpec<T>,
    pub driver: DriverInfo<T>,
    #[serde(rename = "J")]
    pub j: Vec<T>,
    /// Supervisory correction `v_u` per node.
    pub policy: Vec<T>,
    pub trace: SolveTrace<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverMetadata<T>>,
}

impl<T: Scalar> CostMap<T> {
    pub fn from_solution(problem: &Problem<'_, T>, solution: Solution<T>, solver: Option<SolverMetadata<T>>) -> Self {
        let u = &problem.controls.u_values;
        Self {
            format_version: FORMAT_VERSION,
            grid: problem.grid.clone(),
            params: *problem.params,
            cost_spec: problem.cost,
            terminal: problem.terminal,
            driver: DriverInfo::of(problem.model),
            j: solution.j,
            policy: solution.policy.u_index.iter().map(|&i| u[i]).collect(),
            trace: solution.trace,
            solver,
        }
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.terminal.contains(&self.params, self.grid.state(node))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: FORMAT_VERSION });
        }
        StateGrid::new(self.grid.x_values.clone(), self.grid.v_values.clone())
            .map_err(|e| Error::Invariant(e.to_string()))?;
        self.params.validate().map_err(|e| Error::Invariant(e.to_string()))?;
        self.grid.check_params(&self.params).map_err(|e| Error::Invariant(e.to_string()))?;
        let n = self.grid.len();
        if self.j.len() != n || self.policy.len() != n {
            return Err(Error::Invariant(format!(
                "J has {} entries and policy {}, grid has {n} nodes",
                self.j.len(),
                self.policy.len()
            )));
        }
        for (i, &v) in self.j.iter().enumerate() {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::Invariant(format!("J[{i}] = {v} is not a nonnegative time")));
            }
            if self.is_terminal(i) && v != T::zero() {
                return Err(Error::Invariant(format!("terminal node {i} has J = {v}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::Version { found: found as u32, expected: FORMAT_VERSION });
        }
        let map: Self = serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn at(&self, ix: usize, iv: usize) -> T {
        self.j[self.grid.node(ix, iv)]
    }

    /// Bilinear interpolation of J; exact at nodes.
    pub fn lookup(&self, x: T, v: T) -> Result<T> {
        let (ix, fx) = cell(&self.grid.x_values, x)
            .ok_or_else(|| Error::OutOfRange(format!("x = {x} outside map")))?;
        let (iv, fv) = cell(&self.grid.v_values, v)
            .ok_or_else(|| Error::OutOfRange(format!("v = {v} outside map")))?;
        let ix1 = (ix + 1).min(self.grid.nx() - 1);
        let iv1 = (iv + 1).min(self.grid.nv() - 1);
        let one = T::one();
        let lo = self.at(ix, iv) * (one - fv) + self.at(ix, iv1) * fv;
        let hi = self.at(ix1, iv) * (one - fv) + self.at(ix1, iv1) * fv;
        Ok(lo * (one - fx) + hi * fx)
    }
}

/// Lower cell index and fractional offset of `q` on a uniform axis.
fn cell<T: Scalar>(vals: &[T], q: T) -> Option<(usize, T)> {
    let n = vals.len();
    if n == 1 {
        return ((q - vals[0]).abs() <= T::lit(1e-9)).then_some((0, T::zero()));
    }
    let h = vals[1] - vals[0];
    let f = (q - vals[0]) / h;
    let last = T::from_usize_lossy(n - 1);
    let slack = index_slack(last);
    if !f.is_finite() || f < -slack || f > last + slack {
        return None;
    }
    let f = clamp(f, T::zero(), last);
    let i = f.floor().min(last - T::one());
    Some((i.to_usize()?, f - i))
}

/// Per-node flag: `true` where assistance may operate without a forced crash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityMask<T> {
    pub feasible: Vec<bool>,
    pub cutoff: T,
}

impl<T> FeasibilityMask<T> {
    pub fn is_feasible(&self, node: usize) -> bool {
        self.feasible[node]
    }
}

/// Midpoint between the two cluster means of the best two-way split of the
/// sorted values (exact one-dimensional two-means).
pub fn two_means_cutoff<T: Scalar>(values: &[T]) -> Result<T> {
    let mut v: Vec<f64> = values.iter().map(|x| x.as_f64()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n < 2 || v[n - 1] - v[0] <= 1e-12 * v[n - 1].abs().max(1.0) {
        return Err(Error::Degenerate(
            "J values form a single cluster; pass an explicit cutoff".into(),
        ));
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &x) in v.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
        prefix_sq[i + 1] = prefix_sq[i] + x * x;
    }
    let sse = |a: usize, b: usize| {
        let m = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        (prefix_sq[b] - prefix_sq[a]) - s * s / m
    };
    let mut best = (f64::INFINITY, 1);
    for k in 1..n {
        // only split between distinct values
        if v[k] == v[k - 1] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        if cost < best.0 {
            best = (cost, k);
        }
    }
    let k = best.1;
    let lo = prefix[k] / k as f64;
    let hi = (prefix[n] - prefix[k]) / (n - k) as f64;
    Ok(T::lit(0.5 * (lo + hi)))
}

/// Feasible iff `J < cutoff` on a penalized map. The cutoff defaults to the
/// two-means split between surged and unsurged values. Terminal nodes are
/// always feasible and boundary-penalty nodes never are.
pub fn feasibility_region<T: Scalar>(map: &CostMap<T>, cutoff: Option<T>) -> Result<FeasibilityMask<T>> {
    if map.cost_spec.mode != CostMode::Penalized {
        return Err(Error::InvalidParam("feasibility needs a penalized map".into()));
    }
    let cutoff = match cutoff {
        Some(c) => c,
        None => two_means_cutoff(&map.j)?,
    };
    let feasible = (0..map.grid.len())
        .map(|n| map.is_terminal(n) || (map.j[n] < cutoff && !is_penalty_node(&map.grid, n)))
        .collect();
    Ok(FeasibilityMask { feasible, cutoff })
}

/// Every node feasible except the boundary-penalty nodes. Used when only a
/// plain map is available.
pub fn penalty_free_mask<T: Scalar>(map: &CostMap<T>) -> FeasibilityMask<T> {
    let feasible = (0..map.grid.len())
        .map(|n| map.is_terminal(n) || !is_penalty_node(&map.grid, n))
        .collect();
    FeasibilityMask { feasible, cutoff: T::infinity() }
}

/// Highest forward velocity allowed at each position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeBoundary<T> {
    pub format_version: u32,
    pub x_values: Vec<T>,
    pub v_b: Vec<T>,
    pub threshold: T,
    pub v_tol: T,
    pub params: DynamicsParams<T>,
}

impl<T: Scalar> SafeBoundary<T> {
    pub fn d_max(&self) -> T {
        self.params.d_max
    }

    pub fn v_max(&self) -> T {
        self.params.v_max
    }

    /// Linear interpolation between x-nodes; `x` is clamped into the map.
    pub fn velocity_at(&self, x: T) -> T {
        let n = self.x_values.len();
        let x = clamp(x, self.x_values[0], self.x_values[n - 1]);
        match cell(&self.x_values, x) {
            Some((i, f)) if n > 1 => self.v_b[i] * (T::one() - f) + self.v_b[i + 1] * f,
            _ => self.v_b[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: FORMAT_VERSION });
        }
        self.params.validate().map_err(|e| Error::Invariant(e.to_string()))?;
        if self.x_values.is_empty() || self.x_values.len() != self.v_b.len() {
            return Err(Error::Invariant("x_values and v_b lengths differ".into()));
        }
        StateGrid::new(self.x_values.clone(), vec![T::zero()]).map_err(|e| Error::Invariant(e.to_string()))?;
        for (i, &v) in self.v_b.iter().enumerate() {
            if !(v >= T::zero() && v <= self.params.v_max) {
                return Err(Error::Invariant(format!("v_b[{i}] = {v} outside [0, v_max]")));
            }
            if i > 0 && v > self.v_b[i - 1] {
                return Err(Error::Invariant(format!("v_b increases at node {i}")));
            }
        }
        if self.v_b[self.v_b.len() - 1] > self.v_tol {
            return Err(Error::Invariant("v_b at the obstacle exceeds v_tol".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Scans each position column upward from `v = 0` while the node stays
/// feasible and `J >= threshold`; the first drop below the threshold is
/// located by linear interpolation. A column that never drops is unrestricted.
/// A running minimum toward the obstacle then makes the profile monotone, and
/// the obstacle column is capped at the terminal velocity tolerance.
pub fn safe_velocity_boundary<T: Scalar>(
    map: &CostMap<T>,
    mask: &FeasibilityMask<T>,
    threshold: T,
) -> Result<SafeBoundary<T>> {
    if !(threshold > T::zero()) {
        return Err(Error::InvalidParam(format!("threshold must be positive, got {threshold}")));
    }
    if mask.feasible.len() != map.grid.len() {
        return Err(Error::InvalidParam("mask and map sizes differ".into()));
    }
    let max_feasible = (0..map.grid.len())
        .filter(|&n| mask.feasible[n])
        .map(|n| map.j[n])
        .fold(T::neg_infinity(), T::max);
    if !(threshold < max_feasible) {
        return Err(Error::EmptyBoundary(format!(
            "threshold {threshold} s is not below the largest feasible J ({max_feasible} s)"
        )));
    }
    let grid = &map.grid;
    let zero_row = grid
        .v_values
        .iter()
        .position(|v| v.abs() <= T::lit(1e-9))
        .ok_or_else(|| Error::InvalidParam("map has no zero-velocity row".into()))?;

    let mut v_b = Vec::with_capacity(grid.nx());
    for ix in 0..grid.nx() {
        let mut limit = T::zero();
        let mut prev: Option<(T, T)> = None;
        for iv in zero_row..grid.nv() {
            let node = grid.node(ix, iv);
            let v = grid.v_values[iv];
            if !mask.feasible[node] {
                break;
            }
            let j = map.j[node];
            if j < threshold {
                if let Some((pv, pj)) = prev {
                    limit = pv + (pj - threshold) / (pj - j) * (v - pv);
                }
                break;
            }
            limit = v;
            prev = Some((v, j));
        }
        v_b.push(limit);
    }
    for i in 1..v_b.len() {
        v_b[i] = v_b[i].min(v_b[i - 1]);
    }
    let last = v_b.len() - 1;
    v_b[last] = v_b[last].min(map.terminal.v_tol);

    Ok(SafeBoundary {
        format_version: FORMAT_VERSION,
        x_values: grid.x_values.clone(),
        v_b,
        threshold,
        v_tol: map.terminal.v_tol,
        params: map.params,
    })
}

/// Convenience used by the CLI and tests: solve one map end to end.
pub fn solve_map<T: Scalar>(
    grid: &StateGrid<T>,
    controls: &ControlGrid<T>,
    model: &DriverModel<T>,
    params: &DynamicsParams<T>,
    cost: CostSpec<T>,
    terminal: TerminalSpec<T>,
    opts: crate::solver::PolicyIterationOptions<T>,
) -> Result<CostMap<T>> {
    let problem = Problem { grid, controls, model, params, cost, terminal };
    let kernel = problem.build_kernel()?;
    let solution = crate::solver::policy_iteration(&kernel, opts)?;
    let meta = SolverMetadata {
        u_values: controls.u_values.clone(),
        eval_tol: opts.eval.tol,
        max_sweeps: opts.eval.max_sweeps,
        mean_rel_tol: opts.mean_rel_tol,
        converged: solution.converged,
    };
    Ok(CostMap::from_solution(&problem, solution, Some(meta)))
}
