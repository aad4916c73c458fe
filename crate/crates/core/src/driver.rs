//! State-conditioned stochastic models of the driver's velocity demand.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsParams, StateGrid};
use crate::error::{Error, Result};
use crate::scalar::{clamp, Scalar};

pub const DEFAULT_DEMAND_POINTS: usize = 9;
pub const DEFAULT_NAUGHTY_SHARPNESS: f64 = 3.0;
pub const DEFAULT_EXPERT_SHARPNESS: f64 = 3.0;
pub const DEFAULT_BRAKE_DISTANCE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Expert,
    NaughtyChild,
    Blind,
    Custom,
}

impl DriverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriverKind::Expert => "expert",
            DriverKind::NaughtyChild => "naughty_child",
            DriverKind::Blind => "blind",
            DriverKind::Custom => "custom",
        }
    }
}

/// Probability mass over a fixed demand support, one vector per grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverModel<T> {
    pub kind: DriverKind,
    pub demand_values: Vec<T>,
    /// Node-major, demand-minor.
    pmf: Vec<T>,
    n_nodes: usize,
    pub sharpness: Option<T>,
    pub d_brake: Option<T>,
}

/// `n` evenly spaced demands over `[v_min, v_max]`.
pub fn default_demand_values<T: Scalar>(params: &DynamicsParams<T>, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![params.v_max];
    }
    let last = T::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| {
            if i == n - 1 {
                params.v_max
            } else {
                params.v_min + (params.v_max - params.v_min) * T::from_usize_lossy(i) / last
            }
        })
        .collect()
}

fn normalise<T: Scalar>(w: &mut [T]) {
    let s: T = w.iter().copied().sum();
    for p in w.iter_mut() {
        *p = *p / s;
    }
}

fn check_support<T: Scalar>(grid: &StateGrid<T>, demand_values: &[T]) -> Result<()> {
    if demand_values.is_empty() {
        return Err(Error::InvalidParam("demand support is empty".into()));
    }
    if demand_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("demand support must be strictly ascending".into()));
    }
    let lo = grid.v_values[0];
    let hi = grid.v_values[grid.nv() - 1];
    let tol = T::lit(1e-9);
    if demand_values[0] < lo - tol || demand_values[demand_values.len() - 1] > hi + tol {
        return Err(Error::InvalidParam("demand support must lie within [v_min, v_max]".into()));
    }
    Ok(())
}

fn check_sharpness<T: Scalar>(sharpness: T) -> Result<()> {
    if !(sharpness > T::zero()) || !sharpness.is_finite() {
        return Err(Error::InvalidParam(format!("sharpness must be positive, got {sharpness}")));
    }
    Ok(())
}

/// Target demand of the expert driver at position `x`: full speed far from
/// the obstacle, ramping linearly to zero over the last `d_brake` metres.
pub fn expert_target<T: Scalar>(x: T, d_max: T, v_max: T, d_brake: T) -> T {
    v_max * clamp((d_max - x) / d_brake, T::zero(), T::one())
}

impl<T: Scalar> DriverModel<T> {
    /// Uniform demand everywhere: the driver ignores the obstacle.
    pub fn blind(grid: &StateGrid<T>, demand_values: Vec<T>) -> Result<Self> {
        check_support(grid, &demand_values)?;
        let m = demand_values.len();
        let p = T::one() / T::from_usize_lossy(m);
        Ok(Self {
            kind: DriverKind::Blind,
            pmf: vec![p; grid.len() * m],
            n_nodes: grid.len(),
            demand_values,
            sharpness: None,
            d_brake: None,
        })
    }

    /// Exponentially tilted toward full forward speed at every node.
    pub fn naughty_child(grid: &StateGrid<T>, demand_values: Vec<T>, sharpness: T) -> Result<Self> {
        check_support(grid, &demand_values)?;
        check_sharpness(sharpness)?;
        let v_max = grid.v_values[grid.nv() - 1];
        // Shift by the largest exponent so the weights stay in (0, 1].
        let top = demand_values[demand_values.len() - 1];
        let mut row: Vec<T> = demand_values
            .iter()
            .map(|&d| (sharpness * (d - top) / v_max).exp())
            .collect();
        normalise(&mut row);
        let pmf = row.iter().copied().cycle().take(grid.len() * row.len()).collect();
        Ok(Self {
            kind: DriverKind::NaughtyChild,
            pmf,
            n_nodes: grid.len(),
            demand_values,
            sharpness: Some(sharpness),
            d_brake: None,
        })
    }

    /// Concentrated around [`expert_target`], which depends on position only.
    pub fn expert(
        grid: &StateGrid<T>,
        demand_values: Vec<T>,
        sharpness: T,
        d_brake: T,
    ) -> Result<Self> {
        check_support(grid, &demand_values)?;
        check_sharpness(sharpness)?;
        if !(d_brake > T::zero()) {
            return Err(Error::InvalidParam(format!("d_brake must be positive, got {d_brake}")));
        }
        let v_max = grid.v_values[grid.nv() - 1];
        let d_max = grid.x_values[grid.nx() - 1];
        let m = demand_values.len();
        let mut pmf = Vec::with_capacity(grid.len() * m);
        for &x in &grid.x_values {
            let target = expert_target(x, d_max, v_max, d_brake);
            let mut row: Vec<T> = demand_values
                .iter()
                .map(|&d| (-sharpness * (d - target).abs() / v_max).exp())
                .collect();
            normalise(&mut row);
            for _ in 0..grid.nv() {
                pmf.extend_from_slice(&row);
            }
        }
        Ok(Self {
            kind: DriverKind::Expert,
            pmf,
            n_nodes: grid.len(),
            demand_values,
            sharpness: Some(sharpness),
            d_brake: Some(d_brake),
        })
    }

    /// Explicit table, node-major. Rows must be nonnegative and sum to one.
    pub fn custom(grid: &StateGrid<T>, demand_values: Vec<T>, rows: Vec<Vec<T>>) -> Result<Self> {
        check_support(grid, &demand_values)?;
        if rows.len() != grid.len() {
            return Err(Error::InvalidParam(format!(
                "pmf has {} rows, grid has {} nodes",
                rows.len(),
                grid.len()
            )));
        }
        let m = demand_values.len();
        let mut pmf = Vec::with_capacity(grid.len() * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidParam(format!(
                    "pmf row {i} has {} entries, expected {m}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(*p >= T::zero())) {
                return Err(Error::InvalidParam(format!("pmf row {i} has a negative entry")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > T::lit(1e-9).max(T::epsilon() * T::lit(64.0)) {
                return Err(Error::InvalidParam(format!("pmf row {i} sums to {s}")));
            }
            pmf.extend_from_slice(row);
        }
        Ok(Self {
            kind: DriverKind::Custom,
            pmf,
            n_nodes: grid.len(),
            demand_values,
            sharpness: None,
            d_brake: None,
        })
    }

    /// Loads `{"demand_values": [...], "pmf": [[...], ...]}`.
    pub fn load_custom(grid: &StateGrid<T>, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CustomPmf<T> =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::custom(grid, doc.demand_values, doc.pmf)
    }

    /// Degenerate single-point model, useful for deterministic drivers.
    pub fn deterministic(grid: &StateGrid<T>, demand: T) -> Result<Self> {
        Self::custom(grid, vec![demand], vec![vec![T::one()]; grid.len()])
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn pmf(&self, node: usize) -> &[T] {
        let m = self.demand_values.len();
        &self.pmf[node * m..(node + 1) * m]
    }

    pub fn expected_demand(&self, node: usize) -> T {
        self.pmf(node)
            .iter()
            .zip(&self.demand_values)
            .map(|(&p, &d)| p * d)
            .sum()
    }

    /// Draws one demand at `node` by inverting the cumulative distribution.
    pub fn sample<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> T {
        let probs = self.pmf(node);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                return self.demand_values[i];
            }
        }
        // Rounding left `acc` slightly below one; fall back to the last
        // support point carrying mass.
        let last = probs.iter().rposition(|&p| p > T::zero()).unwrap_or(probs.len() - 1);
        self.demand_values[last]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CustomPmf<T> {
    demand_values: Vec<T>,
    pmf: Vec<Vec<T>>,
}
