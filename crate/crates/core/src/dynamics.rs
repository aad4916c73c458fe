//! Longitudinal vehicle dynamics on a bounded straight line and the finite
//! state/control grids used by the dynamic-programming solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{clamp, index_slack, Scalar};

/// Physical parameters of the straight-line model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams<T> {
    /// Sensing range; the obstacle sits at `x = d_max`.
    pub d_max: T,
    pub v_min: T,
    pub v_max: T,
    pub sigma1: T,
    pub sigma2: T,
    /// Sampling period (s).
    pub dt: T,
}

impl<T: Scalar> Default for DynamicsParams<T> {
    fn default() -> Self {
        Self {
            d_max: T::lit(2.83),
            v_min: T::lit(-0.54),
            v_max: T::lit(0.54),
            sigma1: T::lit(0.8),
            sigma2: T::lit(0.2),
            dt: T::lit(0.1),
        }
    }
}

/// Position along the line and longitudinal velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State<T> {
    pub x: T,
    pub v: T,
}

impl<T: Scalar> State<T> {
    pub fn new(x: T, v: T) -> Self {
        Self { x, v }
    }
}

impl<T: Scalar> DynamicsParams<T> {
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        if !(self.v_min < zero && zero < self.v_max) {
            return Err(Error::InvalidParam(format!(
                "need v_min < 0 < v_max, got v_min={} v_max={}",
                self.v_min, self.v_max
            )));
        }
        if !(self.d_max > zero) {
            return Err(Error::InvalidParam(format!("d_max must be positive, got {}", self.d_max)));
        }
        if !(self.dt > zero) {
            return Err(Error::InvalidParam(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.sigma1 > zero && self.sigma1 < T::one() && self.sigma2 > zero) {
            return Err(Error::InvalidParam(format!(
                "need 0 < sigma1 < 1 and sigma2 > 0, got sigma1={} sigma2={}",
                self.sigma1, self.sigma2
            )));
        }
        let tol = T::epsilon() * T::lit(16.0);
        if (self.sigma1 + self.sigma2 - T::one()).abs() > tol {
            return Err(Error::InvalidParam(format!(
                "sigma1 + sigma2 must equal 1 (unity steady-state gain), got {}",
                self.sigma1 + self.sigma2
            )));
        }
        Ok(())
    }

    /// One sampling period of the saturated position/velocity update.
    /// `v_req` is the already-clamped total request (see [`Self::clamp_demand`]).
    pub fn step(&self, s: State<T>, v_req: T) -> State<T> {
        let x = clamp(s.x + s.v * self.dt, T::zero(), self.d_max);
        let v = clamp(self.sigma1 * s.v + self.sigma2 * v_req, self.v_min, self.v_max);
        State { x, v }
    }

    /// Total request `v_d + v_u` saturated to `[v_min, v_max]`, as the power
    /// module does when the request exceeds its profile.
    pub fn clamp_demand(&self, v_d: T, v_u: T) -> T {
        clamp(v_d + v_u, self.v_min, self.v_max)
    }

    /// Fixed point of the velocity update without saturation.
    pub fn steady_state_velocity(&self, v_req: T) -> T {
        self.sigma2 * v_req / (T::one() - self.sigma1)
    }

    /// Controls `u` from `grid` for which `v_d + u` already satisfies the
    /// velocity limits without clamping.
    pub fn admissible_controls(&self, grid: &ControlGrid<T>, v_d: T) -> Result<Vec<T>> {
        let out: Vec<T> = grid
            .u_values
            .iter()
            .copied()
            .filter(|&u| {
                let r = v_d + u;
                r >= self.v_min && r <= self.v_max
            })
            .collect();
        if out.is_empty() {
            return Err(Error::InvalidParam(format!(
                "control grid admits no control for demand {v_d}"
            )));
        }
        Ok(out)
    }
}

fn check_uniform<T: Scalar>(name: &str, vals: &[T]) -> Result<()> {
    if vals.is_empty() {
        return Err(Error::InvalidParam(format!("{name} is empty")));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam(format!("{name} contains non-finite values")));
    }
    if vals.len() < 2 {
        return Ok(());
    }
    let h = vals[1] - vals[0];
    if !(h > T::zero()) {
        return Err(Error::InvalidParam(format!("{name} must be strictly increasing")));
    }
    let scale = vals.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tol = (h * T::lit(1e-6)).max(scale * T::epsilon() * T::lit(64.0));
    for w in vals.windows(2) {
        if ((w[1] - w[0]) - h).abs() > tol {
            return Err(Error::InvalidParam(format!("{name} must be uniformly spaced")));
        }
    }
    Ok(())
}

fn linspace<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![lo];
    }
    let span = hi - lo;
    let last = T::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + span * T::from_usize_lossy(i) / last
            }
        })
        .collect()
}

/// Uniform `(x, v)` lattice. Nodes are numbered x-major, v-minor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateGrid<T> {
    pub x_values: Vec<T>,
    pub v_values: Vec<T>,
}

impl<T: Scalar> StateGrid<T> {
    pub fn new(x_values: Vec<T>, v_values: Vec<T>) -> Result<Self> {
        check_uniform("x_values", &x_values)?;
        check_uniform("v_values", &v_values)?;
        Ok(Self { x_values, v_values })
    }

    /// `nx` positions over `[0, d_max]` and `nv` velocities over `[v_min, v_max]`.
    pub fn uniform(params: &DynamicsParams<T>, nx: usize, nv: usize) -> Result<Self> {
        if nx < 2 || nv < 2 {
            return Err(Error::InvalidParam("grid needs at least 2 nodes per axis".into()));
        }
        let grid = Self::new(
            linspace(T::zero(), params.d_max, nx),
            linspace(params.v_min, params.v_max, nv),
        )?;
        grid.check_params(params)?;
        Ok(grid)
    }

    /// Checks that the grid spans exactly the state bounds of `params` and
    /// contains a zero-velocity row.
    pub fn check_params(&self, params: &DynamicsParams<T>) -> Result<()> {
        let tol = T::lit(1e-9).max(T::epsilon() * T::lit(16.0));
        let xs = &self.x_values;
        let vs = &self.v_values;
        if xs[0].abs() > tol || (xs[xs.len() - 1] - params.d_max).abs() > tol {
            return Err(Error::InvalidParam("x_values must span [0, d_max]".into()));
        }
        if (vs[0] - params.v_min).abs() > tol || (vs[vs.len() - 1] - params.v_max).abs() > tol {
            return Err(Error::InvalidParam("v_values must span [v_min, v_max]".into()));
        }
        if !vs.iter().any(|v| v.abs() <= tol) {
            return Err(Error::InvalidParam("v_values must contain 0".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.x_values.len()
    }

    pub fn nv(&self) -> usize {
        self.v_values.len()
    }

    pub fn len(&self) -> usize {
        self.nx() * self.nv()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> T {
        spacing(&self.x_values)
    }

    pub fn dv(&self) -> T {
        spacing(&self.v_values)
    }

    pub fn node(&self, ix: usize, iv: usize) -> usize {
        ix * self.nv() + iv
    }

    pub fn indices(&self, node: usize) -> (usize, usize) {
        (node / self.nv(), node % self.nv())
    }

    pub fn state(&self, node: usize) -> State<T> {
        let (ix, iv) = self.indices(node);
        State::new(self.x_values[ix], self.v_values[iv])
    }

    /// Nearest lattice node in cell-normalised coordinates; exact midpoints
    /// snap to the lower index.
    pub fn nearest_index(&self, s: State<T>) -> Result<(usize, usize)> {
        let ix = snap_axis(&self.x_values, s.x)
            .ok_or_else(|| Error::OutOfRange(format!("x = {} outside grid", s.x)))?;
        let iv = snap_axis(&self.v_values, s.v)
            .ok_or_else(|| Error::OutOfRange(format!("v = {} outside grid", s.v)))?;
        Ok((ix, iv))
    }

    pub fn nearest_node(&self, s: State<T>) -> Result<usize> {
        let (ix, iv) = self.nearest_index(s)?;
        Ok(self.node(ix, iv))
    }
}

fn spacing<T: Scalar>(vals: &[T]) -> T {
    if vals.len() < 2 {
        T::zero()
    } else {
        vals[1] - vals[0]
    }
}

fn snap_axis<T: Scalar>(vals: &[T], q: T) -> Option<usize> {
    let n = vals.len();
    if n == 1 {
        return if (q - vals[0]).abs() <= T::lit(1e-9) { Some(0) } else { None };
    }
    let h = vals[1] - vals[0];
    let f = (q - vals[0]) / h;
    let last = T::from_usize_lossy(n - 1);
    let slack = index_slack(last);
    if !f.is_finite() || f < -slack || f > last + slack {
        return None;
    }
    // Round half down: a fraction of exactly 0.5 stays on the lower node.
    let i = (f - T::lit(0.5) - slack).ceil();
    let i = clamp(i, T::zero(), last);
    i.to_usize()
}

/// Candidate supervisory corrections `v_u`, ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid<T> {
    pub u_values: Vec<T>,
}

impl<T: Scalar> ControlGrid<T> {
    pub fn new(u_values: Vec<T>) -> Result<Self> {
        check_uniform("u_values", &u_values)?;
        Ok(Self { u_values })
    }

    /// `n` (odd) controls spanning `[v_min - v_max, v_max - v_min]`.
    pub fn uniform(params: &DynamicsParams<T>, n: usize) -> Result<Self> {
        if n < 3 || n.is_multiple_of(2) {
            return Err(Error::InvalidParam(format!(
                "control count must be odd and >= 3 so that 0 is a node, got {n}"
            )));
        }
        let span = params.v_max - params.v_min;
        let mut u = linspace(-span, span, n);
        u[n / 2] = T::zero();
        let grid = Self::new(u)?;
        grid.check_params(params)?;
        Ok(grid)
    }

    pub fn check_params(&self, params: &DynamicsParams<T>) -> Result<()> {
        let tol = T::lit(1e-9);
        let span = params.v_max - params.v_min;
        let first = self.u_values[0];
        let last = self.u_values[self.u_values.len() - 1];
        if first > -span + tol || last < span - tol {
            return Err(Error::InvalidParam(format!(
                "controls must span [{}, {}]",
                -span, span
            )));
        }
        if !self.u_values.iter().any(|u| u.abs() <= tol) {
            return Err(Error::InvalidParam("controls must contain 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.u_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_values.is_empty()
    }
}
