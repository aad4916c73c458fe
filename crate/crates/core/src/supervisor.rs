//! Online attenuation of the driver's joystick demand against a safe-velocity
//! boundary, in 1D and for a vehicle sensing several obstacles ahead.

use serde::{Deserialize, Serialize};

use crate::costmap::SafeBoundary;
use crate::dynamics::DynamicsParams;
use crate::scalar::{clamp, Scalar};

pub const DEFAULT_W_MAX: f64 = 1.0;
/// Guards the ratio division at near-zero demand (m/s).
pub const RATIO_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JoystickCommand<T> {
    pub v_d: T,
    pub w_d: T,
}

impl<T: Scalar> JoystickCommand<T> {
    pub fn new(v_d: T, w_d: T) -> Self {
        Self { v_d, w_d }
    }

    /// Clamp into the joystick range; non-finite input becomes zero.
    pub fn clamped(self, params: &DynamicsParams<T>, w_max: T) -> Self {
        let fix = |x: T| if x.is_finite() { x } else { T::zero() };
        Self {
            v_d: clamp(fix(self.v_d), params.v_min, params.v_max),
            w_d: clamp(fix(self.w_d), -w_max, w_max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supervision1d<T> {
    pub v_u: T,
    pub ratio: T,
    pub active: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionResult<T> {
    pub v_u: T,
    pub w_u: T,
    pub ratio: T,
    pub active: bool,
    pub limiting_distance: Option<T>,
}

impl<T: Scalar> SupervisionResult<T> {
    pub fn passthrough() -> Self {
        Self { v_u: T::zero(), w_u: T::zero(), ratio: T::one(), active: false, limiting_distance: None }
    }

    /// The command forwarded to the drive: `ratio * cmd`.
    pub fn apply(&self, cmd: JoystickCommand<T>) -> JoystickCommand<T> {
        JoystickCommand { v_d: self.ratio * cmd.v_d, w_d: self.ratio * cmd.w_d }
    }
}

/// Obstacle point in the vehicle frame: `forward` along the heading,
/// `lateral` to the left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePoint<T> {
    pub forward: T,
    pub lateral: T,
}

/// `y = a x^2` from the vehicle to an obstacle point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFit<T> {
    pub a: T,
    pub forward: T,
    pub arc_length: T,
}

/// Steady-state attenuation along a straight line. `v` is accepted for
/// interface symmetry; the rule only looks at the demand.
pub fn supervise_1d<T: Scalar>(boundary: &SafeBoundary<T>, x: T, _v: T, v_d: T) -> Supervision1d<T> {
    let v_b = boundary.velocity_at(x);
    if v_d <= T::zero() || v_d <= v_b {
        return Supervision1d { v_u: T::zero(), ratio: T::one(), active: false };
    }
    let ratio = clamp(v_b / v_d, T::zero(), T::one());
    Supervision1d { v_u: (ratio - T::one()) * v_d, ratio, active: true }
}

/// Parabola tangent to the heading through the obstacle point. `None` for
/// points that are not ahead of the vehicle.
pub fn fit_trajectory<T: Scalar>(obstacle: ObstaclePoint<T>) -> Option<TrajectoryFit<T>> {
    let xo = obstacle.forward.as_f64();
    let yo = obstacle.lateral.as_f64();
    if !(xo > 0.0) || !yo.is_finite() {
        return None;
    }
    let a = yo / (xo * xo);
    let speed = |x: f64| (1.0 + (2.0 * a * x).powi(2)).sqrt();
    let arc = if a == 0.0 { xo } else { adaptive_simpson(&speed, 0.0, xo, 1e-10 * xo) };
    Some(TrajectoryFit { a: T::lit(a), forward: obstacle.forward, arc_length: T::lit(arc) })
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 48)
}

/// Scales both joystick axes by a single ratio so the forward demand does not
/// exceed the safe velocity of the nearest obstacle along its fitted path.
/// `clearance` (the vehicle radius) is taken off each path length so that the
/// map's obstacle position corresponds to contact.
pub fn supervise_2d<T: Scalar>(
    boundary: &SafeBoundary<T>,
    cmd: JoystickCommand<T>,
    _v: T,
    obstacles: &[ObstaclePoint<T>],
    clearance: T,
) -> SupervisionResult<T> {
    let d_max = boundary.d_max();
    let mut v_safe = boundary.v_max();
    let mut limiting: Option<(T, T)> = None;
    for ob in obstacles {
        let Some(fit) = fit_trajectory(*ob) else { continue };
        let d = fit.arc_length - clearance;
        let v_i = boundary.velocity_at(clamp(d_max - d, T::zero(), d_max));
        let better = match limiting {
            None => true,
            Some((vl, dl)) => v_i < vl || (v_i == vl && d < dl),
        };
        if better {
            limiting = Some((v_i, d));
        }
        v_safe = v_safe.min(v_i);
    }
    let limiting_distance = limiting.map(|(_, d)| d);
    if !(cmd.v_d > v_safe) {
        return SupervisionResult { limiting_distance, ..SupervisionResult::passthrough() };
    }
    let ratio = clamp(v_safe / cmd.v_d.max(T::lit(RATIO_EPS)), T::zero(), T::one());
    SupervisionResult {
        v_u: ratio * cmd.v_d - cmd.v_d,
        w_u: ratio * cmd.w_d - cmd.w_d,
        ratio,
        active: true,
        limiting_distance,
    }
}
