//! Closed-loop episodes of a unicycle among static disc obstacles, with an
//! optional supervisor between the demand source and the drive.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmap::SafeBoundary;
use crate::driver::DriverModel;
use crate::dynamics::{DynamicsParams, State, StateGrid};
use crate::error::{Error, Result};
use crate::scalar::{clamp, Scalar};
use crate::supervisor::{fit_trajectory, supervise_2d, JoystickCommand, ObstaclePoint, SupervisionResult};

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_VEHICLE_RADIUS: f64 = 0.35;
pub const DEFAULT_SECTOR_HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
pub const DEFAULT_T_LIMIT: f64 = 30.0;
pub const DEFAULT_STEERING_GAIN: f64 = 2.0;
/// Gap below which the vehicle counts as touching an obstacle (m).
pub const CONTACT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

/// Angle wrapped into `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let pi = T::from_f64(std::f64::consts::PI).unwrap();
    let two_pi = pi + pi;
    let r = a - two_pi * ((a + pi) / two_pi).floor();
    if r <= -pi {
        r + two_pi
    } else if r > pi {
        r - two_pi
    } else {
        r
    }
}

pub fn kinematic_step<T: Scalar>(pose: Pose<T>, v: T, w: T, dt: T) -> Pose<T> {
    Pose {
        x: pose.x + v * pose.theta.cos() * dt,
        y: pose.y + v * pose.theta.sin() * dt,
        theta: wrap_angle(pose.theta + w * dt),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle<T> {
    pub x: T,
    pub y: T,
    pub r: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World<T> {
    pub obstacles: Vec<Circle<T>>,
    pub vehicle_radius: T,
    pub start: Pose<T>,
    /// Visited in order; an episode completes when the last one is reached.
    #[serde(default)]
    pub goals: Vec<Circle<T>>,
    pub sector_half_angle: T,
    pub sensor_range: T,
}

impl<T: Scalar> World<T> {
    /// Vehicle at the origin heading along +x with one disc obstacle whose
    /// surface is `gap` metres from the vehicle's.
    pub fn straight_approach(params: &DynamicsParams<T>, gap: T) -> Self {
        let vehicle_radius = T::lit(DEFAULT_VEHICLE_RADIUS);
        let r = T::lit(0.3);
        Self {
            obstacles: vec![Circle { x: gap + vehicle_radius + r, y: T::zero(), r }],
            vehicle_radius,
            start: Pose::default(),
            goals: Vec::new(),
            sector_half_angle: T::lit(DEFAULT_SECTOR_HALF_ANGLE),
            sensor_range: params.d_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: T| v.is_finite() && v > T::zero();
        if !positive(self.vehicle_radius) || !positive(self.sensor_range) || !positive(self.sector_half_angle) {
            return Err(Error::InvalidParam("vehicle radius, sensor range and sector must be positive".into()));
        }
        if self.obstacles.iter().chain(&self.goals).any(|c| !positive(c.r)) {
            return Err(Error::InvalidParam("circle radii must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let w: Self = serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    /// Smallest surface-to-surface distance to any obstacle.
    pub fn gap(&self, pose: &Pose<T>) -> T {
        self.obstacles
            .iter()
            .map(|c| ((c.x - pose.x).hypot(c.y - pose.y)) - c.r - self.vehicle_radius)
            .fold(T::infinity(), T::min)
    }
}

/// Nearest point of every obstacle inside the forward sensing sector, in the
/// vehicle frame.
pub fn sense<T: Scalar>(world: &World<T>, pose: &Pose<T>) -> Vec<ObstaclePoint<T>> {
    let (s, c) = pose.theta.sin_cos();
    world
        .obstacles
        .iter()
        .filter_map(|ob| {
            let (dx, dy) = (ob.x - pose.x, ob.y - pose.y);
            let fx = c * dx + s * dy;
            let fy = -s * dx + c * dy;
            let dc = fx.hypot(fy);
            if !(dc > ob.r) {
                return None;
            }
            let k = (dc - ob.r) / dc;
            let p = ObstaclePoint { forward: fx * k, lateral: fy * k };
            let range = p.forward.hypot(p.lateral);
            let in_sector = p.lateral.atan2(p.forward).abs() <= world.sector_half_angle;
            (p.forward > T::zero() && range <= world.sensor_range && in_sector).then_some(p)
        })
        .collect()
}

/// Path distance to the nearest sensed obstacle, less the vehicle radius.
pub fn nearest_path_distance<T: Scalar>(obstacles: &[ObstaclePoint<T>], clearance: T) -> Option<T> {
    obstacles
        .iter()
        .filter_map(|o| fit_trajectory(*o))
        .map(|f| f.arc_length - clearance)
        .reduce(T::min)
}

pub enum DemandSource<'a, T> {
    /// Stochastic driver: forward demand drawn from the model at the 1D state
    /// seen by the sensors; heading steered toward the next goal.
    Model { model: &'a DriverModel<T>, grid: &'a StateGrid<T> },
    Constant(JoystickCommand<T>),
    /// One command per tick; zero once exhausted.
    Stream(&'a [JoystickCommand<T>]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig<T> {
    pub params: DynamicsParams<T>,
    pub w_max: T,
    pub t_limit: T,
    pub alpha: T,
    /// Negative forward demand is zeroed, as in the scored study runs.
    pub forward_only: bool,
    pub steering_gain: T,
}

impl<T: Scalar> Default for EpisodeConfig<T> {
    fn default() -> Self {
        Self {
            params: DynamicsParams::default(),
            w_max: T::lit(crate::supervisor::DEFAULT_W_MAX),
            t_limit: T::lit(DEFAULT_T_LIMIT),
            alpha: T::lit(DEFAULT_ALPHA),
            forward_only: true,
            steering_gain: T::lit(DEFAULT_STEERING_GAIN),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample<T> {
    pub t: T,
    pub pose: Pose<T>,
    pub v: T,
    pub w: T,
    pub v_d: T,
    pub w_d: T,
    pub v_u: T,
    pub w_u: T,
    pub ratio: T,
    pub collision: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary<T> {
    pub t_d: T,
    pub c_d: u32,
    pub score: T,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace<T> {
    pub seed: u64,
    pub stream: u64,
    pub samples: Vec<Sample<T>>,
    pub summary: Summary<T>,
}

impl<T: Scalar> EpisodeTrace<T> {
    /// One JSON object per sample, then nothing else.
    pub fn write_ndjson(&self, mut out: impl Write) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut out, s).map_err(|e| Error::Malformed(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn score<T: Scalar>(t_d: T, c_d: u32, alpha: T) -> T {
    t_d + alpha * T::from_u32(c_d).unwrap()
}

/// Count of false-to-true transitions.
pub fn collision_onsets<T>(samples: &[Sample<T>]) -> u32 {
    let mut prev = false;
    let mut n = 0;
    for s in samples {
        if s.collision && !prev {
            n += 1;
        }
        prev = s.collision;
    }
    n
}

pub fn check_boundary<T: Scalar>(b: &SafeBoundary<T>, params: &DynamicsParams<T>) -> Result<()> {
    let p = &b.params;
    let tol = T::lit(1e-9);
    let same = |a: T, b: T| (a - b).abs() <= tol;
    if same(p.d_max, params.d_max)
        && same(p.v_min, params.v_min)
        && same(p.v_max, params.v_max)
        && same(p.sigma1, params.sigma1)
        && same(p.sigma2, params.sigma2)
        && same(p.dt, params.dt)
    {
        Ok(())
    } else {
        Err(Error::InvalidParam("boundary was built for different dynamics".into()))
    }
}

/// Last pose on the straight segment `from -> to` that does not overlap an
/// obstacle.
fn contact_pose<T: Scalar>(world: &World<T>, from: Pose<T>, to: Pose<T>) -> Pose<T> {
    let lerp = |f: T| Pose {
        x: from.x + (to.x - from.x) * f,
        y: from.y + (to.y - from.y) * f,
        theta: to.theta,
    };
    let (mut lo, mut hi) = (T::zero(), T::one());
    for _ in 0..60 {
        let mid = T::lit(0.5) * (lo + hi);
        if world.gap(&lerp(mid)) < T::zero() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p = lerp(lo);
    if world.gap(&p) < T::zero() {
        Pose { theta: to.theta, ..from }
    } else {
        p
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub pose: Pose<T>,
    pub v: T,
    pub w: T,
}

impl<T: Scalar> VehicleState<T> {
    pub fn at(pose: Pose<T>) -> Self {
        Self { pose, v: T::zero(), w: T::zero() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome<T> {
    pub supervision: SupervisionResult<T>,
    /// The step tried to move into an obstacle.
    pub hit: bool,
    /// Touching an obstacle after the step.
    pub contact: bool,
}

/// One sampling period: supervise `cmd` (already clamped to the joystick
/// range) against the sensed obstacles, then advance pose and velocities.
/// On contact the vehicle stops at the contact pose with zero velocities.
pub fn step_vehicle<T: Scalar>(
    world: &World<T>,
    p: &DynamicsParams<T>,
    w_max: T,
    vehicle: &mut VehicleState<T>,
    cmd: JoystickCommand<T>,
    seen: &[ObstaclePoint<T>],
    boundary: Option<&SafeBoundary<T>>,
) -> StepOutcome<T> {
    let VehicleState { pose, v, w } = *vehicle;
    let supervision = match boundary {
        Some(b) => supervise_2d(b, cmd, v, seen, world.vehicle_radius),
        None => SupervisionResult::passthrough(),
    };
    let v_req = p.clamp_demand(cmd.v_d, supervision.v_u);
    let w_req = clamp(cmd.w_d + supervision.w_u, -w_max, w_max);

    let next = kinematic_step(pose, v, w, p.dt);
    let hit = world.gap(&next) < T::zero();
    *vehicle = if hit {
        VehicleState::at(contact_pose(world, pose, next))
    } else {
        VehicleState {
            pose: next,
            v: clamp(p.sigma1 * v + p.sigma2 * v_req, p.v_min, p.v_max),
            w: clamp(p.sigma1 * w + p.sigma2 * w_req, -w_max, w_max),
        }
    };
    let contact = hit || world.gap(&vehicle.pose) <= T::lit(CONTACT_TOL);
    StepOutcome { supervision, hit, contact }
}

/// Runs one episode. Deterministic in `(seed, stream)` for model-driven
/// sources and fully deterministic otherwise. The episode continues after a
/// contact; each new contact is one collision.
pub fn run_episode<T: Scalar>(
    world: &World<T>,
    source: &DemandSource<'_, T>,
    boundary: Option<&SafeBoundary<T>>,
    cfg: &EpisodeConfig<T>,
    seed: u64,
    stream: u64,
) -> Result<EpisodeTrace<T>> {
    cfg.params.validate()?;
    world.validate()?;
    if !(cfg.t_limit > T::zero()) || !(cfg.w_max > T::zero()) || !(cfg.alpha > T::zero()) {
        return Err(Error::InvalidParam("t_limit, w_max and alpha must be positive".into()));
    }
    if let Some(b) = boundary {
        check_boundary(b, &cfg.params)?;
    }
    if let DemandSource::Model { model, grid } = source {
        if model.n_nodes() != grid.len() {
            return Err(Error::InvalidParam("driver model and grid sizes differ".into()));
        }
    }
    let p = &cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let steps = (cfg.t_limit / p.dt).round().to_usize().unwrap_or(0).max(1);
    let mut vehicle = VehicleState::at(world.start);
    let mut goal = 0;
    let mut samples = Vec::with_capacity(steps);
    let mut completed = false;
    let mut t_d = T::from_usize_lossy(steps) * p.dt;

    for k in 0..steps {
        let VehicleState { pose, v, .. } = vehicle;
        let seen = sense(world, &pose);
        let raw = match source {
            DemandSource::Constant(c) => *c,
            DemandSource::Stream(s) => s.get(k).copied().unwrap_or_default(),
            DemandSource::Model { model, grid } => {
                let d = nearest_path_distance(&seen, world.vehicle_radius);
                let x = d.map_or(T::zero(), |d| clamp(p.d_max - d, T::zero(), p.d_max));
                let node = grid.nearest_node(State::new(x, clamp(v, p.v_min, p.v_max)))?;
                let v_d = model.sample(node, &mut rng);
                let w_d = match world.goals.get(goal) {
                    Some(g) => {
                        let bearing = (g.y - pose.y).atan2(g.x - pose.x);
                        cfg.steering_gain * wrap_angle(bearing - pose.theta)
                    }
                    None => T::zero(),
                };
                JoystickCommand::new(v_d, w_d)
            }
        };
        let mut cmd = raw.clamped(p, cfg.w_max);
        if cfg.forward_only {
            cmd.v_d = cmd.v_d.max(T::zero());
        }
        let out = step_vehicle(world, p, cfg.w_max, &mut vehicle, cmd, &seen, boundary);
        let (pose, v) = (vehicle.pose, vehicle.v);
        let t = T::from_usize_lossy(k + 1) * p.dt;
        samples.push(Sample {
            t,
            pose,
            v,
            w: vehicle.w,
            v_d: cmd.v_d,
            w_d: cmd.w_d,
            v_u: out.supervision.v_u,
            w_u: out.supervision.w_u,
            ratio: out.supervision.ratio,
            collision: out.contact,
        });
        while let Some(g) = world.goals.get(goal) {
            if (g.x - pose.x).hypot(g.y - pose.y) <= g.r {
                goal += 1;
            } else {
                break;
            }
        }
        if !world.goals.is_empty() && goal == world.goals.len() {
            completed = true;
            t_d = t;
            break;
        }
    }
    let c_d = collision_onsets(&samples);
    Ok(EpisodeTrace {
        seed,
        stream,
        samples,
        summary: Summary { t_d, c_d, score: score(t_d, c_d, cfg.alpha), completed: completed || world.goals.is_empty() },
    })
}

/// `episodes` runs in parallel; episode `i` uses random stream `i` of `seed`.
pub fn run_batch<T: Scalar>(
    world: &World<T>,
    source: &DemandSource<'_, T>,
    boundary: Option<&SafeBoundary<T>>,
    cfg: &EpisodeConfig<T>,
    seed: u64,
    episodes: usize,
) -> Result<Vec<EpisodeTrace<T>>> {
    (0..episodes as u64)
        .into_par_iter()
        .map(|i| run_episode(world, source, boundary, cfg, seed, i))
        .collect()
}
