use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{SimError, WorldSpec};
use crate::geometry::PoseSE3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Constant forward speed, m/s.
    pub speed: f64,
    pub wheelbase: f64,
    /// Steering angle at full lock, radians. Actions in `[-1, 1]` scale it.
    pub max_steer: f64,
    /// Control period, seconds.
    pub dt: f64,
    /// Radius of the vehicle's footprint for collision checks.
    pub radius: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self { speed: 6.9, wheelbase: 1.0, max_steer: 0.3, dt: 1.0 / 6.0, radius: 0.3 }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.speed > 0.0
            && self.wheelbase > 0.0
            && self.max_steer > 0.0
            && self.max_steer < PI / 2.0
            && self.dt > 0.0
            && self.radius >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid vehicle parameters {self:?}")))
        }
    }

    pub fn step_length(&self) -> f64 {
        self.speed * self.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Radians in `(-pi, pi]`.
    pub heading: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::planar(self.x, self.y, self.heading)
    }

    /// `(x, y)` of a world point in this vehicle's frame.
    pub fn to_robot(&self, x: f64, y: f64) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    pub collision: bool,
    /// The new position lies outside the world extent.
    pub outside: bool,
}

/// Advances the kinematic bicycle one control period with steering
/// `action` in `[-1, 1]` (clamped). The rear axle follows an exact circular
/// arc of radius `wheelbase / tan(steer)`. If the arc's midpoint or end
/// touches an obstacle or the world wall the vehicle stays where it was
/// and the step is a collision.
pub fn step_dynamics(world: &WorldSpec, params: &VehicleParams, state: &VehicleState, action: f64) -> StepOutcome {
    let next = integrate(params, state, action.clamp(-1.0, 1.0), params.dt);
    let mid = integrate(params, state, action.clamp(-1.0, 1.0), params.dt / 2.0);
    let hit = [&mid, &next].iter().any(|s| world.obstacle_at(s.x, s.y, params.radius).is_some() || world.touches_wall(s.x, s.y, params.radius));
    if hit {
        return StepOutcome { state: *state, collision: true, outside: false };
    }
    StepOutcome { state: next, collision: false, outside: !world.contains(next.x, next.y) }
}

fn integrate(params: &VehicleParams, s: &VehicleState, action: f64, dt: f64) -> VehicleState {
    let steer = action * params.max_steer;
    let dist = params.speed * dt;
    let curvature = steer.tan() / params.wheelbase;
    let dh = dist * curvature;
    let (x, y) = if dh.abs() < 1e-12 {
        (s.x + dist * s.heading.cos(), s.y + dist * s.heading.sin())
    } else {
        let r = 1.0 / curvature;
        (
            s.x + r * ((s.heading + dh).sin() - s.heading.sin()),
            s.y - r * ((s.heading + dh).cos() - s.heading.cos()),
        )
    };
    VehicleState::new(x, y, s.heading + dh)
}
