use serde::{Deserialize, Serialize};

use super::{normalize_angle, Pose, WorldError, WorldModel, ROBOT_RADIUS};

pub const V_MAX: f64 = 0.5;
pub const OMEGA_MAX: f64 = 1.5;

/// Longest straight-line advance between collision probes.
const PROBE_STEP: f64 = 0.01;
const BISECT_ITERS: usize = 48;

/// Twist-like actuation: linear speed (m/s) and angular speed (rad/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    pub linear: f64,
    pub angular: f64,
}

impl DriveCommand {
    pub fn new(linear: f64, angular: f64) -> Self {
        Self { linear, angular }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose,
    pub radius: f64,
    pub linear: f64,
    pub angular: f64,
    pub collided: bool,
}

impl RobotState {
    pub fn at(pose: Pose) -> Self {
        Self {
            pose,
            radius: ROBOT_RADIUS,
            linear: 0.0,
            angular: 0.0,
            collided: false,
        }
    }
}

/// Pose after following `cmd` for fraction `s` of `dt`.
fn integrate(p: &Pose, cmd: &DriveCommand, dt: f64, s: f64) -> Pose {
    let (v, w) = (cmd.linear, cmd.angular);
    let th = p.theta + w * dt * s;
    if w.abs() > 1e-9 {
        let r = v / w;
        Pose::new(p.x + r * (th.sin() - p.theta.sin()), p.y - r * (th.cos() - p.theta.cos()), th)
    } else {
        let d = v * dt * s;
        Pose::new(p.x + d * p.theta.cos(), p.y + d * p.theta.sin(), th)
    }
}

/// Exact unicycle motion over `dt`. If the swept disc would intersect an
/// obstacle, the robot stops at the last contact-free pose and `collided`
/// is set. A collided robot no longer moves.
pub fn step_robot(state: &RobotState, cmd: &DriveCommand, dt: f64, world: &WorldModel) -> Result<RobotState, WorldError> {
    if !(dt > 0.0 && dt <= 0.5) {
        return Err(WorldError::TimeStep(dt));
    }
    let mut next = *state;
    if state.collided {
        next.linear = 0.0;
        next.angular = 0.0;
        return Ok(next);
    }
    if world.check_collision(&state.pose, state.radius) {
        next.collided = true;
        return Ok(next);
    }
    next.linear = cmd.linear;
    next.angular = cmd.angular;
    let travel = cmd.linear.abs() * dt;
    let probes = ((travel / PROBE_STEP).ceil() as usize).max(1);
    let mut free_s = 0.0;
    for k in 1..=probes {
        let s = k as f64 / probes as f64;
        if world.check_collision(&integrate(&state.pose, cmd, dt, s), state.radius) {
            let mut hit_s = s;
            for _ in 0..BISECT_ITERS {
                let mid = 0.5 * (free_s + hit_s);
                if world.check_collision(&integrate(&state.pose, cmd, dt, mid), state.radius) {
                    hit_s = mid;
                } else {
                    free_s = mid;
                }
            }
            next.pose = integrate(&state.pose, cmd, dt, free_s);
            next.collided = true;
            next.linear = 0.0;
            next.angular = 0.0;
            return Ok(next);
        }
        free_s = s;
    }
    next.pose = integrate(&state.pose, cmd, dt, 1.0);
    next.pose.theta = normalize_angle(next.pose.theta);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Appearance, Footprint, HeightClass, ObjectClass, Obstacle};
    use std::f64::consts::PI;

    fn open() -> WorldModel {
        WorldModel::empty([100.0, 100.0])
    }

    #[test]
    fn zero_command_keeps_pose() {
        let s = RobotState::at(Pose::new(5.0, 5.0, 0.3));
        let n = step_robot(&s, &DriveCommand::default(), 0.1, &open()).unwrap();
        assert_eq!(n.pose, s.pose);
        assert!(!n.collided);
    }

    #[test]
    fn straight_and_spin() {
        let s = RobotState::at(Pose::new(5.0, 5.0, 0.0));
        let n = step_robot(&s, &DriveCommand::new(1.0, 0.0), 0.1, &open()).unwrap();
        assert!((n.pose.x - 5.1).abs() < 1e-12 && n.pose.y == 5.0);
        let n = step_robot(&s, &DriveCommand::new(0.0, PI), 0.5, &open()).unwrap();
        assert!((n.pose.theta - PI / 2.0).abs() < 1e-12);
        let n = step_robot(&n, &DriveCommand::new(0.0, PI), 0.5, &open()).unwrap();
        assert!((n.pose.theta.abs() - PI).abs() < 1e-12);
        assert_eq!((n.pose.x, n.pose.y), (5.0, 5.0));
    }

    #[test]
    fn arc_stays_on_circle() {
        let s = RobotState::at(Pose::new(50.0, 50.0, 0.0));
        let cmd = DriveCommand::new(0.5, 1.0);
        let mut st = s;
        for _ in 0..20 {
            st = step_robot(&st, &cmd, 0.1, &open()).unwrap();
        }
        // Turning centre is (50, 50.5) with radius 0.5.
        assert!(((st.pose.x - 50.0).hypot(st.pose.y - 50.5) - 0.5).abs() < 1e-9);
        assert!((st.pose.theta - 2.0).abs() < 1e-9);
    }

    #[test]
    fn stops_at_contact() {
        let mut w = open();
        w.obstacles.push(Obstacle {
            footprint: Footprint::Box {
                min: [6.0, 0.0],
                max: [7.0, 100.0],
            },
            height: HeightClass::Tall,
            class: ObjectClass::Wall,
            look: Appearance::solid([0, 0, 0]),
        });
        let s = RobotState::at(Pose::new(5.0, 5.0, 0.0));
        let n = step_robot(&s, &DriveCommand::new(20.0, 0.0), 0.5, &w).unwrap();
        assert!(n.collided);
        assert!(!w.check_collision(&n.pose, n.radius));
        assert!((n.pose.x - (6.0 - ROBOT_RADIUS)).abs() < 1e-9);
        let again = step_robot(&n, &DriveCommand::new(1.0, 0.0), 0.1, &w).unwrap();
        assert_eq!(again.pose, n.pose);
    }

    #[test]
    fn rejects_bad_dt() {
        let s = RobotState::at(Pose::new(5.0, 5.0, 0.0));
        assert!(step_robot(&s, &DriveCommand::default(), 0.0, &open()).is_err());
        assert!(step_robot(&s, &DriveCommand::default(), 0.6, &open()).is_err());
    }
}
