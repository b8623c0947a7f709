//! Closed-loop runtime: capture every modality at the current pose, infer a
//! steering value, turn it into a clamped twist and step the robot.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::{ExpertConfig, ExpertDriver};
use crate::dataset::{make_batch, DatasetError, Sample};
use crate::nets::{forward, ForwardOptions, ModelWeights, NetConfig, NetsError};
use crate::sensors::{simulate_laser, SensorRig, SensorTriple};
use crate::world::{generate_world, step_robot, DriveCommand, EnvType, Pose, RobotState, WorldError, WorldModel, OMEGA_MAX, V_MAX};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite command ({linear}, {angular})")]
    NonFiniteCommand { linear: f64, angular: f64 },
    #[error("network produced non-finite steering {0}")]
    NonFiniteOutput(f32),
    #[error("max_steps must be at least 1")]
    NoSteps,
    #[error("robot is already in collision")]
    Collided,
    #[error(transparent)]
    Nets(#[from] NetsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Componentwise clamp into `|linear| <= V_MAX`, `|angular| <= OMEGA_MAX`.
pub fn clamp_command(cmd: DriveCommand) -> Result<DriveCommand> {
    if !(cmd.linear.is_finite() && cmd.angular.is_finite()) {
        return Err(PolicyError::NonFiniteCommand {
            linear: cmd.linear,
            angular: cmd.angular,
        });
    }
    Ok(DriveCommand::new(cmd.linear.clamp(-V_MAX, V_MAX), cmd.angular.clamp(-OMEGA_MAX, OMEGA_MAX)))
}

/// Constant forward speed; the steering value scales the yaw rate.
pub fn steering_to_command(s: f32) -> Result<DriveCommand> {
    if !s.is_finite() {
        return Err(PolicyError::NonFiniteOutput(s));
    }
    clamp_command(DriveCommand::new(V_MAX, (s as f64).clamp(-1.0, 1.0) * OMEGA_MAX))
}

/// Result of one acquire-infer-command cycle.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub command: DriveCommand,
    /// Raw network output.
    pub prediction: f32,
    /// Everything captured this tick; `steering` holds the commanded,
    /// normalized value rather than a human label.
    pub observation: SensorTriple,
}

/// Network-driven steering with the sensor rig it was trained on.
pub struct NetworkPolicy {
    pub weights: ModelWeights,
    pub net: NetConfig,
    pub rig: SensorRig,
    /// Mixed with the tick to seed point-cloud resampling.
    pub seed: u64,
}

impl NetworkPolicy {
    pub fn new(weights: ModelWeights, net: NetConfig) -> Result<Self> {
        weights.check_layout(&net)?;
        let rig = SensorRig {
            camera: crate::sensors::CameraConfig::with_dims(net.rgb_height, net.rgb_width),
            ..SensorRig::default()
        };
        Ok(Self { weights, net, rig, seed: 0 })
    }

    /// Steering for one observation, eval mode.
    pub fn infer(&self, triple: &SensorTriple) -> Result<f32> {
        let sample = Sample::from_triple(triple, &self.net)?;
        let batch = make_batch(&[&sample], &self.net, self.weights.arch);
        let y = forward(&self.weights, &batch, ForwardOptions::eval())?.predictions()?[0];
        if !y.is_finite() {
            return Err(PolicyError::NonFiniteOutput(y));
        }
        Ok(y)
    }

    /// Acquires all modalities at `state` under one `tick`, infers and
    /// returns the clamped command.
    pub fn step(&self, world: &WorldModel, state: &RobotState, tick: u64) -> Result<PolicyStep> {
        if state.collided {
            return Err(PolicyError::Collided);
        }
        let obs = self.rig.capture(world, &state.pose);
        let sample_seed = self.seed ^ tick.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut triple = obs.into_triple(0.0, tick, world.env, world.dr_seed.is_some(), world.seed, sample_seed);
        let prediction = self.infer(&triple)?;
        let command = steering_to_command(prediction)?;
        triple.steering = (command.angular / OMEGA_MAX) as f32;
        Ok(PolicyStep {
            command,
            prediction,
            observation: triple,
        })
    }
}

/// `policy_step` in free-function form.
pub fn policy_step(policy: &NetworkPolicy, world: &WorldModel, state: &RobotState, tick: u64) -> Result<PolicyStep> {
    policy.step(world, state, tick)
}

/// Anything that maps the current situation to a normalized steering value.
pub trait Controller {
    fn steer(&mut self, world: &WorldModel, state: &RobotState, tick: u64, dt: f64) -> Result<f32>;
}

impl Controller for NetworkPolicy {
    fn steer(&mut self, world: &WorldModel, state: &RobotState, tick: u64, _dt: f64) -> Result<f32> {
        Ok(self.step(world, state, tick)?.prediction)
    }
}

/// The scripted collection driver as a controller.
pub struct ExpertController {
    pub driver: ExpertDriver,
    pub rig: SensorRig,
}

impl ExpertController {
    pub fn new(config: ExpertConfig, seed: u64) -> Self {
        Self {
            driver: ExpertDriver::new(config, seed),
            rig: SensorRig::default(),
        }
    }
}

impl Controller for ExpertController {
    fn steer(&mut self, world: &WorldModel, state: &RobotState, _tick: u64, dt: f64) -> Result<f32> {
        let scan = simulate_laser(world, &state.pose, &self.rig.laser);
        Ok(self.driver.steer(&scan, &state.pose, dt))
    }
}

/// Constant steering; handy as a stub.
pub struct FixedSteering(pub f32);

impl Controller for FixedSteering {
    fn steer(&mut self, _: &WorldModel, _: &RobotState, _: u64, _: f64) -> Result<f32> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Collision,
    StepLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub tick: u64,
    pub pose: [f64; 3],
    /// Command applied from this pose; `None` on the final point.
    pub command: Option<DriveCommand>,
    pub collided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub env: EnvType,
    pub seed: u64,
    /// Summed straight-line displacement between consecutive poses.
    pub distance: f64,
    pub steps: usize,
    pub terminated_by: Termination,
    /// `steps + 1` points.
    pub trace: Vec<TracePoint>,
}

impl EpisodeResult {
    /// One JSON object per trace point.
    pub fn write_trace(&self, mut out: impl Write) -> std::io::Result<()> {
        for p in &self.trace {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Steps `ctrl` from `start` until a collision or `max_steps`.
pub fn run_controller(ctrl: &mut dyn Controller, world: &WorldModel, start: Pose, max_steps: usize, dt: f64) -> Result<EpisodeResult> {
    if max_steps == 0 {
        return Err(PolicyError::NoSteps);
    }
    if !(dt > 0.0 && dt <= 0.5) {
        return Err(WorldError::TimeStep(dt).into());
    }
    let mut state = RobotState::at(start);
    let point = |tick: u64, s: &RobotState| TracePoint {
        tick,
        pose: [s.pose.x, s.pose.y, s.pose.theta],
        command: None,
        collided: s.collided,
    };
    let mut trace = vec![point(0, &state)];
    let mut distance = 0.0;
    let mut terminated_by = Termination::StepLimit;
    if world.check_collision(&state.pose, state.radius) {
        return Err(PolicyError::Collided);
    }
    for tick in 0..max_steps as u64 {
        let s = ctrl.steer(world, &state, tick, dt)?;
        let cmd = steering_to_command(s)?;
        trace.last_mut().expect("trace starts non-empty").command = Some(cmd);
        let next = step_robot(&state, &cmd, dt, world)?;
        distance += (next.pose.x - state.pose.x).hypot(next.pose.y - state.pose.y);
        state = next;
        trace.push(point(tick + 1, &state));
        if state.collided {
            terminated_by = Termination::Collision;
            break;
        }
    }
    Ok(EpisodeResult {
        env: world.env,
        seed: world.seed,
        distance,
        steps: trace.len() - 1,
        terminated_by,
        trace,
    })
}

/// Generates `(env, seed)` and drives the network from the spawn pose.
pub fn run_episode(policy: &mut NetworkPolicy, env: EnvType, seed: u64, max_steps: usize, dt: f64) -> Result<EpisodeResult> {
    let world = generate_world(env, seed, crate::world::DEFAULT_AREA_SCALE)?;
    policy.seed = seed;
    run_controller(policy, &world, world.spawn, max_steps, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_weights, Arch};
    use crate::world::{Appearance, Footprint, HeightClass, ObjectClass, Obstacle};

    #[test]
    fn clamp_bounds_and_idempotence() {
        let c = clamp_command(DriveCommand::new(0.5, 1.0)).unwrap();
        assert_eq!(c, DriveCommand::new(0.5, 1.0));
        let c = clamp_command(DriveCommand::new(2.0, -9.0)).unwrap();
        assert_eq!(c, DriveCommand::new(0.5, -1.5));
        assert_eq!(clamp_command(c).unwrap(), c);
        assert!(clamp_command(DriveCommand::new(f64::NAN, 0.0)).is_err());
    }

    fn stub(bias: f32) -> NetworkPolicy {
        let net = NetConfig::default();
        let mut w = init_weights(Arch::Nmfnet, &net, 1).unwrap();
        w.get_mut("head.w").unwrap().data_mut().fill(0.0);
        w.get_mut("head.b").unwrap().data_mut().fill(bias);
        NetworkPolicy::new(w, net).unwrap()
    }

    #[test]
    fn stub_outputs_map_to_commands() {
        let world = generate_world(EnvType::CollapsedCity, 3, 0.1).unwrap();
        let state = RobotState::at(world.spawn);
        for (bias, angular) in [(0.0, 0.0), (0.3, 0.45), (5.0, 1.5)] {
            let s = stub(bias).step(&world, &state, 7).unwrap();
            assert_eq!(s.command.linear, 0.5);
            assert!((s.command.angular - angular).abs() < 1e-6, "{bias}: {:?}", s.command);
            assert_eq!(s.observation.tick, 7);
        }
    }

    #[test]
    fn straight_in_empty_world() {
        let world = WorldModel::empty([40.0, 40.0]);
        let r = run_controller(&mut FixedSteering(0.0), &world, Pose::new(5.0, 20.0, 0.0), 100, 0.1).unwrap();
        assert_eq!(r.terminated_by, Termination::StepLimit);
        assert_eq!(r.steps, 100);
        assert_eq!(r.trace.len(), 101);
        assert!((r.distance - 5.0).abs() < 1e-6);
        let poly: f64 = r.trace.windows(2).map(|w| (w[1].pose[0] - w[0].pose[0]).hypot(w[1].pose[1] - w[0].pose[1])).sum();
        assert!((poly - r.distance).abs() < 1e-9);
    }

    #[test]
    fn wall_ahead_collides() {
        let mut world = WorldModel::empty([40.0, 40.0]);
        world.obstacles.push(Obstacle {
            footprint: Footprint::Box {
                min: [10.4, 0.0],
                max: [11.0, 40.0],
            },
            height: HeightClass::Tall,
            class: ObjectClass::Wall,
            look: Appearance::solid([9, 9, 9]),
        });
        let r = run_controller(&mut FixedSteering(0.0), &world, Pose::new(10.0, 20.0, 0.0), 100, 0.1).unwrap();
        assert_eq!(r.terminated_by, Termination::Collision);
        assert!(r.distance < 0.5);
        assert!(r.steps <= 5);
    }

    #[test]
    fn network_episodes_are_deterministic() {
        let mut p = stub(0.1);
        let a = run_episode(&mut p, EnvType::Cave, 2, 15, 0.1).unwrap();
        let b = run_episode(&mut p, EnvType::Cave, 2, 15, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(matches!(run_episode(&mut p, EnvType::Cave, 2, 0, 0.1), Err(PolicyError::NoSteps)));
    }
}
