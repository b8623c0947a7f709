use std::path::{Path, PathBuf};

use serde::Serialize;

use nav_core::dataset::{DatasetHeader, DatasetWriter};
use nav_core::nets::{load_weights, NetConfig};
use nav_core::policy::{steering_to_command, NetworkPolicy};
use nav_core::sensors::SensorRig;
use nav_core::world::{generate_world, step_robot, DriveCommand, EnvType, RobotState, WorldModel, DEFAULT_AREA_SCALE, V_MAX};

use crate::protocol::{ClientMessage, DriveMode, ServerMessage, StateMessage, WireImage};
use crate::{GatewayError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionConfig {
    pub env: EnvType,
    pub seed: u64,
    pub area_scale: f64,
    /// Simulated seconds per tick.
    pub dt: f64,
    /// Where recordings go. An existing compatible file is appended to.
    pub record_path: PathBuf,
    /// Network shape expected of loaded weights.
    pub net: NetConfig,
    /// Weights loaded at startup, so autopilot is available immediately.
    pub weights: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            env: EnvType::NormalCity,
            seed: 0,
            area_scale: DEFAULT_AREA_SCALE,
            dt: 0.1,
            record_path: PathBuf::from("session.navd"),
            net: NetConfig::default(),
            weights: None,
        }
    }
}

/// Latest human input. Not queued: the freshest value before a tick wins.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ManualInput {
    pub steer: f32,
    pub throttle: f32,
}

/// Simulator state owned by the tick thread.
pub struct Session {
    pub config: SessionConfig,
    world: WorldModel,
    robot: RobotState,
    rig: SensorRig,
    mode: DriveMode,
    input: ManualInput,
    policy: Option<NetworkPolicy>,
    writer: Option<DatasetWriter>,
    /// Tick of the next state message.
    tick: u64,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        if !(config.dt > 0.0 && config.dt <= 0.5) {
            return Err(GatewayError::Config(format!("dt {} outside (0, 0.5]", config.dt)));
        }
        config.net.validate()?;
        let world = generate_world(config.env, config.seed, config.area_scale)?;
        let rig = SensorRig {
            camera: nav_core::sensors::CameraConfig::with_dims(config.net.rgb_height, config.net.rgb_width),
            ..SensorRig::default()
        };
        let mut session = Self {
            robot: RobotState::at(world.spawn),
            world,
            rig,
            mode: DriveMode::Manual,
            input: ManualInput::default(),
            policy: None,
            writer: None,
            tick: 0,
            config,
        };
        if let Some(path) = session.config.weights.clone() {
            session.load(&path)?;
        }
        Ok(session)
    }

    pub fn mode(&self) -> DriveMode {
        self.mode
    }

    pub fn recording(&self) -> bool {
        self.writer.is_some()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn world(&self) -> &WorldModel {
        &self.world
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    /// Records in the open recording, 0 when not recording.
    pub fn records(&self) -> u64 {
        self.writer.as_ref().map_or(0, |w| w.len())
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            world: self.world.to_json(),
            config: serde_json::json!({
                "env": self.world.env,
                "seed": self.world.seed,
                "dt": self.config.dt,
                "v_max": V_MAX,
                "omega_max": nav_core::world::OMEGA_MAX,
                "image": {"w": self.rig.camera.width, "h": self.rig.camera.height},
                "beams": self.rig.laser.beams,
                "max_range": self.rig.laser.max_range,
                "record_path": self.config.record_path,
                "weights_loaded": self.policy.is_some(),
            }),
        }
    }

    /// Applies one client message. Returns a reply for the sender, if any.
    /// A reset also invalidates the world every client holds, so its hello
    /// goes to everyone: the caller broadcasts replies to resets.
    pub fn handle(&mut self, msg: ClientMessage) -> Option<ServerMessage> {
        match msg {
            ClientMessage::Cmd { steer, throttle } => {
                if !steer.is_finite() || !throttle.is_finite() {
                    return Some(ServerMessage::error("non-finite command"));
                }
                self.input = ManualInput {
                    steer: steer.clamp(-1.0, 1.0),
                    throttle: throttle.clamp(0.0, 1.0),
                };
                None
            }
            ClientMessage::Mode { value: DriveMode::Auto } if self.policy.is_none() => Some(ServerMessage::error("no weights loaded")),
            ClientMessage::Mode { value } => {
                self.mode = value;
                None
            }
            ClientMessage::Record { value: true } if self.writer.is_none() => match open_writer(&self.config.record_path, &self.rig) {
                Ok(w) => {
                    self.writer = Some(w);
                    None
                }
                Err(e) => Some(ServerMessage::error(e.to_string())),
            },
            ClientMessage::Record { value: false } => match self.writer.take().map(DatasetWriter::finish) {
                Some(Err(e)) => Some(ServerMessage::error(e.to_string())),
                _ => None,
            },
            ClientMessage::Record { value: true } => None,
            ClientMessage::Reset { env, seed } => match generate_world(env, seed, self.config.area_scale) {
                Ok(world) => {
                    self.robot = RobotState::at(world.spawn);
                    self.world = world;
                    Some(self.hello())
                }
                Err(e) => Some(ServerMessage::error(e.to_string())),
            },
            ClientMessage::LoadWeights { path } => match self.load(Path::new(&path)) {
                Ok(()) => None,
                Err(e) => Some(ServerMessage::error(e.to_string())),
            },
        }
    }

    fn load(&mut self, path: &Path) -> Result<()> {
        let weights = load_weights(path)?;
        let mut policy = NetworkPolicy::new(weights, self.config.net.clone())?;
        policy.seed = self.config.seed;
        self.policy = Some(policy);
        Ok(())
    }

    /// Captures the current pose, records it when recording in manual mode,
    /// then moves the robot by the manual or network command. The returned
    /// state describes the captured tick.
    pub fn step(&mut self) -> Result<StateMessage> {
        let tick = self.tick;
        self.tick += 1;
        let obs = self.rig.capture(&self.world, &self.robot.pose);
        let image = WireImage::from_rgb(obs.frame.width, obs.frame.height, &obs.frame.rgb);
        let scan = obs.scan.ranges.iter().map(|&r| r.is_finite().then_some(r)).collect();
        let sample_seed = self.config.seed ^ tick.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let triple = obs.into_triple(self.input.steer, tick, self.world.env, self.world.dr_seed.is_some(), self.world.seed, sample_seed);
        let mut pred = None;
        let command = match (self.mode, &self.policy) {
            (DriveMode::Auto, Some(policy)) if !self.robot.collided => {
                let s = policy.infer(&triple)?;
                pred = Some(s);
                steering_to_command(s)?
            }
            (DriveMode::Auto, _) => DriveCommand::default(),
            (DriveMode::Manual, _) => DriveCommand::new(
                self.input.throttle as f64 * V_MAX,
                self.input.steer as f64 * nav_core::world::OMEGA_MAX,
            ),
        };
        let state = StateMessage {
            tick,
            pose: [self.robot.pose.x, self.robot.pose.y, self.robot.pose.theta],
            scan,
            image,
            pred,
            mode: self.mode,
            recording: self.writer.is_some(),
            records: 0,
            collided: self.robot.collided,
        };
        if self.mode == DriveMode::Manual && !self.robot.collided {
            if let Some(w) = &mut self.writer {
                w.append(&triple)?;
            }
        }
        self.robot = step_robot(&self.robot, &command, self.config.dt, &self.world)?;
        Ok(StateMessage {
            records: self.records(),
            ..state
        })
    }

    /// Closes the recording, if any.
    pub fn close(&mut self) -> Result<()> {
        if let Some(w) = self.writer.take() {
            w.finish()?;
        }
        Ok(())
    }
}

fn open_writer(path: &Path, rig: &SensorRig) -> Result<DatasetWriter> {
    let header = DatasetHeader::for_rig(rig);
    if !path.exists() {
        return Ok(DatasetWriter::create(path, header)?);
    }
    let w = DatasetWriter::append_to(path)?;
    let found = DatasetHeader { count: 0, ..*w.header() };
    if found != header {
        return Err(GatewayError::Config(format!(
            "{} was recorded with a different sensor rig",
            path.display()
        )));
    }
    Ok(w)
}
