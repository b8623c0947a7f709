//! Simulated laser, distance-map reconstruction, column-raycast camera and
//! depth back-projection.

mod camera;
mod laser;

pub use camera::{depth_to_pointcloud, render_camera, sample_pointcloud, CameraConfig, CameraFrame, Intrinsics};
pub use laser::{scan_to_distance_map, simulate_laser, DistanceMap, LaserConfig, LaserScan};

use serde::{Deserialize, Serialize};

use crate::world::{EnvType, Pose, WorldModel};

/// One synchronized observation and its steering label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorTriple {
    pub rgb_height: usize,
    pub rgb_width: usize,
    /// `H x W x 3` bytes, row-major.
    pub rgb: Vec<u8>,
    /// Camera-frame points at capture resolution.
    pub cloud: Vec<[f32; 3]>,
    pub scan: LaserScan,
    pub steering: f32,
    pub tick: u64,
    pub env: EnvType,
    pub dr: bool,
    pub world_seed: u64,
    /// Seeds point-cloud resampling at load time.
    pub sample_seed: u64,
}

/// Camera plus laser mounted on the robot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct SensorRig {
    pub camera: CameraConfig,
    pub laser: LaserConfig,
}


/// All modalities captured at one pose.
#[derive(Clone, Debug)]
pub struct Observation {
    pub frame: CameraFrame,
    pub cloud: Vec<[f32; 3]>,
    pub scan: LaserScan,
}

impl SensorRig {
    pub fn capture(&self, world: &WorldModel, pose: &Pose) -> Observation {
        let frame = render_camera(world, pose, &self.camera);
        let cloud = depth_to_pointcloud(&frame.depth, frame.width, frame.height, &self.camera.intrinsics());
        let scan = simulate_laser(world, pose, &self.laser);
        Observation { frame, cloud, scan }
    }
}

impl Observation {
    /// Attaches a label and metadata; every modality shares `tick`.
    #[allow(clippy::too_many_arguments)]
    pub fn into_triple(self, steering: f32, tick: u64, env: EnvType, dr: bool, world_seed: u64, sample_seed: u64) -> SensorTriple {
        SensorTriple {
            rgb_height: self.frame.height,
            rgb_width: self.frame.width,
            rgb: self.frame.rgb,
            cloud: self.cloud,
            scan: self.scan,
            steering,
            tick,
            env,
            dr,
            world_seed,
            sample_seed,
        }
    }
}
