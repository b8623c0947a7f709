//! Scripted data collection: a laser-driven expert drives seeded worlds
//! while every few ticks a labelled sensor triple is captured.
//!
//! Executed commands carry a slowly varying perturbation while the stored
//! label is always the expert's clean command, so the data contains
//! recoveries from off-nominal poses.

mod expert;

pub use expert::{corridor_length, ExpertConfig, ExpertDriver};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetHeader, DatasetWriter};
use crate::sensors::{depth_to_pointcloud, render_camera, simulate_laser, SensorRig, SensorTriple};
use crate::world::{
    generate_world, randomize_appearance, step_robot, DriveCommand, EnvType, Occupancy, Pose, RobotState, WorldError,
    DEFAULT_AREA_SCALE, OMEGA_MAX, ROBOT_RADIUS, V_MAX,
};

#[derive(Debug, Error)]
pub enum CollectError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid collection config: {0}")]
    InvalidConfig(String),
    #[error("episode {index} ({env}) could not place the robot after a collision")]
    Stuck { index: usize, env: EnvType },
}

pub type Result<T> = std::result::Result<T, CollectError>;

/// Which environments a run draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EnvChoice {
    One(EnvType),
    /// Equal shares of all four environment types.
    Mixed,
}

impl std::str::FromStr for EnvChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "mixed" {
            Ok(EnvChoice::Mixed)
        } else {
            s.parse::<EnvType>().map(EnvChoice::One)
        }
    }
}

impl TryFrom<String> for EnvChoice {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<EnvChoice> for String {
    fn from(c: EnvChoice) -> String {
        c.to_string()
    }
}

impl std::fmt::Display for EnvChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvChoice::One(e) => write!(f, "{e}"),
            EnvChoice::Mixed => f.write_str("mixed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    /// Record count per environment, written in this order.
    pub mix: Vec<(EnvType, usize)>,
    /// Share of each environment's records captured in randomized worlds.
    pub dr_fraction: f64,
    pub seed: u64,
    pub area_scale: f64,
    /// Records per episode; every episode uses a fresh world.
    pub episode_records: usize,
    /// Simulation ticks between captures.
    pub record_every: usize,
    pub dt: f64,
    /// Upper bound of the per-episode perturbation std (steering units).
    pub noise: f64,
    pub expert: ExpertConfig,
    pub rig: SensorRig,
}

impl CollectConfig {
    pub fn new(mix: Vec<(EnvType, usize)>, seed: u64) -> Self {
        Self {
            mix,
            dr_fraction: 0.45,
            seed,
            area_scale: DEFAULT_AREA_SCALE,
            episode_records: 50,
            record_every: 3,
            dt: 0.1,
            noise: 0.4,
            expert: ExpertConfig::default(),
            rig: SensorRig::default(),
        }
    }

    pub fn for_choice(choice: EnvChoice, records: usize, seed: u64) -> Self {
        let mix = match choice {
            EnvChoice::One(e) => vec![(e, records)],
            EnvChoice::Mixed => EnvType::ALL
                .iter()
                .enumerate()
                .map(|(i, &e)| (e, records / 4 + usize::from(i < records % 4)))
                .collect(),
        };
        Self::new(mix, seed)
    }

    pub fn total_records(&self) -> usize {
        self.mix.iter().map(|(_, n)| n).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CollectError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.dr_fraction) {
            return bad(format!("dr fraction {} outside [0, 1]", self.dr_fraction));
        }
        if self.episode_records == 0 || self.record_every == 0 {
            return bad("episode length and capture interval must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt <= 0.5) {
            return bad(format!("time step {} outside (0, 0.5]", self.dt));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {}", self.noise));
        }
        Ok(())
    }
}

/// One seeded episode of the collection plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub index: usize,
    pub env: EnvType,
    pub dr: bool,
    pub records: usize,
    pub world_seed: u64,
    pub dr_seed: u64,
    pub driver_seed: u64,
}

/// Per environment, `round(dr_fraction * n)` records come from randomized
/// worlds; both parts are cut into episodes of `episode_records`.
pub fn plan_episodes(cfg: &CollectConfig) -> Vec<EpisodePlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut plan = Vec::new();
    for &(env, n) in &cfg.mix {
        let n_dr = (cfg.dr_fraction * n as f64).round() as usize;
        for (dr, mut left) in [(false, n - n_dr), (true, n_dr)] {
            while left > 0 {
                let records = left.min(cfg.episode_records);
                left -= records;
                plan.push(EpisodePlan {
                    index: plan.len(),
                    env,
                    dr,
                    records,
                    world_seed: rng.gen(),
                    dr_seed: rng.gen(),
                    driver_seed: rng.gen(),
                });
            }
        }
    }
    plan
}

/// Ticks reserved per episode, so ticks are unique across a dataset.
pub const TICK_STRIDE: u64 = 1 << 20;

/// A random reachable pose that keeps `clearance` from every obstacle.
fn relocate(occ: &Occupancy, cells: &[usize], rng: &mut ChaCha8Rng) -> Option<Pose> {
    if cells.is_empty() {
        return None;
    }
    let p = occ.center(cells[rng.gen_range(0..cells.len())]);
    Some(Pose::new(p[0], p[1], rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
}

/// Drives one episode and returns its captures in tick order.
pub fn run_collection_episode(plan: &EpisodePlan, cfg: &CollectConfig) -> Result<Vec<SensorTriple>> {
    let mut world = generate_world(plan.env, plan.world_seed, cfg.area_scale)?;
    if plan.dr {
        world = randomize_appearance(&world, plan.dr_seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.driver_seed);
    rng.set_stream(1);
    let mut driver = ExpertDriver::new(cfg.expert.clone(), plan.driver_seed);
    let sigma = rng.gen_range(0.0..=cfg.noise);
    // AR(1) perturbation with stationary std `sigma` and ~1 s correlation.
    let rho: f64 = 0.9;
    let kick = Normal::new(0.0, sigma * (1.0 - rho * rho).sqrt()).expect("finite std");
    let mut perturb = 0.0;
    let mut occupancy: Option<(Occupancy, Vec<usize>)> = None;
    let mut state = RobotState::at(world.spawn);
    let base = plan.index as u64 * TICK_STRIDE;
    let intrinsics = cfg.rig.camera.intrinsics();
    let mut out = Vec::with_capacity(plan.records);
    let mut t = 0u64;
    let mut relocations = 0usize;
    while out.len() < plan.records {
        let scan = simulate_laser(&world, &state.pose, &cfg.rig.laser);
        let label = driver.steer(&scan, &state.pose, cfg.dt);
        if t.is_multiple_of(cfg.record_every as u64) {
            let frame = render_camera(&world, &state.pose, &cfg.rig.camera);
            let cloud = depth_to_pointcloud(&frame.depth, frame.width, frame.height, &intrinsics);
            out.push(SensorTriple {
                rgb_height: frame.height,
                rgb_width: frame.width,
                rgb: frame.rgb,
                cloud,
                scan: scan.clone(),
                steering: label,
                tick: base + t,
                env: plan.env,
                dr: plan.dr,
                world_seed: plan.world_seed,
                sample_seed: rng.gen(),
            });
        }
        perturb = rho * perturb + kick.sample(&mut rng);
        let exec = (label as f64 + perturb).clamp(-1.0, 1.0);
        state = step_robot(&state, &DriveCommand::new(V_MAX, exec * OMEGA_MAX), cfg.dt, &world)?;
        if state.collided {
            relocations += 1;
            let (occ, cells) = occupancy.get_or_insert_with(|| {
                let occ = Occupancy::new(&world, ROBOT_RADIUS + 0.25);
                let cells = occ.cell_of([world.spawn.x, world.spawn.y]).map(|c| occ.flood(c)).unwrap_or_default();
                (occ, cells)
            });
            let pose = relocate(occ, cells, &mut rng);
            match pose {
                Some(p) if relocations <= 10 * plan.records => state = RobotState::at(p),
                _ => {
                    return Err(CollectError::Stuck {
                        index: plan.index,
                        env: plan.env,
                    })
                }
            }
            perturb = 0.0;
        }
        t += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub records: u64,
    pub episodes: usize,
    pub dr_records: u64,
}

/// Episodes processed concurrently before their records are written.
const WAVE: usize = 16;

/// Runs the whole plan, writing records to `path` in episode order.
pub fn collect_dataset(path: impl AsRef<Path>, cfg: &CollectConfig) -> Result<CollectSummary> {
    collect_with(path, cfg, |_, _| {})
}

/// Like [`collect_dataset`], reporting `(records written, total)` after
/// each wave of episodes.
pub fn collect_with(path: impl AsRef<Path>, cfg: &CollectConfig, mut progress: impl FnMut(u64, u64)) -> Result<CollectSummary> {
    cfg.validate()?;
    let plan = plan_episodes(cfg);
    let mut writer = DatasetWriter::create(path, DatasetHeader::for_rig(&cfg.rig))?;
    let mut dr_records = 0u64;
    for wave in plan.chunks(WAVE) {
        let episodes = nav_tensor::par::map_slice(wave, |p| run_collection_episode(p, cfg));
        for (p, records) in wave.iter().zip(episodes) {
            for t in records? {
                writer.append(&t)?;
            }
            if p.dr {
                dr_records += p.records as u64;
            }
        }
        progress(writer.len(), cfg.total_records() as u64);
    }
    let header = writer.finish()?;
    Ok(CollectSummary {
        records: header.count,
        episodes: plan.len(),
        dr_records,
    })
}
