use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::world::{Pose, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserConfig {
    pub beams: usize,
    pub max_range: f64,
}

impl Default for LaserConfig {
    /// One-degree scanner over the frontal half plane, 16 m range.
    fn default() -> Self {
        Self {
            beams: 181,
            max_range: 16.0,
        }
    }
}

impl LaserConfig {
    pub fn increment(&self) -> f64 {
        PI / (self.beams.max(2) - 1) as f64
    }
}

/// A 180 degree scan. Beam 0 points to the robot's left, beam `B - 1` to
/// its right. Misses are `+inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub ranges: Vec<f32>,
    pub angle_increment: f64,
    pub max_range: f64,
}

impl LaserScan {
    pub fn beams(&self) -> usize {
        self.ranges.len()
    }

    /// Azimuth of beam `i` relative to the heading.
    pub fn beam_angle(&self, i: usize) -> f64 {
        FRAC_PI_2 - self.angle_increment * i as f64
    }

    pub fn is_hit(&self, i: usize) -> bool {
        self.ranges[i].is_finite()
    }

    pub fn hits(&self) -> usize {
        self.ranges.iter().filter(|r| r.is_finite()).count()
    }
}

/// Nearest-obstacle distance along one direction, or `+inf` past `max_range`.
pub(crate) fn cast(world: &WorldModel, pose: &Pose, azimuth: f64, max_range: f64) -> f32 {
    let a = pose.theta + azimuth;
    match world.raycast([pose.x, pose.y], [a.cos(), a.sin()], max_range) {
        Some((_, h)) => h.t as f32,
        None => f32::INFINITY,
    }
}

pub fn simulate_laser(world: &WorldModel, pose: &Pose, cfg: &LaserConfig) -> LaserScan {
    let phi = cfg.increment();
    let ranges = nav_tensor::par::map(cfg.beams, |i| cast(world, pose, FRAC_PI_2 - phi * i as f64, cfg.max_range));
    LaserScan {
        ranges,
        angle_increment: phi,
        max_range: cfg.max_range,
    }
}

/// Binary occupancy raster of laser hits, robot at the bottom centre.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    /// Pixels per metre.
    pub scale: f64,
    pub origin: (f64, f64),
    /// Row-major 0/1 cells.
    pub cells: Vec<u8>,
}

impl DistanceMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.cells[y * self.width + x]
    }

    /// Occupied `(x, y)` cells in raster order.
    pub fn occupied(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }
}

/// Plots each hit beam `i` at
/// `x = x0 + d cos(pi - phi i)`, `y = y0 - d sin(phi i)`, `d` in pixels,
/// rounded to the nearest cell. Points outside the raster are dropped.
pub fn scan_to_distance_map(scan: &LaserScan, height: usize, width: usize, scale: f64) -> DistanceMap {
    let (x0, y0) = (width as f64 / 2.0, height as f64 - 1.0);
    let mut cells = vec![0u8; height * width];
    let phi = scan.angle_increment;
    for (i, &r) in scan.ranges.iter().enumerate() {
        if !r.is_finite() {
            continue;
        }
        let d = r as f64 * scale;
        let a = phi * i as f64;
        let x = (x0 + d * (PI - a).cos()).round();
        let y = (y0 - d * a.sin()).round();
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            cells[y as usize * width + x as usize] = 1;
        }
    }
    DistanceMap {
        height,
        width,
        scale,
        origin: (x0, y0),
        cells,
    }
}
