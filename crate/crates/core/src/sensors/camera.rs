use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::world::{Pose, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub hfov: f64,
    /// Optical centre above the ground, metres.
    pub mount_height: f64,
    pub max_range: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            hfov: FRAC_PI_2,
            mount_height: 0.25,
            max_range: 16.0,
        }
    }
}

impl CameraConfig {
    pub fn with_dims(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    /// Square-pixel pinhole; the principal point is the image centre.
    pub fn intrinsics(&self) -> Intrinsics {
        let fx = (self.width as f64 / 2.0) / (self.hfov / 2.0).tan();
        Intrinsics {
            fx,
            fy: fx,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }

    /// Azimuth of pixel column `c` relative to the heading (left positive).
    pub fn column_azimuth(&self, c: usize) -> f64 {
        let k = self.intrinsics();
        -((c as f64 - k.cx) / k.fx).atan()
    }
}

/// Pinhole intrinsics in pixels. Camera frame: x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (self.cx + self.fx * p[0] / p[2], self.cy + self.fy * p[1] / p[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, row-major.
    pub rgb: Vec<u8>,
    /// Forward depth `z` per pixel; `+inf` where no obstacle is seen.
    pub depth: Vec<f32>,
    /// Euclidean distance to the nearest obstacle per column.
    pub column_range: Vec<f32>,
}

fn shade(c: [u8; 3], k: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * k).round().clamp(0.0, 255.0) as u8)
}

struct Column {
    rgb: Vec<[u8; 3]>,
    depth: Vec<f32>,
    range: f32,
}

fn render_column(world: &WorldModel, pose: &Pose, cfg: &CameraConfig, k: &Intrinsics, c: usize) -> Column {
    let h = cfg.height;
    let xn = (c as f64 - k.cx) / k.fx;
    let yaw = pose.theta - xn.atan();
    let dir = [yaw.cos(), yaw.sin()];
    let cos_off = 1.0 / (1.0 + xn * xn).sqrt();
    let mut rgb = Vec::with_capacity(h);
    let mut depth = vec![f32::INFINITY; h];
    for v in 0..h {
        let yn = (v as f64 - k.cy) / k.fy;
        let px = if yn > 0.0 {
            // Floor point hit by this pixel, textured in world coordinates.
            let z = cfg.mount_height / yn;
            let t = z / cos_off;
            let g = world.ground.sample(pose.x + t * dir[0], pose.y + t * dir[1]);
            shade(g, world.light * (1.0 - 0.5 * (z / cfg.max_range).min(1.0)))
        } else {
            let u = yaw * 4.0;
            shade(world.ceiling.sample(u, -yn * 4.0), world.light)
        };
        rgb.push(px);
    }
    let hits = world.raycast_all([pose.x, pose.y], dir, cfg.max_range);
    let range = hits.first().map_or(f32::INFINITY, |(_, hit)| hit.t as f32);
    // Painter's order: farthest first so nearer surfaces overwrite.
    for (i, hit) in hits.iter().rev() {
        let o = &world.obstacles[*i];
        let z = hit.t * cos_off;
        if z <= 1e-9 {
            continue;
        }
        let top = k.cy + k.fy * (cfg.mount_height - o.height.meters()) / z;
        let bottom = k.cy + k.fy * cfg.mount_height / z;
        let v0 = top.ceil().max(0.0) as usize;
        let v1 = bottom.floor().min(h as f64 - 1.0);
        if v1 < 0.0 {
            continue;
        }
        let face = match hit.face {
            0 => 1.0,
            1 => 0.8,
            _ => 0.9,
        };
        let fade = 1.0 - 0.4 * (z / cfg.max_range).min(1.0);
        for v in v0..=(v1 as usize) {
            let height_here = cfg.mount_height - (v as f64 - k.cy) * z / k.fy;
            rgb[v] = shade(o.look.sample(hit.u, height_here), world.light * face * fade);
            depth[v] = z as f32;
        }
    }
    Column { rgb, depth, range }
}

/// Column-raycast 2.5D render. Each obstacle is an extruded footprint of
/// its height class; floor and ceiling fill the rest.
pub fn render_camera(world: &WorldModel, pose: &Pose, cfg: &CameraConfig) -> CameraFrame {
    let k = cfg.intrinsics();
    let (w, h) = (cfg.width, cfg.height);
    let cols = nav_tensor::par::map(w, |c| render_column(world, pose, cfg, &k, c));
    let mut rgb = vec![0u8; w * h * 3];
    let mut depth = vec![f32::INFINITY; w * h];
    let mut column_range = Vec::with_capacity(w);
    for (c, col) in cols.into_iter().enumerate() {
        for v in 0..h {
            rgb[(v * w + c) * 3..][..3].copy_from_slice(&col.rgb[v]);
            depth[v * w + c] = col.depth[v];
        }
        column_range.push(col.range);
    }
    CameraFrame {
        width: w,
        height: h,
        rgb,
        depth,
        column_range,
    }
}

/// Back-projects every finite, positive depth pixel; `z` is the depth.
pub fn depth_to_pointcloud(depth: &[f32], width: usize, height: usize, k: &Intrinsics) -> Vec<[f32; 3]> {
    let mut out = Vec::new();
    for v in 0..height {
        for u in 0..width {
            let z = depth[v * width + u];
            if z.is_finite() && z > 0.0 {
                let zf = z as f64;
                out.push([
                    ((u as f64 - k.cx) * zf / k.fx) as f32,
                    ((v as f64 - k.cy) * zf / k.fy) as f32,
                    z,
                ]);
            }
        }
    }
    out
}

/// Uniform resampling to exactly `n` points: without replacement when the
/// cloud is large enough, with replacement otherwise. Empty clouds become
/// `n` zero points.
pub fn sample_pointcloud(cloud: &[[f32; 3]], n: usize, seed: u64) -> Vec<[f32; 3]> {
    if cloud.is_empty() {
        return vec![[0.0; 3]; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cloud.len() >= n {
        index::sample(&mut rng, cloud.len(), n).into_iter().map(|i| cloud[i]).collect()
    } else {
        (0..n).map(|_| cloud[rng.gen_range(0..cloud.len())]).collect()
    }
}
