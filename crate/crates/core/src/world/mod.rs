//! 2.5D obstacle worlds: procedural layouts for the four environment types,
//! appearance randomization, raycasting, collision and unicycle kinematics.

mod dr;
mod gen;
mod kinematics;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dr::randomize_appearance;
pub use gen::{generate_world, reachable_extent, Occupancy, DEFAULT_AREA_SCALE, MAX_RETRIES};
pub use kinematics::{step_robot, DriveCommand, RobotState, OMEGA_MAX, V_MAX};

pub const ROBOT_RADIUS: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("area scale {0} outside (0, 1]")]
    AreaScale(f64),
    #[error("no traversable {env} layout after {retries} attempts (seed {seed})")]
    Unsatisfiable { env: EnvType, seed: u64, retries: usize },
    #[error("time step {0} outside (0, 0.5]")]
    TimeStep(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvType {
    NormalCity,
    CollapsedHouse,
    CollapsedCity,
    Cave,
}

impl EnvType {
    pub const ALL: [EnvType; 4] = [EnvType::NormalCity, EnvType::CollapsedHouse, EnvType::CollapsedCity, EnvType::Cave];
    pub const COMPLEX: [EnvType; 3] = [EnvType::CollapsedHouse, EnvType::CollapsedCity, EnvType::Cave];

    /// On-disk code.
    pub fn code(self) -> u8 {
        match self {
            EnvType::NormalCity => 0,
            EnvType::CollapsedHouse => 1,
            EnvType::CollapsedCity => 2,
            EnvType::Cave => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvType::NormalCity => "normal_city",
            EnvType::CollapsedHouse => "collapsed_house",
            EnvType::CollapsedCity => "collapsed_city",
            EnvType::Cave => "cave",
        }
    }

    pub fn is_complex(self) -> bool {
        self != EnvType::NormalCity
    }
}

impl std::fmt::Display for EnvType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown environment {s:?}"))
    }
}

/// Planar pose; heading in radians, counter-clockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a % TAU;
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Footprint {
    Box { min: [f64; 2], max: [f64; 2] },
    Disc { center: [f64; 2], radius: f64 },
}

impl Footprint {
    /// Distance from a point to the footprint (0 inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        match *self {
            Footprint::Box { min, max } => {
                let dx = (min[0] - p[0]).max(0.0).max(p[0] - max[0]);
                let dy = (min[1] - p[1]).max(0.0).max(p[1] - max[1]);
                dx.hypot(dy)
            }
            Footprint::Disc { center, radius } => ((p[0] - center[0]).hypot(p[1] - center[1]) - radius).max(0.0),
        }
    }

    /// Nearest ray parameter `t >= 0` where `o + t d` (unit `d`) enters the footprint.
    pub fn ray_hit(&self, o: [f64; 2], d: [f64; 2]) -> Option<RayHit> {
        match *self {
            Footprint::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..2 {
                    if d[a] == 0.0 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut n, mut f) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if n > f {
                        std::mem::swap(&mut n, &mut f);
                    }
                    if n > t0 {
                        t0 = n;
                        axis = a;
                    }
                    t1 = t1.min(f);
                }
                if t0 > t1 || t1 < 0.0 {
                    return None;
                }
                let t = t0.max(0.0);
                let hit = [o[0] + t * d[0], o[1] + t * d[1]];
                // Texture coordinate runs along the struck face.
                let u = if axis == 0 { hit[1] - min[1] } else { hit[0] - min[0] };
                Some(RayHit { t, face: axis as u8, u })
            }
            Footprint::Disc { center, radius } => {
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let b = ox * d[0] + oy * d[1];
                let c = ox * ox + oy * oy - radius * radius;
                if c <= 0.0 {
                    return Some(RayHit { t: 0.0, face: 2, u: 0.0 });
                }
                let disc = b * b - c;
                if disc < 0.0 || b > 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                let hit = [o[0] + t * d[0] - center[0], o[1] + t * d[1] - center[1]];
                Some(RayHit {
                    t,
                    face: 2,
                    u: hit[1].atan2(hit[0]) * radius,
                })
            }
        }
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Footprint::Box { min, max } => (min, max),
            Footprint::Disc { center, radius } => (
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    /// 0: x-facing box side, 1: y-facing box side, 2: disc.
    pub face: u8,
    /// Distance along the struck surface, for texturing.
    pub u: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeightClass {
    Low,
    Mid,
    Tall,
}

impl HeightClass {
    pub fn meters(self) -> f64 {
        match self {
            HeightClass::Low => 0.3,
            HeightClass::Mid => 1.0,
            HeightClass::Tall => 2.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    /// Boundary and cave walls; not counted as objects.
    Wall,
    Building,
    Tree,
    Car,
    Furniture,
    Rubble,
    Debris,
    Rock,
}

impl ObjectClass {
    pub fn is_structural(self) -> bool {
        self == ObjectClass::Wall
    }
}

/// Surface appearance: base colour, stripe colour and pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Appearance {
    pub color: [u8; 3],
    pub accent: [u8; 3],
    /// 0 solid, 1 vertical stripes, 2 checker.
    pub pattern: u8,
}

impl Appearance {
    pub fn solid(color: [u8; 3]) -> Self {
        Self {
            color,
            accent: color,
            pattern: 0,
        }
    }

    /// Colour at surface coordinate `u` (along the face) and `v` (height).
    pub fn sample(&self, u: f64, v: f64) -> [u8; 3] {
        const CELL: f64 = 0.25;
        let cu = (u / CELL).floor() as i64;
        let cv = (v / CELL).floor() as i64;
        let accent = match self.pattern {
            1 => cu.rem_euclid(2) == 1,
            2 => (cu + cv).rem_euclid(2) == 1,
            _ => false,
        };
        if accent {
            self.accent
        } else {
            self.color
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub footprint: Footprint,
    pub height: HeightClass,
    pub class: ObjectClass,
    pub look: Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.min[0]..=self.max[0]).contains(&p[0]) && (self.min[1]..=self.max[1]).contains(&p[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub env: EnvType,
    pub seed: u64,
    pub area_scale: f64,
    pub bounds: Bounds,
    pub obstacles: Vec<Obstacle>,
    pub ground: Appearance,
    pub ceiling: Appearance,
    /// Scales rendered colours; in (0, 1].
    pub light: f64,
    pub spawn: Pose,
    /// Appearance seed last applied, if any.
    pub dr_seed: Option<u64>,
}

impl WorldModel {
    /// An obstacle-free world, mostly for tests.
    pub fn empty(size: [f64; 2]) -> Self {
        Self {
            env: EnvType::NormalCity,
            seed: 0,
            area_scale: 1.0,
            bounds: Bounds {
                min: [0.0, 0.0],
                max: size,
            },
            obstacles: Vec::new(),
            ground: Appearance::solid([110, 110, 110]),
            ceiling: Appearance::solid([150, 190, 230]),
            light: 1.0,
            spawn: Pose::new(size[0] / 2.0, size[1] / 2.0, 0.0),
            dr_seed: None,
        }
    }

    /// Non-structural obstacles, the quantity density targets refer to.
    pub fn object_count(&self) -> usize {
        self.obstacles.iter().filter(|o| !o.class.is_structural()).count()
    }

    /// Nearest obstacle hit along a unit direction within `max_range`.
    pub fn raycast(&self, origin: [f64; 2], dir: [f64; 2], max_range: f64) -> Option<(usize, RayHit)> {
        let mut best: Option<(usize, RayHit)> = None;
        for (i, o) in self.obstacles.iter().enumerate() {
            if let Some(h) = o.footprint.ray_hit(origin, dir) {
                if h.t <= max_range && best.is_none_or(|(_, b)| h.t < b.t) {
                    best = Some((i, h));
                }
            }
        }
        best
    }

    /// Every obstacle hit along a ray within `max_range`, nearest first.
    pub fn raycast_all(&self, origin: [f64; 2], dir: [f64; 2], max_range: f64) -> Vec<(usize, RayHit)> {
        let mut hits: Vec<_> = self
            .obstacles
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.footprint.ray_hit(origin, dir).filter(|h| h.t <= max_range).map(|h| (i, h)))
            .collect();
        hits.sort_by(|a, b| a.1.t.total_cmp(&b.1.t).then(a.0.cmp(&b.0)));
        hits
    }

    /// Distance from `p` to the nearest obstacle surface.
    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.footprint.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Strict intersection of the disc with an obstacle, or leaving bounds.
    pub fn check_collision(&self, pose: &Pose, radius: f64) -> bool {
        let p = [pose.x, pose.y];
        let b = &self.bounds;
        if p[0] - radius < b.min[0] || p[0] + radius > b.max[0] || p[1] - radius < b.min[1] || p[1] + radius > b.max[1] {
            return true;
        }
        self.obstacles.iter().any(|o| {
            let (lo, hi) = o.footprint.bounds();
            if p[0] + radius < lo[0] || p[0] - radius > hi[0] || p[1] + radius < lo[1] || p[1] - radius > hi[1] {
                return false;
            }
            o.footprint.distance(p) < radius
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("world serializes")
    }
}

pub fn check_collision(world: &WorldModel, pose: &Pose, radius: f64) -> bool {
    world.check_collision(pose, radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn boxed(min: [f64; 2], max: [f64; 2]) -> Obstacle {
        Obstacle {
            footprint: Footprint::Box { min, max },
            height: HeightClass::Mid,
            class: ObjectClass::Building,
            look: Appearance::solid([200, 0, 0]),
        }
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn box_ray_hits_near_face() {
        let f = Footprint::Box {
            min: [5.0, -1.0],
            max: [6.0, 1.0],
        };
        let h = f.ray_hit([0.0, 0.0], [1.0, 0.0]).unwrap();
        assert_eq!(h.t, 5.0);
        assert!(f.ray_hit([0.0, 0.0], [-1.0, 0.0]).is_none());
        assert!(f.ray_hit([0.0, 2.0], [1.0, 0.0]).is_none());
    }

    #[test]
    fn disc_ray_hit() {
        let f = Footprint::Disc {
            center: [4.0, 0.0],
            radius: 1.0,
        };
        let h = f.ray_hit([0.0, 0.0], [1.0, 0.0]).unwrap();
        assert!((h.t - 3.0).abs() < 1e-12);
        assert!(f.ray_hit([0.0, 0.0], [0.0, 1.0]).is_none());
    }

    #[test]
    fn collision_cases() {
        let mut w = WorldModel::empty([10.0, 10.0]);
        assert!(!w.check_collision(&Pose::new(5.0, 5.0, 0.0), ROBOT_RADIUS));
        w.obstacles.push(boxed([6.0, 4.0], [7.0, 6.0]));
        assert!(w.check_collision(&Pose::new(6.5, 5.0, 0.0), ROBOT_RADIUS));
        // Tangent: the disc touches the face at exactly the radius.
        assert!(!w.check_collision(&Pose::new(6.0 - ROBOT_RADIUS, 5.0, 0.0), ROBOT_RADIUS));
        assert!(w.check_collision(&Pose::new(6.0 - ROBOT_RADIUS + 1e-9, 5.0, 0.0), ROBOT_RADIUS));
        // Leaving bounds.
        assert!(w.check_collision(&Pose::new(0.1, 5.0, 0.0), ROBOT_RADIUS));
        assert!(!w.check_collision(&Pose::new(ROBOT_RADIUS, 5.0, 0.0), ROBOT_RADIUS));
    }

    #[test]
    fn env_codes_round_trip() {
        for e in EnvType::ALL {
            assert_eq!(EnvType::from_code(e.code()), Some(e));
            assert_eq!(e.name().parse::<EnvType>().unwrap(), e);
        }
        assert_eq!(EnvType::from_code(4), None);
    }
}
