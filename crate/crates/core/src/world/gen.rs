use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Appearance, Bounds, EnvType, Footprint, HeightClass, ObjectClass, Obstacle, Pose, WorldError, WorldModel,
    ROBOT_RADIUS,
};

pub const DEFAULT_AREA_SCALE: f64 = 0.1;
pub const MAX_RETRIES: usize = 100;

const WALL: f64 = 0.2;
const SPAWN_CLEAR: f64 = 1.0;
const GRID_RES: f64 = 0.1;
/// Center clearance of a route twice the robot diameter wide.
const ROUTE_CLEARANCE: f64 = 2.0 * ROBOT_RADIUS;

/// Full-size footprint and object count per environment type.
fn full_scale(env: EnvType) -> (f64, f64, f64) {
    // (area m^2, objects, width:height aspect)
    match env {
        EnvType::CollapsedHouse => (400.0, 130.0, 1.6),
        EnvType::NormalCity | EnvType::CollapsedCity => (3000.0, 275.0, 4.0 / 3.0),
        EnvType::Cave => (4000.0, 60.0, 1.0),
    }
}

/// Object count and extent for an environment at `area_scale`.
pub(crate) fn targets(env: EnvType, area_scale: f64) -> (usize, [f64; 2]) {
    let (area, objects, aspect) = full_scale(env);
    let a = area * area_scale;
    let w = (a * aspect).sqrt();
    ((objects * area_scale).round().max(1.0) as usize, [w, a / w])
}

/// Generates a world that is a pure function of `(env, seed, area_scale)`.
pub fn generate_world(env: EnvType, seed: u64, area_scale: f64) -> Result<WorldModel, WorldError> {
    if !(area_scale > 0.0 && area_scale <= 1.0) {
        return Err(WorldError::AreaScale(area_scale));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (env.code() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (objects, size) = targets(env, area_scale);
    for _ in 0..MAX_RETRIES {
        let world = match env {
            EnvType::NormalCity => normal_city(&mut rng, size, objects),
            EnvType::CollapsedHouse => scattered(&mut rng, env, size, objects),
            EnvType::CollapsedCity => scattered(&mut rng, env, size, objects),
            EnvType::Cave => cave(&mut rng, size, objects),
        };
        let Some(mut world) = world else { continue };
        world.seed = seed;
        world.area_scale = area_scale;
        if world.clearance([world.spawn.x, world.spawn.y]) < SPAWN_CLEAR {
            continue;
        }
        let need = 0.35 * size[0].max(size[1]);
        if reachable_extent(&world, ROUTE_CLEARANCE) >= need {
            return Ok(world);
        }
    }
    Err(WorldError::Unsatisfiable {
        env,
        seed,
        retries: MAX_RETRIES,
    })
}

fn base_world(env: EnvType, size: [f64; 2], light: f64, ground: [u8; 3], ceiling: [u8; 3], wall: [u8; 3]) -> WorldModel {
    let mut w = WorldModel::empty(size);
    w.env = env;
    w.light = light;
    w.ground = Appearance::solid(ground);
    w.ceiling = Appearance::solid(ceiling);
    let [sx, sy] = size;
    for (min, max) in [
        ([0.0, 0.0], [sx, WALL]),
        ([0.0, sy - WALL], [sx, sy]),
        ([0.0, WALL], [WALL, sy - WALL]),
        ([sx - WALL, WALL], [sx, sy - WALL]),
    ] {
        w.obstacles.push(Obstacle {
            footprint: Footprint::Box { min, max },
            height: HeightClass::Tall,
            class: ObjectClass::Wall,
            look: Appearance::solid(wall),
        });
    }
    w
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn look_for(rng: &mut ChaCha8Rng, class: ObjectClass) -> Appearance {
    let (base, accent, pattern) = match class {
        ObjectClass::Wall => ([120, 110, 100], [120, 110, 100], 0),
        ObjectClass::Building => ([190, 170, 140], [90, 110, 140], 1),
        ObjectClass::Tree => ([40, 120, 40], [40, 120, 40], 0),
        ObjectClass::Car => ([180, 30, 30], [40, 40, 40], 0),
        ObjectClass::Furniture => ([140, 90, 50], [100, 60, 30], 1),
        ObjectClass::Rubble => ([130, 125, 120], [95, 90, 85], 2),
        ObjectClass::Debris => ([200, 180, 60], [150, 120, 40], 0),
        ObjectClass::Rock => ([95, 80, 65], [70, 60, 50], 2),
    };
    Appearance {
        color: jitter(rng, base, 20),
        accent: jitter(rng, accent, 20),
        pattern,
    }
}

fn obstacle(rng: &mut ChaCha8Rng, footprint: Footprint, height: HeightClass, class: ObjectClass) -> Obstacle {
    Obstacle {
        footprint,
        height,
        class,
        look: look_for(rng, class),
    }
}

/// Ring road around a central block, lined with buildings, trees and cars.
fn normal_city(rng: &mut ChaCha8Rng, size: [f64; 2], objects: usize) -> Option<WorldModel> {
    let [sx, sy] = size;
    let mut w = base_world(EnvType::NormalCity, size, 1.0, [90, 90, 95], [150, 190, 230], [170, 160, 150]);
    let walk = 1.0;
    let road = 4.0;
    let edge = WALL + walk;
    let inner_min = [edge + road, edge + road];
    let inner_max = [sx - edge - road, sy - edge - road];
    let mut placed = 0;
    if inner_max[0] - inner_min[0] > 1.0 && inner_max[1] - inner_min[1] > 1.0 {
        let k = (((inner_max[0] - inner_min[0]) / 2.5).round() as usize).clamp(1, objects);
        let step = (inner_max[0] - inner_min[0]) / k as f64;
        for i in 0..k {
            let min = [inner_min[0] + step * i as f64, inner_min[1]];
            let max = [inner_min[0] + step * (i + 1) as f64, inner_max[1]];
            let h = if rng.gen_bool(0.5) { HeightClass::Tall } else { HeightClass::Mid };
            w.obstacles.push(obstacle(rng, Footprint::Box { min, max }, h, ObjectClass::Building));
        }
        placed = k;
    }
    // Street furniture along the outer sidewalk, evenly spread with jitter.
    let lo = [WALL + walk / 2.0, WALL + walk / 2.0];
    let hi = [sx - lo[0], sy - lo[1]];
    let (lx, ly) = (hi[0] - lo[0], hi[1] - lo[1]);
    let perimeter = 2.0 * (lx + ly);
    let rest = objects - placed;
    let offset = rng.gen_range(0.0..perimeter);
    for i in 0..rest {
        let s = (offset + perimeter * (i as f64 + rng.gen_range(-0.2..0.2)) / rest as f64).rem_euclid(perimeter);
        let c = if s < lx {
            [lo[0] + s, lo[1]]
        } else if s < lx + ly {
            [hi[0], lo[1] + s - lx]
        } else if s < 2.0 * lx + ly {
            [hi[0] - (s - lx - ly), hi[1]]
        } else {
            [lo[0], hi[1] - (s - 2.0 * lx - ly)]
        };
        let o = if rng.gen_bool(0.6) {
            let r = rng.gen_range(0.3..0.45);
            obstacle(rng, Footprint::Disc { center: c, radius: r }, HeightClass::Tall, ObjectClass::Tree)
        } else {
            let (hx, hy) = (rng.gen_range(0.25..0.45), rng.gen_range(0.25..0.45));
            let fp = Footprint::Box {
                min: [c[0] - hx, c[1] - hy],
                max: [c[0] + hx, c[1] + hy],
            };
            obstacle(rng, fp, HeightClass::Mid, ObjectClass::Car)
        };
        w.obstacles.push(o);
    }
    // Spawn on the road centre line, heading along the loop.
    let rc = edge + road / 2.0;
    let side = rng.gen_range(0..4);
    let (x, y, heading) = match side {
        0 => (rc, rng.gen_range(rc + 1.0..(sy - rc - 1.0).max(rc + 1.1)), FRAC_PI_2),
        1 => (rng.gen_range(rc + 1.0..(sx - rc - 1.0).max(rc + 1.1)), sy - rc, 0.0),
        2 => (sx - rc, rng.gen_range(rc + 1.0..(sy - rc - 1.0).max(rc + 1.1)), -FRAC_PI_2),
        _ => (rng.gen_range(rc + 1.0..(sx - rc - 1.0).max(rc + 1.1)), rc, PI),
    };
    let flip = if rng.gen_bool(0.5) { PI } else { 0.0 };
    w.spawn = Pose::new(x, y, heading + flip + rng.gen_range(-0.2..0.2));
    Some(w)
}

/// Collapsed house and city: furniture or rubble chunks plus floor debris.
fn scattered(rng: &mut ChaCha8Rng, env: EnvType, size: [f64; 2], objects: usize) -> Option<WorldModel> {
    let [sx, sy] = size;
    let mut w = if env == EnvType::CollapsedHouse {
        base_world(env, size, 0.8, [150, 130, 110], [210, 205, 195], [200, 190, 170])
    } else {
        base_world(env, size, 0.9, [120, 110, 95], [170, 170, 165], [140, 130, 120])
    };
    let margin = WALL + SPAWN_CLEAR + 0.2;
    let spawn = Pose::new(
        rng.gen_range(margin..sx - margin),
        rng.gen_range(margin..sy - margin),
        rng.gen_range(-PI..PI),
    );
    w.spawn = spawn;
    let big_fraction = if env == EnvType::CollapsedHouse { 0.35 } else { 0.3 };
    let big = (objects as f64 * big_fraction).round() as usize;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < objects {
        attempts += 1;
        if attempts > objects * 200 {
            return None;
        }
        let is_big = placed < big;
        let (half, class, height) = match (env, is_big) {
            (EnvType::CollapsedHouse, true) => (
                [rng.gen_range(0.25..0.7), rng.gen_range(0.2..0.5)],
                ObjectClass::Furniture,
                HeightClass::Mid,
            ),
            (_, true) => (
                [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                ObjectClass::Rubble,
                if rng.gen_bool(0.5) { HeightClass::Tall } else { HeightClass::Mid },
            ),
            _ => {
                let h = rng.gen_range(0.05..0.2);
                ([h, h], ObjectClass::Debris, HeightClass::Low)
            }
        };
        let c = [
            rng.gen_range(WALL + half[0]..sx - WALL - half[0]),
            rng.gen_range(WALL + half[1]..sy - WALL - half[1]),
        ];
        let fp = if class == ObjectClass::Debris && rng.gen_bool(0.5) {
            Footprint::Disc {
                center: c,
                radius: half[0],
            }
        } else {
            Footprint::Box {
                min: [c[0] - half[0], c[1] - half[1]],
                max: [c[0] + half[0], c[1] + half[1]],
            }
        };
        if fp.distance([spawn.x, spawn.y]) < SPAWN_CLEAR + 0.05 {
            continue;
        }
        let class = if class == ObjectClass::Rubble && rng.gen_bool(0.25) { ObjectClass::Car } else { class };
        w.obstacles.push(obstacle(rng, fp, height, class));
        placed += 1;
    }
    Some(w)
}

/// A winding tunnel carved through rock on a coarse grid, with a few
/// boulders against its walls.
fn cave(rng: &mut ChaCha8Rng, size: [f64; 2], objects: usize) -> Option<WorldModel> {
    const CELL: f64 = 2.5;
    let light = rng.gen_range(0.25..=0.4);
    let mut w = base_world(EnvType::Cave, size, light, [70, 60, 50], [40, 35, 30], [85, 75, 65]);
    let nx = ((size[0] - 2.0 * WALL) / CELL).floor() as usize;
    let ny = ((size[1] - 2.0 * WALL) / CELL).floor() as usize;
    if nx < 2 || ny < 2 {
        return None;
    }
    let origin = [(size[0] - nx as f64 * CELL) / 2.0, (size[1] - ny as f64 * CELL) / 2.0];
    let target = ((nx * ny) as f64 * 0.35).ceil() as usize;
    let mut path = vec![(rng.gen_range(0..nx), rng.gen_range(0..ny))];
    let mut open = vec![false; nx * ny];
    open[path[0].1 * nx + path[0].0] = true;
    let mut dir = rng.gen_range(0..4usize);
    const STEPS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    while path.len() < target {
        let (cx, cy) = *path.last().unwrap();
        let mut options: Vec<usize> = (0..4)
            .filter(|&d| {
                let (x, y) = (cx as i64 + STEPS[d].0, cy as i64 + STEPS[d].1);
                x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && !open[y as usize * nx + x as usize]
            })
            .collect();
        if options.is_empty() {
            return None;
        }
        // Prefer going straight, otherwise turn.
        let d = if options.contains(&dir) && rng.gen_bool(0.55) {
            dir
        } else {
            if options.len() > 1 {
                options.retain(|&d| d != dir);
            }
            options[rng.gen_range(0..options.len())]
        };
        dir = d;
        let next = ((cx as i64 + STEPS[d].0) as usize, (cy as i64 + STEPS[d].1) as usize);
        open[next.1 * nx + next.0] = true;
        path.push(next);
    }
    // Rock fill: merge closed cells row by row into boxes.
    let rock = [85, 75, 65];
    for y in 0..ny {
        let mut x = 0;
        while x < nx {
            if open[y * nx + x] {
                x += 1;
                continue;
            }
            let start = x;
            while x < nx && !open[y * nx + x] {
                x += 1;
            }
            let min = [origin[0] + start as f64 * CELL, origin[1] + y as f64 * CELL];
            let max = [origin[0] + x as f64 * CELL, origin[1] + (y + 1) as f64 * CELL];
            w.obstacles.push(Obstacle {
                footprint: Footprint::Box { min, max },
                height: HeightClass::Tall,
                class: ObjectClass::Wall,
                look: Appearance {
                    color: jitter(rng, rock, 10),
                    accent: jitter(rng, [65, 55, 45], 10),
                    pattern: 2,
                },
            });
        }
    }
    // Fill the margins between the grid and the boundary walls.
    let (gx1, gy1) = (origin[0] + nx as f64 * CELL, origin[1] + ny as f64 * CELL);
    for (min, max) in [
        ([WALL, WALL], [size[0] - WALL, origin[1]]),
        ([WALL, gy1], [size[0] - WALL, size[1] - WALL]),
        ([WALL, origin[1]], [origin[0], gy1]),
        ([gx1, origin[1]], [size[0] - WALL, gy1]),
    ] {
        if max[0] - min[0] > 1e-9 && max[1] - min[1] > 1e-9 {
            w.obstacles.push(Obstacle {
                footprint: Footprint::Box { min, max },
                height: HeightClass::Tall,
                class: ObjectClass::Wall,
                look: Appearance::solid(rock),
            });
        }
    }
    let center = |(x, y): (usize, usize)| [origin[0] + (x as f64 + 0.5) * CELL, origin[1] + (y as f64 + 0.5) * CELL];
    let s = center(path[0]);
    let n = center(path[1]);
    w.spawn = Pose::new(s[0], s[1], (n[1] - s[1]).atan2(n[0] - s[0]));
    // Boulders hug a closed side of a corridor cell away from the spawn.
    let mut placed = 0;
    let mut attempts = 0;
    while placed < objects {
        attempts += 1;
        if attempts > 1000 {
            return None;
        }
        let cell = path[rng.gen_range(2..path.len())];
        let d = rng.gen_range(0..4);
        let (x, y) = (cell.0 as i64 + STEPS[d].0, cell.1 as i64 + STEPS[d].1);
        let closed = x < 0 || y < 0 || x as usize >= nx || y as usize >= ny || !open[y as usize * nx + x as usize];
        if !closed {
            continue;
        }
        let r = rng.gen_range(0.2..0.4);
        let c = center(cell);
        let off = CELL / 2.0 - r;
        let along = rng.gen_range(-0.6..0.6);
        let p = match d {
            0 => [c[0] + off, c[1] + along],
            1 => [c[0] + along, c[1] + off],
            2 => [c[0] - off, c[1] + along],
            _ => [c[0] + along, c[1] - off],
        };
        let fp = Footprint::Disc { center: p, radius: r };
        if fp.distance([w.spawn.x, w.spawn.y]) < SPAWN_CLEAR + 0.05 {
            continue;
        }
        w.obstacles.push(obstacle(rng, fp, HeightClass::Mid, ObjectClass::Rock));
        placed += 1;
    }
    Some(w)
}

/// Free-space raster: a cell is free when its centre keeps `clearance`
/// from every obstacle and from the bounds.
pub struct Occupancy {
    pub res: f64,
    pub nx: usize,
    pub ny: usize,
    pub origin: [f64; 2],
    pub free: Vec<bool>,
}

impl Occupancy {
    pub fn new(world: &WorldModel, clearance: f64) -> Self {
        let Bounds { min, max } = world.bounds;
        let nx = ((max[0] - min[0]) / GRID_RES).floor() as usize;
        let ny = ((max[1] - min[1]) / GRID_RES).floor() as usize;
        let mut free = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let p = [min[0] + (i as f64 + 0.5) * GRID_RES, min[1] + (j as f64 + 0.5) * GRID_RES];
                let edge = (p[0] - min[0]).min(max[0] - p[0]).min(p[1] - min[1]).min(max[1] - p[1]);
                free[j * nx + i] = edge > clearance && world.clearance(p) > clearance;
            }
        }
        Self {
            res: GRID_RES,
            nx,
            ny,
            origin: min,
            free,
        }
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let i = ((p[0] - self.origin[0]) / self.res).floor();
        let j = ((p[1] - self.origin[1]) / self.res).floor();
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.nx && (j as usize) < self.ny).then(|| j as usize * self.nx + i as usize)
    }

    pub fn center(&self, cell: usize) -> [f64; 2] {
        [
            self.origin[0] + ((cell % self.nx) as f64 + 0.5) * self.res,
            self.origin[1] + ((cell / self.nx) as f64 + 0.5) * self.res,
        ]
    }

    /// 4-connected flood fill from `start`; returns the reached cells.
    pub fn flood(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![false; self.free.len()];
        let mut out = Vec::new();
        if !self.free[start] {
            return out;
        }
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(c) = queue.pop_front() {
            out.push(c);
            let (i, j) = (c % self.nx, c / self.nx);
            let mut visit = |n: usize| {
                if self.free[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(c - 1);
            }
            if i + 1 < self.nx {
                visit(c + 1);
            }
            if j > 0 {
                visit(c - self.nx);
            }
            if j + 1 < self.ny {
                visit(c + self.nx);
            }
        }
        out
    }

    /// Number of connected free components.
    pub fn components(&self) -> usize {
        let mut label = vec![false; self.free.len()];
        let mut count = 0;
        for c in 0..self.free.len() {
            if self.free[c] && !label[c] {
                count += 1;
                for r in self.flood(c) {
                    label[r] = true;
                }
            }
        }
        count
    }
}

/// Farthest straight-line distance from the spawn reachable along free
/// cells that keep `clearance` from obstacles.
pub fn reachable_extent(world: &WorldModel, clearance: f64) -> f64 {
    let occ = Occupancy::new(world, clearance);
    let s = [world.spawn.x, world.spawn.y];
    let Some(start) = occ.cell_of(s) else { return 0.0 };
    occ.flood(start)
        .into_iter()
        .map(|c| {
            let p = occ.center(c);
            (p[0] - s[0]).hypot(p[1] - s[1])
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        for env in EnvType::ALL {
            let a = generate_world(env, 42, DEFAULT_AREA_SCALE).unwrap();
            let b = generate_world(env, 42, DEFAULT_AREA_SCALE).unwrap();
            assert_eq!(a, b);
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_ne!(a, generate_world(env, 43, DEFAULT_AREA_SCALE).unwrap());
        }
    }

    #[test]
    fn house_density() {
        let (n, size) = targets(EnvType::CollapsedHouse, 0.1);
        assert_eq!(n, 13);
        assert!((size[0] * size[1] - 40.0).abs() < 1e-9);
        for seed in 0..20 {
            let w = generate_world(EnvType::CollapsedHouse, seed, 0.1).unwrap();
            assert!((w.bounds.area() - 40.0).abs() < 1e-9);
            assert!((10..=16).contains(&w.object_count()), "{}", w.object_count());
        }
    }

    #[test]
    fn spawn_is_clear_and_route_exists() {
        for env in EnvType::ALL {
            for seed in 0..10 {
                let w = generate_world(env, seed, DEFAULT_AREA_SCALE).unwrap();
                assert!(w.clearance([w.spawn.x, w.spawn.y]) >= SPAWN_CLEAR, "{env} {seed}");
                assert!(!w.check_collision(&w.spawn, ROBOT_RADIUS));
                for o in &w.obstacles {
                    let (lo, hi) = o.footprint.bounds();
                    assert!(w.bounds.contains(lo) && w.bounds.contains(hi), "{env} {seed}: {o:?}");
                }
            }
        }
    }

    #[test]
    fn cave_is_dark_single_corridor() {
        for seed in 0..10 {
            let w = generate_world(EnvType::Cave, seed, DEFAULT_AREA_SCALE).unwrap();
            assert!(w.light <= 0.4);
            assert_eq!(Occupancy::new(&w, ROBOT_RADIUS).components(), 1);
        }
    }

    #[test]
    fn rejects_bad_scale() {
        assert_eq!(generate_world(EnvType::Cave, 0, 0.0), Err(WorldError::AreaScale(0.0)));
        assert!(generate_world(EnvType::Cave, 0, 1.5).is_err());
    }
}
