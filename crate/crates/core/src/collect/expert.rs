use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sensors::LaserScan;
use crate::world::{normalize_angle, Pose, OMEGA_MAX, ROBOT_RADIUS};

/// Tuning of the scripted driver. Distances in metres, angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Half-width of the corridor a direction must keep clear.
    pub half_width: f64,
    /// A second, wider corridor whose free length rewards open space.
    pub wide_half_width: f64,
    /// Weight of the wide corridor in the score, in [0, 1].
    pub wide_weight: f64,
    /// Free length beyond which directions are equally good.
    pub horizon: f64,
    /// Score lost per radian of turn away from straight ahead.
    pub turn_cost: f64,
    /// Score lost per radian between a direction and the goal heading.
    pub goal_cost: f64,
    /// rad/s of yaw rate per radian of heading error.
    pub gain: f64,
    /// Below this straight-ahead free length the driver turns at full rate.
    pub panic_distance: f64,
    /// Goal heading is resampled after a uniform number of seconds in this range.
    pub goal_period: [f64; 2],
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            half_width: ROBOT_RADIUS + 0.15,
            wide_half_width: ROBOT_RADIUS + 0.5,
            wide_weight: 0.5,
            horizon: 3.0,
            turn_cost: 0.2,
            goal_cost: 0.15,
            gain: 3.0,
            panic_distance: 1.0,
            goal_period: [4.0, 10.0],
        }
    }
}

/// Free travel along relative azimuth `dir` before a `half_width` corridor
/// meets a laser hit. Misses count as free out to the scan range.
pub fn corridor_length(scan: &LaserScan, dir: f64, half_width: f64) -> f64 {
    let mut best = scan.max_range;
    for (i, &r) in scan.ranges.iter().enumerate() {
        if !r.is_finite() {
            continue;
        }
        let d = scan.beam_angle(i) - dir;
        let (along, across) = (r as f64 * d.cos(), r as f64 * d.sin());
        if along > 0.0 && across.abs() < half_width {
            best = best.min(along);
        }
    }
    best
}

/// Laser-driven wall-avoiding driver with a slowly wandering goal heading.
/// Its output is a normalized steering value in `[-1, 1]`.
pub struct ExpertDriver {
    pub config: ExpertConfig,
    rng: ChaCha8Rng,
    /// World-frame heading the driver prefers when several ways are open.
    goal: f64,
    goal_left: f64,
}

impl ExpertDriver {
    pub fn new(config: ExpertConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = rng.gen_range(-PI..PI);
        let goal_left = rng.gen_range(config.goal_period[0]..=config.goal_period[1]);
        Self {
            config,
            rng,
            goal,
            goal_left,
        }
    }

    pub fn goal(&self) -> f64 {
        self.goal
    }

    /// Relative azimuth of the best direction to head for.
    pub fn target_direction(&self, scan: &LaserScan, pose: &Pose) -> f64 {
        let c = &self.config;
        let goal_rel = normalize_angle(self.goal - pose.theta);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..scan.beams() {
            let a = scan.beam_angle(i);
            let narrow = corridor_length(scan, a, c.half_width).min(c.horizon);
            let wide = corridor_length(scan, a, c.wide_half_width).min(c.horizon);
            let free = (1.0 - c.wide_weight) * narrow + c.wide_weight * wide;
            let score = free - c.turn_cost * a.abs() - c.goal_cost * normalize_angle(a - goal_rel).abs();
            if score > best.0 {
                best = (score, a);
            }
        }
        best.1
    }

    /// Steering for the current observation; advances the goal clock by `dt`.
    pub fn steer(&mut self, scan: &LaserScan, pose: &Pose, dt: f64) -> f32 {
        self.goal_left -= dt;
        if self.goal_left <= 0.0 {
            self.goal = self.rng.gen_range(-PI..PI);
            self.goal_left = self.rng.gen_range(self.config.goal_period[0]..=self.config.goal_period[1]);
        }
        let target = self.target_direction(scan, pose);
        let ahead = corridor_length(scan, 0.0, self.config.half_width);
        let omega = if ahead < self.config.panic_distance {
            OMEGA_MAX * if target >= 0.0 { 1.0 } else { -1.0 }
        } else {
            self.config.gain * target
        };
        (omega / OMEGA_MAX).clamp(-1.0, 1.0) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan_with(hits: &[(usize, f32)]) -> LaserScan {
        let mut ranges = vec![f32::INFINITY; 181];
        for &(i, r) in hits {
            ranges[i] = r;
        }
        LaserScan {
            ranges,
            angle_increment: PI / 180.0,
            max_range: 16.0,
        }
    }

    #[test]
    fn corridor_geometry() {
        // A hit dead ahead at 2 m blocks straight travel at 2 m.
        let s = scan_with(&[(90, 2.0)]);
        assert!((corridor_length(&s, 0.0, 0.3) - 2.0).abs() < 1e-9);
        // Heading 30 degrees off, the point is 1 m sideways: outside the corridor.
        assert_eq!(corridor_length(&s, PI / 6.0, 0.3), 16.0);
        assert_eq!(corridor_length(&scan_with(&[]), 0.3, 0.3), 16.0);
    }

    #[test]
    fn open_space_goes_straight_and_walls_turn() {
        let mut d = ExpertDriver::new(ExpertConfig { goal_cost: 0.0, ..ExpertConfig::default() }, 1);
        let pose = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(d.steer(&scan_with(&[]), &pose, 0.1), 0.0);
        // Wall across the front-right half only: head left.
        let hits: Vec<(usize, f32)> = (90..181).map(|i| (i, 1.0)).collect();
        let s = d.steer(&scan_with(&hits), &pose, 0.1);
        assert!(s > 0.0, "{s}");
        // Wall at 0.4 m ahead: full-rate turn.
        let s = d.steer(&scan_with(&[(90, 0.4)]), &pose, 0.1);
        assert_eq!(s.abs(), 1.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let s = scan_with(&[(60, 1.5), (120, 1.5)]);
        let pose = Pose::new(0.0, 0.0, 0.3);
        let run = |seed| {
            let mut d = ExpertDriver::new(ExpertConfig::default(), seed);
            (0..200).map(|_| d.steer(&s, &pose, 0.1)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }
}
