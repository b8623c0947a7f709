use std::sync::OnceLock;

use proptest::prelude::*;

use nav_core::dataset::{read_records, split_dataset, write_records, DatasetHeader, SplitSpec};
use nav_core::sensors::{scan_to_distance_map, LaserConfig, LaserScan, SensorRig, SensorTriple};
use nav_core::world::{generate_world, normalize_angle, step_robot, DriveCommand, EnvType, Pose, RobotState, WorldModel, DEFAULT_AREA_SCALE};

fn capture() -> &'static (DatasetHeader, SensorTriple) {
    static CAPTURE: OnceLock<(DatasetHeader, SensorTriple)> = OnceLock::new();
    CAPTURE.get_or_init(|| {
        let rig = SensorRig::default();
        let w = generate_world(EnvType::Cave, 2, DEFAULT_AREA_SCALE).unwrap();
        let t = rig.capture(&w, &w.spawn).into_triple(0.0, 0, EnvType::Cave, false, 2, 0);
        (DatasetHeader::for_rig(&rig), t)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_every_index(n in 2usize..3000, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = split_dataset(n, &SplitSpec { train_fraction: frac, seed }).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        prop_assert!((train.len() as f64 - frac * n as f64).abs() <= 1.0);
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn distance_map_cells_are_in_bounds_and_bounded_by_hits(
        ranges in prop::collection::vec(prop_oneof![Just(f32::INFINITY), 0.0f32..16.0], 181),
        scale in 0.5f64..10.0,
        (h, w) in (4usize..48, 4usize..96),
    ) {
        let laser = LaserConfig::default();
        let scan = LaserScan { ranges, angle_increment: laser.increment(), max_range: laser.max_range };
        let map = scan_to_distance_map(&scan, h, w, scale);
        let cells = map.occupied();
        prop_assert!(cells.len() <= scan.hits());
        prop_assert!(cells.iter().all(|&(x, y)| x < w && y < h));
        prop_assert!(map.cells.iter().all(|&c| c <= 1));
    }

    #[test]
    fn records_round_trip(labels in prop::collection::vec((-1.0f32..1.0, any::<u64>(), any::<bool>()), 1..6)) {
        let (header, base) = capture();
        let triples: Vec<SensorTriple> = labels
            .iter()
            .map(|&(steering, tick, dr)| SensorTriple { steering, tick, dr, ..base.clone() })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.navd");
        write_records(&path, *header, &triples).unwrap();
        let (read_header, read) = read_records(&path).unwrap();
        prop_assert_eq!(read_header.count, triples.len() as u64);
        prop_assert_eq!(read, triples);
    }

    #[test]
    fn unicycle_steps_compose(v in -0.5f64..0.5, omega in -1.5f64..1.5, theta in -3.1f64..3.1, dt in 0.02f64..0.5) {
        let world = WorldModel::empty([40.0, 40.0]);
        let cmd = DriveCommand::new(v, omega);
        let start = RobotState::at(Pose::new(20.0, 20.0, theta));
        let once = step_robot(&start, &cmd, dt, &world).unwrap();
        let half = step_robot(&start, &cmd, dt / 2.0, &world).unwrap();
        let twice = step_robot(&half, &cmd, dt / 2.0, &world).unwrap();
        prop_assert!(!once.collided);
        prop_assert!((once.pose.x - twice.pose.x).abs() < 1e-9);
        prop_assert!((once.pose.y - twice.pose.y).abs() < 1e-9);
        prop_assert!(normalize_angle(once.pose.theta - twice.pose.theta).abs() < 1e-9);
        prop_assert!(normalize_angle(once.pose.theta - theta - omega * dt).abs() < 1e-9);
        let moved = (once.pose.x - 20.0).hypot(once.pose.y - 20.0);
        prop_assert!(moved <= v.abs() * dt + 1e-12);
    }
}
