use nav_core::dataset::read_records;
use nav_core::nets::{init_weights, save_weights, Arch, NetConfig};
use nav_core::world::EnvType;
use nav_gateway::protocol::{ClientMessage, DriveMode, ServerMessage};
use nav_gateway::{Session, SessionConfig};

fn session(dir: &tempfile::TempDir) -> Session {
    Session::new(SessionConfig {
        env: EnvType::Cave,
        seed: 3,
        record_path: dir.path().join("rec.navd"),
        ..SessionConfig::default()
    })
    .unwrap()
}

#[test]
fn auto_needs_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(&dir);
    let reply = s.handle(ClientMessage::Mode { value: DriveMode::Auto });
    assert_eq!(reply, Some(ServerMessage::error("no weights loaded")));
    assert_eq!(s.mode(), DriveMode::Manual);
}

#[test]
fn recording_appends_one_record_per_manual_tick() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(&dir);
    s.step().unwrap();
    assert_eq!(s.handle(ClientMessage::Record { value: true }), None);
    assert!(s.recording());
    s.handle(ClientMessage::Cmd { steer: 0.25, throttle: 0.0 });
    let mut ticks = vec![];
    for _ in 0..50 {
        let st = s.step().unwrap();
        assert!(st.recording && !st.collided);
        ticks.push(st.tick);
    }
    assert_eq!(s.records(), 50);
    s.handle(ClientMessage::Record { value: false });
    assert!(!s.recording());
    let (header, records) = read_records(dir.path().join("rec.navd")).unwrap();
    assert_eq!(header.count, 50);
    assert_eq!(records.iter().map(|r| r.tick).collect::<Vec<_>>(), ticks);
    assert!(records.iter().all(|r| r.steering == 0.25 && r.env == EnvType::Cave));

    // Turning recording back on appends to the same file.
    s.handle(ClientMessage::Record { value: true });
    s.step().unwrap();
    s.close().unwrap();
    assert_eq!(read_records(dir.path().join("rec.navd")).unwrap().0.count, 51);
}

#[test]
fn commands_are_clamped_and_latest_wins() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(&dir);
    let start = s.robot().pose;
    s.handle(ClientMessage::Cmd { steer: 0.0, throttle: 0.0 });
    s.handle(ClientMessage::Cmd { steer: 3.0, throttle: 0.0 });
    s.step().unwrap();
    let p = s.robot().pose;
    // Turning in place at the clamped full rate.
    assert!((p.x - start.x).abs() < 1e-12 && (p.y - start.y).abs() < 1e-12);
    assert!((p.theta - start.theta - 0.15).abs() < 1e-9, "{}", p.theta - start.theta);
    assert!(s.handle(ClientMessage::Cmd { steer: f32::NAN, throttle: 0.0 }).is_some());
}

#[test]
fn ticks_increase_across_reset() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(&dir);
    let a = s.step().unwrap().tick;
    let hello = s.handle(ClientMessage::Reset { env: EnvType::NormalCity, seed: 9 });
    assert!(matches!(hello, Some(ServerMessage::Hello { .. })));
    assert_eq!(s.world().env, EnvType::NormalCity);
    let b = s.step().unwrap().tick;
    assert!(b > a);
}

#[test]
fn autopilot_with_loaded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetConfig {
        points: 64,
        ..NetConfig::default()
    };
    let mut w = init_weights(Arch::Nmfnet, &net, 1).unwrap();
    w.get_mut("head.b").unwrap().data_mut().fill(0.3);
    let path = dir.path().join("w.navw");
    save_weights(&w, &path).unwrap();

    // Wrong shape for this session.
    let mut s = session(&dir);
    let tiny = dir.path().join("tiny.navw");
    save_weights(&init_weights(Arch::Nmfnet, &NetConfig::tiny(), 1).unwrap(), &tiny).unwrap();
    let reply = s.handle(ClientMessage::LoadWeights { path: tiny.display().to_string() });
    assert!(matches!(reply, Some(ServerMessage::Error { .. })));

    let mut s = Session::new(SessionConfig {
        net,
        record_path: dir.path().join("rec.navd"),
        ..SessionConfig::default()
    })
    .unwrap();
    assert_eq!(s.handle(ClientMessage::LoadWeights { path: path.display().to_string() }), None);
    assert_eq!(s.handle(ClientMessage::Mode { value: DriveMode::Auto }), None);
    s.handle(ClientMessage::Record { value: true });
    let th = s.robot().pose.theta;
    let st = s.step().unwrap();
    assert_eq!(st.pred, Some(0.3));
    assert_eq!(st.mode, DriveMode::Auto);
    // 0.3 of the 1.5 rad/s limit for 0.1 s.
    assert!((s.robot().pose.theta - th - 0.045).abs() < 1e-6);
    // Autopilot ticks are not recorded.
    assert_eq!(s.records(), 0);
}

#[test]
fn weights_can_be_preloaded() {
    let dir = tempfile::tempdir().unwrap();
    let net = NetConfig {
        points: 64,
        ..NetConfig::default()
    };
    let path = dir.path().join("w.navw");
    save_weights(&init_weights(Arch::Rgbnet, &net, 2).unwrap(), &path).unwrap();
    let cfg = |weights| SessionConfig {
        net: net.clone(),
        weights,
        record_path: dir.path().join("rec.navd"),
        ..SessionConfig::default()
    };
    let mut s = Session::new(cfg(Some(path))).unwrap();
    assert_eq!(s.handle(ClientMessage::Mode { value: DriveMode::Auto }), None);
    assert!(Session::new(cfg(Some(dir.path().join("missing.navw")))).is_err());
}
