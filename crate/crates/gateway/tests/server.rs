use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use nav_core::collect::{ExpertConfig, ExpertDriver};
use nav_core::dataset::read_records;
use nav_core::sensors::LaserScan;
use nav_core::world::{EnvType, Pose};
use nav_gateway::protocol::{decode_message, encode_message, ClientMessage, DriveMode, ServerMessage, StateMessage};
use nav_gateway::{Gateway, ServeConfig, SessionConfig};

fn start(dir: &tempfile::TempDir, tick_hz: f64) -> Gateway {
    Gateway::start(ServeConfig {
        bind: "127.0.0.1:0".into(),
        tick_hz,
        max_ticks: None,
        session: SessionConfig {
            env: EnvType::NormalCity,
            seed: 5,
            record_path: dir.path().join("rec.navd"),
            ..SessionConfig::default()
        },
    })
    .unwrap()
}

struct RawClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl RawClient {
    fn connect(g: &Gateway) -> Self {
        let s = TcpStream::connect(g.local_addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Self {
            writer: s.try_clone().unwrap(),
            reader: BufReader::new(s),
        }
    }

    fn recv(&mut self) -> ServerMessage {
        let mut line = String::new();
        self.reader.read_line(&mut line).unwrap();
        decode_message(&line).unwrap()
    }

    fn state(&mut self) -> StateMessage {
        loop {
            if let ServerMessage::State(s) = self.recv() {
                return s;
            }
        }
    }

    fn send_line(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn send(&mut self, m: &ClientMessage) {
        self.send_line(&encode_message(m));
    }
}

#[test]
fn hello_then_increasing_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 50.0);
    let mut c = RawClient::connect(&g);
    match c.recv() {
        ServerMessage::Hello { world, config } => {
            assert_eq!(world["env"], "normal_city");
            assert_eq!(config["beams"], 181);
        }
        other => panic!("expected hello, got {other:?}"),
    }
    let mut last = c.state();
    assert_eq!(last.scan.len(), 181);
    assert_eq!(last.image.rgb().unwrap().len(), last.image.w * last.image.h * 3);
    for _ in 0..10 {
        let s = c.state();
        assert!(s.tick > last.tick);
        last = s;
    }
    g.shutdown().unwrap();
}

#[test]
fn two_clients_see_the_same_stream() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 50.0);
    let mut a = RawClient::connect(&g);
    let mut b = RawClient::connect(&g);
    a.send(&ClientMessage::Cmd { steer: 0.2, throttle: 1.0 });
    let sa: Vec<StateMessage> = (0..30).map(|_| a.state()).collect();
    let sb: Vec<StateMessage> = (0..30).map(|_| b.state()).collect();
    let common: Vec<u64> = sa.iter().map(|s| s.tick).filter(|t| sb.iter().any(|s| s.tick == *t)).collect();
    assert!(common.len() >= 20, "{common:?}");
    for t in common {
        let x = sa.iter().find(|s| s.tick == t).unwrap();
        let y = sb.iter().find(|s| s.tick == t).unwrap();
        assert_eq!(x, y);
    }
    g.shutdown().unwrap();
}

#[test]
fn malformed_input_gets_an_error_and_ticking_continues() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 50.0);
    let mut c = RawClient::connect(&g);
    let before = c.state().tick;
    c.send_line("{not json");
    c.send(&ClientMessage::Mode { value: DriveMode::Auto });
    let mut errors = vec![];
    let mut after = before;
    while errors.len() < 2 {
        match c.recv() {
            ServerMessage::Error { msg } => errors.push(msg),
            ServerMessage::State(s) => after = s.tick,
            _ => {}
        }
    }
    assert!(errors[0].contains("malformed"), "{errors:?}");
    assert_eq!(errors[1], "no weights loaded");
    let next = c.state().tick;
    assert!(next > after && after >= before);
    g.shutdown().unwrap();
}

fn scan_of(state: &StateMessage, max_range: f64) -> LaserScan {
    let ranges: Vec<f32> = state.scan.iter().map(|r| r.unwrap_or(f32::INFINITY)).collect();
    LaserScan {
        angle_increment: PI / (ranges.len() - 1) as f64,
        ranges,
        max_range,
    }
}

/// A headless driver: the scripted expert steering from the streamed scan.
#[test]
fn scripted_client_records_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 40.0);
    let mut c = RawClient::connect(&g);
    let max_range = match c.recv() {
        ServerMessage::Hello { config, .. } => config["max_range"].as_f64().unwrap(),
        other => panic!("{other:?}"),
    };
    let mut driver = ExpertDriver::new(ExpertConfig::default(), 1);
    c.send(&ClientMessage::Record { value: true });
    let mut ticks = vec![];
    let t0 = Instant::now();
    // 10 s of simulated driving at dt 0.1.
    while ticks.len() < 100 {
        let s = c.state();
        assert!(!s.collided, "collided at tick {}", s.tick);
        if s.recording {
            ticks.push(s.tick);
        }
        let pose = Pose::new(s.pose[0], s.pose[1], s.pose[2]);
        let steer = driver.steer(&scan_of(&s, max_range), &pose, 0.1);
        c.send(&ClientMessage::Cmd { steer, throttle: 1.0 });
    }
    c.send(&ClientMessage::Record { value: false });
    // Takes effect at the next tick boundary.
    let mut last = c.state();
    while last.recording {
        last = c.state();
    }
    assert!(last.tick > ticks[99]);
    assert!(t0.elapsed() < Duration::from_secs(10));
    g.shutdown().unwrap();

    let (header, records) = read_records(dir.path().join("rec.navd")).unwrap();
    assert!(header.count >= 100, "{}", header.count);
    // Recorded ticks are exactly the ticks streamed while recording.
    let recorded: Vec<u64> = records.iter().map(|r| r.tick).collect();
    assert_eq!(&recorded[..100], &ticks[..]);
    assert!(records.iter().all(|r| (-1.0..=1.0).contains(&r.steering)));
}

#[test]
fn websocket_mode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 20.0);
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/", g.local_addr())).unwrap();
    let recv = |ws: &mut tungstenite::WebSocket<_>| -> ServerMessage {
        loop {
            if let tungstenite::Message::Text(t) = ws.read().unwrap() {
                return decode_message(t.as_str()).unwrap();
            }
        }
    };
    assert!(matches!(recv(&mut ws), ServerMessage::Hello { .. }));
    ws.send(tungstenite::Message::text(encode_message(&ClientMessage::Record { value: true }))).unwrap();
    let sent = Instant::now();
    loop {
        if let ServerMessage::State(s) = recv(&mut ws) {
            if s.recording {
                break;
            }
        }
    }
    assert!(sent.elapsed() < Duration::from_millis(500));
    ws.send(tungstenite::Message::text(encode_message(&ClientMessage::Reset { env: EnvType::Cave, seed: 2 })))
        .unwrap();
    loop {
        if let ServerMessage::Hello { world, .. } = recv(&mut ws) {
            assert_eq!(world["env"], "cave");
            break;
        }
    }
    ws.close(None).unwrap();
    g.shutdown().unwrap();
}

#[test]
fn bind_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let g = start(&dir, 20.0);
    let err = Gateway::start(ServeConfig {
        bind: g.local_addr().to_string(),
        ..ServeConfig::default()
    })
    .err()
    .unwrap();
    assert!(err.to_string().contains("cannot bind"), "{err}");
    g.shutdown().unwrap();
}

#[test]
fn tick_limit_ends_the_session() {
    let dir = tempfile::tempdir().unwrap();
    let g = Gateway::start(ServeConfig {
        bind: "127.0.0.1:0".into(),
        tick_hz: 100.0,
        max_ticks: Some(5),
        session: SessionConfig {
            record_path: dir.path().join("r.navd"),
            ..SessionConfig::default()
        },
    })
    .unwrap();
    g.join().unwrap();
}
