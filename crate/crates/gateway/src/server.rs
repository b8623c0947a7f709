use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender, TryRecvError};
use serde::Serialize;
use tungstenite::Message;

use crate::protocol::{decode_message, encode_message, ClientMessage, DriveMode, ServerMessage};
use crate::session::{Session, SessionConfig};
use crate::{GatewayError, Result};

pub const DEFAULT_BIND: &str = "127.0.0.1:8473";

/// How long a new connection may stay silent before it is taken to be a
/// raw NDJSON client waiting for its hello.
const SNIFF_WINDOW: Duration = Duration::from_millis(200);
const WS_POLL: Duration = Duration::from_millis(5);
const ACCEPT_POLL: Duration = Duration::from_millis(10);

#[derive(Clone, Debug, Serialize)]
pub struct ServeConfig {
    pub bind: String,
    /// Wall-clock tick rate. Each tick advances the simulation by `session.dt`.
    pub tick_hz: f64,
    /// Stop after this many ticks; run until shut down when `None`.
    pub max_ticks: Option<u64>,
    pub session: SessionConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: DEFAULT_BIND.to_string(),
            tick_hz: 10.0,
            max_ticks: None,
            session: SessionConfig::default(),
        }
    }
}

type ClientId = u64;

enum Event {
    Join {
        id: ClientId,
        out: Sender<Arc<str>>,
        socket: Option<TcpStream>,
    },
    Frame(ClientId, String),
    Leave(ClientId),
}

struct Client {
    out: Sender<Arc<str>>,
    socket: Option<TcpStream>,
}

/// A running gateway: accept thread plus tick thread.
pub struct Gateway {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: JoinHandle<()>,
    tick: JoinHandle<Result<()>>,
}

impl Gateway {
    pub fn start(cfg: ServeConfig) -> Result<Self> {
        if !(cfg.tick_hz > 0.0 && cfg.tick_hz.is_finite()) {
            return Err(GatewayError::Config(format!("tick rate {} Hz", cfg.tick_hz)));
        }
        let session = Session::new(cfg.session.clone())?;
        let listener = TcpListener::bind(&cfg.bind).map_err(|source| GatewayError::Bind {
            addr: cfg.bind.clone(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = unbounded();
        let accept = {
            let stop = stop.clone();
            thread::Builder::new()
                .name("gateway-accept".into())
                .spawn(move || accept_loop(listener, tx, stop))?
        };
        let tick = {
            let stop = stop.clone();
            let period = Duration::from_secs_f64(1.0 / cfg.tick_hz);
            thread::Builder::new()
                .name("gateway-tick".into())
                .spawn(move || tick_loop(session, rx, period, cfg.max_ticks, stop))?
        };
        Ok(Self { addr, stop, accept, tick })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn is_finished(&self) -> bool {
        self.tick.is_finished()
    }

    /// Stops both threads and returns the tick thread's outcome.
    pub fn shutdown(self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        self.join()
    }

    /// Blocks until the tick thread ends on its own (tick limit or fatal
    /// error).
    pub fn join(self) -> Result<()> {
        let result = self.tick.join().map_err(|_| GatewayError::TickPanicked)?;
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.accept.join();
        result
    }
}

/// Runs a gateway on the calling thread until `max_ticks` or a fatal error.
pub fn serve(cfg: ServeConfig) -> Result<()> {
    let g = Gateway::start(cfg)?;
    log(&format!("listening on {}", g.local_addr()));
    g.join()
}

fn log(msg: &str) {
    eprintln!("[gateway] {msg}");
}

fn accept_loop(listener: TcpListener, events: Sender<Event>, stop: Arc<AtomicBool>) {
    let ids = AtomicU64::new(1);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = ids.fetch_add(1, Ordering::Relaxed);
                let events = events.clone();
                let spawned = thread::Builder::new()
                    .name(format!("gateway-client-{id}"))
                    .spawn(move || {
                        if let Err(e) = handle_connection(id, stream, &events) {
                            log(&format!("client {id} ({peer}): {e}"));
                        }
                        let _ = events.send(Event::Leave(id));
                    });
                if let Err(e) = spawned {
                    log(&format!("cannot spawn client thread: {e}"));
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log(&format!("accept: {e}"));
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

/// True when the first bytes look like an HTTP upgrade request. A client
/// that says nothing within the sniff window is a raw NDJSON client.
fn sniff_websocket(stream: &TcpStream) -> std::io::Result<bool> {
    stream.set_read_timeout(Some(SNIFF_WINDOW))?;
    let deadline = Instant::now() + SNIFF_WINDOW;
    let mut buf = [0u8; 4];
    loop {
        match stream.peek(&mut buf) {
            Ok(0) => return Ok(false),
            Ok(n) if n >= 4 || !b"GET "[..n].eq(&buf[..n]) => return Ok(&buf[..n] == b"GET "),
            Ok(_) if Instant::now() >= deadline => return Ok(false),
            Ok(_) => thread::sleep(Duration::from_millis(2)),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
}

fn handle_connection(id: ClientId, stream: TcpStream, events: &Sender<Event>) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let websocket = sniff_websocket(&stream)?;
    stream.set_read_timeout(None)?;
    let (out_tx, out_rx) = unbounded::<Arc<str>>();
    if websocket {
        let ws = tungstenite::accept(stream).map_err(|e| std::io::Error::other(e.to_string()))?;
        ws.get_ref().set_read_timeout(Some(WS_POLL))?;
        let socket = ws.get_ref().try_clone().ok();
        if events.send(Event::Join { id, out: out_tx, socket }).is_err() {
            return Ok(());
        }
        websocket_loop(id, ws, out_rx, events)
    } else {
        let socket = stream.try_clone()?;
        if events.send(Event::Join { id, out: out_tx, socket: Some(socket) }).is_err() {
            return Ok(());
        }
        let mut writer = stream.try_clone()?;
        let write = thread::spawn(move || {
            for msg in out_rx {
                if writer.write_all(msg.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                    break;
                }
            }
            let _ = writer.shutdown(Shutdown::Write);
        });
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if events.send(Event::Frame(id, line)).is_err() {
                break;
            }
        }
        drop(write);
        Ok(())
    }
}

fn websocket_loop(
    id: ClientId,
    mut ws: tungstenite::WebSocket<TcpStream>,
    out: Receiver<Arc<str>>,
    events: &Sender<Event>,
) -> std::io::Result<()> {
    let io = |e: tungstenite::Error| std::io::Error::other(e.to_string());
    loop {
        loop {
            match out.try_recv() {
                Ok(msg) => ws.send(Message::text(msg.to_string())).map_err(io)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    return Ok(());
                }
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if events.send(Event::Frame(id, text.to_string())).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(io(e)),
        }
    }
}

fn send(clients: &mut BTreeMap<ClientId, Client>, id: ClientId, msg: &ServerMessage) {
    if let Some(c) = clients.get(&id) {
        if c.out.send(encode_message(msg).into()).is_err() {
            clients.remove(&id);
        }
    }
}

fn broadcast(clients: &mut BTreeMap<ClientId, Client>, msg: &ServerMessage) {
    let text: Arc<str> = encode_message(msg).into();
    clients.retain(|_, c| c.out.send(text.clone()).is_ok());
}

fn tick_loop(mut session: Session, events: Receiver<Event>, period: Duration, max_ticks: Option<u64>, stop: Arc<AtomicBool>) -> Result<()> {
    let mut clients: BTreeMap<ClientId, Client> = BTreeMap::new();
    let mut next = Instant::now();
    let mut ticks = 0u64;
    while !stop.load(Ordering::SeqCst) && max_ticks.is_none_or(|m| ticks < m) {
        // Everything that arrived since the last tick applies at this boundary.
        while let Ok(ev) = events.try_recv() {
            match ev {
                Event::Join { id, out, socket } => {
                    clients.insert(id, Client { out, socket });
                    send(&mut clients, id, &session.hello());
                }
                Event::Leave(id) => {
                    clients.remove(&id);
                }
                Event::Frame(id, text) => match decode_message::<ClientMessage>(&text) {
                    Ok(msg) => {
                        let reset = matches!(msg, ClientMessage::Reset { .. });
                        match session.handle(msg) {
                            Some(reply) if reset && matches!(reply, ServerMessage::Hello { .. }) => broadcast(&mut clients, &reply),
                            Some(reply) => send(&mut clients, id, &reply),
                            None => {}
                        }
                    }
                    Err(e) => send(&mut clients, id, &ServerMessage::error(e.to_string())),
                },
            }
        }
        match session.step() {
            Ok(state) => broadcast(&mut clients, &ServerMessage::State(state)),
            Err(e) => {
                // Autopilot failures fall back to manual; recording failures stop the recording.
                broadcast(&mut clients, &ServerMessage::error(e.to_string()));
                session.handle(ClientMessage::Mode { value: DriveMode::Manual });
                if matches!(e, GatewayError::Dataset(_) | GatewayError::Io(_)) {
                    session.handle(ClientMessage::Record { value: false });
                }
            }
        }
        ticks += 1;
        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
    for c in clients.values() {
        if let Some(s) = &c.socket {
            let _ = s.shutdown(Shutdown::Read);
        }
    }
    drop(clients);
    session.close()
}
