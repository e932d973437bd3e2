//! Teleoperation session service.
//!
//! Each TCP connection carries one session. Messages in both directions are a
//! 4-byte big-endian length followed by a UTF-8 JSON object with a `type`
//! field; see `docs/protocol.md` for the schema. A session owns one simulator
//! stepped by its own thread. Frame and state messages are dropped when the
//! client reads slowly; recording is done on the session thread and never
//! skips a step.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::PolicyFactory;
use crate::dataset::{save_trajectory, write_index, DomainTag, Recorder, SourceTag};
use crate::fine::Policy;
use crate::sim::{render, score_episode, ActionVector, Observation, Pose, SceneConfig, SimState, Simulator, DT, THETA_HI, THETA_LO};

/// Largest accepted message body.
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionMode {
    /// The human steers.
    #[default]
    Demonstrate,
    /// The policy steers until a takeover.
    WatchPolicy,
    /// The human steers after taking over from the policy.
    Intervene,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ClientMessage {
    Open {
        scene_id: String,
        #[serde(default)]
        mode: SessionMode,
        #[serde(default)]
        seed: u64,
    },
    /// Linear velocities in m/s and tilt rate in rad/s; held until replaced.
    Action { vx: f64, vy: f64, vz: f64, omega: f64 },
    /// Advances a lockstep session by `count` steps.
    Step {
        #[serde(default = "one")]
        count: u32,
    },
    RecordStart,
    RecordStop,
    Takeover,
    Close,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ServerMessage {
    Opened {
        session_id: u64,
        scene_id: String,
        mode: SessionMode,
        seed: u64,
        image_size: usize,
        /// Seconds per simulation step.
        dt: f64,
        lockstep: bool,
    },
    /// Base64 PNG of the observation at `frame_index`.
    Frame { frame_index: u64, size: usize, png: String },
    State(StateReport),
    RecordingStarted { recording_id: String },
    RecordingSaved(RecordingReport),
    ModeChanged { mode: SessionMode },
    Notice { message: String },
    Error { message: String },
    Closed { session_id: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateReport {
    pub frame_index: u64,
    pub mode: SessionMode,
    pub recording: bool,
    pub recorded_frames: usize,
    /// Metres and radians.
    pub pose: Pose,
    /// The command applied at this frame.
    pub command: ActionVector,
    pub in_source: u32,
    pub in_target: u32,
    pub spilled: u32,
    pub in_flight: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingReport {
    pub recording_id: String,
    pub path: PathBuf,
    pub scene_id: String,
    pub length: usize,
    pub success: bool,
    pub in_target_fraction: f64,
    pub intervention_frame: Option<usize>,
    /// True when the recording was closed by a disconnect.
    pub partial: bool,
}

pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg).map_err(io::Error::other)?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_MESSAGE_BYTES {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("message of {n} bytes exceeds {MAX_MESSAGE_BYTES}")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn encode_png(obs: &Observation) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, obs.size as u32, obs.size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().expect("png header");
    w.write_image_data(&obs.image).expect("png body");
    w.finish().expect("png finish");
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Clock {
    /// Steps at `hz` in wall-clock time.
    Realtime { hz: f64 },
    /// Steps only on `step` messages.
    Lockstep,
}

pub type SharedPolicy = Arc<dyn PolicyFactory + Send + Sync>;

#[derive(Clone)]
pub struct ServiceConfig {
    pub scenes: Vec<SceneConfig>,
    pub archive_dir: PathBuf,
    pub clock: Clock,
    /// Frame/state messages queued per client before the oldest are dropped.
    pub stream_capacity: usize,
    /// Needed for watch-policy sessions.
    pub policy: Option<SharedPolicy>,
}

impl ServiceConfig {
    pub fn new(scenes: Vec<SceneConfig>, archive_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            scenes,
            archive_dir: archive_dir.into(),
            clock: Clock::Realtime { hz: 1.0 / DT },
            stream_capacity: 8,
            policy: None,
        }
    }
}

/// Outgoing queue. Control messages are always delivered; stream messages
/// beyond the capacity replace the oldest queued ones.
struct Outbox {
    inner: Mutex<OutboxState>,
    ready: Condvar,
    capacity: usize,
}

struct OutboxState {
    queue: VecDeque<(bool, ServerMessage)>,
    closed: bool,
    dropped: u64,
}

impl Outbox {
    fn new(capacity: usize) -> Self {
        Outbox {
            inner: Mutex::new(OutboxState { queue: VecDeque::new(), closed: false, dropped: 0 }),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    fn push(&self, msg: ServerMessage, droppable: bool) {
        let mut s = self.inner.lock().expect("outbox");
        if droppable {
            let queued = s.queue.iter().filter(|(d, _)| *d).count();
            if queued >= self.capacity {
                if let Some(i) = s.queue.iter().position(|(d, _)| *d) {
                    s.queue.remove(i);
                    s.dropped += 1;
                }
            }
        }
        s.queue.push_back((droppable, msg));
        self.ready.notify_one();
    }

    fn close(&self) {
        self.inner.lock().expect("outbox").closed = true;
        self.ready.notify_all();
    }

    /// Blocks until a message is available; `None` once closed and drained.
    fn pop(&self) -> Option<ServerMessage> {
        let mut s = self.inner.lock().expect("outbox");
        loop {
            if let Some((_, m)) = s.queue.pop_front() {
                return Some(m);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).expect("outbox");
        }
    }
}

enum Inbound {
    Msg(ClientMessage),
    Malformed(String),
    Disconnected,
}

struct Shared {
    cfg: ServiceConfig,
    next_session: AtomicU64,
    /// Serialises archive index rewrites between sessions.
    index_lock: Mutex<()>,
}

/// Running service; dropped or `shutdown` stops accepting connections.
pub struct SessionServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SessionServer {
    pub fn bind(addr: &str, cfg: ServiceConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        std::fs::create_dir_all(&cfg.archive_dir)?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Shared { cfg, next_session: AtomicU64::new(1), index_lock: Mutex::new(()) });
        let flag = stop.clone();
        let accept = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let shared = shared.clone();
                        thread::spawn(move || {
                            if let Err(e) = handle_connection(stream, shared) {
                                log::warn!("session ended with error: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        });
        Ok(SessionServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SessionServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let outbox = Arc::new(Outbox::new(shared.cfg.stream_capacity));
    let writer = {
        let outbox = outbox.clone();
        let mut w = io::BufWriter::new(stream.try_clone()?);
        thread::spawn(move || {
            while let Some(msg) = outbox.pop() {
                if write_message(&mut w, &msg).is_err() {
                    break;
                }
            }
        })
    };
    let (tx, rx) = mpsc::channel();
    let mut r = stream.try_clone()?;
    thread::spawn(move || loop {
        let item = match read_frame(&mut r) {
            Ok(Some(body)) => match serde_json::from_slice::<ClientMessage>(&body) {
                Ok(m) => Inbound::Msg(m),
                Err(e) => Inbound::Malformed(e.to_string()),
            },
            Ok(None) => Inbound::Disconnected,
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // the stream cannot be resynchronised after a bad length
                let _ = tx.send(Inbound::Malformed(e.to_string()));
                Inbound::Disconnected
            }
            Err(_) => Inbound::Disconnected,
        };
        let end = matches!(item, Inbound::Disconnected);
        if tx.send(item).is_err() || end {
            break;
        }
    });
    let result = run_session(&shared, &outbox, &rx);
    outbox.close();
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
    result
}

struct Live<'p> {
    id: u64,
    seed: u64,
    sim: Simulator,
    state: SimState,
    mode: SessionMode,
    /// Tilt target integrated from the human's rate command.
    theta_cmd: f64,
    human: [f64; 4],
    policy: Option<Box<dyn Policy + 'p>>,
    recorder: Option<(String, Recorder)>,
    recordings: usize,
}

fn run_session(shared: &Shared, out: &Outbox, rx: &Receiver<Inbound>) -> io::Result<()> {
    let cfg = &shared.cfg;
    let control = |m: ServerMessage| out.push(m, false);
    let error = |m: String| out.push(ServerMessage::Error { message: m }, false);

    // handshake: anything before a valid open is answered with an error
    let policy_factory = cfg.policy.clone();
    let mut live = loop {
        match rx.recv() {
            Ok(Inbound::Msg(ClientMessage::Open { scene_id, mode, seed })) => {
                match open(shared, &scene_id, mode, seed, policy_factory.as_deref()) {
                    Ok(l) => break l,
                    Err(e) => error(e),
                }
            }
            Ok(Inbound::Msg(ClientMessage::Close)) | Ok(Inbound::Disconnected) | Err(_) => return Ok(()),
            Ok(Inbound::Msg(other)) => error(format!("session not open; got {}", kind(&other))),
            Ok(Inbound::Malformed(e)) => error(format!("malformed message: {e}")),
        }
    };
    control(ServerMessage::Opened {
        session_id: live.id,
        scene_id: live.sim.scene().scene_id.clone(),
        mode: live.mode,
        seed: live.seed,
        image_size: live.sim.scene().camera.render_size,
        dt: DT,
        lockstep: cfg.clock == Clock::Lockstep,
    });
    stream_current(&live, out);

    let period = match cfg.clock {
        Clock::Realtime { hz } => Some(Duration::from_secs_f64(1.0 / hz.max(1e-3))),
        Clock::Lockstep => None,
    };
    let mut next_tick = Instant::now() + period.unwrap_or_default();
    loop {
        let inbound = match period {
            Some(p) => {
                let wait = next_tick.saturating_duration_since(Instant::now());
                match rx.recv_timeout(wait) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => Some(Inbound::Disconnected),
                }
                .map(Ok)
                .unwrap_or_else(|| {
                    // behind schedule: step once and re-anchor instead of bursting
                    next_tick = (next_tick + p).max(Instant::now());
                    Err(())
                })
            }
            None => Ok(rx.recv().unwrap_or(Inbound::Disconnected)),
        };
        let msg = match inbound {
            Err(()) => {
                if let Err(e) = step_once(&mut live, out) {
                    error(e);
                }
                continue;
            }
            Ok(m) => m,
        };
        match msg {
            Inbound::Malformed(e) => error(format!("malformed message: {e}")),
            Inbound::Disconnected => {
                finish_recording(shared, &mut live, out, true);
                return Ok(());
            }
            Inbound::Msg(m) => match m {
                ClientMessage::Open { .. } => error("session already open".into()),
                ClientMessage::Action { vx, vy, vz, omega } => {
                    if ![vx, vy, vz, omega].iter().all(|v| v.is_finite()) {
                        error("action components must be finite".into());
                    } else if live.mode == SessionMode::WatchPolicy {
                        out.push(ServerMessage::Notice { message: "policy is driving; send takeover first".into() }, false);
                    } else {
                        live.human = [vx, vy, vz, omega];
                    }
                }
                ClientMessage::Step { count } => {
                    if period.is_some() {
                        error("step is only valid for lockstep sessions".into());
                    } else {
                        for _ in 0..count {
                            if let Err(e) = step_once(&mut live, out) {
                                error(e);
                                break;
                            }
                        }
                    }
                }
                ClientMessage::RecordStart => {
                    if live.recorder.is_some() {
                        out.push(ServerMessage::Notice { message: "already recording".into() }, false);
                    } else {
                        live.recordings += 1;
                        let id = format!("{}_s{:04}_r{:03}", live.sim.scene().scene_id, live.id, live.recordings);
                        let tag = if live.mode == SessionMode::Demonstrate { SourceTag::HumanTeleop } else { SourceTag::Policy };
                        live.recorder = Some((id.clone(), Recorder::new(live.sim.scene().scene_id.clone(), tag)));
                        control(ServerMessage::RecordingStarted { recording_id: id });
                    }
                }
                ClientMessage::RecordStop => {
                    if live.recorder.is_none() {
                        out.push(ServerMessage::Notice { message: "not recording; record-stop ignored".into() }, false);
                    } else {
                        finish_recording(shared, &mut live, out, false);
                    }
                }
                ClientMessage::Takeover => {
                    if live.mode != SessionMode::WatchPolicy {
                        error("takeover requires a watch-policy session".into());
                    } else {
                        live.mode = SessionMode::Intervene;
                        live.human = [0.0; 4];
                        live.theta_cmd = live.state.pose.theta;
                        if let Some((_, rec)) = &mut live.recorder {
                            rec.mark_intervention();
                        }
                        control(ServerMessage::ModeChanged { mode: live.mode });
                    }
                }
                ClientMessage::Close => {
                    finish_recording(shared, &mut live, out, false);
                    control(ServerMessage::Closed { session_id: live.id });
                    return Ok(());
                }
            },
        }
    }
}

fn kind(m: &ClientMessage) -> &'static str {
    match m {
        ClientMessage::Open { .. } => "open",
        ClientMessage::Action { .. } => "action",
        ClientMessage::Step { .. } => "step",
        ClientMessage::RecordStart => "record-start",
        ClientMessage::RecordStop => "record-stop",
        ClientMessage::Takeover => "takeover",
        ClientMessage::Close => "close",
    }
}

fn open<'p>(
    shared: &Shared,
    scene_id: &str,
    mode: SessionMode,
    seed: u64,
    factory: Option<&'p (dyn PolicyFactory + Send + Sync)>,
) -> Result<Live<'p>, String> {
    let scene = shared
        .cfg
        .scenes
        .iter()
        .find(|s| s.scene_id == scene_id)
        .ok_or_else(|| format!("unknown scene {scene_id}"))?
        .clone();
    let policy = match mode {
        SessionMode::Demonstrate => None,
        SessionMode::WatchPolicy => {
            let f = factory.ok_or("no policy loaded; watch-policy is unavailable")?;
            let mut p = f.make(&scene).map_err(|e| e.to_string())?;
            p.reset();
            Some(p)
        }
        SessionMode::Intervene => return Err("sessions open in demonstrate or watch-policy mode".into()),
    };
    let sim = Simulator::new(scene).map_err(|e| e.to_string())?;
    let state = sim.reset(seed);
    let id = shared.next_session.fetch_add(1, Ordering::Relaxed);
    Ok(Live { id, seed, theta_cmd: state.pose.theta, sim, state, mode, human: [0.0; 4], policy, recorder: None, recordings: 0 })
}

fn stream_current(live: &Live, out: &Outbox) {
    let obs = render(&live.state, live.sim.scene());
    stream(live, &obs, &ActionVector::new(0.0, 0.0, 0.0, live.theta_cmd), out);
}

fn stream(live: &Live, obs: &Observation, command: &ActionVector, out: &Outbox) {
    let png = base64::engine::general_purpose::STANDARD.encode(encode_png(obs));
    out.push(ServerMessage::Frame { frame_index: obs.frame_index, size: obs.size, png }, true);
    let s = &live.state;
    out.push(
        ServerMessage::State(StateReport {
            frame_index: obs.frame_index,
            mode: live.mode,
            recording: live.recorder.is_some(),
            recorded_frames: live.recorder.as_ref().map_or(0, |(_, r)| r.len()),
            pose: s.pose,
            command: *command,
            in_source: s.granules_in_source,
            in_target: s.granules_in_target,
            spilled: s.granules_spilled,
            in_flight: s.in_flight.len() as u32,
        }),
        true,
    );
}

/// Renders the current frame, picks the command, records, and advances one
/// `DT`.
fn step_once(live: &mut Live, out: &Outbox) -> Result<(), String> {
    let obs = render(&live.state, live.sim.scene());
    let action = match (&mut live.policy, live.mode) {
        (Some(p), SessionMode::WatchPolicy) => p.act(&obs, &live.state).map_err(|e| e.to_string())?,
        _ => {
            let [vx, vy, vz, omega] = live.human;
            live.theta_cmd = (live.theta_cmd + omega * DT).clamp(THETA_LO, THETA_HI);
            ActionVector::new(vx, vy, vz, live.theta_cmd)
        }
    };
    stream(live, &obs, &action, out);
    if let Some((_, rec)) = &mut live.recorder {
        rec.push(obs, action, live.state.pose.theta, live.state.pose).map_err(|e| e.to_string())?;
    }
    live.state = live.sim.step(&live.state, &action, DT).map_err(|e| e.to_string())?;
    Ok(())
}

fn finish_recording(shared: &Shared, live: &mut Live, out: &Outbox, partial: bool) {
    let Some((id, rec)) = live.recorder.take() else { return };
    if rec.is_empty() {
        out.push(ServerMessage::Notice { message: format!("recording {id} has no frames; nothing saved") }, false);
        return;
    }
    let result = rec.finish().map_err(|e| e.to_string()).and_then(|traj| {
        let path = shared.cfg.archive_dir.join(&id);
        save_trajectory(&path, &traj).map_err(|e| e.to_string())?;
        reindex(shared).map_err(|e| e.to_string())?;
        let landed = live.sim.land_in_flight(&live.state);
        let score = score_episode(&landed, live.sim.scene());
        Ok(RecordingReport {
            recording_id: id.clone(),
            path,
            scene_id: traj.scene_id.clone(),
            length: traj.len(),
            success: score.success,
            in_target_fraction: score.in_target_fraction,
            intervention_frame: traj.intervention_frame,
            partial,
        })
    });
    match result {
        Ok(r) => out.push(ServerMessage::RecordingSaved(r), false),
        Err(e) => out.push(ServerMessage::Error { message: format!("recording {id} not saved: {e}") }, false),
    }
}

/// Rewrites the archive index to list every complete recording so the
/// directory loads as a database.
fn reindex(shared: &Shared) -> io::Result<()> {
    let _guard = shared.index_lock.lock().expect("index lock");
    let names = recordings_in(&shared.cfg.archive_dir)?;
    write_index(&shared.cfg.archive_dir, "teleop", DomainTag::SourceH, &names).map_err(io::Error::other)
}

fn recordings_in(dir: &Path) -> io::Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("manifest.json").is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Blocking client used by tests and tools.
pub struct SessionClient {
    stream: TcpStream,
}

impl SessionClient {
    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(SessionClient { stream })
    }

    pub fn send(&mut self, msg: &ClientMessage) -> io::Result<()> {
        write_message(&mut self.stream, msg)
    }

    /// Sends an arbitrary body inside a valid length prefix.
    pub fn send_raw(&mut self, body: &[u8]) -> io::Result<()> {
        self.stream.write_all(&(body.len() as u32).to_be_bytes())?;
        self.stream.write_all(body)
    }

    pub fn recv(&mut self) -> io::Result<ServerMessage> {
        let body = read_frame(&mut self.stream)?.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Reads until `pred` matches, returning every message seen.
    pub fn recv_until(&mut self, mut pred: impl FnMut(&ServerMessage) -> bool) -> io::Result<Vec<ServerMessage>> {
        let mut seen = Vec::new();
        loop {
            let m = self.recv()?;
            let done = pred(&m);
            seen.push(m);
            if done {
                return Ok(seen);
            }
        }
    }

    /// Drops the connection without a close message.
    pub fn disconnect(self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
