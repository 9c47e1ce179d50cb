//! Interactive session server: a live wrist stream drives the environment
//! while the agent closes the fingers.
//!
//! [`Session`] holds the deterministic session logic; [`serve`] wraps it in a
//! single-client TCP endpoint with a reader thread, a ticker loop and a
//! writer thread.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use handgf_core::eval::{posture_metric, stability_metric};
use handgf_core::geom::Pose2;
use handgf_core::graspdata::GraspExample;
use handgf_core::graspgf::ScoreModel;
use handgf_core::hand::{
    Env, EnvConfig, HandModel, JointVector, LinkId, LiveWrist, ObjectShape, Phase, WristPose,
    WristSource,
};
use handgf_core::nn::Checkpoint;
use handgf_core::rl::{AblationFlags, ActMode, ActionParts, Agent, AgentInput, ResidualPolicy};
use rand::rngs::mock::StepRng;

use crate::protocol::{
    codes, read_record, write_message, ContactMsg, SessionMessage, PROTOCOL_VERSION,
};

/// Models and objects a server can open sessions on.
pub struct Catalog {
    pub hand: HandModel<f64>,
    pub env: EnvConfig,
    pub objects: Vec<ObjectShape<f64>>,
    /// Dataset grasps, for the posture readout.
    pub grasps: Vec<GraspExample>,
    /// Default field and policies, keyed by flag name.
    pub gf: Option<ScoreModel<f64>>,
    pub policies: Vec<(String, ResidualPolicy<f64>)>,
}

struct Loaded {
    object: ObjectShape<f64>,
    gf: Option<ScoreModel<f64>>,
    policy: Option<ResidualPolicy<f64>>,
    flags: AblationFlags,
}

/// State of one client session.
pub struct Session<'a> {
    catalog: &'a Catalog,
    loaded: Option<Loaded>,
    env: Option<Env>,
    live: Option<LiveWrist>,
    observed: Vec<WristPose<f64>>,
    last_seq: u64,
    /// A wrist input arrived since the last tick.
    fresh: bool,
    last_parts: Option<ActionParts>,
}

impl<'a> Session<'a> {
    pub fn new(catalog: &'a Catalog) -> Self {
        Self {
            catalog,
            loaded: None,
            env: None,
            live: None,
            observed: Vec::new(),
            last_seq: 0,
            fresh: false,
            last_parts: None,
        }
    }

    pub fn env(&self) -> Option<&Env> {
        self.env.as_ref()
    }

    fn object(&self, id: &str) -> Option<ObjectShape<f64>> {
        let mut o = self.catalog.objects.iter().find(|o| o.id == id)?.clone();
        o.rest_on_table(0.0);
        Some(o)
    }

    fn load(
        &self,
        object_id: &str,
        gf_path: &str,
        policy_path: &str,
        flags: &str,
    ) -> Result<Loaded, SessionMessage> {
        let fail = |m: String| SessionMessage::error(codes::LOAD_FAILED, m);
        let object = self.object(object_id).ok_or_else(|| {
            SessionMessage::error(codes::UNKNOWN_OBJECT, format!("unknown object {object_id}"))
        })?;
        let flags = AblationFlags::parse(flags).map_err(|e| fail(e.to_string()))?;
        let gf = if flags.no_gf {
            None
        } else if gf_path.is_empty() {
            Some(
                self.catalog
                    .gf
                    .clone()
                    .ok_or_else(|| fail("no default gradient field".into()))?,
            )
        } else {
            let ck = Checkpoint::load(Path::new(gf_path))
                .map_err(|e| fail(format!("{gf_path}: {e}")))?;
            Some(ScoreModel::from_checkpoint(&ck).map_err(|e| fail(format!("{gf_path}: {e}")))?)
        };
        let policy = if flags.no_rl {
            None
        } else if policy_path.is_empty() {
            let key = AblationFlags {
                no_collision: false,
                ..flags
            }
            .name();
            let p = self.catalog.policies.iter().find(|(k, _)| *k == key);
            Some(
                p.map(|(_, p)| p.clone())
                    .ok_or_else(|| fail(format!("no default policy for {key}")))?,
            )
        } else {
            let ck = Checkpoint::load(Path::new(policy_path))
                .map_err(|e| fail(format!("{policy_path}: {e}")))?;
            Some(
                ResidualPolicy::from_checkpoint(&ck)
                    .map_err(|e| fail(format!("{policy_path}: {e}")))?
                    .0,
            )
        };
        Ok(Loaded {
            object,
            gf,
            policy,
            flags,
        })
    }

    /// Handles one client message; returns the replies.
    pub fn handle(&mut self, msg: SessionMessage) -> Vec<SessionMessage> {
        match msg {
            SessionMessage::Hello { version } => {
                if version == PROTOCOL_VERSION {
                    vec![SessionMessage::Hello { version }]
                } else {
                    vec![SessionMessage::error(
                        codes::VERSION,
                        format!("protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}"),
                    )]
                }
            }
            SessionMessage::LoadSession {
                object_id,
                gf_path,
                policy_path,
                flags,
            } => match self.load(&object_id, &gf_path, &policy_path, &flags) {
                Ok(l) => {
                    self.loaded = Some(l);
                    self.clear_episode();
                    Vec::new()
                }
                Err(e) => vec![e],
            },
            SessionMessage::Reset { object_id } => {
                let Some(object) = self.object(&object_id) else {
                    return vec![SessionMessage::error(
                        codes::UNKNOWN_OBJECT,
                        format!("unknown object {object_id}"),
                    )];
                };
                match &mut self.loaded {
                    Some(l) => {
                        l.object = object;
                        self.clear_episode();
                        Vec::new()
                    }
                    None => vec![SessionMessage::error(
                        codes::NO_SESSION,
                        "reset before load_session",
                    )],
                }
            }
            SessionMessage::WristInput { x, y, theta, seq } => {
                self.wrist_input(seq, Pose2::new(x, y, theta))
            }
            SessionMessage::TriggerLift {} => self.lift(),
            other => vec![SessionMessage::error(
                codes::MALFORMED,
                format!("unexpected client message {}", other.to_json()),
            )],
        }
    }

    fn clear_episode(&mut self) {
        self.env = None;
        self.live = None;
        self.observed.clear();
        self.fresh = false;
        self.last_parts = None;
    }

    /// Stores a wrist pose; the first pose of an episode resets the
    /// environment and is answered with the `t = 0` state.
    pub fn wrist_input(&mut self, seq: u64, pose: WristPose<f64>) -> Vec<SessionMessage> {
        if seq <= self.last_seq {
            return Vec::new();
        }
        if !pose.is_finite() {
            return vec![SessionMessage::error(
                codes::MALFORMED,
                "non-finite wrist pose",
            )];
        }
        self.last_seq = seq;
        let Some(loaded) = &self.loaded else {
            return vec![SessionMessage::error(
                codes::NO_SESSION,
                "wrist_input before load_session",
            )];
        };
        if let Some(live) = &self.live {
            live.push(seq, pose);
            self.fresh = true;
            return Vec::new();
        }
        let live = LiveWrist::new(pose);
        let env = Env::reset(
            self.catalog.hand.clone(),
            self.catalog.env.clone(),
            loaded.object.clone(),
            WristSource::Live(live.clone()),
            JointVector::zeros(),
        )
        .map(|e| e.with_no_collision(loaded.flags.no_collision));
        match env {
            Ok(env) => {
                self.observed = vec![env.state.wrist];
                self.env = Some(env);
                self.live = Some(live);
                self.fresh = false;
                vec![self.tick_result()]
            }
            Err(e) => vec![SessionMessage::error(codes::BAD_STATE, e.to_string())],
        }
    }

    /// Whether a tick would advance the episode.
    pub fn can_tick(&self, require_fresh: bool) -> bool {
        match &self.env {
            Some(e) => {
                e.state.phase == Phase::Approach
                    && !e.is_terminal_step()
                    && (!require_fresh || self.fresh)
            }
            None => false,
        }
    }

    /// One control step with the latest wrist pose.
    pub fn tick(&mut self) -> Option<SessionMessage> {
        if !self.can_tick(false) {
            return None;
        }
        let loaded = self.loaded.as_ref()?;
        let env = self.env.as_mut()?;
        let agent = Agent {
            hand: &self.catalog.hand,
            gf: loaded.gf.as_ref(),
            policy: loaded.policy.as_ref(),
            flags: loaded.flags,
        };
        let cloud = env.state.object.world_cloud();
        let input = AgentInput {
            joints: &env.state.joints,
            wrist_history: &self.observed,
            cloud_world: &cloud,
        };
        let decided = agent.act(&[input], ActMode::Mean, &mut StepRng::new(0, 0));
        let parts = match decided {
            Ok(mut d) => d.remove(0).1,
            Err(e) => return Some(SessionMessage::error(codes::INTERNAL, e.to_string())),
        };
        if let Err(e) = env.step(&parts.action) {
            return Some(SessionMessage::error(codes::INTERNAL, e.to_string()));
        }
        self.observed.push(env.state.wrist);
        self.fresh = false;
        self.last_parts = Some(parts);
        Some(self.tick_result())
    }

    fn tick_result(&self) -> SessionMessage {
        let env = self.env.as_ref().expect("episode running");
        let s = &env.state;
        let g = env.geometry();
        let contacts = env
            .contacts()
            .iter()
            .map(|c| ContactMsg {
                x: c.point.x,
                y: c.point.y,
                nx: c.normal.x,
                ny: c.normal.y,
                link: match c.link {
                    LinkId::Palm => "palm".into(),
                    LinkId::Finger { finger, link } => format!("f{finger}l{link}"),
                },
            })
            .collect();
        let (a_p, a_s, a_r) = match &self.last_parts {
            Some(p) => (p.a_p, p.a_s, p.a_r),
            None => ([0.0; 6], [1.0; 6], [0.0; 6]),
        };
        SessionMessage::TickResult {
            t: s.t,
            joints: s.joints.q,
            fingertips: g.fingertips.map(|p| [p.x, p.y]),
            object_pose: [s.object.pose.x, s.object.pose.y, s.object.pose.theta],
            contacts,
            phase: format!("{:?}", s.phase).to_lowercase(),
            a_p,
            a_s,
            a_r,
        }
    }

    /// Squeezes and lifts; posture is measured against the nearest dataset
    /// grasp of the object.
    pub fn lift(&mut self) -> Vec<SessionMessage> {
        let Some(env) = self.env.as_mut() else {
            return vec![SessionMessage::error(
                codes::NO_SESSION,
                "no episode to lift",
            )];
        };
        if env.state.phase != Phase::Approach {
            return vec![SessionMessage::error(
                codes::BAD_STATE,
                "episode already lifted",
            )];
        }
        let joints = env.state.joints;
        let (trans, rot) = stability_metric(&env.state.initial_object_pose, &env.state.object.pose);
        let outcome = match env.terminal_squeeze_and_lift() {
            Ok(o) => o,
            Err(e) => return vec![SessionMessage::error(codes::INTERNAL, e.to_string())],
        };
        let id = &env.state.object.id;
        let posture = self
            .catalog
            .grasps
            .iter()
            .filter(|g| &g.object_id == id)
            .map(|g| posture_metric(&joints, g))
            .fold(f64::INFINITY, f64::min);
        vec![SessionMessage::LiftResult {
            success: outcome.success,
            height_gain: outcome.height_gain,
            posture: if posture.is_finite() { posture } else { -1.0 },
            stability: [trans, rot],
        }]
    }
}

/// Outgoing records: replies keep their order, tick results keep only the
/// newest so a slow reader skips ticks.
#[derive(Default)]
struct Outbox {
    replies: VecDeque<SessionMessage>,
    tick: Option<SessionMessage>,
    closed: bool,
}

struct Shared {
    out: Mutex<Outbox>,
    ready: Condvar,
}

impl Shared {
    fn send(&self, m: SessionMessage) {
        let mut o = self.out.lock().unwrap_or_else(|e| e.into_inner());
        match m {
            SessionMessage::TickResult { .. } => o.tick = Some(m),
            SessionMessage::LiftResult { .. }
            | SessionMessage::Error { .. }
            | SessionMessage::Hello { .. } => {
                // Flush the pending tick first so the client sees the state the reply refers to.
                if let Some(t) = o.tick.take() {
                    o.replies.push_back(t);
                }
                o.replies.push_back(m);
            }
            _ => o.replies.push_back(m),
        }
        self.ready.notify_one();
    }

    fn close(&self) {
        self.out.lock().unwrap_or_else(|e| e.into_inner()).closed = true;
        self.ready.notify_one();
    }
}

enum Inbound {
    Message(SessionMessage),
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub tick_hz: f64,
    pub lockstep: bool,
    /// Stop after this many client sessions; `None` serves forever.
    pub max_sessions: Option<usize>,
}

/// Accepts clients one at a time on `listener`.
pub fn serve(listener: TcpListener, catalog: &Catalog, opts: &ServeOptions) -> std::io::Result<()> {
    for (served, stream) in (1..).zip(listener.incoming()) {
        let stream = stream?;
        let peer = stream.peer_addr().ok();
        log::info!("client connected: {peer:?}");
        if let Err(e) = run_client(stream, catalog, opts) {
            log::warn!("client {peer:?}: {e}");
        }
        log::info!("client disconnected: {peer:?}");
        if opts.max_sessions.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

fn run_client(stream: TcpStream, catalog: &Catalog, opts: &ServeOptions) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    let read_half = stream.try_clone()?;
    let write_half = stream.try_clone()?;
    let shared = Arc::new(Shared {
        out: Mutex::new(Outbox::default()),
        ready: Condvar::new(),
    });
    let alive = Arc::new(AtomicBool::new(true));
    let (tx, rx) = mpsc::channel::<Inbound>();

    let reader_alive = alive.clone();
    let reader = std::thread::spawn(move || {
        let mut r = BufReader::new(read_half);
        while let Ok(Some(bytes)) = read_record(&mut r) {
            let parsed = std::str::from_utf8(&bytes)
                .map_err(|e| e.to_string())
                .and_then(|s| SessionMessage::from_json(s).map_err(|e| e.to_string()));
            let item = match parsed {
                Ok(m) => Inbound::Message(m),
                Err(e) => Inbound::Malformed(e),
            };
            if tx.send(item).is_err() {
                break;
            }
        }
        reader_alive.store(false, Ordering::SeqCst);
    });

    let writer_shared = shared.clone();
    let writer = std::thread::spawn(move || {
        let mut w = BufWriter::new(write_half);
        loop {
            let batch: Vec<SessionMessage> = {
                let mut o = writer_shared.out.lock().unwrap_or_else(|e| e.into_inner());
                while o.replies.is_empty() && o.tick.is_none() && !o.closed {
                    o = writer_shared
                        .ready
                        .wait(o)
                        .unwrap_or_else(|e| e.into_inner());
                }
                if o.closed && o.replies.is_empty() && o.tick.is_none() {
                    return;
                }
                let mut b: Vec<SessionMessage> = o.replies.drain(..).collect();
                b.extend(o.tick.take());
                b
            };
            for m in &batch {
                if write_message(&mut w, m).is_err() {
                    return;
                }
            }
        }
    });

    let mut session = Session::new(catalog);
    let period = Duration::from_secs_f64(1.0 / opts.tick_hz);
    let mut next_tick = Instant::now() + period;
    loop {
        let wait = if opts.lockstep {
            Duration::from_millis(50)
        } else {
            next_tick.saturating_duration_since(Instant::now())
        };
        match rx.recv_timeout(wait) {
            Ok(Inbound::Message(m)) => {
                for reply in session.handle(m) {
                    shared.send(reply);
                }
            }
            Ok(Inbound::Malformed(e)) => shared.send(SessionMessage::error(codes::MALFORMED, e)),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if opts.lockstep {
            if session.can_tick(true) {
                if let Some(m) = session.tick() {
                    shared.send(m);
                }
            }
        } else if Instant::now() >= next_tick {
            next_tick += period;
            if let Some(m) = session.tick() {
                shared.send(m);
            }
        }
        if !alive.load(Ordering::SeqCst) {
            // Drain what the reader delivered before it stopped.
            while let Ok(item) = rx.try_recv() {
                if let Inbound::Message(m) = item {
                    for reply in session.handle(m) {
                        shared.send(reply);
                    }
                }
            }
            break;
        }
    }
    shared.close();
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = reader.join();
    let _ = writer.join();
    Ok(())
}
