//! Live shared-control sessions: one simulated vehicle per WebSocket
//! connection, stepped at the map's sampling period, with the supervisor
//! between the remote joystick and the drive.

use std::sync::Arc;
use std::time::Duration;

use asc_core::costmap::SafeBoundary;
use asc_core::dynamics::DynamicsParams;
use asc_core::sim::{check_boundary, sense, step_vehicle, VehicleState, World};
use asc_core::supervisor::{JoystickCommand, DEFAULT_W_MAX};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::time::MissedTickBehavior;

/// Joystick input older than this is treated as a released stick (s).
pub const STALE_AFTER: f64 = 0.5;
/// Outgoing frames buffered per client before new ones are dropped.
pub const OUTBOUND_CAPACITY: usize = 8;
const INBOUND_CAPACITY: usize = 256;

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub world: World<f64>,
    pub boundary: SafeBoundary<f64>,
    pub w_max: f64,
    /// Supervision state of a fresh session.
    pub asc: bool,
}

impl SessionConfig {
    pub fn new(world: World<f64>, boundary: SafeBoundary<f64>) -> asc_core::Result<Self> {
        world.validate()?;
        boundary.validate()?;
        Ok(Self { world, boundary, w_max: DEFAULT_W_MAX, asc: true })
    }

    pub fn params(&self) -> &DynamicsParams<f64> {
        &self.boundary.params
    }

    /// Checks that a cost map's dynamics match the boundary in use.
    pub fn check_params(&self, params: &DynamicsParams<f64>) -> asc_core::Result<()> {
        check_boundary(&self.boundary, params)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Joystick { vd: f64, wd: f64 },
    Reset,
    ToggleAsc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleFrame {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: f64,
    pub pose: PoseFrame,
    pub v: f64,
    pub w: f64,
    pub vd: f64,
    pub wd: f64,
    pub vu: f64,
    pub wu: f64,
    pub ratio: f64,
    pub asc: bool,
    pub collision: bool,
    pub cd: u32,
    pub obstacles: Vec<ObstacleFrame>,
    pub limiting_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    State(StateFrame),
    Error { message: String },
}

impl ServerFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames serialize")
    }
}

#[derive(Clone, Debug)]
pub struct Session {
    cfg: Arc<SessionConfig>,
    vehicle: VehicleState<f64>,
    cmd: JoystickCommand<f64>,
    last_input: Option<f64>,
    asc: bool,
    ticks: u64,
    c_d: u32,
    in_contact: bool,
}

impl Session {
    pub fn new(cfg: Arc<SessionConfig>) -> Self {
        Self {
            vehicle: VehicleState::at(cfg.world.start),
            cmd: JoystickCommand::default(),
            last_input: None,
            asc: cfg.asc,
            ticks: 0,
            c_d: 0,
            in_contact: false,
            cfg,
        }
    }

    pub fn time(&self) -> f64 {
        self.ticks as f64 * self.cfg.params().dt
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn vehicle(&self) -> VehicleState<f64> {
        self.vehicle
    }

    pub fn command(&self) -> JoystickCommand<f64> {
        self.cmd
    }

    pub fn asc(&self) -> bool {
        self.asc
    }

    pub fn collisions(&self) -> u32 {
        self.c_d
    }

    /// Applies one client message. A malformed message leaves the session
    /// untouched and yields the error frame to send back.
    pub fn handle_client_message(&mut self, text: &str) -> Result<(), ServerFrame> {
        let msg: ClientMessage = serde_json::from_str(text)
            .map_err(|e| ServerFrame::Error { message: format!("bad message: {e}") })?;
        match msg {
            ClientMessage::Joystick { vd, wd } => {
                self.cmd = JoystickCommand::new(vd, wd).clamped(self.cfg.params(), self.cfg.w_max);
                self.last_input = Some(self.time());
            }
            ClientMessage::Reset => {
                self.vehicle = VehicleState::at(self.cfg.world.start);
                self.cmd = JoystickCommand::default();
                self.last_input = None;
                self.c_d = 0;
                self.in_contact = false;
            }
            ClientMessage::ToggleAsc => self.asc = !self.asc,
        }
        Ok(())
    }

    fn live_command(&self) -> JoystickCommand<f64> {
        match self.last_input {
            Some(t0) if self.time() - t0 <= STALE_AFTER + 1e-9 => self.cmd,
            _ => JoystickCommand::default(),
        }
    }

    /// Exactly one simulation step; returns the frame describing its result.
    pub fn tick(&mut self) -> StateFrame {
        let cfg = Arc::clone(&self.cfg);
        let cmd = self.live_command();
        let seen = sense(&cfg.world, &self.vehicle.pose);
        let boundary = self.asc.then_some(&cfg.boundary);
        let out = step_vehicle(&cfg.world, cfg.params(), cfg.w_max, &mut self.vehicle, cmd, &seen, boundary);
        if out.contact && !self.in_contact {
            self.c_d += 1;
        }
        self.in_contact = out.contact;
        self.ticks += 1;
        let VehicleState { pose, v, w } = self.vehicle;
        StateFrame {
            t: self.time(),
            pose: PoseFrame { x: pose.x, y: pose.y, theta: pose.theta },
            v,
            w,
            vd: cmd.v_d,
            wd: cmd.w_d,
            vu: out.supervision.v_u,
            wu: out.supervision.w_u,
            ratio: out.supervision.ratio,
            asc: self.asc,
            collision: out.contact,
            cd: self.c_d,
            obstacles: cfg.world.obstacles.iter().map(|c| ObstacleFrame { x: c.x, y: c.y, r: c.r }).collect(),
            limiting_distance: out.supervision.limiting_distance,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub ticks: u64,
    pub dropped: u64,
}

/// Control loop for one connection. Inbound text messages are applied at the
/// start of each tick; frames go out through `outbound` without waiting, so a
/// slow reader loses frames instead of stalling the loop. Ends when either
/// side closes or after `max_ticks`.
pub async fn run_session(
    cfg: Arc<SessionConfig>,
    mut inbound: mpsc::Receiver<String>,
    outbound: mpsc::Sender<String>,
    max_ticks: Option<u64>,
) -> LoopStats {
    let mut session = Session::new(Arc::clone(&cfg));
    let mut stats = LoopStats::default();
    let mut interval = tokio::time::interval(Duration::from_secs_f64(cfg.params().dt));
    interval.set_missed_tick_behavior(MissedTickBehavior::Delay);

    let send = |text: String, stats: &mut LoopStats| match outbound.try_send(text) {
        Ok(()) => true,
        Err(mpsc::error::TrySendError::Full(_)) => {
            stats.dropped += 1;
            true
        }
        Err(mpsc::error::TrySendError::Closed(_)) => false,
    };

    loop {
        if max_ticks.is_some_and(|m| stats.ticks >= m) {
            break;
        }
        interval.tick().await;
        loop {
            match inbound.try_recv() {
                Ok(text) => {
                    if let Err(frame) = session.handle_client_message(&text) {
                        if !send(frame.to_json(), &mut stats) {
                            return stats;
                        }
                    }
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return stats,
            }
        }
        let frame = ServerFrame::State(session.tick());
        stats.ticks += 1;
        if !send(frame.to_json(), &mut stats) {
            break;
        }
    }
    stats
}

async fn handle_socket(socket: WebSocket, cfg: Arc<SessionConfig>) {
    let (mut sink, mut stream) = socket.split();
    let (in_tx, in_rx) = mpsc::channel::<String>(INBOUND_CAPACITY);
    let (out_tx, mut out_rx) = mpsc::channel::<String>(OUTBOUND_CAPACITY);

    let reader = tokio::spawn(async move {
        while let Some(Ok(msg)) = stream.next().await {
            match msg {
                Message::Text(text) => {
                    if in_tx.send(text.to_string()).await.is_err() {
                        break;
                    }
                }
                Message::Close(_) => break,
                _ => {}
            }
        }
    });
    let writer = tokio::spawn(async move {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    run_session(cfg, in_rx, out_tx, None).await;
    reader.abort();
    let _ = writer.await;
}

async fn ws_route(ws: WebSocketUpgrade, State(cfg): State<Arc<SessionConfig>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_socket(socket, cfg))
}

/// `GET /ws` opens a fresh session.
pub fn router(cfg: Arc<SessionConfig>) -> Router {
    Router::new().route("/ws", get(ws_route)).with_state(cfg)
}

pub async fn serve(listener: TcpListener, cfg: SessionConfig) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(cfg))).await
}
