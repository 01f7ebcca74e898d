//! WebSocket front end: `/control` for one commanding client, `/telemetry` for any
//! number of read-only subscribers.
//!
//! The session lives on a dedicated thread that applies commands between batches of
//! points. Telemetry lines go through a broadcast channel; a subscriber that falls
//! behind loses the oldest lines and sees the gap in the frame sequence numbers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::sync::{broadcast, mpsc as tmpsc, oneshot};

use crate::pacing::{Pacer, Profile};
use crate::persist;
use crate::protocol::{Reply, Request};
use crate::session::{RunSnapshot, Session, SessionConfig};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub profile: Profile,
    pub runs_dir: PathBuf,
    pub session: SessionConfig,
    /// Control loop period.
    pub tick: Duration,
    /// Telemetry lines buffered per subscriber before the oldest are dropped.
    pub telemetry_capacity: usize,
}

impl ServerConfig {
    pub fn new(listen: SocketAddr, session: SessionConfig) -> Self {
        Self {
            listen,
            profile: Profile::Bench,
            runs_dir: PathBuf::from("runs"),
            session,
            tick: Duration::from_millis(5),
            telemetry_capacity: 4096,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] resotrack_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

enum ControlMsg {
    Line {
        text: String,
        reply: tmpsc::UnboundedSender<String>,
    },
    Shutdown,
}

struct PersistJob {
    id: Option<u64>,
    snapshot: RunSnapshot,
    reply: tmpsc::UnboundedSender<String>,
}

#[derive(Clone)]
struct AppState {
    control: mpsc::Sender<ControlMsg>,
    telemetry: broadcast::Sender<Arc<str>>,
    control_busy: Arc<AtomicBool>,
}

/// A started server; dropping it without [`RunningServer::shutdown`] leaves it running
/// until the runtime stops.
pub struct RunningServer {
    addr: SocketAddr,
    control: mpsc::Sender<ControlMsg>,
    stop_http: Option<oneshot::Sender<()>>,
    http: tokio::task::JoinHandle<std::io::Result<()>>,
    loop_thread: Option<thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(mut self) {
        let _ = self.control.send(ControlMsg::Shutdown);
        if let Some(stop) = self.stop_http.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.http).await;
        if let Some(t) = self.loop_thread.take() {
            let _ = tokio::task::spawn_blocking(move || t.join()).await;
        }
    }

    /// Resolves when the HTTP server stops on its own (it normally does not).
    pub async fn wait(&mut self) -> std::io::Result<()> {
        match (&mut self.http).await {
            Ok(r) => r,
            Err(e) => Err(std::io::Error::other(e)),
        }
    }
}

/// Binds, starts the control loop and the HTTP server.
pub async fn start(cfg: ServerConfig) -> Result<RunningServer, ServeError> {
    let session = Session::new(cfg.session.clone())?;
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: cfg.listen,
            source,
        })?;
    let addr = listener.local_addr()?;
    // Small telemetry writes must not wait for delayed ACKs.
    let listener = listener.tap_io(|tcp| {
        if let Err(e) = tcp.set_nodelay(true) {
            tracing::warn!("cannot disable Nagle: {e}");
        }
    });
    let (telemetry, _) = broadcast::channel::<Arc<str>>(cfg.telemetry_capacity.max(16));
    let (control, control_rx) = mpsc::channel();
    let (persist_tx, persist_rx) = mpsc::channel::<PersistJob>();

    let runs_dir = cfg.runs_dir.clone();
    thread::Builder::new()
        .name("resotrack-persist".into())
        .spawn(move || persist_loop(runs_dir, persist_rx))?;

    let tx = telemetry.clone();
    let (profile, tick) = (cfg.profile, cfg.tick);
    let loop_thread = thread::Builder::new()
        .name("resotrack-control".into())
        .spawn(move || control_loop(session, profile, tick, control_rx, tx, persist_tx))?;

    let state = AppState {
        control: control.clone(),
        telemetry,
        control_busy: Arc::new(AtomicBool::new(false)),
    };
    let app = Router::new()
        .route("/control", get(control_ws))
        .route("/telemetry", get(telemetry_ws))
        .with_state(state);
    let (stop_http, stop_rx) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stop_rx.await;
            })
            .await
    });
    tracing::info!(%addr, ?profile, "serving");
    Ok(RunningServer {
        addr,
        control,
        stop_http: Some(stop_http),
        http,
        loop_thread: Some(loop_thread),
    })
}

fn control_loop(
    mut session: Session,
    profile: Profile,
    tick: Duration,
    rx: mpsc::Receiver<ControlMsg>,
    telemetry: broadcast::Sender<Arc<str>>,
    persist: mpsc::Sender<PersistJob>,
) {
    let mut pacer = Pacer::new(profile);
    let mut clock = Instant::now();
    let publish = |lines: Vec<String>| {
        for l in lines {
            let _ = telemetry.send(Arc::from(l));
        }
    };
    loop {
        let mut next = match rx.recv_timeout(tick) {
            Ok(m) => Some(m),
            Err(mpsc::RecvTimeoutError::Timeout) => None,
            Err(mpsc::RecvTimeoutError::Disconnected) => return,
        };
        while let Some(msg) = next {
            let ControlMsg::Line { text, reply } = msg else {
                return;
            };
            match Request::decode(&text) {
                Err((id, e)) => {
                    let _ = reply.send(Reply::err(id, e.to_string()).encode());
                }
                Ok(req) => {
                    let id = req.id;
                    let handled = session.handle(req);
                    publish(handled.lines);
                    if handled.restart_clock {
                        pacer.reset();
                        clock = Instant::now();
                    }
                    if let Some(r) = handled.reply {
                        let _ = reply.send(r.encode());
                    }
                    if let Some(snapshot) = handled.persist {
                        let job = PersistJob {
                            id,
                            snapshot,
                            reply: reply.clone(),
                        };
                        if persist.send(job).is_err() {
                            let _ = reply.send(Reply::err(id, "persistence writer is gone").encode());
                        }
                    }
                }
            }
            next = match rx.try_recv() {
                Ok(m) => Some(m),
                Err(mpsc::TryRecvError::Empty) => None,
                Err(mpsc::TryRecvError::Disconnected) => return,
            };
        }
        let due = pacer.take(clock.elapsed()) as usize;
        if due > 0 {
            publish(session.advance(due));
        }
    }
}

fn persist_loop(runs_dir: PathBuf, rx: mpsc::Receiver<PersistJob>) {
    let mut names: HashMap<u64, String> = HashMap::new();
    while let Ok(job) = rx.recv() {
        let name = names
            .entry(job.snapshot.id)
            .or_insert_with(|| {
                let ms = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis())
                    .unwrap_or(0);
                persist::run_dir_name(ms, job.snapshot.seed)
            })
            .clone();
        let reply = match persist::persist_run(&runs_dir, &name, &job.snapshot) {
            Ok(dir) => Reply::ok(
                job.id,
                serde_json::json!({ "run_dir": dir.display().to_string(), "points": job.snapshot.samples.len() }),
            ),
            Err(e) => Reply::err(job.id, format!("persist failed: {e}")),
        };
        let _ = job.reply.send(reply.encode());
    }
}

struct BusyGuard(Arc<AtomicBool>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn control_ws(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    if state.control_busy.swap(true, Ordering::SeqCst) {
        return (StatusCode::CONFLICT, "a control client is already connected").into_response();
    }
    let guard = BusyGuard(state.control_busy.clone());
    ws.on_upgrade(move |socket| async move {
        let _guard = guard;
        control_session(socket, state.control).await;
    })
}

async fn control_session(socket: WebSocket, control: mpsc::Sender<ControlMsg>) {
    let (mut sink, mut stream) = socket.split();
    let (reply_tx, mut reply_rx) = tmpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(line) = reply_rx.recv().await {
            if sink.send(Message::Text(line.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let sent = control.send(ControlMsg::Line {
                text: line.to_string(),
                reply: reply_tx.clone(),
            });
            if sent.is_err() {
                return;
            }
        }
    }
    drop(reply_tx);
    let _ = writer.await;
}

async fn telemetry_ws(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    let rx = state.telemetry.subscribe();
    ws.on_upgrade(move |socket| telemetry_session(socket, rx))
}

async fn telemetry_session(socket: WebSocket, mut rx: broadcast::Receiver<Arc<str>>) {
    let (mut sink, mut stream) = socket.split();
    let closed = async move {
        while let Some(Ok(m)) = stream.next().await {
            if matches!(m, Message::Close(_)) {
                break;
            }
        }
    };
    let forward = async move {
        loop {
            match rx.recv().await {
                Ok(line) => {
                    if sink.send(Message::Text(line.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(lost = n, "telemetry subscriber lagging");
                }
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    };
    tokio::select! {
        _ = closed => {}
        _ = forward => {}
    }
}

/// Runs until Ctrl-C.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServeError> {
    let server = start(cfg).await?;
    tokio::signal::ctrl_c().await?;
    server.shutdown().await;
    Ok(())
}
