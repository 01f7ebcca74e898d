use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use resotrack_core::plant::PlantConfig;
use resotrack_service::protocol::{Command, Decoded, Event, Mode, Reply, Request, StreamDecoder};
use resotrack_service::{start, Profile, RunningServer, ServerConfig, SessionConfig};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const WAIT: Duration = Duration::from_secs(20);

async fn server(profile: Profile, runs: &std::path::Path) -> RunningServer {
    let mut cfg = ServerConfig::new("127.0.0.1:0".parse().unwrap(), SessionConfig::new(PlantConfig::ideal()));
    cfg.profile = profile;
    cfg.runs_dir = runs.to_path_buf();
    start(cfg).await.unwrap()
}

async fn connect(srv: &RunningServer, path: &str) -> Ws {
    connect_async(format!("ws://{}{path}", srv.local_addr())).await.unwrap().0
}

async fn next_text(ws: &mut Ws) -> String {
    loop {
        let msg = tokio::time::timeout(WAIT, ws.next())
            .await
            .expect("timed out waiting for a message")
            .expect("socket closed")
            .unwrap();
        if let Message::Text(t) = msg {
            return t.to_string();
        }
    }
}

async fn call(ws: &mut Ws, line: &str) -> Reply {
    ws.send(Message::text(line)).await.unwrap();
    Reply::decode(&next_text(ws).await).unwrap()
}

async fn send(ws: &mut Ws, id: u64, c: Command) -> Reply {
    call(ws, &Request::new(id, c).encode()).await
}

/// Reads telemetry until `n` track samples arrived; returns (decoded items, arrival times).
async fn collect_track(tel: &mut Ws, n: usize) -> Vec<(Instant, Decoded)> {
    let mut dec = StreamDecoder::new();
    let mut out = Vec::new();
    let mut samples = 0;
    while samples < n {
        let text = next_text(tel).await;
        let now = Instant::now();
        for d in dec.feed(text.as_bytes()) {
            if let Decoded::Frame(f) = &d {
                if f.mode == Mode::Track {
                    samples += f.samples.len();
                }
            }
            out.push((now, d));
        }
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn track_snapshot_stop_over_websocket() {
    let runs = tempfile::tempdir().unwrap();
    let srv = server(Profile::Bench, runs.path()).await;
    let mut tel = connect(&srv, "/telemetry").await;
    let mut ctl = connect(&srv, "/control").await;

    let r = send(&mut ctl, 1, Command::StartTrack).await;
    assert!(r.ok, "{r:?}");
    assert_eq!(r.id, Some(1));
    let v0 = r.result.unwrap()["calibration"]["v0"].as_f64().unwrap();
    assert!((v0 - 1.6).abs() < 2e-3, "v0 {v0}");

    let items = collect_track(&mut tel, 900).await;
    let kinds: Vec<&Decoded> = items.iter().map(|(_, d)| d).collect();
    assert!(matches!(kinds[0], Decoded::Event(Event::Calibration { .. })));
    assert!(matches!(kinds[1], Decoded::Event(Event::Mode { mode: Mode::Track })));
    assert!(!kinds.iter().any(|d| matches!(d, Decoded::Gap { .. } | Decoded::Resync { .. })));
    let mut count = 0;
    for d in &kinds {
        if let Decoded::Frame(f) = d {
            assert_eq!(f.has_marker(), count % 300 == 0, "marker at sample {count}");
            count += f.samples.len();
        }
    }

    let r = send(&mut ctl, 2, Command::Snapshot).await;
    assert!(r.ok, "{r:?}");
    let dir = std::path::PathBuf::from(r.result.unwrap()["run_dir"].as_str().unwrap());
    assert!(dir.starts_with(runs.path()));
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-seed0"));
    for f in ["config.json", "calibration.csv", "raw.csv", "filtered.csv", "report.csv"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    assert!(send(&mut ctl, 3, Command::Stop).await.ok);
    assert!(send(&mut ctl, 4, Command::Stop).await.ok);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn only_one_control_client() {
    let runs = tempfile::tempdir().unwrap();
    let srv = server(Profile::Bench, runs.path()).await;
    let first = connect(&srv, "/control").await;
    let err = connect_async(format!("ws://{}/control", srv.local_addr())).await.unwrap_err();
    match err {
        tokio_tungstenite::tungstenite::Error::Http(resp) => assert_eq!(resp.status().as_u16(), 409),
        other => panic!("expected HTTP 409, got {other:?}"),
    }
    // Telemetry subscribers are not limited.
    let _t1 = connect(&srv, "/telemetry").await;
    let _t2 = connect(&srv, "/telemetry").await;

    drop(first);
    let deadline = Instant::now() + WAIT;
    loop {
        match connect_async(format!("ws://{}/control", srv.local_addr())).await {
            Ok(_) => break,
            Err(_) if Instant::now() < deadline => tokio::time::sleep(Duration::from_millis(20)).await,
            Err(e) => panic!("control slot never freed: {e}"),
        }
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_commands_get_error_replies() {
    let runs = tempfile::tempdir().unwrap();
    let srv = server(Profile::Bench, runs.path()).await;
    let mut ctl = connect(&srv, "/control").await;

    let r = call(&mut ctl, "this is not json").await;
    assert!(!r.ok);
    assert_eq!(r.id, None);

    let r = call(&mut ctl, r#"{"cmd":"warp_drive","id":5}"#).await;
    assert!(!r.ok);
    assert_eq!(r.id, Some(5));

    let r = call(&mut ctl, r#"{"cmd":"set_smooth","id":6}"#).await;
    assert!(!r.ok);
    assert_eq!(r.id, Some(6));

    let r = send(&mut ctl, 7, Command::Snapshot).await;
    assert!(!r.ok, "snapshot with no run must fail");

    let r = call(&mut ctl, r#"{"cmd":"set_smooth","on":true,"id":8}"#).await;
    assert!(r.ok, "{r:?}");
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn console_profile_pauses_between_blocks() {
    let runs = tempfile::tempdir().unwrap();
    let srv = server(Profile::Console, runs.path()).await;
    let mut tel = connect(&srv, "/telemetry").await;
    let mut ctl = connect(&srv, "/control").await;
    assert!(send(&mut ctl, 1, Command::StartTrack).await.ok);

    let items = collect_track(&mut tel, 1500).await;
    let frames: Vec<(Instant, usize, bool)> = items
        .iter()
        .filter_map(|(t, d)| match d {
            Decoded::Frame(f) => Some((*t, f.samples.len(), f.has_marker())),
            _ => None,
        })
        .collect();
    // Every pause of at least 60 ms sits just before a block start.
    let mut pauses = 0;
    for w in frames.windows(2) {
        if w[1].0 - w[0].0 >= Duration::from_millis(60) {
            assert!(w[1].2, "pause inside a block");
            pauses += 1;
        }
    }
    assert!(pauses >= 3, "saw {pauses} pauses");
    srv.shutdown().await;
}
