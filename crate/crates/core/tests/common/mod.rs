//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use latentcloud::dataset::Dataset;
use latentcloud::model::Vec3;
use latentcloud::server::{self, ServerConfig};
use latentcloud::session::{Session, SessionConfig};
use latentcloud::trainer::TrainConfig;
use latentcloud::wire::{ClientMessage, ServerMessage, SnapshotMessage, SnapshotReason};
use tungstenite::{Message, WebSocket};

pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub label: usize,
}

impl Sphere {
    pub fn to_json_line(&self, after_snapshot: u64) -> String {
        let c = self.center;
        format!(
            "{{\"after_snapshot\":{after_snapshot},\"type\":\"annotate\",\"center\":[{},{},{}],\"radius\":{},\"label\":{}}}\n",
            c[0], c[1], c[2], self.radius, self.label
        )
    }
}

/// One sphere per class, centred on the class's latent centroid, enclosing
/// the closest `fraction` of its members.
pub fn blob_spheres(positions: &[Vec3], truth: &[usize], classes: usize, fraction: f64) -> Vec<Sphere> {
    (0..classes)
        .map(|c| {
            let members: Vec<Vec3> = (0..positions.len())
                .filter(|&i| truth[i] == c)
                .map(|i| positions[i])
                .collect();
            let mut center = [0.0; 3];
            for p in &members {
                for k in 0..3 {
                    center[k] += p[k] / members.len() as f64;
                }
            }
            let mut d: Vec<f64> = members
                .iter()
                .map(|p| (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            Sphere {
                center,
                radius: d[(fraction * d.len() as f64) as usize],
                label: c,
            }
        })
        .collect()
}

pub struct WsClient {
    ws: WebSocket<TcpStream>,
}

impl WsClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, String> {
        let stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
        stream
            .set_read_timeout(Some(Duration::from_secs(30)))
            .map_err(|e| e.to_string())?;
        let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).map_err(|e| e.to_string())?;
        Ok(Self { ws })
    }

    pub fn send(&mut self, m: &ClientMessage) -> Result<(), String> {
        self.send_text(&m.to_json())
    }

    pub fn send_text(&mut self, text: &str) -> Result<(), String> {
        self.ws.send(Message::text(text)).map_err(|e| e.to_string())
    }

    pub fn recv(&mut self) -> Result<ServerMessage, String> {
        loop {
            match self.ws.read().map_err(|e| e.to_string())? {
                Message::Text(t) => return ServerMessage::from_json(t.as_str()).map_err(|e| e.to_string()),
                Message::Close(_) => return Err("connection closed".into()),
                _ => {}
            }
        }
    }

    pub fn recv_snapshot(&mut self) -> Result<SnapshotMessage, String> {
        match self.recv()? {
            ServerMessage::Snapshot(s) => Ok(s),
            other => Err(format!("expected a snapshot, got {other:?}")),
        }
    }

    /// Reads until a message matches `pred`.
    pub fn recv_until(&mut self, pred: impl Fn(&ServerMessage) -> bool) -> Result<Vec<ServerMessage>, String> {
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
}

pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: JoinHandle<Session>,
}

impl RunningServer {
    /// Requests shutdown and returns the snapshot flushed to `client`.
    pub fn stop(self, client: &mut WsClient) -> Result<SnapshotMessage, String> {
        self.shutdown.store(true, Ordering::SeqCst);
        let seen = client.recv_until(|m| m.as_snapshot().is_some_and(|s| s.reason == SnapshotReason::Shutdown))?;
        self.handle.join().map_err(|_| "server thread panicked")?;
        Ok(seen.last().and_then(|m| m.as_snapshot()).cloned().unwrap())
    }

    pub fn stop_detached(self) -> Session {
        self.shutdown.store(true, Ordering::SeqCst);
        self.handle.join().expect("server thread")
    }
}

pub fn session_config(hidden: usize) -> SessionConfig {
    SessionConfig {
        train: TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            encoder_hidden: hidden,
            decoder_hidden: hidden,
            seed: 2,
            ..Default::default()
        },
        auto_update: false,
    }
}

pub fn spawn_server(ds: Dataset, hidden: usize) -> Result<RunningServer, String> {
    spawn_server_with(ds, session_config(hidden), ServerConfig::default())
}

pub fn spawn_server_with(
    ds: Dataset,
    config: SessionConfig,
    server_config: ServerConfig,
) -> Result<RunningServer, String> {
    let params = config.train.init_params(&ds).map_err(|e| e.to_string())?;
    let listener = server::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let (session, greeting) = Session::open(ds, params, config).map_err(|e| e.to_string())?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    let handle =
        thread::spawn(move || server::serve(listener, session, greeting, flag, server_config).expect("server runs"));
    Ok(RunningServer { addr, shutdown, handle })
}

pub fn wait_for(mut cond: impl FnMut() -> bool, timeout: Duration) -> bool {
    let t = Instant::now();
    while t.elapsed() < timeout {
        if cond() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    false
}
