//! WebSocket transport for a [`Session`].
//!
//! Three kinds of thread cooperate, and they share no state except the
//! outbound queue:
//!
//! * the driver (the caller of [`serve`]) owns the session, so it owns both
//!   the model and the label store;
//! * an acceptor hands new connections to the driver;
//! * one connection thread per client forwards incoming text frames to the
//!   driver and drains that client's [`Outbox`].
//!
//! While an update runs the driver takes every pending client message before
//! each step, so input is never blocked by training.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::session::Session;
use crate::wire::ServerMessage;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("server i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Queued messages per client before snapshots start being dropped.
    pub outbox_capacity: usize,
    /// How often idle threads check for shutdown.
    pub poll: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            outbox_capacity: 256,
            poll: Duration::from_millis(5),
        }
    }
}

/// Binds a listener; an address already in use is an error here.
pub fn bind(addr: impl ToSocketAddrs + std::fmt::Display) -> Result<TcpListener, ServerError> {
    let shown = addr.to_string();
    TcpListener::bind(addr).map_err(|source| ServerError::Bind { addr: shown, source })
}

#[derive(Debug, Default)]
struct OutboxInner {
    items: VecDeque<(String, bool)>,
    closed: bool,
    dropped: u64,
}

/// Bounded per-client queue that sheds the oldest plain training snapshot
/// when full. Snapshots that change labels, end an update or resync a client
/// are never shed, nor is anything that is not a snapshot.
#[derive(Debug)]
pub struct Outbox {
    inner: Mutex<OutboxInner>,
    capacity: usize,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(OutboxInner::default()),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, msg: &ServerMessage) {
        let droppable = msg.as_snapshot().is_some_and(|s| s.is_droppable());
        let mut q = self.inner.lock().expect("outbox lock");
        if q.closed {
            return;
        }
        if q.items.len() >= self.capacity {
            if let Some(at) = q.items.iter().position(|(_, d)| *d) {
                q.items.remove(at);
                q.dropped += 1;
            }
        }
        q.items.push_back((msg.to_json(), droppable));
    }

    pub fn pop(&self) -> Option<String> {
        self.inner
            .lock()
            .expect("outbox lock")
            .items
            .pop_front()
            .map(|(s, _)| s)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("outbox lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshots shed so far.
    pub fn dropped(&self) -> u64 {
        self.inner.lock().expect("outbox lock").dropped
    }

    /// No further pushes; the connection closes once the queue drains.
    pub fn close(&self) {
        self.inner.lock().expect("outbox lock").closed = true;
    }

    fn is_finished(&self) -> bool {
        let q = self.inner.lock().expect("outbox lock");
        q.closed && q.items.is_empty()
    }
}

enum Event {
    Connected(u64, Arc<Outbox>, JoinHandle<()>),
    Text(u64, String),
    Disconnected(u64),
}

struct Client {
    id: u64,
    outbox: Arc<Outbox>,
    thread: JoinHandle<()>,
}

/// Runs `session` until `shutdown` is set, then flushes a final snapshot to
/// the connected client and returns the session.
///
/// `greeting` is sent to the first client instead of a resync, normally the
/// hello and initial snapshot returned by [`Session::open`].
pub fn serve(
    listener: TcpListener,
    mut session: Session,
    greeting: Vec<ServerMessage>,
    shutdown: Arc<AtomicBool>,
    config: ServerConfig,
) -> Result<Session, ServerError> {
    listener.set_nonblocking(true)?;
    let (tx, rx) = mpsc::channel();
    let acceptor = {
        let shutdown = shutdown.clone();
        let config = config.clone();
        thread::spawn(move || accept_loop(listener, tx, shutdown, config))
    };

    let mut greeting = Some(greeting);
    let mut client: Option<Client> = None;
    let mut retired: Vec<JoinHandle<()>> = Vec::new();

    while !shutdown.load(Ordering::SeqCst) {
        let event = if session.is_stepping() {
            rx.try_recv().ok()
        } else {
            match rx.recv_timeout(config.poll * 4) {
                Ok(e) => Some(e),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        };
        match event {
            Some(Event::Connected(id, outbox, thread)) => {
                if let Some(old) = client.take() {
                    old.outbox.close();
                    retired.push(old.thread);
                }
                let hello = greeting.take().unwrap_or_else(|| session.resync());
                for m in &hello {
                    outbox.push(m);
                }
                client = Some(Client { id, outbox, thread });
                continue;
            }
            Some(Event::Text(id, text)) => {
                dispatch(&client, id, session.handle_text(&text));
                continue;
            }
            Some(Event::Disconnected(id)) => {
                if client.as_ref().is_some_and(|c| c.id == id) {
                    if let Some(c) = client.take() {
                        retired.push(c.thread);
                    }
                }
                continue;
            }
            None => {}
        }
        if session.is_stepping() {
            let out = session.step();
            if let Some(c) = &client {
                for m in &out {
                    c.outbox.push(m);
                }
            }
        }
    }

    if let Some(c) = client.take() {
        c.outbox.push(&session.shutdown_snapshot());
        c.outbox.close();
        let _ = c.thread.join();
    }
    let _ = acceptor.join();
    for t in retired {
        let _ = t.join();
    }
    // Connections accepted after shutdown started were never adopted.
    while let Ok(e) = rx.try_recv() {
        if let Event::Connected(_, outbox, thread) = e {
            outbox.close();
            let _ = thread.join();
        }
    }
    Ok(session)
}

fn dispatch(client: &Option<Client>, from: u64, out: Vec<ServerMessage>) {
    if let Some(c) = client.as_ref().filter(|c| c.id == from) {
        for m in &out {
            c.outbox.push(m);
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, shutdown: Arc<AtomicBool>, config: ServerConfig) {
    let mut next_id = 0;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                let id = next_id;
                let outbox = Arc::new(Outbox::new(config.outbox_capacity));
                let ws = match handshake(stream) {
                    Ok(ws) => ws,
                    Err(_) => continue,
                };
                // The connection only starts reading once the driver has seen
                // `Connected`, so its first message cannot overtake it.
                let (go_tx, go_rx) = mpsc::channel::<()>();
                let thread = {
                    let (tx, outbox, poll) = (tx.clone(), outbox.clone(), config.poll);
                    thread::spawn(move || {
                        if go_rx.recv().is_ok() {
                            connection_loop(id, peer, ws, tx, outbox, poll);
                        }
                    })
                };
                if tx.send(Event::Connected(id, outbox, thread)).is_err() {
                    return;
                }
                let _ = go_tx.send(());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(config.poll),
            Err(_) => thread::sleep(config.poll),
        }
    }
}

fn handshake(stream: TcpStream) -> io::Result<WebSocket<TcpStream>> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))
}

fn connection_loop(
    id: u64,
    _peer: SocketAddr,
    mut ws: WebSocket<TcpStream>,
    tx: Sender<Event>,
    outbox: Arc<Outbox>,
    poll: Duration,
) {
    if ws.get_ref().set_read_timeout(Some(poll)).is_err() {
        let _ = tx.send(Event::Disconnected(id));
        return;
    }
    'conn: loop {
        while let Some(text) = outbox.pop() {
            if ws.send(Message::text(text)).is_err() {
                break 'conn;
            }
        }
        if outbox.is_finished() {
            let _ = ws.close(None);
            let _ = ws.flush();
            break;
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if tx.send(Event::Text(id, t.as_str().to_owned())).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    let _ = tx.send(Event::Disconnected(id));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Snapshot;
    use crate::wire::{SnapshotMessage, SnapshotReason};

    fn snap(iteration: u64, reason: SnapshotReason, labels_changed: bool) -> ServerMessage {
        let s = Snapshot {
            iteration,
            positions: vec![[0.0; 3]],
            label_state: vec![None],
            losses: Default::default(),
        };
        ServerMessage::Snapshot(SnapshotMessage::from_snapshot(&s, reason, labels_changed))
    }

    fn iteration_of(text: &str) -> (String, Option<u64>) {
        let m = ServerMessage::from_json(text).unwrap();
        match m {
            ServerMessage::Snapshot(s) => (format!("{:?}", s.reason), Some(s.iteration)),
            ServerMessage::Hello { .. } => ("hello".into(), None),
            _ => ("other".into(), None),
        }
    }

    #[test]
    fn outbox_sheds_oldest_plain_step_snapshot() {
        let o = Outbox::new(3);
        o.push(&snap(1, SnapshotReason::Step, true));
        o.push(&snap(2, SnapshotReason::Step, false));
        o.push(&snap(3, SnapshotReason::Step, false));
        o.push(&snap(4, SnapshotReason::Final, false));
        assert_eq!(o.dropped(), 1);
        let left: Vec<_> = std::iter::from_fn(|| o.pop())
            .map(|t| iteration_of(&t).1.unwrap())
            .collect();
        assert_eq!(left, vec![1, 3, 4]);
    }

    #[test]
    fn outbox_never_sheds_essential_messages() {
        let o = Outbox::new(2);
        o.push(&snap(0, SnapshotReason::Initial, false));
        o.push(&snap(1, SnapshotReason::Step, true));
        o.push(&snap(2, SnapshotReason::Final, false));
        o.push(&ServerMessage::error(crate::wire::ErrorCode::Busy, "x"));
        assert_eq!(o.len(), 4);
        assert_eq!(o.dropped(), 0);
        o.close();
        o.push(&snap(3, SnapshotReason::Step, false));
        assert_eq!(o.len(), 4);
    }

    #[test]
    fn port_in_use_is_a_bind_error() {
        let held = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = held.local_addr().unwrap();
        let err = bind(addr).unwrap_err();
        assert!(matches!(err, ServerError::Bind { .. }));
        assert!(err.to_string().contains(&addr.port().to_string()));
    }
}
