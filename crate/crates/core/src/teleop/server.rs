//! TCP teleop service: one sim thread, one acceptor, a reader and a writer
//! thread per client, bounded channels in between.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::protocol::{hello_frame, parse_command, state_frame, ServerFrame};
use crate::modes::RequestSource;
use crate::session::{Command, CommandError, Session};

/// Frames queued per client before new ones are dropped for it.
const CLIENT_QUEUE: usize = 256;
/// Commands queued toward the sim thread.
const COMMAND_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("invalid serve option: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Sim seconds per wall second; non-positive or infinite runs unpaced.
    pub real_time_factor: f64,
    /// State frames per sim second.
    pub state_rate: f64,
    pub scenario: String,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 7878)),
            real_time_factor: 1.0,
            state_rate: 50.0,
            scenario: String::new(),
        }
    }
}

type ClientId = u64;

struct Client {
    id: ClientId,
    frames: SyncSender<Arc<str>>,
}

enum Inbound {
    Command(ClientId, Command),
}

/// Handle to a running server.
pub struct TeleopServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    sim_result: Arc<Mutex<Option<String>>>,
}

impl TeleopServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Flag that stops every thread when set.
    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }

    /// Waits for all threads. Returns the sim error, if the sim stopped on one.
    pub fn join(mut self) -> Option<String> {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.sim_result.lock().map(|g| g.clone()).unwrap_or(None)
    }
}

/// Binds and starts serving `session`.
pub fn serve_teleop(session: Session, opts: ServeOptions) -> Result<TeleopServer, ServeError> {
    if !(opts.state_rate > 0.0) {
        return Err(ServeError::Config("state_rate must be positive".into()));
    }
    let listener = TcpListener::bind(opts.addr).map_err(|source| ServeError::Bind {
        addr: opts.addr,
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| ServeError::Bind {
        addr: opts.addr,
        source,
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServeError::Bind { addr, source })?;

    let shutdown = Arc::new(AtomicBool::new(false));
    let sockets: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
    let (cmd_tx, cmd_rx) = mpsc::sync_channel::<Inbound>(COMMAND_QUEUE);
    let (join_tx, join_rx) = mpsc::channel::<Client>();
    let hello: Arc<str> =
        ServerFrame::Hello(hello_frame(&session, &opts.scenario, opts.state_rate))
            .to_line()
            .into();
    let sim_result = Arc::new(Mutex::new(None));

    let sim = {
        let shutdown = Arc::clone(&shutdown);
        let result = Arc::clone(&sim_result);
        let opts = opts.clone();
        thread::Builder::new()
            .name("sim".into())
            .spawn(move || {
                let err = sim_loop(session, &opts, cmd_rx, join_rx, &shutdown);
                if let Some(e) = &err {
                    log::error!("simulation stopped: {e}");
                }
                *result.lock().expect("sim result lock") = err;
                shutdown.store(true, Ordering::SeqCst);
            })
            .expect("spawn sim thread")
    };

    let acceptor = {
        let shutdown = Arc::clone(&shutdown);
        let sockets = Arc::clone(&sockets);
        thread::Builder::new()
            .name("acceptor".into())
            .spawn(move || accept_loop(listener, hello, cmd_tx, join_tx, sockets, &shutdown))
            .expect("spawn acceptor thread")
    };

    Ok(TeleopServer {
        addr,
        shutdown,
        threads: vec![sim, acceptor],
        sim_result,
    })
}

fn accept_loop(
    listener: TcpListener,
    hello: Arc<str>,
    cmd_tx: SyncSender<Inbound>,
    join_tx: mpsc::Sender<Client>,
    sockets: Arc<Mutex<Vec<TcpStream>>>,
    shutdown: &AtomicBool,
) {
    let next_id = AtomicU64::new(1);
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = next_id.fetch_add(1, Ordering::Relaxed);
                log::info!("client {id} connected from {peer}");
                if let Err(e) = stream.set_nonblocking(false) {
                    log::warn!("client {id}: {e}");
                    continue;
                }
                let (Ok(read_half), Ok(keep)) = (stream.try_clone(), stream.try_clone()) else {
                    continue;
                };
                sockets.lock().expect("socket list lock").push(keep);
                let (tx, rx) = mpsc::sync_channel::<Arc<str>>(CLIENT_QUEUE);
                let _ = tx.try_send(Arc::clone(&hello));
                if join_tx
                    .send(Client {
                        id,
                        frames: tx.clone(),
                    })
                    .is_err()
                {
                    break;
                }
                workers.push(thread::spawn(move || writer_loop(stream, rx)));
                let cmd_tx = cmd_tx.clone();
                workers.push(thread::spawn(move || {
                    reader_loop(id, read_half, cmd_tx, tx)
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
    // Unblock readers and writers.
    for s in sockets.lock().expect("socket list lock").iter() {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    drop(join_tx);
    for w in workers {
        let _ = w.join();
    }
}

fn writer_loop(mut stream: TcpStream, rx: Receiver<Arc<str>>) {
    for line in rx {
        if stream.write_all(line.as_bytes()).is_err() {
            break;
        }
    }
}

fn reader_loop(
    id: ClientId,
    stream: TcpStream,
    cmd_tx: SyncSender<Inbound>,
    reply: SyncSender<Arc<str>>,
) {
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let error = |message: String| {
            let _ = reply.try_send(ServerFrame::Error { message }.to_line().into());
        };
        match parse_command(&line) {
            Ok(cmd) => match cmd_tx.try_send(Inbound::Command(id, cmd)) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => error("command queue full; command dropped".into()),
                Err(TrySendError::Disconnected(_)) => break,
            },
            Err(message) => error(message),
        }
    }
    log::info!("client {id} disconnected");
}

fn sim_loop(
    mut session: Session,
    opts: &ServeOptions,
    commands: Receiver<Inbound>,
    joins: Receiver<Client>,
    shutdown: &AtomicBool,
) -> Option<String> {
    let dt = session.config.sim.dt;
    let frame_every = ((1.0 / (opts.state_rate * dt)).round() as u64).max(1);
    let paced = opts.real_time_factor.is_finite() && opts.real_time_factor > 0.0;
    let start = Instant::now();
    let start_time = session.time();
    let mut clients: Vec<Client> = Vec::new();
    let mut applied = 0u64;
    let mut last_command_time = None;

    while !shutdown.load(Ordering::SeqCst) {
        let tick = session.control_due();
        if tick && paced {
            let due =
                Duration::from_secs_f64((session.time() - start_time) / opts.real_time_factor);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        // A client joins before its reader starts, so draining joins after
        // the pause registers every client whose commands are queued.
        loop {
            match joins.try_recv() {
                Ok(c) => clients.push(c),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return None,
            }
        }
        if tick {
            // Commands land between control ticks, in arrival order.
            while let Ok(Inbound::Command(id, cmd)) = commands.try_recv() {
                let result = session.apply(&cmd, RequestSource::Operator);
                if result.is_ok() {
                    applied += 1;
                    last_command_time = Some(session.time());
                }
                let reply = match (&cmd, result) {
                    (Command::Transition { .. }, Ok(mode)) => Some(ServerFrame::TransitionResult {
                        ok: true,
                        mode,
                        reason: None,
                    }),
                    (Command::Transition { .. }, Err(CommandError::Rejected(e))) => {
                        Some(ServerFrame::TransitionResult {
                            ok: false,
                            mode: session.mode(),
                            reason: Some(e.to_string()),
                        })
                    }
                    (_, Err(e)) => Some(ServerFrame::Error {
                        message: e.to_string(),
                    }),
                    (_, Ok(_)) => None,
                };
                if let Some(frame) = reply {
                    let line: Arc<str> = frame.to_line().into();
                    if let Some(c) = clients.iter().find(|c| c.id == id) {
                        let _ = c.frames.try_send(line);
                    }
                }
            }
        }
        if session.steps().is_multiple_of(frame_every) {
            let line: Arc<str> =
                ServerFrame::State(state_frame(&session, applied, last_command_time))
                    .to_line()
                    .into();
            clients.retain(|c| {
                !matches!(
                    c.frames.try_send(Arc::clone(&line)),
                    Err(TrySendError::Disconnected(_))
                )
            });
        }
        if let Err(e) = session.advance() {
            let line: Arc<str> = ServerFrame::Error {
                message: format!("simulation stopped: {e}"),
            }
            .to_line()
            .into();
            for c in &clients {
                let _ = c.frames.try_send(Arc::clone(&line));
            }
            return Some(e.to_string());
        }
    }
    None
}
