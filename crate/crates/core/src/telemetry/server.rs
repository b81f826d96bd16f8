//! Websocket service: fans frames out to consoles and feeds their commands
//! into the controller inbox.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use super::frame::{decode_command, encode_frame, Frame, FrameBody, Rejected};
use super::{OutQueue, QUEUE_LIMIT};
use crate::command::Command;

const POLL: Duration = Duration::from_millis(20);

struct Conn {
    queue: Mutex<OutQueue>,
    ready: Condvar,
    closed: AtomicBool,
}

/// Connected subscribers, each with its own outbound queue.
#[derive(Default)]
pub struct Hub {
    conns: Mutex<Vec<Arc<Conn>>>,
}

impl Hub {
    pub fn broadcast(&self, frames: &[Frame]) {
        if frames.is_empty() {
            return;
        }
        let mut conns = self.conns.lock().expect("hub lock");
        conns.retain(|c| !c.closed.load(Ordering::Acquire));
        for c in conns.iter() {
            let mut q = c.queue.lock().expect("queue lock");
            for f in frames {
                q.push(f.clone());
            }
            c.ready.notify_one();
        }
    }

    pub fn connections(&self) -> usize {
        self.conns
            .lock()
            .expect("hub lock")
            .iter()
            .filter(|c| !c.closed.load(Ordering::Acquire))
            .count()
    }

    fn register(&self) -> Arc<Conn> {
        let c = Arc::new(Conn {
            queue: Mutex::new(OutQueue::new(QUEUE_LIMIT)),
            ready: Condvar::new(),
            closed: AtomicBool::new(false),
        });
        self.conns.lock().expect("hub lock").push(c.clone());
        c
    }
}

pub struct Server {
    pub hub: Arc<Hub>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Listens on `addr`; decoded commands go to `inbox`.
    pub fn start(
        addr: &str,
        inbox: Sender<Result<Command, Rejected>>,
    ) -> std::io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let hub = Arc::new(Hub::default());
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let hub = hub.clone();
            let stop = stop.clone();
            std::thread::spawn(move || accept_loop(listener, hub, inbox, stop))
        };
        log::info!("telemetry listening on ws://{addr}");
        Ok(Server {
            hub,
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    hub: Arc<Hub>,
    inbox: Sender<Result<Command, Rejected>>,
    stop: Arc<AtomicBool>,
) {
    let mut workers = Vec::new();
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("console connected from {peer}");
                let conn = hub.register();
                let inbox = inbox.clone();
                let stop = stop.clone();
                workers.push(std::thread::spawn(move || {
                    if let Err(e) = serve_conn(stream, &conn, &inbox, &stop) {
                        log::debug!("connection {peer} ended: {e}");
                    }
                    conn.closed.store(true, Ordering::Release);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(POLL);
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn serve_conn(
    stream: TcpStream,
    conn: &Conn,
    inbox: &Sender<Result<Command, Rejected>>,
    stop: &AtomicBool,
) -> Result<(), Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream)?;
    ws.get_ref().set_read_timeout(Some(POLL))?;

    while !stop.load(Ordering::Acquire) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    match decode_command(line.as_bytes()) {
                        Ok(cmd) => {
                            if inbox.send(Ok(cmd)).is_err() {
                                return Ok(());
                            }
                        }
                        Err(rej) => {
                            let ack = Frame {
                                seq: 0,
                                sim_time: 0.0,
                                body: FrameBody::Ack {
                                    command_id: rej.id,
                                    accepted: false,
                                    reason: Some(rej.reason),
                                    response_s: None,
                                },
                            };
                            conn.queue.lock().expect("queue lock").push(ack);
                        }
                    }
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed) => break,
            Err(e) => return Err(e.into()),
        }

        let frames = {
            let mut q = conn.queue.lock().expect("queue lock");
            if q.is_empty() {
                let (guard, _) = conn.ready.wait_timeout(q, POLL).expect("queue lock");
                q = guard;
            }
            q.take()
        };
        if !frames.is_empty() {
            let mut text = String::new();
            for f in &frames {
                text.push_str(std::str::from_utf8(&encode_frame(f)?)?);
            }
            ws.send(Message::text(text))?;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
