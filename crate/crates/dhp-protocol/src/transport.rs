//! Message transport: one calling contract, two carriers.
//!
//! Protocol logic only ever sees [`Endpoint`]. The in-process endpoint
//! dispatches straight into a handler and is what the fast tests and the
//! CLI use; the TCP endpoint speaks length-prefixed JSON over a socket.
//! Both record caller-side transcripts, so the same flow leaves the same
//! trace regardless of carrier.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crate::message::{Envelope, ProtocolError};
use crate::metering::RoleMeter;
use crate::transcript::{Role, Transcript};

/// Anything that can answer an envelope. Server nodes implement this.
pub trait Handler: Send + Sync {
    fn handle(&self, envelope: Envelope) -> Envelope;
}

/// A directed channel from one role to another. `call` is a full round
/// trip: the request and its reply both land in the transcript.
pub trait Endpoint: Send + Sync {
    fn call(&self, envelope: Envelope) -> Result<Envelope, ProtocolError>;
    fn peer_role(&self) -> Role;
}

/// Direct dispatch into an in-process handler.
pub struct InProcEndpoint {
    pub handler: Arc<dyn Handler>,
    pub from: Role,
    pub to: Role,
    pub transcript: Transcript,
    /// Attributes the handler's group operations to the callee role.
    pub meter: Option<RoleMeter>,
}

impl Endpoint for InProcEndpoint {
    fn call(&self, envelope: Envelope) -> Result<Envelope, ProtocolError> {
        self.transcript.record(self.from, self.to, &envelope);
        let reply = match &self.meter {
            Some(meter) => {
                let _g = meter.guard(self.to);
                self.handler.handle(envelope)
            }
            None => self.handler.handle(envelope),
        };
        self.transcript.record(self.to, self.from, &reply);
        Ok(reply)
    }

    fn peer_role(&self) -> Role {
        self.to
    }
}

pub fn write_frame(w: &mut impl Write, envelope: &Envelope) -> std::io::Result<()> {
    let body = envelope.to_wire();
    let len = u32::try_from(body.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large")
    })?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Read one frame; `Ok(None)` on a clean end-of-stream before any bytes.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Envelope>> {
    let mut len_bytes = [0u8; 4];
    match r.read_exact(&mut len_bytes) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "frame exceeds limit",
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Envelope::from_wire(&body)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// Generous for a protocol whose largest message is a few hundred bytes.
const MAX_FRAME: usize = 1 << 20;

/// One connection per call: connect, send, await the reply.
pub struct TcpEndpoint {
    pub addr: String,
    pub from: Role,
    pub to: Role,
    pub transcript: Transcript,
}

impl Endpoint for TcpEndpoint {
    fn call(&self, envelope: Envelope) -> Result<Envelope, ProtocolError> {
        self.transcript.record(self.from, self.to, &envelope);
        let reply = self.round_trip(&envelope).map_err(|e| {
            ProtocolError::Transport(format!("{} -> {}: {e}", self.from, self.addr))
        })?;
        self.transcript.record(self.to, self.from, &reply);
        Ok(reply)
    }

    fn peer_role(&self) -> Role {
        self.to
    }
}

impl TcpEndpoint {
    fn round_trip(&self, envelope: &Envelope) -> std::io::Result<Envelope> {
        let mut stream = TcpStream::connect(&self.addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        write_frame(&mut stream, envelope)?;
        read_frame(&mut stream)?.ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed")
        })
    }
}

/// A running TCP listener in front of a handler.
pub struct TcpServer {
    pub addr: String,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl TcpServer {
    /// Bind an ephemeral local port and serve until shutdown.
    pub fn spawn(handler: Arc<dyn Handler>) -> std::io::Result<TcpServer> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        listener.set_nonblocking(true)?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let accept_thread = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let handler = handler.clone();
                        std::thread::spawn(move || serve_connection(stream, handler));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(TcpServer { addr, shutdown, accept_thread: Some(accept_thread) })
    }

    pub fn shutdown(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, handler: Arc<dyn Handler>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    while let Ok(Some(request)) = read_frame(&mut stream) {
        let reply = handler.handle(request);
        if write_frame(&mut stream, &reply).is_err() {
            break;
        }
    }
}
