use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};

use super::protocol::{
    read_line, read_message, write_message, ClientRole, ControlCommand, ProtocolError,
    ProtocolMessage, PROTOCOL_VERSION,
};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);
const ACCEPT_POLL: Duration = Duration::from_millis(20);

/// Receives control commands from connected control clients.
pub trait ControlTarget: Send + Sync {
    /// Returns a `control_reply` or `stats` message.
    fn handle(&self, command: &ControlCommand) -> ProtocolMessage;
}

/// What a scheduler connection's reader thread forwards to the harness.
#[derive(Debug)]
pub enum Inbound {
    Message(ProtocolMessage),
    Malformed(String),
    Closed,
}

/// A remote scheduler that completed the handshake.
pub struct RemoteRegistration {
    pub scheduler_id: String,
    pub writer: TcpStream,
    pub inbox: Receiver<Inbound>,
}

/// TCP listener accepting scheduler and control connections.
pub struct Server {
    local_addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(
        endpoint: impl ToSocketAddrs,
        control: Option<Arc<dyn ControlTarget>>,
    ) -> io::Result<(Server, Receiver<RemoteRegistration>)> {
        let listener = TcpListener::bind(endpoint)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let stop = shutdown.clone();
        let accept = thread::Builder::new()
            .name("harness-accept".into())
            .spawn(move || accept_loop(listener, tx, control, stop))?;
        info!("listening for schedulers on {local_addr}");
        Ok((
            Server {
                local_addr,
                shutdown,
                accept: Some(accept),
            },
            rx,
        ))
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    registrations: Sender<RemoteRegistration>,
    control: Option<Arc<dyn ControlTarget>>,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection from {peer}");
                let tx = registrations.clone();
                let control = control.clone();
                let spawned = thread::Builder::new()
                    .name(format!("harness-conn-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, tx, control) {
                            debug!("connection {peer} ended: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    warn!("cannot spawn connection handler: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    registrations: Sender<RemoteRegistration>,
    control: Option<Arc<dyn ControlTarget>>,
) -> Result<(), ProtocolError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HELLO_TIMEOUT))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let hello = read_message(&mut reader);
    reader.get_ref().set_read_timeout(None)?;
    let (scheduler_id, role) = match hello {
        Ok(ProtocolMessage::Hello {
            scheduler_id,
            protocol_version,
            role,
        }) => {
            if protocol_version != PROTOCOL_VERSION {
                let reason = format!(
                    "unsupported protocol version {protocol_version}, server speaks {PROTOCOL_VERSION}"
                );
                write_message(&mut writer, &ProtocolMessage::Bye { reason: Some(reason) })?;
                return Ok(());
            }
            (scheduler_id, role)
        }
        Ok(other) => {
            let reason = format!("expected hello, got {}", other.type_name());
            write_message(&mut writer, &ProtocolMessage::Bye { reason: Some(reason) })?;
            return Ok(());
        }
        Err(e) => {
            let _ = write_message(
                &mut writer,
                &ProtocolMessage::Bye {
                    reason: Some(format!("bad hello: {e}")),
                },
            );
            return Err(e);
        }
    };
    match role {
        ClientRole::Scheduler => {
            let (tx, inbox) = mpsc::channel();
            let registration = RemoteRegistration {
                scheduler_id: scheduler_id.clone(),
                writer: writer.try_clone()?,
                inbox,
            };
            if registrations.send(registration).is_err() {
                write_message(
                    &mut writer,
                    &ProtocolMessage::Bye {
                        reason: Some("harness is not accepting schedulers".into()),
                    },
                )?;
                return Ok(());
            }
            info!("scheduler {scheduler_id} connected");
            forward_messages(reader, tx);
            Ok(())
        }
        ClientRole::Control => serve_control(reader, writer, control),
    }
}

fn forward_messages(mut reader: BufReader<TcpStream>, tx: Sender<Inbound>) {
    let mut buf = Vec::new();
    loop {
        let inbound = match read_line(&mut reader, &mut buf) {
            Ok(Some(())) => match ProtocolMessage::decode(&buf) {
                Ok(m) => Inbound::Message(m),
                Err(e) => Inbound::Malformed(e.to_string()),
            },
            Ok(None) => Inbound::Closed,
            Err(ProtocolError::LineTooLong) => Inbound::Malformed("line too long".into()),
            Err(_) => Inbound::Closed,
        };
        let closed = matches!(inbound, Inbound::Closed);
        if tx.send(inbound).is_err() || closed {
            return;
        }
    }
}

fn serve_control(
    mut reader: BufReader<TcpStream>,
    mut writer: TcpStream,
    control: Option<Arc<dyn ControlTarget>>,
) -> Result<(), ProtocolError> {
    loop {
        let reply = match read_message(&mut reader) {
            Ok(ProtocolMessage::Control { command }) => match &control {
                Some(c) => c.handle(&command),
                None => refusal("control is not available on this endpoint"),
            },
            Ok(ProtocolMessage::Bye { .. }) | Err(ProtocolError::Closed) => return Ok(()),
            Ok(other) => refusal(&format!("unexpected {} on a control connection", other.type_name())),
            Err(ProtocolError::Malformed(e)) => refusal(&format!("malformed message: {e}")),
            Err(e) => return Err(e),
        };
        writer.write_all(&reply.encode())?;
    }
}

fn refusal(detail: &str) -> ProtocolMessage {
    ProtocolMessage::ControlReply {
        ok: false,
        state: String::new(),
        detail: Some(detail.to_owned()),
    }
}
