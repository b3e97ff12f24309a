//! Applet-to-verifier frame delivery, in process or over loopback TCP.

use std::net::TcpListener;
use std::sync::Arc;

use devintegrity::verifier::{spawn_server, TcpClient, VerifierService};
use devintegrity::wire::{Frame, MsgType};

use crate::{Result, SimError};

pub trait Transport {
    fn verifier_count(&self) -> usize;
    fn verifier_id(&self, index: usize) -> &str;
    /// One request frame to verifier `index`, one response frame back.
    fn exchange(&mut self, index: usize, request: &Frame) -> Result<Frame>;
}

/// Turns an ERROR frame (or any unexpected reply) into [`SimError::Remote`].
pub fn remote_error(frame: &Frame) -> SimError {
    if frame.msg_type != MsgType::Error {
        return SimError::Remote {
            class: "UnexpectedReply".into(),
            detail: format!("{:?}", frame.msg_type),
        };
    }
    let text = String::from_utf8_lossy(&frame.payload);
    let (class, detail) = text.split_once(':').unwrap_or((&text, ""));
    SimError::Remote {
        class: class.trim().to_owned(),
        detail: detail.trim().to_owned(),
    }
}

pub struct InProcess {
    ids: Vec<String>,
    services: Vec<Arc<VerifierService>>,
}

impl InProcess {
    pub fn new(services: Vec<(String, Arc<VerifierService>)>) -> Self {
        let (ids, services) = services.into_iter().unzip();
        InProcess { ids, services }
    }
}

impl Transport for InProcess {
    fn verifier_count(&self) -> usize {
        self.services.len()
    }

    fn verifier_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn exchange(&mut self, index: usize, request: &Frame) -> Result<Frame> {
        // Round-trip through the byte encoding so both transports exercise
        // the codec.
        let bytes = request.encode();
        let decoded = Frame::decode(&bytes)?;
        let reply = self.services[index].handle_frame(&decoded);
        Ok(Frame::decode(&reply.encode())?)
    }
}

/// Each service behind its own loopback listener.
pub struct Tcp {
    ids: Vec<String>,
    clients: Vec<TcpClient>,
}

impl Tcp {
    pub fn start(services: Vec<(String, Arc<VerifierService>)>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut clients = Vec::new();
        for (id, svc) in services {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let server = spawn_server(listener, svc)?;
            clients.push(TcpClient::connect(server.local_addr())?);
            ids.push(id);
        }
        Ok(Tcp { ids, clients })
    }
}

impl Transport for Tcp {
    fn verifier_count(&self) -> usize {
        self.clients.len()
    }

    fn verifier_id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn exchange(&mut self, index: usize, request: &Frame) -> Result<Frame> {
        Ok(self.clients[index].exchange(request)?)
    }
}
