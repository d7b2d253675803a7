use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::protocol::{codes, model_from_base64, read_frame, recv_message, send_message, write_frame, WireMessage};
use super::worker::{unexpected, Transport, Worker};
use crate::app_model::{ActionSpec, FunctionId, GuiState};
use crate::error::{Error, Result};
use crate::learner::{EpisodeSequence, ModelSnapshot};

/// A running TCP server. Dropping the handle stops accepting connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

/// Serves `worker` on `addr`, one thread per connection.
pub fn serve(worker: Arc<Worker>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let accept = thread::Builder::new()
        .name("worker-accept".into())
        .spawn(move || {
            while !stop_flag.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let w = worker.clone();
                        let _ = thread::Builder::new()
                            .name(format!("conn-{peer}"))
                            .spawn(move || {
                                if let Err(e) = handle_connection(&w, stream) {
                                    log::debug!("connection {peer} closed: {e}");
                                }
                            });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(2));
                    }
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        })?;
    Ok(ServerHandle {
        addr: local,
        stop,
        accept: Some(accept),
    })
}

fn handle_connection(worker: &Worker, stream: TcpStream) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = None;
    while let Some(frame) = read_frame(&mut reader)? {
        let resp = match serde_json::from_slice::<WireMessage>(&frame) {
            Ok(msg) => worker.handle(&mut session, msg),
            Err(e) => {
                let cid = serde_json::from_slice::<serde_json::Value>(&frame)
                    .ok()
                    .and_then(|v| v.get("cid").and_then(|c| c.as_u64()))
                    .unwrap_or(0);
                WireMessage::error(cid, codes::MALFORMED, e.to_string())
            }
        };
        write_frame(&mut writer, &serde_json::to_vec(&resp)?)?;
    }
    Ok(())
}

/// TCP client for a [`Worker`] served by [`serve`].
pub struct RemoteTransport {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_cid: u64,
}

impl RemoteTransport {
    pub fn connect(addr: impl ToSocketAddrs, session_id: &str, app_fingerprint: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut t = RemoteTransport {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            next_cid: 1,
        };
        t.request(|cid| WireMessage::Hello {
            cid,
            session_id: session_id.to_string(),
            app_fingerprint: app_fingerprint.to_string(),
        })?;
        Ok(t)
    }

    /// Sends one request and waits for its response.
    pub fn request(&mut self, build: impl FnOnce(u64) -> WireMessage) -> Result<WireMessage> {
        let cid = self.next_cid;
        self.next_cid += 1;
        send_message(&mut self.writer, &build(cid))?;
        let resp = recv_message(&mut self.reader)?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))?;
        if resp.cid() != cid {
            return Err(Error::Protocol(format!("cid {cid} answered as {}", resp.cid())));
        }
        resp.into_result()
    }
}

impl Transport for RemoteTransport {
    fn get_q(
        &mut self,
        state: &GuiState,
        candidates: &[ActionSpec],
        goal: FunctionId,
    ) -> Result<(Vec<f64>, usize)> {
        match self.request(|cid| WireMessage::GetQ {
            cid,
            state: state.clone(),
            candidates: candidates.to_vec(),
            goal,
        })? {
            WireMessage::GetQResp {
                q_values, chosen, ..
            } => Ok((q_values, chosen)),
            other => Err(unexpected(&other)),
        }
    }

    fn add_training_data(&mut self, sequence: &EpisodeSequence) -> Result<usize> {
        match self.request(|cid| WireMessage::AddTrainingData {
            cid,
            sequence: sequence.clone(),
        })? {
            WireMessage::Ack { accepted, .. } => Ok(accepted),
            other => Err(unexpected(&other)),
        }
    }

    fn get_model(&mut self, have_version: u64) -> Result<Option<Arc<ModelSnapshot>>> {
        match self.request(|cid| WireMessage::GetModel { cid, have_version })? {
            WireMessage::ModelBlob { bytes, .. } if bytes.is_empty() => Ok(None),
            WireMessage::ModelBlob { bytes, version, .. } => {
                let snap = model_from_base64(&bytes)?;
                if snap.version != version {
                    return Err(Error::Protocol(format!(
                        "blob version {} labelled {version}",
                        snap.version
                    )));
                }
                Ok(Some(Arc::new(snap)))
            }
            other => Err(unexpected(&other)),
        }
    }
}
