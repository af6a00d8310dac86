//! HTTP transport: a threaded server over `tiny_http` exposing the four
//! service endpoints, and a minimal HTTP/1.1 client implementing
//! [`ServiceClient`]. Both sides move the same canonical frames as the
//! loopback transport, so scenario runs are transport-transparent.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use ovk_core::clock::Clock;
use ovk_core::service::{self, ServiceState};
use ovk_core::wire::{self, ClientError, Direction, FrameLog, Message, ServiceClient};

const ENDPOINTS: [&str; 4] = ["/start-authn", "/register", "/enroll", "/authn"];

/// A running service endpoint bound to a local port.
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl HttpServer {
    /// Serves `state` on `bind` (use port 0 for an ephemeral port). Each
    /// request is dispatched under the state lock with `now` taken from the
    /// injected clock; when `store_path` is set the full state is persisted
    /// after every request.
    pub fn spawn(
        state: Arc<Mutex<ServiceState>>,
        clock: Arc<dyn Clock>,
        bind: &str,
        store_path: Option<PathBuf>,
    ) -> io::Result<Self> {
        let server = tiny_http::Server::http(bind)
            .map_err(|e| io::Error::other(format!("bind {bind}: {e}")))?;
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(addr) => addr,
            other => return Err(io::Error::other(format!("unsupported listener {other:?}"))),
        };
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                let request = match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(request)) => request,
                    Ok(None) => continue,
                    Err(_) => break,
                };
                handle_request(request, &state, clock.as_ref(), store_path.as_deref());
            }
        });
        Ok(Self { addr, shutdown, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn respond_json(request: tiny_http::Request, status: u16, body: Vec<u8>) {
    let response = tiny_http::Response::from_data(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                .expect("static header"),
        );
    let _ = request.respond(response);
}

fn error_frame(code: &str, message: &str) -> Vec<u8> {
    wire::encode(&Message::ErrorRsp(wire::ErrorBody {
        code: code.to_string(),
        message: message.to_string(),
    }))
}

fn handle_request(
    mut request: tiny_http::Request,
    state: &Arc<Mutex<ServiceState>>,
    clock: &dyn Clock,
    store_path: Option<&std::path::Path>,
) {
    let url = request.url().to_string();
    if request.method() != &tiny_http::Method::Post || !ENDPOINTS.contains(&url.as_str()) {
        respond_json(request, 404, error_frame("UnknownKind", "no such endpoint"));
        return;
    }

    let mut body = Vec::new();
    if request.as_reader().read_to_end(&mut body).is_err() {
        respond_json(request, 400, error_frame("ParseError", "unreadable body"));
        return;
    }
    let message = match wire::decode(&body) {
        Ok(message) => message,
        Err(err) => {
            respond_json(request, 400, error_frame("ParseError", &err.to_string()));
            return;
        }
    };
    match message.endpoint() {
        Some(endpoint) if endpoint == url => {}
        _ => {
            respond_json(request, 400, error_frame("UnknownKind", "kind does not match path"));
            return;
        }
    }

    let now = clock.now();
    let response = {
        let mut state = state.lock().expect("service lock");
        let response = service::dispatch(&mut state, &message, now);
        if let Some(path) = store_path {
            let _ = state.persist(path);
        }
        response
    };
    let status = if matches!(response, Message::ErrorRsp(_)) { 400 } else { 200 };
    respond_json(request, status, wire::encode(&response));
}

/// Client side of the HTTP transport. The trusted origin is configured at
/// construction, standing in for TLS server authentication.
pub struct HttpClient {
    base_url: String,
    origin_hint: String,
    log: Option<FrameLog>,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>, origin_hint: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), origin_hint: origin_hint.into(), log: None }
    }

    pub fn with_log(mut self, log: FrameLog) -> Self {
        self.log = Some(log);
        self
    }

    fn post(&self, path: &str, body: &[u8]) -> io::Result<Vec<u8>> {
        let host = self
            .base_url
            .strip_prefix("http://")
            .ok_or_else(|| io::Error::other("base url must be http://host:port"))?;
        let mut stream = TcpStream::connect(host)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        stream.set_write_timeout(Some(Duration::from_secs(10)))?;

        let mut request = Vec::new();
        request.extend_from_slice(format!("POST {path} HTTP/1.1\r\n").as_bytes());
        request.extend_from_slice(format!("Host: {host}\r\n").as_bytes());
        request.extend_from_slice(b"Content-Type: application/json\r\n");
        request.extend_from_slice(format!("Content-Length: {}\r\n", body.len()).as_bytes());
        request.extend_from_slice(b"Connection: close\r\n\r\n");
        request.extend_from_slice(body);
        stream.write_all(&request)?;

        let mut raw = Vec::new();
        stream.read_to_end(&mut raw)?;
        let header_end = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| io::Error::other("malformed http response"))?;
        let headers = String::from_utf8_lossy(&raw[..header_end]).to_string();
        let mut payload = raw[header_end + 4..].to_vec();
        if let Some(length) = headers
            .lines()
            .find_map(|line| line.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(String::from))
            .and_then(|v| v.parse::<usize>().ok())
        {
            payload.truncate(length);
        }
        Ok(payload)
    }
}

impl ServiceClient for HttpClient {
    fn origin(&self) -> &str {
        &self.origin_hint
    }

    fn call(&mut self, request: &Message) -> Result<Message, ClientError> {
        let endpoint = request
            .endpoint()
            .ok_or_else(|| ClientError::Transport("not a request frame".into()))?;
        let bytes = wire::encode(request);
        if let Some(log) = &self.log {
            log.record(Direction::Sent, &bytes);
        }
        let response_bytes = self
            .post(endpoint, &bytes)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if let Some(log) = &self.log {
            log.record(Direction::Received, &response_bytes);
        }
        match wire::decode(&response_bytes)? {
            Message::ErrorRsp(body) => {
                Err(ClientError::Service { code: body.code, message: body.message })
            }
            message => Ok(message),
        }
    }
}
