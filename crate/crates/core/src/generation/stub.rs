//! Minimal in-process HTTP server speaking the generation wire protocol and
//! answering with the procedural mock. Used to exercise [`super::HttpBackend`]
//! without a real diffusion service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::Engine;

use super::http::GenerateRequest;
use super::mock::mock_generate;
use crate::prompt::GenParams;

/// Faults the stub can inject.
#[derive(Debug, Clone, Default)]
pub struct StubBehavior {
    /// Answer the first N requests with 503.
    pub fail_first: usize,
    /// Answer every request with a 200 whose body is not the expected JSON.
    pub malformed: bool,
    /// Report every image as safety-flagged.
    pub flag_all: bool,
    /// Bearer token the server requires, if any.
    pub require_token: Option<String>,
}

#[derive(Debug, Default)]
struct Shared {
    requests: Mutex<Vec<serde_json::Value>>,
    served: AtomicUsize,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds to an ephemeral localhost port and serves in a background thread.
    pub fn start(behavior: StubBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let worker = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if worker.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let worker = Arc::clone(&worker);
                let behavior = behavior.clone();
                std::thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &worker, &behavior) {
                        log::debug!("stub connection error: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            shared,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// JSON bodies received so far, in arrival order.
    pub fn requests(&self) -> Vec<serde_json::Value> {
        self.shared.requests.lock().expect("poisoned").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(
    stream: TcpStream,
    shared: &Shared,
    behavior: &StubBehavior,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut stream = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(());
        }
        let mut content_length = 0usize;
        let mut auth = None;
        let mut close = false;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Ok(());
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                let value = value.trim();
                match name.trim().to_ascii_lowercase().as_str() {
                    "content-length" => content_length = value.parse().unwrap_or(0),
                    "authorization" => auth = Some(value.to_string()),
                    "connection" => close = value.eq_ignore_ascii_case("close"),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;
        let (status, payload) = respond(&request_line, auth.as_deref(), &body, shared, behavior);
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            401 => "Unauthorized",
            404 => "Not Found",
            _ => "Service Unavailable",
        };
        write!(
            stream,
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        )?;
        stream.write_all(payload.as_bytes())?;
        stream.flush()?;
        if close {
            return Ok(());
        }
    }
}

fn respond(
    request_line: &str,
    auth: Option<&str>,
    body: &[u8],
    shared: &Shared,
    behavior: &StubBehavior,
) -> (u16, String) {
    let mut parts = request_line.split_whitespace();
    let (method, path) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
    if method != "POST" || path != "/generate" {
        return (404, r#"{"error":"not found"}"#.into());
    }
    let value: serde_json::Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(e) => {
            return (
                400,
                serde_json::json!({ "error": e.to_string() }).to_string(),
            )
        }
    };
    shared
        .requests
        .lock()
        .expect("poisoned")
        .push(value.clone());
    let n = shared.served.fetch_add(1, Ordering::SeqCst);
    if let Some(token) = &behavior.require_token {
        if auth != Some(format!("Bearer {token}").as_str()) {
            return (401, r#"{"error":"unauthorized"}"#.into());
        }
    }
    if n < behavior.fail_first {
        return (503, r#"{"error":"warming up"}"#.into());
    }
    if behavior.malformed {
        return (200, r#"{"image":"nope"}"#.into());
    }
    let req: GenerateRequest = match serde_json::from_value(value) {
        Ok(r) => r,
        Err(e) => {
            return (
                400,
                serde_json::json!({ "error": e.to_string() }).to_string(),
            )
        }
    };
    let params = GenParams {
        steps: req.num_inference_steps,
        guidance: req.guidance_scale,
        width: req.width,
        height: req.height,
        safety_filter: false,
    };
    match mock_generate(&req.prompt, req.seed, &params) {
        Ok(img) => (
            200,
            serde_json::json!({
                "image_base64": base64::engine::general_purpose::STANDARD.encode(&img.png),
                "safety_flagged": behavior.flag_all,
            })
            .to_string(),
        ),
        Err(e) => (
            503,
            serde_json::json!({ "error": e.to_string() }).to_string(),
        ),
    }
}
