//! A local stand-in for the inpainting service, with scripted faults.

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use super::remote::{decode_png_base64, WireRequest, WireResponse};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub enum StubBehavior {
    /// Returns the submitted image unchanged.
    Echo,
    /// Returns the submitted image with every intensity inverted.
    Invert,
    /// Returns an image one row shorter than submitted.
    WrongDims,
    /// Answers 503 to the first `n` calls of each request id, then echoes.
    FailTimes(u32),
    /// Answers 503 to every call.
    AlwaysFail,
    /// Answers 500 to the listed request ids and echoes the rest.
    FailIds(HashSet<String>),
    /// Answers 200 with a body that is not JSON.
    Malformed,
    /// Answers 200 with an image field that is not base64.
    BadBase64,
    /// Answers 200 for a different request id.
    WrongRequestId,
    /// Answers 400 to every call.
    Reject,
    /// Sleeps before echoing.
    Delay(Duration),
}

struct Shared {
    behavior: StubBehavior,
    calls: AtomicUsize,
    per_id: Mutex<HashMap<String, u32>>,
}

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds an ephemeral port on 127.0.0.1 and serves until dropped.
    pub fn start(behavior: StubBehavior) -> Result<Self> {
        Self::bind("127.0.0.1:0", behavior)
    }

    pub fn bind(addr: &str, behavior: StubBehavior) -> Result<Self> {
        let server = tiny_http::Server::http(addr)
            .map_err(|e| Error::Generation(format!("stub server could not bind {addr}: {e}")))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Generation("stub server has no IP address".into()))?;
        let stop = Arc::new(AtomicBool::new(false));
        let shared = Arc::new(Shared {
            behavior,
            calls: AtomicUsize::new(0),
            per_id: Mutex::new(HashMap::new()),
        });
        let (stop2, shared2) = (stop.clone(), shared.clone());
        let handle = std::thread::spawn(move || {
            while !stop2.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(req)) => {
                        let shared = shared2.clone();
                        std::thread::spawn(move || handle(req, &shared));
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            stop,
            shared,
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Total requests received.
    pub fn calls(&self) -> usize {
        self.shared.calls.load(Ordering::SeqCst)
    }

    /// Blocks until the process is interrupted.
    pub fn serve_forever(self) {
        loop {
            std::thread::park();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn respond(req: tiny_http::Request, code: u16, body: String) {
    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
        .expect("static header");
    let _ = req.respond(
        tiny_http::Response::from_string(body)
            .with_status_code(code)
            .with_header(header),
    );
}

fn reply(id: &str, img: &Image) -> String {
    let png = img.to_png_bytes().expect("stub image encodes");
    serde_json::to_string(&WireResponse {
        request_id: id.to_string(),
        image_png_base64: B64.encode(png),
    })
    .expect("serializable")
}

fn handle(mut req: tiny_http::Request, shared: &Shared) {
    shared.calls.fetch_add(1, Ordering::SeqCst);
    if req.method() != &tiny_http::Method::Post || req.url() != "/v1/inpaint" {
        respond(req, 404, "{\"error\":\"not found\"}".into());
        return;
    }
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() {
        respond(req, 400, "{\"error\":\"unreadable body\"}".into());
        return;
    }
    let wire: WireRequest = match serde_json::from_str(&body) {
        Ok(w) => w,
        Err(e) => {
            respond(req, 400, format!("{{\"error\":\"{e}\"}}"));
            return;
        }
    };
    let image = match decode_png_base64(&wire.image_png_base64, "stub") {
        Ok(i) => i,
        Err(e) => {
            respond(req, 400, format!("{{\"error\":\"{e}\"}}"));
            return;
        }
    };
    let id = wire.request_id.as_str();
    match &shared.behavior {
        StubBehavior::Echo => respond(req, 200, reply(id, &image)),
        StubBehavior::Invert => {
            let mut inv = image.clone();
            inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
            respond(req, 200, reply(id, &inv))
        }
        StubBehavior::WrongDims => {
            let mut short = image.clone();
            short.height -= 1;
            short.data.truncate(short.height * short.width * short.channels);
            respond(req, 200, reply(id, &short))
        }
        StubBehavior::FailTimes(n) => {
            let seen = {
                let mut m = shared.per_id.lock().expect("stub lock");
                let c = m.entry(id.to_string()).or_insert(0);
                *c += 1;
                *c
            };
            if seen <= *n {
                respond(req, 503, "{\"error\":\"busy\"}".into())
            } else {
                respond(req, 200, reply(id, &image))
            }
        }
        StubBehavior::AlwaysFail => respond(req, 503, "{\"error\":\"unavailable\"}".into()),
        StubBehavior::FailIds(ids) => {
            if ids.contains(id) {
                respond(req, 500, "{\"error\":\"injected\"}".into())
            } else {
                respond(req, 200, reply(id, &image))
            }
        }
        StubBehavior::Malformed => respond(req, 200, "this is not json".into()),
        StubBehavior::BadBase64 => respond(
            req,
            200,
            serde_json::json!({"request_id": id, "image_png_base64": "%%%"}).to_string(),
        ),
        StubBehavior::WrongRequestId => respond(req, 200, reply("someone-else", &image)),
        StubBehavior::Reject => respond(req, 400, "{\"error\":\"rejected\"}".into()),
        StubBehavior::Delay(d) => {
            std::thread::sleep(*d);
            respond(req, 200, reply(id, &image))
        }
    }
}
