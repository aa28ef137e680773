//! HTTP client for an external inpainting service.
//!
//! `POST {endpoint}/v1/inpaint` with
//! `{"request_id", "image_png_base64", "mask_png_base64", "prompt", "seed", "mode"}`
//! (mask 255 = preserve); a 200 reply carries `{"request_id", "image_png_base64"}`.

use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::procedural::masked_mean_abs_diff;
use super::{Backend, GenMode, GenerationOutcome, GenerationRequest};
use crate::dataset::{LabeledImage, Provenance, Split};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First backoff; doubles after each retry.
    pub backoff_ms: u64,
    /// Mean absolute preserved-region difference above which a warning is raised.
    pub fidelity_tolerance: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8765".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_ms: 200,
            fidelity_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: String,
    pub image_png_base64: String,
    pub mask_png_base64: String,
    pub prompt: String,
    pub seed: u64,
    pub mode: GenMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub request_id: String,
    pub image_png_base64: String,
}

pub fn encode_request(request: &GenerationRequest, source: &Image) -> Result<WireRequest> {
    Ok(WireRequest {
        request_id: request.request_id.clone(),
        image_png_base64: B64.encode(source.to_png_bytes()?),
        mask_png_base64: B64.encode(request.mask.to_png_bytes()?),
        prompt: request.prompt.clone(),
        seed: request.seed,
        mode: request.mode,
    })
}

pub fn decode_png_base64(data: &str, what: &str) -> Result<Image> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Protocol(format!("{what}: invalid base64: {e}")))?;
    Image::from_png_bytes(&bytes, what).map_err(|e| Error::Protocol(format!("{what}: {e}")))
}

pub struct RemoteBackend {
    pub config: EndpointConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: EndpointConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        Self { config, agent }
    }
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate(&self, request: &GenerationRequest, source: &LabeledImage) -> Result<GenerationOutcome> {
        send(&self.agent, &self.config, request, source)
    }
}

/// One-shot call with a fresh client.
pub fn remote_generate(
    request: &GenerationRequest,
    source: &LabeledImage,
    config: &EndpointConfig,
) -> Result<GenerationOutcome> {
    RemoteBackend::new(config.clone()).generate(request, source)
}

enum Attempt {
    Transient(String),
    Fatal(Error),
}

fn attempt(agent: &ureq::Agent, url: &str, req: &WireRequest) -> std::result::Result<WireResponse, Attempt> {
    match agent.post(url).send_json(req) {
        Ok(resp) => {
            let text = resp
                .into_string()
                .map_err(|e| Attempt::Transient(format!("reading response: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response: {e}"))))
        }
        Err(ureq::Error::Status(code, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            log::warn!("{}: HTTP {code}: {body}", req.request_id);
            if code >= 500 || code == 429 || code == 408 {
                Err(Attempt::Transient(format!("HTTP {code}")))
            } else {
                Err(Attempt::Fatal(Error::Generation(format!("HTTP {code}: {body}"))))
            }
        }
        Err(ureq::Error::Transport(t)) => Err(Attempt::Transient(t.to_string())),
    }
}

fn send(
    agent: &ureq::Agent,
    config: &EndpointConfig,
    request: &GenerationRequest,
    source: &LabeledImage,
) -> Result<GenerationOutcome> {
    let url = format!("{}/v1/inpaint", config.url.trim_end_matches('/'));
    let body = encode_request(request, &source.pixels)?;
    let mut retries = 0u32;
    let mut backoff = Duration::from_millis(config.backoff_ms);
    let reply = loop {
        match attempt(agent, &url, &body) {
            Ok(r) => break r,
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Transient(msg)) => {
                if retries >= config.max_retries {
                    return Err(Error::Generation(format!(
                        "{}: {msg} after {retries} retries",
                        request.request_id
                    )));
                }
                retries += 1;
                log::info!("{}: {msg}; retry {retries} in {backoff:?}", request.request_id);
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
    };
    if reply.request_id != request.request_id {
        return Err(Error::Protocol(format!(
            "response is for {:?}, expected {:?}",
            reply.request_id, request.request_id
        )));
    }
    let img = decode_png_base64(&reply.image_png_base64, &request.request_id)?;
    let src = source.pixels.as_ref();
    if img.height != src.height || img.width != src.width || img.channels != src.channels {
        return Err(Error::Protocol(format!(
            "{}: returned {}×{}×{}, source is {}×{}×{}",
            request.request_id, img.height, img.width, img.channels, src.height, src.width, src.channels
        )));
    }
    let mut warnings = Vec::new();
    if let Some(d) = masked_mean_abs_diff(&img, src, &request.mask.bits) {
        if d > config.fidelity_tolerance {
            let w = format!(
                "backend fidelity: preserved region differs by {d:.4} (tolerance {})",
                config.fidelity_tolerance
            );
            log::warn!("{}: {w}", request.request_id);
            warnings.push(w);
        }
    }
    Ok(GenerationOutcome {
        image: LabeledImage {
            id: request.request_id.clone(),
            pixels: Arc::new(img),
            label: request.target_label,
            group: None,
            split: Split::Train,
            provenance: Provenance::Synthesized,
            fg_box: None,
        },
        retries,
        warnings,
    })
}
