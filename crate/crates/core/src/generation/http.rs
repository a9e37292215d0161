//! Client for a remote diffusion service.
//!
//! Wire protocol: `POST {endpoint}/generate` with
//! `{"prompt","seed","num_inference_steps","guidance_scale","width","height"}`;
//! a 200 response carries `{"image_base64": <PNG>, "safety_flagged": bool}`.

use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Backend, Capabilities, ImageMeta, ImageResult};
use crate::error::{Error, Result};
use crate::prompt::GenParams;

pub const ENV_URL: &str = "DATASETCLONE_BACKEND_URL";
pub const ENV_TOKEN: &str = "DATASETCLONE_BACKEND_TOKEN";
pub const ENV_TIMEOUT: &str = "DATASETCLONE_BACKEND_TIMEOUT_SECS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    pub num_inference_steps: u32,
    pub guidance_scale: f64,
    pub width: u32,
    pub height: u32,
}

impl GenerateRequest {
    pub fn new(prompt: &str, seed: u64, params: &GenParams) -> Self {
        Self {
            prompt: prompt.to_string(),
            seed,
            num_inference_steps: params.steps,
            guidance_scale: params.guidance,
            width: params.width,
            height: params.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_base64: String,
    pub safety_flagged: bool,
    /// Reported by some services; recorded when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_concurrency: usize,
    pub max_width: u32,
    pub max_height: u32,
}

impl HttpBackendConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            token: None,
            timeout: Duration::from_secs(300),
            max_concurrency: 4,
            max_width: 1024,
            max_height: 1024,
        }
    }

    /// Reads endpoint, token and timeout from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint =
            std::env::var(ENV_URL).map_err(|_| Error::Contract(format!("{ENV_URL} is not set")))?;
        let mut cfg = Self::new(endpoint);
        cfg.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        if let Ok(secs) = std::env::var(ENV_TIMEOUT) {
            let secs: u64 = secs
                .parse()
                .map_err(|_| Error::Contract(format!("{ENV_TIMEOUT} must be an integer")))?;
            cfg.timeout = Duration::from_secs(secs);
        }
        Ok(cfg)
    }
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.cfg.endpoint)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    fn url(&self) -> String {
        format!("{}/generate", self.cfg.endpoint.trim_end_matches('/'))
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        "http"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_width: self.cfg.max_width,
            max_height: self.cfg.max_height,
        }
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(self.cfg.max_concurrency.max(1))
    }

    fn generate(&self, prompt: &str, seed: u64, params: &GenParams) -> Result<ImageResult> {
        let start = Instant::now();
        let body = GenerateRequest::new(prompt, seed, params);
        let mut req = self.agent.post(self.url());
        if let Some(token) = &self.cfg.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::BackendUnreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Error::BackendUnreachable(format!("HTTP {status}")));
        }
        if status != 200 {
            return Err(Error::MalformedResponse(format!("HTTP {status}")));
        }
        let parsed: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::MalformedResponse(e.to_string()))?;
        let png = base64::engine::general_purpose::STANDARD
            .decode(parsed.image_base64.as_bytes())
            .map_err(|e| Error::MalformedResponse(format!("image_base64: {e}")))?;
        Ok(ImageResult {
            png,
            meta: ImageMeta {
                backend_id: format!("http:{}", self.cfg.endpoint),
                elapsed_ms: start.elapsed().as_millis() as u64,
                safety_flagged: parsed.safety_flagged,
                sampler: parsed.sampler,
            },
        })
    }
}
