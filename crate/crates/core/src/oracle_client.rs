//! HTTP client for a remote reconstruction service.
//!
//! Wire protocol (JSON over HTTP/1.1):
//!
//! * `GET  /v1/health` → `{model_id, patch_size, image_side}`
//! * `POST /v1/reconstruct` with an [`OracleRequest`] → [`OracleResponse`]
//! * any non-2xx status carries an [`ErrorEnvelope`] `{code, message}`
//!
//! Images travel as base64 of little-endian `f32` pixels, row-major and
//! channel-interleaved, in `[0, 1]`.

use std::io::ErrorKind as IoErrorKind;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{KppError, Result};
use crate::oracle::{Losses, Oracle, PatchSet, Reconstruction};
use crate::patch_grid::{assemble, GridSpec, ImageTensor, PatchArray};

/// Environment variable naming the oracle base URL.
pub const ORACLE_URL_ENV: &str = "KPP_ORACLE_URL";

pub const INVALID_INDICES: &str = "INVALID_INDICES";
pub const INVALID_IMAGE: &str = "INVALID_IMAGE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub unmasked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub masked_mse: f64,
    pub full_mse: f64,
    pub per_patch_mse: Vec<f64>,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthInfo {
    pub model_id: String,
    pub patch_size: usize,
    pub image_side: usize,
}

pub fn encode_pixels(pixels: &[f32]) -> String {
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

pub fn decode_pixels(encoded: &str) -> Result<Vec<f32>> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| KppError::Protocol(format!("image is not valid base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(KppError::Protocol(format!(
            "image payload of {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

impl OracleRequest {
    /// Builds a request from raw pixels; `unmasked` is sent as given.
    pub fn new(
        pixels: &[f32],
        height: usize,
        width: usize,
        channels: usize,
        patch_size: usize,
        unmasked: Vec<usize>,
    ) -> Self {
        Self {
            image: encode_pixels(pixels),
            height,
            width,
            channels,
            patch_size,
            unmasked,
        }
    }

    /// Request for `img` with the visible set sorted ascending.
    pub fn from_image(img: &ImageTensor, patch_size: usize, unmasked: &PatchSet) -> Self {
        let pixels: Vec<f32> = img.data().iter().map(|&v| v as f32).collect();
        Self::new(
            &pixels,
            img.height(),
            img.width(),
            img.channels(),
            patch_size,
            unmasked.sorted(),
        )
    }

    pub fn decode_image(&self) -> Result<Vec<f32>> {
        let pixels = decode_pixels(&self.image)?;
        let expected = self.height * self.width * self.channels;
        if pixels.len() != expected {
            return Err(KppError::Protocol(format!(
                "image holds {} values, header declares {expected}",
                pixels.len()
            )));
        }
        Ok(pixels)
    }

    pub fn n_patches(&self) -> usize {
        if self.patch_size == 0 {
            return 0;
        }
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Server-side validation, returning the envelope a conforming server sends back.
    pub fn validate(&self) -> std::result::Result<(), ErrorEnvelope> {
        let reject = |code: &str, message: String| ErrorEnvelope {
            code: code.into(),
            message,
        };
        if self.patch_size == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return Err(reject(
                INVALID_IMAGE,
                format!(
                    "patch_size {} does not tile {}x{}",
                    self.patch_size, self.height, self.width
                ),
            ));
        }
        match self.decode_image() {
            Err(e) => return Err(reject(INVALID_IMAGE, e.to_string())),
            Ok(px) if px.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(reject(INVALID_IMAGE, "pixel outside [0, 1]".into()))
            }
            Ok(_) => {}
        }
        let n = self.n_patches();
        let mut seen = vec![false; n];
        for &idx in &self.unmasked {
            if idx >= n {
                return Err(reject(
                    INVALID_INDICES,
                    format!("index {idx} out of range for {n} patches"),
                ));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(reject(INVALID_INDICES, format!("duplicate index {idx}")));
            }
        }
        Ok(())
    }
}

impl OracleResponse {
    pub fn check(&self, n_patches: usize) -> Result<()> {
        if self.per_patch_mse.len() != n_patches {
            return Err(KppError::Protocol(format!(
                "per_patch_mse has {} entries, expected {n_patches}",
                self.per_patch_mse.len()
            )));
        }
        let all = [self.masked_mse, self.full_mse]
            .into_iter()
            .chain(self.per_patch_mse.iter().copied());
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(KppError::Protocol(format!("loss {v} is not a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClientConfig {
    pub timeout: Duration,
    /// Extra attempts after a timeout.
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Counting gate on concurrent requests.
struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct OracleClient {
    base_url: String,
    agent: ureq::Agent,
    config: ClientConfig,
    gate: InFlight,
}

/// `--oracle-url` when given, else `$KPP_ORACLE_URL`.
pub fn resolve_oracle_url(flag: Option<&str>) -> Option<String> {
    flag.map(str::to_owned)
        .or_else(|| std::env::var(ORACLE_URL_ENV).ok())
        .filter(|u| !u.is_empty())
}

enum Failure {
    Timeout,
    Other(KppError),
}

fn is_timeout(err: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(err);
    while let Some(e) = source {
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), IoErrorKind::TimedOut | IoErrorKind::WouldBlock) {
                return true;
            }
        }
        source = e.source();
    }
    err.to_string().contains("timed out")
}

impl OracleClient {
    pub fn new(base_url: &str, config: ClientConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(KppError::InvalidArgument("max_in_flight must be positive".into()));
        }
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_owned(),
            agent,
            config,
            gate: InFlight {
                active: Mutex::new(0),
                freed: Condvar::new(),
                limit: config.max_in_flight,
            },
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn classify(&self, err: ureq::Error) -> Failure {
        match err {
            ureq::Error::Status(status, resp) => {
                let body = resp.into_string().unwrap_or_default();
                Failure::Other(match serde_json::from_str::<ErrorEnvelope>(&body) {
                    Ok(env) => KppError::Server {
                        code: env.code,
                        message: env.message,
                    },
                    Err(_) => KppError::Protocol(format!(
                        "HTTP {status} without an error envelope: {body}"
                    )),
                })
            }
            ureq::Error::Transport(t) if is_timeout(&t) => Failure::Timeout,
            ureq::Error::Transport(t) => Failure::Other(KppError::Connection {
                url: self.base_url.clone(),
                message: t.to_string(),
            }),
        }
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> std::result::Result<T, Failure>) -> Result<T> {
        let _permit = self.gate.acquire();
        let attempts = self.config.retries + 1;
        for _ in 0..attempts {
            match call() {
                Ok(v) => return Ok(v),
                Err(Failure::Timeout) => continue,
                Err(Failure::Other(e)) => return Err(e),
            }
        }
        Err(KppError::Timeout {
            url: self.base_url.clone(),
            attempts,
        })
    }

    pub fn health(&self) -> Result<HealthInfo> {
        let url = format!("{}/v1/health", self.base_url);
        self.with_retries(|| {
            let resp = self.agent.get(&url).call().map_err(|e| self.classify(e))?;
            read_json(resp)
        })
    }

    /// Sends one request and validates the response shape.
    pub fn reconstruct_remote(&self, req: &OracleRequest) -> Result<OracleResponse> {
        let url = format!("{}/v1/reconstruct", self.base_url);
        let response: OracleResponse = self.with_retries(|| {
            let resp = self
                .agent
                .post(&url)
                .send_json(req)
                .map_err(|e| self.classify(e))?;
            read_json(resp)
        })?;
        response.check(req.n_patches())?;
        Ok(response)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(resp: ureq::Response) -> std::result::Result<T, Failure> {
    let body = match resp.into_string() {
        Ok(body) => body,
        Err(e) if matches!(e.kind(), IoErrorKind::TimedOut | IoErrorKind::WouldBlock) => {
            return Err(Failure::Timeout)
        }
        Err(e) => return Err(Failure::Other(KppError::Protocol(e.to_string()))),
    };
    serde_json::from_str(&body)
        .map_err(|e| Failure::Other(KppError::Protocol(format!("{e}: {body}"))))
}

/// A remote service behind the [`Oracle`] trait. Only losses are available.
pub struct RemoteOracle {
    client: OracleClient,
    grid: GridSpec,
    model_id: String,
}

impl RemoteOracle {
    /// Checks the server geometry against `grid` before accepting it.
    pub fn connect(client: OracleClient, grid: GridSpec) -> Result<Self> {
        let health = client.health()?;
        if health.patch_size != grid.patch_side() || health.image_side != grid.image_side() {
            return Err(KppError::GeometryMismatch {
                server_patch: health.patch_size,
                server_side: health.image_side,
                local_patch: grid.patch_side(),
                local_side: grid.image_side(),
            });
        }
        Ok(Self {
            client,
            grid,
            model_id: health.model_id,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
}

impl Oracle for RemoteOracle {
    fn id(&self) -> String {
        format!("remote:{}", self.model_id)
    }

    fn passes_through(&self) -> bool {
        false
    }

    fn reconstruct(&self, _truth: &PatchArray, _unmasked: &PatchSet) -> Result<Reconstruction> {
        Err(KppError::Unsupported {
            oracle: self.id(),
            what: "pixel reconstructions (the protocol returns losses only)".into(),
        })
    }

    fn losses(&self, truth: &PatchArray, unmasked: &PatchSet) -> Result<Losses> {
        if unmasked.is_empty() {
            return Err(KppError::EmptyVisibleSet);
        }
        let img = assemble(truth, self.grid)?;
        let req = OracleRequest::from_image(&img, self.grid.patch_side(), unmasked);
        let resp = self.client.reconstruct_remote(&req)?;
        Ok(Losses {
            masked_mse: resp.masked_mse,
            full_mse: resp.full_mse,
            per_patch_mse: resp.per_patch_mse,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn request(unmasked: Vec<usize>) -> OracleRequest {
        OracleRequest::new(&[0.25; 4 * 4 * 3], 4, 4, 3, 2, unmasked)
    }

    #[test]
    fn validation_codes() {
        assert!(request(vec![0, 3]).validate().is_ok());
        assert_eq!(request(vec![1, 1]).validate().unwrap_err().code, INVALID_INDICES);
        assert_eq!(request(vec![4]).validate().unwrap_err().code, INVALID_INDICES);
        let mut bad = request(vec![0]);
        bad.height = 5;
        assert_eq!(bad.validate().unwrap_err().code, INVALID_IMAGE);
        let mut short = request(vec![0]);
        short.image = encode_pixels(&[0.5; 3]);
        assert_eq!(short.validate().unwrap_err().code, INVALID_IMAGE);
        let mut junk = request(vec![0]);
        junk.image = "!!!".into();
        assert!(junk.decode_image().is_err());
    }

    #[test]
    fn field_names_on_the_wire() {
        let json = serde_json::to_value(request(vec![2])).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["channels", "height", "image", "patch_size", "unmasked", "width"]);
        let resp = OracleResponse {
            masked_mse: 0.0,
            full_mse: 0.0,
            per_patch_mse: vec![0.0; 4],
            model_id: "m".into(),
        };
        let json = serde_json::to_value(resp).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["full_mse", "masked_mse", "model_id", "per_patch_mse"]);
    }

    #[test]
    fn response_check() {
        let mut resp = OracleResponse {
            masked_mse: 0.1,
            full_mse: 0.05,
            per_patch_mse: vec![0.0, 0.2],
            model_id: "m".into(),
        };
        assert!(resp.check(2).is_ok());
        assert!(resp.check(3).is_err());
        resp.per_patch_mse[0] = -1.0;
        assert!(resp.check(2).is_err());
    }

    #[test]
    fn flag_overrides_env() {
        assert_eq!(resolve_oracle_url(Some("http://a")).as_deref(), Some("http://a"));
    }

    proptest! {
        #[test]
        fn pixel_encoding_round_trips(pixels in proptest::collection::vec(any::<f32>(), 0..256)) {
            let decoded = decode_pixels(&encode_pixels(&pixels)).unwrap();
            prop_assert_eq!(
                decoded.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
