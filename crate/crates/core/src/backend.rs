//! Shared plumbing for HTTP model backends.

use std::sync::atomic::{AtomicU8, Ordering};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::BackendError;

/// Last observed reachability of a backend: unknown until the first call.
#[derive(Debug, Default)]
pub struct Reachability(AtomicU8);

impl Reachability {
    const UNKNOWN: u8 = 0;
    const UP: u8 = 1;
    const DOWN: u8 = 2;

    pub fn record<T>(&self, result: &Result<T, BackendError>) {
        let v = match result {
            Err(BackendError::Unavailable(_)) => Self::DOWN,
            _ => Self::UP,
        };
        self.0.store(v, Ordering::Relaxed);
    }

    pub fn get(&self) -> Option<bool> {
        match self.0.load(Ordering::Relaxed) {
            Self::UNKNOWN => None,
            v => Some(v == Self::UP),
        }
    }
}

pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &B,
) -> Result<R, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(token) = bearer {
        req = req.bearer_auth(token);
    }
    let resp = req.send().map_err(|e| {
        if e.is_connect() || e.is_timeout() {
            BackendError::Unavailable(format!("{url}: {e}"))
        } else {
            BackendError::Failed(format!("{url}: {e}"))
        }
    })?;
    let status = resp.status();
    if status.is_server_error() && status.as_u16() == 503 {
        return Err(BackendError::Unavailable(format!("{url}: HTTP {status}")));
    }
    if !status.is_success() {
        return Err(BackendError::Failed(format!("{url}: HTTP {status}")));
    }
    resp.json::<R>()
        .map_err(|e| BackendError::Failed(format!("{url}: bad response body: {e}")))
}
