//! Thin blocking JSON-over-HTTP helper used by the remote backends.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::retry::RetryPolicy;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Decode(String),
    #[error("invalid endpoint {0:?}")]
    Endpoint(String),
}

impl HttpError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, HttpError::Transport(_))
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            HttpError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    inner: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpClient {
    pub fn new(timeout: Duration, retry: RetryPolicy) -> Result<Self, HttpError> {
        let inner = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| HttpError::Transport(e.to_string()))?;
        Ok(Self { inner, retry })
    }

    pub fn with_retry(retry: RetryPolicy) -> Result<Self, HttpError> {
        Self::new(Duration::from_secs(120), retry)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    /// POST `body` as JSON and decode the JSON reply. Transport failures are
    /// retried per the client's policy; the retry count is returned alongside.
    pub fn post_json<B, R>(&self, url: &str, body: &B) -> (Result<R, HttpError>, u32)
    where
        B: Serialize + ?Sized,
        R: DeserializeOwned,
    {
        self.retry.run(HttpError::is_retryable, |_| {
            let resp = self
                .inner
                .post(url)
                .json(body)
                .send()
                .map_err(|e| HttpError::Transport(error_chain(&e)))?;
            decode(resp)
        })
    }

    pub fn get_json<R>(&self, url: &str, query: &[(&str, &str)]) -> (Result<R, HttpError>, u32)
    where
        R: DeserializeOwned,
    {
        self.retry.run(HttpError::is_retryable, |_| {
            let resp = self
                .inner
                .get(url)
                .query(query)
                .send()
                .map_err(|e| HttpError::Transport(error_chain(&e)))?;
            decode(resp)
        })
    }
}

fn decode<R: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<R, HttpError> {
    let status = resp.status().as_u16();
    let bytes = resp
        .bytes()
        .map_err(|e| HttpError::Transport(error_chain(&e)))?;
    if status >= 400 {
        let body = String::from_utf8_lossy(&bytes);
        return Err(HttpError::Status {
            status,
            body: body.chars().take(200).collect(),
        });
    }
    serde_json::from_slice(&bytes).map_err(|e| HttpError::Decode(e.to_string()))
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        source = s.source();
    }
    msg
}

/// Joins an endpoint base URL and a route, tolerating a trailing slash on the base.
pub fn join_url(base: &str, route: &str) -> String {
    format!(
        "{}/{}",
        base.trim_end_matches('/'),
        route.trim_start_matches('/')
    )
}

/// Counting semaphore bounding the number of requests in flight.
#[derive(Debug)]
pub struct InflightLimit {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InflightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut avail = self.available.lock().unwrap_or_else(|p| p.into_inner());
        while *avail == 0 {
            avail = self.cv.wait(avail).unwrap_or_else(|p| p.into_inner());
        }
        *avail -= 1;
        InflightPermit { limit: self }
    }
}

pub struct InflightPermit<'a> {
    limit: &'a InflightLimit,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut avail = self
            .limit
            .available
            .lock()
            .unwrap_or_else(|p| p.into_inner());
        *avail += 1;
        self.limit.cv.notify_one();
    }
}
