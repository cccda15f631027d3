//! Encoder-as-a-service: an HTTP front for any provider, the matching
//! client, and a conformance suite for third-party servers.
//!
//! Endpoints (protocol version 1):
//! - `GET /v1/info`: [`WireInfo`].
//! - `POST /v1/embed`: [`EmbedRequest`] in, [`EmbedResponse`] out.
//! - `GET /v1/health`: `{"status": "ok"}`.
//!
//! Errors are JSON [`ErrorBody`] values: 400 `malformed_json` /
//! `bad_payload`, 422 `shape_mismatch`, 426 `version_mismatch`, 500
//! `model_error`. Masking is the client's business; the server only embeds.

pub mod client;
pub mod conformance;
pub mod server;
pub mod wire;

pub use client::{remote_provider, RemoteProvider};
pub use conformance::{conformance_suite, CheckOutcome, CheckResult, ConformanceReport};
pub use server::{serve, ServeError, ServerHandle};
pub use wire::{EmbedRequest, EmbedResponse, ErrorBody, WireInfo, PROTOCOL_VERSION};
