//! HTTP side of the toolkit: a client for OpenAI-compatible chat-completion
//! endpoints and a scripted mock server speaking the same subset.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{HttpConfig, HttpLlm, RetryPolicy};
pub use server::{MockServer, ServeError};
