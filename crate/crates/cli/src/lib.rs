//! Orchestration layer for the driving-scene pipeline: configuration,
//! the inference client and its deterministic mock server, and the stage
//! runners behind the `drivescene` binary.

pub mod client;
pub mod config;
pub mod errors;
pub mod io;
pub mod mock_server;
pub mod runs;
pub mod wire;

pub use client::{infer_batch, HttpInferenceClient, InferenceClient, MockInferenceClient};
pub use config::PipelineConfig;
pub use errors::RunError;
pub use mock_server::{mock_inference_server, MockServerHandle};
pub use wire::{InferenceRequest, InferenceResponse};
