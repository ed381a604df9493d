//! The inference wire contract: a chat-completions style JSON body carrying
//! one text prompt and one image reference per request. The mock server and
//! any real endpoint speak the same shapes.

use serde::{Deserialize, Serialize};

pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageRef { image_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub model: String,
    pub request_id: String,
    pub messages: Vec<Message>,
}

impl InferenceRequest {
    pub fn new(
        model: impl Into<String>,
        request_id: impl Into<String>,
        prompt: impl Into<String>,
        image_ref: impl Into<String>,
    ) -> Self {
        InferenceRequest {
            model: model.into(),
            request_id: request_id.into(),
            messages: vec![Message {
                role: "user".to_string(),
                content: vec![
                    ContentPart::Text { text: prompt.into() },
                    ContentPart::ImageRef {
                        image_ref: image_ref.into(),
                    },
                ],
            }],
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| {
            m.content.iter().find_map(|part| match part {
                ContentPart::ImageRef { image_ref } => Some(image_ref.as_str()),
                _ => None,
            })
        })
    }

    pub fn prompt(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| {
            m.content.iter().find_map(|part| match part {
                ContentPart::Text { text } => Some(text.as_str()),
                _ => None,
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub message: AssistantMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    /// Echoes the request id; callers reject mismatches.
    pub request_id: String,
    pub choices: Vec<Choice>,
    /// Optional per-token logprobs; real services may omit them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub latency_ms: u64,
}

impl InferenceResponse {
    pub fn canned(request_id: impl Into<String>, text: impl Into<String>) -> Self {
        InferenceResponse {
            request_id: request_id.into(),
            choices: vec![Choice {
                message: AssistantMessage {
                    role: "assistant".to_string(),
                    content: text.into(),
                },
            }],
            token_logprobs: None,
            latency_ms: 0,
        }
    }

    pub fn text(&self) -> Option<&str> {
        self.choices.first().map(|c| c.message.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
}
