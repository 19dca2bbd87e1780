//! JSON bodies of the backend wire protocol. Images travel as base64 PNG.
//!
//! | endpoint           | request                                                    | response               |
//! |--------------------|------------------------------------------------------------|------------------------|
//! | `POST /v1/edit`    | `{"image", "instruction"}`                                 | `{"image"}`            |
//! | `POST /v1/sr`      | `{"image"}`                                                | `{"image"}`            |
//! | `POST /v1/caption` | `{"image"}`                                                | `{"text"}`             |
//! | `POST /v1/embed`   | `{"text"}` xor `{"image"}`                                 | `{"vector", "dim"}`    |
//! | `POST /v1/quality` | `{"image"}`                                                | `{"score"}`            |
//! | `POST /v1/judge`   | `{"input_image", "output_image", "attribute", "change"}`   | `{"correct"}`          |
//! | `POST /v1/complete`| `{"prompt", "temperature", "max_tokens"}`                  | `{"text"}`             |
//! | `POST /v1/pair_edit`| `{"image", "source_caption", "target_caption"}`           | `{"image"}`            |
//!
//! Judge requests may also carry `"co_edited": [attribute, ...]`, naming
//! attributes that were edited alongside and must not count as side
//! effects; the field is omitted when empty.
//!
//! Failures are non-2xx responses with `{"error": {"code", "message"}}`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::imaging::{FaceImage, ImagingError};

pub const REQUEST_ID_HEADER: &str = "x-request-id";

pub fn encode_image(image: &FaceImage) -> Result<String, ImagingError> {
    Ok(STANDARD.encode(image.to_png_bytes()?))
}

pub fn decode_image(b64: &str) -> Result<FaceImage, ImagingError> {
    let bytes = STANDARD
        .decode(b64)
        .map_err(|e| ImagingError::Decode(format!("base64: {e}")))?;
    FaceImage::from_png_bytes(&bytes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub image: String,
    pub instruction: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vector: Vec<f64>,
    pub dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityResponse {
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub input_image: String,
    pub output_image: String,
    pub attribute: String,
    pub change: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub co_edited: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub correct: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairEditRequest {
    pub image: String,
    pub source_caption: String,
    pub target_caption: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error: ErrorDetail {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn embed_request_omits_absent_side() {
        let req = EmbedRequest {
            text: Some("hair red".into()),
            image: None,
        };
        assert_eq!(serde_json::to_value(&req).unwrap(), json!({"text": "hair red"}));
    }

    #[test]
    fn judge_request_has_four_fields_without_co_edits() {
        let req = JudgeRequest {
            input_image: "a".into(),
            output_image: "b".into(),
            attribute: "hair".into(),
            change: "red".into(),
            co_edited: vec![],
        };
        assert_eq!(
            serde_json::to_value(&req).unwrap(),
            json!({"input_image": "a", "output_image": "b", "attribute": "hair", "change": "red"})
        );
        let back: JudgeRequest = serde_json::from_value(
            json!({"input_image": "a", "output_image": "b", "attribute": "hair", "change": "red"}),
        )
        .unwrap();
        assert!(back.co_edited.is_empty());
    }

    #[test]
    fn image_base64_round_trip() {
        let img = FaceImage::filled(3, 2, [9, 8, 7]).unwrap();
        assert_eq!(decode_image(&encode_image(&img).unwrap()).unwrap(), img);
        assert!(decode_image("not base64!").is_err());
    }
}
