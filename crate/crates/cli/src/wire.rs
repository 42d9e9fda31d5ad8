//! Request and response bodies of the HTTP service, and the sidecar record
//! written next to every rendered image. Field names are frozen in
//! `schema/wire.json`.

use latent_directions::config::EditDefaults;
use latent_directions::edit::{EditSet, EditSpec, TimeWindow};
use serde::{Deserialize, Serialize};

pub const SIDECAR_FORMAT_VERSION: u32 = 1;

/// Where an edited image starts from. Exactly one of `seed` and `image_id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged, try_from = "RawSource")]
pub enum Source {
    Seed { seed: u64 },
    /// Content hash of an uploaded (or CLI-supplied) image.
    Image { image_id: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    seed: Option<u64>,
    image_id: Option<String>,
}

impl TryFrom<RawSource> for Source {
    type Error = String;

    fn try_from(raw: RawSource) -> Result<Self, String> {
        match (raw.seed, raw.image_id) {
            (Some(seed), None) => Ok(Source::Seed { seed }),
            (None, Some(image_id)) => Ok(Source::Image { image_id }),
            _ => Err("source needs exactly one of `seed` and `image_id`".into()),
        }
    }
}

/// A window by preset name or explicit interval in normalized time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireWindow {
    Preset(WindowPreset),
    Interval { start: f64, end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPreset {
    Full,
    Fine,
    Coarse,
}

impl WireWindow {
    /// Presets take the run's configured windows.
    pub fn resolve(&self, defaults: &EditDefaults) -> TimeWindow {
        match self {
            WireWindow::Preset(WindowPreset::Full) => TimeWindow::FULL,
            WireWindow::Preset(WindowPreset::Fine) => defaults.fine_window,
            WireWindow::Preset(WindowPreset::Coarse) => defaults.coarse_window,
            WireWindow::Interval { start, end } => TimeWindow {
                start: *start,
                end: *end,
            },
        }
    }
}

impl Default for WireWindow {
    fn default() -> Self {
        WireWindow::Preset(WindowPreset::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireEdit {
    pub direction_id: usize,
    pub scale: f64,
    #[serde(default)]
    pub window: WireWindow,
}

impl WireEdit {
    pub fn to_spec(&self, defaults: &EditDefaults) -> EditSpec {
        EditSpec::new(self.direction_id, self.scale, self.window.resolve(defaults))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub source: Source,
    #[serde(default)]
    pub edits: Vec<WireEdit>,
    /// Also return per-step edit magnitudes.
    #[serde(default)]
    pub metrics: bool,
}

impl EditRequest {
    pub fn edit_set(&self, defaults: &EditDefaults) -> EditSet {
        EditSet::new(self.edits.iter().map(|e| e.to_spec(defaults)).collect())
    }
}

/// Everything needed to replay a render through the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub source: Source,
    /// Resolved edit specs; each carries its window.
    pub edits: Vec<EditSpec>,
    pub schedule_id: String,
    pub guidance_scale: f64,
    /// Fixed-point refinements used when inverting an image source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_iters: Option<usize>,
    pub model_checksum: String,
    pub bank_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub t: usize,
    pub edit_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    /// Base64 of a 16-bit lossless PNG.
    pub image_png: String,
    pub sidecar: Sidecar,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<StepMetric>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripRef {
    pub scale: f64,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSummary {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub self_consistency: f64,
    pub strip: Vec<StripRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripImage {
    pub scale: f64,
    pub image_png: String,
    pub sidecar: Sidecar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionDetail {
    pub summary: DirectionSummary,
    pub strip: Vec<StripImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub directions: usize,
    pub schedule_id: String,
    pub model_checksum: String,
    pub bank_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// `validation`, `not_found`, `unavailable`, `payload_too_large` or `internal`.
    pub kind: String,
    /// Dotted path of the offending request field, for validation errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}
