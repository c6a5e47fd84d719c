//! Session wire protocol.
//!
//! Every message is one JSON object carrying a `"type"` tag. Over the network
//! each message travels as a single WebSocket text frame; the frame header
//! carries the payload length, so no extra framing is added on top.
//!
//! Server to client:
//!
//! | type        | fields |
//! |-------------|--------|
//! | `hello`     | `n`, `d`, `classes`, `image_rows`, `image_cols`, `state` |
//! | `snapshot`  | `iteration`, `positions` (flat, length 3n), `label_state` (class or `null` per sample), `losses`, `reason`, `labels_changed` |
//! | `annotated` | `sequence`, `label`, `selected`, `iteration` |
//! | `state`     | `state`, `remaining_steps`, `paused` |
//! | `metrics`   | `iteration`, `silhouette`, `mean_intra_class_distance`, `mean_inter_class_centroid_distance`, `labeled`, `per_class`, `unlabeled` |
//! | `thumbnail` | `sample_id`, `width`, `height`, `png_base64` (8-bit grayscale PNG) |
//! | `error`     | `code`, `text` |
//!
//! Client to server:
//!
//! | type                | fields |
//! |---------------------|--------|
//! | `annotate`          | `center` (3 numbers), `radius`, `label` |
//! | `start_update`      | `steps` (optional, defaults to the configured steps per update) |
//! | `request_thumbnail` | `sample_id` |
//! | `pause`             | |
//! | `resume`            | |

use serde::{Deserialize, Serialize};

use crate::model::{LossBreakdown, Vec3};
use crate::trainer::{Metrics, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Representation,
    Visualization,
    Interaction,
    Updating,
}

impl SessionState {
    /// Whether `self -> next` is an edge of the labelling cycle.
    pub fn can_move_to(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Representation, Visualization)
                | (Visualization, Interaction)
                | (Interaction, Interaction)
                | (Interaction, Updating)
                | (Updating, Representation)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotReason {
    /// First embedding after the session opens.
    Initial,
    /// Label feedback right after an annotation; positions are unchanged.
    Echo,
    /// One gradient step of an update.
    Step,
    /// Last gradient step of an update.
    Final,
    /// Current state replayed to a client that (re)connected.
    Resync,
    /// Flushed on shutdown.
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadLabel,
    BadRadius,
    BadCenter,
    NoLabels,
    BadSample,
    Busy,
    BadMessage,
    TrainingFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMessage {
    pub iteration: u64,
    pub positions: Vec<f64>,
    pub label_state: Vec<Option<usize>>,
    pub losses: LossBreakdown,
    pub reason: SnapshotReason,
    pub labels_changed: bool,
}

impl SnapshotMessage {
    pub fn from_snapshot(s: &Snapshot, reason: SnapshotReason, labels_changed: bool) -> Self {
        Self {
            iteration: s.iteration,
            positions: flatten_positions(&s.positions),
            label_state: s.label_state.clone(),
            losses: s.losses,
            reason,
            labels_changed,
        }
    }

    pub fn positions3(&self) -> Vec<Vec3> {
        unflatten_positions(&self.positions)
    }

    /// Snapshots the outbound queue may drop when a client lags.
    pub fn is_droppable(&self) -> bool {
        self.reason == SnapshotReason::Step && !self.labels_changed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsMessage {
    pub iteration: u64,
    pub silhouette: Option<f64>,
    pub mean_intra_class_distance: Option<f64>,
    pub mean_inter_class_centroid_distance: Option<f64>,
    pub labeled: usize,
    pub per_class: Vec<usize>,
    pub unlabeled: usize,
}

impl MetricsMessage {
    pub fn new(iteration: u64, m: &Metrics, per_class: Vec<usize>, unlabeled: usize) -> Self {
        Self {
            iteration,
            silhouette: m.silhouette,
            mean_intra_class_distance: m.mean_intra_class_distance,
            mean_inter_class_centroid_distance: m.mean_inter_class_centroid_distance,
            labeled: m.labeled,
            per_class,
            unlabeled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        n: usize,
        d: usize,
        classes: usize,
        image_rows: usize,
        image_cols: usize,
        state: SessionState,
    },
    Snapshot(SnapshotMessage),
    Annotated {
        sequence: u64,
        label: usize,
        selected: usize,
        iteration: u64,
    },
    State {
        state: SessionState,
        remaining_steps: usize,
        paused: bool,
    },
    Metrics(MetricsMessage),
    Thumbnail {
        sample_id: usize,
        width: usize,
        height: usize,
        png_base64: String,
    },
    Error {
        code: ErrorCode,
        text: String,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, text: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            text: text.into(),
        }
    }

    pub fn as_snapshot(&self) -> Option<&SnapshotMessage> {
        match self {
            ServerMessage::Snapshot(s) => Some(s),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialise")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Annotate {
        center: Vec3,
        radius: f64,
        label: usize,
    },
    StartUpdate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
    },
    RequestThumbnail {
        sample_id: usize,
    },
    Pause,
    Resume,
}

impl ClientMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("client messages always serialise")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

pub fn flatten_positions(positions: &[Vec3]) -> Vec<f64> {
    positions.iter().flatten().copied().collect()
}

pub fn unflatten_positions(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}
