//! The annotation session: one dataset, one model, one label store.
//!
//! [`Session`] is a synchronous state machine. Client messages go in through
//! [`Session::handle`]; gradient steps happen only in [`Session::step`], one
//! per call. Annotations that arrive while an update is running are queued and
//! applied at the start of the next `step`, which is the iteration boundary.
//! A transport (see `server`) owns the session on one thread and feeds it.

use std::collections::VecDeque;
use std::io::Cursor;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationError, LabelStore, SphereAnnotation};
use crate::dataset::Dataset;
use crate::model::{LossBreakdown, ModelParameters, Vec3};
use crate::trainer::{self, TrainConfig, TrainError, Trainer};
use crate::wire::{
    ClientMessage, ErrorCode, MetricsMessage, ServerMessage, SessionState, SnapshotMessage, SnapshotReason,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("model expects input dimension {model} but the dataset has dimension {dataset}")]
    DimensionMismatch { dataset: usize, model: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub train: TrainConfig,
    /// Start an update of `train.steps_per_update` steps after every annotation.
    pub auto_update: bool,
}

/// A client message stamped with the iteration index current when it arrived.
///
/// A recorded session log and a replay script share this format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub after_snapshot: u64,
    #[serde(flatten)]
    pub message: ClientMessage,
}

#[derive(Debug)]
pub struct Session {
    dataset: Dataset,
    trainer: Trainer,
    labels: LabelStore,
    positions: Vec<Vec3>,
    losses: LossBreakdown,
    state: SessionState,
    history: Vec<SessionState>,
    auto_update: bool,
    paused: bool,
    remaining: usize,
    step_in_run: usize,
    queued: VecDeque<SphereAnnotation>,
    next_sequence: u64,
    log: Vec<ScriptEntry>,
}

impl Session {
    /// Embeds the dataset and returns the session with its hello and initial snapshot.
    pub fn open(
        dataset: Dataset,
        params: ModelParameters,
        config: SessionConfig,
    ) -> Result<(Self, Vec<ServerMessage>)> {
        if dataset.dim() != params.input_dim() {
            return Err(SessionError::DimensionMismatch {
                dataset: dataset.dim(),
                model: params.input_dim(),
            });
        }
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset.into());
        }
        let classes = params.classes();
        let trainer = Trainer::new(params, config.train)?;
        let positions = trainer.embed(&dataset)?;
        let labels = LabelStore::new(dataset.len(), classes);
        let mut session = Self {
            dataset,
            trainer,
            labels,
            positions,
            losses: LossBreakdown::default(),
            state: SessionState::Representation,
            history: vec![SessionState::Representation],
            auto_update: config.auto_update,
            paused: false,
            remaining: 0,
            step_in_run: 0,
            queued: VecDeque::new(),
            next_sequence: 1,
            log: Vec::new(),
        };
        session.losses = session.evaluate()?;
        session.enter(SessionState::Visualization);
        let out = vec![session.hello(), session.snapshot(SnapshotReason::Initial, false)];
        Ok((session, out))
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Every state entered so far, in order.
    pub fn history(&self) -> &[SessionState] {
        &self.history
    }

    pub fn iteration(&self) -> u64 {
        self.trainer.iteration()
    }

    pub fn labels(&self) -> &LabelStore {
        &self.labels
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn params(&self) -> &ModelParameters {
        self.trainer.params()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn remaining_steps(&self) -> usize {
        self.remaining
    }

    /// Client messages received so far, replayable with [`Session::replay`].
    pub fn log(&self) -> &[ScriptEntry] {
        &self.log
    }

    /// Whether a call to [`Session::step`] would take a gradient step.
    pub fn is_stepping(&self) -> bool {
        self.state == SessionState::Updating && !self.paused && self.remaining > 0
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello {
            n: self.dataset.len(),
            d: self.dataset.dim(),
            classes: self.labels.classes(),
            image_rows: self.dataset.image_rows(),
            image_cols: self.dataset.image_cols(),
            state: self.state,
        }
    }

    /// What a freshly connected client needs to catch up.
    pub fn resync(&self) -> Vec<ServerMessage> {
        vec![
            self.hello(),
            self.snapshot(SnapshotReason::Resync, false),
            self.state_message(),
        ]
    }

    /// The current cloud, marked as the last message before the session goes away.
    pub fn shutdown_snapshot(&self) -> ServerMessage {
        self.snapshot(SnapshotReason::Shutdown, false)
    }

    pub fn handle(&mut self, message: ClientMessage) -> Vec<ServerMessage> {
        self.log.push(ScriptEntry {
            after_snapshot: self.iteration(),
            message: message.clone(),
        });
        let mut out = Vec::new();
        match message {
            ClientMessage::Annotate { center, radius, label } => self.on_annotate(center, radius, label, &mut out),
            ClientMessage::StartUpdate { steps } => self.on_start_update(steps, &mut out),
            ClientMessage::RequestThumbnail { sample_id } => out.push(self.thumbnail(sample_id)),
            ClientMessage::Pause => {
                if self.state == SessionState::Updating {
                    self.paused = true;
                }
                out.push(self.state_message());
            }
            ClientMessage::Resume => {
                self.paused = false;
                out.push(self.state_message());
            }
        }
        out
    }

    /// Parses and handles one text frame.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match ClientMessage::from_json(text) {
            Ok(m) => self.handle(m),
            Err(e) => vec![ServerMessage::error(ErrorCode::BadMessage, e.to_string())],
        }
    }

    /// One iteration boundary: queued annotations, then one gradient step.
    pub fn step(&mut self) -> Vec<ServerMessage> {
        if !self.is_stepping() {
            return Vec::new();
        }
        let mut out = Vec::new();
        let changed = self.apply_queued(&mut out);
        let losses = match self.trainer.step(&self.dataset, Some(&self.labels)) {
            Ok(l) => l,
            Err(e) => {
                out.push(ServerMessage::error(ErrorCode::TrainingFailed, e.to_string()));
                self.remaining = 0;
                self.finish(&mut out);
                return out;
            }
        };
        self.positions = self.trainer.embed(&self.dataset).expect("dimension checked at open");
        self.losses = losses;
        self.remaining -= 1;
        self.step_in_run += 1;
        let last = self.remaining == 0;
        let every = self.trainer.config().snapshot_every;
        if last {
            out.push(self.snapshot(SnapshotReason::Final, changed));
            self.finish(&mut out);
        } else if changed || self.step_in_run.is_multiple_of(every) {
            out.push(self.snapshot(SnapshotReason::Step, changed));
        }
        out
    }

    /// Runs `script` against a fresh session and returns everything emitted.
    ///
    /// Each entry is delivered once the session has reached its
    /// `after_snapshot` iteration (or as soon as training cannot advance).
    pub fn replay(
        dataset: Dataset,
        params: ModelParameters,
        config: SessionConfig,
        script: &[ScriptEntry],
        sink: &mut dyn FnMut(&Session, &ServerMessage),
    ) -> Result<Session> {
        let (mut session, first) = Session::open(dataset, params, config)?;
        for m in &first {
            sink(&session, m);
        }
        for entry in script {
            while session.is_stepping() && session.iteration() < entry.after_snapshot {
                for m in session.step() {
                    sink(&session, &m);
                }
            }
            for m in session.handle(entry.message.clone()) {
                sink(&session, &m);
            }
        }
        while session.is_stepping() {
            for m in session.step() {
                sink(&session, &m);
            }
        }
        Ok(session)
    }

    fn enter(&mut self, next: SessionState) {
        debug_assert!(
            self.state.can_move_to(next),
            "illegal move {:?} -> {:?}",
            self.state,
            next
        );
        self.state = next;
        self.history.push(next);
    }

    fn evaluate(&self) -> std::result::Result<LossBreakdown, TrainError> {
        trainer::evaluate(
            self.trainer.exec(),
            self.trainer.params(),
            &self.dataset,
            &self.labels.classes_view(),
            self.trainer.config().weights(),
        )
    }

    fn snapshot(&self, reason: SnapshotReason, labels_changed: bool) -> ServerMessage {
        ServerMessage::Snapshot(SnapshotMessage {
            iteration: self.iteration(),
            positions: crate::wire::flatten_positions(&self.positions),
            label_state: self.labels.classes_view(),
            losses: self.losses,
            reason,
            labels_changed,
        })
    }

    fn state_message(&self) -> ServerMessage {
        ServerMessage::State {
            state: self.state,
            remaining_steps: self.remaining,
            paused: self.paused,
        }
    }

    fn metrics_message(&self) -> ServerMessage {
        let m = trainer::compute_metrics_with(self.trainer.exec(), &self.positions, &self.labels.classes_view());
        let stats = self.labels.stats();
        ServerMessage::Metrics(MetricsMessage::new(
            self.iteration(),
            &m,
            stats.per_class,
            stats.unlabeled,
        ))
    }

    fn sphere(&self, center: Vec3, radius: f64, label: usize) -> std::result::Result<SphereAnnotation, ServerMessage> {
        let sphere = SphereAnnotation {
            center,
            radius,
            label,
            sequence: self.next_sequence,
        };
        sphere.validate(self.labels.classes()).map_err(|e| {
            let code = match e {
                AnnotationError::BadLabel { .. } => ErrorCode::BadLabel,
                AnnotationError::BadRadius(_) => ErrorCode::BadRadius,
                _ => ErrorCode::BadCenter,
            };
            ServerMessage::error(code, e.to_string())
        })?;
        Ok(sphere)
    }

    fn apply_sphere(&mut self, sphere: &SphereAnnotation, out: &mut Vec<ServerMessage>) -> bool {
        let selected = self
            .labels
            .apply(sphere, &self.positions)
            .expect("spheres are validated and sequenced on receipt");
        out.push(ServerMessage::Annotated {
            sequence: sphere.sequence,
            label: sphere.label,
            selected: selected.len(),
            iteration: self.iteration(),
        });
        !selected.is_empty()
    }

    fn apply_queued(&mut self, out: &mut Vec<ServerMessage>) -> bool {
        let mut changed = false;
        while let Some(sphere) = self.queued.pop_front() {
            changed |= self.apply_sphere(&sphere, out);
        }
        changed
    }

    fn on_annotate(&mut self, center: Vec3, radius: f64, label: usize, out: &mut Vec<ServerMessage>) {
        let sphere = match self.sphere(center, radius, label) {
            Ok(s) => s,
            Err(e) => return out.push(e),
        };
        self.next_sequence += 1;
        if self.state == SessionState::Updating {
            self.queued.push_back(sphere);
            return;
        }
        let changed = self.apply_sphere(&sphere, out);
        self.enter(SessionState::Interaction);
        match self.evaluate() {
            Ok(l) => self.losses = l,
            Err(e) => out.push(ServerMessage::error(ErrorCode::TrainingFailed, e.to_string())),
        }
        out.push(self.snapshot(SnapshotReason::Echo, changed));
        if self.auto_update {
            self.on_start_update(None, out);
        }
    }

    fn on_start_update(&mut self, steps: Option<usize>, out: &mut Vec<ServerMessage>) {
        if self.state == SessionState::Updating {
            return out.push(ServerMessage::error(ErrorCode::Busy, "an update is already running"));
        }
        if !self.labels.has_labels() {
            return out.push(ServerMessage::error(
                ErrorCode::NoLabels,
                "annotate at least one sample before updating",
            ));
        }
        if self.state == SessionState::Visualization {
            self.enter(SessionState::Interaction);
        }
        self.enter(SessionState::Updating);
        self.remaining = steps.unwrap_or(self.trainer.config().steps_per_update);
        self.step_in_run = 0;
        self.paused = false;
        out.push(self.state_message());
        if self.remaining == 0 {
            self.finish(out);
        }
    }

    fn finish(&mut self, out: &mut Vec<ServerMessage>) {
        self.enter(SessionState::Representation);
        out.push(self.metrics_message());
        self.enter(SessionState::Visualization);
        self.paused = false;
        out.push(self.state_message());
        // Only reachable when a run aborts between receipt and boundary.
        let pending: Vec<SphereAnnotation> = self.queued.drain(..).collect();
        for sphere in pending {
            let changed = self.apply_sphere(&sphere, out);
            if self.state != SessionState::Interaction {
                self.enter(SessionState::Interaction);
            }
            out.push(self.snapshot(SnapshotReason::Echo, changed));
        }
    }

    fn thumbnail(&self, sample_id: usize) -> ServerMessage {
        if sample_id >= self.dataset.len() {
            return ServerMessage::error(
                ErrorCode::BadSample,
                format!("sample {sample_id} is out of range for {} samples", self.dataset.len()),
            );
        }
        let (width, height) = (self.dataset.image_cols(), self.dataset.image_rows());
        ServerMessage::Thumbnail {
            sample_id,
            width,
            height,
            png_base64: base64::engine::general_purpose::STANDARD.encode(encode_png(
                &self.dataset.pixel_bytes(sample_id),
                width,
                height,
            )),
        }
    }
}

/// 8-bit grayscale PNG.
pub fn encode_png(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("writing to a Vec cannot fail");
        w.write_image_data(pixels).expect("pixel count matches the header");
    }
    buf
}

/// Inverse of [`encode_png`]: `(pixels, width, height)`.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), png::DecodingError> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.width as usize, info.height as usize))
}
