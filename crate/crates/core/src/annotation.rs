//! Sphere annotations and the per-sample label ledger.
//!
//! Membership is decided once, against the positions current when the sphere
//! is applied. Labels then stay with their samples however the cloud moves.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("label {label} is out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("radius must be finite and positive, got {0}")]
    BadRadius(f64),
    #[error("sphere center must be finite")]
    BadCenter,
    #[error("sequence {sequence} is not newer than {latest} already in the store")]
    StaleSequence { sequence: u64, latest: u64 },
    #[error("got {got} positions for a store of {expected} samples")]
    PositionCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

/// A labelled closed ball in latent space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereAnnotation {
    pub center: Vec3,
    pub radius: f64,
    pub label: usize,
    pub sequence: u64,
}

impl SphereAnnotation {
    pub fn contains(&self, p: &Vec3) -> bool {
        squared_distance(p, &self.center).sqrt() <= self.radius
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(AnnotationError::BadRadius(self.radius));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(AnnotationError::BadCenter);
        }
        if self.label >= classes {
            return Err(AnnotationError::BadLabel {
                label: self.label,
                classes,
            });
        }
        Ok(())
    }
}

#[inline]
fn squared_distance(a: &Vec3, b: &Vec3) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices whose position lies within the closed ball, ascending.
pub fn select_in_sphere(positions: &[Vec3], sphere: &SphereAnnotation) -> Vec<usize> {
    select_in_sphere_with(Exec::default(), positions, sphere)
}

pub fn select_in_sphere_with(exec: Exec, positions: &[Vec3], sphere: &SphereAnnotation) -> Vec<usize> {
    let inside = exec.map(positions.len(), positions.len() * 8, |i| sphere.contains(&positions[i]));
    inside
        .into_iter()
        .enumerate()
        .filter_map(|(i, v)| v.then_some(i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLabel {
    Unlabeled,
    Labeled { class: usize, sequence: u64 },
}

impl SampleLabel {
    pub fn class(&self) -> Option<usize> {
        match *self {
            SampleLabel::Unlabeled => None,
            SampleLabel::Labeled { class, .. } => Some(class),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStore {
    labels: Vec<SampleLabel>,
    classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub per_class: Vec<usize>,
    pub unlabeled: usize,
}

impl AnnotationStats {
    pub fn labeled(&self) -> usize {
        self.per_class.iter().sum()
    }
}

impl LabelStore {
    pub fn new(samples: usize, classes: usize) -> Self {
        Self {
            labels: vec![SampleLabel::Unlabeled; samples],
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize) -> SampleLabel {
        self.labels[i]
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        self.labels[i].class()
    }

    pub fn labels(&self) -> &[SampleLabel] {
        &self.labels
    }

    /// Per-sample class, `None` when unlabelled.
    pub fn classes_view(&self) -> Vec<Option<usize>> {
        self.labels.iter().map(SampleLabel::class).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.class().is_some()).count()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|l| l.class().is_some())
    }

    /// Newest sequence number carried by any sample.
    pub fn latest_sequence(&self) -> Option<u64> {
        self.labels
            .iter()
            .filter_map(|l| match *l {
                SampleLabel::Labeled { sequence, .. } => Some(sequence),
                SampleLabel::Unlabeled => None,
            })
            .max()
    }

    /// In-place form of [`apply_annotation`]. Returns the selected indices.
    pub fn apply(&mut self, sphere: &SphereAnnotation, positions: &[Vec3]) -> Result<Vec<usize>> {
        sphere.validate(self.classes)?;
        if positions.len() != self.labels.len() {
            return Err(AnnotationError::PositionCount {
                expected: self.labels.len(),
                got: positions.len(),
            });
        }
        if let Some(latest) = self.latest_sequence() {
            if sphere.sequence <= latest {
                return Err(AnnotationError::StaleSequence {
                    sequence: sphere.sequence,
                    latest,
                });
            }
        }
        let selected = select_in_sphere(positions, sphere);
        for &i in &selected {
            self.labels[i] = SampleLabel::Labeled {
                class: sphere.label,
                sequence: sphere.sequence,
            };
        }
        Ok(selected)
    }

    pub fn stats(&self) -> AnnotationStats {
        annotation_stats(self)
    }
}

/// Labels every sample inside `sphere`, overwriting earlier labels.
pub fn apply_annotation(store: &LabelStore, sphere: &SphereAnnotation, positions: &[Vec3]) -> Result<LabelStore> {
    let mut next = store.clone();
    next.apply(sphere, positions)?;
    Ok(next)
}

pub fn annotation_stats(store: &LabelStore) -> AnnotationStats {
    let mut per_class = vec![0; store.classes];
    let mut unlabeled = 0;
    for l in &store.labels {
        match l.class() {
            Some(c) => per_class[c] += 1,
            None => unlabeled += 1,
        }
    }
    AnnotationStats { per_class, unlabeled }
}
