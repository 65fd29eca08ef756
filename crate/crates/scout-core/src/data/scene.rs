//! The scene record: one driving scene's latent features and labels.

use crate::error::{Error, Result};
use crate::model::LabelVector;
use crate::tensor::Matrix;

/// One scene: keyframe embeddings plus ground-truth and (once the teacher
/// has run) teacher-assigned coverage labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    /// seq_len × embed_dim; all rows are real keyframes at generation
    /// time — padding rows only appear transiently inside batches.
    pub embeddings: Matrix,
    pub mask: Vec<bool>,
    pub y_true: LabelVector,
    pub y_teacher: Option<LabelVector>,
}

impl SceneRecord {
    /// Structural consistency check used by readers and consumers.
    pub fn validate(&self, embed_dim: usize, n_labels: usize) -> Result<()> {
        if self.embeddings.cols() != embed_dim {
            return Err(Error::Validation(format!(
                "scene {}: embedding width {} vs expected {embed_dim}",
                self.scene_id,
                self.embeddings.cols()
            )));
        }
        if self.mask.len() != self.embeddings.rows() {
            return Err(Error::Validation(format!(
                "scene {}: mask length {} vs {} frames",
                self.scene_id,
                self.mask.len(),
                self.embeddings.rows()
            )));
        }
        if self.y_true.len() != n_labels {
            return Err(Error::Validation(format!(
                "scene {}: {} true labels vs expected {n_labels}",
                self.scene_id,
                self.y_true.len()
            )));
        }
        if let Some(t) = &self.y_teacher {
            if t.len() != n_labels {
                return Err(Error::Validation(format!(
                    "scene {}: {} teacher labels vs expected {n_labels}",
                    self.scene_id,
                    t.len()
                )));
            }
        }
        if self
            .y_true
            .iter()
            .chain(self.y_teacher.iter().flatten())
            .any(|&b| b > 1)
        {
            return Err(Error::Validation(format!(
                "scene {}: labels must be 0 or 1",
                self.scene_id
            )));
        }
        Ok(())
    }

    /// Labels requested by a training/evaluation configuration.
    pub fn labels(&self, source: crate::train::LabelSource) -> Result<&LabelVector> {
        match source {
            crate::train::LabelSource::Truth => Ok(&self.y_true),
            crate::train::LabelSource::Teacher => self.y_teacher.as_ref().ok_or_else(|| {
                Error::Validation(format!(
                    "scene {}: teacher labels requested but absent",
                    self.scene_id
                ))
            }),
        }
    }
}
