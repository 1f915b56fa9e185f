//! Certificate length: the share of a video's frames relevant to its QA text.
//!
//! Frames are assumed to be sampled upstream (2 fps is the usual convention)
//! and embedded into the same space as the text. A frame is relevant when its
//! cosine similarity to the text strictly exceeds the threshold.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceProfile {
    pub similarities: Vec<f64>,
    pub mask: Vec<bool>,
    pub certificate: f64,
}

impl RelevanceProfile {
    pub fn relevant_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of each row of an `N x D` frame matrix with `text`.
pub fn frame_similarities(frames: &Tensor, text: &[f64]) -> Result<Vec<f64>> {
    frames.expect_rank("frame embeddings", 2)?;
    let (n, d) = (frames.shape()[0], frames.shape()[1]);
    if n == 0 {
        return Err(Error::InvalidParameter(
            "at least one frame is required".into(),
        ));
    }
    if d != text.len() {
        return Err(Error::dims(
            format!("text width ({}) vs frame width ({d})", text.len()),
            d,
            text.len(),
        ));
    }
    let text_norm = norm(text);
    if text_norm == 0.0 {
        return Err(Error::ZeroNorm {
            what: "text embedding".into(),
        });
    }
    let rows = frames.data();
    let norms = parallel::map_range(n, |i| norm(&rows[i * d..(i + 1) * d]));
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(Error::ZeroNorm {
            what: format!("frame {i}"),
        });
    }
    Ok(parallel::map_range(n, |i| {
        let dot: f64 = rows[i * d..(i + 1) * d]
            .iter()
            .zip(text)
            .map(|(a, b)| a * b)
            .sum();
        (dot / (norms[i] * text_norm)).clamp(-1.0, 1.0)
    }))
}

/// Marks frames with similarity strictly above `threshold` and reports their share.
pub fn certificate(similarities: &[f64], threshold: f64) -> Result<RelevanceProfile> {
    if !threshold.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "threshold must be finite, got {threshold}"
        )));
    }
    if similarities.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one frame is required".into(),
        ));
    }
    let mask: Vec<bool> = similarities.iter().map(|&s| s > threshold).collect();
    let relevant = mask.iter().filter(|&&m| m).count();
    Ok(RelevanceProfile {
        similarities: similarities.to_vec(),
        certificate: relevant as f64 / similarities.len() as f64,
        mask,
    })
}

/// [`frame_similarities`] followed by [`certificate`].
pub fn relevance_profile(
    frames: &Tensor,
    text: &[f64],
    threshold: f64,
) -> Result<RelevanceProfile> {
    certificate(&frame_similarities(frames, text)?, threshold)
}
