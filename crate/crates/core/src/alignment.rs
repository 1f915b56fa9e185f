//! Prompt-relevance scoring of visual patch tokens.
//!
//! Tokens are projected into the joint text/vision space, compared against a
//! text feature, and the temperature-scaled similarities are normalized with a
//! single softmax over every `(t, w, h)` position of the clip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Dtype, Shape3, Tensor};

/// Tolerance on the unit-sum invariant of a [`ScoreTensor`].
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

/// CLIP's trained logit scale, `exp(4.6052)`.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// A `D x D'` matrix mapping visual tokens into the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(Tensor);

impl ProjectionMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.expect_rank("projection matrix", 2)?;
        if matrix.shape()[0] == 0 || matrix.shape()[1] == 0 {
            return Err(Error::InvalidParameter(format!(
                "projection matrix must have at least one row and column, got {:?}",
                matrix.shape()
            )));
        }
        Ok(ProjectionMatrix(matrix))
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        ProjectionMatrix(Tensor::from_parts(vec![dim, dim], data, Dtype::F64))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Text embedding of a prompt in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature(Vec<f64>);

impl TextFeature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("text feature is empty".into()));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(TextFeature(values))
    }

    /// One feature per row of a 2-D tensor, or a single feature from a 1-D one.
    pub fn from_tensor(t: &Tensor) -> Result<Vec<Self>> {
        match t.rank() {
            1 => Ok(vec![TextFeature::new(t.data().to_vec())?]),
            2 => {
                let width = t.shape()[1];
                if width == 0 || t.shape()[0] == 0 {
                    return Err(Error::InvalidParameter(format!(
                        "text feature tensor has empty shape {:?}",
                        t.shape()
                    )));
                }
                t.data()
                    .chunks(width)
                    .map(|row| TextFeature::new(row.to_vec()))
                    .collect()
            }
            _ => Err(Error::Rank {
                what: "text feature",
                expected: 1,
                shape: t.shape().to_vec(),
            }),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Average per-prompt score tensors, then renormalize to unit mass.
    #[default]
    MeanScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub temperature: f64,
    /// L2-normalize the text feature and every projected token before the dot product.
    pub normalize: bool,
    pub aggregation: Aggregation,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            temperature: DEFAULT_TEMPERATURE,
            normalize: true,
            aggregation: Aggregation::MeanScores,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Globally softmax-normalized relevance weights over a `T x W x H` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor(Tensor);

impl ScoreTensor {
    /// Validates a 3-D tensor as a score distribution: every value in
    /// `[0, 1]` and total mass within [`SCORE_SUM_TOLERANCE`] of one.
    pub fn new(t: Tensor) -> Result<Self> {
        t.expect_rank("score tensor", 3)?;
        Shape3::of(&t)?;
        if let Some((index, &value)) = t
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            if value < 0.0 {
                return Err(Error::NegativeScore { index, value });
            }
            return Err(Error::InvalidParameter(format!(
                "score {value} at flat index {index} exceeds 1"
            )));
        }
        let sum: f64 = t.data().iter().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "scores sum to {sum}, expected 1 within {SCORE_SUM_TOLERANCE}"
            )));
        }
        Ok(ScoreTensor(t))
    }

    /// Uniform weights `1 / (T*W*H)`.
    pub fn uniform(shape: Shape3) -> Self {
        let n = shape.tokens();
        ScoreTensor(Tensor::from_parts(
            vec![shape.t, shape.w, shape.h],
            vec![1.0 / n as f64; n],
            Dtype::F64,
        ))
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.0.shape();
        Shape3 {
            t: s[0],
            w: s[1],
            h: s[2],
        }
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn max(&self) -> f64 {
        self.values().iter().copied().fold(0.0, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .values()
            .iter()
            .filter(|&&s| s > 0.0)
            .map(|&s| s * s.ln())
            .sum::<f64>()
    }
}

impl AsRef<Tensor> for ScoreTensor {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}

/// Multiplies every `D`-wide token of a `T x W x H x D` tensor by `m`.
pub fn project_visual(v: &Tensor, m: &ProjectionMatrix) -> Result<Tensor> {
    v.expect_rank("visual tokens", 4)?;
    let grid = Shape3::of(v)?;
    let d = v.shape()[3];
    if d != m.rows() {
        return Err(Error::dims(
            format!("projection rows ({}) vs visual token width ({d})", m.rows()),
            d,
            m.rows(),
        ));
    }
    let out_d = m.cols();
    let weights = m.as_tensor().data();
    let tokens = v.data();
    let mut out = vec![0.0; grid.tokens() * out_d];
    parallel::for_each_chunk(&mut out, out_d, |pos, row| {
        let token = &tokens[pos * d..(pos + 1) * d];
        for (k, &x) in token.iter().enumerate() {
            let w = &weights[k * out_d..(k + 1) * out_d];
            for (o, &wk) in row.iter_mut().zip(w) {
                *o += x * wk;
            }
        }
    });
    Ok(Tensor::from_parts(
        vec![grid.t, grid.w, grid.h, out_d],
        out,
        v.dtype(),
    ))
}

fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Temperature-scaled similarity of each projected token with `c`.
pub fn alignment_logits(
    projected: &Tensor,
    c: &TextFeature,
    cfg: &AlignmentConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    projected.expect_rank("projected tokens", 4)?;
    let grid = Shape3::of(projected)?;
    let d = projected.shape()[3];
    if d != c.dim() {
        return Err(Error::dims(
            format!(
                "text feature width ({}) vs projected token width ({d})",
                c.dim()
            ),
            d,
            c.dim(),
        ));
    }
    let tokens = projected.data();
    let text = c.values();
    let tau = cfg.temperature;

    let logits = if cfg.normalize {
        let c_norm = l2_norm(text);
        if c_norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "text feature".into(),
            });
        }
        let norms = parallel::map_range(grid.tokens(), |p| l2_norm(&tokens[p * d..(p + 1) * d]));
        if let Some(p) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm {
                what: format!("projected token at flat position {p}"),
            });
        }
        parallel::map_range(grid.tokens(), |p| {
            let dot: f64 = tokens[p * d..(p + 1) * d]
                .iter()
                .zip(text)
                .map(|(a, b)| a * b)
                .sum();
            tau * (dot / (c_norm * norms[p])).clamp(-1.0, 1.0)
        })
    } else {
        parallel::map_range(grid.tokens(), |p| {
            tau * tokens[p * d..(p + 1) * d]
                .iter()
                .zip(text)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
    };
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    Ok(Tensor::from_parts(
        vec![grid.t, grid.w, grid.h],
        logits,
        projected.dtype(),
    ))
}

/// Max-subtracted softmax over every position of a `T x W x H` logit grid.
pub fn softmax_scores(logits: &Tensor) -> Result<ScoreTensor> {
    logits.expect_rank("logits", 3)?;
    Shape3::of(logits)?;
    let x = logits.data();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = parallel::map_range(x.len(), |i| (x[i] - max).exp());
    // Denominator summed in flat order so the result is independent of thread count.
    let total: f64 = e.iter().sum();
    parallel::for_each_chunk(&mut e, 4096, |_, c| c.iter_mut().for_each(|v| *v /= total));
    Ok(ScoreTensor(Tensor::from_parts(
        logits.shape().to_vec(),
        e,
        logits.dtype(),
    )))
}

/// Scores for each prompt, averaged elementwise and renormalized.
pub fn scores_multi_prompt(
    projected: &Tensor,
    prompts: &[TextFeature],
    cfg: &AlignmentConfig,
) -> Result<ScoreTensor> {
    let (first, rest) = prompts
        .split_first()
        .ok_or_else(|| Error::InvalidParameter("at least one prompt is required".into()))?;
    let first = softmax_scores(&alignment_logits(projected, first, cfg)?)?;
    if rest.is_empty() {
        return Ok(first);
    }
    let shape = first.as_tensor().shape().to_vec();
    let dtype = first.as_tensor().dtype();
    let mut acc = first.into_tensor().into_data();
    for prompt in rest {
        let s = softmax_scores(&alignment_logits(projected, prompt, cfg)?)?;
        for (a, b) in acc.iter_mut().zip(s.values()) {
            *a += b;
        }
    }
    let n = prompts.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    let total: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(ScoreTensor(Tensor::from_parts(shape, acc, dtype)))
}
