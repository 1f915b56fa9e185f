//! Lengthening a positional-embedding table past its trained context.
//!
//! Target row `i` is read from source coordinate `j`, blending the two
//! bracketing source rows linearly. The asymmetric schedule keeps rate 1 for
//! the first `boundary` positions, so the well-trained prefix is copied
//! unchanged, and stretches the remainder with a smaller rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

pub const DEFAULT_BOUNDARY: usize = 20;
pub const DEFAULT_R_HEAD: f64 = 1.0;
pub const DEFAULT_R_TAIL: f64 = 0.25;
pub const DEFAULT_RANDOM_SCALE: f64 = 0.02;

/// An `L x D` table of position embeddings, `L >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbeddingTable(Tensor);

impl PositionalEmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self> {
        table.expect_rank("positional embedding table", 2)?;
        if table.shape()[0] < 2 {
            return Err(Error::InvalidParameter(format!(
                "positional embedding table needs at least 2 rows, got {}",
                table.shape()[0]
            )));
        }
        Ok(PositionalEmbeddingTable(table))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.0.data()[i * d..(i + 1) * d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Continuity {
    /// `j = i * r_head` before the boundary and
    /// `boundary * r_head + (i - boundary) * r_tail` after it.
    #[default]
    ContinuousPiecewise,
    /// `j = i * r(i)`, which jumps backwards at the boundary when `r_tail < r_head`.
    Literal,
}

impl std::str::FromStr for Continuity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous-piecewise" | "continuous" => Ok(Continuity::ContinuousPiecewise),
            "literal" => Ok(Continuity::Literal),
            other => Err(Error::InvalidParameter(format!(
                "unknown continuity '{other}'"
            ))),
        }
    }
}

impl Continuity {
    pub fn name(self) -> &'static str {
        match self {
            Continuity::ContinuousPiecewise => "continuous-piecewise",
            Continuity::Literal => "literal",
        }
    }
}

/// Piecewise rate schedule mapping target positions to source coordinates.
///
/// JSON: `{"boundary": 20, "r_head": 1.0, "r_tail": 0.25, "target_length": 244,
/// "continuity": "continuous-piecewise"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub boundary: usize,
    pub r_head: f64,
    pub r_tail: f64,
    pub target_length: usize,
    #[serde(default)]
    pub continuity: Continuity,
}

impl RateSchedule {
    /// Rate 1 below position 20 and 0.25 from there on.
    pub fn asymmetric(target_length: usize) -> Self {
        RateSchedule {
            boundary: DEFAULT_BOUNDARY,
            r_head: DEFAULT_R_HEAD,
            r_tail: DEFAULT_R_TAIL,
            target_length,
            continuity: Continuity::ContinuousPiecewise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_head", self.r_head), ("r_tail", self.r_tail)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {r}"
                )));
            }
        }
        if self.target_length < self.boundary {
            return Err(Error::InvalidParameter(format!(
                "target_length {} is shorter than boundary {}",
                self.target_length, self.boundary
            )));
        }
        if self.target_length == 0 {
            return Err(Error::InvalidParameter("target_length must be >= 1".into()));
        }
        Ok(())
    }

    /// Source coordinate of target position `i`, without range checks.
    pub fn coordinate(&self, i: usize) -> f64 {
        match self.continuity {
            _ if i < self.boundary => i as f64 * self.r_head,
            Continuity::ContinuousPiecewise => {
                self.boundary as f64 * self.r_head + (i - self.boundary) as f64 * self.r_tail
            }
            Continuity::Literal => i as f64 * self.r_tail,
        }
    }
}

/// Source coordinate `j` for target position `i` of a table with
/// `source_len` rows. Fails when `j` leaves `[0, source_len - 1]`.
pub fn map_index(i: usize, sched: &RateSchedule, source_len: usize) -> Result<f64> {
    sched.validate()?;
    if i >= sched.target_length {
        return Err(Error::InvalidParameter(format!(
            "target position {i} is outside target_length {}",
            sched.target_length
        )));
    }
    checked_coordinate(i, sched, source_len)
}

fn checked_coordinate(i: usize, sched: &RateSchedule, source_len: usize) -> Result<f64> {
    let j = sched.coordinate(i);
    let max = source_len.saturating_sub(1);
    if !(0.0..=max as f64).contains(&j) {
        return Err(Error::IndexOutOfRange {
            index: i,
            coord: j,
            max,
        });
    }
    Ok(j)
}

/// Largest `target_length` whose every position maps inside a `source_len`-row
/// table, ignoring `sched.target_length` itself. `None` if unbounded.
pub fn max_target_length(sched: &RateSchedule, source_len: usize) -> Option<usize> {
    let max = source_len.checked_sub(1)? as f64;
    let head_len = |r: f64| (max / r).floor() as usize + 1;
    if (sched.boundary as f64 - 1.0) * sched.r_head > max || sched.boundary == 0 {
        // The head (or, with no head, the tail alone from position 0) runs out first.
        let r = if sched.boundary == 0 {
            sched.r_tail
        } else {
            sched.r_head
        };
        return Some(refine(sched, source_len, head_len(r)));
    }
    let tail_start = match sched.continuity {
        Continuity::ContinuousPiecewise => sched.boundary as f64 * sched.r_head,
        Continuity::Literal => sched.boundary as f64 * sched.r_tail,
    };
    if tail_start > max {
        return Some(sched.boundary);
    }
    let extra = ((max - tail_start) / sched.r_tail).floor() as usize + 1;
    Some(refine(sched, source_len, sched.boundary + extra))
}

// Absorbs floating-point rounding in the closed form by nudging the estimate
// against the actual coordinate function.
fn refine(sched: &RateSchedule, source_len: usize, mut n: usize) -> usize {
    let ok = |i: usize| checked_coordinate(i, sched, source_len).is_ok();
    while n > 0 && !ok(n - 1) {
        n -= 1;
    }
    while ok(n) {
        n += 1;
    }
    n
}

fn blend_row(p: &PositionalEmbeddingTable, j: f64, out: &mut [f64]) {
    let lo = j.floor();
    let frac = j - lo;
    let lo = lo as usize;
    let a = p.row(lo);
    if frac == 0.0 {
        out.copy_from_slice(a);
        return;
    }
    let b = p.row(lo + 1);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        let v = x + frac * (y - x);
        // keep the blend inside its bracket despite rounding
        *o = v.clamp(x.min(y), x.max(y));
    }
}

fn interpolate_with(
    p: &PositionalEmbeddingTable,
    target_length: usize,
    coord: impl Fn(usize) -> Result<f64> + Sync + Send,
) -> Result<PositionalEmbeddingTable> {
    let coords = (0..target_length).map(coord).collect::<Result<Vec<_>>>()?;
    let d = p.width();
    let mut out = vec![0.0; target_length * d];
    parallel::for_each_chunk(&mut out, d, |i, row| blend_row(p, coords[i], row));
    PositionalEmbeddingTable::new(Tensor::from_parts(
        vec![target_length, d],
        out,
        p.as_tensor().dtype(),
    ))
}

/// Extends `p` to `sched.target_length` rows by piecewise-linear interpolation.
pub fn interpolate_pe(
    p: &PositionalEmbeddingTable,
    sched: &RateSchedule,
) -> Result<PositionalEmbeddingTable> {
    sched.validate()?;
    if sched.target_length < 2 {
        return Err(Error::InvalidParameter("target_length must be >= 2".into()));
    }
    interpolate_with(p, sched.target_length, |i| {
        checked_coordinate(i, sched, p.len())
    })
}

/// Stretches `p` uniformly so that the first and last rows map onto the first
/// and last source rows.
pub fn uniform_interpolate_pe(
    p: &PositionalEmbeddingTable,
    target_length: usize,
) -> Result<PositionalEmbeddingTable> {
    if target_length < 2 {
        return Err(Error::InvalidParameter(format!(
            "target_length must be >= 2, got {target_length}"
        )));
    }
    let last = (p.len() - 1) as f64;
    let steps = (target_length - 1) as f64;
    interpolate_with(p, target_length, |i| {
        // i * (L-1) / (n-1), exact at both ends and at every integer coordinate
        Ok((i as f64 * last / steps).min(last))
    })
}

/// Keeps the source rows and appends `target_length - L` rows drawn from
/// `N(0, scale^2)` with a seeded generator.
pub fn random_tail_extend(
    p: &PositionalEmbeddingTable,
    target_length: usize,
    seed: u64,
    scale: f64,
) -> Result<PositionalEmbeddingTable> {
    if target_length < p.len() {
        return Err(Error::InvalidParameter(format!(
            "target_length {target_length} is shorter than the source table ({})",
            p.len()
        )));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "random tail scale must be finite and >= 0, got {scale}"
        )));
    }
    let normal = Normal::new(0.0, scale).map_err(|e| {
        Error::InvalidParameter(format!("random tail scale {scale} is invalid: {e}"))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = p.width();
    let mut data = p.as_tensor().data().to_vec();
    data.extend((0..(target_length - p.len()) * d).map(|_| normal.sample(&mut rng)));
    PositionalEmbeddingTable::new(Tensor::from_parts(
        vec![target_length, d],
        data,
        p.as_tensor().dtype(),
    ))
}
