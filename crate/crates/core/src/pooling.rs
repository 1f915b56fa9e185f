//! Score-guided 3D pooling of a `T x W x H x D` token grid.
//!
//! A window of `kernel` extents slides over the grid in `stride` steps. Each
//! output token is a reduction of the window's tokens whose weights are read
//! from the score tensor at the same positions, so the "kernel" changes with
//! every window and every prompt.
//!
//! Output extents follow `X' = floor((X - k) / d) + 1` on each axis; tokens at
//! the trailing edge not covered by a full window are dropped. Within a
//! window, tokens are always visited in ascending flat index order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Shape3, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    /// `sum(v * s)` over the window with the globally normalized scores as-is.
    WeightedSumLiteral,
    /// `sum(v * s) / sum(s)`: a convex combination of the window's tokens.
    #[default]
    WeightedAverage,
    /// The window token with the highest score; ties go to the lowest flat index.
    Max,
    /// Unweighted window mean; scores are not consulted.
    AverageBaseline,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::WeightedSumLiteral => "weighted-sum-literal",
            PoolMode::WeightedAverage => "weighted-average",
            PoolMode::Max => "max",
            PoolMode::AverageBaseline => "average-baseline",
        }
    }

    pub fn needs_scores(self) -> bool {
        self != PoolMode::AverageBaseline
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-sum-literal" | "weighted-sum" | "literal" => Ok(PoolMode::WeightedSumLiteral),
            "weighted-average" => Ok(PoolMode::WeightedAverage),
            "max" => Ok(PoolMode::Max),
            "average-baseline" | "average" => Ok(PoolMode::AverageBaseline),
            other => Err(Error::InvalidParameter(format!(
                "unknown pooling mode '{other}'"
            ))),
        }
    }
}

/// Kernel, stride and reduction mode of one pooling operator.
///
/// As JSON: `{"kernel": [kt, kw, kh], "stride": [dt, dw, dh], "mode": "weighted-average"}`.
/// `stride` defaults to `kernel` and `mode` to `weighted-average`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PoolingSpecRepr")]
pub struct PoolingSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub mode: PoolMode,
}

#[derive(Deserialize)]
struct PoolingSpecRepr {
    kernel: [usize; 3],
    stride: Option<[usize; 3]>,
    #[serde(default)]
    mode: PoolMode,
}

impl TryFrom<PoolingSpecRepr> for PoolingSpec {
    type Error = Error;

    fn try_from(r: PoolingSpecRepr) -> Result<Self> {
        PoolingSpec::new(r.kernel, r.stride.unwrap_or(r.kernel), r.mode)
    }
}

impl PoolingSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], mode: PoolMode) -> Result<Self> {
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "kernel {kernel:?} and stride {stride:?} must be >= 1 on every axis"
            )));
        }
        Ok(PoolingSpec {
            kernel,
            stride,
            mode,
        })
    }

    /// Kernel equal to stride on every axis.
    pub fn tiled(kernel: [usize; 3], mode: PoolMode) -> Result<Self> {
        Self::new(kernel, kernel, mode)
    }

    /// The default video setting: kernel and stride `(2, 3, 3)`.
    pub fn video() -> Self {
        PoolingSpec {
            kernel: [2, 3, 3],
            stride: [2, 3, 3],
            mode: PoolMode::WeightedAverage,
        }
    }

    /// The default image setting: kernel and stride `(1, 3, 3)`.
    pub fn image() -> Self {
        PoolingSpec {
            kernel: [1, 3, 3],
            stride: [1, 3, 3],
            mode: PoolMode::WeightedAverage,
        }
    }

    pub fn identity(mode: PoolMode) -> Self {
        PoolingSpec {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            mode,
        }
    }

    pub fn with_mode(self, mode: PoolMode) -> Self {
        PoolingSpec { mode, ..self }
    }

    pub fn window_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output grid extents for `spec` applied to an `input` grid.
pub fn output_shape(input: Shape3, spec: &PoolingSpec) -> Result<Shape3> {
    let ext = input.as_array();
    if (0..3).any(|a| spec.kernel[a] > ext[a]) {
        return Err(Error::KernelTooLarge {
            kernel: spec.kernel,
            input: ext,
        });
    }
    let axis = |a: usize| (ext[a] - spec.kernel[a]) / spec.stride[a] + 1;
    Shape3::new(axis(0), axis(1), axis(2))
}

/// `T*W*H / (T'*W'*H')`.
pub fn compression_ratio(input: Shape3, output: Shape3) -> f64 {
    input.tokens() as f64 / output.tokens() as f64
}

/// Window placement for one (input grid, spec) pair.
#[derive(Debug, Clone, Copy)]
struct Windows {
    input: Shape3,
    output: Shape3,
    kernel: [usize; 3],
    stride: [usize; 3],
}

impl Windows {
    fn new(input: Shape3, spec: &PoolingSpec) -> Result<Self> {
        Ok(Windows {
            input,
            output: output_shape(input, spec)?,
            kernel: spec.kernel,
            stride: spec.stride,
        })
    }

    fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let o = self.output;
        [cell / (o.w * o.h), (cell / o.h) % o.w, cell % o.h]
    }

    /// Visits the flat input positions of `cell`'s window in ascending order.
    #[inline]
    fn for_each(&self, cell: usize, mut f: impl FnMut(usize)) {
        let [t, w, h] = self.cell_coords(cell);
        let (t0, w0, h0) = (t * self.stride[0], w * self.stride[1], h * self.stride[2]);
        let (gw, gh) = (self.input.w, self.input.h);
        for i in 0..self.kernel[0] {
            for j in 0..self.kernel[1] {
                let base = ((t0 + i) * gw + (w0 + j)) * gh + h0;
                for k in 0..self.kernel[2] {
                    f(base + k);
                }
            }
        }
    }

    /// Output cells on one axis whose window covers input index `x`.
    fn covering(&self, axis: usize, x: usize) -> std::ops::Range<usize> {
        let (k, d) = (self.kernel[axis], self.stride[axis]);
        let n = self.output.as_array()[axis];
        let lo = if x + 1 >= k {
            (x + 1 - k).div_ceil(d)
        } else {
            0
        };
        let hi = (x / d + 1).min(n);
        lo..hi.max(lo)
    }

    /// Visits every output cell whose window contains input position `pos`,
    /// in ascending cell order.
    fn for_each_covering(&self, pos: usize, mut f: impl FnMut(usize)) {
        let g = self.input;
        let (t, w, h) = (pos / (g.w * g.h), (pos / g.h) % g.w, pos % g.h);
        let o = self.output;
        for ct in self.covering(0, t) {
            for cw in self.covering(1, w) {
                for ch in self.covering(2, h) {
                    f((ct * o.w + cw) * o.h + ch);
                }
            }
        }
    }
}

fn check_tokens(v: &Tensor) -> Result<(Shape3, usize)> {
    v.expect_rank("video features", 4)?;
    let grid = Shape3::of(v)?;
    let d = v.shape()[3];
    if d == 0 {
        return Err(Error::InvalidParameter(
            "channel width D must be >= 1".into(),
        ));
    }
    Ok((grid, d))
}

fn check_scores(grid: Shape3, s: &Tensor) -> Result<&[f64]> {
    s.expect_rank("scores", 3)?;
    if s.shape() != grid.as_array() {
        return Err(Error::InvalidParameter(format!(
            "score grid {:?} does not match video grid {:?}",
            s.shape(),
            grid.as_array()
        )));
    }
    if let Some((index, &value)) = s.data().iter().enumerate().find(|(_, &x)| x < 0.0) {
        return Err(Error::NegativeScore { index, value });
    }
    Ok(s.data())
}

fn required_scores(grid: Shape3, s: Option<&Tensor>, mode: PoolMode) -> Result<&[f64]> {
    let s = s.ok_or_else(|| {
        Error::InvalidParameter(format!("pooling mode {mode} requires a score tensor"))
    })?;
    check_scores(grid, s)
}

/// Per-window score totals, failing on the first window (in cell order) with none.
fn window_masses(win: &Windows, s: &[f64], reject_zero: bool) -> Result<Vec<f64>> {
    let masses = parallel::map_range(win.output.tokens(), |cell| {
        let mut m = 0.0;
        win.for_each(cell, |p| m += s[p]);
        m
    });
    if reject_zero {
        if let Some(cell) = masses.iter().position(|&m| m == 0.0) {
            return Err(Error::ZeroMassWindow {
                cell: win.cell_coords(cell),
            });
        }
    }
    Ok(masses)
}

/// Pools `v` (`T x W x H x D`) into a `T' x W' x H' x D` tensor.
///
/// `s` is the `T x W x H` score grid; it may be `None` only in
/// [`PoolMode::AverageBaseline`].
pub fn pool_forward(v: &Tensor, s: Option<&Tensor>, spec: &PoolingSpec) -> Result<Tensor> {
    let (grid, d) = check_tokens(v)?;
    let win = Windows::new(grid, spec)?;
    let vals = v.data();
    let o = win.output;
    let mut out = vec![0.0; o.tokens() * d];

    match spec.mode {
        PoolMode::WeightedSumLiteral => {
            let s = required_scores(grid, s, spec.mode)?;
            parallel::for_each_chunk(&mut out, d, |cell, row| {
                win.for_each(cell, |p| axpy(row, s[p], &vals[p * d..(p + 1) * d]));
            });
        }
        PoolMode::WeightedAverage => {
            let s = required_scores(grid, s, spec.mode)?;
            let masses = window_masses(&win, s, true)?;
            parallel::for_each_chunk(&mut out, d, |cell, row| {
                win.for_each(cell, |p| axpy(row, s[p], &vals[p * d..(p + 1) * d]));
                let m = masses[cell];
                row.iter_mut().for_each(|x| *x /= m);
            });
        }
        PoolMode::Max => {
            let s = required_scores(grid, s, spec.mode)?;
            parallel::for_each_chunk(&mut out, d, |cell, row| {
                let mut best = None::<usize>;
                win.for_each(cell, |p| {
                    if best.is_none_or(|b| s[p] > s[b]) {
                        best = Some(p);
                    }
                });
                let p = best.expect("windows are never empty");
                row.copy_from_slice(&vals[p * d..(p + 1) * d]);
            });
        }
        PoolMode::AverageBaseline => {
            if let Some(s) = s {
                check_scores(grid, s)?;
            }
            let n = spec.window_len() as f64;
            parallel::for_each_chunk(&mut out, d, |cell, row| {
                win.for_each(cell, |p| add(row, &vals[p * d..(p + 1) * d]));
                row.iter_mut().for_each(|x| *x /= n);
            });
        }
    }
    Ok(Tensor::from_parts(vec![o.t, o.w, o.h, d], out, v.dtype()))
}

/// Plain windowed mean of `v`; `spec.mode` is ignored.
pub fn average_pool(v: &Tensor, spec: &PoolingSpec) -> Result<Tensor> {
    pool_forward(v, None, &spec.with_mode(PoolMode::AverageBaseline))
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, &xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

#[inline]
fn add(acc: &mut [f64], x: &[f64]) {
    for (y, &xi) in acc.iter_mut().zip(x) {
        *y += xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of a pooled output with respect to the tokens and the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    /// `T x W x H x D`
    pub grad_v: Tensor,
    /// `T x W x H`
    pub grad_s: Tensor,
}

/// Adjoint of [`pool_forward`]: given `dL/dV'` returns `dL/dV` and `dL/dS`.
///
/// For weighted-average pooling the score gradient includes the quotient rule
/// through each window's normalizer. Positions outside every window get zero.
/// Max pooling has no gradient.
pub fn pool_backward(
    v: &Tensor,
    s: Option<&Tensor>,
    spec: &PoolingSpec,
    grad_out: &Tensor,
) -> Result<PoolGradients> {
    if spec.mode == PoolMode::Max {
        return Err(Error::NotDifferentiable("max"));
    }
    let (grid, d) = check_tokens(v)?;
    let win = Windows::new(grid, spec)?;
    let o = win.output;
    let expected = [o.t, o.w, o.h, d];
    if grad_out.shape() != expected {
        return Err(Error::InvalidParameter(format!(
            "output gradient has shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let vals = v.data();
    let g = grad_out.data();
    let n = grid.tokens();
    let mut grad_v = vec![0.0; n * d];

    let grad_s = match spec.mode {
        PoolMode::WeightedSumLiteral => {
            let s = required_scores(grid, s, spec.mode)?;
            parallel::for_each_chunk(&mut grad_v, d, |p, row| {
                win.for_each_covering(p, |c| axpy(row, s[p], &g[c * d..(c + 1) * d]));
            });
            parallel::map_range(n, |p| {
                let token = &vals[p * d..(p + 1) * d];
                let mut acc = 0.0;
                win.for_each_covering(p, |c| acc += dot(token, &g[c * d..(c + 1) * d]));
                acc
            })
        }
        PoolMode::WeightedAverage => {
            let s_full = s.ok_or_else(|| {
                Error::InvalidParameter("weighted-average pooling requires a score tensor".into())
            })?;
            let s = check_scores(grid, s_full)?;
            let masses = window_masses(&win, s, true)?;
            let pooled = pool_forward(v, Some(s_full), spec)?;
            let pooled = pooled.data();
            // <v'_c, g_c> per output cell.
            let out_dot = parallel::map_range(o.tokens(), |c| {
                dot(&pooled[c * d..(c + 1) * d], &g[c * d..(c + 1) * d])
            });
            parallel::for_each_chunk(&mut grad_v, d, |p, row| {
                win.for_each_covering(p, |c| axpy(row, s[p] / masses[c], &g[c * d..(c + 1) * d]));
            });
            parallel::map_range(n, |p| {
                let token = &vals[p * d..(p + 1) * d];
                let mut acc = 0.0;
                win.for_each_covering(p, |c| {
                    acc += (dot(token, &g[c * d..(c + 1) * d]) - out_dot[c]) / masses[c];
                });
                acc
            })
        }
        PoolMode::AverageBaseline => {
            let inv = 1.0 / spec.window_len() as f64;
            parallel::for_each_chunk(&mut grad_v, d, |p, row| {
                win.for_each_covering(p, |c| axpy(row, inv, &g[c * d..(c + 1) * d]));
            });
            vec![0.0; n]
        }
        PoolMode::Max => unreachable!(),
    };

    Ok(PoolGradients {
        grad_v: Tensor::from_parts(v.shape().to_vec(), grad_v, v.dtype()),
        grad_s: Tensor::from_parts(vec![grid.t, grid.w, grid.h], grad_s, v.dtype()),
    })
}

/// Flattens a pooled `T' x W' x H' x D` grid into an `N x D` token sequence.
pub fn flatten_tokens(pooled: Tensor) -> Result<Tensor> {
    let s = pooled.shape().to_vec();
    let d = *s.last().unwrap_or(&1);
    let n: usize = s[..s.len().saturating_sub(1)].iter().product();
    pooled.reshape(vec![n, d])
}

fn concat_tokens(parts: Vec<Tensor>, d: usize) -> Result<Tensor> {
    let dtype = parts[0].dtype();
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    for p in parts {
        data.extend(p.into_data());
    }
    let n = data.len() / d;
    Ok(Tensor::from_parts(vec![n, d], data, dtype))
}

/// Sum of scores over each window of a tiling, as a grid.
fn summed_scores(s: &Tensor, spec: &PoolingSpec) -> Result<Tensor> {
    let grid = Shape3::of(s)?;
    let win = Windows::new(grid, spec)?;
    let masses = window_masses(&win, s.data(), false)?;
    let o = win.output;
    Ok(Tensor::from_parts(vec![o.t, o.w, o.h], masses, s.dtype()))
}

/// Pools time and space in two independent branches and concatenates them.
///
/// The temporal branch first collapses each frame's `W x H` tokens into one
/// (score-weighted, with per-frame summed scores), then applies `spec_t` to the
/// resulting `T x 1 x 1` sequence. The spatial branch collapses the `T` axis
/// the same way and applies `spec_s` to the `1 x W x H` map. The result is an
/// `(T' + W'*H') x D` token sequence, temporal tokens first.
///
/// `spec_t` must have unit kernel and stride on both spatial axes, `spec_s`
/// on the temporal axis.
pub fn pool_separate_st(
    v: &Tensor,
    s: Option<&Tensor>,
    spec_t: &PoolingSpec,
    spec_s: &PoolingSpec,
) -> Result<Tensor> {
    let (grid, d) = check_tokens(v)?;
    if spec_t.kernel[1..] != [1, 1] || spec_t.stride[1..] != [1, 1] {
        return Err(Error::InvalidParameter(format!(
            "temporal branch must not pool space, got kernel {:?} stride {:?}",
            spec_t.kernel, spec_t.stride
        )));
    }
    if spec_s.kernel[0] != 1 || spec_s.stride[0] != 1 {
        return Err(Error::InvalidParameter(format!(
            "spatial branch must not pool time, got kernel {:?} stride {:?}",
            spec_s.kernel, spec_s.stride
        )));
    }
    let spatial_collapse = [1, grid.w, grid.h];
    let temporal_collapse = [grid.t, 1, 1];

    let mut parts = Vec::with_capacity(2);
    for (branch, collapse) in [(spec_t, spatial_collapse), (spec_s, temporal_collapse)] {
        let collapse = PoolingSpec::tiled(collapse, collapse_mode(branch.mode))?;
        let collapsed_v = pool_forward(v, s, &collapse)?;
        let collapsed_s = match s {
            Some(s) if branch.mode.needs_scores() => Some(summed_scores(s, &collapse)?),
            _ => None,
        };
        parts.push(pool_forward(&collapsed_v, collapsed_s.as_ref(), branch)?);
    }
    concat_tokens(parts, d)
}

/// Reduction used when collapsing an axis ahead of a branch's own pooling.
/// The literal weighted sum would apply the scores twice, so it collapses
/// with the normalized average instead.
fn collapse_mode(mode: PoolMode) -> PoolMode {
    match mode {
        PoolMode::WeightedSumLiteral | PoolMode::WeightedAverage => PoolMode::WeightedAverage,
        other => other,
    }
}

/// Pools with each spec independently and concatenates the flattened outputs
/// in spec order.
pub fn pool_multi(v: &Tensor, s: Option<&Tensor>, specs: &[PoolingSpec]) -> Result<Tensor> {
    if specs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "multi-branch pooling needs at least two specs, got {}",
            specs.len()
        )));
    }
    let (_, d) = check_tokens(v)?;
    let parts = specs
        .iter()
        .map(|spec| pool_forward(v, s, spec))
        .collect::<Result<Vec<_>>>()?;
    concat_tokens(parts, d)
}

/// Token count of [`pool_multi`] for an input grid.
pub fn multi_token_count(input: Shape3, specs: &[PoolingSpec]) -> Result<usize> {
    specs
        .iter()
        .map(|s| output_shape(input, s).map(|o| o.tokens()))
        .sum()
}
