//! Dense f32 kernels used by the transformer: row-major matrices, matrix
//! products, RMS normalization, activations, rotary position embedding and
//! masked softmax attention.
//!
//! Every kernel computes each output row from its own input row only, in a
//! fixed summation order. Batching rows differently therefore never changes
//! a result bit, which is what lets the cached, chunked and selective
//! forward paths be compared against full attention exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite matrix entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Appends `n` zero rows.
    pub fn grow(&mut self, n: usize) {
        self.data.resize((self.rows + n) * self.cols, 0.0);
        self.rows += n;
    }

    /// Appends all rows of `other`.
    pub fn extend_rows(&mut self, other: &Matrix) -> Result<()> {
        if self.rows > 0 && other.rows > 0 && other.cols != self.cols {
            return Err(Error::Dimension(format!(
                "cannot append {}-column rows to a {}-column matrix",
                other.cols, self.cols
            )));
        }
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Copies rows `range` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gathers the listed rows into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · rhs`, where `rhs` is stored `[in, out]`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            vec_matmul(self.row(i), rhs, out.row_mut(i));
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Dimension(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in r.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `out = x · w` for a single row, `w` stored `[in, out]`.
#[inline]
pub fn vec_matmul(x: &[f32], w: &Matrix, out: &mut [f32]) {
    out.fill(0.0);
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(w.row(k)) {
            *o += a * b;
        }
    }
}

/// Root-mean-square normalization with a learned per-channel gain.
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f32]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// Rotary embedding parameters for one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
}

impl Default for RopeParams {
    fn default() -> Self {
        Self {
            head_dim: 64,
            base: 10_000.0,
        }
    }
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let p = Self { head_dim, base };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "rotary head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rotary base must exceed 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    #[inline]
    fn inv_freq(&self, pair: usize) -> f64 {
        self.base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    /// Rotates one head-sized slice in place by `position` (may be negative).
    pub fn rotate_in_place(&self, v: &mut [f32], position: f64) {
        debug_assert_eq!(v.len(), self.head_dim);
        for i in 0..self.head_dim / 2 {
            let angle = position * self.inv_freq(i);
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (sin as f32, cos as f32);
            let a = v[2 * i];
            let b = v[2 * i + 1];
            v[2 * i] = a * cos - b * sin;
            v[2 * i + 1] = a * sin + b * cos;
        }
    }

    /// Rotates every head of a `[n_heads · head_dim]` row.
    pub fn rotate_heads(&self, row: &mut [f32], position: usize) {
        for head in row.chunks_exact_mut(self.head_dim) {
            self.rotate_in_place(head, position as f64);
        }
    }
}

fn check_rope_input(vector: &[f32], params: &RopeParams) -> Result<()> {
    params.validate()?;
    if vector.len() != params.head_dim {
        return Err(Error::Dimension(format!(
            "rotary input has {} values, head_dim is {}",
            vector.len(),
            params.head_dim
        )));
    }
    Ok(())
}

/// Applies rotary position embedding at `position`: pairs `(v[2i], v[2i+1])`
/// are rotated by `position · base^(-2i/head_dim)`.
pub fn rope_apply(vector: &[f32], position: usize, params: &RopeParams) -> Result<Vec<f32>> {
    check_rope_input(vector, params)?;
    let mut out = vector.to_vec();
    params.rotate_in_place(&mut out, position as f64);
    Ok(out)
}

/// Inverse of [`rope_apply`] at the same position.
pub fn rope_invert(vector: &[f32], position: usize, params: &RopeParams) -> Result<Vec<f32>> {
    check_rope_input(vector, params)?;
    let mut out = vector.to_vec();
    params.rotate_in_place(&mut out, -(position as f64));
    Ok(out)
}

/// The two logit knobs applied before the softmax:
/// `logit = scale · q·k / (√d · temperature)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionKnobs {
    pub temperature: f32,
    pub scale: f32,
}

impl Default for AttentionKnobs {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

impl AttentionKnobs {
    pub const NEUTRAL: Self = Self {
        temperature: 1.0,
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attention temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attention scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Multiplier applied to raw dot products for head dimension `d`.
    #[inline]
    pub fn logit_factor(&self, d: usize) -> f32 {
        self.scale / ((d as f32).sqrt() * self.temperature)
    }
}

/// Attention of one query slice over the first `visible` key rows.
///
/// `col` selects the head's column window in `keys`/`values`. Keys beyond
/// `visible` are masked (weight exactly 0, equivalent to an additive −∞
/// logit). `weights[..visible]` receives the softmax row, `out` the
/// weighted value sum.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    col: usize,
    visible: usize,
    factor: f32,
    weights: &mut [f32],
    out: &mut [f32],
) {
    let d = q.len();
    out.fill(0.0);
    if visible == 0 {
        return;
    }
    let w = &mut weights[..visible];
    for (j, wj) in w.iter_mut().enumerate() {
        *wj = dot(q, &keys.row(j)[col..col + d]) * factor;
    }
    softmax_in_place(w);
    for (j, &wj) in w.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&values.row(j)[col..col + d]) {
            *o += wj * v;
        }
    }
}

/// Single-head causal attention.
///
/// Query row `i` sees key rows `0..=i + mask_offset`. Returns the output
/// `weights · V` and the full `[Q.rows, K.rows]` weight matrix (masked
/// entries zero).
pub fn causal_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    temperature: f32,
    scale: f32,
    mask_offset: i64,
) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(Error::Dimension(format!("K has {} rows, V has {}", k.rows(), v.rows())));
    }
    if q.cols() != k.cols() {
        return Err(Error::Dimension(format!(
            "Q has {} columns, K has {}",
            q.cols(),
            k.cols()
        )));
    }
    if v.cols() != k.cols() {
        return Err(Error::Dimension(format!(
            "V has {} columns, K has {}",
            v.cols(),
            k.cols()
        )));
    }
    let knobs = AttentionKnobs { temperature, scale };
    knobs.validate()?;
    let factor = knobs.logit_factor(q.cols());
    let n_keys = k.rows();
    let mut output = Matrix::zeros(q.rows(), v.cols());
    let mut weights = Matrix::zeros(q.rows(), n_keys);
    for i in 0..q.rows() {
        let visible = (i as i64 + mask_offset + 1).clamp(0, n_keys as i64) as usize;
        let mut out_row = vec![0.0; v.cols()];
        attend_row(q.row(i), k, v, 0, visible, factor, weights.row_mut(i), &mut out_row);
        output.row_mut(i).copy_from_slice(&out_row);
    }
    Ok((output, weights))
}
