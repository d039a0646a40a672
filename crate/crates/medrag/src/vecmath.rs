//! Dense vector arithmetic, similarity, projection, and derivative-checking
//! utilities shared by every other module.
//!
//! Everything here is a pure function over `f64` slices or the two small
//! value types [`Embedding`] and [`PixelGrid`]. All math is 64-bit; the
//! gradient checks elsewhere in the crate depend on that.

use crate::error::{Error, Result};

/// A dense vector in the shared image/text embedding space.
///
/// Components are guaranteed finite; the dimension is fixed by whichever
/// encoder produced the vector. The all-zero vector is representable (it is
/// the "no context" placeholder) but is rejected by direction-dependent
/// operations such as [`cosine`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("embedding must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding component"));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Unit-norm copy; errors on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.l2_norm();
        if n == 0.0 {
            return Err(Error::DegenerateVector("embedding"));
        }
        Ok(Embedding(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Embedding::new(self.0.iter().map(|v| v * c).collect())
    }

    /// `self + c * other`, dimension-checked.
    pub fn add_scaled(&self, c: f64, other: &[f64]) -> Result<Self> {
        if other.len() != self.0.len() {
            return Err(Error::DimensionMismatch {
                context: "embedding add",
                expected: self.0.len(),
                got: other.len(),
            });
        }
        Embedding::new(
            self.0
                .iter()
                .zip(other)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// An H x W grid of real-valued pixel intensities, row-major.
///
/// Values are finite; projection and clamping keep them in `[0, 1]`, but a
/// grid may leave that range transiently in the middle of a gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "pixel grid data",
                expected: height * width,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel value"));
        }
        Ok(PixelGrid {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        PixelGrid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        PixelGrid {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &PixelGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Every pixel clamped into `[0, 1]`.
    pub fn clamp01(&self) -> PixelGrid {
        PixelGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Max absolute pixel difference; shapes must match.
    pub fn linf_distance(&self, other: &PixelGrid) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_mismatch(self, other));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn shape_mismatch(expected: &PixelGrid, got: &PixelGrid) -> Error {
    Error::ShapeMismatch {
        expected_h: expected.height,
        expected_w: expected.width,
        got_h: got.height,
        got_w: got.width,
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity `dot(u,v) / (|u| |v|)`.
///
/// Zero-norm inputs are an explicit error, never a silent zero: a zero
/// vector has no direction and usually signals an encoder bug upstream.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine",
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("cosine input"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Project `x` onto the L-infinity ball of radius `eps` around `center`,
/// then clamp into `[0, 1]` per coordinate.
///
/// The projection is an exact per-coordinate clamp, so it is idempotent
/// bit-for-bit and the returned grid always satisfies
/// `|out - center|_inf <= eps` when `center` itself lies in `[0, 1]`.
pub fn project_linf(x: &PixelGrid, center: &PixelGrid, eps: f64) -> Result<PixelGrid> {
    if !x.same_shape(center) {
        return Err(shape_mismatch(center, x));
    }
    if !(eps >= 0.0) {
        return Err(Error::Precondition(format!(
            "projection radius must be >= 0, got {eps}"
        )));
    }
    let data = x
        .data
        .iter()
        .zip(&center.data)
        .map(|(&xi, &ci)| {
            let mut v = xi.clamp(ci - eps, ci + eps).clamp(0.0, 1.0);
            // `ci +/- eps` rounds, which can leave `|v - ci|` one ulp above
            // eps; walk back toward the center until the bound holds under
            // the same float comparison the invariant check uses
            while (v - ci).abs() > eps {
                v = if v > ci { v.next_down() } else { v.next_up() };
            }
            v
        })
        .collect();
    Ok(PixelGrid {
        height: x.height,
        width: x.width,
        data,
    })
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The oracle other modules verify their analytic gradients against; it must
/// stay independent of any of those implementations.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Max component-wise error of `approx` against `reference`, relative to the
/// largest reference component (floored at 1 so near-zero gradients compare
/// absolutely).
pub fn max_rel_error(reference: &[f64], approx: &[f64]) -> f64 {
    assert_eq!(reference.len(), approx.len());
    let scale = reference
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    reference
        .iter()
        .zip(approx)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// `y = M x` for a row-major `rows x cols` matrix.
pub fn matvec(matrix: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| dot(&matrix[r * cols..(r + 1) * cols], x))
        .collect()
}

/// `y = M^T x` for a row-major `rows x cols` matrix.
pub fn matvec_transpose(matrix: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(matrix.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for r in 0..rows {
        let xr = x[r];
        for c in 0..cols {
            y[c] += matrix[r * cols + c] * xr;
        }
    }
    y
}
