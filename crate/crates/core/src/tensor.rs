//! Dense row-major tensors and the handful of kernels the rest of the crate is built on.
//!
//! Feature maps are channel-first (`C×H×W`). Matrices are `rows×cols`. All operations
//! allocate fresh outputs; a [`Tensor`] is never mutated through a shared reference.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A rank-1 tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(f).collect();
        let mut t = Self::zeros(shape);
        t.data = data;
        t
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim("dims3", "rank 3", format!("{:?}", self.shape))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", "rank 2", format!("{:?}", self.shape))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape[1] + h) * self.shape[2] + w]
    }

    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = (c * self.shape[1] + h) * self.shape[2] + w;
        self.data[i] = v;
    }

    /// Row `r` of a matrix as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Channel `c` of a `C×H×W` map as a flat `H·W` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "zip_map",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim("dot", self.len(), other.len()));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A location in continuous pixel coordinates of one feature map. `x` is horizontal.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = W·x + b`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = weight.dims2()?;
    if x.len() != n {
        return Err(Error::dim("linear", format!("input of length {n}"), x.len()));
    }
    if bias.len() != m {
        return Err(Error::dim("linear", format!("bias of length {m}"), bias.len()));
    }
    let out = (0..m).map(|j| dot(weight.row(j), x.data()) + bias.data()[j]).collect();
    Ok(Tensor::vector(out))
}

/// `out = Wᵀ·g` for a `rows×cols` matrix and `g` of length `rows`.
pub(crate) fn matvec_t(weight: &Tensor, g: &[f64], out: &mut [f64]) {
    let cols = weight.shape()[1];
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(&weight.data()[j * cols..(j + 1) * cols]) {
            *o += gj * w;
        }
    }
}

/// `acc += g ⊗ x` into a `len(g)×len(x)` row-major buffer.
pub(crate) fn outer_acc(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (j, &gj) in g.iter().enumerate() {
        for (a, &xv) in acc[j * cols..(j + 1) * cols].iter_mut().zip(x) {
            *a += gj * xv;
        }
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Numerically stable softmax over a slice (max-shifted).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 1 {
        return Err(Error::dim("softmax", "rank 1", format!("{:?}", x.shape())));
    }
    Ok(Tensor::vector(softmax_slice(x.data())))
}

/// Interpolation cell of a point: top-left corner and fractional offsets.
/// Uses `floor`, so integer coordinates select the cell to their right/below.
#[derive(Clone, Copy)]
struct Cell {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

impl Cell {
    fn of(p: Point2D) -> Self {
        let xf = p.x.floor();
        let yf = p.y.floor();
        Self {
            x0: xf as i64,
            y0: yf as i64,
            fx: p.x - xf,
            fy: p.y - yf,
        }
    }

    /// The four corners as `(x, y, weight)`, row-major order.
    fn corners(&self) -> [(i64, i64, f64); 4] {
        let (gx, gy) = (1.0 - self.fx, 1.0 - self.fy);
        [
            (self.x0, self.y0, gx * gy),
            (self.x0 + 1, self.y0, self.fx * gy),
            (self.x0, self.y0 + 1, gx * self.fy),
            (self.x0 + 1, self.y0 + 1, self.fx * self.fy),
        ]
    }
}

#[inline]
fn in_bounds(x: i64, y: i64, h: usize, w: usize) -> Option<usize> {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        Some(y as usize * w + x as usize)
    } else {
        None
    }
}

/// Accumulates `scale · map(p)` into `out` (length `C`) for a flat `C×H×W` buffer.
/// Shared by [`bilinear_sample`] and the attention kernels.
pub(crate) fn sample_accumulate(
    data: &[f64],
    (c, h, w): (usize, usize, usize),
    p: Point2D,
    scale: f64,
    out: &mut [f64],
) {
    if !p.x.is_finite() || !p.y.is_finite() {
        return;
    }
    let hw = h * w;
    for (x, y, wt) in Cell::of(p).corners() {
        if wt == 0.0 {
            continue;
        }
        if let Some(off) = in_bounds(x, y, h, w) {
            let k = scale * wt;
            for (ch, o) in out.iter_mut().enumerate().take(c) {
                *o += k * data[ch * hw + off];
            }
        }
    }
}

/// Backward pass of [`sample_accumulate`] with `scale = 1`: scatters `upstream` into
/// `grad_map` and returns `∂⟨upstream, map(p)⟩/∂(x, y)`.
pub(crate) fn sample_backward(
    data: &[f64],
    (c, h, w): (usize, usize, usize),
    p: Point2D,
    upstream: &[f64],
    grad_map: Option<&mut [f64]>,
) -> Point2D {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Point2D::default();
    }
    let hw = h * w;
    let cell = Cell::of(p);
    // ⟨upstream, map[:, y, x]⟩ at each corner, zero outside the map.
    let proj = |x: i64, y: i64| -> f64 {
        match in_bounds(x, y, h, w) {
            Some(off) => (0..c).map(|ch| upstream[ch] * data[ch * hw + off]).sum(),
            None => 0.0,
        }
    };
    let v00 = proj(cell.x0, cell.y0);
    let v10 = proj(cell.x0 + 1, cell.y0);
    let v01 = proj(cell.x0, cell.y0 + 1);
    let v11 = proj(cell.x0 + 1, cell.y0 + 1);
    let (gx, gy) = (1.0 - cell.fx, 1.0 - cell.fy);
    let dx = gy * (v10 - v00) + cell.fy * (v11 - v01);
    let dy = gx * (v01 - v00) + cell.fx * (v11 - v10);

    if let Some(gm) = grad_map {
        for (x, y, wt) in cell.corners() {
            if wt == 0.0 {
                continue;
            }
            if let Some(off) = in_bounds(x, y, h, w) {
                for ch in 0..c {
                    gm[ch * hw + off] += wt * upstream[ch];
                }
            }
        }
    }
    Point2D::new(dx, dy)
}

/// Bilinear interpolation of a `C×H×W` map at a fractional location, zero padded.
///
/// Lattice points reproduce stored values exactly; a point whose whole cell lies
/// outside the map yields the zero vector.
pub fn bilinear_sample(map: &Tensor, p: Point2D) -> Result<Tensor> {
    let dims = map.dims3()?;
    let mut out = vec![0.0; dims.0];
    sample_accumulate(map.data(), dims, p, 1.0, &mut out);
    Ok(Tensor::vector(out))
}

/// Gradients of `⟨upstream, bilinear_sample(map, p)⟩`.
#[derive(Clone, Debug)]
pub struct BilinearGrad {
    pub map: Tensor,
    pub point: Point2D,
}

/// Analytic gradient of [`bilinear_sample`]. The partials w.r.t. `p` are taken in the
/// cell selected by `floor`, i.e. the right-sided cell at integer coordinates.
pub fn bilinear_sample_grad(map: &Tensor, p: Point2D, upstream: &Tensor) -> Result<BilinearGrad> {
    let dims = map.dims3()?;
    if upstream.len() != dims.0 {
        return Err(Error::dim("bilinear_sample_grad", dims.0, upstream.len()));
    }
    let mut gm = Tensor::zeros(map.shape());
    let point = sample_backward(map.data(), dims, p, upstream.data(), Some(gm.data_mut()));
    Ok(BilinearGrad { map: gm, point })
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_diff_grad"));
        }
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error used by the gradient checks: `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero partials from turning round-off into huge ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
