//! Minimal dense f64 arrays: shapes, axis reductions, per-channel affine maps.
//!
//! Conventions used across the crate: a feature map is `D x H x W`, a batch
//! is `B x D x H x W`, an augmented batch is `B x N x D x H x W`. Storage is
//! always row-major and owned; sizes are small enough that copies are cheap.

use crate::error::{Error, Result};

/// Ordered list of positive extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!("shape extents must be >= 1, got {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }
}

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], values: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if values.len() != shape.len() {
            return Err(Error::usage(format!(
                "value count {} does not match shape {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("tensor contains non-finite values"));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let shape = Shape::new(dims).expect("zeros: invalid shape");
        let n = shape.len();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn full(dims: &[usize], v: f64) -> Self {
        let shape = Shape::new(dims).expect("full: invalid shape");
        let n = shape.len();
        Tensor { shape, values: vec![v; n] }
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Reinterpret the flat buffer under a new shape with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(dims, self.values.clone())
    }

    /// Concatenate tensors of identical shape along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("stack requires at least one tensor"))?;
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(first.shape());
        let mut values = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::usage("stack requires equal shapes"));
            }
            values.extend_from_slice(p.values());
        }
        Tensor::new(&dims, values)
    }

    /// Extract the `i`-th slice along axis 0, dropping that axis.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 1 || i >= self.shape()[0] {
            return Err(Error::usage(format!("index {i} out of range for axis 0")));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let values = self.values[i * inner..(i + 1) * inner].to_vec();
        Tensor::new(&self.shape()[1..].to_vec(), values)
    }
}

fn check_axes(rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() {
        return Err(Error::usage("duplicate reduction axes"));
    }
    if sorted.iter().any(|&a| a >= rank) {
        return Err(Error::usage(format!("axis out of range for rank {rank}: {axes:?}")));
    }
    if sorted.len() == rank {
        // reducing every axis leaves a scalar, represented as shape [1]
        return Ok(sorted);
    }
    Ok(sorted)
}

fn reduced_dims(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Walk the tensor once, mapping each flat offset to the flat offset of its
/// retained-index slot, and fold with `f`.
fn reduce_with<F: FnMut(usize, f64)>(t: &Tensor, axes: &[usize], mut f: F) {
    let shape = t.shape();
    let rank = shape.len();
    let kept: Vec<usize> = (0..rank).filter(|i| !axes.contains(i)).collect();
    // strides of the output over the kept axes
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1usize;
    for &ax in kept.iter().rev() {
        out_strides[ax] = stride;
        stride *= shape[ax];
    }
    let mut idx = vec![0usize; rank];
    for &v in t.values() {
        let out_off: usize = kept.iter().map(|&ax| idx[ax] * out_strides[ax]).sum();
        f(out_off, v);
        // row-major increment
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Arithmetic mean over the given axes; reduced axes are removed.
pub fn reduce_mean(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let axes = check_axes(t.rank(), axes)?;
    let out_dims = reduced_dims(t.shape(), &axes);
    let count: usize = axes.iter().map(|&a| t.shape()[a]).product();
    let mut sums = vec![0.0f64; out_dims.iter().product()];
    reduce_with(t, &axes, |off, v| sums[off] += v);
    for s in sums.iter_mut() {
        *s /= count as f64;
    }
    Tensor::new(&out_dims, sums)
}

/// Population variance over the given axes, relative to a precomputed `mean`
/// (which must be `reduce_mean(t, axes)`).
pub fn reduce_var(t: &Tensor, mean: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let axes = check_axes(t.rank(), axes)?;
    let out_dims = reduced_dims(t.shape(), &axes);
    if mean.shape() != out_dims.as_slice() {
        return Err(Error::usage(format!(
            "mean shape {:?} does not match reduced shape {out_dims:?}",
            mean.shape()
        )));
    }
    let count: usize = axes.iter().map(|&a| t.shape()[a]).product();
    let mut acc = vec![0.0f64; mean.len()];
    let means = mean.values();
    reduce_with(t, &axes, |off, v| {
        let d = v - means[off];
        acc[off] += d * d;
    });
    for s in acc.iter_mut() {
        *s /= count as f64;
        // guard tiny negative round-off
        if *s < 0.0 {
            *s = 0.0;
        }
    }
    Tensor::new(&out_dims, acc)
}

/// out[.., c, ..] = scale[c] * t[.., c, ..] + shift[c] along `channel_axis`.
pub fn affine_map(t: &Tensor, scale: &[f64], shift: &[f64], channel_axis: usize) -> Result<Tensor> {
    if channel_axis >= t.rank() {
        return Err(Error::usage("channel axis out of range"));
    }
    let d = t.shape()[channel_axis];
    if scale.len() != d || shift.len() != d {
        return Err(Error::usage(format!(
            "scale/shift length {}/{} does not match channel extent {d}",
            scale.len(),
            shift.len()
        )));
    }
    let inner: usize = t.shape()[channel_axis + 1..].iter().product();
    let mut out = t.values().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let c = (i / inner) % d;
        *v = scale[c] * *v + shift[c];
    }
    Tensor::new(t.shape(), out)
}
