//! Dense row-major `f64` tensors with copy-on-write storage.

use std::fmt;
use std::sync::Arc;

/// A dense, row-major tensor of `f64` values.
///
/// Storage is reference counted, so cloning a tensor is cheap; mutation goes
/// through [`Tensor::data_mut`], which copies only when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data.as_slice())
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.len())
        }
    }
}

impl Tensor {
    /// Panics if `data.len()` does not match the element count of `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Self { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "cannot reshape {:?} to {:?}", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::new(
            &self.shape,
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copy of sample `i` along the leading axis, keeping a leading axis of 1.
    pub fn select_batch(&self, i: usize) -> Tensor {
        assert!(self.ndim() >= 1 && i < self.shape[0]);
        let per = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Stack tensors of identical shape `[1, ...]` or `[...]` along a new/leading axis.
    pub fn stack_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack_batch of nothing");
        let inner: Vec<usize> = if items[0].ndim() > 0 && items[0].shape[0] == 1 {
            items[0].shape[1..].to_vec()
        } else {
            items[0].shape.clone()
        };
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.len(), items[0].len(), "stack_batch size mismatch");
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading a tensor of shape `src` as if broadcast to `dst`
/// (zero stride along broadcast axes).
fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let offset = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// Calls `f(dst_index, src_index)` for every element of `dst`, where `src_index`
/// is the flat index of the broadcast source element.
fn for_each_broadcast(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(src, dst);
    let n: usize = dst.iter().product();
    if dst.is_empty() {
        f(0, 0);
        return;
    }
    let rank = dst.len();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for flat in 0..n {
        f(flat, src_off);
        // Increment the multi-index, maintaining the source offset.
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src_off += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            src_off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl Tensor {
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let b = broadcast_shape(&self.shape, shape);
        assert!(
            b.as_deref() == Some(shape),
            "cannot broadcast {:?} to {:?}",
            self.shape,
            shape
        );
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let src = self.data();
        for_each_broadcast(&self.shape, shape, |d, s| out[d] = src[s]);
        Tensor::new(shape, out)
    }

    /// Sums over the axes along which `shape` was broadcast to reach `self.shape()`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let b = broadcast_shape(shape, &self.shape);
        assert!(
            b.as_deref() == Some(self.shape.as_slice()),
            "cannot sum {:?} down to {:?}",
            self.shape,
            shape
        );
        let mut out = vec![0.0; shape.iter().product()];
        let src = self.data();
        for_each_broadcast(shape, &self.shape, |d, s| out[s] += src[d]);
        Tensor::new(shape, out)
    }

    /// Elementwise binary op with numpy broadcasting.
    pub fn broadcast_zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        if other.len() == 1 {
            let b = other.data[0];
            return self.broadcast_to(&shape).map(|a| f(a, b));
        }
        if self.len() == 1 {
            let a = self.data[0];
            return other.broadcast_to(&shape).map(|b| f(a, b));
        }
        let a = self.broadcast_to(&shape);
        let b = other.broadcast_to(&shape);
        a.zip_map(&b, f)
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "transpose2 needs a matrix");
        let (r, c) = (self.shape[0], self.shape[1]);
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let small = Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]);
        let big = small.broadcast_to(&[2, 3, 4]);
        assert_eq!(big.shape(), &[2, 3, 4]);
        assert_eq!(big.data()[4], 2.0);
        let back = big.sum_to(&[1, 3, 1]);
        assert_eq!(back.data(), &[8.0, 16.0, 24.0]);
        assert_eq!(big.sum_to(&[]).item(), 48.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(t.transpose2().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(t.transpose2().transpose2(), t);
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 1.0);
    }
}
