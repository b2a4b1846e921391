use serde::{Deserialize, Serialize};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.data.len(),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sub-tensor `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Tensor {
        let inner: usize = numel(&self.shape[1..]);
        Tensor::new(&self.shape[1..], self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(&shape, data)
    }

    /// Broadcasts `self` to `shape` (numpy rules, leading dims padded with 1).
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        let src = padded_shape(&self.shape, shape.len());
        for (s, d) in src.iter().zip(shape) {
            assert!(*s == *d || *s == 1, "cannot expand {:?} to {shape:?}", self.shape);
        }
        if src == shape {
            return self.clone().reshape(shape);
        }
        let src_strides = strides(&src);
        let eff: Vec<usize> = src
            .iter()
            .zip(&src_strides)
            .map(|(&n, &st)| if n == 1 { 0 } else { st })
            .collect();
        let mut out = Vec::with_capacity(numel(shape));
        let mut idx = vec![0usize; shape.len()];
        let total = numel(shape);
        let mut offset = 0usize;
        for _ in 0..total {
            out.push(self.data[offset]);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                offset += eff[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                offset -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(shape, out)
    }

    /// Sums `self` down to `shape`; the adjoint of [`Tensor::expand`].
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        let dst = padded_shape(shape, self.shape.len());
        if dst == self.shape {
            return self.clone().reshape(shape);
        }
        let dst_strides = strides(&dst);
        let eff: Vec<usize> = dst
            .iter()
            .zip(&dst_strides)
            .map(|(&n, &st)| if n == 1 { 0 } else { st })
            .collect();
        let mut out = vec![0.0; numel(shape)];
        let mut idx = vec![0usize; self.shape.len()];
        let mut offset = 0usize;
        for &v in &self.data {
            out[offset] += v;
            for ax in (0..self.shape.len()).rev() {
                idx[ax] += 1;
                offset += eff[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                offset -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(shape, out)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, out)
    }

    /// Zero-pads along `axis` so that `self` occupies `[start, start + len)` of `total`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let len = self.shape[axis];
        assert!(start + len <= total, "pad out of range");
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let mut shape = self.shape.clone();
        shape[axis] = total;
        let mut out = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let src = &self.data[o * len * inner..(o + 1) * len * inner];
            let dst = o * total * inner + start * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        Tensor::new(&shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape();
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.shape.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in p.shape.iter().zip(first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch");
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        Tensor::new(&shape, out)
    }
}

fn padded_shape(shape: &[usize], ndim: usize) -> Vec<usize> {
    assert!(shape.len() <= ndim, "rank {} exceeds {ndim}", shape.len());
    let mut v = vec![1; ndim - shape.len()];
    v.extend_from_slice(shape);
    v
}

/// `c = op(a) * op(b) + beta * c` for row-major `a` (`m x k` after op) and `b` (`k x n` after op).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m*k, k*n and m*n elements addressed
    // by the row/column strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_and_sum_to_are_adjoint() {
        let a = Tensor::new(&[2, 1, 3], vec![1., 2., 3., 4., 5., 6.]);
        let e = a.expand(&[2, 4, 3]);
        assert_eq!(e.shape(), &[2, 4, 3]);
        assert_eq!(e.data()[3..6], [1., 2., 3.]);
        let back = e.sum_to(&[2, 1, 3]);
        assert_eq!(back.data(), &[4., 8., 12., 16., 20., 24.]);
        let s = Tensor::scalar(2.0).expand(&[2, 2]);
        assert_eq!(s.data(), &[2.0; 4]);
        assert_eq!(s.sum_to(&[]).item(), 8.0);
    }

    #[test]
    fn narrow_pad_concat() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let n = a.narrow(1, 1, 2);
        assert_eq!(n.data(), &[2., 3., 5., 6.]);
        let p = n.pad_axis(1, 1, 3);
        assert_eq!(p.data(), &[0., 2., 3., 0., 5., 6.]);
        let c = Tensor::concat(&[&a.narrow(1, 0, 1), &n], 1);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19., 22., 43., 50.]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26., 30., 38., 44.]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17., 23., 39., 53.]);
    }
}
