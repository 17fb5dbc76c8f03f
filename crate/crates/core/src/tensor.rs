//! Dense row-major tensors over a [`Scalar`] type.
//!
//! Shapes follow the CHW convention for feature grids: `[channels, height,
//! width]`. Matrices are `[rows, cols]`, scalars `[1]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a `[1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Channels of a CHW tensor.
    pub fn channels(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[0]
    }

    /// Height of a CHW tensor.
    pub fn height(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[1]
    }

    /// Width of a CHW tensor.
    pub fn width(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        self.shape[2]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|x| x * k)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64_c(self.len() as f64)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element-wise to another scalar precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_c(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Concatenates CHW tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        for p in parts {
            if p.shape.len() != 3 || p.height() != h || p.width() != w {
                return Err(Error::Shape(format!(
                    "concat operand {:?} incompatible with {}x{}",
                    p.shape, h, w
                )));
            }
            channels += p.channels();
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![channels, h, w],
            data,
        })
    }

    /// Row-major matrix product of 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul shapes {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    /// 2-D transpose, materialized.
    pub fn transposed(&self) -> Self {
        debug_assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }
}

/// Bilinear resampling of a CHW tensor (half-pixel centers, edges clamped).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if out_h == h && out_w == w {
        return x.clone();
    }
    let mut out = Tensor::zeros(vec![c, out_h, out_w]);
    let taps_y = resize_taps(h, out_h);
    let taps_x = resize_taps(w, out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            let (y0, y1, fy) = taps_y[oy];
            for ox in 0..out_w {
                let (x0, x1, fx) = taps_x[ox];
                let one = T::one();
                let v = x.at3(ch, y0, x0) * (one - fy) * (one - fx)
                    + x.at3(ch, y0, x1) * (one - fy) * fx
                    + x.at3(ch, y1, x0) * fy * (one - fx)
                    + x.at3(ch, y1, x1) * fy * fx;
                out.set3(ch, oy, ox, v);
            }
        }
    }
    out
}

/// Per-output-pixel source taps `(lo, hi, frac)` for bilinear resampling.
pub(crate) fn resize_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            (lo, hi, T::from_f64_c(frac.clamp(0.0, 1.0)))
        })
        .collect()
}

/// Area-averaging downsample of a CHW tensor; each output pixel averages its
/// (possibly fractional) source box. Used to bring ground truth down to the
/// prediction resolution.
pub fn area_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if out_h == h && out_w == w {
        return x.clone();
    }
    let spans_y = area_spans(h, out_h);
    let spans_x = area_spans(w, out_w);
    let mut out = Tensor::zeros(vec![c, out_h, out_w]);
    for ch in 0..c {
        for (oy, sy) in spans_y.iter().enumerate() {
            for (ox, sx) in spans_x.iter().enumerate() {
                let mut acc = 0.0f64;
                let mut weight = 0.0f64;
                for &(y, wy) in sy {
                    for &(xx, wx) in sx {
                        let wgt = wy * wx;
                        acc += x.at3(ch, y, xx).to_f64().unwrap() * wgt;
                        weight += wgt;
                    }
                }
                out.set3(ch, oy, ox, T::from_f64_c(acc / weight));
            }
        }
    }
    out
}

fn area_spans(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o as f64 + 1.0) * scale;
            let mut span = Vec::new();
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(in_len);
            for i in first..last {
                let lo = (i as f64).max(start);
                let hi = ((i + 1) as f64).min(end);
                if hi > lo {
                    span.push((i, hi - lo));
                }
            }
            span
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_indexing() {
        let a = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.at3(0, 1, 1), 4.0);
        assert_eq!(c.at3(2, 0, 0), 4.0);
    }

    #[test]
    fn matmul_against_by_hand() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f64>::new(vec![1, 2, 2], vec![3.0; 4]).unwrap();
        let up = bilinear_resize(&x, 5, 7);
        assert!(up.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        let same = bilinear_resize(&x, 2, 2);
        assert_eq!(same, x);
    }

    #[test]
    fn area_downsample_exact_factor() {
        // 4x4 -> 2x2 averages disjoint 2x2 blocks.
        let x = Tensor::<f64>::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let d = area_resize(&x, 2, 2);
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn area_preserves_mean_for_fractional_ratio() {
        let x = Tensor::<f64>::new(vec![1, 5, 5], (0..25).map(f64::from).collect()).unwrap();
        let d = area_resize(&x, 2, 2);
        assert!((d.mean() - x.mean()).abs() < 1e-12);
    }
}
