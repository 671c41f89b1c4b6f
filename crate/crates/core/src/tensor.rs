//! Dense row-major `f64` tensors.
//!
//! Images and feature maps use the `(batch, channel, height, width)` layout.
//! Parameters may have any rank.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    ///
    /// Panics if the tensor is not rank 4; every image-shaped entry point
    /// validates rank before reaching here.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn check_nchw(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected (N,C,H,W), got {:?}",
                self.shape
            )));
        }
        Ok(self.dims4())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, h, w) = self.dims4();
        self.data[((n * cs + c) * h + y) * w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let (_, cs, h, w) = self.dims4();
        self.data[((n * cs + c) * h + y) * w + x] = v;
    }

    /// One batch item as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let (_, c, h, w) = self.dims4();
        let plane = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[n * plane..(n + 1) * plane].to_vec(),
        }
    }

    /// Stacks `(1, C, H, W)` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::ShapeMismatch("stack of zero tensors".into()))?;
        let (_, c, h, w) = first.check_nchw("stack")?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n_total = 0;
        for t in items {
            let (n, c2, h2, w2) = t.check_nchw("stack")?;
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "stack: {:?} vs {:?}",
                    first.shape, t.shape
                )));
            }
            n_total += n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![n_total, c, h, w],
            data,
        })
    }

    /// Copies a spatial window `[y0, y0+h) x [x0, x0+w)` from every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let (n, c, sh, sw) = self.check_nchw("crop")?;
        if y0 + h > sh || x0 + w > sw {
            return Err(Error::CropTooLarge(format!(
                "window {h}x{w} at ({y0},{x0}) exceeds {sh}x{sw}"
            )));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(sh * sw) {
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * sw + x0..y * sw + x0 + w]);
            }
        }
        Ok(Tensor {
            shape: vec![n, c, h, w],
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Tensor {
        let (_, _, _, w) = self.dims4();
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Repeats a single-channel tensor across `channels` channels.
    pub fn repeat_channels(&self, channels: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.check_nchw("repeat_channels")?;
        if c != 1 {
            return Err(Error::ChannelMismatch(format!(
                "repeat_channels expects 1 channel, got {c}"
            )));
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for plane in self.data.chunks(h * w) {
            for _ in 0..channels {
                data.extend_from_slice(plane);
            }
        }
        Ok(Tensor {
            shape: vec![n, channels, h, w],
            data,
        })
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
