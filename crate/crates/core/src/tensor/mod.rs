//! Dense row-major `f64` tensors and the handful of operations the attention
//! blocks are built from.
//!
//! Tensors are immutable values: every operation returns a new tensor.

pub mod kernels;
pub mod rng;
pub mod tracking;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
pub use rng::{Distribution, SplitMix64};

const ELEM_BYTES: usize = std::mem::size_of::<f64>();

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a row-major copy of `values`.
    pub fn from_values(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.to_vec())
    }

    /// Takes ownership of `values` as the row-major buffer.
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Construction {
                shape: shape.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        Ok(Self::wrap(shape.to_vec(), values))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_dims(shape)?;
        let len = shape.iter().product();
        Ok(Self::wrap(shape.to_vec(), vec![value; len]))
    }

    /// Deterministic fill from the in-crate SplitMix64 stream.
    pub fn seeded_fill(shape: &[usize], seed: u64, distribution: Distribution) -> Result<Self> {
        check_dims(shape)?;
        let len = shape.iter().product();
        let mut rng = SplitMix64::new(seed);
        let data = (0..len).map(|_| distribution.sample(&mut rng)).collect();
        Ok(Self::wrap(shape.to_vec(), data))
    }

    /// Internal constructor for buffers whose length is already known to match.
    pub(crate) fn wrap(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        tracking::record_alloc(data.len() * ELEM_BYTES);
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        let data = std::mem::take(&mut self.data);
        tracking::record_free(data.len() * ELEM_BYTES);
        data
    }

    /// Element at a multi-index; panics when the index is out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of range for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )),
        }
    }

    pub fn dims3(&self) -> Result<Shape3> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok(Shape3::new(c, h, w)),
            _ => Err(shape_err!(
                "expected a 3-D tensor, got shape {:?}",
                self.shape
            )),
        }
    }

    /// Copy with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(shape)
    }

    /// Reinterprets the buffer under a new shape without copying.
    pub fn into_shape(mut self, shape: &[usize]) -> Result<Tensor> {
        check_dims(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if start >= end || end > m {
            return Err(shape_err!("row range {start}..{end} invalid for {m} rows"));
        }
        Ok(Self::wrap(
            vec![end - start, k],
            self.data[start * k..end * k].to_vec(),
        ))
    }

    /// Columns of a 2-D tensor picked by index, in the given order.
    pub fn gather_columns(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        if indices.is_empty() {
            return Err(shape_err!("cannot gather zero columns"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(shape_err!("column {bad} out of range for {k} columns"));
        }
        let s = indices.len();
        let mut data = Vec::with_capacity(m * s);
        for row in self.data.chunks(k) {
            data.extend(indices.iter().map(|&i| row[i]));
        }
        Ok(Self::wrap(vec![m, s], data))
    }

    /// Standard matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, p) = rhs.dims2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                rhs.shape
            ));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_into(&self.data, &rhs.data, &mut out, k, p);
        Ok(Self::wrap(vec![m, p], out))
    }

    /// Materialized transpose of a 2-D tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let mut out = vec![0.0; m * k];
        // Tiled to keep both sides cache-resident on large inputs.
        const TILE: usize = 32;
        for ib in (0..m).step_by(TILE) {
            for jb in (0..k).step_by(TILE) {
                for i in ib..(ib + TILE).min(m) {
                    for j in jb..(jb + TILE).min(k) {
                        out[j * m + i] = self.data[i * k + j];
                    }
                }
            }
        }
        Ok(Self::wrap(vec![k, m], out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.clone().into_softmax_rows()
    }

    /// [`Tensor::softmax_rows`] reusing this tensor's storage.
    pub fn into_softmax_rows(mut self) -> Result<Tensor> {
        let (_, k) = self.dims2()?;
        self.ensure_finite("softmax_rows")?;
        kernels::for_each_row(&mut self.data, k, |row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        });
        Ok(self)
    }

    /// Divides every entry by the row length (the number of key positions).
    pub fn rescale_rows(&self) -> Result<Tensor> {
        self.clone().into_rescaled_rows()
    }

    /// [`Tensor::rescale_rows`] reusing this tensor's storage.
    pub fn into_rescaled_rows(mut self) -> Result<Tensor> {
        let (_, k) = self.dims2()?;
        let scale = k as f64;
        self.data.iter_mut().for_each(|v| *v /= scale);
        Ok(self)
    }

    /// Channel-wise linear map `weight · x (+ bias)`; a 1×1 convolution over
    /// flattened positions.
    pub fn linear_project(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (c_out, c_in) = weight.dims2()?;
        let (x_rows, n) = x.dims2()?;
        if x_rows != c_in {
            return Err(shape_err!(
                "projection expects {c_in} input channels, got {x_rows}"
            ));
        }
        let mut out = weight.matmul(x)?;
        if let Some(bias) = bias {
            if bias.shape() != [c_out] {
                return Err(shape_err!(
                    "bias shape {:?} does not match {c_out} output channels",
                    bias.shape()
                ));
            }
            for (row, &b) in out.data.chunks_mut(n).zip(&bias.data) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(out)
    }

    /// Stacks `a` on top of `b` along the leading axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != b.rank() || a.shape[1..] != b.shape[1..] {
            return Err(shape_err!(
                "cannot concatenate {:?} with {:?}",
                a.shape,
                b.shape
            ));
        }
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Self::wrap(shape, data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::wrap(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{op}: non-finite input {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    /// Returns a copy with one element replaced.
    pub fn with_element(&self, flat: usize, value: f64) -> Tensor {
        let mut out = self.clone();
        out.data[flat] = value;
        out
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(rhs)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::wrap(self.shape.clone(), data))
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::wrap(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        tracking::record_free(self.data.len() * ELEM_BYTES);
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let mut list = f.debug_list();
        list.entries(self.data.iter().take(SHOWN));
        if self.len() > SHOWN {
            list.entry(&format_args!("... {} more", self.len() - SHOWN));
        }
        list.finish()
    }
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(shape_err!("shape must have at least one dimension"));
    }
    if shape.contains(&0) {
        return Err(shape_err!("zero-sized dimension in shape {shape:?}"));
    }
    Ok(())
}

/// Channel count and spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    #[serde(rename = "c")]
    pub channels: usize,
    #[serde(rename = "h")]
    pub height: usize,
    #[serde(rename = "w")]
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// Number of spatial positions `H·W`.
    pub const fn positions(&self) -> usize {
        self.height * self.width
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.positions()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(&self.dims())
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}
