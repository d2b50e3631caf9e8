//! Dense two-channel optical flow fields.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flow in pixels per frame interval, stored as a `[2, h, w]` tensor with the
/// `u` (x) plane first and the `v` (y) plane second.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<S> {
    data: Tensor<S>,
}

impl<S: Scalar> FlowField<S> {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn uniform(height: usize, width: usize, u: S, v: S) -> Self {
        let mut f = Self::zeros(height, width);
        f.u_mut().iter_mut().for_each(|x| *x = u);
        f.v_mut().iter_mut().for_each(|x| *x = v);
        f
    }

    pub fn from_planes(height: usize, width: usize, u: Vec<S>, v: Vec<S>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape("flow planes", &[height * width], &[u.len(), v.len()]));
        }
        let mut data = u;
        data.extend(v);
        Ok(FlowField {
            data: Tensor::from_vec(&[2, height, width], data)?,
        })
    }

    /// Accepts `[2, h, w]` or `[1, 2, h, w]`.
    pub fn from_tensor(t: Tensor<S>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [2, h, w] => (h, w),
            [1, 2, h, w] => (h, w),
            _ => return Err(Error::shape("flow tensor", &[2, 0, 0], t.shape())),
        };
        Ok(FlowField {
            data: t.reshape(&[2, h, w])?,
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn u(&self) -> &[S] {
        &self.data.data()[..self.len()]
    }

    pub fn v(&self) -> &[S] {
        &self.data.data()[self.len()..]
    }

    pub fn u_mut(&mut self) -> &mut [S] {
        let n = self.len();
        &mut self.data.data_mut()[..n]
    }

    pub fn v_mut(&mut self) -> &mut [S] {
        let n = self.len();
        &mut self.data.data_mut()[n..]
    }

    pub fn planes_mut(&mut self) -> (&mut [S], &mut [S]) {
        let n = self.len();
        self.data.data_mut().split_at_mut(n)
    }

    pub fn at(&self, x: usize, y: usize) -> (S, S) {
        let i = y * self.width() + x;
        (self.u()[i], self.v()[i])
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.data
    }

    /// `[1, 2, h, w]` view for network code.
    pub fn into_batched(self) -> Tensor<S> {
        let (h, w) = (self.height(), self.width());
        self.data.reshape(&[1, 2, h, w]).expect("same length")
    }

    pub fn cast<T: Scalar>(&self) -> FlowField<T> {
        FlowField { data: self.data.cast() }
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        self.data.check_same_shape(&other.data, op)
    }

    pub fn all_finite(&self) -> bool {
        self.data.all_finite()
    }

    /// Largest endpoint magnitude.
    pub fn max_magnitude(&self) -> S {
        self.u()
            .iter()
            .zip(self.v())
            .map(|(&u, &v)| (u * u + v * v).sqrt())
            .fold(S::zero(), |a, b| if b > a { b } else { a })
    }
}
