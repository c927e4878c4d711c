//! Dense 4D tensors `(channels, x, y, z)` with x varying fastest, matching
//! the on-disk voxel order.

use std::fmt;

use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    spatial: [usize; 3],
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("channels", &self.channels)
            .field("spatial", &self.spatial)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, spatial: [usize; 3]) -> Self {
        Self::filled(channels, spatial, T::zero())
    }

    pub fn filled(channels: usize, spatial: [usize; 3], value: T) -> Self {
        let n = channels * spatial.iter().product::<usize>();
        Tensor {
            channels,
            spatial,
            data: vec![value; n],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(channels: usize, spatial: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            channels * spatial.iter().product::<usize>(),
            "tensor data length does not match shape ({channels}, {spatial:?})"
        );
        Tensor {
            channels,
            spatial,
            data,
        }
    }

    /// Stacks equally-shaped single-channel fields along the channel axis.
    pub fn stack(spatial: [usize; 3], fields: &[&[T]]) -> Self {
        let n: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n * fields.len());
        for f in fields {
            assert_eq!(f.len(), n);
            data.extend_from_slice(f);
        }
        Tensor::from_vec(fields.len(), spatial, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.spatial
    }

    /// `(channels, x, y, z)`.
    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.spatial[0], self.spatial[1], self.spatial[2]]
    }

    pub fn voxels(&self) -> usize {
        self.spatial.iter().product()
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

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel copy of channel `c`.
    pub fn select_channel(&self, c: usize) -> Tensor<T> {
        Tensor::from_vec(1, self.spatial, self.channel(c).to_vec())
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, nz] = self.spatial;
        x + nx * (y + ny * (z + nz * c))
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            channels: self.channels,
            spatial: self.spatial,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            spatial: self.spatial,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}
