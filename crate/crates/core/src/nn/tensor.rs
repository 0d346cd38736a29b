use super::Scalar;

/// Dense `N x C x H x W` activation tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Spatial size `H * W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per batch item, `C * H * W`.
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[T] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Converts precision, e.g. `f32` activations to an `f64` copy.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        let [n, ca, h, w] = a.shape;
        assert_eq!(b.batch(), n, "concat: batch mismatch");
        assert_eq!((b.height(), b.width()), (h, w), "concat: spatial mismatch");
        let cb = b.channels();
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(a.item(i));
            out.extend_from_slice(b.item(i));
        }
        Tensor::from_vec([n, ca + cb, h, w], out)
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `first`
    /// channels.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let [n, c, h, w] = self.shape;
        assert!(first <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * first * plane);
        let mut b = Vec::with_capacity(n * (c - first) * plane);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..first * plane]);
            b.extend_from_slice(&item[first * plane..]);
        }
        (
            Tensor::from_vec([n, first, h, w], a),
            Tensor::from_vec([n, c - first, h, w], b),
        )
    }

    /// Stacks single-channel planes into an `N x 1 x H x W` tensor.
    pub fn stack_planes(planes: &[Vec<T>], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            assert_eq!(p.len(), h * w, "plane size mismatch");
            data.extend_from_slice(p);
        }
        Tensor::from_vec([planes.len(), 1, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_inputs() {
        let a = Tensor::<f32>::from_vec([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f32>::from_vec([2, 2, 1, 2], (10..18).map(|v| v as f32).collect());
        let c = Tensor::concat_channels(&a, &b);
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.item(0), &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0]);
        let (a2, b2) = c.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]);
    }
}
