//! Forward and backward kernels for the layer types used by the segmentation
//! networks. All kernels are single-threaded and deterministic.

use rand::Rng;

use super::{Grads, ParamId, ParamStore, Scalar, Tensor};

/// Stride-1 2-D convolution with "same" zero padding and a bias per output
/// channel. Kernel size must be odd.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let weight = store.add_xavier_conv(format!("{name}.weight"), out_ch, in_ch, kernel, rng);
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_ch]);
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv: expected {} input channels, got {c}", self.in_ch);
        let plane = h * w;
        let weight = store.value(self.weight);
        let bias = store.value(self.bias);
        let init: Vec<T> = (0..n)
            .flat_map(|_| bias.iter().flat_map(|&b| std::iter::repeat_n(b, plane)))
            .collect();
        let mut y = Tensor::from_vec([n, self.out_ch, h, w], init);
        let mut cols = Vec::new();
        for i in 0..n {
            let out = y.item_mut(i);
            let rhs: &[T] = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, &mut cols);
                &cols
            };
            T::gemm(
                self.out_ch,
                self.patch_len(),
                plane,
                T::one(),
                weight,
                false,
                rhs,
                false,
                T::one(),
                out,
            );
        }
        y
    }

    /// Accumulates weight and bias gradients into `grads` and returns the
    /// input gradient when `need_input_grad` is set.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        assert_eq!(dy.shape(), [n, self.out_ch, h, w], "conv backward: dy shape");
        let plane = h * w;
        let k = self.patch_len();
        let weight = store.value(self.weight);
        let mut dx = need_input_grad.then(|| Tensor::zeros([n, c, h, w]));
        let mut cols = Vec::new();
        let mut dcols = if self.kernel == 1 || !need_input_grad {
            Vec::new()
        } else {
            vec![T::zero(); k * plane]
        };
        for i in 0..n {
            let dy_i = dy.item(i);
            {
                let db = grads.get_mut(self.bias);
                for (o, row) in dy_i.chunks_exact(plane).enumerate() {
                    db[o] = db[o] + row.iter().copied().sum::<T>();
                }
            }
            let cols_ref: &[T] = if self.kernel == 1 {
                x.item(i)
            } else {
                im2col(x.item(i), c, h, w, self.kernel, &mut cols);
                &cols
            };
            T::gemm(
                self.out_ch,
                plane,
                k,
                T::one(),
                dy_i,
                false,
                cols_ref,
                true,
                T::one(),
                grads.get_mut(self.weight),
            );
            if let Some(dx) = dx.as_mut() {
                if self.kernel == 1 {
                    T::gemm(k, self.out_ch, plane, T::one(), weight, true, dy_i, false, T::zero(), dx.item_mut(i));
                } else {
                    T::gemm(k, self.out_ch, plane, T::one(), weight, true, dy_i, false, T::zero(), &mut dcols);
                    col2im(&dcols, c, h, w, self.kernel, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Unfolds a `C x H x W` image into a `(C*k*k) x (H*W)` patch matrix with zero
/// padding of `k/2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut Vec<T>) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    cols.clear();
    cols.reserve(c * k * k * plane);
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                // valid output columns for this horizontal shift
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(x0 as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        cols.extend(std::iter::repeat_n(T::zero(), w));
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x0 as isize + dx) as usize;
                    cols.extend(std::iter::repeat_n(T::zero(), x0));
                    cols.extend_from_slice(&srow[s0..s0 + (x1 - x0)]);
                    cols.extend(std::iter::repeat_n(T::zero(), w - x1));
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the
/// image, accumulating into `dx` (which must be zeroed by the caller).
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ch in 0..c {
        let dst = &mut dx[ch * plane..(ch + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dxs = kx as isize - pad;
                let row = ((ch * k + ky) * k + kx) * plane;
                let src = &cols[row..row + plane];
                let x0 = (-dxs).max(0) as usize;
                let x1 = (w as isize - dxs).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dxs) as usize;
                    let drow = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    let line = &src[y * w + x0..y * w + x1];
                    for (d, &g) in drow.iter_mut().zip(line) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given the layer's output activations.
pub fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, activated: &Tensor<T>) {
    assert_eq!(dy.shape(), activated.shape());
    for (g, &a) in dy.data_mut().iter_mut().zip(activated.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through the logistic function given its output.
pub fn sigmoid_backward<T: Scalar>(dy: &Tensor<T>, out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(dy.shape(), out.shape());
    let data = dy
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(dy.shape(), data)
}

/// Result of a 2x2 max-pool: pooled values and, per output element, which of
/// the four window positions won (row-major, first maximum on ties).
#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub out: Tensor<T>,
    pub argmax: Vec<u8>,
}

pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Pooled<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            let r0 = base + 2 * y * w;
            let r1 = r0 + w;
            for xx in 0..ow {
                let cand = [src[r0 + 2 * xx], src[r0 + 2 * xx + 1], src[r1 + 2 * xx], src[r1 + 2 * xx + 1]];
                let mut best = 0u8;
                for (j, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best as usize] {
                        best = j as u8;
                    }
                }
                out.push(cand[best as usize]);
                argmax.push(best);
            }
        }
    }
    Pooled {
        out: Tensor::from_vec([n, c, oh, ow], out),
        argmax,
    }
}

pub fn max_pool2_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u8]) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh * 2, ow * 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let out = dx.data_mut();
    for (idx, (&g, &a)) in dy.data().iter().zip(argmax).enumerate() {
        let p = idx / (oh * ow);
        let rem = idx % (oh * ow);
        let (y, xx) = (rem / ow, rem % ow);
        let (ry, rx) = ((a / 2) as usize, (a % 2) as usize);
        out[p * h * w + (2 * y + ry) * w + 2 * xx + rx] = g;
    }
    dx
}

/// Max over non-overlapping `factor x factor` blocks (no gradient; used for
/// the saliency pyramid). Equal to `log2(factor)` repeated 2x2 max-pools.
pub fn block_max_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0);
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::full([n, c, oh, ow], T::neg_infinity());
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let v = src[(p * h + y) * w + xx];
                let o = &mut dst[(p * oh + y / factor) * ow + xx / factor];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    out
}

/// 2x nearest-neighbour up-sampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for p in 0..n * c {
        for y in 0..oh {
            let row = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let d = &mut dst[(p * h + y / 2) * w + xx / 2];
                *d = *d + src[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// `out[n, k, y, x] = gate[n, 0, y, x] * features[n, k, y, x]`.
pub fn gate_channels<T: Scalar>(gate: &Tensor<T>, features: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = features.shape();
    assert_eq!(gate.shape(), [n, 1, h, w], "gate shape must be [N,1,H,W]");
    let plane = h * w;
    let mut out = features.clone();
    for i in 0..n {
        let g = gate.item(i);
        for row in out.item_mut(i).chunks_exact_mut(plane) {
            for (v, &a) in row.iter_mut().zip(g) {
                *v = *v * a;
            }
        }
    }
    assert_eq!(out.channels(), k);
    out
}

/// Returns `(d_gate, d_features)`.
pub fn gate_channels_backward<T: Scalar>(
    dy: &Tensor<T>,
    gate: &Tensor<T>,
    features: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = features.shape();
    let plane = h * w;
    let mut d_gate = Tensor::zeros([n, 1, h, w]);
    let mut d_feat = Tensor::zeros(features.shape());
    for i in 0..n {
        let g = gate.item(i);
        let dg = d_gate.item_mut(i);
        for ((dyr, fr), dfr) in dy
            .item(i)
            .chunks_exact(plane)
            .zip(features.item(i).chunks_exact(plane))
            .zip(d_feat.item_mut(i).chunks_exact_mut(plane))
        {
            for j in 0..plane {
                dfr[j] = dyr[j] * g[j];
                dg[j] = dg[j] + dyr[j] * fr[j];
            }
        }
    }
    (d_gate, d_feat)
}
