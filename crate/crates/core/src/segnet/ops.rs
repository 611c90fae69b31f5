//! Channel-first feature maps and the layer primitives of the backbone,
//! each with a hand-written backward pass.

use crate::scalar::Scalar;

/// `c x h x w` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.hw();
        &self.data[c * n..(c + 1) * n]
    }

    /// Feature vector of pixel `j` (row-major index) across channels.
    pub fn pixel(&self, j: usize) -> Vec<T> {
        let n = self.hw();
        (0..self.c).map(|c| self.data[c * n + j]).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Concatenate along channels.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Inverse of [`concat`] for gradients: first `c_first` channels, then the rest.
pub fn split<T: Scalar>(t: &Tensor<T>, c_first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = c_first * t.hw();
    (
        Tensor::from_vec(c_first, t.h, t.w, t.data[..n].to_vec()),
        Tensor::from_vec(t.c - c_first, t.h, t.w, t.data[n..].to_vec()),
    )
}

/// Slope of the leaky rectifier on negative inputs.
pub const LEAK: f64 = 0.01;

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    /// Odd kernel size: 1 or 3.
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Saved activations for the backward pass of one convolution.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col buffer (`cin*k*k x h*w`); the input itself when `k == 1`.
    col: Vec<T>,
    /// Post-activation output, used to recover the rectifier slope.
    out: Option<Vec<T>>,
    h: usize,
    w: usize,
}

fn im2col<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (h, w) = (x.h, x.w);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![T::zero(); x.c * k * k * hw];
    for c in 0..x.c {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let d = &mut dst[y * w + x_lo..y * w + x_hi];
                    let s_lo = (x_lo as isize + dx) as usize;
                    d.copy_from_slice(&src[src_row + s_lo..src_row + s_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], cin: usize, k: usize, h: usize, w: usize) -> Tensor<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Tensor::zeros(cin, h, w);
    for c in 0..cin {
        let dst = &mut out.data[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    let dst_row = sy as usize * w;
                    for x in x_lo..x_hi {
                        dst[dst_row + (x as isize + dx) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 zero-padded convolution, optionally followed by the leaky
/// rectifier. Returns the output and, when `keep` is set, its cache.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    shape: ConvShape,
    weight: &[T],
    bias: &[T],
    activate: bool,
    keep: bool,
) -> (Tensor<T>, Option<ConvCache<T>>) {
    assert_eq!(x.c, shape.cin, "conv input channels");
    let hw = x.hw();
    let col = if shape.k == 1 {
        x.data.clone()
    } else {
        im2col(x, shape.k)
    };
    let mut out = vec![T::zero(); shape.cout * hw];
    for (o, &b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    T::gemm(
        shape.cout,
        shape.cin * shape.k * shape.k,
        hw,
        T::one(),
        weight,
        false,
        &col,
        false,
        T::one(),
        &mut out,
    );
    if activate {
        let leak = T::from_f64_lossy(LEAK);
        for v in &mut out {
            if *v < T::zero() {
                *v *= leak;
            }
        }
    }
    let cache = keep.then(|| ConvCache {
        col,
        out: activate.then(|| out.clone()),
        h: x.h,
        w: x.w,
    });
    (Tensor::from_vec(shape.cout, x.h, x.w, out), cache)
}

/// Backward of [`conv_forward`]. Accumulates into `dweight` / `dbias` and
/// returns the input gradient when `need_input_grad` is set.
pub fn conv_backward<T: Scalar>(
    shape: ConvShape,
    weight: &[T],
    cache: &ConvCache<T>,
    mut dout: Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let hw = cache.h * cache.w;
    if let Some(out) = &cache.out {
        let leak = T::from_f64_lossy(LEAK);
        for (d, &o) in dout.data.iter_mut().zip(out) {
            if o <= T::zero() {
                *d *= leak;
            }
        }
    }
    let kk = shape.cin * shape.k * shape.k;
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += dout.data[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    // dW (cout x kk) += dout (cout x hw) * col^T (hw x kk)
    T::gemm(shape.cout, hw, kk, T::one(), &dout.data, false, &cache.col, true, T::one(), dweight);
    if !need_input_grad {
        return None;
    }
    // dcol (kk x hw) = W^T (kk x cout) * dout (cout x hw)
    let mut dcol = vec![T::zero(); kk * hw];
    T::gemm(kk, shape.cout, hw, T::one(), weight, true, &dout.data, false, T::zero(), &mut dcol);
    if shape.k == 1 {
        Some(Tensor::from_vec(shape.cin, cache.h, cache.w, dcol))
    } else {
        Some(col2im(&dcol, shape.cin, shape.k, cache.h, cache.w))
    }
}

/// 2x2 max pooling; returns the flat argmax index of every output cell.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut idx = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (c * x.h + 2 * y) * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (c * x.h + 2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward<T: Scalar>(dout: &Tensor<T>, idx: &[u32], h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dout.c, h, w);
    for (&i, &g) in idx.iter().zip(&dout.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            for xx in 0..ow {
                out.data[(c * oh + y) * ow + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for x in 0..dout.w {
                dx.data[(c * h + y / 2) * w + x / 2] += dout.data[(c * dout.h + y) * dout.w + x];
            }
        }
    }
    dx
}

/// Per-pixel normalized exponential over channels.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let n = logits.hw();
    let mut out = Tensor::zeros(logits.c, logits.h, logits.w);
    for j in 0..n {
        let mut max = T::neg_infinity();
        for c in 0..logits.c {
            max = max.max(logits.data[c * n + j]);
        }
        let mut sum = T::zero();
        for c in 0..logits.c {
            let e = (logits.data[c * n + j] - max).exp();
            out.data[c * n + j] = e;
            sum += e;
        }
        for c in 0..logits.c {
            out.data[c * n + j] /= sum;
        }
    }
    out
}

/// Gradient w.r.t. logits given gradient w.r.t. softmax probabilities.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let n = probs.hw();
    let mut dz = Tensor::zeros(probs.c, probs.h, probs.w);
    for j in 0..n {
        let mut dot = T::zero();
        for c in 0..probs.c {
            dot += probs.data[c * n + j] * dprobs.data[c * n + j];
        }
        for c in 0..probs.c {
            let p = probs.data[c * n + j];
            dz.data[c * n + j] = p * (dprobs.data[c * n + j] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct 7-loop convolution as an independent reference.
    fn conv_reference(x: &Tensor<f64>, s: ConvShape, wt: &[f64], b: &[f64]) -> Tensor<f64> {
        let pad = (s.k / 2) as isize;
        let mut out = Tensor::zeros(s.cout, x.h, x.w);
        for o in 0..s.cout {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let mut acc = b[o];
                    for c in 0..s.cin {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < x.h as isize && sx >= 0 && sx < x.w as isize {
                                    acc += wt[((o * s.cin + c) * s.k + ky) * s.k + kx]
                                        * x.at(c, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.data[(o * x.h + y) * x.w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3] {
            let s = ConvShape { cin: 3, cout: 4, k };
            let x = random_tensor(3, 5, 7, &mut rng);
            let wt: Vec<f64> = (0..s.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, _) = conv_forward(&x, s, &wt, &b, false, false);
            let want = conv_reference(&x, s, &wt, &b);
            for (a, b) in out.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape { cin: 2, cout: 3, k: 3 };
        let x = random_tensor(2, 4, 5, &mut rng);
        let wt: Vec<f64> = (0..s.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = random_tensor(3, 4, 5, &mut rng);
        let loss = |x: &Tensor<f64>, wt: &[f64]| -> f64 {
            let (o, _) = conv_forward(x, s, wt, &b, true, false);
            o.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv_forward(&x, s, &wt, &b, true, true);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = conv_backward(s, &wt, &cache.unwrap(), g.clone(), &mut dw, &mut db, true).unwrap();
        let eps = 1e-6;
        for i in 0..wt.len() {
            let mut p = wt.clone();
            p[i] += eps;
            let mut m = wt.clone();
            m[i] -= eps;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (loss(&p, &wt) - loss(&m, &wt)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(2, 4, 6, &mut rng);
        let (p, idx) = maxpool_forward(&x);
        assert_eq!((p.h, p.w), (2, 3));
        for c in 0..2 {
            for y in 0..2 {
                for xx in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(c, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(p.at(c, y, xx), m);
                }
            }
        }
        let g = random_tensor(2, 2, 3, &mut rng);
        let dx = maxpool_backward(&g, &idx, 4, 6);
        assert!((dx.data.iter().sum::<f64>() - g.data.iter().sum::<f64>()).abs() < 1e-12);

        // <up(a), b> == <a, up^T(b)>
        let a = random_tensor(2, 2, 3, &mut rng);
        let b = random_tensor(2, 4, 6, &mut rng);
        let lhs: f64 = upsample_forward(&a).data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.data.iter().zip(&upsample_backward(&b).data).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_a_simplex_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_tensor(3, 2, 2, &mut rng);
        let p = softmax(&z);
        for j in 0..4 {
            let s: f64 = (0..3).map(|c| p.data[c * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let g = random_tensor(3, 2, 2, &mut rng);
        let dz = softmax_backward(&p, &g);
        let f = |z: &Tensor<f64>| -> f64 { softmax(z).data.iter().zip(&g.data).map(|(a, b)| a * b).sum() };
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += 1e-6;
            let mut zm = z.clone();
            zm.data[i] -= 1e-6;
            assert!(((f(&zp) - f(&zm)) / 2e-6 - dz.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(2, 3, 3, &mut rng);
        let b = random_tensor(1, 3, 3, &mut rng);
        let (a2, b2) = split(&concat(&a, &b), 2);
        assert_eq!((a2, b2), (a, b));
    }
}
