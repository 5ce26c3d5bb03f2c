use super::{FilterBank, Shape4, Tensor4};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self { stride: 1, pad: 0, dilation: 1 }
    }
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.pad;
        if self.stride == 0 || k == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct Geometry {
    x: Shape4,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: ConvParams,
}

impl Geometry {
    fn new(x: Shape4, w: &FilterBank, p: ConvParams) -> Result<Self> {
        let [oc, ic, kh, kw] = w.shape();
        if ic != x.c {
            return Err(Error::Config(format!(
                "conv2d: filter bank {:?} expects {ic} input channels but input is {x}",
                w.shape()
            )));
        }
        let (Some(oh), Some(ow)) = (p.out_len(x.h, kh), p.out_len(x.w, kw)) else {
            return Err(Error::Config(format!("conv2d: filter bank {:?} with {p:?} does not fit input {x}", w.shape())));
        };
        Ok(Self { x, oc, kh, kw, oh, ow, p })
    }

    fn out_shape(&self) -> Shape4 {
        Shape4::new(self.x.n, self.oc, self.oh, self.ow)
    }

    fn k(&self) -> usize {
        self.x.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.pad == 0
    }

    /// Input coordinate read by output coordinate `o` at kernel tap `t`.
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.p.stride + t * self.p.dilation) as isize - self.p.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, sample: &[f64], col: &mut [f64]) {
        let p = self.positions();
        let (h, w) = (self.x.h, self.x.w);
        for ic in 0..self.x.c {
            let plane = &sample[ic * h * w..(ic + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = self.src(oy, ky, h);
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match (iy, self.src(ox, kx, w)) {
                                (Some(iy), Some(ix)) => plane[iy * w + ix],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        let (h, w) = (self.x.h, self.x.w);
        for ic in 0..self.x.c {
            let plane = &mut dx[ic * h * w..(ic + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, w) {
                                plane[iy * w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = a * b` with `a: m x k`, `b: k x n`, given strides for `a`/`b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is bounded by the strides and dimensions,
    // which callers derive from the slice lengths checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation (no kernel flip) of `x` with `w`.
pub fn conv2d(x: &Tensor4, w: &FilterBank, p: ConvParams) -> Result<Tensor4> {
    conv2d_with(Exec::default(), x, w, p)
}

pub fn conv2d_with(exec: Exec, x: &Tensor4, w: &FilterBank, p: ConvParams) -> Result<Tensor4> {
    let g = Geometry::new(x.shape(), w, p)?;
    let out_shape = g.out_shape();
    let mut out = Tensor4::zeros(out_shape);
    let (k, pos, oc) = (g.k(), g.positions(), g.oc);
    par::for_each_chunk(exec, out.data_mut(), oc * pos, |n, dst| {
        let sample = x.sample(n);
        if g.is_pointwise() {
            gemm(oc, k, pos, w.data(), (k, 1), sample, (pos, 1), dst);
        } else {
            let mut col = vec![0.0; k * pos];
            g.im2col(sample, &mut col);
            gemm(oc, k, pos, w.data(), (k, 1), &col, (pos, 1), dst);
        }
    });
    Ok(out)
}

/// Reference implementation: one explicit loop nest per output element,
/// summing over `(ic, ky, kx)` in order.
pub fn conv2d_direct(x: &Tensor4, w: &FilterBank, p: ConvParams) -> Result<Tensor4> {
    let g = Geometry::new(x.shape(), w, p)?;
    let s = x.shape();
    Ok(Tensor4::from_fn(g.out_shape(), |n, oc, oy, ox| {
        let mut acc = 0.0;
        for ic in 0..s.c {
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, s.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    if let Some(ix) = g.src(ox, kx, s.w) {
                        let wi = ((oc * s.c + ic) * g.kh + ky) * g.kw + kx;
                        acc += w.data()[wi] * x.at(n, ic, iy, ix);
                    }
                }
            }
        }
        acc
    }))
}

/// Gradients of `sum(dy * conv2d(x, w))` with respect to `x` and `w`.
pub fn conv2d_grad(x: &Tensor4, w: &FilterBank, dy: &Tensor4, p: ConvParams) -> Result<(Tensor4, FilterBank)> {
    conv2d_grad_with(Exec::default(), x, w, dy, p)
}

pub fn conv2d_grad_with(exec: Exec, x: &Tensor4, w: &FilterBank, dy: &Tensor4, p: ConvParams) -> Result<(Tensor4, FilterBank)> {
    let g = Geometry::new(x.shape(), w, p)?;
    if dy.shape() != g.out_shape() {
        return Err(Error::Config(format!(
            "conv2d_grad: cotangent shape {} does not match output shape {}",
            dy.shape(),
            g.out_shape()
        )));
    }
    let (k, pos, oc) = (g.k(), g.positions(), g.oc);
    let n = x.shape().n;
    let wlen = w.data().len();

    // Per-sample: input gradient written in place, filter gradient kept as a
    // partial and reduced below in sample order.
    let mut dx = Tensor4::zeros(x.shape());
    let mut partials = vec![0.0; n * wlen];
    let sample_len = x.shape().sample_len();
    {
        let mut joint: Vec<(&mut [f64], &mut [f64])> =
            dx.data_mut().chunks_mut(sample_len).zip(partials.chunks_mut(wlen)).collect();
        let work = |i: usize, (dxs, dws): &mut (&mut [f64], &mut [f64])| {
            let dys = dy.sample(i);
            if g.is_pointwise() {
                gemm(k, oc, pos, w.data(), (1, k), dys, (pos, 1), dxs);
                gemm(oc, pos, k, dys, (pos, 1), x.sample(i), (1, pos), dws);
            } else {
                let mut col = vec![0.0; k * pos];
                gemm(k, oc, pos, w.data(), (1, k), dys, (pos, 1), &mut col);
                g.col2im(&col, dxs);
                g.im2col(x.sample(i), &mut col);
                gemm(oc, pos, k, dys, (pos, 1), &col, (1, pos), dws);
            }
        };
        #[cfg(feature = "parallel")]
        if exec.is_parallel() {
            use rayon::prelude::*;
            joint.par_iter_mut().enumerate().for_each(|(i, pair)| work(i, pair));
        } else {
            joint.iter_mut().enumerate().for_each(|(i, pair)| work(i, pair));
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = exec;
            joint.iter_mut().enumerate().for_each(|(i, pair)| work(i, pair));
        }
    }
    let mut dw = FilterBank::zeros(w.shape());
    for part in partials.chunks(wlen) {
        for (acc, v) in dw.data_mut().iter_mut().zip(part) {
            *acc += v;
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_filters(shape: [usize; 4], rng: &mut ChaCha8Rng) -> FilterBank {
        let len = shape.iter().product();
        FilterBank::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ones_with_ones_kernel_sums_to_nine() {
        let x = Tensor4::filled(Shape4::new(1, 1, 3, 3), 1.0);
        let w = FilterBank::new([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, ConvParams::default()).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(Shape4::new(2, 1, 4, 5), &mut rng);
        let w = FilterBank::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, ConvParams::default()).unwrap();
        assert_eq!(y, x);
        let (dx, _) = conv2d_grad(&x, &w, &x, ConvParams::default()).unwrap();
        assert_eq!(dx, x);
    }

    #[test]
    fn strided_padded_output_shape() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 5, 5));
        let w = FilterBank::zeros([1, 1, 3, 3]);
        let y = conv2d(&x, &w, ConvParams::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 3, 3));
    }

    #[test]
    fn mismatched_channels_name_both_shapes() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 5, 5));
        let w = FilterBank::zeros([1, 3, 3, 3]);
        let msg = conv2d(&x, &w, ConvParams::default()).unwrap_err().to_string();
        assert!(msg.contains("1x2x5x5") && msg.contains("[1, 3, 3, 3]"), "{msg}");
        let w = FilterBank::zeros([1, 2, 7, 7]);
        assert!(conv2d(&x, &w, ConvParams::default()).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(Shape4::new(2, 3, 4, 4), &mut rng);
        let w = random_filters([2, 3, 3, 3], &mut rng);
        let dy = Tensor4::zeros(Shape4::new(2, 2, 4, 4));
        let (dx, dw) = conv2d_grad(&x, &w, &dy, ConvParams::new(1, 1, 1)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
        let bad = Tensor4::zeros(Shape4::new(2, 2, 3, 4));
        assert!(conv2d_grad(&x, &w, &bad, ConvParams::new(1, 1, 1)).is_err());
    }

    #[test]
    fn gemm_path_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, p) in &[
            (3, ConvParams::new(1, 1, 1)),
            (3, ConvParams::new(2, 1, 1)),
            (3, ConvParams::new(1, 2, 2)),
            (1, ConvParams::new(2, 0, 1)),
            (1, ConvParams::default()),
            (5, ConvParams::new(2, 2, 1)),
        ] {
            let x = random_tensor(Shape4::new(2, 3, 7, 6), &mut rng);
            let w = random_filters([4, 3, k, k], &mut rng);
            let fast = conv2d(&x, &w, p).unwrap();
            let slow = conv2d_direct(&x, &w, p).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sequential_and_parallel_are_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(Shape4::new(4, 3, 6, 6), &mut rng);
        let w = random_filters([5, 3, 3, 3], &mut rng);
        let p = ConvParams::new(1, 1, 1);
        let a = conv2d_with(Exec::Sequential, &x, &w, p).unwrap();
        let b = conv2d_with(Exec::Parallel, &x, &w, p).unwrap();
        assert_eq!(a, b);
        let (dxa, dwa) = conv2d_grad_with(Exec::Sequential, &x, &w, &a, p).unwrap();
        let (dxb, dwb) = conv2d_grad_with(Exec::Parallel, &x, &w, &a, p).unwrap();
        assert_eq!(dxa, dxb);
        assert_eq!(dwa, dwb);
    }

    #[test]
    fn linear_in_input_and_filters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvParams::new(1, 1, 1);
        let x = random_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
        let y = random_tensor(Shape4::new(1, 2, 5, 5), &mut rng);
        let w = random_filters([3, 2, 3, 3], &mut rng);
        let v = random_filters([3, 2, 3, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = Tensor4::from_fn(x.shape(), |n, c, h, ww| a * x.at(n, c, h, ww) + b * y.at(n, c, h, ww));
        let lhs = conv2d(&mix, &w, p).unwrap();
        let (cx, cy) = (conv2d(&x, &w, p).unwrap(), conv2d(&y, &w, p).unwrap());
        for i in 0..lhs.data().len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-13);
        }
        let wmix = FilterBank::new(w.shape(), w.data().iter().zip(v.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d(&x, &wmix, p).unwrap();
        let (cw, cv) = (conv2d(&x, &w, p).unwrap(), conv2d(&x, &v, p).unwrap());
        for i in 0..lhs.data().len() {
            let rhs = a * cw.data()[i] + b * cv.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-13);
        }
    }
}
