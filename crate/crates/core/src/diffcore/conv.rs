//! im2col convolution kernels.

use super::tensor::{gemm, Tensor};
use super::DiffError;

struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self, DiffError> {
        let mismatch = || DiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(mismatch());
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch());
        }
        Ok(Self {
            batch: x[0],
            channels: x[1],
            height: h,
            width: wd,
            out_channels: w[0],
            kh,
            kw,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input index of (channel, ky, kx) at output (oy, ox), if inside the image.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let spatial = self.spatial();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(ky, kx, oy, ox) {
                                Some((iy, ix)) => image[c * plane + iy * self.width + ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let spatial = self.spatial();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((iy, ix)) = self.source(ky, kx, oy, ox) {
                                image[c * plane + iy * self.width + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, DiffError> {
    let g = Geometry::new(x.shape(), w.shape(), stride, pad)?;
    if b.shape() != [g.out_channels] {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d bias",
            lhs: w.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let in_size = g.channels * g.height * g.width;
    let out_size = g.out_channels * g.spatial();
    let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h, g.out_w]);
    let mut cols = vec![0.0; g.patch() * g.spatial()];
    for n in 0..g.batch {
        g.im2col(&x.data()[n * in_size..(n + 1) * in_size], &mut cols);
        let dst = &mut out.data_mut()[n * out_size..(n + 1) * out_size];
        for (o, chunk) in dst.chunks_mut(g.spatial()).enumerate() {
            chunk.fill(b.data()[o]);
        }
        gemm(g.out_channels, g.patch(), g.spatial(), w.data(), false, &cols, false, dst, true);
    }
    Ok(out)
}

/// Returns (dx, dw, db); dx/dw are skipped when not wanted.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let g = Geometry::new(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let in_size = g.channels * g.height * g.width;
    let out_size = g.out_channels * g.spatial();
    let mut db = Tensor::zeros(&[g.out_channels]);
    let mut dw = want_w.then(|| Tensor::zeros(w.shape()));
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; g.patch() * g.spatial()];
    for n in 0..g.batch {
        let go = &grad.data()[n * out_size..(n + 1) * out_size];
        for (o, chunk) in go.chunks(g.spatial()).enumerate() {
            db.data_mut()[o] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[n * in_size..(n + 1) * in_size], &mut cols);
            gemm(g.out_channels, g.spatial(), g.patch(), go, false, &cols, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.patch(), g.out_channels, g.spatial(), w.data(), true, go, false, &mut cols, false);
            g.col2im(&cols, &mut dx.data_mut()[n * in_size..(n + 1) * in_size]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let g = Geometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h, g.out_w]);
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = b.data()[o];
                        for c in 0..g.channels {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    if let Some((iy, ix)) = g.source(ky, kx, oy, ox) {
                                        let xi = ((n * g.channels + c) * g.height + iy) * g.width + ix;
                                        let wi = ((o * g.channels + c) * g.kh + ky) * g.kw + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let oi = ((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox;
                        out.data_mut()[oi] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let x = Tensor::new(&[2, 3, 7, 6], (0..252).map(|i| ((i * 37 % 17) as f64) / 9.0 - 0.8).collect()).unwrap();
        let w = Tensor::new(&[4, 3, 3, 3], (0..108).map(|i| ((i * 13 % 11) as f64) / 7.0 - 0.6).collect()).unwrap();
        let b = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        for (stride, pad) in [(1, 0), (2, 1), (1, 1)] {
            let fast = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let slow = naive(&x, &w, &b, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_extent() {
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let w = Tensor::zeros(&[32, 3, 3, 3]);
        let b = Tensor::zeros(&[32]);
        assert_eq!(conv2d_forward(&x, &w, &b, 2, 1).unwrap().shape(), &[1, 32, 32, 32]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 8, 8]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
    }
}
