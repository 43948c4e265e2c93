//! im2col-based 2-D convolution and max-pooling kernels.
//!
//! Activations are laid out channel-major per sample: index
//! `(c * height + y) * width + x`.

use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

/// Spatial shape of one sample's activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatShape {
    pub fn flat(dim: usize) -> Self {
        FeatShape {
            channels: dim,
            height: 1,
            width: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub in_shape: FeatShape,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_shape(&self) -> Option<FeatShape> {
        let h = self.in_shape.height + 2 * self.padding;
        let w = self.in_shape.width + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || h < self.kernel || w < self.kernel {
            return None;
        }
        Some(FeatShape {
            channels: self.out_channels,
            height: (h - self.kernel) / self.stride + 1,
            width: (w - self.kernel) / self.stride + 1,
        })
    }

    /// Rows of the unrolled patch matrix: in_channels * kernel * kernel.
    pub fn patch_len(&self) -> usize {
        self.in_shape.channels * self.kernel * self.kernel
    }
}

/// Unrolls one sample into a (patch_len x out_positions) matrix so the
/// convolution becomes a plain matrix product.
pub fn im2col<S: Scalar>(sample: &[S], geom: &ConvGeometry) -> DenseMatrix<S> {
    let out = geom.out_shape().expect("validated geometry");
    let (ih, iw) = (geom.in_shape.height, geom.in_shape.width);
    let positions = out.height * out.width;
    let mut col = DenseMatrix::zeros(geom.patch_len(), positions);
    let mut r = 0;
    for c in 0..geom.in_shape.channels {
        let plane = &sample[c * ih * iw..(c + 1) * ih * iw];
        for ky in 0..geom.kernel {
            for kx in 0..geom.kernel {
                let row = col.row_mut(r);
                let mut p = 0;
                for oy in 0..out.height {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    for ox in 0..out.width {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if iy >= 0 && (iy as usize) < ih && ix >= 0 && (ix as usize) < iw {
                            row[p] = plane[iy as usize * iw + ix as usize];
                        }
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the sample layout;
/// the inverse accumulation of [`im2col`].
pub fn col2im_add<S: Scalar>(col: &DenseMatrix<S>, geom: &ConvGeometry, sample_grad: &mut [S]) {
    let out = geom.out_shape().expect("validated geometry");
    let (ih, iw) = (geom.in_shape.height, geom.in_shape.width);
    let mut r = 0;
    for c in 0..geom.in_shape.channels {
        let base = c * ih * iw;
        for ky in 0..geom.kernel {
            for kx in 0..geom.kernel {
                let row = col.row(r);
                let mut p = 0;
                for oy in 0..out.height {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    for ox in 0..out.width {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if iy >= 0 && (iy as usize) < ih && ix >= 0 && (ix as usize) < iw {
                            let idx = base + iy as usize * iw + ix as usize;
                            sample_grad[idx] = sample_grad[idx] + row[p];
                        }
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeometry {
    pub in_shape: FeatShape,
    pub size: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_shape(&self) -> Option<FeatShape> {
        if self.size == 0
            || self.stride == 0
            || self.in_shape.height < self.size
            || self.in_shape.width < self.size
        {
            return None;
        }
        Some(FeatShape {
            channels: self.in_shape.channels,
            height: (self.in_shape.height - self.size) / self.stride + 1,
            width: (self.in_shape.width - self.size) / self.stride + 1,
        })
    }
}

/// Index of the maximum element inside one pooling window; ties break to the
/// first scan position so forward and backward agree.
fn window_argmax<S: Scalar>(
    plane: &[S],
    width: usize,
    oy: usize,
    ox: usize,
    geom: &PoolGeometry,
) -> usize {
    let mut best_idx = (oy * geom.stride) * width + ox * geom.stride;
    let mut best = plane[best_idx];
    for dy in 0..geom.size {
        for dx in 0..geom.size {
            let idx = (oy * geom.stride + dy) * width + ox * geom.stride + dx;
            if plane[idx] > best {
                best = plane[idx];
                best_idx = idx;
            }
        }
    }
    best_idx
}

pub fn maxpool_forward<S: Scalar>(sample: &[S], geom: &PoolGeometry, out: &mut [S]) {
    let o = geom.out_shape().expect("validated geometry");
    let (ih, iw) = (geom.in_shape.height, geom.in_shape.width);
    let mut p = 0;
    for c in 0..geom.in_shape.channels {
        let plane = &sample[c * ih * iw..(c + 1) * ih * iw];
        for oy in 0..o.height {
            for ox in 0..o.width {
                out[p] = plane[window_argmax(plane, iw, oy, ox, geom)];
                p += 1;
            }
        }
    }
}

/// Routes upstream gradient entries back to the argmax positions, recomputed
/// from the forward input.
pub fn maxpool_backward<S: Scalar>(
    sample: &[S],
    upstream: &[S],
    geom: &PoolGeometry,
    down: &mut [S],
) {
    let o = geom.out_shape().expect("validated geometry");
    let (ih, iw) = (geom.in_shape.height, geom.in_shape.width);
    let mut p = 0;
    for c in 0..geom.in_shape.channels {
        let base = c * ih * iw;
        let plane = &sample[base..base + ih * iw];
        for oy in 0..o.height {
            for ox in 0..o.width {
                let idx = base + window_argmax(plane, iw, oy, ox, geom);
                down[idx] = down[idx] + upstream[p];
                p += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1 channel, 3x3 input, 1x1 kernel, stride 1: col == input row.
        let geom = ConvGeometry {
            in_shape: FeatShape {
                channels: 1,
                height: 3,
                width: 3,
            },
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let sample: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let col = im2col(&sample, &geom);
        assert_eq!(col.rows(), 1);
        assert_eq!(col.cols(), 9);
        assert_eq!(col.as_slice(), sample.as_slice());
    }

    #[test]
    fn im2col_padding_fills_zeros() {
        let geom = ConvGeometry {
            in_shape: FeatShape {
                channels: 1,
                height: 2,
                width: 2,
            },
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let sample = vec![1.0f64, 2.0, 3.0, 4.0];
        let col = im2col(&sample, &geom);
        // Output is 2x2; the kernel's center row/col picks up the sample.
        assert_eq!(col.rows(), 9);
        assert_eq!(col.cols(), 4);
        // Center tap (ky=1,kx=1) sees the input verbatim.
        assert_eq!(col.row(4), &[1.0, 2.0, 3.0, 4.0]);
        // Top-left tap (ky=0,kx=0) is zero-padded except the last position.
        assert_eq!(col.row(0), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let geom = PoolGeometry {
            in_shape: FeatShape {
                channels: 1,
                height: 4,
                width: 4,
            },
            size: 2,
            stride: 2,
        };
        let sample: Vec<f64> = vec![
            1.0, 2.0, 0.0, 0.0, //
            3.0, 4.0, 0.0, 5.0, //
            0.0, 0.0, 9.0, 8.0, //
            0.0, 0.0, 7.0, 6.0,
        ];
        let mut out = vec![0.0; 4];
        maxpool_forward(&sample, &geom, &mut out);
        assert_eq!(out, vec![4.0, 5.0, 0.0, 9.0]);

        let mut down = vec![0.0; 16];
        maxpool_backward(&sample, &[1.0, 1.0, 1.0, 1.0], &geom, &mut down);
        assert_eq!(down[5], 1.0); // 4.0 at (1,1)
        assert_eq!(down[7], 1.0); // 5.0 at (1,3)
        assert_eq!(down[8], 1.0); // tie in all-zero window -> first position
        assert_eq!(down[10], 1.0); // 9.0 at (2,2)
    }
}
