//! Convolution and layout helpers on top of [`crate::autodiff`].
//!
//! Activations inside a network are matrices with one row per pixel
//! `(sample, y, x)` and one column per channel. Samples at the API boundary
//! are `[batch, channels, height, width]` in row-major order.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn same(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width, kernel: 3, stride: 1, padding: 1 }
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Gather index turning a pixel-row activation matrix into im2col patches
    /// with column order `(channel, ky, kx)`; padding reads as zero.
    pub fn im2col_index(&self) -> Rc<[isize]> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        let mut index = Vec::with_capacity(self.out_rows() * self.patch_len());
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..self.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * self.stride + ky) as isize - self.padding as isize;
                                let x = (ox * self.stride + kx) as isize - self.padding as isize;
                                if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                                    index.push(-1);
                                } else {
                                    let row = (b * self.height + y as usize) * self.width + x as usize;
                                    index.push((row * self.channels + c) as isize);
                                }
                            }
                        }
                    }
                }
            }
        }
        index.into()
    }
}

/// Index mapping `[B, C, H, W]` data to a `(B·H·W) × C` matrix.
pub fn chw_to_rows_index(batch: usize, channels: usize, height: usize, width: usize) -> Rc<[isize]> {
    let hw = height * width;
    let mut index = Vec::with_capacity(batch * channels * hw);
    for b in 0..batch {
        for p in 0..hw {
            for c in 0..channels {
                index.push(((b * channels + c) * hw + p) as isize);
            }
        }
    }
    index.into()
}

/// Inverse of [`chw_to_rows_index`].
pub fn rows_to_chw_index(batch: usize, channels: usize, height: usize, width: usize) -> Rc<[isize]> {
    let hw = height * width;
    let mut index = Vec::with_capacity(batch * channels * hw);
    for b in 0..batch {
        for c in 0..channels {
            for p in 0..hw {
                index.push(((b * hw + p) * channels + c) as isize);
            }
        }
    }
    index.into()
}

/// Repeats each row of a `rows × cols` matrix `times` times consecutively.
pub fn repeat_rows_index(rows: usize, cols: usize, times: usize) -> Rc<[isize]> {
    let mut index = Vec::with_capacity(rows * cols * times);
    for r in 0..rows {
        for _ in 0..times {
            index.extend((0..cols).map(|c| (r * cols + c) as isize));
        }
    }
    index.into()
}

/// Im2col followed by `patches · kernelᵀ`. The kernel is `out_ch × (in_ch·k·k)`.
pub fn conv2d(g: &mut Graph, rows: Var, geom: &ConvGeometry, kernel: Var) -> Var {
    let patches = g.gather(rows, geom.im2col_index(), vec![geom.out_rows(), geom.patch_len()]);
    g.matmul_t(patches, kernel)
}

/// Adds a `1 × C` bias to every row of an `n × C` matrix.
pub fn add_row_bias(g: &mut Graph, x: Var, bias: Var) -> Var {
    let (n, c) = (g.value(x).rows(), g.value(x).cols());
    let expanded = g.gather(bias, repeat_rows_index(1, c, n), vec![n, c]);
    g.add(x, expanded)
}

/// Adds a per-sample `B × C` bias to a `(B·P) × C` pixel-row matrix.
pub fn add_sample_bias(g: &mut Graph, x: Var, bias: Var, pixels_per_sample: usize) -> Var {
    let (b, c) = (g.value(bias).rows(), g.value(bias).cols());
    let expanded = g.gather(bias, repeat_rows_index(b, c, pixels_per_sample), vec![b * pixels_per_sample, c]);
    g.add(x, expanded)
}

/// `B × (B·P)` averaging matrix for global mean pooling of pixel rows.
pub fn mean_pool_matrix(batch: usize, pixels_per_sample: usize) -> Tensor {
    let n = batch * pixels_per_sample;
    let mut data = vec![0.0; batch * n];
    let w = 1.0 / pixels_per_sample as f64;
    for b in 0..batch {
        for p in 0..pixels_per_sample {
            data[b * n + b * pixels_per_sample + p] = w;
        }
    }
    Tensor::matrix(batch, n, data)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data)
}
