//! im2col / col2im helpers shared by the convolution ops.

use crate::tensor::Scalar;

/// Geometry of a valid (unpadded) strided cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn valid_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
        if kernel == 0 || stride == 0 || kernel > input {
            None
        } else {
            Some((input - kernel) / stride + 1)
        }
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    /// Spatial positions per image in the output grid.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn cols_len(&self) -> usize {
        self.patch_len() * self.batch * self.positions()
    }
}

/// Unfolds `input` (`[B, C, H, W]`) into a `[C·kH·kW, B·oH·oW]` matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let bp = g.batch * g.positions();
    let mut cols = vec![T::zero(); g.cols_len()];
    let plane = g.in_h * g.in_w;
    // image-major so each source plane stays cache resident while it is unfolded
    for b in 0..g.batch {
        for c in 0..g.channels {
            let src = &input[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let row = (c * g.k_h + ky) * g.k_w + kx;
                    let start = row * bp + b * g.positions();
                    let dst = &mut cols[start..start + g.positions()];
                    for (oy, dst_row) in dst.chunks_exact_mut(g.out_w).enumerate() {
                        let iy = oy * g.stride + ky;
                        let src_row = &src[iy * g.in_w + kx..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            dst_row.copy_from_slice(&src_row[..g.out_w]);
                        } else {
                            for (d, &v) in dst_row.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[B, C, H, W]` buffer.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let bp = g.batch * g.positions();
    let plane = g.in_h * g.in_w;
    for b in 0..g.batch {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ky in 0..g.k_h {
                for kx in 0..g.k_w {
                    let row = (c * g.k_h + ky) * g.k_w + kx;
                    let start = row * bp + b * g.positions();
                    let src = &cols[start..start + g.positions()];
                    for (oy, src_row) in src.chunks_exact(g.out_w).enumerate() {
                        let iy = oy * g.stride + ky;
                        let dst_row = &mut dst[iy * g.in_w + kx..(iy + 1) * g.in_w];
                        for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(src_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[B, O, P]` -> `[O, B·P]`
pub fn batch_major_to_channel_major<T: Scalar>(x: &[T], batch: usize, ch: usize, pos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for o in 0..ch {
            let src = &x[(b * ch + o) * pos..(b * ch + o + 1) * pos];
            out[o * batch * pos + b * pos..o * batch * pos + (b + 1) * pos].copy_from_slice(src);
        }
    }
    out
}

/// `[O, B·P]` -> `[B, O, P]`
pub fn channel_major_to_batch_major<T: Scalar>(x: &[T], batch: usize, ch: usize, pos: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..ch {
        for b in 0..batch {
            let src = &x[o * batch * pos + b * pos..o * batch * pos + (b + 1) * pos];
            out[(b * ch + o) * pos..(b * ch + o + 1) * pos].copy_from_slice(src);
        }
    }
    out
}
