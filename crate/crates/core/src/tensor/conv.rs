//! im2col-based convolution kernels shared by `conv2d` and its transpose.
//!
//! Column matrices are laid out `(c·k·k) × (N·P)` where `P = oh·ow`, so the
//! whole batch goes through a single GEMM per layer.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    /// Geometry of a convolution over an `h×w` input. `None` if the kernel
    /// does not fit the padded input.
    pub fn conv(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image (`channels×h×w`) into columns `[col0, col0+P)` of a
/// column matrix with row stride `ld`.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &Geometry, cols: &mut [T], ld: usize, col0: usize) {
    let kk = g.k * g.k;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geometry, ld: usize, col0: usize, img: &mut [T]) {
    let kk = g.k * g.k;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = c * kk + ki * g.k + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `N×C×P` → `C×(N·P)`.
pub(crate) fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `C×(N·P)` → `N×C×P`.
pub(crate) fn channel_major_to_batch<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geometry::conv(2, 5, 4, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let ld = g.positions();
        let mut cols = vec![0.0; g.rows() * ld];
        im2col(&img, &g, &mut cols, ld, 0);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let mut back = vec![0.0; img.len()];
        col2im(&y, &g, ld, 0, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(Geometry::conv(1, 2, 2, 5, 1, 1).is_none());
        assert!(Geometry::conv(1, 2, 2, 4, 1, 1).is_some());
    }
}
