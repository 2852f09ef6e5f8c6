//! Dense kernels shared by the forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatView<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// `out = beta * out + a * b` with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], beta: f64) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o *= beta);
        return;
    }
    // SAFETY: the views cover `rows * cols` elements at the given strides,
    // which is checked by construction in `MatView::new`, and `out` has
    // exactly `m * n` elements laid out row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride and zero padding of a 3-D convolution over `[frames, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1, 1, 1],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }
}

/// Output extents, or `None` when the kernel does not fit the padded input.
pub fn conv3d_output_dims(input: [usize; 3], kernel: [usize; 3], spec: Conv3dSpec) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * spec.pad[a];
        if padded < kernel[a] || spec.stride[a] == 0 {
            return None;
        }
        out[a] = (padded - kernel[a]) / spec.stride[a] + 1;
    }
    Some(out)
}

pub(crate) struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub out: [usize; 3],
    pub cin: usize,
    pub spec: Conv3dSpec,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.out.iter().product()
    }

    pub fn patch(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    /// Pointwise convolutions read the input directly.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.spec.stride == [1, 1, 1] && self.spec.pad == [0, 0, 0]
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds patch entry;
    /// `input_offset` indexes the first channel of the source pixel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [fi, hi, wi] = self.input;
        let [kf, kh, kw] = self.kernel;
        let [fo, ho, wo] = self.out;
        let cin = self.cin;
        let patch = self.patch();
        for of in 0..fo {
            for oh in 0..ho {
                for ow in 0..wo {
                    let row = (of * ho + oh) * wo + ow;
                    let base_row = row * patch;
                    for a in 0..kf {
                        let sf = (of * self.spec.stride[0] + a) as isize - self.spec.pad[0] as isize;
                        if sf < 0 || sf >= fi as isize {
                            continue;
                        }
                        for b in 0..kh {
                            let sh = (oh * self.spec.stride[1] + b) as isize - self.spec.pad[1] as isize;
                            if sh < 0 || sh >= hi as isize {
                                continue;
                            }
                            for c in 0..kw {
                                let sw = (ow * self.spec.stride[2] + c) as isize
                                    - self.spec.pad[2] as isize;
                                if sw < 0 || sw >= wi as isize {
                                    continue;
                                }
                                let src = ((sf as usize * hi + sh as usize) * wi + sw as usize) * cin;
                                let col = base_row + ((a * kh + b) * kw + c) * cin;
                                f(col, src);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.patch()];
        let cin = self.cin;
        self.for_each_tap(|dst, src| cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]));
        cols
    }

    pub fn col2im_acc(&self, cols: &[f64], dx: &mut [f64]) {
        let cin = self.cin;
        self.for_each_tap(|src, dst| {
            for (d, s) in dx[dst..dst + cin].iter_mut().zip(&cols[src..src + cin]) {
                *d += s;
            }
        });
    }
}

/// Source frame for temporal offset `j` of a `k`-tap kernel at frame `f`,
/// clamped to the clip (edge replication).
#[inline]
pub(crate) fn replicate_frame(f: usize, j: usize, k: usize, frames: usize) -> usize {
    let pos = f as isize + j as isize - (k / 2) as isize;
    pos.clamp(0, frames as isize - 1) as usize
}

pub(crate) fn temporal_conv(x: &[f64], frames: usize, kernel: &[f64], k: usize, channels: usize) -> Vec<f64> {
    let plane = x.len() / frames;
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        let dst = &mut out[f * plane..(f + 1) * plane];
        for j in 0..k {
            let sf = replicate_frame(f, j, k, frames);
            let src = &x[sf * plane..(sf + 1) * plane];
            let w = &kernel[j * channels..(j + 1) * channels];
            for (d, s) in dst.chunks_exact_mut(channels).zip(src.chunks_exact(channels)) {
                for c in 0..channels {
                    d[c] += w[c] * s[c];
                }
            }
        }
    }
    out
}

/// Visits `(input_index, output_index)` pairs of a block reduction from
/// `[F, H, W, C]` to `[F/pf, H/ph, W/pw, C]`.
pub(crate) fn for_each_block(dims: [usize; 4], factors: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let [fi, hi, wi, c] = dims;
    let (ho, wo) = (hi / factors[1], wi / factors[2]);
    for a in 0..fi {
        for b in 0..hi {
            for d in 0..wi {
                let src = ((a * hi + b) * wi + d) * c;
                let dst = (((a / factors[0]) * ho + b / factors[1]) * wo + d / factors[2]) * c;
                for ch in 0..c {
                    f(src + ch, dst + ch);
                }
            }
        }
    }
}
