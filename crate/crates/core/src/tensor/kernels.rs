//! Raw loops behind the convolution and pooling ops. All buffers are
//! contiguous row-major NCHW slices of a single sample.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `x` (C×H×W) into `cols` laid out as [(c, ky, kx), (oy, ox)].
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back and accumulates into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Max pooling over one C×H×W sample. Returns argmax flat indices (into the
/// input plane) alongside the pooled values.
pub(crate) fn max_pool(x: &[f64], g: &ConvGeom, out: &mut [f64], argmax: &mut [usize]) {
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = iy as usize * g.w + ix as usize;
                        if plane[i] > best || best_i == usize::MAX {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                let o = c * g.ho * g.wo + oy * g.wo + ox;
                out[o] = best;
                argmax[o] = c * g.h * g.w + best_i;
            }
        }
    }
}

/// Average pooling without padding.
pub(crate) fn avg_pool(x: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let norm = 1.0 / (g.k * g.k) as f64;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut s = 0.0;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w;
                    for kx in 0..g.k {
                        s += plane[row + ox * g.stride + kx];
                    }
                }
                out[c * g.ho * g.wo + oy * g.wo + ox] = s * norm;
            }
        }
    }
}

pub(crate) fn avg_pool_backward(gout: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let norm = 1.0 / (g.k * g.k) as f64;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let v = gout[c * g.ho * g.wo + oy * g.wo + ox] * norm;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w;
                    for kx in 0..g.k {
                        plane[row + ox * g.stride + kx] += v;
                    }
                }
            }
        }
    }
}
