//! Spatial feature maps stored as `[batch·height·width, channels]` matrices
//! and the gather/scatter kernels behind convolution and pooling.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Shape of a batch of feature maps flattened to rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn row(&self, b: usize, y: usize, x: usize) -> usize {
        (b * self.height + y) * self.width + x
    }
}

/// Sliding-window geometry shared by convolution (via im2col) and max
/// pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowGeom {
    pub input: MapShape,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl WindowGeom {
    pub fn out_height(&self) -> usize {
        (self.input.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.input.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn output(&self, channels: usize) -> MapShape {
        MapShape {
            batch: self.input.batch,
            height: self.out_height(),
            width: self.out_width(),
            channels,
        }
    }

    /// Input row feeding output `(b, oy, ox)` at kernel offset `(ky, kx)`,
    /// or `None` when it falls in the zero padding.
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.input.height as isize || x >= self.input.width as isize {
            None
        } else {
            Some(self.input.row(b, y as usize, x as usize))
        }
    }
}

/// Unfolds each receptive field into one row; column order is
/// `(ky, kx, channel)`.
pub fn im2col<T: Scalar>(x: &Array2<T>, g: &WindowGeom) -> Array2<T> {
    let c = g.input.channels;
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Array2::zeros((g.input.batch * oh * ow, g.kernel * g.kernel * c));
    for b in 0..g.input.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let mut row = out.row_mut(r);
                let row = row.as_slice_mut().expect("standard layout");
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some(src) = g.source(b, oy, ox, ky, kx) {
                            let off = (ky * g.kernel + kx) * c;
                            let src = x.row(src);
                            row[off..off + c]
                                .iter_mut()
                                .zip(src.iter())
                                .for_each(|(d, s)| *d = *s);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &Array2<T>, g: &WindowGeom) -> Array2<T> {
    let c = g.input.channels;
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Array2::zeros((g.input.rows(), c));
    for b in 0..g.input.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let row = cols.row(r);
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some(dst) = g.source(b, oy, ox, ky, kx) {
                            let off = (ky * g.kernel + kx) * c;
                            let mut d = out.row_mut(dst);
                            for ch in 0..c {
                                d[ch] += row[off + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adaptive average pooling window `[start, end)` for output index `i`.
fn adaptive_span(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling to `out_h`×`out_w` per batch item; windows
/// follow the usual floor/ceil partition, so an exact divisor gives
/// non-overlapping equal windows and pooling to the input size is the
/// identity.
pub fn avg_pool<T: Scalar>(x: &Array2<T>, shape: &MapShape, out_h: usize, out_w: usize) -> Array2<T> {
    let c = shape.channels;
    let mut out = Array2::zeros((shape.batch * out_h * out_w, c));
    for b in 0..shape.batch {
        for oy in 0..out_h {
            let (y0, y1) = adaptive_span(oy, shape.height, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_span(ox, shape.width, out_w);
                let inv = T::one() / T::c(((y1 - y0) * (x1 - x0)) as f64);
                let mut dst = out.row_mut((b * out_h + oy) * out_w + ox);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let src = x.row(shape.row(b, y, xx));
                        dst.zip_mut_with(&src, |d, s| *d += *s);
                    }
                }
                dst.mapv_inplace(|v| v * inv);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`].
pub fn avg_pool_backward<T: Scalar>(
    grad: &Array2<T>,
    shape: &MapShape,
    out_h: usize,
    out_w: usize,
) -> Array2<T> {
    let mut out = Array2::zeros((shape.rows(), shape.channels));
    for b in 0..shape.batch {
        for oy in 0..out_h {
            let (y0, y1) = adaptive_span(oy, shape.height, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_span(ox, shape.width, out_w);
                let inv = T::one() / T::c(((y1 - y0) * (x1 - x0)) as f64);
                let src = grad.row((b * out_h + oy) * out_w + ox);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let mut dst = out.row_mut(shape.row(b, y, xx));
                        dst.zip_mut_with(&src, |d, s| *d += *s * inv);
                    }
                }
            }
        }
    }
    out
}

/// Max pooling; also returns the winning input row per output element.
pub fn max_pool<T: Scalar>(x: &Array2<T>, g: &WindowGeom) -> (Array2<T>, Vec<usize>) {
    let c = g.input.channels;
    let (oh, ow) = (g.out_height(), g.out_width());
    let rows = g.input.batch * oh * ow;
    let mut out = Array2::from_elem((rows, c), T::neg_infinity());
    let mut arg = vec![usize::MAX; rows * c];
    for b in 0..g.input.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        if let Some(src) = g.source(b, oy, ox, ky, kx) {
                            for ch in 0..c {
                                let v = x[[src, ch]];
                                if v > out[[r, ch]] {
                                    out[[r, ch]] = v;
                                    arg[r * c + ch] = src;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<T: Scalar>(grad: &Array2<T>, g: &WindowGeom, arg: &[usize]) -> Array2<T> {
    let c = g.input.channels;
    let mut out = Array2::zeros((g.input.rows(), c));
    for (r, row) in grad.outer_iter().enumerate() {
        for ch in 0..c {
            let src = arg[r * c + ch];
            if src != usize::MAX {
                out[[src, ch]] += row[ch];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(batch: usize, h: usize, w: usize, c: usize) -> MapShape {
        MapShape {
            batch,
            height: h,
            width: w,
            channels: c,
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = WindowGeom {
            input: shape(2, 5, 4, 3),
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Array2::from_shape_fn((g.input.rows(), 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let cols = im2col(&x, &g);
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 5 + j) % 7) as f64 - 3.0);
        let lhs = (&cols * &y).sum();
        let rhs = (&x * &col2im(&y, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn avg_pool_matches_window_means_and_is_identity_at_own_size() {
        let s = shape(1, 4, 4, 2);
        let x = Array2::from_shape_fn((16, 2), |(i, j)| (i * 2 + j) as f64);
        let p = avg_pool(&x, &s, 2, 2);
        // window rows 0,1,4,5 for cell (0,0), channel 0 values 0,2,8,10
        assert_eq!(p[[0, 0]], 5.0);
        assert_eq!(avg_pool(&x, &s, 4, 4), x);
        let g = Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let lhs = (&p * &g).sum();
        let rhs = (&x * &avg_pool_backward(&g, &s, 2, 2)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let g = WindowGeom {
            input: shape(1, 4, 4, 1),
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = Array2::from_shape_fn((16, 1), |(i, _)| i as f64);
        let (out, arg) = max_pool(&x, &g);
        assert_eq!(out.column(0).to_vec(), vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
