//! Dense kernels behind the graph ops: GEMM wrapper and tiled im2col
//! convolution.

use super::Tensor;

/// Output positions per im2col tile.
const TILE_POSITIONS: usize = 8192;

/// Strided matrix view: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm(a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    assert!(a.len() >= av.span() && b.len() >= bv.span() && c.len() >= cv.span());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        if beta == 0.0 {
            for i in 0..cv.rows {
                for j in 0..cv.cols {
                    c[i * cv.rs + j * cv.cs] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: bounds of all three views were checked against the slices above.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    fn tile_rows(&self) -> usize {
        (TILE_POSITIONS / self.out_width().max(1)).max(1)
    }

    /// Output columns `[lo, hi)` whose input column `ow * sw + kw - pw` is
    /// inside the image.
    fn valid_cols(&self, kw: usize) -> (usize, usize) {
        let (sw, pw) = (self.stride.1, self.padding.1);
        let wo = self.out_width();
        let lo = pw.saturating_sub(kw).div_ceil(sw).min(wo);
        let hi = if self.width + pw > kw {
            ((self.width + pw - kw - 1) / sw + 1).min(wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Fills `cols` (patch x positions) for output rows `[r0, r1)`.
    fn im2col(&self, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
        let (kh_n, kw_n) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let wo = self.out_width();
        let npos = (r1 - r0) * wo;
        for ci in 0..self.in_channels {
            let plane = &x[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let row = (ci * kh_n + kh) * kw_n + kw;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for (ri, oh) in (r0..r1).enumerate() {
                        let out_row = &mut dst[ri * wo..(ri + 1) * wo];
                        let ih = (oh * sh + kh) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.height {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        let (lo, hi) = self.valid_cols(kw);
                        out_row[..lo].iter_mut().for_each(|v| *v = 0.0);
                        out_row[hi..].iter_mut().for_each(|v| *v = 0.0);
                        if lo < hi {
                            let first = lo * sw + kw - pw;
                            if sw == 1 {
                                out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (v, &x) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(sw)) {
                                    *v = x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dx` for output rows `[r0, r1)`.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let (kh_n, kw_n) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let wo = self.out_width();
        let npos = (r1 - r0) * wo;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * self.height * self.width..(ci + 1) * self.height * self.width];
            for kh in 0..kh_n {
                for kw in 0..kw_n {
                    let row = (ci * kh_n + kh) * kw_n + kw;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for (ri, oh) in (r0..r1).enumerate() {
                        let ih = (oh * sh + kh) as isize - ph as isize;
                        if ih < 0 || ih as usize >= self.height {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        let (lo, hi) = self.valid_cols(kw);
                        if lo < hi {
                            let first = lo * sw + kw - pw;
                            let g = &src[ri * wo + lo..ri * wo + hi];
                            for (d, &v) in dst[first..].iter_mut().step_by(sw).zip(g) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Tensor {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let plane = ho * wo;
    let patch = geo.patch();
    let mut out = vec![0.0; geo.out_channels * plane];
    let rows = geo.tile_rows();
    let mut cols = vec![0.0; patch * rows * wo];
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + rows).min(ho);
        let npos = (r1 - r0) * wo;
        geo.im2col(x, r0, r1, &mut cols[..patch * npos]);
        gemm(
            w,
            View::row_major(geo.out_channels, patch),
            &cols[..patch * npos],
            View::row_major(patch, npos),
            0.0,
            &mut out[r0 * wo..],
            View {
                rows: geo.out_channels,
                cols: npos,
                rs: plane,
                cs: 1,
            },
        );
        r0 = r1;
    }
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            out[co * plane..(co + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![geo.out_channels, ho, wo], out).expect("conv output shape")
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (ho, wo) = (geo.out_height(), geo.out_width());
    let plane = ho * wo;
    let patch = geo.patch();
    let rows = geo.tile_rows();
    let mut cols = vec![0.0; patch * rows * wo];
    let mut dx = need.0.then(|| vec![0.0; geo.in_channels * geo.height * geo.width]);
    let mut dw = need.1.then(|| vec![0.0; geo.out_channels * patch]);
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + rows).min(ho);
        let npos = (r1 - r0) * wo;
        let gview = View {
            rows: geo.out_channels,
            cols: npos,
            rs: plane,
            cs: 1,
        };
        let gslice = &grad_out[r0 * wo..];
        if let Some(dw) = dw.as_mut() {
            geo.im2col(x, r0, r1, &mut cols[..patch * npos]);
            gemm(
                gslice,
                gview,
                &cols[..patch * npos],
                View::row_major(patch, npos).t(),
                1.0,
                dw,
                View::row_major(geo.out_channels, patch),
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                w,
                View::row_major(geo.out_channels, patch).t(),
                gslice,
                gview,
                0.0,
                &mut cols[..patch * npos],
                View::row_major(patch, npos),
            );
            geo.col2im(&cols[..patch * npos], r0, r1, dx);
        }
        r0 = r1;
    }
    let db = need.2.then(|| {
        (0..geo.out_channels)
            .map(|co| grad_out[co * plane..(co + 1) * plane].iter().sum())
            .collect::<Vec<f64>>()
    });
    ConvGrads {
        input: dx.map(|d| {
            Tensor::new(vec![geo.in_channels, geo.height, geo.width], d).expect("dx shape")
        }),
        weight: dw.map(|d| {
            Tensor::new(
                vec![geo.out_channels, geo.in_channels, geo.kernel.0, geo.kernel.1],
                d,
            )
            .expect("dw shape")
        }),
        bias: db.map(|d| Tensor::new(vec![geo.out_channels], d).expect("db shape")),
    }
}
