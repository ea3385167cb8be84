//! Patch extraction for convolutions as a custom op with a direct scatter
//! backward (`col2im`).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Calls `f(row, col, src_index)` for every in-bounds patch element of one
    /// sample.
    #[inline]
    fn walk(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ch * self.h + iy as usize) * self.w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * wo + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

fn gather<T: WithDType>(g: &Geometry, n: usize, src: &[T]) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let per_in = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * rows * cols];
    for b in 0..n {
        let s = &src[b * per_in..(b + 1) * per_in];
        let o = &mut out[b * rows * cols..(b + 1) * rows * cols];
        g.walk(|r, c, i| o[r * cols + c] = s[i]);
    }
    out
}

fn scatter<T: WithDType>(g: &Geometry, n: usize, src: &[T]) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let per_in = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * per_in];
    for b in 0..n {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let o = &mut out[b * per_in..(b + 1) * per_in];
        g.walk(|r, c, i| o[i] += s[r * cols + c]);
    }
    out
}

/// `[N, C, H, W] -> [N, C*kh*kw, Ho*Wo]`.
pub(crate) struct Im2Col(pub Geometry);

/// `[N, C*kh*kw, Ho*Wo] -> [N, C, H, W]`, summing overlapping patches.
pub(crate) struct Col2Im(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l.dims()[0];
        let g = &self.0;
        let shape = Shape::from((n, g.rows(), g.cols()));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather(g, n, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(g, n, contiguous(v, l)?)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = l.dims()[0];
        let g = &self.0;
        let shape = Shape::from((n, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(g, n, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(g, n, contiguous(v, l)?)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}
