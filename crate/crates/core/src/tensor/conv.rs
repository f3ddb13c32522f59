//! 2-D convolution by im2col + GEMM, NCHW activations and OIHW weights.

use super::graph::{Graph, Op, Var};
use super::TensorError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output spatial size of a convolution, or `None` if the kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn conv_geometry(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Geometry, TensorError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Shape(format!(
                "conv2d expects NCHW input and OIHW weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::Shape(format!(
                "conv2d input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d stride must be >= 1".into()));
        }
        let (oh, ow) = match (
            conv_out_dim(xs[2], ws[2], stride, pad),
            conv_out_dim(xs[3], ws[3], stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::Shape(format!(
                    "kernel {:?} larger than padded input {:?}",
                    &ws[2..],
                    &xs[2..]
                )))
            }
        };
        Ok(Geometry {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Cross-correlation with symmetric zero padding `pad` on both spatial axes.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let geo = self.conv_geometry(x, w, stride, pad)?;
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::Shape(format!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.shape(b),
                    o
                )));
            }
        }
        let (rows, ncols) = (geo.rows(), geo.cols());
        let xv = self.value(x);
        let wv = self.value(w);
        let in_stride = geo.c * geo.h * geo.w;
        let mut out = vec![T::zero(); n * o * ncols];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncols]
        };
        for img in 0..n {
            let xin = &xv[img * in_stride..(img + 1) * in_stride];
            let src: &[T] = if geo.is_pointwise() {
                xin
            } else {
                im2col(xin, &geo, &mut cols);
                &cols
            };
            let dst = &mut out[img * o * ncols..(img + 1) * o * ncols];
            T::gemm(
                o,
                rows,
                ncols,
                T::one(),
                wv,
                (rows as isize, 1),
                src,
                (ncols as isize, 1),
                T::zero(),
                dst,
                (ncols as isize, 1),
            );
        }
        if let Some(b) = b {
            let bv = self.value(b);
            for (chunk, &bias) in out.chunks_mut(ncols).zip(bv.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            "conv2d",
            vec![n, o, geo.oh, geo.ow],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            &inputs,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv2d_backward(
        &mut self,
        _id: usize,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        g: &[T],
    ) {
        let geo = self
            .conv_geometry(Var(x), Var(w), stride, pad)
            .expect("geometry validated in forward");
        let n = self.nodes[x].shape[0];
        let o = self.nodes[w].shape[0];
        let (rows, ncols) = (geo.rows(), geo.cols());
        let in_stride = geo.c * geo.h * geo.w;
        let need_x = self.wants_grad(x);
        let need_w = self.wants_grad(w);

        let mut gx = if need_x { vec![T::zero(); self.nodes[x].value.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); self.nodes[w].value.len()] } else { Vec::new() };
        {
            let xv = &self.nodes[x].value;
            let wv = &self.nodes[w].value;
            let mut cols = vec![T::zero(); rows * ncols];
            let mut dcols = vec![T::zero(); rows * ncols];
            for img in 0..n {
                let gout = &g[img * o * ncols..(img + 1) * o * ncols];
                if need_w {
                    let xin = &xv[img * in_stride..(img + 1) * in_stride];
                    let src: &[T] = if geo.is_pointwise() {
                        xin
                    } else {
                        im2col(xin, &geo, &mut cols);
                        &cols
                    };
                    // gw[o, rows] += gout[o, ncols] * src^T[ncols, rows]
                    T::gemm(
                        o,
                        ncols,
                        rows,
                        T::one(),
                        gout,
                        (ncols as isize, 1),
                        src,
                        (1, ncols as isize),
                        T::one(),
                        &mut gw,
                        (rows as isize, 1),
                    );
                }
                if need_x {
                    let dst = &mut gx[img * in_stride..(img + 1) * in_stride];
                    if geo.is_pointwise() {
                        T::gemm(
                            rows,
                            o,
                            ncols,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            gout,
                            (ncols as isize, 1),
                            T::zero(),
                            dst,
                            (ncols as isize, 1),
                        );
                    } else {
                        T::gemm(
                            rows,
                            o,
                            ncols,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            gout,
                            (ncols as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (ncols as isize, 1),
                        );
                        col2im(&dcols, &geo, dst);
                    }
                }
            }
        }
        if let Some(b) = b {
            if self.wants_grad(b) {
                let mut gb = vec![T::zero(); o];
                for (idx, chunk) in g.chunks(ncols).enumerate() {
                    gb[idx % o] += chunk.iter().copied().sum::<T>();
                }
                self.accumulate(b, gb);
            }
        }
        if need_x {
            self.accumulate(x, gx);
        }
        if need_w {
            self.accumulate(w, gw);
        }
    }
}
