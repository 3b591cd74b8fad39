use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `C x H x W` image into a `(C*kh*kw) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad).unwrap();
    let ow = conv_out_size(w, kw, stride, pad).unwrap();
    let l = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut out[((ci * kh + ky) * kw + kx) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_size(h, kh, stride, pad).unwrap();
    let ow = conv_out_size(w, kw, stride, pad).unwrap();
    let l = oh * ow;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * l..][..l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// 2-D convolution (cross-correlation) with zero padding.
    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        let (n, o) = (sx[0], sw[0]);
        let (oh, ow) = match (conv_out_size(sx[2], sw[2], stride, pad), conv_out_size(sx[3], sw[3], stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(TensorError::ShapeMismatch { op: "conv2d window", lhs: sx, rhs: sw }),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: sw, rhs: self.shape(b).to_vec() });
            }
        }
        let geo = Geom { c: sx[1], h: sx[2], w: sx[3], kh: sw[2], kw: sw[3], stride, pad };
        let k = geo.c * geo.kh * geo.kw;
        let l = oh * ow;
        let in_per = geo.c * geo.h * geo.w;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
            for (i, y) in out.data_mut().chunks_mut(o * l).enumerate() {
                let xi = &xv[i * in_per..(i + 1) * in_per];
                let colref: &[T] = if geo.is_pointwise() {
                    xi
                } else {
                    im2col(xi, geo.c, geo.h, geo.w, geo.kh, geo.kw, stride, pad, &mut cols);
                    &cols
                };
                T::gemm(o, k, l, wv, k as isize, 1, colref, l as isize, 1, T::zero(), y, l as isize, 1);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for y in out.data_mut().chunks_mut(o * l) {
                    for (oc, plane) in y.chunks_mut(l).enumerate() {
                        for v in plane {
                            *v += bv[oc];
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            &inputs,
            out,
            Box::new(move |c| {
                let xv = c.inputs[0].data();
                let wv = c.inputs[1].data();
                let g = c.grad.data();
                let need_x = c.needs[0];
                let need_w = c.needs[1];
                let mut gx = need_x.then(|| Tensor::zeros(&sx));
                let mut gw = need_w.then(|| Tensor::zeros(&sw));
                let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
                let mut dcols = if geo.is_pointwise() || !need_x { Vec::new() } else { vec![T::zero(); k * l] };
                for i in 0..n {
                    let gi = &g[i * o * l..(i + 1) * o * l];
                    if let Some(gw) = gw.as_mut() {
                        let xi = &xv[i * in_per..(i + 1) * in_per];
                        let colref: &[T] = if geo.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, geo.c, geo.h, geo.w, geo.kh, geo.kw, stride, pad, &mut cols);
                            &cols
                        };
                        // dW[o,k] += dY[o,l] * cols^T[l,k]
                        T::gemm(o, l, k, gi, l as isize, 1, colref, 1, l as isize, T::one(), gw.data_mut(), k as isize, 1);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxi = &mut gx.data_mut()[i * in_per..(i + 1) * in_per];
                        if geo.is_pointwise() {
                            T::gemm(k, o, l, wv, 1, k as isize, gi, l as isize, 1, T::zero(), gxi, l as isize, 1);
                        } else {
                            T::gemm(k, o, l, wv, 1, k as isize, gi, l as isize, 1, T::zero(), &mut dcols, l as isize, 1);
                            col2im_add(&dcols, geo.c, geo.h, geo.w, geo.kh, geo.kw, stride, pad, gxi);
                        }
                    }
                }
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = Tensor::zeros(&[o]);
                        for gi in g.chunks(o * l) {
                            for (oc, plane) in gi.chunks(l).enumerate() {
                                gb.data_mut()[oc] += plane.iter().copied().sum::<T>();
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = conv_out_size(h, kh, stride, pad).unwrap();
        let ow = conv_out_size(wd, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at4(b, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                        let id = out.idx4(b, oc, y, xx);
                        out.data_mut()[id] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
            let w = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| ((i * 29 % 13) as f64 - 6.0) / 4.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 5) as f64 - 2.0) / 3.0);
        let bias = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> (f64, Option<[Tensor<f64>; 3]>) {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
            let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let s = g.sum_all(y2);
            let grads = g.backward(s);
            (
                g.value(s).item(),
                Some([grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone(), grads.get(bv).unwrap().clone()]),
            )
        };
        let (_, grads) = f(&x, &w, &bias);
        let [gx, gw, gb] = grads.unwrap();
        let eps = 1e-6;
        for idx in [0, 7, 31, 49] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let num = (f(&xp, &w, &bias).0 - f(&xm, &w, &bias).0) / (2.0 * eps);
            assert!((num - gx.data()[idx]).abs() < 1e-6 * (1.0 + num.abs()));
        }
        for idx in [0, 5, 26, 53] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let num = (f(&x, &wp, &bias).0 - f(&x, &wm, &bias).0) / (2.0 * eps);
            assert!((num - gw.data()[idx]).abs() < 1e-6 * (1.0 + num.abs()));
        }
        let mut bp = bias.clone();
        bp.data_mut()[1] += eps;
        let mut bm = bias.clone();
        bm.data_mut()[1] -= eps;
        let num = (f(&x, &w, &bp).0 - f(&x, &w, &bm).0) / (2.0 * eps);
        assert!((num - gb.data()[1]).abs() < 1e-6 * (1.0 + num.abs()));
    }
}
