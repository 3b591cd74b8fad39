use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Row/column strides of a logical `rows x cols` matrix stored plainly
/// (`transposed == false`) or as its transpose.
fn mat_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl<T: Float> Graph<T> {
    /// Batched matrix product of rank-3 tensors. With `ta`/`tb` set, the
    /// corresponding operand is read transposed in its last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (rsa, csa) = mat_strides(m, k, ta);
            let (rsb, csb) = mat_strides(k, n, tb);
            for (i, c) in out.data_mut().chunks_mut(m * n).enumerate() {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    rsa,
                    csa,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    c,
                    n as isize,
                    1,
                );
            }
        }
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(move |c| {
                let (av, bv, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let (rsa, csa) = mat_strides(m, k, ta);
                let (rsb, csb) = mat_strides(k, n, tb);
                let ga = c.needs[0].then(|| {
                    let mut ga = Tensor::zeros(&sa);
                    for i in 0..batch {
                        // dA[m,k] = dC[m,n] * op(B)^T[n,k]
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv[i * k * n..(i + 1) * k * n],
                            csb,
                            rsb,
                            T::zero(),
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                            rsa,
                            csa,
                        );
                    }
                    ga
                });
                let gb = c.needs[1].then(|| {
                    let mut gb = Tensor::zeros(&sb);
                    for i in 0..batch {
                        // dB[k,n] = op(A)^T[k,m] * dC[m,n]
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            csa,
                            rsa,
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            T::zero(),
                            &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x W^T + b` over the last axis of `x`, with `W` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().ok_or(TensorError::Empty("linear"))?;
        if sw.len() != 2 || sw[1] != d_in {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: sx, rhs: sw });
        }
        let d_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(TensorError::ShapeMismatch { op: "linear bias", lhs: sw, rhs: self.shape(b).to_vec() });
            }
        }
        let rows = self.value(x).len() / d_in;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&out_shape);
        T::gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            d_in as isize,
            1,
            self.value(w).data(),
            1,
            d_in as isize,
            T::zero(),
            out.data_mut(),
            d_out as isize,
            1,
        );
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(d_out) {
                for (o, &v) in row.iter_mut().zip(&bv) {
                    *o += v;
                }
            }
            inputs.push(b);
        }
        Ok(self.push_op(
            &inputs,
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let gx = c.needs[0].then(|| {
                    let mut gx = Tensor::zeros(&sx);
                    T::gemm(rows, d_out, d_in, g, d_out as isize, 1, c.inputs[1].data(), d_in as isize, 1, T::zero(), gx.data_mut(), d_in as isize, 1);
                    gx
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = Tensor::zeros(&sw);
                    T::gemm(d_out, rows, d_in, g, 1, d_out as isize, c.inputs[0].data(), d_in as isize, 1, T::zero(), gw.data_mut(), d_in as isize, 1);
                    gw
                });
                let mut res = vec![gx, gw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = Tensor::zeros(&[d_out]);
                        for row in g.chunks(d_out) {
                            for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
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
