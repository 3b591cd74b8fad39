use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, StatUpdate, Var};
use crate::param::ParamId;
use crate::tensor::Tensor;

/// How a batch norm obtains its statistics.
pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics and emit running-stat updates.
    Train { running_mean: ParamId, running_var: ParamId, momentum: f64 },
    /// Normalize with frozen running statistics.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

impl<T: Float> Graph<T> {
    /// Per-channel normalization of `x: [N, C, H, W]` followed by `gamma * x + beta`.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::Rank { op: "batch_norm2d", expected: 4, got: sx });
        }
        let (n, ch, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(TensorError::ShapeMismatch { op: "batch_norm2d affine", lhs: sx, rhs: self.shape(gamma).to_vec() });
        }
        let count = n * plane;
        let xv = self.value(x).data();
        let (mean, var, train) = match &mode {
            BatchNormMode::Train { .. } => {
                if count < 2 {
                    return Err(TensorError::Invalid("batch_norm2d: need more than one value per channel in training".into()));
                }
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * ch + c) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::c(count as f64);
                    let mut v = T::zero();
                    for b in 0..n {
                        for &e in &xv[(b * ch + c) * plane..][..plane] {
                            v += (e - m) * (e - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = v / T::c(count as f64);
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => (mean.data().to_vec(), var.data().to_vec(), false),
        };
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(&sx);
        for b in 0..n {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                let (scale, shift) = (gv[c] * inv[c], bv[c] - gv[c] * inv[c] * mean[c]);
                for (o, &e) in out.data_mut()[off..off + plane].iter_mut().zip(&xv[off..off + plane]) {
                    *o = e * scale + shift;
                }
            }
        }
        if let BatchNormMode::Train { running_mean, running_var, momentum } = mode {
            let unbias = T::c(count as f64 / (count - 1) as f64);
            self.push_stat_update(StatUpdate { target: running_mean, batch_value: Tensor::new(&[ch], mean.clone())?, momentum });
            self.push_stat_update(StatUpdate {
                target: running_var,
                batch_value: Tensor::new(&[ch], var.iter().map(|&v| v * unbias).collect())?,
                momentum,
            });
        }
        Ok(self.push_op(
            &[x, gamma, beta],
            out,
            Box::new(move |c| {
                let xv = c.inputs[0].data();
                let gv = c.inputs[1].data();
                let g = c.grad.data();
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for b in 0..n {
                    for k in 0..ch {
                        let off = (b * ch + k) * plane;
                        for (&dy, &e) in g[off..off + plane].iter().zip(&xv[off..off + plane]) {
                            sum_dy[k] += dy;
                            sum_dy_xhat[k] += dy * (e - mean[k]) * inv[k];
                        }
                    }
                }
                let gx = c.needs[0].then(|| {
                    let mut gx = Tensor::zeros(&sx);
                    let m = T::c(count as f64);
                    for b in 0..n {
                        for k in 0..ch {
                            let off = (b * ch + k) * plane;
                            let dst = &mut gx.data_mut()[off..off + plane];
                            for ((o, &dy), &e) in dst.iter_mut().zip(&g[off..off + plane]).zip(&xv[off..off + plane]) {
                                *o = if train {
                                    let xhat = (e - mean[k]) * inv[k];
                                    gv[k] * inv[k] / m * (m * dy - sum_dy[k] - xhat * sum_dy_xhat[k])
                                } else {
                                    dy * gv[k] * inv[k]
                                };
                            }
                        }
                    }
                    gx
                });
                vec![
                    gx,
                    c.needs[1].then(|| Tensor::new(&[ch], sum_dy_xhat.clone()).unwrap()),
                    c.needs[2].then(|| Tensor::new(&[ch], sum_dy.clone()).unwrap()),
                ]
            }),
        ))
    }

    /// Normalize over the last axis, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::Empty("layer_norm"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: sx, rhs: self.shape(gamma).to_vec() });
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv = vec![T::zero(); rows];
        let mut out = Tensor::zeros(&sx);
        let df = T::c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / df;
            let v = row.iter().map(|&e| (e - m) * (e - m)).sum::<T>() / df;
            let iv = T::one() / (v + T::c(eps)).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let xh = (row[j] - m) * iv;
                xhat[r * d + j] = xh;
                out.data_mut()[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        Ok(self.push_op(
            &[x, gamma, beta],
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let gv = c.inputs[1].data();
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = Tensor::zeros(&sx);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dyg = gr[j] * gv[j];
                        s1 += dyg;
                        s2 += dyg * xr[j];
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = inv[r] / df * (df * gr[j] * gv[j] - s1 - xr[j] * s2);
                    }
                }
                vec![
                    c.needs[0].then_some(gx),
                    c.needs[1].then(|| Tensor::new(&[d], ggamma).unwrap()),
                    c.needs[2].then(|| Tensor::new(&[d], gbeta).unwrap()),
                ]
            }),
        ))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::Empty("softmax"))?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |c| {
                let mut gx = c.grad.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(d).zip(c.output.data().chunks(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &y) in gr.iter_mut().zip(yr) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
