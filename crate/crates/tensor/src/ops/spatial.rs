use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `out_len x in_len` bilinear resampling matrix with half-pixel
/// (`align_corners = false`) sample positions and edge clamping.
pub fn bilinear_matrix<T: Float>(in_len: usize, out_len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[out_len, in_len]);
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let l1 = src - i0 as f64;
        let row = &mut m.data_mut()[i * in_len..(i + 1) * in_len];
        row[i0] += T::c(1.0 - l1);
        row[i1] += T::c(l1);
    }
    m
}

/// `(in_len / factor) x in_len` non-overlapping mean-pooling matrix.
pub fn avg_pool_matrix<T: Float>(in_len: usize, factor: usize) -> Tensor<T> {
    let out_len = in_len / factor;
    let mut m = Tensor::zeros(&[out_len, in_len]);
    let w = T::c(1.0 / factor as f64);
    for i in 0..out_len {
        for j in 0..factor {
            m.data_mut()[i * in_len + i * factor + j] = w;
        }
    }
    m
}

impl<T: Float> Graph<T> {
    /// Apply a separable linear map to every `H x W` plane of `x`:
    /// `Y = rows * X * cols^T`, with `rows: [H', H]` and `cols: [W', W]`.
    pub fn spatial_linear(&mut self, x: Var, rows: &Tensor<T>, cols: &Tensor<T>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || rows.rank() != 2 || cols.rank() != 2 || rows.dim(1) != sx[2] || cols.dim(1) != sx[3] {
            return Err(TensorError::ShapeMismatch { op: "spatial_linear", lhs: sx, rhs: vec![rows.dim(1), cols.dim(1)] });
        }
        let (h, w, h2, w2) = (sx[2], sx[3], rows.dim(0), cols.dim(0));
        let planes = sx[0] * sx[1];
        let rows = Arc::new(rows.clone());
        let cols = Arc::new(cols.clone());
        let mut out = Tensor::zeros(&[sx[0], sx[1], h2, w2]);
        let mut tmp = vec![T::zero(); h2 * w];
        let xv = self.value(x).data();
        for (p, y) in out.data_mut().chunks_mut(h2 * w2).enumerate() {
            let xp = &xv[p * h * w..(p + 1) * h * w];
            T::gemm(h2, h, w, rows.data(), h as isize, 1, xp, w as isize, 1, T::zero(), &mut tmp, w as isize, 1);
            T::gemm(h2, w, w2, &tmp, w as isize, 1, cols.data(), 1, w as isize, T::zero(), y, w2 as isize, 1);
        }
        debug_assert_eq!(planes * h2 * w2, out.len());
        Ok(self.push_op(
            &[x],
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut gx = Tensor::zeros(&sx);
                let mut tmp = vec![T::zero(); h * w2];
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let gp = &g[p * h2 * w2..(p + 1) * h2 * w2];
                    T::gemm(h, h2, w2, rows.data(), 1, h as isize, gp, w2 as isize, 1, T::zero(), &mut tmp, w2 as isize, 1);
                    T::gemm(h, w2, w, &tmp, w2 as isize, 1, cols.data(), w as isize, 1, T::zero(), dst, w as isize, 1);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_x2_columns_sum_to_two() {
        let m = bilinear_matrix::<f64>(5, 10);
        for j in 0..5 {
            let s: f64 = (0..10).map(|i| m.data()[i * 5 + j]).sum();
            assert!((s - 2.0).abs() < 1e-12);
        }
        for i in 0..10 {
            let s: f64 = m.data()[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_x2_matches_half_pixel_formula() {
        let m = bilinear_matrix::<f64>(4, 8);
        // output 3 samples input position 1.25
        assert_eq!(&m.data()[3 * 4..4 * 4], &[0.0, 0.75, 0.25, 0.0]);
        assert_eq!(&m.data()[0..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn spatial_linear_adjoint_identity() {
        // <A x, y> == <x, A^T y>
        let rows = bilinear_matrix::<f64>(3, 6);
        let cols = avg_pool_matrix::<f64>(4, 2);
        let x = Tensor::from_fn(&[1, 2, 3, 4], |i| (i as f64 * 0.7).sin());
        let y = Tensor::from_fn(&[1, 2, 6, 2], |i| (i as f64 * 1.3).cos());
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let ax = g.spatial_linear(xv, &rows, &cols).unwrap();
        let yv = g.constant(y.clone());
        let prod = g.mul(ax, yv).unwrap();
        let s = g.sum_all(prod);
        let lhs = g.value(s).item();
        let grads = g.backward(s);
        let rhs: f64 = grads.get(xv).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
