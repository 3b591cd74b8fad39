use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::{strides, Tensor};

/// Copy `src` (with `shape`) into a new buffer whose axis order is `perm`.
fn permute_data<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(&[a], out, Box::new(move |c| vec![Some(c.grad.clone().reshape(&old).unwrap())])))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(TensorError::Invalid(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, perm);
        let inv = inverse_perm(perm);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            &[a],
            out,
            Box::new(move |c| {
                let (s, d) = permute_data(c.grad.data(), c.grad.shape(), &inv);
                vec![Some(Tensor::new(&s, d).unwrap())]
            }),
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(TensorError::Empty("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Rank { op: "concat", expected: axis + 1, got: first });
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push_op(
            parts,
            out,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(sizes.len());
                for (i, &sz) in sizes.iter().enumerate() {
                    if !c.needs[i] {
                        res.push(None);
                        offset += sz;
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * sz * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    res.push(Some(Tensor::new(&shapes[i], d).unwrap()));
                    offset += sz;
                }
                res
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            &[a],
            out,
            Box::new(move |c| {
                let mut gin = Tensor::zeros(&shape);
                let g = c.grad.data();
                let d = gin.data_mut();
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    d[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gin)]
            }),
        ))
    }

    /// Repeat a tensor with leading dim 1 `n` times along axis 0.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&1) {
            return Err(TensorError::Invalid(format!("repeat_leading needs leading dim 1, got {shape:?}")));
        }
        let src = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = n;
        let out = Tensor::new(&out_shape, data)?;
        let per = src.len();
        Ok(self.push_op(
            &[a],
            out,
            Box::new(move |c| {
                let mut gin = Tensor::zeros(&shape);
                for chunk in c.grad.data().chunks(per) {
                    for (o, &v) in gin.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                vec![Some(gin)]
            }),
        ))
    }
}
