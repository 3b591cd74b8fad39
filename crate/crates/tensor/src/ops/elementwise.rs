use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn same_shape<T: Float>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch { op, lhs: g.shape(a).to_vec(), rhs: g.shape(b).to_vec() });
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(&[a, b], out, Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, y| g * y)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(TensorError::ShapeMismatch { op: "add_broadcast", lhs: sa, rhs: sb });
        }
        let inner = self.value(b).len();
        let mut out = self.value(a).clone();
        let bv = self.value(b).data().to_vec();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(&bv) {
                *o += v;
            }
        }
        Ok(self.push_op(
            &[a, b],
            out,
            Box::new(move |c| {
                let gb = c.needs[1].then(|| {
                    let mut acc = Tensor::zeros(&sb);
                    for chunk in c.grad.data().chunks(inner) {
                        for (o, &v) in acc.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc
                });
                vec![Some(c.grad.clone()), gb]
            }),
        ))
    }

    /// `a * mul + add`, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let out = self.value(a).map(|x| x * mul + add);
        self.push_op(&[a], out, Box::new(move |c| vec![Some(c.grad.map(|g| g * mul))]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.affine(a, k, T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(
            &[a],
            out,
            Box::new(|c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() }))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push_op(
            &[a],
            out,
            Box::new(|c| vec![Some(c.grad.zip_map(c.output, |g, y| g * (T::one() - y * y)))]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let c3 = T::c(0.044715);
        let half = T::c(0.5);
        let out = self.value(a).map(|x| half * x * (T::one() + (k * (x + c3 * x * x * x)).tanh()));
        self.push_op(
            &[a],
            out,
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                    let u = k * (x + c3 * x * x * x);
                    let t = u.tanh();
                    let du = k * (T::one() + T::c(3.0) * c3 * x * x);
                    g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                }))]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push_op(
            &[a],
            out,
            Box::new(move |c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x >= lo && x <= hi { g } else { T::zero() }))]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(&[a], out, Box::new(move |c| vec![Some(Tensor::full(&shape, c.grad.item()))]))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::c(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.iter().any(|(v, _)| self.value(*v).len() != 1) {
            return Err(TensorError::Invalid("weighted_sum expects scalar terms".into()));
        }
        let total = terms.iter().fold(T::zero(), |acc, (v, w)| acc + *w * self.value(*v).item());
        let weights: Vec<T> = terms.iter().map(|(_, w)| *w).collect();
        let shapes: Vec<Vec<usize>> = terms.iter().map(|(v, _)| self.shape(*v).to_vec()).collect();
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        Ok(self.push_op(
            &vars,
            Tensor::scalar(total),
            Box::new(move |c| {
                let g = c.grad.item();
                weights.iter().zip(&shapes).map(|(&w, s)| Some(Tensor::full(s, g * w))).collect()
            }),
        ))
    }
}
