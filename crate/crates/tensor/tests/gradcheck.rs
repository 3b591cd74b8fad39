//! Central-difference checks for every differentiable op, in f64.

use gp_tensor::{BatchNormMode, Graph, Param, Tensor, Var};

fn det(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Build `f` on leaf inputs, reduce with a fixed random projection and compare
/// analytic gradients with central differences for every input element.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = f(&mut g, &vars);
        let proj = g.constant(det(g.shape(y), 99));
        let p = g.mul(y, proj).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s);
        (g.value(s).item(), vars.iter().map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)))).collect())
    };
    let (_, analytic) = eval(inputs);
    let eps = 1e-6;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let ana = analytic[i].data()[j];
            assert!(
                (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                "input {i} elem {j}: numeric {num} analytic {ana}"
            );
        }
    }
}

#[test]
fn linear_and_gelu() {
    check(&[det(&[2, 3, 4], 1), det(&[5, 4], 2), det(&[5], 3)], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        g.gelu(y)
    });
}

#[test]
fn bmm_all_transpose_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { det(&[2, 4, 3], 4) } else { det(&[2, 3, 4], 4) };
        let b = if tb { det(&[2, 5, 4], 5) } else { det(&[2, 4, 5], 5) };
        check(&[a, b], |g, v| g.bmm(v[0], v[1], ta, tb).unwrap());
    }
}

#[test]
fn softmax_and_layer_norm() {
    check(&[det(&[3, 6], 6), det(&[6], 7), det(&[6], 8)], |g, v| {
        let s = g.softmax_last(v[0]).unwrap();
        g.layer_norm(s, v[1], v[2], 1e-6).unwrap()
    });
}

#[test]
fn batch_norm_train_and_eval() {
    check(&[det(&[3, 2, 3, 3], 9), det(&[2], 10), det(&[2], 11)], |g, v| {
        let p = Param::<f64>::buffer(Tensor::zeros(&[2]));
        let q = Param::<f64>::buffer(Tensor::ones(&[2]));
        let mode = BatchNormMode::Train { running_mean: p.id(), running_var: q.id(), momentum: 0.1 };
        g.batch_norm2d(v[0], v[1], v[2], mode, 1e-5).unwrap()
    });
    let mean = det(&[2], 12);
    let var = det(&[2], 13).map(|x| x.abs() + 0.5);
    check(&[det(&[2, 2, 2, 3], 14), det(&[2], 15), det(&[2], 16)], |g, v| {
        g.batch_norm2d(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5).unwrap()
    });
}

#[test]
fn shape_ops() {
    check(&[det(&[2, 3, 4], 17), det(&[2, 1, 4], 18), det(&[1, 3, 4], 19)], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        let p = g.permute(c, &[2, 0, 1]).unwrap();
        let n = g.narrow(p, 2, 1, 3).unwrap();
        let r = g.reshape(n, &[4, 2, 3]).unwrap();
        let rep = g.repeat_leading(v[2], 2).unwrap();
        let rp = g.permute(rep, &[2, 0, 1]).unwrap();
        g.add(r, rp).unwrap()
    });
}

#[test]
fn spatial_linear_and_clamp() {
    let rows = gp_tensor::ops::bilinear_matrix::<f64>(3, 6);
    let cols = gp_tensor::ops::avg_pool_matrix::<f64>(4, 2);
    check(&[det(&[1, 2, 3, 4], 20)], |g, v| {
        let y = g.spatial_linear(v[0], &rows, &cols).unwrap();
        let t = g.tanh(y);
        g.clamp(t, -0.5, 0.5)
    });
}

#[test]
fn conv_with_broadcast_bias_and_weighted_sum() {
    check(&[det(&[2, 3, 6, 6], 21), det(&[4, 3, 3, 3], 22), det(&[4], 23), det(&[3], 24)], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        let y = g.add_broadcast(y, v[3]).unwrap();
        let r = g.relu(y);
        let m = g.mean_all(r);
        let s = g.sum_all(v[3]);
        g.weighted_sum(&[(m, 2.0), (s, -0.5)]).unwrap()
    });
}
