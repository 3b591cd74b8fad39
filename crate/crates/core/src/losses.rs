//! Segmentation loss and prompt regularizers.

use gp_tensor::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::image::IGNORE_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_tv: f64,
    pub lambda_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_tv: 1e-5, lambda_delta: 5e-4 }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights { lambda_tv: 0.0, lambda_delta: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if self.lambda_tv < 0.0 || self.lambda_delta < 0.0 {
            return Err(GpError::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemConfig {
    /// Pixels whose ground-truth probability is below this are hard; at 1.0
    /// every valid pixel is kept.
    pub thresh: f64,
    /// Minimum fraction of valid pixels kept.
    pub min_kept: f64,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self { thresh: 0.7, min_kept: 1.0 / 16.0 }
    }
}

/// Per-pixel softmax probabilities and cross-entropy for `[B, K, H, W]` logits.
fn pixel_softmax_ce<T: Float>(logits: &Tensor<T>, labels: &[u8]) -> Result<(Vec<f64>, Vec<Option<(f64, f64)>>)> {
    let s = logits.shape();
    if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
        return Err(GpError::Shape(format!("logits {:?} vs {} labels", s, labels.len())));
    }
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let x = logits.data();
    let mut probs = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(b * hw);
    for n in 0..b {
        for i in 0..hw {
            let at = |c: usize| n * k * hw + c * hw + i;
            let max = (0..k).map(|c| x[at(c)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[at(c)].f64() - max).exp()).sum();
            for c in 0..k {
                probs[at(c)] = (x[at(c)].f64() - max).exp() / z;
            }
            let y = labels[n * hw + i];
            if y == IGNORE_INDEX {
                stats.push(None);
                continue;
            }
            let y = y as usize;
            if y >= k {
                return Err(GpError::InvalidArgument(format!("label {y} out of range for {k} classes")));
            }
            let ce = z.ln() + max - x[at(y)].f64();
            stats.push(Some((probs[at(y)], ce)));
        }
    }
    Ok((probs, stats))
}

/// Indices of the pixels OHEM keeps, given `(p_gt, ce)` per valid pixel.
pub fn ohem_selection(stats: &[Option<(f64, f64)>], cfg: &OhemConfig) -> Result<Vec<usize>> {
    let valid: Vec<usize> = (0..stats.len()).filter(|&i| stats[i].is_some()).collect();
    if valid.is_empty() {
        return Err(GpError::AllIgnored);
    }
    let n_min = ((cfg.min_kept * valid.len() as f64).ceil() as usize).clamp(1, valid.len());
    let hard: Vec<usize> = valid.iter().copied().filter(|&i| cfg.thresh >= 1.0 || stats[i].unwrap().0 < cfg.thresh).collect();
    if hard.len() >= n_min {
        return Ok(hard);
    }
    let mut by_ce = valid;
    by_ce.sort_by(|&a, &b| stats[b].unwrap().1.total_cmp(&stats[a].unwrap().1).then(a.cmp(&b)));
    by_ce.truncate(n_min);
    by_ce.sort_unstable();
    Ok(by_ce)
}

/// OHEM cross-entropy of `[B, K, H, W]` logits against flattened `[B, H, W]`
/// labels (ignore index 255). The selection is treated as constant.
pub fn ohem_cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[u8], cfg: &OhemConfig) -> Result<Var> {
    let (probs, stats) = pixel_softmax_ce(g.value(logits), labels)?;
    let kept = ohem_selection(&stats, cfg)?;
    let loss = kept.iter().map(|&i| stats[i].unwrap().1).sum::<f64>() / kept.len() as f64;
    let shape = g.shape(logits).to_vec();
    let (k, hw) = (shape[1], shape[2] * shape[3]);
    let labels = labels.to_vec();
    Ok(g.push_op(
        &[logits],
        Tensor::scalar(T::c(loss)),
        Box::new(move |c| {
            let scale = c.grad.item().f64() / kept.len() as f64;
            let mut gx = Tensor::zeros(&shape);
            let d = gx.data_mut();
            for &p in &kept {
                let (n, i) = (p / hw, p % hw);
                let y = labels[p] as usize;
                for cls in 0..k {
                    let at = n * k * hw + cls * hw + i;
                    let target = if cls == y { 1.0 } else { 0.0 };
                    d[at] = T::c((probs[at] - target) * scale);
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Anisotropic total variation of `[B, 1, H, W]`: per image, the sum of
/// absolute forward differences divided by their count; averaged over `B`.
pub fn tv_penalty<T: Float>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(GpError::Shape(format!("TV expects [B, 1, H, W], got {shape:?}")));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let count = (h * (w - 1) + (h - 1) * w) as f64;
    if count == 0.0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let x = g.value(p).data().to_vec();
    let mut total = 0.0;
    for n in 0..b {
        let img = &x[n * h * w..(n + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = img[y * w + xx].f64();
                if xx + 1 < w {
                    total += (img[y * w + xx + 1].f64() - v).abs();
                }
                if y + 1 < h {
                    total += (img[(y + 1) * w + xx].f64() - v).abs();
                }
            }
        }
    }
    let norm = 1.0 / (count * b as f64);
    Ok(g.push_op(
        &[p],
        Tensor::scalar(T::c(total * norm)),
        Box::new(move |c| {
            let s = c.grad.item().f64() * norm;
            let mut gx = vec![T::zero(); x.len()];
            let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            for n in 0..b {
                let o = n * h * w;
                for y in 0..h {
                    for xx in 0..w {
                        let i = o + y * w + xx;
                        if xx + 1 < w {
                            let sg = T::c(s * sign(x[i + 1].f64() - x[i].f64()));
                            gx[i + 1] += sg;
                            gx[i] -= sg;
                        }
                        if y + 1 < h {
                            let sg = T::c(s * sign(x[i + w].f64() - x[i].f64()));
                            gx[i + w] += sg;
                            gx[i] -= sg;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx).expect("sized"))]
        }),
    ))
}

/// Mean absolute value.
pub fn residual_l1<T: Float>(g: &mut Graph<T>, delta: Var) -> Var {
    let x = g.value(delta).clone();
    let n = x.len().max(1) as f64;
    let v = x.data().iter().map(|a| a.f64().abs()).sum::<f64>() / n;
    g.push_op(
        &[delta],
        Tensor::scalar(T::c(v)),
        Box::new(move |c| {
            let s = T::c(c.grad.item().f64() / n);
            vec![Some(x.map(|a| if a > T::zero() { s } else if a < T::zero() { -s } else { T::zero() }))]
        }),
    )
}

/// Handles of the objective and its terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub seg: Var,
    pub tv: Var,
    pub l1: Var,
}

/// `L_seg + λ_tv L_tv + λ_δ |Δ|_1`.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    p_raw: Var,
    delta: Var,
    w: &LossWeights,
    ohem: &OhemConfig,
) -> Result<LossTerms> {
    let seg = ohem_cross_entropy(g, logits, labels, ohem)?;
    let tv = tv_penalty(g, p_raw)?;
    let l1 = residual_l1(g, delta);
    let total = g.weighted_sum(&[(seg, T::one()), (tv, T::c(w.lambda_tv)), (l1, T::c(w.lambda_delta))])?;
    Ok(LossTerms { total, seg, tv, l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ce_oracle(logits: &[f64], k: usize, hw: usize, labels: &[u8]) -> Vec<Option<(f64, f64)>> {
        (0..labels.len())
            .map(|p| {
                if labels[p] == 255 {
                    return None;
                }
                let (n, i) = (p / hw, p % hw);
                let z: Vec<f64> = (0..k).map(|c| logits[n * k * hw + c * hw + i]).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                let y = labels[p] as usize;
                Some(((z[y] - lse).exp(), lse - z[y]))
            })
            .collect()
    }

    fn loss_of(logits: Tensor<f64>, labels: &[u8], cfg: &OhemConfig) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(logits);
        let l = ohem_cross_entropy(&mut g, v, labels, cfg)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn confident_correct_keeps_min_floor() {
        let (k, hw) = (3, 16);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let logits = Tensor::from_fn(&[1, k, 4, 4], |j| {
            let (c, i) = (j / hw, j % hw);
            if c == labels[i] as usize { 8.0 + 0.1 * i as f64 } else { 0.0 }
        });
        let stats = ce_oracle(logits.data(), k, hw, &labels);
        let mut ces: Vec<f64> = stats.iter().map(|s| s.unwrap().1).collect();
        ces.sort_by(|a, b| b.total_cmp(a));
        let got = loss_of(logits, &labels, &OhemConfig::default()).unwrap();
        assert!((got - ces[0]).abs() < 1e-12);
        assert!(got < 1e-3);
    }

    #[test]
    fn all_ignored_is_error() {
        let r = loss_of(Tensor::zeros(&[1, 2, 2, 2]), &[255; 4], &OhemConfig::default());
        assert!(matches!(r, Err(GpError::AllIgnored)));
    }

    #[test]
    fn tv_examples() {
        let tv = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let r = tv_penalty(&mut g, v).unwrap();
            g.value(r).item()
        };
        assert_eq!(tv(Tensor::full(&[1, 1, 5, 5], 3.0)), 0.0);
        let step = Tensor::from_fn(&[1, 1, 64, 64], |i| if i % 64 >= 32 { 255.0 } else { 0.0 });
        let want = 255.0 * 64.0 / (64.0 * 63.0 + 63.0 * 64.0);
        assert!((tv(step.clone()) - want).abs() < 1e-12);
        assert!((want - 2.0238).abs() < 1e-4);
        assert!((tv(step.map(|v| -2.5 * v)) - 2.5 * want).abs() < 1e-9);
    }

    #[test]
    fn l1_examples() {
        let l1 = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let r = residual_l1(&mut g, v);
            g.value(r).item()
        };
        assert_eq!(l1(Tensor::zeros(&[1, 1, 4, 4])), 0.0);
        assert_eq!(l1(Tensor::full(&[1, 1, 4, 4], 2.0)), 2.0);
        let t = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.37).sin());
        let want = t.data().iter().map(|v| v.abs()).sum::<f64>() / 18.0;
        assert_eq!(l1(t), want);
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let logits = Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f64 * 0.7).cos());
        let labels: Vec<u8> = (0..16).map(|i| (i * 5 % 3) as u8).collect();
        let p = Tensor::from_fn(&[1, 1, 4, 4], |i| 100.0 + (i * i) as f64);
        let d = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 - 1.5);
        let w = LossWeights { lambda_tv: 0.3, lambda_delta: 0.7 };
        let mut g = Graph::new();
        let (lv, pv, dv) = (g.constant(logits.clone()), g.constant(p), g.constant(d));
        let t = total_loss(&mut g, lv, &labels, pv, dv, &w, &OhemConfig::default()).unwrap();
        let (seg, tv, l1) = (g.value(t.seg).item(), g.value(t.tv).item(), g.value(t.l1).item());
        assert!(seg > 0.0 && tv > 0.0 && l1 > 0.0);
        assert!((g.value(t.total).item() - (seg + 0.3 * tv + 0.7 * l1)).abs() < 1e-12);
        let t0 = total_loss(&mut g, lv, &labels, pv, dv, &LossWeights::NONE, &OhemConfig::default()).unwrap();
        assert_eq!(g.value(t0.total).item(), seg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn thresh_one_is_masked_mean_ce(
            xs in proptest::collection::vec(-4.0f64..4.0, 2 * 4 * 9),
            ys in proptest::collection::vec(prop_oneof![0u8..4, Just(255u8)], 2 * 9),
        ) {
            prop_assume!(ys.iter().any(|&y| y != 255));
            let logits = Tensor::new(&[2, 4, 3, 3], xs).unwrap();
            let stats = ce_oracle(logits.data(), 4, 9, &ys);
            let valid: Vec<f64> = stats.iter().flatten().map(|s| s.1).collect();
            let want = valid.iter().sum::<f64>() / valid.len() as f64;
            let got = loss_of(logits, &ys, &OhemConfig { thresh: 1.0, min_kept: 1.0 / 16.0 }).unwrap();
            prop_assert!((got - want).abs() < 1e-6);
        }

        #[test]
        fn ohem_matches_sort_oracle(
            xs in proptest::collection::vec(-3.0f64..3.0, 3 * 16),
            ys in proptest::collection::vec(0u8..3, 16),
            thresh in 0.05f64..0.9,
            min_kept in 0.0f64..1.0,
        ) {
            let logits = Tensor::new(&[1, 3, 4, 4], xs).unwrap();
            let stats = ce_oracle(logits.data(), 3, 16, &ys);
            let hard: Vec<f64> = stats.iter().flatten().filter(|s| s.0 < thresh).map(|s| s.1).collect();
            let n_min = ((min_kept * 16.0).ceil() as usize).clamp(1, 16);
            let kept = if hard.len() >= n_min {
                hard
            } else {
                let mut all: Vec<f64> = stats.iter().flatten().map(|s| s.1).collect();
                all.sort_by(|a, b| b.total_cmp(a));
                all.truncate(n_min);
                all
            };
            let want = kept.iter().sum::<f64>() / kept.len() as f64;
            let got = loss_of(logits, &ys, &OhemConfig { thresh, min_kept }).unwrap();
            prop_assert!((got - want).abs() < 1e-9);
        }
    }
}
