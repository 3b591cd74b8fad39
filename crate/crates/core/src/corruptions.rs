//! Depth degradation kernels and the training-time corruption sampler.
//!
//! Every kernel follows the same pipeline: uint8 input, float32 arithmetic,
//! clip to `[0, 255]`, round, uint8 output. Severity is clamped to `[0, 1]`
//! and a severity of exactly zero is the identity for every kind.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::GpError;
use crate::image::DepthMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Clean,
    Quantize,
    Hole,
    Dropout,
    Noise,
    Blur,
    Banding,
    ScaleShift,
}

impl CorruptionKind {
    /// The seven degradations, excluding `Clean`.
    pub const DEGRADATIONS: [CorruptionKind; 7] = [
        CorruptionKind::Quantize,
        CorruptionKind::Hole,
        CorruptionKind::Dropout,
        CorruptionKind::Noise,
        CorruptionKind::Blur,
        CorruptionKind::Banding,
        CorruptionKind::ScaleShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Clean => "clean",
            CorruptionKind::Quantize => "quantize",
            CorruptionKind::Hole => "hole",
            CorruptionKind::Dropout => "dropout",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Banding => "banding",
            CorruptionKind::ScaleShift => "scale_shift",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        std::iter::once(CorruptionKind::Clean)
            .chain(CorruptionKind::DEGRADATIONS)
            .find(|k| k.name() == norm || (norm == "gaussian_noise" && *k == CorruptionKind::Noise))
            .ok_or_else(|| GpError::InvalidArgument(format!("unknown corruption kind '{s}'")))
    }
}

/// One degradation draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f32, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn clean() -> Self {
        Self { kind: CorruptionKind::Clean, severity: 0.0, seed: 0 }
    }

    /// Severity clamped to `[0, 1]`; NaN maps to 0.
    pub fn clamped_severity(&self) -> f32 {
        if self.severity.is_nan() {
            0.0
        } else {
            self.severity.clamp(0.0, 1.0)
        }
    }
}

/// Free constants of the kernel formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConstants {
    /// `n_bins = clamp(round(quantize_k / severity), 2, 256)`.
    pub quantize_k: f32,
    /// Dropout probability per unit severity.
    pub dropout_scale: f32,
    /// Noise standard deviation at severity 1, in value units.
    pub noise_sigma_max: f32,
    pub hole_min_side: f32,
    pub hole_max_side_base: f32,
    pub hole_max_side_slope: f32,
    pub hole_count_slope: f32,
    /// Blur sigma at severity 1, in pixels.
    pub blur_sigma_max: f32,
    pub band_height_max: f32,
    pub band_gap_max: f32,
    pub scale_range: f32,
    pub shift_range: f32,
    /// Probability that a training sample is left clean.
    pub clean_prob: f64,
    pub train_severity_min: f32,
    pub train_severity_max: f32,
}

impl Default for CorruptionConstants {
    fn default() -> Self {
        Self {
            quantize_k: 4.0,
            dropout_scale: 1.0,
            noise_sigma_max: 96.0,
            hole_min_side: 0.1,
            hole_max_side_base: 0.2,
            hole_max_side_slope: 0.3,
            hole_count_slope: 4.0,
            blur_sigma_max: 8.0,
            band_height_max: 8.0,
            band_gap_max: 16.0,
            scale_range: 0.6,
            shift_range: 80.0,
            clean_prob: 0.2,
            train_severity_min: 0.10,
            train_severity_max: 0.90,
        }
    }
}

/// Generator for one corruption draw. The seed picks the key and
/// `stream` separates draws that share a seed (e.g. sample indices).
pub fn corruption_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Apply `spec` with the default constants.
pub fn corrupt(d: &DepthMap, spec: &CorruptionSpec) -> DepthMap {
    corrupt_with(d, spec, &CorruptionConstants::default())
}

pub fn corrupt_with(d: &DepthMap, spec: &CorruptionSpec, k: &CorruptionConstants) -> DepthMap {
    let s = spec.clamped_severity();
    if spec.kind == CorruptionKind::Clean || s == 0.0 {
        return d.clone();
    }
    let mut rng = corruption_rng(spec.seed, 0);
    match spec.kind {
        CorruptionKind::Clean => d.clone(),
        CorruptionKind::Quantize => quantize_with(d, s, k),
        CorruptionKind::Hole => hole_with(d, s, &mut rng, k),
        CorruptionKind::Dropout => dropout_with(d, s, &mut rng, k),
        CorruptionKind::Noise => gaussian_noise_with(d, s, &mut rng, k),
        CorruptionKind::Blur => blur_with(d, s, k),
        CorruptionKind::Banding => banding_with(d, s, &mut rng, k),
        CorruptionKind::ScaleShift => scale_shift_with(d, s, &mut rng, k),
    }
}

fn to_u8(v: f32) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

fn map_f32(d: &DepthMap, f: impl Fn(f32) -> f32) -> DepthMap {
    let data = d.data().iter().map(|&v| to_u8(f(v as f32))).collect();
    DepthMap::new(d.width(), d.height(), data).expect("same size")
}

pub fn quantize_bins(severity: f32, k: &CorruptionConstants) -> usize {
    if severity <= 0.0 {
        return 256;
    }
    (k.quantize_k / severity).round().clamp(2.0, 256.0) as usize
}

pub fn quantize(d: &DepthMap, severity: f32) -> DepthMap {
    quantize_with(d, severity.clamp(0.0, 1.0), &CorruptionConstants::default())
}

fn quantize_with(d: &DepthMap, s: f32, k: &CorruptionConstants) -> DepthMap {
    let n = quantize_bins(s, k);
    if n >= 256 {
        return d.clone();
    }
    let nf = n as f32;
    map_f32(d, |v| {
        let idx = ((v * nf / 256.0).floor()).min(nf - 1.0);
        (idx + 0.5) * 256.0 / nf
    })
}

pub fn dropout(d: &DepthMap, severity: f32, seed: u64) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::Dropout, severity, seed))
}

fn dropout_with(d: &DepthMap, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> DepthMap {
    let p = (s * k.dropout_scale).clamp(0.0, 1.0) as f64;
    let data = d.data().iter().map(|&v| if rng.random_bool(p) { 0 } else { v }).collect();
    DepthMap::new(d.width(), d.height(), data).expect("same size")
}

pub fn gaussian_noise(d: &DepthMap, severity: f32, seed: u64) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::Noise, severity, seed))
}

fn gaussian_noise_with(d: &DepthMap, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> DepthMap {
    let sigma = s * k.noise_sigma_max;
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let data = d.data().iter().map(|&v| to_u8(v as f32 + normal.sample(rng))).collect();
    DepthMap::new(d.width(), d.height(), data).expect("same size")
}

/// Rectangles `(x0, y0, w, h)` zeroed by the hole kernel.
pub fn hole_rects(width: usize, height: usize, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> Vec<(usize, usize, usize, usize)> {
    let n = 1 + (s * k.hole_count_slope).floor() as usize;
    let hi = k.hole_max_side_base + k.hole_max_side_slope * s;
    let side = |rng: &mut ChaCha8Rng, dim: usize| {
        let f = rng.random_range(k.hole_min_side..=hi.max(k.hole_min_side));
        ((f * dim as f32).round() as usize).clamp(1, dim)
    };
    (0..n)
        .map(|_| {
            let w = side(rng, width);
            let h = side(rng, height);
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            (x0, y0, w, h)
        })
        .collect()
}

pub fn hole(d: &DepthMap, severity: f32, seed: u64) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::Hole, severity, seed))
}

fn hole_with(d: &DepthMap, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> DepthMap {
    let mut out = d.clone();
    let w = d.width();
    for (x0, y0, rw, rh) in hole_rects(d.width(), d.height(), s, rng, k) {
        for y in y0..y0 + rh {
            out.data_mut()[y * w + x0..y * w + x0 + rw].fill(0);
        }
    }
    out
}

/// Reflect an out-of-range index back into `0..n` without repeating the edge.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Normalized sampled Gaussian of radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|t| (-(t * t) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with reflect padding, in f32.
pub(crate) fn separable_filter(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn blur(d: &DepthMap, severity: f32) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::Blur, severity, 0))
}

fn blur_with(d: &DepthMap, s: f32, k: &CorruptionConstants) -> DepthMap {
    let sigma = s * k.blur_sigma_max;
    let src: Vec<f32> = d.data().iter().map(|&v| v as f32).collect();
    let out = separable_filter(&src, d.width(), d.height(), &gaussian_kernel(sigma));
    DepthMap::new(d.width(), d.height(), out.into_iter().map(to_u8).collect()).expect("same size")
}

/// Band height and gap, in rows.
pub fn band_geometry(s: f32, k: &CorruptionConstants) -> (usize, usize) {
    let h = (s * k.band_height_max).round().max(1.0) as usize;
    let g = ((1.0 - s) * k.band_gap_max).round().max(1.0) as usize;
    (h, g)
}

pub fn banding(d: &DepthMap, severity: f32, seed: u64) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::Banding, severity, seed))
}

fn banding_with(d: &DepthMap, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> DepthMap {
    let (h, g) = band_geometry(s, k);
    let phase = rng.random_range(0..h + g);
    let w = d.width();
    let mut out = d.clone();
    for y in 0..d.height() {
        if (y + phase) % (h + g) < h {
            out.data_mut()[y * w..(y + 1) * w].fill(0);
        }
    }
    out
}

pub fn scale_shift(d: &DepthMap, severity: f32, seed: u64) -> DepthMap {
    corrupt(d, &CorruptionSpec::new(CorruptionKind::ScaleShift, severity, seed))
}

/// `round(clip(a * d + b))` for a fixed affine map.
pub fn affine_depth(d: &DepthMap, a: f32, b: f32) -> DepthMap {
    map_f32(d, |v| a * v + b)
}

fn scale_shift_with(d: &DepthMap, s: f32, rng: &mut ChaCha8Rng, k: &CorruptionConstants) -> DepthMap {
    let ua: f32 = rng.random_range(-1.0..=1.0);
    let ub: f32 = rng.random_range(-1.0..=1.0);
    affine_depth(d, 1.0 + k.scale_range * s * ua, k.shift_range * s * ub)
}

/// Training protocol: clean with probability `clean_prob`, otherwise one
/// uniformly chosen degradation at a uniform severity.
pub fn sample_corruption<R: Rng + ?Sized>(rng: &mut R) -> CorruptionSpec {
    sample_corruption_with(rng, &CorruptionConstants::default())
}

pub fn sample_corruption_with<R: Rng + ?Sized>(rng: &mut R, k: &CorruptionConstants) -> CorruptionSpec {
    let clean = rng.random_bool(k.clean_prob);
    let kind = CorruptionKind::DEGRADATIONS[rng.random_range(0..7)];
    let severity = rng.random_range(k.train_severity_min..=k.train_severity_max);
    let seed = rng.random::<u64>();
    if clean {
        CorruptionSpec { kind: CorruptionKind::Clean, severity: 0.0, seed }
    } else {
        CorruptionSpec { kind, severity, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ramp(w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|i| (i * 7 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let k = CorruptionConstants::default();
        assert_eq!(quantize_bins(0.9, &k), 4);
        let d = DepthMap::new(1, 1, vec![100]).unwrap();
        assert_eq!(quantize(&d, 0.9).data(), &[96]);
        let d = DepthMap::new(64, 1, (0..64).collect()).unwrap();
        assert!(quantize(&d, 1.0).data().iter().all(|&v| v == 32));
    }

    #[test]
    fn quantize_matches_binning_oracle() {
        let d = ramp(16, 16);
        for s in [0.05f32, 0.2, 0.5, 0.77] {
            let n = quantize_bins(s, &CorruptionConstants::default()) as f64;
            let q = quantize(&d, s);
            for (&a, &b) in d.data().iter().zip(q.data()) {
                let idx = ((a as f64) * n / 256.0).floor().min(n - 1.0);
                let want = ((idx + 0.5) * 256.0 / n).round().clamp(0.0, 255.0) as u8;
                assert_eq!(b, want);
            }
        }
    }

    #[test]
    fn severity_above_one_is_clamped() {
        let d = ramp(32, 32);
        for kind in CorruptionKind::DEGRADATIONS {
            let a = corrupt(&d, &CorruptionSpec::new(kind, 1.7, 9));
            let b = corrupt(&d, &CorruptionSpec::new(kind, 1.0, 9));
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn clean_is_bitwise_identity() {
        let d = ramp(20, 10);
        assert_eq!(corrupt(&d, &CorruptionSpec::new(CorruptionKind::Clean, 0.8, 3)), d);
    }

    #[test]
    fn dropout_extremes() {
        let d = DepthMap::filled(16, 16, 200);
        assert_eq!(dropout(&d, 0.0, 1), d);
        assert!(dropout(&d, 1.0, 1).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn noise_never_leaves_range_at_zero_input() {
        let d = DepthMap::filled(64, 64, 0);
        let out = gaussian_noise(&d, 1.0, 4);
        assert!(out.data().iter().any(|&v| v > 0));
    }

    #[test]
    fn hole_tiny_severity_zeroes_one_small_rectangle() {
        let d = DepthMap::filled(100, 100, 50);
        let k = CorruptionConstants::default();
        let spec = CorruptionSpec::new(CorruptionKind::Hole, 1e-6, 77);
        let out = corrupt(&d, &spec);
        let rects = hole_rects(100, 100, 1e-6, &mut corruption_rng(77, 0), &k);
        assert_eq!(rects.len(), 1);
        let (_, _, w, h) = rects[0];
        assert!((10..=20).contains(&w) && (10..=20).contains(&h));
        let zeros = out.data().iter().filter(|&&v| v == 0).count();
        assert_eq!(zeros, w * h);
        assert!(out.data().iter().all(|&v| v == 0 || v == 50));
    }

    #[test]
    fn hole_full_severity_uses_five_rectangles_up_to_half_side() {
        let k = CorruptionConstants::default();
        for seed in 0..20 {
            let rects = hole_rects(64, 48, 1.0, &mut corruption_rng(seed, 0), &k);
            assert_eq!(rects.len(), 5);
            for (x0, y0, w, h) in rects {
                assert!(w <= 32 && h <= 24 && x0 + w <= 64 && y0 + h <= 48);
            }
        }
    }

    #[test]
    fn blur_step_matches_erf_profile() {
        let (w, h) = (128, 4);
        let d = DepthMap::new(w, h, (0..w * h).map(|i| if i % w >= 64 { 255 } else { 0 }).collect()).unwrap();
        let out = blur(&d, 0.5);
        let sigma = 4.0f64;
        for x in 40..88 {
            let z = (x as f64 - 64.0 + 0.5) / (sigma * std::f64::consts::SQRT_2);
            let want = 255.0 * 0.5 * (1.0 + erf(z));
            let got = out.get(1, x) as f64;
            assert!((got - want).abs() <= 1.0, "x={x} got {got} want {want}");
        }
    }

    // Abramowitz-Stegun 7.1.26 is too coarse here; use a series/continued fraction.
    fn erf(x: f64) -> f64 {
        let t = x.abs();
        let v = if t < 3.0 {
            let mut sum = t;
            let mut term = t;
            let mut n = 0.0;
            while term.abs() > 1e-17 {
                n += 1.0;
                term *= -t * t / n;
                sum += term / (2.0 * n + 1.0);
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            1.0
        };
        v.copysign(x)
    }

    #[test]
    fn blur_preserves_constant() {
        let d = DepthMap::filled(20, 13, 77);
        assert_eq!(blur(&d, 1.0), d);
    }

    #[test]
    fn banding_row_fractions() {
        let k = CorruptionConstants::default();
        assert_eq!(band_geometry(0.1, &k), (1, 14));
        assert_eq!(band_geometry(0.9, &k), (7, 2));
        let d = DepthMap::filled(8, 900, 9);
        for (s, frac) in [(0.1f32, 1.0 / 15.0), (0.9, 7.0 / 9.0)] {
            let out = banding(&d, s, 5);
            let zero_rows = (0..900).filter(|&y| out.get(y, 0) == 0).count() as f64;
            assert!((zero_rows / 900.0 - frac).abs() < 0.01);
            for y in 0..900 {
                let row = &out.data()[y * 8..y * 8 + 8];
                assert!(row.iter().all(|&v| v == 0) || row.iter().all(|&v| v == 9));
            }
        }
    }

    #[test]
    fn scale_shift_examples() {
        let d = DepthMap::new(1, 1, vec![200]).unwrap();
        assert_eq!(affine_depth(&d, 1.54, 72.0).data(), &[255]);
        let ramp = DepthMap::new(256, 1, (0..=255).collect()).unwrap();
        let out = affine_depth(&ramp, 0.4, 0.0);
        assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reflect_handles_large_offsets() {
        let n = 4;
        let got: Vec<usize> = (-7..11).map(|i| reflect(i, n)).collect();
        assert_eq!(got, vec![1, 0, 1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2, 3, 2]);
    }

    #[test]
    fn kind_names_roundtrip() {
        for k in std::iter::once(CorruptionKind::Clean).chain(CorruptionKind::DEGRADATIONS) {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
        assert!("fog".parse::<CorruptionKind>().is_err());
    }

    #[test]
    fn quantize_bins_nonincreasing() {
        let k = CorruptionConstants::default();
        let mut prev = usize::MAX;
        for i in 0..=1000 {
            let n = quantize_bins(i as f32 / 1000.0, &k);
            assert!(n <= prev);
            prev = n;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kernels_are_deterministic_and_near_identity_at_zero(
            data in proptest::collection::vec(any::<u8>(), 12 * 9),
            kind_idx in 0usize..7,
            s in 0.0f32..1.0,
            seed in any::<u64>(),
        ) {
            let d = DepthMap::new(12, 9, data).unwrap();
            let kind = CorruptionKind::DEGRADATIONS[kind_idx];
            let spec = CorruptionSpec::new(kind, s, seed);
            prop_assert_eq!(corrupt(&d, &spec), corrupt(&d, &spec));
            let zero = corrupt(&d, &CorruptionSpec::new(kind, 0.0, seed));
            for (a, b) in d.data().iter().zip(zero.data()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 1);
            }
        }

        #[test]
        fn quantize_distinct_values_bounded(data in proptest::collection::vec(any::<u8>(), 256), s in 0.01f32..1.0) {
            let d = DepthMap::new(16, 16, data).unwrap();
            let n = quantize_bins(s, &CorruptionConstants::default());
            let distinct: HashSet<u8> = quantize(&d, s).data().iter().copied().collect();
            prop_assert!(distinct.len() <= n);
        }

        #[test]
        fn hole_and_banding_only_zero_pixels(data in proptest::collection::vec(1u8..=255, 20 * 20), s in 0.0f32..1.0, seed in any::<u64>()) {
            let d = DepthMap::new(20, 20, data).unwrap();
            for kind in [CorruptionKind::Hole, CorruptionKind::Banding, CorruptionKind::Dropout] {
                let out = corrupt(&d, &CorruptionSpec::new(kind, s, seed));
                for (a, b) in d.data().iter().zip(out.data()) {
                    prop_assert!(*b == 0 || a == b);
                }
            }
        }
    }

    #[test]
    fn sampler_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            let spec = sample_corruption(&mut rng);
            if spec.kind != CorruptionKind::Clean {
                assert!((0.10..=0.90).contains(&spec.severity));
            }
            *counts.entry(spec.kind).or_insert(0usize) += 1;
        }
        let clean = counts[&CorruptionKind::Clean] as f64 / n as f64;
        assert!((clean - 0.2).abs() <= 0.005);
        let corrupted = (n - counts[&CorruptionKind::Clean]) as f64;
        for k in CorruptionKind::DEGRADATIONS {
            assert!((counts[&k] as f64 / corrupted - 1.0 / 7.0).abs() <= 0.01);
        }
    }
}
