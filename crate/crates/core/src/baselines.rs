//! Naive pseudo-depth controls computed from RGB alone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruptions::{gaussian_kernel, reflect, separable_filter};
use crate::error::GpError;
use crate::image::{DepthMap, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConstants {
    pub canny_sigma: f32,
    pub canny_low: f32,
    pub canny_high: f32,
    pub scharr_percentile: f32,
    pub scharr_sigma: f32,
    pub blend_alpha: f32,
}

impl Default for BaselineConstants {
    fn default() -> Self {
        Self { canny_sigma: 1.4, canny_low: 100.0, canny_high: 200.0, scharr_percentile: 0.8, scharr_sigma: 2.0, blend_alpha: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Luminance,
    Canny,
    Laplacian,
    Scharr,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [BaselineKind::Luminance, BaselineKind::Canny, BaselineKind::Laplacian, BaselineKind::Scharr];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Luminance => "luminance_gray",
            BaselineKind::Canny => "canny_distance",
            BaselineKind::Laplacian => "laplacian_edges",
            BaselineKind::Scharr => "scharr_distance",
        }
    }

    pub fn apply(self, x: &RgbImage, k: &BaselineConstants) -> DepthMap {
        match self {
            BaselineKind::Luminance => luminance_gray(x),
            BaselineKind::Canny => canny_distance_zero_blend(x, k),
            BaselineKind::Laplacian => laplacian_edges(x),
            BaselineKind::Scharr => scharr_distance_zero_blend(x, k),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().split('_').next() == Some(s))
            .ok_or_else(|| GpError::InvalidArgument(format!("unknown baseline '{s}'")))
    }
}

pub fn luminance_gray(x: &RgbImage) -> DepthMap {
    let data = x
        .data()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    DepthMap::new(x.width(), x.height(), data).expect("same size")
}

fn gray_f32(x: &RgbImage) -> Vec<f32> {
    luminance_gray(x).data().iter().map(|&v| v as f32).collect()
}

/// 3×3 correlation with reflect borders.
fn filter3(src: &[f32], w: usize, h: usize, k: &[[f32; 3]; 3]) -> Vec<f32> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let yy = reflect(y as isize + dy as isize - 1, h);
                for (dx, kv) in row.iter().enumerate() {
                    if *kv != 0.0 {
                        acc += kv * src[yy * w + reflect(x as isize + dx as isize - 1, w)];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel.
/// Returns `None` when there are no such pixels.
pub fn distance_transform(mask: &[bool], w: usize, h: usize) -> Option<Vec<f32>> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let inf = 1e20f64;
    let mut f: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { inf }).collect();
    let mut line = Vec::new();
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| f[y * w + x]));
        let d = edt_1d(&line);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        let d = edt_1d(&f[y * w..(y + 1) * w]);
        f[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    Some(f.into_iter().map(|v| v.sqrt() as f32).collect())
}

/// Squared distance transform of a sampled function (lower envelope of parabolas).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Scale to `[0, 255]` by the maximum, then multiply by `alpha`.
fn normalize_blend(v: &[f32], alpha: f32) -> Vec<f32> {
    let max = v.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&d| d / max * 255.0 * alpha).collect()
}

fn to_depth(w: usize, h: usize, v: &[f32]) -> DepthMap {
    DepthMap::new(w, h, v.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect()).expect("same size")
}

/// Canny edge mask on an 8-bit gray image.
pub fn canny_edges(gray: &[f32], w: usize, h: usize, k: &BaselineConstants) -> Vec<bool> {
    let smooth = separable_filter(gray, w, h, &gaussian_kernel(k.canny_sigma));
    let gx = filter3(&smooth, w, h, &[[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]);
    let gy = filter3(&smooth, w, h, &[[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]]);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    // Non-maximum suppression along the quantized gradient direction.
    let tan22 = (22.5f32).to_radians().tan();
    let mut state = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m < k.canny_low {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (a, b) = if ay <= ax * tan22 {
                (at(x - 1, y), at(x + 1, y))
            } else if ax <= ay * tan22 {
                (at(x, y - 1), at(x, y + 1))
            } else if (gx[i] > 0.0) == (gy[i] > 0.0) {
                (at(x - 1, y - 1), at(x + 1, y + 1))
            } else {
                (at(x + 1, y - 1), at(x - 1, y + 1))
            };
            if m > a && m >= b {
                state[i] = if m >= k.canny_high { 2 } else { 1 };
            }
        }
    }
    // Hysteresis: weak pixels 8-connected to a strong one become edges.
    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| state[i] == 2).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if state[j] == 1 && !edge[j] {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

pub fn canny_distance_zero_blend(x: &RgbImage, k: &BaselineConstants) -> DepthMap {
    let (w, h) = (x.width(), x.height());
    let edges = canny_edges(&gray_f32(x), w, h, k);
    match distance_transform(&edges, w, h) {
        Some(d) => to_depth(w, h, &normalize_blend(&d, k.blend_alpha)),
        None => DepthMap::filled(w, h, 0),
    }
}

pub fn laplacian_edges(x: &RgbImage) -> DepthMap {
    let (w, h) = (x.width(), x.height());
    let resp: Vec<f32> = filter3(&gray_f32(x), w, h, &[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
        .into_iter()
        .map(f32::abs)
        .collect();
    let lo = resp.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = resp.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return DepthMap::filled(w, h, 0);
    }
    let v: Vec<f32> = resp.iter().map(|&r| (r - lo) / (hi - lo) * 255.0).collect();
    to_depth(w, h, &v)
}

/// Scharr gradient magnitude.
pub fn scharr_magnitude(gray: &[f32], w: usize, h: usize) -> Vec<f32> {
    let gx = filter3(gray, w, h, &[[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]);
    let gy = filter3(gray, w, h, &[[-3.0, -10.0, -3.0], [0.0, 0.0, 0.0], [3.0, 10.0, 3.0]]);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

pub fn scharr_distance_zero_blend(x: &RgbImage, k: &BaselineConstants) -> DepthMap {
    let (w, h) = (x.width(), x.height());
    let mag = scharr_magnitude(&gray_f32(x), w, h);
    let mut sorted = mag.clone();
    sorted.sort_by(f32::total_cmp);
    let idx = ((sorted.len() - 1) as f32 * k.scharr_percentile).floor() as usize;
    let thresh = sorted[idx];
    let mask: Vec<bool> = mag.iter().map(|&m| m > thresh).collect();
    let Some(dist) = distance_transform(&mask, w, h) else {
        return DepthMap::filled(w, h, 0);
    };
    let norm = normalize_blend(&dist, 1.0);
    let smooth = separable_filter(&norm, w, h, &gaussian_kernel(k.scharr_sigma));
    let v: Vec<f32> = smooth.iter().map(|&s| s * k.blend_alpha).collect();
    to_depth(w, h, &v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb_from_gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> RgbImage {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let v = f(x, y);
                data.extend([v, v, v]);
            }
        }
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn luminance_examples() {
        let px = |r, g, b| RgbImage::new(1, 1, vec![r, g, b]).unwrap();
        assert_eq!(luminance_gray(&px(255, 255, 255)).data(), &[255]);
        assert_eq!(luminance_gray(&px(0, 255, 0)).data(), &[150]);
        for v in [0u8, 1, 77, 128, 254] {
            assert_eq!(luminance_gray(&px(v, v, v)).data(), &[v]);
        }
    }

    #[test]
    fn edt_matches_brute_force() {
        let (w, h) = (13, 9);
        let mask: Vec<bool> = (0..w * h).map(|i| (i * 37 + 11) % 23 == 0).collect();
        let d = distance_transform(&mask, w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want = (0..w * h)
                    .filter(|&j| mask[j])
                    .map(|j| {
                        let (dx, dy) = ((j % w) as f64 - x as f64, (j / w) as f64 - y as f64);
                        (dx * dx + dy * dy).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((d[y * w + x] as f64 - want).abs() < 1e-5);
            }
        }
        assert!(distance_transform(&[false; 4], 2, 2).is_none());
    }

    #[test]
    fn canny_step_gives_single_column_and_linear_distance() {
        let (w, h) = (40, 24);
        let x = rgb_from_gray(w, h, |x, _| if x >= 20 { 255 } else { 0 });
        let k = BaselineConstants::default();
        let edges = canny_edges(&gray_f32(&x), w, h, &k);
        let cols: Vec<usize> = (0..w).filter(|&c| (0..h).all(|r| edges[r * w + c])).collect();
        // The two columns straddling the step tie up to rounding; either may win.
        assert_eq!(cols.len(), 1);
        let e = cols[0];
        assert!(e == 19 || e == 20);
        assert_eq!(edges.iter().filter(|&&e| e).count(), h);
        let d = distance_transform(&edges, w, h).unwrap();
        for c in 0..w {
            assert_eq!(d[5 * w + c], (c as f32 - e as f32).abs());
        }
        let out = canny_distance_zero_blend(&x, &k);
        assert!(out.data().iter().all(|&v| v <= 128));
        assert_eq!(out.get(0, e), 0);
    }

    #[test]
    fn flat_images_give_zero_maps() {
        let x = rgb_from_gray(16, 16, |_, _| 90);
        let k = BaselineConstants::default();
        for b in [BaselineKind::Canny, BaselineKind::Laplacian, BaselineKind::Scharr] {
            assert!(b.apply(&x, &k).data().iter().all(|&v| v == 0), "{b}");
        }
    }

    #[test]
    fn laplacian_single_pixel() {
        let x = rgb_from_gray(7, 7, |x, y| if (x, y) == (3, 3) { 200 } else { 0 });
        let out = laplacian_edges(&x);
        assert_eq!(out.get(3, 3), 255);
        assert_eq!(out.get(3, 2), 64);
        assert_eq!(out.get(0, 0), 0);
        assert_eq!(*out.data().iter().max().unwrap(), 255);
        assert_eq!(*out.data().iter().min().unwrap(), 0);
    }

    #[test]
    fn scharr_step_is_symmetric() {
        let (w, h) = (32, 16);
        let x = rgb_from_gray(w, h, |x, _| if x >= 16 { 255 } else { 0 });
        let out = scharr_distance_zero_blend(&x, &BaselineConstants::default());
        for y in 0..h {
            for c in 0..w {
                assert!((out.get(y, c) as i32 - out.get(y, 31 - c) as i32).abs() <= 1);
            }
        }
        assert!(out.data().iter().all(|&v| v <= 128));
        assert!(out.get(8, 15) < out.get(8, 2));
    }

    #[test]
    fn names_parse() {
        for b in BaselineKind::ALL {
            assert_eq!(b.name().parse::<BaselineKind>().unwrap(), b);
        }
    }
}
