//! Synthetic RGB-D scenes with a depth-ambiguous class pair, plus on-disk
//! storage and training-time augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, GpError, Result};
use crate::image::{DepthMap, LabelMap, RgbImage, IGNORE_INDEX};

pub const CLASS_NAMES: [&str; 5] = ["wall", "floor", "box_a", "box_b", "sphere"];
pub const WALL: u8 = 0;
pub const FLOOR: u8 = 1;
pub const BOX_A: u8 = 2;
pub const BOX_B: u8 = 3;
pub const SPHERE: u8 = 4;

/// Scene generator parameters. Box A and box B draw from the same color
/// distribution and differ only in depth range, placement and size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub size: usize,
    pub wall_color: [u8; 3],
    pub floor_color: [u8; 3],
    /// Shared by box A and box B.
    pub box_color: [u8; 3],
    pub sphere_color: [u8; 3],
    /// Per-object color jitter (uniform, per channel).
    pub color_jitter: f32,
    /// Per-pixel noise amplitude.
    pub pixel_noise: f32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Horizon row range as fractions of the image height.
    pub horizon: [f32; 2],
    pub wall_depth: [u8; 2],
    /// Floor depth at the bottom row.
    pub floor_near: u8,
    pub box_a_depth: [u8; 2],
    pub box_b_depth: [u8; 2],
    pub sphere_depth: [u8; 2],
    /// Object extent in pixels is `size_scale / depth * size`, jittered.
    pub size_scale: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            wall_color: [178, 168, 150],
            floor_color: [120, 96, 72],
            box_color: [70, 110, 170],
            sphere_color: [190, 70, 60],
            color_jitter: 18.0,
            pixel_noise: 10.0,
            min_objects: 2,
            max_objects: 4,
            horizon: [0.28, 0.41],
            wall_depth: [232, 248],
            floor_near: 20,
            box_a_depth: [40, 100],
            box_b_depth: [160, 220],
            sphere_depth: [70, 200],
            size_scale: 16.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GpError::Config(format!("scene: {m}")));
        if self.size < 16 || self.size % 16 != 0 {
            return bad("size must be a positive multiple of 16");
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return bad("need 2 <= min_objects <= max_objects");
        }
        if !(0.0 <= self.horizon[0] && self.horizon[0] <= self.horizon[1] && self.horizon[1] <= 0.8) {
            return bad("horizon range must leave floor rows");
        }
        for (n, r) in [("wall_depth", self.wall_depth), ("box_a_depth", self.box_a_depth), ("box_b_depth", self.box_b_depth), ("sphere_depth", self.sphere_depth)] {
            if r[0] > r[1] || r[0] == 0 {
                return bad(&format!("{n} must be a nonempty range above 0"));
            }
        }
        let (a, b) = (self.box_a_depth, self.box_b_depth);
        if !(a[1] < b[0] || b[1] < a[0]) {
            return bad("box_a_depth and box_b_depth must be disjoint");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub label: LabelMap,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Hex sha256 over every sample's raw planes, train then test.
    pub content_hash: String,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
}

struct Object {
    class: u8,
    shape: Shape,
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    depth: f32,
    color: [f32; 3],
}

fn jitter_color<R: Rng>(base: [u8; 3], j: f32, rng: &mut R) -> [f32; 3] {
    let d: f32 = rng.random_range(-j..=j);
    base.map(|c| c as f32 + d + rng.random_range(-j / 3.0..=j / 3.0))
}

/// Row whose floor depth equals `depth`.
fn floor_row(depth: f32, horizon: f32, size: f32, far: f32, near: f32) -> f32 {
    let t = ((far - depth) / (far - near)).clamp(0.0, 1.0);
    horizon + t * (size - 1.0 - horizon)
}

/// Render one scene.
pub fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.size;
    let nf = n as f32;
    let horizon = (rng.random_range(spec.horizon[0]..=spec.horizon[1]) * nf).round();
    let wall_d = rng.random_range(spec.wall_depth[0]..=spec.wall_depth[1]) as f32;
    let far = wall_d - 8.0;
    let near = spec.floor_near as f32;
    let wall_c = jitter_color(spec.wall_color, spec.color_jitter, rng);
    let floor_c = jitter_color(spec.floor_color, spec.color_jitter, rng);

    let mut depth = vec![0f32; n * n];
    let mut label = vec![0u8; n * n];
    let mut color = vec![[0f32; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let yf = y as f32;
            if yf < horizon {
                depth[i] = wall_d;
                label[i] = WALL;
                color[i] = wall_c;
            } else {
                let t = (yf - horizon) / (nf - 1.0 - horizon);
                depth[i] = far + t * (near - far);
                label[i] = FLOOR;
                // Darken toward the horizon.
                let shade = 0.8 + 0.2 * t;
                color[i] = floor_c.map(|c| c * shade);
            }
        }
    }

    let (bg_depth, bg_label, bg_color) = (depth, label, color);
    // Retry placement a few times if an object hides a whole box.
    let mut attempt = 0;
    loop {
        let (d, l, c) = place_objects(spec, rng, horizon, far, near, bg_depth.clone(), bg_label.clone(), bg_color.clone());
        attempt += 1;
        if attempt == 8 || (l.contains(&BOX_A) && l.contains(&BOX_B)) {
            return finish(spec, rng, d, l, c);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn place_objects(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    horizon: f32,
    far: f32,
    near: f32,
    mut depth: Vec<f32>,
    mut label: Vec<u8>,
    mut color: Vec<[f32; 3]>,
) -> (Vec<f32>, Vec<u8>, Vec<[f32; 3]>) {
    let n = spec.size;
    let nf = n as f32;
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut classes = vec![BOX_A, BOX_B];
    for _ in 2..count {
        classes.push([BOX_A, BOX_B, SPHERE][rng.random_range(0..3)]);
    }
    let mut objects: Vec<Object> = classes
        .into_iter()
        .map(|class| {
            let range = match class {
                BOX_A => spec.box_a_depth,
                BOX_B => spec.box_b_depth,
                _ => spec.sphere_depth,
            };
            let d = rng.random_range(range[0] as f32..=range[1] as f32);
            let extent = spec.size_scale / d * nf * rng.random_range(0.8..1.25);
            let rx = (extent * rng.random_range(0.7..1.3)).clamp(nf / 25.0, nf / 5.0);
            let ry = (extent * rng.random_range(0.7..1.3)).clamp(nf / 25.0, nf / 5.0);
            let bottom = floor_row(d, horizon, nf, far, near) + rng.random_range(-0.05..0.05) * nf;
            let cy = (bottom - ry).clamp(ry.min(horizon), nf - 1.0 - ry * 0.5);
            let cx = rng.random_range(rx * 0.5..nf - rx * 0.5);
            let (shape, base) = match class {
                SPHERE => (Shape::Ellipse, spec.sphere_color),
                _ => (Shape::Rect, spec.box_color),
            };
            Object { class, shape, cx, cy, rx, ry, depth: d, color: jitter_color(base, spec.color_jitter, rng) }
        })
        .collect();
    // Painter's order: far objects first.
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for o in &objects {
        let y0 = (o.cy - o.ry).floor().max(0.0) as usize;
        let y1 = ((o.cy + o.ry).ceil() as usize).min(n - 1);
        let x0 = (o.cx - o.rx).floor().max(0.0) as usize;
        let x1 = ((o.cx + o.rx).ceil() as usize).min(n - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f32 + 0.5 - o.cx) / o.rx;
                let dy = (y as f32 + 0.5 - o.cy) / o.ry;
                let i = y * n + x;
                match o.shape {
                    Shape::Rect => {
                        if dx.abs() > 1.0 || dy.abs() > 1.0 {
                            continue;
                        }
                        depth[i] = o.depth;
                        // Lit top face.
                        let shade = if dy < -0.6 { 1.15 } else { 1.0 - 0.1 * dx };
                        color[i] = o.color.map(|c| c * shade);
                    }
                    Shape::Ellipse => {
                        let r2 = dx * dx + dy * dy;
                        if r2 > 1.0 {
                            continue;
                        }
                        let bulge = (1.0 - r2).sqrt();
                        depth[i] = o.depth - 12.0 * bulge;
                        let shade = 0.7 + 0.4 * bulge;
                        color[i] = o.color.map(|c| c * shade);
                    }
                }
                label[i] = o.class;
            }
        }
    }

    (depth, label, color)
}

fn finish(spec: &SceneSpec, rng: &mut ChaCha8Rng, depth: Vec<f32>, label: Vec<u8>, color: Vec<[f32; 3]>) -> Sample {
    let n = spec.size;
    let mut rgb = Vec::with_capacity(3 * n * n);
    for c in &color {
        for ch in c {
            let v = ch + rng.random_range(-spec.pixel_noise..=spec.pixel_noise);
            rgb.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Sample {
        rgb: RgbImage::new(n, n, rgb).expect("sized"),
        depth: DepthMap::from_f32(n, n, &depth).expect("sized"),
        label: LabelMap::new(n, n, label).expect("sized"),
    }
}

fn sample_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(split << 40 | index);
    r
}

/// Generate a dataset in memory. Every sample draws from its own keyed
/// stream, so the result does not depend on generation order.
pub fn generate(spec: &SceneSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let make = |split: u64, count: usize| (0..count).map(|i| render_scene(spec, &mut sample_rng(seed, split, i as u64))).collect::<Vec<_>>();
    let train = make(0, n_train);
    let test = make(1, n_test);
    let content_hash = content_hash(&train, &test);
    Ok(Dataset { train, test, content_hash })
}

pub fn content_hash(train: &[Sample], test: &[Sample]) -> String {
    let mut h = Sha256::new();
    for (tag, split) in [(b"train", train), (b"test\0", test)] {
        h.update(tag);
        h.update((split.len() as u64).to_le_bytes());
        for s in split {
            h.update((s.rgb.width() as u32).to_le_bytes());
            h.update((s.rgb.height() as u32).to_le_bytes());
            h.update(s.rgb.data());
            h.update(s.depth.data());
            h.update(s.label.data());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub spec: SceneSpec,
    pub content_hash: String,
}

const MANIFEST: &str = "manifest.json";

fn sample_paths(root: &Path, split: &str, i: usize) -> [PathBuf; 3] {
    let dir = root.join(split);
    ["rgb", "depth", "label"].map(|k| dir.join(format!("{i:05}_{k}.png")))
}

/// Write `rgb`, `depth` and `label` PNGs per sample plus a manifest.
pub fn save(ds: &Dataset, root: &Path, spec: &SceneSpec, seed: u64) -> Result<()> {
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, s) in samples.iter().enumerate() {
            let [r, d, l] = sample_paths(root, split, i);
            s.rgb.save_png(&r)?;
            s.depth.save_png(&d)?;
            s.label.save_png(&l)?;
        }
    }
    let m = DatasetManifest {
        format_version: 1,
        seed,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        spec: spec.clone(),
        content_hash: ds.content_hash.clone(),
    };
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(io_err(&path))
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(GpError::MissingPrerequisite(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load a dataset written by [`save`] and verify its content hash.
pub fn load(root: &Path) -> Result<(Dataset, DatasetManifest)> {
    let m = load_manifest(root)?;
    let read = |split: &str, n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|i| {
                let [r, d, l] = sample_paths(root, split, i);
                let s = Sample { rgb: RgbImage::load_png(&r)?, depth: DepthMap::load_png(&d)?, label: LabelMap::load_png(&l)? };
                let (w, h) = (s.rgb.width(), s.rgb.height());
                if (s.depth.width(), s.depth.height()) != (w, h) || (s.label.width(), s.label.height()) != (w, h) {
                    return Err(GpError::Dataset(format!("{split}/{i:05}: planes differ in size")));
                }
                Ok(s)
            })
            .collect()
    };
    let train = read("train", m.n_train)?;
    let test = read("test", m.n_test)?;
    let hash = content_hash(&train, &test);
    if hash != m.content_hash {
        return Err(GpError::Dataset(format!("content hash mismatch: manifest {}, files {hash}", m.content_hash)));
    }
    Ok((Dataset { train, test, content_hash: hash }, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_min: f32,
    pub scale_max: f32,
    pub crop: usize,
    /// Horizontal flip probability.
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_min: 0.75, scale_max: 1.5, crop: 64, flip_prob: 0.5 }
    }
}

fn bilinear_plane(src: &[u8], c: usize, w: usize, h: usize, nw: usize, nh: usize) -> Vec<u8> {
    let mut out = vec![0u8; nw * nh * c];
    let (sx, sy) = (w as f32 / nw as f32, h as f32 / nh as f32);
    for y in 0..nh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..nw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f32;
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * nw + x) * c + ch] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn nearest_plane(src: &[u8], w: usize, h: usize, nw: usize, nh: usize) -> Vec<u8> {
    let mut out = vec![0u8; nw * nh];
    for y in 0..nh {
        let sy = (((y as f32 + 0.5) * h as f32 / nh as f32) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f32 + 0.5) * w as f32 / nw as f32) as usize).min(w - 1);
            out[y * nw + x] = src[sy * w + sx];
        }
    }
    out
}

/// Crop `crop × crop` at offset `(ox, oy)` of a `w × h` plane, where the
/// offset may be negative; out-of-range pixels take `fill`.
fn crop_plane(src: &[u8], c: usize, w: usize, h: usize, ox: isize, oy: isize, crop: usize, fill: u8, flip: bool) -> Vec<u8> {
    let mut out = vec![fill; crop * crop * c];
    for y in 0..crop {
        let sy = y as isize + oy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..crop {
            let xx = if flip { crop - 1 - x } else { x };
            let sx = xx as isize + ox;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let s = (sy as usize * w + sx as usize) * c;
            out[(y * crop + x) * c..(y * crop + x + 1) * c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Random resize by a factor in `[scale_min, scale_max]`, random crop (or
/// pad) to `crop`, and optional horizontal flip. RGB and depth resample
/// bilinearly, labels by nearest neighbour; padding is 0 for RGB and depth
/// and the ignore index for labels.
pub fn augment<R: Rng + ?Sized>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let (w, h) = (s.rgb.width(), s.rgb.height());
    let f = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let nw = ((w as f32 * f).round() as usize).max(1);
    let nh = ((h as f32 * f).round() as usize).max(1);
    let rgb = bilinear_plane(s.rgb.data(), 3, w, h, nw, nh);
    let depth = bilinear_plane(s.depth.data(), 1, w, h, nw, nh);
    let label = nearest_plane(s.label.data(), w, h, nw, nh);
    let offset = |n: usize, rng: &mut R| -> isize {
        if n >= cfg.crop {
            rng.random_range(0..=n - cfg.crop) as isize
        } else {
            -(rng.random_range(0..=cfg.crop - n) as isize)
        }
    };
    let ox = offset(nw, rng);
    let oy = offset(nh, rng);
    let flip = rng.random_bool(cfg.flip_prob);
    let c = cfg.crop;
    Sample {
        rgb: RgbImage::new(c, c, crop_plane(&rgb, 3, nw, nh, ox, oy, c, 0, flip)).expect("sized"),
        depth: DepthMap::new(c, c, crop_plane(&depth, 1, nw, nh, ox, oy, c, 0, flip)).expect("sized"),
        label: LabelMap::new(c, c, crop_plane(&label, 1, nw, nh, ox, oy, c, IGNORE_INDEX, flip)).expect("sized"),
    }
}
