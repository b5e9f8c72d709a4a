//! Deterministic synthetic scenes: disjoint and nested regions (rectangles,
//! ellipses, star-shaped blobs) with flat colours, texture noise, orthonormal
//! region features and one interior prompt per region.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{save_ppm, save_tensor};
use crate::predictor::{build_gt_map, GroundTruthMap, GtMapParams, TrainingSample};
use crate::provider::{
    base_scores, synth_embedding, AdapterIndex, IndexEntry, Region, SyntheticScene,
};
use crate::eliminator::FeatureMap;
use crate::seed;
use crate::tensor::Tensor;

const MAX_REJECTIONS: usize = 1000;
/// Clear band around every region, in pixels.
const MARGIN: isize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeWeights {
    pub rect: f64,
    pub ellipse: f64,
    pub blob: f64,
}

impl Default for ShapeWeights {
    fn default() -> Self {
        ShapeWeights {
            rect: 1.0,
            ellipse: 1.0,
            blob: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    /// Inclusive `[min, max]` number of regions, nested ones included.
    pub region_count: [usize; 2],
    pub shapes: ShapeWeights,
    /// Probability that a region is placed inside an existing top-level one.
    pub nesting: f64,
    /// Minimum exclusive region area as a fraction of the image.
    pub min_area: f64,
    pub embed_channels: usize,
    /// Side of the square embedding grid.
    pub embed_size: usize,
    pub embed_noise: f32,
    pub texture_noise: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_size: [128, 128],
            region_count: [5, 20],
            shapes: ShapeWeights::default(),
            nesting: 0.2,
            min_area: 0.002,
            embed_channels: 32,
            embed_size: 32,
            embed_noise: 0.1,
            texture_noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.image_size;
        let [lo, hi] = self.region_count;
        if h < 8 || w < 8 {
            return bad(format!("image size {h}x{w} too small"));
        }
        if lo > hi {
            return bad(format!("empty region_count range [{lo}, {hi}]"));
        }
        if hi + 1 > self.embed_channels {
            return bad(format!(
                "{} channels cannot hold {} orthogonal region features plus background",
                self.embed_channels, hi
            ));
        }
        if hi > u16::MAX as usize {
            return bad(format!("region_count {hi} too large"));
        }
        if !(0.0..=1.0).contains(&self.nesting) {
            return bad(format!("nesting probability {} outside [0, 1]", self.nesting));
        }
        if !(self.min_area > 0.0 && self.min_area < 1.0) {
            return bad(format!("min_area {} outside (0, 1)", self.min_area));
        }
        let s = self.shapes;
        if [s.rect, s.ellipse, s.blob].iter().any(|&v| !(v >= 0.0)) || s.rect + s.ellipse + s.blob <= 0.0 {
            return bad("shape weights must be non-negative with a positive sum".into());
        }
        if self.embed_size == 0 || self.embed_size > h.min(w) {
            return bad(format!("embed_size {} must lie in [1, {}]", self.embed_size, h.min(w)));
        }
        if !(self.embed_noise >= 0.0) || !(self.texture_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// Spec for scene `index` of a suite rooted at this seed.
    pub fn nth(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: seed::derive(self.seed, &[index as u64]),
            ..*self
        }
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Rect,
    Ellipse,
    Blob,
}

struct Placement {
    pixels: Vec<usize>,
}

fn pick_shape(rng: &mut ChaCha8Rng, w: &ShapeWeights) -> Shape {
    let total = w.rect + w.ellipse + w.blob;
    let u = rng.random::<f64>() * total;
    if u < w.rect {
        Shape::Rect
    } else if u < w.rect + w.ellipse {
        Shape::Ellipse
    } else {
        Shape::Blob
    }
}

/// Pixels of `shape` inscribed in the box at `(y0, x0)` of size `bh × bw`.
fn rasterize(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    (y0, x0, bh, bw): (usize, usize, usize, usize),
    img_w: usize,
) -> Vec<usize> {
    let (cy, cx) = (bh as f64 / 2.0, bw as f64 / 2.0);
    let harmonics: Vec<(f64, f64)> = match shape {
        Shape::Blob => (2..=4)
            .map(|_| (rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect(),
        _ => Vec::new(),
    };
    let bound: f64 = 1.0 + harmonics.iter().map(|h| h.0).sum::<f64>();
    let mut pixels = Vec::new();
    for dy in 0..bh {
        for dx in 0..bw {
            let u = (dx as f64 + 0.5 - cx) / cx;
            let v = (dy as f64 + 0.5 - cy) / cy;
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => u * u + v * v <= 1.0,
                Shape::Blob => {
                    let theta = v.atan2(u);
                    let r: f64 = 1.0
                        + harmonics
                            .iter()
                            .enumerate()
                            .map(|(k, &(a, phase))| a * ((k as f64 + 2.0) * theta + phase).cos())
                            .sum::<f64>();
                    (u * u + v * v).sqrt() <= r / bound
                }
            };
            if inside {
                pixels.push((y0 + dy) * img_w + x0 + dx);
            }
        }
    }
    pixels
}

/// True when every pixel within Chebyshev distance [`MARGIN`] of the
/// candidate is inside the image and currently owned by `target`.
fn clear_around(pixels: &[usize], owner: &[Option<u16>], (h, w): (usize, usize), target: Option<u16>) -> bool {
    pixels.iter().all(|&p| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        (-MARGIN..=MARGIN).all(|dy| {
            (-MARGIN..=MARGIN).all(|dx| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && owner[yy as usize * w + xx as usize] == target
            })
        })
    })
}

fn try_place(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    owner: &[Option<u16>],
    parents: &[Option<usize>],
    boxes: &[(usize, usize, usize, usize)],
    n_regions: usize,
    min_px: usize,
) -> Option<(Placement, Option<usize>, (usize, usize, usize, usize))> {
    let (h, w) = spec.image_hw();
    let top_level: Vec<usize> = (0..parents.len()).filter(|&i| parents[i].is_none()).collect();
    let nest = !top_level.is_empty() && rng.random_bool(spec.nesting);
    let shape = pick_shape(rng, &spec.shapes);
    let smin = (min_px as f64).sqrt().ceil() as usize + 1;

    let (parent, bbox) = if nest {
        let p = top_level[rng.random_range(0..top_level.len())];
        let (py, px, ph, pw) = boxes[p];
        let bh = ((ph as f64 * rng.random_range(0.3..0.6)).round() as usize).max(smin);
        let bw = ((pw as f64 * rng.random_range(0.3..0.6)).round() as usize).max(smin);
        if bh + 2 >= ph || bw + 2 >= pw {
            return None;
        }
        let y0 = py + rng.random_range(0..=ph - bh);
        let x0 = px + rng.random_range(0..=pw - bw);
        (Some(p), (y0, x0, bh, bw))
    } else {
        let smax = ((0.5 * (h * w) as f64 / n_regions.max(1) as f64).sqrt() * 1.3) as usize;
        let smax = smax.clamp(smin, h.min(w) - 2 * MARGIN as usize);
        let bh = rng.random_range(smin..=smax);
        let bw = rng.random_range(smin..=smax);
        let m = MARGIN as usize;
        let y0 = rng.random_range(m..=h - m - bh);
        let x0 = rng.random_range(m..=w - m - bw);
        (None, (y0, x0, bh, bw))
    };

    let pixels = rasterize(rng, shape, bbox, w);
    if pixels.len() < min_px {
        return None;
    }
    let target = parent.map(|p| p as u16);
    if !clear_around(&pixels, owner, (h, w), target) {
        return None;
    }
    if let Some(p) = parent {
        let exclusive = owner.iter().filter(|&&o| o == Some(p as u16)).count();
        if exclusive - pixels.len() < min_px {
            return None;
        }
    }
    Some((Placement { pixels }, parent, bbox))
}

/// Squared Euclidean distance from each pixel to the nearest pixel outside
/// `inside`, with everything beyond the image counted as outside.
pub fn distance_transform_sq(inside: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let inf = ((ph * ph + pw * pw) as f64) * 4.0;
    let mut grid = vec![0.0f64; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if inside[y * w + x] {
                grid[(y + 1) * pw + x + 1] = inf;
            }
        }
    }
    let mut col = vec![0.0; ph];
    let mut out = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        edt_1d(&col, &mut out);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    let mut row = vec![0.0; pw];
    let mut out = vec![0.0; pw];
    let mut result = vec![0.0; h * w];
    for y in 1..=h {
        row.copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&row, &mut out);
        result[(y - 1) * w..y * w].copy_from_slice(&out[1..=w]);
    }
    result
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Interior point farthest from the boundary of `inside`; ties go to the
/// pixel nearest the centroid, then to the smallest `(y, x)`.
pub fn pole_of_inaccessibility(inside: &[bool], h: usize, w: usize) -> Option<(usize, usize)> {
    let n = inside.iter().filter(|&&b| b).count();
    if n == 0 {
        return None;
    }
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for (i, _) in inside.iter().enumerate().filter(|(_, &b)| b) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
    }
    let (cy, cx) = (sy / n as f64, sx / n as f64);
    let dt = distance_transform_sq(inside, h, w);
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, &d) in dt.iter().enumerate() {
        if !inside[i] {
            continue;
        }
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let c = (y - cy).powi(2) + (x - cx).powi(2);
        let better = match best {
            None => true,
            Some((bd, bc, _)) => d > bd || (d == bd && c < bc),
        };
        if better {
            best = Some((d, c, i));
        }
    }
    best.map(|(_, _, i)| (i % w, i / w))
}

/// Orthonormal vectors via Gram-Schmidt on Gaussian draws.
fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|a| a as f32).collect())
        .collect()
}

fn random_colour(rng: &mut ChaCha8Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    let mut best = [0.5; 3];
    let mut best_gap = -1.0f32;
    for _ in 0..100 {
        let c = [
            rng.random_range(0.1f32..0.9),
            rng.random_range(0.1f32..0.9),
            rng.random_range(0.1f32..0.9),
        ];
        let gap = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).abs()).fold(0.0f32, f32::max))
            .fold(f32::INFINITY, f32::min);
        if gap >= 0.25 {
            return c;
        }
        if gap > best_gap {
            best = c;
            best_gap = gap;
        }
    }
    best
}

pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (h, w) = spec.image_hw();
    let mut rng = seed::rng(spec.seed, &[0x5ce0e]);
    let count = rng.random_range(spec.region_count[0]..=spec.region_count[1]);
    let min_px = ((spec.min_area * (h * w) as f64).ceil() as usize).max(1);

    let mut owner: Vec<Option<u16>> = vec![None; h * w];
    let mut parents: Vec<Option<usize>> = Vec::with_capacity(count);
    let mut boxes = Vec::with_capacity(count);
    for i in 0..count {
        let mut rejections = 0;
        let (placement, parent, bbox) = loop {
            if let Some(found) = try_place(&mut rng, spec, &owner, &parents, &boxes, count, min_px) {
                break found;
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Generation(format!(
                    "could not place region {} of {count} after {MAX_REJECTIONS} attempts (seed {})",
                    i + 1,
                    spec.seed
                )));
            }
        };
        for &p in &placement.pixels {
            owner[p] = Some(i as u16);
        }
        parents.push(parent);
        boxes.push(bbox);
    }

    let features = orthonormal_set(&mut rng, count + 1, spec.embed_channels);
    let background = features[count].clone();

    let bg_colour = random_colour(&mut rng, &[]);
    let mut colours: Vec<[f32; 3]> = Vec::with_capacity(count);
    for i in 0..count {
        let mut avoid = vec![bg_colour];
        if let Some(p) = parents[i] {
            avoid.push(colours[p]);
        }
        colours.push(random_colour(&mut rng, &avoid));
    }
    let noise = Normal::new(0.0f32, spec.texture_noise.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let plane = h * w;
    let mut pixels = vec![0.0f32; 3 * plane];
    for (p, o) in owner.iter().enumerate() {
        let base = o.map_or(bg_colour, |k| colours[k as usize]);
        for c in 0..3 {
            let n = if spec.texture_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels[c * plane + p] = ((base[c] + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let image = Tensor::from_vec(&[3, h, w], pixels)?;

    let mut regions = Vec::with_capacity(count);
    let mut gt_prompts = Vec::with_capacity(count);
    for (i, feature) in features.into_iter().take(count).enumerate() {
        let exclusive: Vec<bool> = owner.iter().map(|&o| o == Some(i as u16)).collect();
        let pole = pole_of_inaccessibility(&exclusive, h, w)
            .ok_or_else(|| Error::Generation(format!("region {i} lost its exclusive area")))?;
        gt_prompts.push(pole);
        let mask = Tensor::from_fn(&[h, w], |p| {
            let mut cur = owner[p].map(usize::from);
            while let Some(r) = cur {
                if r == i {
                    return 1.0;
                }
                cur = parents[r];
            }
            0.0
        });
        regions.push(Region {
            mask,
            feature,
            parent: parents[i],
        });
    }

    Ok(SyntheticScene {
        seed: spec.seed,
        image,
        regions,
        gt_prompts,
        background,
        embed_size: spec.embed_size,
        owner,
    })
}

/// Scenes `0..count` of the suite rooted at `spec.seed`.
pub fn generate_suite(spec: &SceneSpec, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count).into_par_iter().map(|i| generate(&spec.nth(i))).collect()
}

pub fn training_sample(scene: &SyntheticScene, embed_noise: f32) -> Result<TrainingSample> {
    let features = synth_embedding(scene, embed_noise, scene.seed)?;
    let target: GroundTruthMap = build_gt_map(
        &scene.gt_prompts,
        scene.image_size(),
        scene.embed_size,
        GtMapParams::for_grid(scene.embed_size),
    )?;
    Ok(TrainingSample {
        image: scene.image.clone(),
        embedding: features.to_chw()?,
        target,
    })
}

pub fn make_training_set(spec: &SceneSpec, count: usize) -> Result<Vec<TrainingSample>> {
    if count == 0 {
        return Err(Error::Config("training set needs at least one scene".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| training_sample(&generate(&spec.nth(i))?, spec.embed_noise))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPrompt {
    pub region: usize,
    pub x: usize,
    pub y: usize,
}

/// Writes a scene in the directory adapter layout plus `image.ppm` and
/// `gt_prompts.json`. Stored mask scores are the noise-free innermost values.
pub fn write_scene_dir(scene: &SyntheticScene, features: &FeatureMap, dir: &Path) -> Result<()> {
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    save_ppm(&dir.join("image.ppm"), &scene.image)?;
    save_tensor(&dir.join("embedding.aopt"), &features.to_chw()?)?;
    let (iou, stability) = base_scores(0);
    let mut entries = Vec::with_capacity(scene.regions.len());
    for (i, region) in scene.regions.iter().enumerate() {
        let file = format!("masks/{i:03}.aopt");
        save_tensor(&dir.join(&file), &region.mask)?;
        entries.push(IndexEntry {
            file,
            iou,
            stability,
        });
    }
    let (h, w) = scene.image_size();
    let index = AdapterIndex {
        masks: entries,
        image_size: [h, w],
    };
    write_json(&dir.join("index.json"), &index)?;
    let prompts: Vec<GtPrompt> = scene
        .gt_prompts
        .iter()
        .enumerate()
        .map(|(region, &(x, y))| GtPrompt { region, x, y })
        .collect();
    write_json(&dir.join("gt_prompts.json"), &prompts)
}

/// Scene directories under `dir`: `dir` itself when it holds an
/// `index.json`, otherwise its immediate subdirectories that do, by name.
pub fn scene_dirs(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>> {
    let name_of = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    if dir.join("index.json").is_file() {
        return Ok(vec![(name_of(dir), dir.to_path_buf())]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join("index.json").is_file() {
            found.push((name_of(&path), path));
        }
    }
    if found.is_empty() {
        return Err(Error::format(format!("{}: no scene directories found", dir.display())));
    }
    found.sort();
    Ok(found)
}

/// Training pair from a scene directory: image, embedding and a target map
/// built from `gt_prompts.json`.
pub fn load_training_sample(dir: &Path) -> Result<TrainingSample> {
    let image = crate::format::load_image(&dir.join("image.ppm"))?;
    let embedding = crate::format::load_tensor(&dir.join("embedding.aopt"))?;
    let prompts_path = dir.join("gt_prompts.json");
    let text = std::fs::read_to_string(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?;
    let prompts: Vec<GtPrompt> = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", prompts_path.display())))?;
    if embedding.ndim() != 3 {
        return Err(Error::format(format!("{}: embedding must be [c, h, w]", dir.display())));
    }
    let points: Vec<(usize, usize)> = prompts.iter().map(|p| (p.x, p.y)).collect();
    let target = build_gt_map(&points, image.hw(), embedding.shape()[1], GtMapParams::for_grid(embedding.shape()[1]))?;
    Ok(TrainingSample {
        image,
        embedding,
        target,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
