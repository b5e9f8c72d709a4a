//! Adaptive filtering of the prompt pool.
//!
//! Each accepted mask yields a map of cosine similarities between every
//! feature pixel and the mask's pooled feature vector. The maps are averaged,
//! upsampled to image resolution, and pending prompts whose score exceeds an
//! IoU-weighted threshold are dropped as likely duplicates.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{PointPrompt, PromptPool, PromptStatus};
use crate::tensor::{
    bilinear_resize, l2_normalize_pixels, l2_normalize_vec, masked_avg_pool, sample_bilinear,
    Tensor,
};

/// Image-encoder features laid out `[h, w, c]`, with the pixel-normalized
/// copy cached.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    values: Tensor,
    normalized: Tensor,
    image_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(values: Tensor, image_size: (usize, usize)) -> Result<Self> {
        values.expect_ndim(3, "feature map")?;
        if !values.all_finite() {
            return Err(Error::dim("feature map contains non-finite values"));
        }
        let normalized = l2_normalize_pixels(&values)?;
        Ok(FeatureMap {
            values,
            normalized,
            image_size,
        })
    }

    /// Builds from a `[c, h, w]` embedding.
    pub fn from_chw(embedding: &Tensor, image_size: (usize, usize)) -> Result<Self> {
        Self::new(crate::tensor::chw_to_hwc(embedding)?, image_size)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// `[c, h, w]` copy for the predictor.
    pub fn to_chw(&self) -> Result<Tensor> {
        crate::tensor::hwc_to_chw(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    /// Binary `[H, W]` mask (values 0.0 / 1.0).
    pub mask: Tensor,
    pub iou_confidence: f32,
    pub stability: f32,
    pub prompt_id: usize,
    pub accepted: bool,
}

impl MaskRecord {
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EliminatorConfig {
    /// Multiplier applied to the IoU-weighted mean score.
    pub threshold_factor: f64,
    pub min_reference_masks: usize,
    /// Average the threshold over every processed prompt so far instead of
    /// only the current batch.
    pub cumulative_threshold: bool,
}

impl Default for EliminatorConfig {
    fn default() -> Self {
        EliminatorConfig {
            threshold_factor: 1.3,
            min_reference_masks: 1,
            cumulative_threshold: false,
        }
    }
}

impl EliminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_factor > 0.0) {
            return Err(Error::Config(format!(
                "threshold_factor must be positive, got {}",
                self.threshold_factor
            )));
        }
        Ok(())
    }
}

/// Nearest-neighbour downsample of an `[H, W]` mask to the `h × w` grid. If
/// nothing survives, the cell under the mask centroid is set.
pub fn downsample_mask(mask: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    mask.expect_ndim(2, "downsample_mask")?;
    let (big_h, big_w) = mask.hw();
    let (h, w) = grid;
    let mut any = false;
    let down = Tensor::from_fn(&[h, w], |i| {
        let (r, c) = (i / w, i % w);
        let sy = (((2 * r + 1) * big_h) / (2 * h)).min(big_h - 1);
        let sx = (((2 * c + 1) * big_w) / (2 * w)).min(big_w - 1);
        if mask.at2(sy, sx) > 0.5 {
            any = true;
            1.0
        } else {
            0.0
        }
    });
    if any {
        return Ok(down);
    }
    let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0usize);
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 0.5 {
            sy += (i / big_w) as f64 + 0.5;
            sx += (i % big_w) as f64 + 0.5;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let r = ((sy / n as f64) * h as f64 / big_h as f64).floor() as usize;
    let c = ((sx / n as f64) * w as f64 / big_w as f64).floor() as usize;
    let mut down = down;
    down.data_mut()[r.min(h - 1) * w + c.min(w - 1)] = 1.0;
    Ok(down)
}

/// Cosine similarity of every feature pixel with the mask's pooled feature.
pub fn per_mask_elimination_map(features: &FeatureMap, mask: &Tensor) -> Result<Tensor> {
    if mask.hw() != features.image_size() || mask.ndim() != 2 {
        return Err(Error::dim(format!(
            "reference mask shape {:?} does not match image size {:?}",
            mask.shape(),
            features.image_size()
        )));
    }
    let (h, w) = features.grid();
    let c = features.channels();
    let down = downsample_mask(mask, (h, w))?;
    let pooled = l2_normalize_vec(&masked_avg_pool(features.values(), &down)?);
    let g = pooled.data();
    let f = features.normalized().data();
    Ok(Tensor::from_fn(&[h, w], |p| {
        f[p * c..(p + 1) * c].iter().zip(g).map(|(a, b)| a * b).sum()
    }))
}

/// Mean of per-mask elimination maps, with the image-resolution upsample
/// computed on first use.
#[derive(Debug, Clone)]
pub struct EliminationMap {
    pub values: Tensor,
    pub n_masks: usize,
    image_size: (usize, usize),
    upsampled: OnceCell<Tensor>,
}

impl EliminationMap {
    pub fn new(values: Tensor, n_masks: usize, image_size: (usize, usize)) -> Self {
        EliminationMap {
            values,
            n_masks,
            image_size,
            upsampled: OnceCell::new(),
        }
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn upsampled(&self) -> &Tensor {
        self.upsampled.get_or_init(|| {
            let (big_h, big_w) = self.image_size;
            bilinear_resize(&self.values, big_h, big_w).expect("2-d map and positive size")
        })
    }

    /// Elimination score at an image pixel.
    pub fn score_at(&self, x: usize, y: usize) -> f32 {
        sample_bilinear(self.upsampled(), x as f32, y as f32)
    }
}

pub fn aggregate(maps: &[Tensor], image_size: (usize, usize)) -> Result<EliminationMap> {
    let mut acc = EliminationAccumulator::new();
    for m in maps {
        acc.push(m)?;
    }
    acc.snapshot(image_size)
}

/// Running sum of per-mask maps across batches.
#[derive(Debug, Default)]
pub struct EliminationAccumulator {
    sum: Option<Vec<f64>>,
    shape: (usize, usize),
    count: usize,
}

impl EliminationAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn push(&mut self, map: &Tensor) -> Result<()> {
        map.expect_ndim(2, "elimination map")?;
        match &mut self.sum {
            None => {
                self.shape = map.hw();
                self.sum = Some(map.data().iter().map(|&v| v as f64).collect());
            }
            Some(sum) => {
                if map.hw() != self.shape {
                    return Err(Error::dim("elimination maps differ in shape"));
                }
                sum.iter_mut().zip(map.data()).for_each(|(s, &v)| *s += v as f64);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn snapshot(&self, image_size: (usize, usize)) -> Result<EliminationMap> {
        let sum = self.sum.as_ref().ok_or(Error::NoReferenceMasks)?;
        let n = self.count as f64;
        let values = Tensor::from_vec(
            &[self.shape.0, self.shape.1],
            sum.iter().map(|&s| (s / n) as f32).collect(),
        )?;
        Ok(EliminationMap::new(values, self.count, image_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// IoU-weighted mean elimination score of the reference prompts.
    pub t_elim: f64,
    /// `threshold_factor × t_elim`.
    pub effective: f64,
}

/// IoU-weighted mean of the elimination scores at the prompts that produced
/// `references`, scaled by the configured factor.
pub fn elimination_threshold(
    references: &[(&MaskRecord, &PointPrompt)],
    emap: &EliminationMap,
    cfg: &EliminatorConfig,
) -> Result<Threshold> {
    if references.is_empty() {
        return Err(Error::NoReferenceMasks);
    }
    let (big_h, big_w) = emap.image_size();
    let mut total = 0.0f64;
    for (rec, prompt) in references {
        if prompt.x >= big_w || prompt.y >= big_h {
            return Err(Error::Config(format!(
                "prompt {} at ({}, {}) outside image",
                prompt.id, prompt.x, prompt.y
            )));
        }
        total += rec.iou_confidence as f64 * emap.score_at(prompt.x, prompt.y) as f64;
    }
    let t_elim = total / references.len() as f64;
    let effective = if t_elim == 0.0 {
        0.0
    } else {
        cfg.threshold_factor * t_elim
    };
    Ok(Threshold { t_elim, effective })
}

/// Marks every pending prompt scoring above `threshold` as eliminated and
/// returns how many were.
pub fn eliminate(pool: &mut PromptPool, emap: &EliminationMap, threshold: f64) -> usize {
    let doomed: Vec<usize> = pool
        .pending_indices()
        .filter(|&i| {
            let p = pool.get(i);
            emap.score_at(p.x, p.y) as f64 > threshold
        })
        .collect();
    for &i in &doomed {
        pool.transition(i, PromptStatus::Eliminated)
            .expect("only pending prompts are selected");
    }
    doomed.len()
}
