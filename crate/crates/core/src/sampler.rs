//! Adaptive sampling: confidence map → ordered pool of point prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PromptConfidenceMap;
use crate::tensor::{gaussian_filter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Gaussian σ in confidence-map cells.
    pub smoothing_sigma: f32,
    pub intensity_threshold: f32,
    /// Minimum Chebyshev distance between peaks, in confidence-map cells.
    pub spacing: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            smoothing_sigma: 2.0,
            intensity_threshold: 0.2,
            spacing: 2,
        }
    }
}

impl SamplerConfig {
    /// Defaults with `smoothing_sigma` and `spacing` rescaled from the
    /// 64-cell reference grid to `pcm_size` cells.
    pub fn for_grid(pcm_size: usize) -> Self {
        let s = pcm_size as f32 / crate::predictor::REFERENCE_GRID as f32;
        let d = SamplerConfig::default();
        SamplerConfig {
            smoothing_sigma: d.smoothing_sigma * s,
            spacing: ((d.spacing as f32 * s).round() as usize).max(1),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing_sigma must be a finite non-negative number, got {}",
                self.smoothing_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity_threshold) {
            return Err(Error::Config(format!(
                "intensity_threshold must lie in [0, 1], got {}",
                self.intensity_threshold
            )));
        }
        if self.spacing == 0 {
            return Err(Error::Config("spacing must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStatus {
    Pending,
    Processed,
    Eliminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub id: usize,
    pub x: usize,
    pub y: usize,
    pub score: f32,
    pub status: PromptStatus,
}

impl PointPrompt {
    pub fn new(id: usize, x: usize, y: usize, score: f32) -> Self {
        PointPrompt {
            id,
            x,
            y,
            score,
            status: PromptStatus::Pending,
        }
    }
}

/// Prompts ordered by score (descending), with per-status counters.
#[derive(Debug, Clone, Default)]
pub struct PromptPool {
    prompts: Vec<PointPrompt>,
    pending: usize,
    processed: usize,
    eliminated: usize,
}

impl PromptPool {
    /// Builds a pool, sorting by score descending (ties by id). Ids must be
    /// unique and every prompt pending.
    pub fn new(mut prompts: Vec<PointPrompt>) -> Result<Self> {
        prompts.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        let mut ids: Vec<usize> = prompts.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("prompt ids must be unique".into()));
        }
        if let Some(p) = prompts.iter().find(|p| p.status != PromptStatus::Pending) {
            return Err(Error::Config(format!("prompt {} is not pending", p.id)));
        }
        let pending = prompts.len();
        Ok(PromptPool {
            prompts,
            pending,
            processed: 0,
            eliminated: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompts(&self) -> &[PointPrompt] {
        &self.prompts
    }

    pub fn get(&self, index: usize) -> &PointPrompt {
        &self.prompts[index]
    }

    pub fn pending_count(&self) -> usize {
        self.pending
    }

    pub fn processed_count(&self) -> usize {
        self.processed
    }

    pub fn eliminated_count(&self) -> usize {
        self.eliminated
    }

    /// Positions (in pool order) of up to `n` pending prompts with the highest scores.
    pub fn next_pending(&self, n: usize) -> Vec<usize> {
        self.prompts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.status == PromptStatus::Pending)
            .take(n)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn pending_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.prompts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.status == PromptStatus::Pending)
            .map(|(i, _)| i)
    }

    /// Moves a pending prompt to `to`. Any other transition is an error.
    pub fn transition(&mut self, index: usize, to: PromptStatus) -> Result<()> {
        let p = &mut self.prompts[index];
        if p.status != PromptStatus::Pending || to == PromptStatus::Pending {
            return Err(Error::InvalidTransition {
                id: p.id,
                from: p.status,
                to,
            });
        }
        p.status = to;
        self.pending -= 1;
        match to {
            PromptStatus::Processed => self.processed += 1,
            PromptStatus::Eliminated => self.eliminated += 1,
            PromptStatus::Pending => unreachable!(),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

/// Thresholded local maxima with a minimum Chebyshev spacing.
///
/// A cell is a candidate when it is ≥ every cell of its
/// `(2·min_dist+1)²` window and ≥ `threshold`. Candidates are visited by
/// value descending, ties by `(row, col)`, and kept only when at least
/// `min_dist` away from every peak already kept.
pub fn find_peaks(map: &Tensor, min_dist: usize, threshold: f32) -> Result<Vec<Peak>> {
    map.expect_ndim(2, "find_peaks")?;
    let min_dist = min_dist.max(1);
    let (h, w) = map.hw();
    let d = map.data();
    let mut candidates = Vec::new();
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(min_dist), (r + min_dist).min(h - 1));
        for c in 0..w {
            let v = d[r * w + c];
            if !(v >= threshold) {
                continue;
            }
            let (c0, c1) = (c.saturating_sub(min_dist), (c + min_dist).min(w - 1));
            let is_max = (r0..=r1).all(|rr| d[rr * w + c0..=rr * w + c1].iter().all(|&n| n <= v));
            if is_max {
                candidates.push(Peak { row: r, col: c, value: v });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    let mut kept: Vec<Peak> = Vec::new();
    for cand in candidates {
        let far = kept.iter().all(|k| {
            let dr = k.row.abs_diff(cand.row);
            let dc = k.col.abs_diff(cand.col);
            dr.max(dc) >= min_dist
        });
        if far {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Maps a confidence-map cell to the nearest image pixel to the cell's center.
pub fn cell_to_pixel(cell: usize, map_len: usize, image_len: usize) -> usize {
    let center = (cell as f64 + 0.5) * image_len as f64 / map_len as f64;
    let px = (center - 0.5).round().max(0.0) as usize;
    px.min(image_len - 1)
}

/// Maps an image pixel to the confidence-map cell containing its center; the
/// inverse of [`cell_to_pixel`] whenever `image_len >= map_len`.
pub fn pixel_to_cell(px: usize, image_len: usize, map_len: usize) -> usize {
    (((2 * px + 1) * map_len) / (2 * image_len)).min(map_len - 1)
}

pub fn sample(pcm: &PromptConfidenceMap, cfg: &SamplerConfig) -> Result<PromptPool> {
    cfg.validate()?;
    let smoothed = gaussian_filter(&pcm.values, cfg.smoothing_sigma)?;
    let peaks = find_peaks(&smoothed, cfg.spacing, cfg.intensity_threshold)?;
    let (map_h, map_w) = smoothed.hw();
    let (img_h, img_w) = pcm.source_image_size;
    let prompts = peaks
        .iter()
        .enumerate()
        .map(|(id, p)| {
            PointPrompt::new(
                id,
                cell_to_pixel(p.col, map_w, img_w),
                cell_to_pixel(p.row, map_h, img_h),
                p.value.clamp(0.0, 1.0),
            )
        })
        .collect();
    PromptPool::new(prompts)
}
