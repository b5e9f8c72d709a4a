//! End-to-end runs: predicted prompts with adaptive elimination, and the
//! uniform-grid baselines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::eliminator::{
    elimination_threshold, eliminate, per_mask_elimination_map, EliminationAccumulator,
    EliminationMap, EliminatorConfig, MaskRecord, Threshold,
};
use crate::error::{Error, Result};
use crate::eval::BitMask;
use crate::predictor::{forward, PredictorConfig, PredictorWeights, PromptConfidenceMap};
use crate::provider::{MaskProvider, MaskQuery};
use crate::sampler::{sample, PointPrompt, PromptPool, PromptStatus, SamplerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Aop,
    AmgS,
    AmgD,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Aop, Method::AmgS, Method::AmgD];

    /// Grid side for the baselines.
    pub fn grid(self) -> Option<usize> {
        match self {
            Method::Aop => None,
            Method::AmgS => Some(16),
            Method::AmgD => Some(32),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Aop => "aop",
            Method::AmgS => "amg_s",
            Method::AmgD => "amg_d",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected aop, amg_s or amg_d)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub sampler: SamplerConfig,
    pub eliminator: EliminatorConfig,
    pub batch_size: usize,
    pub iou_conf_min: f32,
    pub stability_min: f32,
    pub dedup_iou: f64,
    pub method: Method,
    pub multimask: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sampler: SamplerConfig::default(),
            eliminator: EliminatorConfig::default(),
            batch_size: 16,
            iou_conf_min: 0.8,
            stability_min: 0.85,
            dedup_iou: 0.9,
            method: Method::Aop,
            multimask: true,
        }
    }
}

impl PipelineConfig {
    /// Defaults with the sampler scaled to a `pcm_size`-cell confidence map.
    pub fn for_grid(pcm_size: usize) -> Self {
        PipelineConfig {
            sampler: SamplerConfig::for_grid(pcm_size),
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.eliminator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("iou_conf_min", self.iou_conf_min as f64),
            ("stability_min", self.stability_min as f64),
            ("dedup_iou", self.dedup_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Accepted masks after deduplication, highest confidence first.
    pub masks: Vec<MaskRecord>,
    /// Prompts sent to the decoder (#P).
    pub prompts_used: usize,
    pub decoder_calls: usize,
    pub eliminated: usize,
    pub initial_pool: usize,
    /// Masks that passed the quality filter, before deduplication.
    pub accepted: usize,
    /// Seconds spent producing the prompt pool.
    pub prompt_latency: f64,
    /// Seconds spent in the batched decode loop.
    pub mask_latency: f64,
    pub peak_bytes: usize,
    pub pool: PromptPool,
}

impl RunResult {
    /// Eliminated prompts as a percentage of the initial pool.
    pub fn elimination_ratio(&self) -> f64 {
        if self.initial_pool == 0 {
            0.0
        } else {
            self.eliminated as f64 / self.initial_pool as f64 * 100.0
        }
    }
}

/// Hooks into the decode loop, for logging and debugging.
pub trait RunObserver {
    fn on_query(&mut self, _prompt: &PointPrompt) {}

    fn on_batch(&mut self, _iteration: usize, _emap: &EliminationMap, _threshold: &Threshold, _eliminated: usize) {}
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

/// Predictor configuration matching a provider's embedding and image.
pub fn predictor_config_for(provider: &dyn MaskProvider) -> Result<PredictorConfig> {
    let (gh, gw) = provider.features().grid();
    let (h, w) = provider.image_size();
    if gh != gw || h != w {
        return Err(Error::Config(format!(
            "predictor needs square inputs, got image {h}x{w} and embedding {gh}x{gw}"
        )));
    }
    let cfg = PredictorConfig::for_embedding(provider.features().channels(), gh);
    if cfg.image_size != h {
        return Err(Error::Config(format!(
            "image size {h} must be four times the embedding size {gh}"
        )));
    }
    Ok(cfg)
}

/// Runs the predictor on the provider's image and embedding.
pub fn predict(provider: &dyn MaskProvider, weights: &PredictorWeights) -> Result<PromptConfidenceMap> {
    let pcfg = predictor_config_for(provider)?;
    let image = provider
        .image()
        .ok_or_else(|| Error::Config("scene has no image; the predictor needs one".into()))?;
    let embedding = provider.features().to_chw()?;
    forward(weights, &pcfg, image, &embedding)
}

pub fn run_aop(
    provider: &dyn MaskProvider,
    weights: &PredictorWeights,
    cfg: &PipelineConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    alloc::reset_peak();
    let start = Instant::now();
    let pcm = predict(provider, weights)?;
    let pool = sample(&pcm, &cfg.sampler)?;
    drop(pcm);
    let prompt_latency = start.elapsed().as_secs_f64();
    decode_loop(provider, pool, cfg, true, prompt_latency, observer)
}

/// Adaptive decode loop over a caller-supplied pool, with elimination.
pub fn run_pool(
    provider: &dyn MaskProvider,
    pool: PromptPool,
    cfg: &PipelineConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    alloc::reset_peak();
    decode_loop(provider, pool, cfg, true, 0.0, observer)
}

/// Prompts at the centres of an `n × n` grid, row-major.
pub fn grid_prompts(image_size: (usize, usize), n: usize) -> Vec<PointPrompt> {
    let (h, w) = image_size;
    let mut prompts = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let y = (((2 * r + 1) * h) / (2 * n)).min(h - 1);
            let x = (((2 * c + 1) * w) / (2 * n)).min(w - 1);
            prompts.push(PointPrompt::new(r * n + c, x, y, 1.0));
        }
    }
    prompts
}

pub fn run_amg(
    provider: &dyn MaskProvider,
    grid_n: usize,
    cfg: &PipelineConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    if grid_n == 0 {
        return Err(Error::Config("grid size must be at least 1".into()));
    }
    alloc::reset_peak();
    let start = Instant::now();
    let pool = PromptPool::new(grid_prompts(provider.image_size(), grid_n))?;
    let prompt_latency = start.elapsed().as_secs_f64();
    decode_loop(provider, pool, cfg, false, prompt_latency, observer)
}

/// Dispatches on `cfg.method`.
pub fn run(
    provider: &dyn MaskProvider,
    weights: Option<&PredictorWeights>,
    cfg: &PipelineConfig,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    match cfg.method.grid() {
        Some(n) => run_amg(provider, n, cfg, observer),
        None => {
            let w = weights.ok_or_else(|| Error::Config("method aop needs predictor weights".into()))?;
            run_aop(provider, w, cfg, observer)
        }
    }
}

fn select_candidate(candidates: Vec<MaskRecord>) -> Option<MaskRecord> {
    let mut best: Option<MaskRecord> = None;
    for c in candidates {
        if best.as_ref().is_none_or(|b| c.iou_confidence > b.iou_confidence) {
            best = Some(c);
        }
    }
    best
}

fn decode_loop(
    provider: &dyn MaskProvider,
    mut pool: PromptPool,
    cfg: &PipelineConfig,
    eliminate_prompts: bool,
    prompt_latency: f64,
    observer: &mut dyn RunObserver,
) -> Result<RunResult> {
    let start = Instant::now();
    let initial_pool = pool.len();
    let features = provider.features();
    let image_size = provider.image_size();
    let mut acc = EliminationAccumulator::new();
    let mut history: Vec<(MaskRecord, PointPrompt)> = Vec::new();
    let mut kept: Vec<MaskRecord> = Vec::new();
    let mut decoder_calls = 0usize;
    let mut eliminated = 0usize;
    let mut iteration = 0usize;

    loop {
        let batch = pool.next_pending(cfg.batch_size);
        if batch.is_empty() {
            break;
        }
        let mut batch_refs: Vec<(MaskRecord, PointPrompt)> = Vec::new();
        for idx in batch {
            let prompt = pool.get(idx).clone();
            debug_assert_eq!(prompt.status, PromptStatus::Pending);
            observer.on_query(&prompt);
            let proposal = provider
                .decode(&MaskQuery {
                    prompt: prompt.clone(),
                    multimask: cfg.multimask,
                })
                .map_err(|e| {
                    Error::Provider(format!(
                        "prompt {} at ({}, {}) failed after {decoder_calls} decoder calls and {} accepted masks: {e}",
                        prompt.id,
                        prompt.x,
                        prompt.y,
                        kept.len() + batch_refs.len()
                    ))
                })?;
            decoder_calls += 1;
            pool.transition(idx, PromptStatus::Processed)?;
            let Some(mut best) = select_candidate(proposal.candidates) else {
                continue;
            };
            if best.iou_confidence >= cfg.iou_conf_min && best.stability >= cfg.stability_min && best.area() > 0 {
                best.accepted = true;
                batch_refs.push((best, prompt));
            }
        }

        if eliminate_prompts && !batch_refs.is_empty() {
            for (rec, _) in &batch_refs {
                acc.push(&per_mask_elimination_map(features, &rec.mask)?)?;
            }
            if acc.len() >= cfg.eliminator.min_reference_masks.max(1) {
                let emap = acc.snapshot(image_size)?;
                let refs: Vec<(&MaskRecord, &PointPrompt)> = if cfg.eliminator.cumulative_threshold {
                    history.iter().chain(&batch_refs).map(|(r, p)| (r, p)).collect()
                } else {
                    batch_refs.iter().map(|(r, p)| (r, p)).collect()
                };
                let threshold = elimination_threshold(&refs, &emap, &cfg.eliminator)?;
                let n = eliminate(&mut pool, &emap, threshold.effective);
                eliminated += n;
                observer.on_batch(iteration, &emap, &threshold, n);
            }
        }
        if cfg.eliminator.cumulative_threshold {
            history.extend(batch_refs.iter().map(|(r, p)| (lite(r), p.clone())));
        }
        kept.extend(batch_refs.into_iter().map(|(r, _)| r));
        iteration += 1;
    }

    let accepted = kept.len();
    let masks = dedup(kept, cfg.dedup_iou);
    let mask_latency = start.elapsed().as_secs_f64();
    debug_assert_eq!(pool.pending_count(), 0);
    debug_assert_eq!(pool.processed_count() + pool.eliminated_count(), initial_pool);
    Ok(RunResult {
        masks,
        prompts_used: pool.processed_count(),
        decoder_calls,
        eliminated,
        initial_pool,
        accepted,
        prompt_latency,
        mask_latency,
        peak_bytes: alloc::stats().peak_bytes,
        pool,
    })
}

/// Score-only copy kept for the cumulative threshold.
fn lite(r: &MaskRecord) -> MaskRecord {
    MaskRecord {
        mask: Tensor::zeros(&[0]),
        iou_confidence: r.iou_confidence,
        stability: r.stability,
        prompt_id: r.prompt_id,
        accepted: r.accepted,
    }
}

/// Greedy mask NMS: highest `iou_confidence` first (stable), dropping any
/// mask whose IoU with an already kept mask exceeds `max_iou`.
pub fn dedup(mut masks: Vec<MaskRecord>, max_iou: f64) -> Vec<MaskRecord> {
    masks.sort_by(|a, b| b.iou_confidence.total_cmp(&a.iou_confidence));
    let mut kept: Vec<(MaskRecord, BitMask)> = Vec::new();
    for m in masks {
        let bits = BitMask::from_tensor(&m.mask);
        if kept.iter().all(|(_, k)| k.iou(&bits) <= max_iou) {
            kept.push((m, bits));
        }
    }
    kept.into_iter().map(|(m, _)| m).collect()
}
