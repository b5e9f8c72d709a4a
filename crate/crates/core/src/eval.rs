//! Greedy-IoU evaluation and per-method reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{load_tensor, save_tensor};
use crate::pipeline::{Method, RunResult};
use crate::scenegen::write_json;
use crate::tensor::Tensor;

/// Packed binary mask (`> 0.5` is foreground) with area and bounding box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    shape: (usize, usize),
    words: Vec<u64>,
    area: usize,
    /// `(y0, x0, y1, x1)` inclusive, `None` when empty.
    bbox: Option<(usize, usize, usize, usize)>,
}

impl BitMask {
    pub fn from_tensor(mask: &Tensor) -> Self {
        let (h, w) = if mask.ndim() == 2 { mask.hw() } else { (1, mask.numel()) };
        let mut words = vec![0u64; (h * w).div_ceil(64)];
        let mut area = 0;
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, &v) in mask.data().iter().enumerate() {
            if v > 0.5 {
                words[i / 64] |= 1 << (i % 64);
                area += 1;
                let (y, x) = (i / w, i % w);
                bbox = Some(match bbox {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        BitMask {
            shape: (h, w),
            words,
            area,
            bbox,
        }
    }

    pub fn area(&self) -> usize {
        self.area
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn boxes_overlap(&self, other: &BitMask) -> bool {
        match (self.bbox, other.bbox) {
            (Some(a), Some(b)) => a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3,
            _ => false,
        }
    }

    pub fn intersection(&self, other: &BitMask) -> usize {
        if !self.boxes_overlap(other) {
            return 0;
        }
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// `|a ∧ b| / |a ∨ b|`; two empty masks score 1.
    pub fn iou(&self, other: &BitMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// IoU of two binary masks of equal shape. Two empty masks are identical and
/// score 1.0; an empty mask against a non-empty one scores 0.0.
pub fn mask_iou(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "mask_iou: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(BitMask::from_tensor(a).iou(&BitMask::from_tensor(b)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Matching {
    /// Each prediction and each ground-truth mask is used at most once.
    #[default]
    #[serde(rename = "one2one")]
    OneToOne,
    /// Every ground-truth mask takes its best prediction.
    #[serde(rename = "reuse")]
    Reuse,
}

impl FromStr for Matching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one2one" => Ok(Matching::OneToOne),
            "reuse" => Ok(Matching::Reuse),
            other => Err(Error::Config(format!("unknown matching {other:?} (expected one2one or reuse)"))),
        }
    }
}

/// Mean IoU over ground-truth masks after greedy matching. Pairs are taken by
/// descending IoU with ties broken by ground-truth index, then prediction
/// content (packed bits), then prediction index, so the score does not depend
/// on the order of `predicted`. Unmatched ground truth contributes 0.
pub fn greedy_miou(predicted: &[Tensor], ground_truth: &[Tensor], matching: Matching) -> Result<f64> {
    if let Some(t) = predicted.iter().chain(ground_truth).find(|t| t.ndim() != 2) {
        return Err(Error::dim(format!("masks must be 2-d, got {:?}", t.shape())));
    }
    let pred: Vec<BitMask> = predicted.iter().map(BitMask::from_tensor).collect();
    let gt: Vec<BitMask> = ground_truth.iter().map(BitMask::from_tensor).collect();
    greedy_miou_bits(&pred, &gt, matching)
}

pub fn greedy_miou_bits(pred: &[BitMask], gt: &[BitMask], matching: Matching) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("mIoU needs at least one ground-truth mask".into()));
    }
    if let Some(m) = pred.iter().chain(gt).find(|m| m.shape() != gt[0].shape()) {
        return Err(Error::dim(format!(
            "mask shape {:?} differs from ground truth {:?}",
            m.shape(),
            gt[0].shape()
        )));
    }
    let mut per_gt = vec![0.0f64; gt.len()];
    match matching {
        Matching::Reuse => {
            for (g, best) in gt.iter().zip(per_gt.iter_mut()) {
                *best = pred.iter().map(|p| p.iou(g)).fold(0.0, f64::max);
            }
        }
        Matching::OneToOne => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (gi, g) in gt.iter().enumerate() {
                for (pi, p) in pred.iter().enumerate() {
                    let iou = p.iou(g);
                    if iou > 0.0 {
                        pairs.push((iou, gi, pi));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then_with(|| pred[a.2].words.cmp(&pred[b.2].words))
                    .then(a.2.cmp(&b.2))
            });
            let mut gt_used = vec![false; gt.len()];
            let mut pred_used = vec![false; pred.len()];
            for (iou, gi, pi) in pairs {
                if !gt_used[gi] && !pred_used[pi] {
                    gt_used[gi] = true;
                    pred_used[pi] = true;
                    per_gt[gi] = iou;
                }
            }
        }
    }
    Ok(per_gt.iter().sum::<f64>() / gt.len() as f64)
}

/// Metrics block of a run result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub num_prompts: usize,
    pub decoder_calls: usize,
    pub eliminated: usize,
    /// Percent of the initial pool.
    pub elimination_ratio: f64,
    pub initial_pool: usize,
    pub prompt_latency_s: f64,
    pub mask_latency_s: f64,
    pub peak_bytes: usize,
}

impl RunMetrics {
    pub fn from_result(r: &RunResult, timing: bool) -> Self {
        RunMetrics {
            num_prompts: r.prompts_used,
            decoder_calls: r.decoder_calls,
            eliminated: r.eliminated,
            elimination_ratio: r.elimination_ratio(),
            initial_pool: r.initial_pool,
            prompt_latency_s: if timing { r.prompt_latency } else { 0.0 },
            mask_latency_s: if timing { r.mask_latency } else { 0.0 },
            peak_bytes: r.peak_bytes,
        }
    }
}

/// Mask entry of a run result file; `file` is relative to the result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub file: String,
    pub iou: f32,
    pub stability: f32,
    pub prompt_id: usize,
}

/// Contents of a `run` result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub scene: String,
    pub method: Method,
    pub masks: Vec<MaskEntry>,
    pub metrics: RunMetrics,
}

/// Directory holding a result file's masks: `<stem>_masks` next to it.
pub fn masks_dir_for(result_path: &Path) -> PathBuf {
    let stem = result_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "result".into());
    result_path.with_file_name(format!("{stem}_masks"))
}

/// Writes `result_path` and its masks. Latencies are zeroed unless `timing`.
pub fn write_result(
    result_path: &Path,
    scene: &str,
    method: Method,
    result: &RunResult,
    timing: bool,
) -> Result<ResultFile> {
    let masks_dir = masks_dir_for(result_path);
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let dir_name = masks_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut masks = Vec::with_capacity(result.masks.len());
    for (i, m) in result.masks.iter().enumerate() {
        let file = format!("{dir_name}/{i:03}.aopt");
        save_tensor(&masks_dir.join(format!("{i:03}.aopt")), &m.mask)?;
        masks.push(MaskEntry {
            file,
            iou: m.iou_confidence,
            stability: m.stability,
            prompt_id: m.prompt_id,
        });
    }
    let file = ResultFile {
        scene: scene.to_string(),
        method,
        masks,
        metrics: RunMetrics::from_result(result, timing),
    };
    write_json(result_path, &file)?;
    Ok(file)
}

/// Reads a result file and its masks.
pub fn load_result(result_path: &Path) -> Result<SceneRun> {
    let text = std::fs::read_to_string(result_path).map_err(|e| Error::io(result_path, e))?;
    let file: ResultFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", result_path.display())))?;
    let base = result_path.parent().unwrap_or(Path::new("."));
    let masks = file
        .masks
        .iter()
        .map(|m| load_tensor(&base.join(&m.file)).map(|t| BitMask::from_tensor(&t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRun {
        scene: file.scene,
        method: file.method,
        metrics: file.metrics,
        masks,
    })
}

/// One method's output on one scene.
#[derive(Debug, Clone)]
pub struct SceneRun {
    pub scene: String,
    pub method: Method,
    pub metrics: RunMetrics,
    pub masks: Vec<BitMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats {
                mean: 0.0,
                p50: 0.0,
                p95: 0.0,
            };
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencyStats {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: rank(0.5),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub scenes: Vec<String>,
    pub miou: f64,
    pub per_scene_miou: Vec<f64>,
    pub num_prompts_mean: f64,
    pub decoder_calls_mean: f64,
    /// Total eliminated over total initial pool, in percent.
    pub elimination_ratio: f64,
    pub prompt_latency: LatencyStats,
    pub mask_latency: LatencyStats,
    pub peak_bytes_max: usize,
}

/// Aggregates runs per method. Every method must cover the same scenes, and
/// each scene must have ground truth.
pub fn compare(
    runs: &[SceneRun],
    ground_truth: &BTreeMap<String, Vec<BitMask>>,
    matching: Matching,
) -> Result<Vec<EvalReport>> {
    let mut by_method: BTreeMap<Method, Vec<&SceneRun>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method).or_default().push(r);
    }
    let mut reference: Option<BTreeSet<&str>> = None;
    let mut reports = Vec::with_capacity(by_method.len());
    for (method, mut list) in by_method {
        list.sort_by(|a, b| a.scene.cmp(&b.scene));
        let scenes: BTreeSet<&str> = list.iter().map(|r| r.scene.as_str()).collect();
        if scenes.len() != list.len() {
            return Err(Error::Config(format!("method {method} has duplicate scene runs")));
        }
        match &reference {
            None => reference = Some(scenes.clone()),
            Some(prev) if *prev != scenes => {
                return Err(Error::Config(format!(
                    "method {method} covers a different scene set than the others"
                )));
            }
            _ => {}
        }
        let mut per_scene = Vec::with_capacity(list.len());
        for r in &list {
            let gt = ground_truth
                .get(&r.scene)
                .ok_or_else(|| Error::Config(format!("no ground truth for scene {:?}", r.scene)))?;
            per_scene.push(greedy_miou_bits(&r.masks, gt, matching)?);
        }
        let n = list.len() as f64;
        let eliminated: usize = list.iter().map(|r| r.metrics.eliminated).sum();
        let pool: usize = list.iter().map(|r| r.metrics.initial_pool).sum();
        let lat = |f: fn(&RunMetrics) -> f64| LatencyStats::from_samples(&list.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        reports.push(EvalReport {
            method,
            scenes: list.iter().map(|r| r.scene.clone()).collect(),
            miou: per_scene.iter().sum::<f64>() / n,
            per_scene_miou: per_scene,
            num_prompts_mean: list.iter().map(|r| r.metrics.num_prompts as f64).sum::<f64>() / n,
            decoder_calls_mean: list.iter().map(|r| r.metrics.decoder_calls as f64).sum::<f64>() / n,
            elimination_ratio: if pool == 0 { 0.0 } else { eliminated as f64 / pool as f64 * 100.0 },
            prompt_latency: lat(|m| m.prompt_latency_s),
            mask_latency: lat(|m| m.mask_latency_s),
            peak_bytes_max: list.iter().map(|r| r.metrics.peak_bytes).max().unwrap_or(0),
        });
    }
    Ok(reports)
}

/// Plain-text table: method, mIoU, prompt latency, peak memory, #P, then
/// mask latency, decoder calls and elimination ratio.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Method", "mIoU", "Inf_Lat(s)", "Peak_Mem(MB)", "#P", "Mask_Lat(s)", "Calls", "Elim(%)"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.method.to_string(),
                format!("{:.1}", r.miou * 100.0),
                format!("{:.4}", r.prompt_latency.mean),
                format!("{:.2}", r.peak_bytes_max as f64 / (1024.0 * 1024.0)),
                format!("{:.1}", r.num_prompts_mean),
                format!("{:.4}", r.mask_latency.mean),
                format!("{:.1}", r.decoder_calls_mean),
                format!("{:.1}", r.elimination_ratio),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{:<w$}", cell, w = widths[c]);
            } else {
                let _ = write!(out, "  {:>w$}", cell, w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(&header, &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&rule.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    for r in &rows {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}
