//! Single-parameter sweeps over the pipeline configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compare, BitMask, Matching, RunMetrics, SceneRun};
use crate::pipeline::{run, NoObserver, PipelineConfig};
use crate::predictor::PredictorWeights;
use crate::provider::MaskProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    SmoothingSigma,
    IntensityThreshold,
    Spacing,
    ThresholdFactor,
}

impl AblationParam {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationParam::SmoothingSigma => "smoothing_sigma",
            AblationParam::IntensityThreshold => "intensity_threshold",
            AblationParam::Spacing => "spacing",
            AblationParam::ThresholdFactor => "threshold_factor",
        }
    }

    /// `base` with this parameter set to `value`, validated.
    pub fn apply(self, base: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut cfg = *base;
        match self {
            AblationParam::SmoothingSigma => cfg.sampler.smoothing_sigma = value as f32,
            AblationParam::IntensityThreshold => cfg.sampler.intensity_threshold = value as f32,
            AblationParam::Spacing => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::Config(format!("spacing must be a positive integer, got {value}")));
                }
                cfg.sampler.spacing = value as usize;
            }
            AblationParam::ThresholdFactor => cfg.eliminator.threshold_factor = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationParam::SmoothingSigma,
            AblationParam::IntensityThreshold,
            AblationParam::Spacing,
            AblationParam::ThresholdFactor,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown ablation parameter {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub parameter: AblationParam,
    pub values: Vec<f64>,
    #[serde(default)]
    pub base: PipelineConfig,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        for &v in &self.values {
            self.parameter.apply(&self.base, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub miou: f64,
    pub num_prompts_mean: f64,
    pub decoder_calls_mean: f64,
    pub mask_latency_mean: f64,
    pub elimination_ratio: f64,
    pub peak_bytes_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub parameter: AblationParam,
    pub rows: Vec<AblationRow>,
    /// Set when a run failed; `rows` then holds only the completed values.
    pub aborted: Option<String>,
}

/// A scene to sweep over: name, provider and ground-truth masks.
pub struct AblationScene<'a> {
    pub name: String,
    pub provider: &'a dyn MaskProvider,
    pub ground_truth: Vec<BitMask>,
}

pub fn ablate(
    spec: &AblationSpec,
    scenes: &[AblationScene<'_>],
    weights: Option<&PredictorWeights>,
    matching: Matching,
    timing: bool,
) -> Result<AblationTable> {
    spec.validate()?;
    let gt: BTreeMap<String, Vec<BitMask>> = scenes
        .iter()
        .map(|s| (s.name.clone(), s.ground_truth.clone()))
        .collect();
    let mut table = AblationTable {
        parameter: spec.parameter,
        rows: Vec::with_capacity(spec.values.len()),
        aborted: None,
    };
    for &value in &spec.values {
        let cfg = spec.parameter.apply(&spec.base, value)?;
        let row = sweep_row(&cfg, value, scenes, weights, &gt, matching, timing);
        match row {
            Ok(r) => table.rows.push(r),
            Err(e) => {
                table.aborted = Some(format!("{}={value}: {e}", spec.parameter.as_str()));
                break;
            }
        }
    }
    Ok(table)
}

fn sweep_row(
    cfg: &PipelineConfig,
    value: f64,
    scenes: &[AblationScene<'_>],
    weights: Option<&PredictorWeights>,
    gt: &BTreeMap<String, Vec<BitMask>>,
    matching: Matching,
    timing: bool,
) -> Result<AblationRow> {
    let mut runs = Vec::with_capacity(scenes.len());
    for s in scenes {
        let r = run(s.provider, weights, cfg, &mut NoObserver)?;
        runs.push(SceneRun {
            scene: s.name.clone(),
            method: cfg.method,
            metrics: RunMetrics::from_result(&r, timing),
            masks: r.masks.iter().map(|m| BitMask::from_tensor(&m.mask)).collect(),
        });
    }
    let report = compare(&runs, gt, matching)?
        .pop()
        .ok_or_else(|| Error::Config("ablation needs at least one scene".into()))?;
    Ok(AblationRow {
        value,
        miou: report.miou,
        num_prompts_mean: report.num_prompts_mean,
        decoder_calls_mean: report.decoder_calls_mean,
        mask_latency_mean: report.mask_latency.mean,
        elimination_ratio: report.elimination_ratio,
        peak_bytes_max: report.peak_bytes_max,
    })
}

pub fn render_ablation(table: &AblationTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>20}  {:>6}  {:>7}  {:>7}  {:>11}  {:>7}  {:>12}",
        table.parameter.as_str(),
        "mIoU",
        "#P",
        "Calls",
        "Mask_Lat(s)",
        "Elim(%)",
        "Peak_Mem(MB)"
    );
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{:>20}  {:>6.1}  {:>7.1}  {:>7.1}  {:>11.4}  {:>7.1}  {:>12.2}",
            r.value,
            r.miou * 100.0,
            r.num_prompts_mean,
            r.decoder_calls_mean,
            r.mask_latency_mean,
            r.elimination_ratio,
            r.peak_bytes_max as f64 / (1024.0 * 1024.0)
        );
    }
    if let Some(msg) = &table.aborted {
        let _ = writeln!(out, "aborted: {msg}");
    }
    out
}
