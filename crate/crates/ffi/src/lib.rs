//! C ABI over `aop-core`: load scenes and predictor weights, run a method,
//! read back masks and metrics, and score them.
//!
//! Every fallible call returns an [`AopStatus`]. On failure the message is
//! kept per thread and read with [`aop_last_error`]. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use aop_core::eval::{greedy_miou_bits, mask_iou, BitMask, Matching};
use aop_core::pipeline::{run, Method, NoObserver, PipelineConfig, RunResult};
use aop_core::predictor::{load_weights, PredictorWeights};
use aop_core::provider::{FileAdapter, MaskProvider};
use aop_core::tensor::Tensor;
use aop_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AopStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Format = 3,
    Io = 4,
    Dimension = 5,
    OutOfRange = 6,
    Runtime = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AopMethod {
    Aop = 0,
    AmgS = 1,
    AmgD = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AopMatching {
    OneToOne = 0,
    Reuse = 1,
}

/// Pipeline settings. Fill with [`aop_config_default`] and then adjust.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AopConfig {
    pub method: AopMethod,
    pub smoothing_sigma: f32,
    pub intensity_threshold: f32,
    pub spacing: usize,
    pub threshold_factor: f64,
    pub min_reference_masks: usize,
    pub cumulative_threshold: bool,
    pub batch_size: usize,
    pub iou_conf_min: f32,
    pub stability_min: f32,
    pub dedup_iou: f64,
    pub multimask: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AopMetrics {
    pub num_prompts: usize,
    pub decoder_calls: usize,
    pub eliminated: usize,
    pub initial_pool: usize,
    pub num_masks: usize,
    /// Percent of the initial pool.
    pub elimination_ratio: f64,
    pub prompt_latency_s: f64,
    pub mask_latency_s: f64,
    pub peak_bytes: usize,
}

/// Predictor weights.
pub struct AopWeights(PredictorWeights);

/// A scene directory in the adapter layout.
pub struct AopScene(FileAdapter);

/// Masks and metrics of one run.
pub struct AopResult {
    result: RunResult,
    shape: (usize, usize),
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AopStatus {
    match e {
        Error::Config(_) => AopStatus::Config,
        Error::Format(_) | Error::Json(_) => AopStatus::Format,
        Error::Io { .. } => AopStatus::Io,
        Error::Dimension(_) => AopStatus::Dimension,
        _ => AopStatus::Runtime,
    }
}

fn fail(status: AopStatus, msg: impl Into<String>) -> AopStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), AopStatus>) -> AopStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AopStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(AopStatus::Panic, msg)
        }
    }
}

fn check<T>(r: aop_core::Result<T>) -> Result<T, AopStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, AopStatus> {
    if p.is_null() {
        return Err(fail(AopStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(AopStatus::Config, "path is not valid UTF-8"))
}

unsafe fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, AopStatus> {
    p.as_ref()
        .ok_or_else(|| fail(AopStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, AopStatus> {
    p.as_mut()
        .ok_or_else(|| fail(AopStatus::NullArgument, format!("{what} is null")))
}

impl From<AopMethod> for Method {
    fn from(m: AopMethod) -> Self {
        match m {
            AopMethod::Aop => Method::Aop,
            AopMethod::AmgS => Method::AmgS,
            AopMethod::AmgD => Method::AmgD,
        }
    }
}

impl From<AopMatching> for Matching {
    fn from(m: AopMatching) -> Self {
        match m {
            AopMatching::OneToOne => Matching::OneToOne,
            AopMatching::Reuse => Matching::Reuse,
        }
    }
}

impl From<&AopConfig> for PipelineConfig {
    fn from(c: &AopConfig) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.method = c.method.into();
        cfg.sampler.smoothing_sigma = c.smoothing_sigma;
        cfg.sampler.intensity_threshold = c.intensity_threshold;
        cfg.sampler.spacing = c.spacing;
        cfg.eliminator.threshold_factor = c.threshold_factor;
        cfg.eliminator.min_reference_masks = c.min_reference_masks;
        cfg.eliminator.cumulative_threshold = c.cumulative_threshold;
        cfg.batch_size = c.batch_size;
        cfg.iou_conf_min = c.iou_conf_min;
        cfg.stability_min = c.stability_min;
        cfg.dedup_iou = c.dedup_iou;
        cfg.multimask = c.multimask;
        cfg
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn aop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `out` must be a valid pointer to an `AopConfig`.
#[no_mangle]
pub unsafe extern "C" fn aop_config_default(out: *mut AopConfig) -> AopStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let d = PipelineConfig::default();
        *out = AopConfig {
            method: AopMethod::Aop,
            smoothing_sigma: d.sampler.smoothing_sigma,
            intensity_threshold: d.sampler.intensity_threshold,
            spacing: d.sampler.spacing,
            threshold_factor: d.eliminator.threshold_factor,
            min_reference_masks: d.eliminator.min_reference_masks,
            cumulative_threshold: d.eliminator.cumulative_threshold,
            batch_size: d.batch_size,
            iou_conf_min: d.iou_conf_min,
            stability_min: d.stability_min,
            dedup_iou: d.dedup_iou,
            multimask: d.multimask,
        };
        Ok(())
    })
}

/// Loads an AOPW weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aop_weights_load(path: *const c_char, out: *mut *mut AopWeights) -> AopStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let w = check(load_weights(&path_arg(path)?))?;
        *out = Box::into_raw(Box::new(AopWeights(w)));
        Ok(())
    })
}

/// # Safety
/// `weights` must come from [`aop_weights_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn aop_weights_free(weights: *mut AopWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Loads a scene directory (`index.json`, `masks/`, `embedding.aopt`,
/// optional `image.ppm`).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aop_scene_load(dir: *const c_char, out: *mut *mut AopScene) -> AopStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let s = check(FileAdapter::load(&path_arg(dir)?))?;
        *out = Box::into_raw(Box::new(AopScene(s)));
        Ok(())
    })
}

/// # Safety
/// `scene` must come from [`aop_scene_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn aop_scene_free(scene: *mut AopScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Image height and width of a scene.
///
/// # Safety
/// `scene` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn aop_scene_size(
    scene: *const AopScene,
    height: *mut usize,
    width: *mut usize,
) -> AopStatus {
    guard(|| {
        let scene = nonnull(scene, "scene")?;
        let (h, w) = scene.0.image_size();
        *out_arg(height, "height")? = h;
        *out_arg(width, "width")? = w;
        Ok(())
    })
}

/// Runs the configured method on a scene. `weights` may be NULL for the
/// grid baselines.
///
/// # Safety
/// `scene` and `config` must be valid, `weights` live or NULL, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aop_run(
    scene: *const AopScene,
    weights: *const AopWeights,
    config: *const AopConfig,
    out: *mut *mut AopResult,
) -> AopStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let scene = nonnull(scene, "scene")?;
        let cfg = PipelineConfig::from(nonnull(config, "config")?);
        let weights = weights.as_ref().map(|w| &w.0);
        let result = check(run(&scene.0, weights, &cfg, &mut NoObserver))?;
        *out = Box::into_raw(Box::new(AopResult {
            result,
            shape: scene.0.image_size(),
        }));
        Ok(())
    })
}

/// # Safety
/// `result` must come from [`aop_run`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn aop_result_free(result: *mut AopResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// # Safety
/// `result` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aop_result_metrics(result: *const AopResult, out: *mut AopMetrics) -> AopStatus {
    guard(|| {
        let r = &nonnull(result, "result")?.result;
        *out_arg(out, "out")? = AopMetrics {
            num_prompts: r.prompts_used,
            decoder_calls: r.decoder_calls,
            eliminated: r.eliminated,
            initial_pool: r.initial_pool,
            num_masks: r.masks.len(),
            elimination_ratio: r.elimination_ratio(),
            prompt_latency_s: r.prompt_latency,
            mask_latency_s: r.mask_latency,
            peak_bytes: r.peak_bytes,
        };
        Ok(())
    })
}

/// Copies mask `index` (row-major, 0 or 1) into `buf`, which must hold
/// height × width floats.
///
/// # Safety
/// `result` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn aop_result_mask(
    result: *const AopResult,
    index: usize,
    buf: *mut f32,
    len: usize,
) -> AopStatus {
    guard(|| {
        let r = nonnull(result, "result")?;
        let mask = r.result.masks.get(index).ok_or_else(|| {
            fail(
                AopStatus::OutOfRange,
                format!("mask {index} out of range (have {})", r.result.masks.len()),
            )
        })?;
        let (h, w) = r.shape;
        if len != h * w {
            return Err(fail(
                AopStatus::Dimension,
                format!("buffer holds {len} floats, mask needs {}", h * w),
            ));
        }
        if buf.is_null() {
            return Err(fail(AopStatus::NullArgument, "buf is null"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(mask.mask.data());
        Ok(())
    })
}

/// Greedy mIoU of a result's masks against the scene's masks.
///
/// # Safety
/// `result` and `scene` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn aop_result_miou(
    result: *const AopResult,
    scene: *const AopScene,
    matching: AopMatching,
    out: *mut f64,
) -> AopStatus {
    guard(|| {
        let r = nonnull(result, "result")?;
        let scene = nonnull(scene, "scene")?;
        let pred: Vec<BitMask> = r.result.masks.iter().map(|m| BitMask::from_tensor(&m.mask)).collect();
        let gt: Vec<BitMask> = scene.0.masks().map(BitMask::from_tensor).collect();
        *out_arg(out, "out")? = check(greedy_miou_bits(&pred, &gt, matching.into()))?;
        Ok(())
    })
}

/// IoU of two `height × width` masks (`> 0.5` is foreground). Two empty
/// masks score 1.
///
/// # Safety
/// `a` and `b` must be valid for `height * width` reads, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn aop_mask_iou(
    a: *const f32,
    b: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> AopStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(fail(AopStatus::NullArgument, "mask is null"));
        }
        let n = height * width;
        let ta = check(Tensor::from_vec(&[height, width], std::slice::from_raw_parts(a, n).to_vec()))?;
        let tb = check(Tensor::from_vec(&[height, width], std::slice::from_raw_parts(b, n).to_vec()))?;
        *out_arg(out, "out")? = check(mask_iou(&ta, &tb))?;
        Ok(())
    })
}
