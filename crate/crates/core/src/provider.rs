//! Mask providers: the stand-in for a promptable segmentation decoder and its
//! image encoder.
//!
//! [`OracleProvider`] answers point queries from a [`SyntheticScene`];
//! [`FileAdapter`] serves precomputed embeddings and masks from a directory:
//!
//! ```text
//! embedding.aopt        [c, h, w]
//! masks/NNN.aopt        [H, W], values 0.0 / 1.0
//! index.json            {"masks": [{"file", "iou", "stability"}], "image_size": [H, W]}
//! image.ppm             optional, needed to run the predictor
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eliminator::{FeatureMap, MaskRecord};
use crate::error::{Error, Result};
use crate::format::{load_image, load_tensor};
use crate::sampler::PointPrompt;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskQuery {
    pub prompt: PointPrompt,
    pub multimask: bool,
}

impl MaskQuery {
    pub fn new(prompt: PointPrompt) -> Self {
        MaskQuery {
            prompt,
            multimask: true,
        }
    }
}

/// Up to three candidates, innermost first. Empty for background points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskProposal {
    pub candidates: Vec<MaskRecord>,
}

pub const MAX_CANDIDATES: usize = 3;

pub trait MaskProvider: Sync {
    fn image_size(&self) -> (usize, usize);

    /// `[3, H, W]` image, if this provider has one.
    fn image(&self) -> Option<&Tensor>;

    fn features(&self) -> &FeatureMap;

    /// One decoder invocation.
    fn decode(&self, query: &MaskQuery) -> Result<MaskProposal>;

    fn check_query(&self, query: &MaskQuery) -> Result<()> {
        let (h, w) = self.image_size();
        let p = &query.prompt;
        if p.x >= w || p.y >= h {
            return Err(Error::Provider(format!(
                "prompt {} at ({}, {}) outside {w}x{h} image",
                p.id, p.x, p.y
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Binary `[H, W]` mask.
    pub mask: Tensor,
    /// Unit feature vector.
    pub feature: Vec<f32>,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `[3, H, W]` in `[0, 1]`, quantized to 1/255 steps.
    pub image: Tensor,
    pub regions: Vec<Region>,
    /// `(x, y)` interior point per region.
    pub gt_prompts: Vec<(usize, usize)>,
    pub background: Vec<f32>,
    /// Side of the square embedding grid.
    pub embed_size: usize,
    /// Innermost region per pixel, row-major.
    pub owner: Vec<Option<u16>>,
}

impl SyntheticScene {
    pub fn image_size(&self) -> (usize, usize) {
        self.image.hw()
    }

    pub fn embed_channels(&self) -> usize {
        self.background.len()
    }

    pub fn depth(&self, region: usize) -> usize {
        let mut d = 0;
        let mut r = region;
        while let Some(p) = self.regions[r].parent {
            d += 1;
            r = p;
        }
        d
    }

    /// Region at `(x, y)` followed by its ancestors.
    pub fn chain_at(&self, x: usize, y: usize) -> Vec<usize> {
        let (_, w) = self.image_size();
        let mut chain = Vec::new();
        let mut cur = self.owner[y * w + x].map(usize::from);
        while let Some(r) = cur {
            chain.push(r);
            cur = self.regions[r].parent;
        }
        chain
    }

    pub fn gt_masks(&self) -> Vec<Tensor> {
        self.regions.iter().map(|r| r.mask.clone()).collect()
    }

    /// Embedding cell → region by majority over the cell's pixels (ties to the
    /// lower region id, background last).
    fn cell_owner(&self, row: usize, col: usize) -> Option<usize> {
        let (big_h, big_w) = self.image_size();
        let n = self.embed_size;
        let (y0, y1) = (row * big_h / n, ((row + 1) * big_h / n).max(row * big_h / n + 1));
        let (x0, x1) = (col * big_w / n, ((col + 1) * big_w / n).max(col * big_w / n + 1));
        let mut counts = vec![0usize; self.regions.len() + 1];
        for y in y0..y1.min(big_h) {
            for x in x0..x1.min(big_w) {
                let k = self.owner[y * big_w + x].map_or(self.regions.len(), usize::from);
                counts[k] += 1;
            }
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap_or(self.regions.len());
        (best < self.regions.len()).then_some(best)
    }
}

/// Region-constant embedding: each cell carries its majority region's
/// feature (or the background vector) plus Gaussian noise, L2-normalized.
pub fn synth_embedding(scene: &SyntheticScene, noise_sigma: f32, seed: u64) -> Result<FeatureMap> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!("embedding noise must be non-negative, got {noise_sigma}")));
    }
    let n = scene.embed_size;
    let c = scene.embed_channels();
    let mut rng = seed::rng(seed, &[scene.seed, 0xe3b]);
    let normal = Normal::new(0.0f32, noise_sigma.max(f32::MIN_POSITIVE)).expect("valid sigma");
    let mut data = Vec::with_capacity(n * n * c);
    for r in 0..n {
        for col in 0..n {
            let base = match scene.cell_owner(r, col) {
                Some(k) => &scene.regions[k].feature,
                None => &scene.background,
            };
            let mut v: Vec<f32> = base
                .iter()
                .map(|&b| b + if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-8);
            v.iter_mut().for_each(|x| *x /= norm);
            data.extend(v);
        }
    }
    FeatureMap::new(Tensor::from_vec(&[n, n, c], data)?, scene.image_size())
}

/// Decoder stand-in driven by scene geometry. Candidate k (0 = innermost)
/// scores `0.95 - 0.05 k ± 0.02` for IoU and `0.9 ± 0.05` for stability, with
/// noise keyed on `(seed, x, y, k)` so answers do not depend on query order.
pub struct OracleProvider {
    scene: SyntheticScene,
    features: FeatureMap,
    seed: u64,
}

impl OracleProvider {
    pub fn new(scene: SyntheticScene, embed_noise: f32, seed: u64) -> Result<Self> {
        let features = synth_embedding(&scene, embed_noise, seed)?;
        Ok(OracleProvider {
            scene,
            features,
            seed,
        })
    }

    pub fn with_features(scene: SyntheticScene, features: FeatureMap, seed: u64) -> Self {
        OracleProvider {
            scene,
            features,
            seed,
        }
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }
}

/// Noise-free scores of candidate `k`.
pub fn base_scores(k: usize) -> (f32, f32) {
    (0.95 - 0.05 * k as f32, 0.9)
}

impl MaskProvider for OracleProvider {
    fn image_size(&self) -> (usize, usize) {
        self.scene.image_size()
    }

    fn image(&self) -> Option<&Tensor> {
        Some(&self.scene.image)
    }

    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn decode(&self, query: &MaskQuery) -> Result<MaskProposal> {
        self.check_query(query)?;
        let p = &query.prompt;
        let mut chain = self.scene.chain_at(p.x, p.y);
        chain.truncate(if query.multimask { MAX_CANDIDATES } else { 1 });
        let candidates = chain
            .into_iter()
            .enumerate()
            .map(|(k, r)| {
                let mut rng = seed::rng(self.seed, &[p.x as u64, p.y as u64, k as u64]);
                let (iou, stab) = base_scores(k);
                MaskRecord {
                    mask: self.scene.regions[r].mask.clone(),
                    iou_confidence: (iou + rng.random_range(-0.02f32..=0.02)).clamp(0.0, 1.0),
                    stability: (stab + rng.random_range(-0.05f32..=0.05)).clamp(0.0, 1.0),
                    prompt_id: p.id,
                    accepted: false,
                }
            })
            .collect();
        Ok(MaskProposal { candidates })
    }
}

// ---------------------------------------------------------------------------
// Directory adapter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub iou: f32,
    pub stability: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterIndex {
    pub masks: Vec<IndexEntry>,
    pub image_size: [usize; 2],
}

struct BankMask {
    mask: Tensor,
    area: usize,
    iou: f32,
    stability: f32,
}

/// Serves a precomputed embedding and mask bank. A query returns the bank
/// masks containing the point, smallest area first, with their stored scores.
pub struct FileAdapter {
    dir: PathBuf,
    features: FeatureMap,
    image: Option<Tensor>,
    bank: Vec<BankMask>,
}

impl FileAdapter {
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let embedding_path = dir.join("embedding.aopt");
        let mut missing: Vec<String> = [&index_path, &embedding_path]
            .iter()
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::format(format!("scene directory incomplete, missing: {}", missing.join(", "))));
        }
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: AdapterIndex = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", index_path.display())))?;
        let image_size = (index.image_size[0], index.image_size[1]);
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::format(format!("{}: zero image size", index_path.display())));
        }
        missing = index
            .masks
            .iter()
            .map(|e| dir.join(&e.file))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::format(format!("mask files missing: {}", missing.join(", "))));
        }

        let embedding = load_tensor(&embedding_path)?;
        if embedding.ndim() != 3 {
            return Err(Error::format(format!(
                "{}: expected [c, h, w], got {:?}",
                embedding_path.display(),
                embedding.shape()
            )));
        }
        let features = FeatureMap::from_chw(&embedding, image_size)
            .map_err(|e| Error::format(format!("{}: {e}", embedding_path.display())))?;

        let mut bank = Vec::with_capacity(index.masks.len());
        for entry in &index.masks {
            let path = dir.join(&entry.file);
            let mask = load_tensor(&path)?;
            if mask.shape() != [image_size.0, image_size.1] {
                return Err(Error::format(format!(
                    "{}: mask shape {:?} does not match image size {:?}",
                    path.display(),
                    mask.shape(),
                    image_size
                )));
            }
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::format(format!("{}: mask is not binary", path.display())));
            }
            if !(0.0..=1.0).contains(&entry.iou) || !(0.0..=1.0).contains(&entry.stability) {
                return Err(Error::format(format!("{}: scores must lie in [0, 1]", entry.file)));
            }
            let area = mask.data().iter().filter(|&&v| v > 0.5).count();
            bank.push(BankMask {
                mask,
                area,
                iou: entry.iou,
                stability: entry.stability,
            });
        }

        let image_path = dir.join("image.ppm");
        let image = if image_path.is_file() {
            let img = load_image(&image_path)?;
            if img.hw() != image_size || img.shape()[0] != 3 {
                return Err(Error::format(format!(
                    "{}: expected a {}x{} colour image",
                    image_path.display(),
                    image_size.1,
                    image_size.0
                )));
            }
            Some(img)
        } else {
            None
        };

        Ok(FileAdapter {
            dir: dir.to_path_buf(),
            features,
            image,
            bank,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn masks(&self) -> impl Iterator<Item = &Tensor> {
        self.bank.iter().map(|b| &b.mask)
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }
}

impl MaskProvider for FileAdapter {
    fn image_size(&self) -> (usize, usize) {
        self.features.image_size()
    }

    fn image(&self) -> Option<&Tensor> {
        self.image.as_ref()
    }

    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn decode(&self, query: &MaskQuery) -> Result<MaskProposal> {
        self.check_query(query)?;
        let p = &query.prompt;
        let mut hits: Vec<usize> = (0..self.bank.len())
            .filter(|&i| self.bank[i].mask.at2(p.y, p.x) > 0.5)
            .collect();
        hits.sort_by_key(|&i| (self.bank[i].area, i));
        hits.truncate(if query.multimask { MAX_CANDIDATES } else { 1 });
        Ok(MaskProposal {
            candidates: hits
                .into_iter()
                .map(|i| MaskRecord {
                    mask: self.bank[i].mask.clone(),
                    iou_confidence: self.bank[i].iou,
                    stability: self.bank[i].stability,
                    prompt_id: p.id,
                    accepted: false,
                })
                .collect(),
        })
    }
}
