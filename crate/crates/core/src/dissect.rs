//! Unit dissection.
//!
//! Every patch is run through the model with a capture at the target layer.
//! A unit's score on a patch is the maximum of its feature map. Per unit we
//! keep the `k` best patches (score descending, then `patch_id` ascending)
//! together with the argmax location and the feature map itself, and we
//! collect every score to fix the unit's binarization threshold as an upper
//! empirical quantile.
//!
//! Probing is split into per-chunk accumulators that merge associatively, so
//! the catalog does not depend on how patches were partitioned.

use std::cmp::Ordering;
use std::collections::HashMap;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Patch, PatchRect};
use crate::error::{Error, Result};
use crate::model::{ActShape, Model};
use crate::ops::bilinear_upsample;
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 12;
pub const DEFAULT_QUANTILE: f64 = 0.005;
/// Intensity multiplier for pixels outside a unit's mask.
pub const DIM_FACTOR: f32 = 0.4;
/// Width in pixels of montage borders and separators.
pub const SEPARATOR: u32 = 2;
const SEPARATOR_VALUE: u8 = 255;

/// Which activations feed the threshold estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// One sample per patch: the unit's score.
    #[default]
    MaxScores,
    /// Every spatial activation of the unit.
    AllActivations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub k: usize,
    pub quantile: f64,
    pub threshold_source: ThresholdSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            quantile: DEFAULT_QUANTILE,
            threshold_source: ThresholdSource::MaxScores,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        check_quantile(self.quantile)
    }
}

fn check_quantile(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile must be in (0, 1), got {q}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopEntry {
    pub score: f32,
    pub patch_id: String,
    /// `(row, col)` in feature-map coordinates.
    pub argmax: (usize, usize),
    /// `[H', W']`.
    pub feature_map: Tensor,
}

/// Ranking order for top-k lists: higher score first, then smaller patch id.
pub fn rank_order(a_score: f32, a_id: &str, b_score: f32, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// A bounded list of the best entries under [`rank_order`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    k: usize,
    entries: Vec<TopEntry>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self { k, entries: Vec::new() }
    }

    fn position(&self, score: f32, id: &str) -> usize {
        self.entries
            .partition_point(|e| rank_order(e.score, &e.patch_id, score, id) == Ordering::Less)
    }

    /// Whether an entry with this key would be retained.
    pub fn admits(&self, score: f32, id: &str) -> bool {
        self.entries.len() < self.k || self.position(score, id) < self.k
    }

    pub fn push(&mut self, entry: TopEntry) {
        let pos = self.position(entry.score, &entry.patch_id);
        if pos >= self.k {
            return;
        }
        self.entries.insert(pos, entry);
        self.entries.truncate(self.k);
    }

    pub fn merge(mut self, other: TopK) -> TopK {
        for e in other.entries {
            self.push(e);
        }
        self
    }

    pub fn entries(&self) -> &[TopEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<TopEntry> {
        self.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub layer_id: String,
    pub unit_index: usize,
    pub top_k: Vec<TopEntry>,
    pub threshold: f32,
    /// Fraction of `top_k` patches labelled positive, once labels are attached.
    pub positive_fraction: Option<f64>,
}

impl UnitRecord {
    pub fn unit_id(&self) -> String {
        unit_id(&self.layer_id, self.unit_index)
    }
}

/// Stable identifier `{layer}_{unit:04}`, also the montage file stem.
pub fn unit_id(layer: &str, unit: usize) -> String {
    format!("{layer}_{unit:04}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitCatalog {
    pub model_id: String,
    pub layer_id: String,
    pub config: ProbeConfig,
    pub units: Vec<UnitRecord>,
}

impl UnitCatalog {
    /// Fills each unit's positive fraction from patch labels.
    pub fn attach_labels(&mut self, labels: &HashMap<String, bool>) -> Result<()> {
        for u in &mut self.units {
            let (pos, n) = positive_count(u, labels)?;
            u.positive_fraction = Some(if n == 0 { 0.0 } else { pos as f64 / n as f64 });
        }
        Ok(())
    }
}

/// Per-chunk probe state; merging is associative and commutative.
#[derive(Debug, Clone)]
struct Accumulator {
    topk: Vec<TopK>,
    samples: Vec<Vec<f32>>,
}

impl Accumulator {
    fn new(units: usize, k: usize) -> Self {
        Self {
            topk: (0..units).map(|_| TopK::new(k)).collect(),
            samples: vec![Vec::new(); units],
        }
    }

    fn merge(mut self, other: Accumulator) -> Accumulator {
        let topk = std::mem::take(&mut self.topk);
        self.topk = topk.into_iter().zip(other.topk).map(|(a, b)| a.merge(b)).collect();
        for (a, b) in self.samples.iter_mut().zip(other.samples) {
            a.extend(b);
        }
        self
    }
}

/// Validates that `layer_id` produces spatial feature maps and returns their shape.
pub fn spatial_layer_shape(model: &Model, layer_id: &str) -> Result<(usize, usize, usize)> {
    let layer = model
        .layer(layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
    match model.output_shape(layer_id) {
        Some(ActShape::Map { c, h, w }) => Ok((c, h, w)),
        _ => Err(Error::NotSpatial {
            layer: layer_id.to_string(),
            kind: layer.op.kind().as_str().to_string(),
        }),
    }
}

/// Records, for every unit of `layer_id`, its top-`k` patches and its
/// activation threshold.
pub fn probe(model: &Model, model_id: &str, layer_id: &str, patches: &[Patch], cfg: &ProbeConfig) -> Result<UnitCatalog> {
    cfg.validate()?;
    let (units, fh, fw) = spatial_layer_shape(model, layer_id)?;
    if patches.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one patch".into()));
    }
    let acc = patches
        .par_chunks(16)
        .map(|chunk| -> Result<Accumulator> {
            let mut acc = Accumulator::new(units, cfg.k);
            for p in chunk {
                let out = model.forward(&p.pixels, &[layer_id])?;
                let fmap = &out.captures[0].tensor;
                for u in 0..units {
                    let plane = fmap.channel(u);
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    let score = plane[best];
                    match cfg.threshold_source {
                        ThresholdSource::MaxScores => acc.samples[u].push(score),
                        ThresholdSource::AllActivations => acc.samples[u].extend_from_slice(plane),
                    }
                    if acc.topk[u].admits(score, &p.patch_id) {
                        acc.topk[u].push(TopEntry {
                            score,
                            patch_id: p.patch_id.clone(),
                            argmax: (best / fw, best % fw),
                            feature_map: Tensor::from_parts(vec![fh, fw], plane.to_vec()),
                        });
                    }
                }
            }
            Ok(acc)
        })
        .try_reduce(|| Accumulator::new(units, cfg.k), |a, b| Ok(a.merge(b)))?;

    let units = acc
        .topk
        .into_iter()
        .zip(acc.samples)
        .enumerate()
        .map(|(u, (topk, samples))| {
            Ok(UnitRecord {
                layer_id: layer_id.to_string(),
                unit_index: u,
                top_k: topk.into_entries(),
                threshold: compute_threshold(&samples, cfg.quantile)?,
                positive_fraction: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitCatalog {
        model_id: model_id.to_string(),
        layer_id: layer_id.to_string(),
        config: *cfg,
        units,
    })
}

/// Upper empirical quantile: the smallest sample `T` such that the fraction
/// of samples strictly greater than `T` is at most `q`.
pub fn compute_threshold(samples: &[f32], q: f64) -> Result<f32> {
    check_quantile(q)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot take a quantile of no samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let above = n - (j + 1);
        if above as f64 / n as f64 <= q {
            return Ok(sorted[i]);
        }
        i = j + 1;
    }
    Ok(sorted[n - 1])
}

/// A patch with a unit's binarized activation region highlighted.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedPatchView {
    pub patch_id: String,
    /// `true` where the upsampled feature map exceeds the threshold.
    pub mask: Vec<bool>,
    /// `[1, s, s]`: masked pixels unchanged, the rest scaled by [`DIM_FACTOR`].
    pub overlay: Tensor,
}

pub fn segment_patch(patch_id: &str, pixels: &Tensor, feature_map: &Tensor, threshold: f32) -> Result<SegmentedPatchView> {
    let [c, h, w] = pixels.dims::<3>("patch pixels")?;
    if c != 1 {
        return Err(Error::Shape(format!("patch must be single-channel, got {c}")));
    }
    let up = bilinear_upsample(feature_map, h, w)?;
    let mask: Vec<bool> = up.data().iter().map(|&v| v > threshold).collect();
    let overlay = pixels
        .data()
        .iter()
        .zip(&mask)
        .map(|(&p, &m)| if m { p } else { p * DIM_FACTOR })
        .collect();
    Ok(SegmentedPatchView {
        patch_id: patch_id.to_string(),
        mask,
        overlay: Tensor::from_parts(vec![1, h, w], overlay),
    })
}

/// Grid dimensions `(rows, cols)` for `n` cells: `cols = ceil(sqrt(n))`.
pub fn montage_grid(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt().ceil() as usize;
    while cols * cols < n {
        cols += 1;
    }
    let cols = cols.max(1);
    (n.div_ceil(cols).max(1), cols)
}

/// Renders a unit's segmented top patches into one grayscale grid, in score
/// order, row-major, with 2-px separators and an outer border.
pub fn render_montage(record: &UnitRecord, pixels: &HashMap<&str, &Tensor>) -> Result<GrayImage> {
    if record.top_k.is_empty() {
        return Err(Error::InvalidArgument(format!("unit {} has no top patches", record.unit_id())));
    }
    let mut views = Vec::with_capacity(record.top_k.len());
    for e in &record.top_k {
        let px = pixels.get(e.patch_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("missing pixels for patch `{}`", e.patch_id))
        })?;
        views.push(segment_patch(&e.patch_id, px, &e.feature_map, record.threshold)?);
    }
    let cell_h = views[0].overlay.shape()[1];
    let cell_w = views[0].overlay.shape()[2];
    if views.iter().any(|v| v.overlay.shape()[1..] != [cell_h, cell_w]) {
        return Err(Error::Shape("montage patches differ in size".into()));
    }
    let (rows, cols) = montage_grid(views.len());
    let (ch, cw) = (cell_h as u32, cell_w as u32);
    let width = cols as u32 * cw + (cols as u32 + 1) * SEPARATOR;
    let height = rows as u32 * ch + (rows as u32 + 1) * SEPARATOR;
    let mut img = GrayImage::from_pixel(width, height, image::Luma([SEPARATOR_VALUE]));
    for (i, v) in views.iter().enumerate() {
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        let ox = SEPARATOR + c * (cw + SEPARATOR);
        let oy = SEPARATOR + r * (ch + SEPARATOR);
        for y in 0..ch {
            for x in 0..cw {
                let val = v.overlay.data()[(y * cw + x) as usize];
                img.put_pixel(ox + x, oy + y, image::Luma([(val.clamp(0.0, 1.0) * 255.0).round() as u8]));
            }
        }
    }
    Ok(img)
}

/// PNG bytes of a montage.
pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn positive_count(u: &UnitRecord, labels: &HashMap<String, bool>) -> Result<(usize, usize)> {
    let mut pos = 0;
    for e in &u.top_k {
        match labels.get(&e.patch_id) {
            Some(true) => pos += 1,
            Some(false) => {}
            None => {
                return Err(Error::InvalidArgument(format!(
                    "no label for patch `{}` of unit {}",
                    e.patch_id,
                    u.unit_id()
                )))
            }
        }
    }
    Ok((pos, u.top_k.len()))
}

/// Unit indices ordered by the positive fraction of their top patches,
/// highest first; ties by ascending unit index.
pub fn rank_units(catalog: &UnitCatalog, labels: &HashMap<String, bool>) -> Result<Vec<usize>> {
    let mut keyed = Vec::with_capacity(catalog.units.len());
    for u in &catalog.units {
        let (pos, n) = positive_count(u, labels)?;
        keyed.push((u.unit_index, pos, n.max(1)));
    }
    // Compare pos_a/n_a with pos_b/n_b exactly by cross-multiplying.
    keyed.sort_by(|a, b| (b.1 * a.2).cmp(&(a.1 * b.2)).then(a.0.cmp(&b.0)));
    Ok(keyed.into_iter().map(|k| k.0).collect())
}

/// Picks `n` survey units: the top `ceil(n/2)` of the ranking plus
/// `floor(n/2)` drawn without replacement from the rest, then shuffled so
/// readers cannot infer rank.
pub fn select_survey_units(ranked: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > ranked.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} units from {}",
            ranked.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = n.div_ceil(2);
    let mut chosen: Vec<usize> = ranked[..top].to_vec();
    chosen.extend(ranked[top..].choose_multiple(&mut rng, n - top).copied());
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

// ---- catalog file ----

pub const CATALOG_FORMAT_VERSION: u32 = 1;
pub const CATALOG_FILE: &str = "catalog.json";
pub const MONTAGE_DIR: &str = "montages";
pub const CONTEXT_DIR: &str = "context";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogTopEntry {
    pub score: f32,
    pub patch_id: String,
    pub argmax_row: usize,
    pub argmax_col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogUnit {
    pub unit_id: String,
    pub unit_index: usize,
    pub threshold: f32,
    pub positive_fraction: Option<f64>,
    /// Path of the montage PNG relative to the catalog directory.
    pub montage: String,
    pub top_k: Vec<CatalogTopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogPatch {
    pub patch_id: String,
    pub case_id: String,
    pub rect: PatchRect,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogCase {
    pub case_id: String,
    pub width: usize,
    pub height: usize,
    /// Whole-image PNG relative to the catalog directory.
    pub image: String,
}

/// On-disk unit catalog shared by the dissect stage and the survey service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogFile {
    pub format_version: u32,
    pub model_id: String,
    pub layer_id: String,
    pub k: usize,
    pub quantile: f64,
    pub threshold_source: ThresholdSource,
    pub seed: u64,
    pub units: Vec<CatalogUnit>,
    /// Unit ids shown to readers, in presentation order.
    pub survey_units: Vec<String>,
    /// Every patch referenced by a unit's top-k, sorted by id.
    pub patches: Vec<CatalogPatch>,
    /// Source cases of those patches, sorted by id.
    pub cases: Vec<CatalogCase>,
}

impl CatalogFile {
    pub fn unit(&self, unit_id: &str) -> Option<&CatalogUnit> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    pub fn patch(&self, patch_id: &str) -> Option<&CatalogPatch> {
        self.patches
            .binary_search_by(|p| p.patch_id.as_str().cmp(patch_id))
            .ok()
            .map(|i| &self.patches[i])
    }

    pub fn case(&self, case_id: &str) -> Option<&CatalogCase> {
        self.cases
            .binary_search_by(|c| c.case_id.as_str().cmp(case_id))
            .ok()
            .map(|i| &self.cases[i])
    }

    /// Checks the catalog's structural invariants: sorted top-k lists within
    /// `k`, resolvable patches and cases, rectangles inside their images, and
    /// a duplicate-free survey list of known units.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.format_version != CATALOG_FORMAT_VERSION {
            return bad(format!("unsupported catalog format_version {}", self.format_version));
        }
        if !self.patches.windows(2).all(|w| w[0].patch_id < w[1].patch_id) {
            return bad("catalog patches must be sorted by unique id".into());
        }
        if !self.cases.windows(2).all(|w| w[0].case_id < w[1].case_id) {
            return bad("catalog cases must be sorted by unique id".into());
        }
        for (i, u) in self.units.iter().enumerate() {
            if u.unit_index != i || u.unit_id != unit_id(&self.layer_id, i) {
                return bad(format!("unit {i} has id {} / index {}", u.unit_id, u.unit_index));
            }
            if u.top_k.is_empty() || u.top_k.len() > self.k {
                return bad(format!("unit {} has {} top entries (k = {})", u.unit_id, u.top_k.len(), self.k));
            }
            for w in u.top_k.windows(2) {
                if rank_order(w[0].score, &w[0].patch_id, w[1].score, &w[1].patch_id) != Ordering::Less {
                    return bad(format!("unit {} top-k is not in rank order", u.unit_id));
                }
            }
            for e in &u.top_k {
                let p = self
                    .patch(&e.patch_id)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown patch {}", e.patch_id)))?;
                let c = self
                    .case(&p.case_id)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown case {}", p.case_id)))?;
                if !p.rect.fits(c.height, c.width) {
                    return bad(format!("patch {} rect {:?} lies outside its image", p.patch_id, p.rect));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.survey_units {
            if self.unit(id).is_none() || !seen.insert(id) {
                return bad(format!("survey unit {id} is unknown or repeated"));
            }
        }
        Ok(())
    }
}
