//! Cases, lesion masks, sliding-window patches and patient-grouped splits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_upsample;
use crate::tensor::Tensor;

/// Side of the square network input a patch is resized to.
pub const DEFAULT_INPUT_SIZE: usize = 128;
/// Smallest window side accepted by [`extract_patches`].
pub const MIN_WINDOW: usize = 16;
/// Both labeling thresholds: "at least 30%".
const LABEL_NUM: usize = 3;
const LABEL_DEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLabel {
    Cancerous,
    Normal,
    Benign,
    BenignWithoutCallback,
}

/// Binary lesion mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl LesionMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}x{w} needs {} pixels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_parts(vec![self.h, self.w], data)
    }

    /// 4-connected components of the mask.
    pub fn components(&self) -> LesionComponents {
        LesionComponents::new(self)
    }
}

/// Connected-component labelling of a mask; each component stands for one lesion.
#[derive(Debug, Clone)]
pub struct LesionComponents {
    w: usize,
    /// `0` is background; component `k` is stored as `k + 1`.
    labels: Vec<u32>,
    sizes: Vec<usize>,
}

impl LesionComponents {
    fn new(mask: &LesionMask) -> Self {
        let (h, w) = (mask.h, mask.w);
        let mut labels = vec![0u32; h * w];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !mask.data[start] || labels[start] != 0 {
                continue;
            }
            sizes.push(0);
            let id = sizes.len() as u32;
            labels[start] = id;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                sizes[id as usize - 1] += 1;
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if mask.data[j] && labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
        }
        Self { w, labels, sizes }
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Applies the patch labeling rule to `rect`.
    pub fn label_rect(&self, rect: &PatchRect) -> bool {
        if self.sizes.is_empty() {
            return false;
        }
        let mut inside = vec![0usize; self.sizes.len()];
        let mut covered = 0usize;
        for y in rect.y0..rect.y0 + rect.h {
            for &l in &self.labels[y * self.w + rect.x0..y * self.w + rect.x0 + rect.w] {
                if l != 0 {
                    inside[l as usize - 1] += 1;
                    covered += 1;
                }
            }
        }
        let lesion_hit = inside
            .iter()
            .zip(&self.sizes)
            .any(|(&n, &size)| n * LABEL_DEN >= size * LABEL_NUM);
        lesion_hit || covered * LABEL_DEN >= rect.area() * LABEL_NUM
    }
}

/// Window position inside a case image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PatchRect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x0 + self.w <= w && self.y0 + self.h <= h
    }
}

/// Positive iff at least 30% of some lesion lies inside `rect`, or at least
/// 30% of `rect` is lesion. Both comparisons are inclusive.
pub fn label_patch(rect: &PatchRect, mask: &LesionMask) -> Result<bool> {
    if !rect.fits(mask.h, mask.w) {
        return Err(Error::InvalidArgument(format!(
            "rect {rect:?} is outside the {}x{} mask",
            mask.h, mask.w
        )));
    }
    Ok(mask.components().label_rect(rect))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub patient_id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub lesion_mask: LesionMask,
    pub image_label: ImageLabel,
}

impl Case {
    pub fn new(
        case_id: impl Into<String>,
        patient_id: impl Into<String>,
        image: Tensor,
        lesion_mask: LesionMask,
        image_label: ImageLabel,
    ) -> Result<Self> {
        let [c, h, w] = image.dims::<3>("case image")?;
        if c != 1 {
            return Err(Error::Shape(format!("case image must be single-channel, got {c} channels")));
        }
        if (lesion_mask.h, lesion_mask.w) != (h, w) {
            return Err(Error::Shape(format!(
                "mask is {}x{} but image is {h}x{w}",
                lesion_mask.h, lesion_mask.w
            )));
        }
        if !lesion_mask.is_empty() && image_label == ImageLabel::Normal {
            return Err(Error::InvalidArgument("a case labelled normal cannot carry lesions".into()));
        }
        Ok(Self {
            case_id: case_id.into(),
            patient_id: patient_id.into(),
            image,
            lesion_mask,
            image_label,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Copies the pixels under `rect` into a `[h, w]` tensor.
    pub fn crop(&self, rect: &PatchRect) -> Tensor {
        let w = self.width();
        let src = self.image.data();
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y0..rect.y0 + rect.h {
            data.extend_from_slice(&src[y * w + rect.x0..y * w + rect.x0 + rect.w]);
        }
        Tensor::from_parts(vec![rect.h, rect.w], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub patch_id: String,
    pub source_case_id: String,
    pub rect: PatchRect,
    /// `[1, s, s]` at network input resolution.
    pub pixels: Tensor,
    pub label: bool,
}

pub fn patch_id(case_id: &str, rect: &PatchRect) -> String {
    format!("{case_id}:{},{}", rect.x0, rect.y0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub window_frac: f64,
    pub stride_frac: f64,
    pub input_size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            window_frac: 0.25,
            stride_frac: 0.5,
            input_size: DEFAULT_INPUT_SIZE,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_frac > 0.0 && self.window_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "window fraction must be in (0, 1], got {}",
                self.window_frac
            )));
        }
        if !(self.stride_frac > 0.0 && self.stride_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stride fraction must be in (0, 1], got {}",
                self.stride_frac
            )));
        }
        if self.input_size == 0 {
            return Err(Error::InvalidArgument("input size must be positive".into()));
        }
        Ok(())
    }

    /// Square window side and stride for an `h x w` image.
    pub fn window_and_stride(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let window = (self.window_frac * h.min(w) as f64).floor() as usize;
        if window < MIN_WINDOW {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} gives a {window}px window, below the {MIN_WINDOW}px minimum"
            )));
        }
        let stride = ((self.stride_frac * window as f64).floor() as usize).max(1);
        Ok((window, stride))
    }

    /// Window rectangles in row-major order, all fully inside the image.
    pub fn rects(&self, h: usize, w: usize) -> Result<Vec<PatchRect>> {
        let (win, stride) = self.window_and_stride(h, w)?;
        let mut out = Vec::new();
        for y0 in (0..=h - win).step_by(stride) {
            for x0 in (0..=w - win).step_by(stride) {
                out.push(PatchRect { x0, y0, w: win, h: win });
            }
        }
        Ok(out)
    }
}

/// Cuts every grid window out of `case`, resizes it to the network input
/// size and labels it against the case's lesion mask.
pub fn extract_patches(case: &Case, cfg: &PatchConfig) -> Result<Vec<Patch>> {
    let rects = cfg.rects(case.height(), case.width())?;
    let comps = case.lesion_mask.components();
    rects
        .into_iter()
        .map(|rect| {
            let crop = case.crop(&rect);
            let pixels = bilinear_upsample(&crop, cfg.input_size, cfg.input_size)?
                .reshape(vec![1, cfg.input_size, cfg.input_size])?;
            Ok(Patch {
                patch_id: patch_id(&case.case_id, &rect),
                source_case_id: case.case_id.clone(),
                rect,
                pixels,
                label: comps.label_rect(&rect),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.patients.get(patient_id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.patients.values().filter(|&&s| s == split).count()
    }
}

/// Shuffles distinct patients with a seeded RNG and cuts them 80/10/10 by
/// cumulative floor. Validation and test each get at least one patient.
pub fn split_dataset<'a>(patient_ids: impl IntoIterator<Item = &'a str>, seed: u64) -> Result<SplitAssignment> {
    let distinct: BTreeSet<&str> = patient_ids.into_iter().collect();
    let n = distinct.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 distinct patients to split, got {n}"
        )));
    }
    let mut order: Vec<&str> = distinct.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_end = n * 8 / 10;
    // n * 9 / 10 < n for every n >= 1, so the test split is never empty.
    let val_end = n * 9 / 10;
    if val_end == train_end {
        train_end -= 1;
    }
    let patients = order
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Val
            } else {
                Split::Test
            };
            (p.to_string(), s)
        })
        .collect();
    Ok(SplitAssignment { patients })
}

/// Side of synthetic case images.
pub const SYNTHETIC_SIZE: usize = 256;

/// Generates a deterministic stand-in mammogram: smooth background texture
/// and, when `positive`, 1-3 bright lesions (filled ellipse masses or dot
/// clusters). The mask marks each lesion's support; lesions never touch, so
/// each is its own connected component.
pub fn generate_synthetic_case(seed: u64, positive: bool) -> Case {
    let n = SYNTHETIC_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let coarse: Vec<f32> = (0..25).map(|_| rng.gen::<f32>()).collect();
    let coarse = Tensor::from_parts(vec![5, 5], coarse);
    let smooth = bilinear_upsample(&coarse, n, n).expect("valid sizes");
    let mut img: Vec<f32> = smooth
        .data()
        .iter()
        .map(|&v| 0.15 + 0.3 * v + rng.gen_range(-0.03f32..0.03))
        .collect();

    let mut mask = LesionMask::empty(n, n);
    // (cy, cx, radius) of placed lesions, for the no-touch check.
    let mut placed: Vec<(f32, f32, f32)> = Vec::new();
    if positive {
        let lesions = rng.gen_range(1..=3);
        for _ in 0..lesions {
            let mass = rng.gen_bool(0.5);
            // Rejection-sample a center whose bounding circle stays inside the
            // image and clear of earlier lesions.
            let radius = if mass { rng.gen_range(8.0f32..=24.0) } else { rng.gen_range(8.0f32..=14.0) };
            let mut center = None;
            for _ in 0..200 {
                let cy = rng.gen_range(radius + 2.0..n as f32 - radius - 2.0);
                let cx = rng.gen_range(radius + 2.0..n as f32 - radius - 2.0);
                let clear = placed
                    .iter()
                    .all(|&(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() > pr + radius + 3.0);
                if clear {
                    center = Some((cy, cx));
                    break;
                }
            }
            let Some((cy, cx)) = center else { continue };
            placed.push((cy, cx, radius));
            if mass {
                let minor = rng.gen_range(8.0f32..=radius);
                let theta = rng.gen_range(0.0f32..std::f32::consts::PI);
                let boost = rng.gen_range(0.3f32..=0.6);
                paint_ellipse(&mut img, &mut mask, (cy, cx), (radius, minor), theta, boost);
            } else {
                let dots = rng.gen_range(5..=12);
                let boost = rng.gen_range(0.4f32..=0.6);
                for _ in 0..dots {
                    let r = rng.gen_range(0.0..radius - 2.5);
                    let a = rng.gen_range(0.0f32..std::f32::consts::TAU);
                    let dot_r = rng.gen_range(1.0f32..=2.0);
                    paint_disk(&mut img, n, (cy + r * a.sin(), cx + r * a.cos()), dot_r, boost);
                }
                mark_disk(&mut mask, (cy, cx), radius);
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    if positive && mask.is_empty() {
        // Unreachable in practice: the first lesion always finds a free spot.
        mark_disk(&mut mask, (n as f32 / 2.0, n as f32 / 2.0), 8.0);
    }
    let label = if positive { ImageLabel::Cancerous } else { ImageLabel::Normal };
    Case::new(
        format!("syn{seed}"),
        format!("p{seed}"),
        Tensor::from_parts(vec![1, n, n], img),
        mask,
        label,
    )
    .expect("generator produces consistent cases")
}

fn paint_ellipse(img: &mut [f32], mask: &mut LesionMask, c: (f32, f32), axes: (f32, f32), theta: f32, boost: f32) {
    let n = mask.w;
    let (s, co) = theta.sin_cos();
    let r = axes.0.max(axes.1).ceil() as isize + 1;
    for y in (c.0 as isize - r).max(0)..=(c.0 as isize + r).min(n as isize - 1) {
        for x in (c.1 as isize - r).max(0)..=(c.1 as isize + r).min(n as isize - 1) {
            let dy = y as f32 - c.0;
            let dx = x as f32 - c.1;
            let u = (dx * co + dy * s) / axes.0;
            let v = (-dx * s + dy * co) / axes.1;
            if u * u + v * v <= 1.0 {
                let (y, x) = (y as usize, x as usize);
                img[y * n + x] += boost;
                mask.set(y, x, true);
            }
        }
    }
}

fn disk_pixels(n: usize, c: (f32, f32), r: f32) -> impl Iterator<Item = (usize, usize)> {
    let ri = r.ceil() as isize;
    let (ylo, yhi) = ((c.0 as isize - ri).max(0), (c.0 as isize + ri).min(n as isize - 1));
    let (xlo, xhi) = ((c.1 as isize - ri).max(0), (c.1 as isize + ri).min(n as isize - 1));
    (ylo..=yhi).flat_map(move |y| {
        (xlo..=xhi).filter_map(move |x| {
            let d2 = (y as f32 - c.0).powi(2) + (x as f32 - c.1).powi(2);
            (d2 <= r * r).then_some((y as usize, x as usize))
        })
    })
}

fn paint_disk(img: &mut [f32], n: usize, c: (f32, f32), r: f32, boost: f32) {
    for (y, x) in disk_pixels(n, c, r) {
        img[y * n + x] = img[y * n + x].max(0.0) + boost;
    }
}

fn mark_disk(mask: &mut LesionMask, c: (f32, f32), r: f32) {
    for (y, x) in disk_pixels(mask.w, c, r) {
        mask.set(y, x, true);
    }
}

// ---- file ingestion ----

/// One line of a case index file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub image_label: ImageLabel,
}

/// Reads a newline-delimited JSON case index. Blank lines are skipped.
pub fn read_index(path: &Path) -> Result<Vec<CaseRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: bad case record: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_index(path: &Path, records: &[CaseRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Resolves a path from an index file relative to the index's directory.
pub fn resolve_relative(index_path: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        index_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads a grayscale image (PGM or PNG) normalized to `[0, 1]`, and its mask
/// where any nonzero pixel is lesion.
pub fn load_case(image_path: &Path, mask_path: &Path, meta: &CaseRecord) -> Result<Case> {
    let img = image::open(image_path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read image {}: {e}", image_path.display())))?
        .to_luma32f();
    let mask = image::open(mask_path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read mask {}: {e}", mask_path.display())))?
        .to_luma32f();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Shape(format!(
            "mask {} is {:?} but image {} is {:?}",
            mask_path.display(),
            mask.dimensions(),
            image_path.display(),
            img.dimensions()
        )));
    }
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let pixels: Vec<f32> = img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let bits = mask.into_raw().into_iter().map(|v| v > 0.0).collect();
    Case::new(
        meta.case_id.clone(),
        meta.patient_id.clone(),
        Tensor::new(vec![1, h, w], pixels)?,
        LesionMask::from_vec(h, w, bits)?,
        meta.image_label,
    )
}

/// Loads every case listed in an index file.
pub fn load_index_cases(index_path: &Path) -> Result<Vec<Case>> {
    read_index(index_path)?
        .iter()
        .map(|r| {
            load_case(
                &resolve_relative(index_path, &r.image_path),
                &resolve_relative(index_path, &r.mask_path),
                r,
            )
        })
        .collect()
}

/// 8-bit grayscale rendering of a `[1, H, W]` or `[H, W]` tensor in `[0, 1]`.
pub fn to_gray_image(t: &Tensor) -> image::GrayImage {
    let (h, w) = match t.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => panic!("not a single-channel image: {s:?}"),
    };
    let bytes = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims")
}

pub fn mask_to_gray_image(mask: &LesionMask) -> image::GrayImage {
    let bytes = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.w as u32, mask.h as u32, bytes).expect("buffer matches dims")
}
