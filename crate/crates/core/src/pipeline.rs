//! Zero-shot segmentation: text banks, patch/text cosine logits, and
//! sliding-window inference over arbitrary-size images.

use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{EncodeMode, Encoder};
use crate::error::{Error, Result};
use crate::gtf;
use crate::model::{ModelBundle, ModelConfig};
use crate::netpbm::{GrayImage, RgbImage};
use crate::surgery::SurgeryPlan;
use crate::tensor::{bilinear_resize, l2_normalize_rows, matmul_transposed, Tensor};

pub const TEXT_EMBEDDINGS: &str = "text_embeddings";

/// Class text embeddings, one unit row per class, in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    embeddings: Tensor,
    class_names: Vec<String>,
    source: String,
}

impl TextBank {
    /// Normalizes the rows and attaches the names. Zero rows are rejected
    /// since they cannot score any patch.
    pub fn new(embeddings: Tensor, class_names: Vec<String>, source: impl Into<String>) -> Result<Self> {
        let (c, _) = embeddings.dims2("text embeddings")?;
        if c == 0 {
            return Err(Error::Consistency("text bank has no classes".into()));
        }
        if c != class_names.len() {
            return Err(Error::Consistency(format!(
                "{} class names but {c} embedding rows",
                class_names.len()
            )));
        }
        if let Some(r) = (0..c).find(|&r| embeddings.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::Data(format!("embedding of class `{}` is all zero", class_names[r])));
        }
        Ok(Self {
            embeddings: l2_normalize_rows(&embeddings),
            class_names,
            source: source.into(),
        })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Best class for one feature vector; smallest index on ties.
    pub fn classify(&self, feature: &[f32]) -> Result<usize> {
        let row = Tensor::new(vec![1, feature.len()], feature.to_vec())?;
        let scores = self.scores(&row)?;
        Ok(argmax(scores.data()))
    }

    /// Cosine similarity of every row of `z` against every class, `[n × C]`.
    pub fn scores(&self, z: &Tensor) -> Result<Tensor> {
        let (_, d) = z.dims2("features")?;
        if d != self.embed_dim() {
            return Err(Error::Shape(format!(
                "features have dim {d}, text bank has {}",
                self.embed_dim()
            )));
        }
        matmul_transposed(&l2_normalize_rows(z), &self.embeddings)
    }
}

/// One class name per non-empty line.
pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn build_text_bank(gtf_path: &Path, classes_path: &Path) -> Result<TextBank> {
    let mut tensors = gtf::load_gtf(gtf_path)?;
    let emb = tensors.remove(TEXT_EMBEDDINGS).ok_or_else(|| {
        Error::Consistency(format!("{} has no `{TEXT_EMBEDDINGS}` tensor", gtf_path.display()))
    })?;
    let names = read_class_names(classes_path)?;
    TextBank::new(emb, names, gtf_path.display().to_string())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Patch-grid logits `[grid_h × grid_w × C]` from patch features `[n × E]`.
pub fn compute_logits(z: &Tensor, bank: &TextBank, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    let (n, _) = z.dims2("patch features")?;
    if n != grid_h * grid_w {
        return Err(Error::Shape(format!("{n} patches do not fill a {grid_h}x{grid_w} grid")));
    }
    bank.scores(z)?.reshape(vec![grid_h, grid_w, bank.num_classes()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub resize_short_side: usize,
    pub window: usize,
    pub stride: usize,
    pub mode: EncodeMode,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl InferenceConfig {
    /// 336 / 224 / 112 for a 224-pixel model, scaled proportionally otherwise.
    pub fn for_model(cfg: &ModelConfig, mode: EncodeMode) -> Self {
        Self {
            resize_short_side: cfg.image_size * 3 / 2,
            window: cfg.image_size,
            stride: (cfg.image_size / 2).max(1),
            mode,
            mean: cfg.mean,
            std: cfg.std,
        }
    }

    fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.window != model.image_size {
            return Err(Error::Config(format!(
                "window {} must equal the model input size {}",
                self.window, model.image_size
            )));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        if self.resize_short_side == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        Ok(())
    }
}

/// Window origins along one axis: every `stride`, the last clamped flush
/// with the border.
pub fn window_positions(size: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window > size {
        return Err(Error::Config(format!("window {window} larger than image side {size}")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let count = (size - window).div_ceil(stride) + 1;
    Ok((0..count).map(|i| (i * stride).min(size - window)).collect())
}

/// Output size after scaling the short side to `short`.
pub fn resized_dims(width: usize, height: usize, short: usize) -> (usize, usize) {
    let scale = |long: usize, s: usize| ((long as f64) * short as f64 / s as f64).round().max(1.0) as usize;
    if width <= height {
        (short, scale(height, width))
    } else {
        (scale(width, height), short)
    }
}

#[derive(Debug, Clone)]
pub struct LogitMap {
    /// `[H × W × C]` at the resized resolution.
    pub values: Tensor,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub logits: LogitMap,
    /// Per-pixel class index at the original resolution.
    pub mask: GrayImage,
    /// `(x, y)` origin and surgery plan of every window, in visit order.
    pub windows: Vec<((usize, usize), SurgeryPlan)>,
}

impl Segmentation {
    /// Distinct plans with how many windows used each.
    pub fn plan_summary(&self) -> Vec<(SurgeryPlan, usize)> {
        let mut out: Vec<(SurgeryPlan, usize)> = Vec::new();
        for (_, p) in &self.windows {
            match out.iter_mut().find(|(q, _)| q == p) {
                Some((_, n)) => *n += 1,
                None => out.push((p.clone(), 1)),
            }
        }
        out
    }
}

/// Crops `[win × win]` at `(x, y)` from an HWC image and returns the
/// channel-normalized CHW tensor the encoder expects.
fn crop_chw(img: &Tensor, x: usize, y: usize, win: usize, mean: &[f32; 3], std: &[f32; 3]) -> Tensor {
    let w = img.shape()[1];
    let src = img.data();
    let mut out = vec![0.0f32; 3 * win * win];
    for c in 0..3 {
        for dy in 0..win {
            for dx in 0..win {
                let v = src[((y + dy) * w + x + dx) * 3 + c];
                out[(c * win + dy) * win + dx] = (f64::from(v - mean[c]) / f64::from(std[c])) as f32;
            }
        }
    }
    Tensor::new(vec![3, win, win], out).expect("sized above")
}

/// Nearest-neighbor source index with half-pixel centers.
fn nearest(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

pub fn sliding_window_segment(
    image: &RgbImage,
    bundle: &ModelBundle,
    bank: &TextBank,
    cfg: &InferenceConfig,
) -> Result<Segmentation> {
    let model = bundle.config();
    cfg.validate(model)?;
    if bank.embed_dim() != model.embed_dim {
        return Err(Error::Consistency(format!(
            "text bank dim {} differs from model embed_dim {}",
            bank.embed_dim(),
            model.embed_dim
        )));
    }
    let classes = bank.num_classes();
    if classes > 255 {
        return Err(Error::Data(format!("{classes} classes do not fit an 8-bit mask")));
    }
    let (rw, rh) = resized_dims(image.width, image.height, cfg.resize_short_side);
    let resized = bilinear_resize(&image.to_hwc(), rh, rw)?;
    let xs = window_positions(rw, cfg.window, cfg.stride)?;
    let ys = window_positions(rh, cfg.window, cfg.stride)?;
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();

    let encoder = Encoder::new(bundle, &cfg.mode)?;
    let grid = model.grid();
    let per_window: Vec<(Tensor, SurgeryPlan)> = origins
        .par_iter()
        .map(|&(x, y)| {
            let chw = crop_chw(&resized, x, y, cfg.window, &cfg.mean, &cfg.std);
            let out = encoder.encode(&chw)?;
            Ok((compute_logits(&out.patch_features, bank, grid, grid)?, out.surgery))
        })
        .collect::<Result<_>>()?;

    // Single reducer in window order keeps the sums schedule-independent.
    let mut sum = vec![0.0f64; rh * rw * classes];
    let mut count = vec![0u32; rh * rw];
    let mut windows = Vec::with_capacity(origins.len());
    for (&(x, y), (grid_logits, plan)) in origins.iter().zip(per_window) {
        let up = bilinear_resize(&grid_logits, cfg.window, cfg.window)?;
        for dy in 0..cfg.window {
            for dx in 0..cfg.window {
                let p = (y + dy) * rw + x + dx;
                count[p] += 1;
                let src = &up.data()[(dy * cfg.window + dx) * classes..][..classes];
                for (s, &v) in sum[p * classes..(p + 1) * classes].iter_mut().zip(src) {
                    *s += f64::from(v);
                }
            }
        }
        windows.push(((x, y), plan));
    }
    debug_assert!(count.iter().all(|&c| c > 0));

    let logits: Vec<f32> = sum
        .chunks(classes)
        .zip(&count)
        .flat_map(|(s, &n)| s.iter().map(move |v| (v / f64::from(n)) as f32))
        .collect();
    let logits = Tensor::new(vec![rh, rw, classes], logits)?;
    let labels: Vec<u8> = logits.data().chunks(classes).map(|px| argmax(px) as u8).collect();

    let mut mask = Vec::with_capacity(image.width * image.height);
    for y in 0..image.height {
        let sy = nearest(y, rh, image.height);
        for x in 0..image.width {
            mask.push(labels[sy * rw + nearest(x, rw, image.width)]);
        }
    }
    Ok(Segmentation {
        logits: LogitMap { values: logits },
        mask: GrayImage::new(image.width, image.height, mask)?,
        windows,
    })
}
