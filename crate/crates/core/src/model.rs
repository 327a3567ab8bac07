//! Model configuration (`model.cfg`) and validated checkpoint bundles.
//!
//! A model directory holds `model.gtf` with the canonical tensor names below
//! and `model.cfg`, a `key = value` text file:
//!
//! ```text
//! # CLIP ViT-B/16
//! layers = 12
//! width = 768
//! heads = 12
//! patch = 16
//! image_size = 224
//! embed_dim = 512
//! activation = quick-gelu
//! ln_eps = 1e-5
//! mean = 0.48145466, 0.4578275, 0.40821073
//! std = 0.26862954, 0.26130258, 0.27577711
//! ```
//!
//! Linear weights are stored `[out × in]`; `visual_proj` is `[width × embed_dim]`
//! and applied as `x · visual_proj`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gtf::{self, TensorMap};
use crate::tensor::{Activation, Tensor};

pub const MODEL_GTF: &str = "model.gtf";
pub const MODEL_CFG: &str = "model.cfg";

/// Per-channel RGB statistics of the OpenAI CLIP pretraining set.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer blocks; the last one has index `layers - 1`.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub embed_dim: usize,
    /// Hidden width of the block MLPs.
    pub mlp_dim: usize,
    pub activation: Activation,
    pub ln_eps: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ModelConfig {
    /// A config with CLIP defaults for the optional keys.
    pub fn new(layers: usize, width: usize, heads: usize, patch: usize, image_size: usize, embed_dim: usize) -> Self {
        Self {
            layers,
            width,
            heads,
            patch,
            image_size,
            embed_dim,
            mlp_dim: 4 * width,
            activation: Activation::QuickGelu,
            ln_eps: 1e-5,
            mean: CLIP_MEAN,
            std: CLIP_STD,
        }
    }

    /// 2 blocks, width 8, 2 heads, 8x8 input in 4x4 patches (5 tokens).
    pub fn tiny() -> Self {
        Self::new(2, 8, 2, 4, 8, 4)
    }

    pub fn vit_b16() -> Self {
        Self::new(12, 768, 12, 16, 224, 512)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Index of the final block.
    pub fn last_block(&self) -> usize {
        self.layers - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        for (name, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("patch", self.patch),
            ("image_size", self.image_size),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if self.std.iter().any(|&s| s.is_nan() || s <= 0.0) || self.mean.iter().any(|m| !m.is_finite()) {
            return fail("normalization std must be positive and mean finite".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::new(0, 0, 0, 0, 0, 0);
        let mut seen = std::collections::HashSet::new();
        let mut mlp_dim = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("`{key}`: `{value}` is not a non-negative integer")))
            };
            match key {
                "layers" => cfg.layers = int()?,
                "width" => cfg.width = int()?,
                "heads" => cfg.heads = int()?,
                "patch" => cfg.patch = int()?,
                "image_size" => cfg.image_size = int()?,
                "embed_dim" => cfg.embed_dim = int()?,
                "mlp_dim" => mlp_dim = Some(int()?),
                "activation" => cfg.activation = value.parse()?,
                "ln_eps" => {
                    cfg.ln_eps = value
                        .parse()
                        .map_err(|_| Error::Config(format!("`ln_eps`: `{value}` is not a number")))?
                }
                "mean" => cfg.mean = parse_triple(key, value)?,
                "std" => cfg.std = parse_triple(key, value)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        for required in ["layers", "width", "heads", "patch", "image_size", "embed_dim"] {
            if !seen.contains(required) {
                return Err(Error::Config(format!("missing key `{required}`")));
            }
        }
        cfg.mlp_dim = mlp_dim.unwrap_or(4 * cfg.width);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let triple = |v: &[f32; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "mlp_dim = {}", self.mlp_dim);
        let _ = writeln!(s, "activation = {}", self.activation.name());
        let _ = writeln!(s, "ln_eps = {:e}", self.ln_eps);
        let _ = writeln!(s, "mean = {}", triple(&self.mean));
        let _ = writeln!(s, "std = {}", triple(&self.std));
        s
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = value
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("`{key}`: `{value}` is not a list of numbers")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly 3 values")))
}

/// Canonical tensor names and the shapes the config implies, in a fixed
/// order (embedding, blocks, head).
pub fn canonical_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (w, m) = (cfg.width, cfg.mlp_dim);
    let mut out = vec![
        ("patch_embed.weight".to_owned(), vec![w, 3, cfg.patch, cfg.patch]),
        ("cls_token".to_owned(), vec![w]),
        ("pos_embed".to_owned(), vec![cfg.num_tokens(), w]),
        ("ln_pre.weight".to_owned(), vec![w]),
        ("ln_pre.bias".to_owned(), vec![w]),
    ];
    for i in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.push((p("ln1.weight"), vec![w]));
        out.push((p("ln1.bias"), vec![w]));
        for proj in ["q", "k", "v", "proj"] {
            out.push((p(&format!("attn.{proj}.weight")), vec![w, w]));
            out.push((p(&format!("attn.{proj}.bias")), vec![w]));
        }
        out.push((p("ln2.weight"), vec![w]));
        out.push((p("ln2.bias"), vec![w]));
        out.push((p("mlp.fc1.weight"), vec![m, w]));
        out.push((p("mlp.fc1.bias"), vec![m]));
        out.push((p("mlp.fc2.weight"), vec![w, m]));
        out.push((p("mlp.fc2.bias"), vec![w]));
    }
    out.push(("ln_post.weight".to_owned(), vec![w]));
    out.push(("ln_post.bias".to_owned(), vec![w]));
    out.push(("visual_proj".to_owned(), vec![w, cfg.embed_dim]));
    out
}

/// Borrowed weights of one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights<'a> {
    pub ln1_w: &'a Tensor,
    pub ln1_b: &'a Tensor,
    pub q_w: &'a Tensor,
    pub q_b: &'a Tensor,
    pub k_w: &'a Tensor,
    pub k_b: &'a Tensor,
    pub v_w: &'a Tensor,
    pub v_b: &'a Tensor,
    pub proj_w: &'a Tensor,
    pub proj_b: &'a Tensor,
    pub ln2_w: &'a Tensor,
    pub ln2_b: &'a Tensor,
    pub fc1_w: &'a Tensor,
    pub fc1_b: &'a Tensor,
    pub fc2_w: &'a Tensor,
    pub fc2_b: &'a Tensor,
}

/// A checkpoint whose tensors have all been checked against its config.
/// Immutable once built; edits go through [`ModelBundle::with_tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    tensors: TensorMap,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        for (name, shape) in canonical_shapes(&config) {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("`{name}` contains non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn into_tensors(self) -> TensorMap {
        self.tensors
    }

    /// Canonical tensor lookup. Panics on names outside the canonical set,
    /// which validation guarantees are present.
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("validated bundle lacks `{name}`"))
    }

    pub fn block(&self, i: usize) -> BlockWeights<'_> {
        assert!(i < self.config.layers, "block {i} out of range");
        let g = |s: &str| self.get(&format!("blocks.{i}.{s}"));
        BlockWeights {
            ln1_w: g("ln1.weight"),
            ln1_b: g("ln1.bias"),
            q_w: g("attn.q.weight"),
            q_b: g("attn.q.bias"),
            k_w: g("attn.k.weight"),
            k_b: g("attn.k.bias"),
            v_w: g("attn.v.weight"),
            v_b: g("attn.v.bias"),
            proj_w: g("attn.proj.weight"),
            proj_b: g("attn.proj.bias"),
            ln2_w: g("ln2.weight"),
            ln2_b: g("ln2.bias"),
            fc1_w: g("mlp.fc1.weight"),
            fc1_b: g("mlp.fc1.bias"),
            fc2_w: g("mlp.fc2.weight"),
            fc2_b: g("mlp.fc2.bias"),
        }
    }

    /// Returns a copy with one tensor replaced, revalidated.
    pub fn with_tensor(&self, name: &str, tensor: Tensor) -> Result<Self> {
        let mut tensors = self.tensors.clone();
        tensors.insert(name.to_owned(), tensor);
        Self::new(self.config.clone(), tensors)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        gtf::save_gtf(&dir.join(MODEL_GTF), &self.tensors)?;
        let cfg = dir.join(MODEL_CFG);
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| Error::io(cfg, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        load_model(&dir.join(MODEL_GTF), &dir.join(MODEL_CFG))
    }
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelConfig::parse(&text)
}

pub fn load_model(gtf_path: &Path, config_path: &Path) -> Result<ModelBundle> {
    let config = load_config(config_path)?;
    let tensors = gtf::load_gtf(gtf_path)?;
    ModelBundle::new(config, tensors)
}

/// Deterministic pseudo-random weights for a config. Linear weights are
/// uniform in `±1/sqrt(fan_in)`, norm gains near 1, biases small.
pub fn generate_synthetic(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = TensorMap::new();
    for (name, shape) in canonical_shapes(config) {
        let n: usize = shape.iter().product();
        let is_norm_gain = name.contains("ln") && name.ends_with(".weight");
        let data: Vec<f32> = if is_norm_gain {
            (0..n).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect()
        } else if name.ends_with(".bias") {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else {
            let fan_in = match name.as_str() {
                "patch_embed.weight" => 3 * config.patch * config.patch,
                "visual_proj" => config.width,
                "cls_token" | "pos_embed" => 4,
                _ => *shape.last().expect("matrix"),
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    ModelBundle::new(config.clone(), tensors)
}
