//! Global-token detection with attention-map fusion, and FFN channel
//! suppression driven by the entropy of output-channel weight norms.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::Tensor;

/// Natural log of the smallest positive normal `f32`: a column product that
/// falls below this has underflowed single precision.
pub fn underflow_floor() -> f64 {
    f64::from(f32::MIN_POSITIVE).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionVariant {
    /// Average the query-key maps of blocks `g..=g+l` into the final map.
    #[default]
    GlobalBlocks,
    /// Broadcast the CLS row of block `g` to every query and average that in.
    ClsDuplicate,
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" | "global-blocks" => Ok(Self::GlobalBlocks),
            "cls" | "cls-duplicate" => Ok(Self::ClsDuplicate),
            other => Err(Error::Config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Number of blocks after the emergence block to fuse (`l`).
    pub width: usize,
    /// Per-entry scale applied before taking the column product.
    pub sigma: f64,
    /// Log-space floor; a column is global when its score exceeds it.
    pub detect_threshold: f64,
    pub variant: FusionVariant,
    /// Forces the emergence block instead of detecting it.
    pub manual_g: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 1,
            sigma: 100.0,
            detect_threshold: underflow_floor(),
            variant: FusionVariant::GlobalBlocks,
            manual_g: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuppressionStart {
    #[default]
    Auto,
    Block(usize),
}

impl std::str::FromStr for SuppressionStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse()
            .map(Self::Block)
            .map_err(|_| Error::Config(format!("suppression start must be `auto` or a block index, got `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuppressionConfig {
    pub enabled: bool,
    pub start: SuppressionStart,
    /// Normalized entropy below which a block counts as collapsed.
    pub entropy_threshold: f64,
    /// Keep an unsuppressed stream for queries/keys and route the
    /// suppressed one into the value projection only.
    pub dual_stream: bool,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            start: SuppressionStart::Auto,
            entropy_threshold: 0.7,
            dual_stream: true,
        }
    }
}

impl SuppressionConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// The surgery parameters an encode actually used.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SurgeryPlan {
    pub g: Option<usize>,
    pub fused_blocks: Vec<usize>,
    pub s: Option<usize>,
    pub fusion_variant: Option<FusionVariant>,
    pub dual_stream: bool,
}

impl fmt::Display for SurgeryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.g {
            Some(g) => write!(f, "g={g}")?,
            None => write!(f, "g=-")?,
        }
        let blocks: Vec<String> = self.fused_blocks.iter().map(ToString::to_string).collect();
        write!(f, " fused=[{}]", blocks.join(","))?;
        if self.fusion_variant == Some(FusionVariant::ClsDuplicate) {
            write!(f, " (cls-duplicate)")?;
        }
        match self.s {
            Some(s) => write!(f, " s={s} dual={}", if self.dual_stream { "on" } else { "off" }),
            None => write!(f, " s=-"),
        }
    }
}

/// Detection result for one attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTokens {
    /// Attention column indices (1-based over patches; 0 is CLS) judged global.
    pub columns: Vec<usize>,
    /// Log-space column score for every patch column, `scores[c - 1]`.
    pub scores: Vec<f64>,
}

impl GlobalTokens {
    pub fn present(&self) -> bool {
        !self.columns.is_empty()
    }

    /// The global column with the highest score.
    pub fn strongest(&self) -> Option<usize> {
        self.columns.iter().copied().max_by(|&a, &b| {
            self.scores[a - 1]
                .total_cmp(&self.scores[b - 1])
                .then(b.cmp(&a))
        })
    }
}

fn square(a: &Tensor, what: &str) -> Result<usize> {
    let (r, c) = a.dims2(what)?;
    if r != c || r < 2 {
        return Err(Error::Dimension(format!("{what}: expected a square map over CLS + patches, got [{r}x{c}]")));
    }
    Ok(r)
}

/// Scores each patch column by `Σ_j ln(σ·A[j, c])` over patch queries `j`
/// and flags columns whose score clears the floor.
pub fn detect_global_tokens(a: &Tensor, cfg: &FusionConfig) -> Result<GlobalTokens> {
    if cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    let t = square(a, "global-token detection")?;
    let log_sigma = cfg.sigma.ln();
    let mut scores = vec![0.0f64; t - 1];
    for j in 1..t {
        let row = a.row(j);
        for (c, s) in scores.iter_mut().enumerate() {
            // ln(0) = -inf keeps a column with any zero entry out
            *s += log_sigma + f64::from(row[c + 1]).ln();
        }
    }
    let columns = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cfg.detect_threshold)
        .map(|(c, _)| c + 1)
        .collect();
    Ok(GlobalTokens { columns, scores })
}

/// First block whose query-key map contains a global token. `maps` holds
/// blocks `0..f` (the final block excluded).
pub fn find_emergence_block(maps: &[Tensor], cfg: &FusionConfig) -> Result<usize> {
    if let Some(g) = cfg.manual_g {
        if g >= maps.len() {
            return Err(Error::Surgery(format!(
                "manual emergence block {g} must precede the final block {}",
                maps.len()
            )));
        }
        return Ok(g);
    }
    for (i, map) in maps.iter().enumerate() {
        if detect_global_tokens(map, cfg)?.present() {
            return Ok(i);
        }
    }
    Err(Error::Surgery("no global tokens detected".into()))
}

/// Blocks fused for an emergence block `g` in a model whose final block is `f`.
pub fn fusion_blocks(g: usize, cfg: &FusionConfig, f: usize) -> Result<Vec<usize>> {
    match cfg.variant {
        FusionVariant::ClsDuplicate => Ok(vec![g]),
        FusionVariant::GlobalBlocks => {
            if g + cfg.width >= f {
                return Err(Error::Surgery(format!(
                    "fusion width l={} from g={g} reaches the final block {f} (need l < f - g)",
                    cfg.width
                )));
            }
            Ok((g..=g + cfg.width).collect())
        }
    }
}

/// Elementwise mean of the source maps and the final query-query map.
/// With no source maps the query-query map comes back unchanged.
pub fn fuse_attention(maps: &[&Tensor], aqq: &Tensor) -> Result<Tensor> {
    for m in maps {
        if m.shape() != aqq.shape() {
            return Err(Error::Dimension(format!(
                "fusion map shape {:?} differs from {:?}",
                m.shape(),
                aqq.shape()
            )));
        }
    }
    let count = (maps.len() + 1) as f64;
    let mut out = aqq.clone();
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        let sum: f64 = maps.iter().map(|m| f64::from(m.data()[idx])).sum::<f64>() + f64::from(*o);
        *o = (sum / count) as f32;
    }
    Ok(out)
}

/// Fuses a map whose every row is `cls_row` with the query-query map.
pub fn fuse_cls_duplicate(cls_row: &[f32], aqq: &Tensor) -> Result<Tensor> {
    let (r, c) = aqq.dims2("cls-duplicate fusion")?;
    if cls_row.len() != c {
        return Err(Error::Dimension(format!(
            "CLS row has {} entries, map has {c} columns",
            cls_row.len()
        )));
    }
    let dup = Tensor::new(vec![r, c], cls_row.repeat(r))?;
    fuse_attention(&[&dup], aqq)
}

/// Euclidean norm of each row (output channel) of `[D_out × D_in]`.
pub fn weight_norms(w: &Tensor) -> Result<Vec<f64>> {
    w.dims2("weight norms")?;
    Ok((0..w.rows())
        .map(|d| w.row(d).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Shannon entropy of the norms read as a distribution, divided by
/// `ln(D_out)` so uniform norms score 1.
pub fn norm_entropy(norms: &[f64]) -> Result<f64> {
    if norms.len() < 2 {
        return Err(Error::Domain("norm entropy needs at least two channels".into()));
    }
    if norms.iter().any(|&n| !n.is_finite() || n < 0.0) {
        return Err(Error::Domain("norms must be finite and non-negative".into()));
    }
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(Error::Domain("all norms are zero".into()));
    }
    let h: f64 = norms
        .iter()
        .filter(|&&n| n > 0.0)
        .map(|&n| {
            let p = n / total;
            -p * p.ln()
        })
        .sum();
    Ok(h / (norms.len() as f64).ln())
}

/// Normalized fc2 weight-norm entropy of every block, in block order.
pub fn block_entropies(bundle: &ModelBundle) -> Result<Vec<f64>> {
    (0..bundle.config().layers)
        .map(|i| norm_entropy(&weight_norms(bundle.block(i).fc2_w)?))
        .collect()
}

pub fn find_suppression_start(bundle: &ModelBundle, cfg: &SuppressionConfig) -> Result<usize> {
    let f = bundle.config().last_block();
    match cfg.start {
        SuppressionStart::Block(s) if s <= f => Ok(s),
        SuppressionStart::Block(s) => Err(Error::Surgery(format!(
            "suppression start {s} is past the final block {f}"
        ))),
        SuppressionStart::Auto => block_entropies(bundle)?
            .iter()
            .position(|&h| h < cfg.entropy_threshold)
            .ok_or_else(|| {
                Error::Surgery(format!(
                    "no entropy collapse detected (no block below {}); pass an explicit start",
                    cfg.entropy_threshold
                ))
            }),
    }
}

/// Rescales the highest-norm row to the mean norm of the other rows,
/// keeping its direction. Every other row is copied unchanged.
pub fn suppress_channel(w: &Tensor) -> Result<Tensor> {
    let norms = weight_norms(w)?;
    if norms.len() < 2 {
        return Err(Error::Domain("channel suppression needs at least two output channels".into()));
    }
    let (top, &top_norm) = norms
        .iter()
        .enumerate()
        .fold((0, &norms[0]), |best, (i, n)| if *n > *best.1 { (i, n) } else { best });
    if top_norm == 0.0 {
        return Err(Error::Domain("cannot suppress an all-zero weight matrix".into()));
    }
    let others: f64 = norms.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, n)| n).sum();
    let target = others / (norms.len() - 1) as f64;
    let factor = target / top_norm;
    let mut out = w.clone();
    for v in out.row_mut(top) {
        *v = (f64::from(*v) * factor) as f32;
    }
    Ok(out)
}

/// Suppressed fc2 weights for blocks `start..=f`.
pub fn suppressed_fc2(bundle: &ModelBundle, start: usize) -> Result<Vec<Tensor>> {
    (start..bundle.config().layers)
        .map(|i| suppress_channel(bundle.block(i).fc2_w))
        .collect()
}

/// Result of [`apply_cs`]: the edited bundle and the start block, if any.
#[derive(Debug, Clone)]
pub struct SuppressedBundle {
    pub bundle: ModelBundle,
    pub start: Option<usize>,
}

/// Returns a new bundle whose fc2 weights for blocks `s..=f` are suppressed.
///
/// The encoder does not run this bundle directly when dual-stream is on: the
/// original weights keep producing queries, keys and attention maps, and the
/// suppressed weights only shape the stream feeding the value projection.
pub fn apply_cs(bundle: &ModelBundle, cfg: &SuppressionConfig) -> Result<SuppressedBundle> {
    if !cfg.enabled {
        return Ok(SuppressedBundle {
            bundle: bundle.clone(),
            start: None,
        });
    }
    let s = find_suppression_start(bundle, cfg)?;
    let mut tensors = bundle.tensors().clone();
    for (i, w) in (s..).zip(suppressed_fc2(bundle, s)?) {
        tensors.insert(format!("blocks.{i}.mlp.fc2.weight"), w);
    }
    Ok(SuppressedBundle {
        bundle: ModelBundle::new(bundle.config().clone(), tensors)?,
        start: Some(s),
    })
}
