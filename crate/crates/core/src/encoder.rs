//! ViT image encoder with per-block attention capture and a rewritable
//! final block.
//!
//! Three variants share blocks `0..f`:
//! - `Vanilla` runs the final block unchanged.
//! - `ClearClip` replaces the final block with `Proj(A_qq · v)`: query-query
//!   attention, no residual, no FFN.
//! - `GClip` does the same with a fused attention map and, optionally,
//!   value embeddings taken from a channel-suppressed stream.

use crate::error::{Error, Result};
use crate::model::{BlockWeights, ModelBundle, ModelConfig};
use crate::surgery::{
    find_emergence_block, find_suppression_start, fuse_attention, fuse_cls_duplicate, fusion_blocks,
    suppressed_fc2, FusionConfig, FusionVariant, SuppressionConfig, SurgeryPlan,
};
use crate::tensor::{activation, layer_norm, linear, matmul, matmul_transposed, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    ClearClip,
    GClip,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "clearclip" => Ok(Self::ClearClip),
            "gclip" => Ok(Self::GClip),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// How to run the final block.
///
/// `fusion` only applies to `GClip`; `None` there fuses nothing, leaving the
/// query-query map as is. `suppression` applies to every variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeMode {
    pub variant: Variant,
    pub fusion: Option<FusionConfig>,
    pub suppression: SuppressionConfig,
}

impl EncodeMode {
    pub fn vanilla() -> Self {
        Self {
            variant: Variant::Vanilla,
            fusion: None,
            suppression: SuppressionConfig::disabled(),
        }
    }

    pub fn clearclip() -> Self {
        Self {
            variant: Variant::ClearClip,
            ..Self::vanilla()
        }
    }

    /// Fusion width 1 and automatic channel suppression.
    pub fn gclip() -> Self {
        Self {
            variant: Variant::GClip,
            fusion: Some(FusionConfig::default()),
            suppression: SuppressionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    QueryKey,
    QueryQuery,
}

/// Attention captured during one encode.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Head-averaged post-softmax map of every block, `[(1+n) × (1+n)]`.
    /// The final entry is query-query for the rewritten variants.
    pub maps: Vec<Tensor>,
    /// The map actually applied to the values in the final block.
    pub final_map: Tensor,
    /// Final-block value embeddings, `[heads × (1+n) × head_dim]`.
    pub values: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `[n × embed_dim]`, patch tokens in row-major grid order.
    pub patch_features: Tensor,
    pub cls_feature: Vec<f32>,
    pub record: AttentionRecord,
    pub surgery: SurgeryPlan,
}

/// Token output of one block plus what it captured.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub tokens: Tensor,
    pub attention: Option<Tensor>,
    pub values: Option<Tensor>,
}

/// Splits `[t × width]` into `heads` contiguous `[t × head_dim]` matrices.
fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (t, w) = x.dims2("split heads")?;
    let dh = w / heads;
    (0..heads)
        .map(|h| {
            let mut data = Vec::with_capacity(t * dh);
            for r in 0..t {
                data.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            Tensor::new(vec![t, dh], data)
        })
        .collect()
}

fn merge_heads(parts: &[Tensor]) -> Result<Tensor> {
    let (t, dh) = parts[0].dims2("merge heads")?;
    let mut data = Vec::with_capacity(t * dh * parts.len());
    for r in 0..t {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![t, dh * parts.len()], data)
}

fn stack_heads(parts: &[Tensor]) -> Result<Tensor> {
    let (t, dh) = parts[0].dims2("stack heads")?;
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![parts.len(), t, dh], data)
}

/// Post-softmax attention of each head. `QueryQuery` scores `q·qᵀ`.
fn head_attention(q: &[Tensor], k: &[Tensor], kind: AttnKind) -> Result<Vec<Tensor>> {
    q.iter()
        .zip(k)
        .map(|(qh, kh)| {
            let scale = 1.0 / (qh.cols() as f64).sqrt();
            let keys = match kind {
                AttnKind::QueryKey => kh,
                AttnKind::QueryQuery => qh,
            };
            let mut s = matmul_transposed(qh, keys)?;
            let c = s.cols();
            for row in s.data_mut().chunks_mut(c) {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) * scale) as f32;
                }
                softmax_in_place(row);
            }
            Ok(s)
        })
        .collect()
}

fn head_average(maps: &[Tensor]) -> Tensor {
    let mut out = maps[0].clone();
    let inv = 1.0 / maps.len() as f64;
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = (maps.iter().map(|m| f64::from(m.data()[i])).sum::<f64>() * inv) as f32;
    }
    out
}

fn mlp(x: &Tensor, w: &BlockWeights<'_>, cfg: &ModelConfig) -> Result<Tensor> {
    let h = layer_norm(x, w.ln2_w, w.ln2_b, cfg.ln_eps)?;
    let h = activation(&linear(&h, w.fc1_w, Some(w.fc1_b))?, cfg.activation);
    linear(&h, w.fc2_w, Some(w.fc2_b))
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = (f64::from(*o) + f64::from(v)) as f32;
    }
    out
}

fn values_of(x: &Tensor, w: &BlockWeights<'_>, cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    let h = layer_norm(x, w.ln1_w, w.ln1_b, cfg.ln_eps)?;
    split_heads(&linear(&h, w.v_w, Some(w.v_b))?, cfg.heads)
}

/// `Proj(concat_h(A_h · v_h))`.
fn attend(maps: &[&Tensor], v: &[Tensor], w: &BlockWeights<'_>) -> Result<Tensor> {
    let parts: Vec<Tensor> = maps.iter().zip(v).map(|(a, vh)| matmul(a, vh)).collect::<Result<_>>()?;
    linear(&merge_heads(&parts)?, w.proj_w, Some(w.proj_b))
}

/// Queries, keys and per-head attention of the stream feeding a block.
struct BlockAttention {
    heads: Vec<Tensor>,
    values: Vec<Tensor>,
}

fn block_attention(x: &Tensor, w: &BlockWeights<'_>, cfg: &ModelConfig, kind: AttnKind) -> Result<BlockAttention> {
    let h = layer_norm(x, w.ln1_w, w.ln1_b, cfg.ln_eps)?;
    let q = split_heads(&linear(&h, w.q_w, Some(w.q_b))?, cfg.heads)?;
    let k = match kind {
        AttnKind::QueryKey => split_heads(&linear(&h, w.k_w, Some(w.k_b))?, cfg.heads)?,
        AttnKind::QueryQuery => Vec::new(),
    };
    let v = split_heads(&linear(&h, w.v_w, Some(w.v_b))?, cfg.heads)?;
    let heads = match kind {
        AttnKind::QueryKey => head_attention(&q, &k, kind)?,
        AttnKind::QueryQuery => head_attention(&q, &q, kind)?,
    };
    Ok(BlockAttention { heads, values: v })
}

/// One pre-norm block: `x + MHSA(ln1 x)`, then `+ FFN(ln2 ·)`.
pub fn block_forward(
    tokens: &Tensor,
    block_index: usize,
    bundle: &ModelBundle,
    attn_kind: AttnKind,
    capture: bool,
) -> Result<BlockOutput> {
    let cfg = bundle.config();
    if block_index >= cfg.layers {
        return Err(Error::Shape(format!("block {block_index} out of range for {} layers", cfg.layers)));
    }
    check_tokens(tokens, cfg)?;
    let w = bundle.block(block_index);
    let att = block_attention(tokens, &w, cfg, attn_kind)?;
    let refs: Vec<&Tensor> = att.heads.iter().collect();
    let x = add(tokens, &attend(&refs, &att.values, &w)?);
    let x = add(&x, &mlp(&x, &w, cfg)?);
    Ok(BlockOutput {
        tokens: x,
        attention: capture.then(|| head_average(&att.heads)),
        values: if capture { Some(stack_heads(&att.values)?) } else { None },
    })
}

fn check_tokens(tokens: &Tensor, cfg: &ModelConfig) -> Result<()> {
    match tokens.shape() {
        &[t, w] if w == cfg.width && t >= 1 => Ok(()),
        s => Err(Error::Shape(format!("tokens must be [t x {}], got {s:?}", cfg.width))),
    }
}

/// Patchify, prepend CLS, add positions, apply the pre-norm.
pub fn patch_embed(image: &Tensor, bundle: &ModelBundle) -> Result<Tensor> {
    let cfg = bundle.config();
    let size = cfg.image_size;
    if image.shape() != [3, size, size] {
        return Err(Error::Shape(format!(
            "image must be [3 x {size} x {size}], got {:?}",
            image.shape()
        )));
    }
    let (p, grid) = (cfg.patch, cfg.grid());
    let px = image.data();
    let mut patches = Vec::with_capacity(cfg.num_patches() * 3 * p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..3 {
                for dy in 0..p {
                    let base = (c * size + gy * p + dy) * size + gx * p;
                    patches.extend_from_slice(&px[base..base + p]);
                }
            }
        }
    }
    let patches = Tensor::new(vec![cfg.num_patches(), 3 * p * p], patches)?;
    let weight = bundle.get("patch_embed.weight").clone().reshape(vec![cfg.width, 3 * p * p])?;
    let embedded = linear(&patches, &weight, None)?;

    let mut tokens = Vec::with_capacity(cfg.num_tokens() * cfg.width);
    tokens.extend_from_slice(bundle.get("cls_token").data());
    tokens.extend_from_slice(embedded.data());
    let tokens = add(&Tensor::new(vec![cfg.num_tokens(), cfg.width], tokens)?, bundle.get("pos_embed"));
    layer_norm(&tokens, bundle.get("ln_pre.weight"), bundle.get("ln_pre.bias"), cfg.ln_eps)
}

/// Resolved channel suppression: fc2 weights for blocks `start..=f`.
#[derive(Debug, Clone)]
struct Suppression {
    start: usize,
    fc2: Vec<Tensor>,
    dual_stream: bool,
}

/// An encoder bound to one bundle and mode. Surgery that depends only on
/// weights (the suppression start and suppressed fc2 matrices) is resolved
/// once here; attention-dependent surgery is resolved per image.
#[derive(Debug, Clone)]
pub struct Encoder<'a> {
    bundle: &'a ModelBundle,
    mode: EncodeMode,
    suppression: Option<Suppression>,
}

impl<'a> Encoder<'a> {
    pub fn new(bundle: &'a ModelBundle, mode: &EncodeMode) -> Result<Self> {
        if let Some(fusion) = &mode.fusion {
            if fusion.sigma.is_nan() || fusion.sigma <= 0.0 {
                return Err(Error::Config(format!("sigma must be positive, got {}", fusion.sigma)));
            }
        }
        let suppression = if mode.suppression.enabled {
            let start = find_suppression_start(bundle, &mode.suppression)?;
            Some(Suppression {
                start,
                fc2: suppressed_fc2(bundle, start)?,
                dual_stream: mode.suppression.dual_stream,
            })
        } else {
            None
        };
        Ok(Self {
            bundle,
            mode: mode.clone(),
            suppression,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        self.bundle
    }

    pub fn mode(&self) -> &EncodeMode {
        &self.mode
    }

    pub fn suppression_start(&self) -> Option<usize> {
        self.suppression.as_ref().map(|s| s.start)
    }

    fn suppressed_block(&self, i: usize) -> BlockWeights<'_> {
        let mut w = self.bundle.block(i);
        if let Some(s) = &self.suppression {
            if i >= s.start {
                w.fc2_w = &s.fc2[i - s.start];
            }
        }
        w
    }

    pub fn encode(&self, image: &Tensor) -> Result<EncodeOutput> {
        let cfg = self.bundle.config();
        let f = cfg.last_block();
        let mut main = patch_embed(image, self.bundle)?;
        // Suppressed stream feeding only value projections (dual-stream CS).
        let mut value_stream: Option<Tensor> = None;
        let mut maps = Vec::with_capacity(cfg.layers);
        let rewritten = self.mode.variant != Variant::Vanilla;
        let dual = self.suppression.as_ref().filter(|s| s.dual_stream).map(|s| s.start);
        let single_suppressed = self.suppression.as_ref().filter(|s| !s.dual_stream).map(|s| s.start);

        let body = if rewritten { f } else { cfg.layers };
        let mut last_values = None;
        let mut last_heads = None;
        for i in 0..body {
            if dual == Some(i) {
                value_stream = Some(main.clone());
            }
            let orig = self.bundle.block(i);
            let w_main = if single_suppressed.is_some_and(|s| i >= s) {
                self.suppressed_block(i)
            } else {
                orig
            };
            let att = block_attention(&main, &w_main, cfg, AttnKind::QueryKey)?;
            let refs: Vec<&Tensor> = att.heads.iter().collect();
            let next_vs = match &value_stream {
                Some(vs) => {
                    let w_sup = self.suppressed_block(i);
                    let v = values_of(vs, &w_sup, cfg)?;
                    let x = add(vs, &attend(&refs, &v, &w_sup)?);
                    let x = add(&x, &mlp(&x, &w_sup, cfg)?);
                    if i == f {
                        last_values = Some(v);
                    }
                    Some(x)
                }
                None => None,
            };
            let x = add(&main, &attend(&refs, &att.values, &w_main)?);
            main = add(&x, &mlp(&x, &w_main, cfg)?);
            maps.push(head_average(&att.heads));
            if i == f {
                last_heads = Some(att.heads);
                last_values.get_or_insert(att.values);
            }
            value_stream = next_vs;
        }

        let mut plan = SurgeryPlan {
            s: self.suppression_start(),
            dual_stream: dual.is_some(),
            ..SurgeryPlan::default()
        };

        let (tokens, final_map, values) = if rewritten {
            if dual == Some(f) {
                value_stream = Some(main.clone());
            }
            let w_f = self.bundle.block(f);
            let att = block_attention(&main, &w_f, cfg, AttnKind::QueryQuery)?;
            let aqq = head_average(&att.heads);
            let values = match &value_stream {
                Some(vs) => values_of(vs, &w_f, cfg)?,
                None => att.values,
            };
            let final_map = match (&self.mode.variant, &self.mode.fusion) {
                (Variant::GClip, Some(fusion)) => {
                    let g = find_emergence_block(&maps, fusion)?;
                    let blocks = fusion_blocks(g, fusion, f)?;
                    plan.g = Some(g);
                    plan.fusion_variant = Some(fusion.variant);
                    let fused = match fusion.variant {
                        FusionVariant::GlobalBlocks => {
                            let sources: Vec<&Tensor> = blocks.iter().map(|&b| &maps[b]).collect();
                            fuse_attention(&sources, &aqq)?
                        }
                        FusionVariant::ClsDuplicate => fuse_cls_duplicate(maps[g].row(0), &aqq)?,
                    };
                    plan.fused_blocks = blocks;
                    fused
                }
                (Variant::GClip, None) => fuse_attention(&[], &aqq)?,
                _ => aqq.clone(),
            };
            let shared = vec![&final_map; cfg.heads];
            let z = attend(&shared, &values, &w_f)?;
            maps.push(aqq);
            (z, final_map, values)
        } else {
            let tokens = value_stream.unwrap_or(main);
            let heads = last_heads.expect("final block ran");
            let final_map = head_average(&heads);
            (tokens, final_map, last_values.expect("final block ran"))
        };

        let normed = layer_norm(&tokens, self.bundle.get("ln_post.weight"), self.bundle.get("ln_post.bias"), cfg.ln_eps)?;
        let projected = matmul(&normed, self.bundle.get("visual_proj"))?;
        let cls_feature = projected.row(0).to_vec();
        let patch_features = projected.select_rows(1..cfg.num_tokens());
        Ok(EncodeOutput {
            patch_features,
            cls_feature,
            record: AttentionRecord {
                maps,
                final_map,
                values: stack_heads(&values)?,
            },
            surgery: plan,
        })
    }
}

/// One-shot encode; prefer [`Encoder`] when encoding many images.
pub fn encode(image: &Tensor, bundle: &ModelBundle, mode: &EncodeMode) -> Result<EncodeOutput> {
    Encoder::new(bundle, mode)?.encode(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic;
    use crate::surgery::SuppressionStart;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * cfg.image_size * cfg.image_size;
        Tensor::new(vec![3, cfg.image_size, cfg.image_size], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn token_count_and_size_check() {
        let bundle = generate_synthetic(&ModelConfig::tiny(), 0).unwrap();
        let t = patch_embed(&image(bundle.config(), 1), &bundle).unwrap();
        assert_eq!(t.shape(), &[5, 8]);
        let wrong = Tensor::zeros(vec![3, 12, 12]);
        assert!(matches!(patch_embed(&wrong, &bundle), Err(Error::Shape(_))));
    }

    #[test]
    fn query_query_scores_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = matmul_transposed(&q, &q).unwrap();
        let st = s.transpose().unwrap();
        assert!(s.bit_eq(&st));
    }

    #[test]
    fn captured_rows_are_stochastic() {
        let bundle = generate_synthetic(&ModelConfig::new(3, 8, 2, 2, 8, 4), 5).unwrap();
        let img = image(bundle.config(), 2);
        let modes = [
            EncodeMode::vanilla(),
            EncodeMode::clearclip(),
            EncodeMode {
                suppression: SuppressionConfig {
                    start: SuppressionStart::Block(0),
                    ..Default::default()
                },
                ..EncodeMode::gclip()
            },
        ];
        for mode in modes {
            let out = encode(&img, &bundle, &mode).unwrap();
            assert_eq!(out.record.maps.len(), 3);
            for m in out.record.maps.iter().chain([&out.record.final_map]) {
                for r in 0..m.rows() {
                    let s: f64 = m.row(r).iter().map(|&v| f64::from(v)).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
            assert_eq!(out.patch_features.shape(), &[16, 4]);
            assert_eq!(out.record.values.shape(), &[2, 17, 4]);
            assert!(out.patch_features.is_finite());
        }
    }

    #[test]
    fn block_forward_matches_encoder_body() {
        let bundle = generate_synthetic(&ModelConfig::tiny(), 3).unwrap();
        let img = image(bundle.config(), 4);
        let x0 = patch_embed(&img, &bundle).unwrap();
        let b0 = block_forward(&x0, 0, &bundle, AttnKind::QueryKey, true).unwrap();
        let b1 = block_forward(&b0.tokens, 1, &bundle, AttnKind::QueryKey, true).unwrap();
        let out = encode(&img, &bundle, &EncodeMode::vanilla()).unwrap();
        assert!(out.record.maps[0].bit_eq(b0.attention.as_ref().unwrap()));
        assert!(out.record.maps[1].bit_eq(b1.attention.as_ref().unwrap()));
        assert!(out.record.values.bit_eq(b1.values.as_ref().unwrap()));
        assert!(block_forward(&x0, 2, &bundle, AttnKind::QueryKey, false).is_err());
    }

    #[test]
    fn gclip_without_tokens_fails() {
        // 14x14 grid of near-uniform attention: nothing survives the floor.
        let cfg = ModelConfig::new(3, 8, 2, 2, 28, 4);
        let bundle = generate_synthetic(&cfg, 0).unwrap();
        let mode = EncodeMode {
            suppression: SuppressionConfig::disabled(),
            ..EncodeMode::gclip()
        };
        let err = encode(&image(&cfg, 0), &bundle, &mode).unwrap_err();
        assert!(err.to_string().contains("no global tokens detected"), "{err}");
    }
}
