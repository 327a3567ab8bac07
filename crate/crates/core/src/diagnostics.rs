//! Analyses of a model's internals: fc2 weight-norm entropy per block,
//! global tokens and their alignment with CLS attention, value-embedding
//! similarity inside and across regions, and whether global tokens classify
//! an image the way CLS does.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{AttentionRecord, EncodeMode, Encoder};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::netpbm::{GrayImage, RgbImage};
use crate::pipeline::TextBank;
use crate::surgery::{block_entropies, detect_global_tokens, find_emergence_block, FusionConfig};
use crate::tensor::{bilinear_resize, cosine, linear, Tensor};

/// `(block, normalized fc2 norm entropy)` in block order.
pub fn entropy_profile(bundle: &ModelBundle) -> Result<Vec<(usize, f64)>> {
    Ok(block_entropies(bundle)?.into_iter().enumerate().collect())
}

/// Cosine between the attention row of `token_index` and the CLS row in
/// the map of `block`.
pub fn attention_alignment(record: &AttentionRecord, block: usize, token_index: usize) -> Result<f64> {
    let map = record
        .maps
        .get(block)
        .ok_or_else(|| Error::Domain(format!("no attention recorded for block {block}")))?;
    if token_index == 0 || token_index >= map.rows() {
        return Err(Error::Domain(format!(
            "token {token_index} is not a patch token (1..{})",
            map.rows()
        )));
    }
    Ok(cosine(map.row(token_index), map.row(0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGlobalTokens {
    pub block: usize,
    pub columns: Vec<usize>,
    /// Mean alignment of the global rows with the CLS row.
    pub cls_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTokenReport {
    /// Emergence block, if any block before the last has global tokens.
    pub g: Option<usize>,
    pub blocks: Vec<BlockGlobalTokens>,
}

pub fn global_token_report(record: &AttentionRecord, cfg: &FusionConfig) -> Result<GlobalTokenReport> {
    let mut blocks = Vec::with_capacity(record.maps.len());
    for (block, map) in record.maps.iter().enumerate() {
        let det = detect_global_tokens(map, cfg)?;
        let cls_alignment = if det.present() {
            let total: f64 = det
                .columns
                .iter()
                .map(|&c| attention_alignment(record, block, c))
                .sum::<Result<f64>>()?;
            Some(total / det.columns.len() as f64)
        } else {
            None
        };
        blocks.push(BlockGlobalTokens {
            block,
            columns: det.columns,
            cls_alignment,
        });
    }
    let last = record.maps.len().saturating_sub(1);
    let g = find_emergence_block(&record.maps[..last], cfg).ok();
    Ok(GlobalTokenReport { g, blocks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityStatistic {
    /// Mean cosine over all unordered patch pairs.
    #[default]
    Pairwise,
    /// Mean cosine between each patch and region centroids.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueSpace {
    /// Head-concatenated value embeddings.
    #[default]
    PreProj,
    /// After the final block's output projection.
    PostProj,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueSimilarity {
    pub in_in: f64,
    pub in_out: f64,
}

/// Head-concatenated patch value vectors `[n × width]` from a record,
/// optionally pushed through the final output projection.
pub fn patch_value_vectors(record: &AttentionRecord, bundle: &ModelBundle, space: ValueSpace) -> Result<Tensor> {
    let (heads, tokens, dh) = match record.values.shape() {
        &[h, t, d] => (h, t, d),
        s => return Err(Error::Shape(format!("values must be [heads x tokens x dim], got {s:?}"))),
    };
    let v = record.values.data();
    let mut data = Vec::with_capacity(tokens * heads * dh);
    for t in 0..tokens {
        for h in 0..heads {
            data.extend_from_slice(&v[(h * tokens + t) * dh..][..dh]);
        }
    }
    let all = Tensor::new(vec![tokens, heads * dh], data)?;
    let all = match space {
        ValueSpace::PreProj => all,
        ValueSpace::PostProj => {
            let w = bundle.block(bundle.config().last_block());
            linear(&all, w.proj_w, Some(w.proj_b))?
        }
    };
    Ok(all.select_rows(1..tokens))
}

/// In-region vs cross-region cosine similarity of patch vectors.
/// `regions[i]` is the region of patch `i`, `None` to skip it.
pub fn value_similarity_report(
    vectors: &Tensor,
    regions: &[Option<u32>],
    stat: SimilarityStatistic,
) -> Result<ValueSimilarity> {
    if vectors.rows() != regions.len() {
        return Err(Error::Shape(format!(
            "{} vectors but {} region labels",
            vectors.rows(),
            regions.len()
        )));
    }
    let labeled: Vec<(usize, u32)> = regions
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map(|r| (i, r)))
        .collect();
    let mut ids: Vec<u32> = labeled.iter().map(|&(_, r)| r).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Domain("cross-region similarity needs at least two regions".into()));
    }
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0u64, 0.0, 0u64);
    match stat {
        SimilarityStatistic::Pairwise => {
            for (a, &(i, ri)) in labeled.iter().enumerate() {
                for &(j, rj) in &labeled[a + 1..] {
                    let c = cosine(vectors.row(i), vectors.row(j));
                    if ri == rj {
                        in_sum += c;
                        in_n += 1;
                    } else {
                        out_sum += c;
                        out_n += 1;
                    }
                }
            }
        }
        SimilarityStatistic::Centroid => {
            let d = vectors.cols();
            let centroids: Vec<Vec<f32>> = ids
                .iter()
                .map(|&id| {
                    let members: Vec<usize> = labeled.iter().filter(|&&(_, r)| r == id).map(|&(i, _)| i).collect();
                    (0..d)
                        .map(|k| {
                            (members.iter().map(|&i| f64::from(vectors.row(i)[k])).sum::<f64>() / members.len() as f64)
                                as f32
                        })
                        .collect()
                })
                .collect();
            for &(i, ri) in &labeled {
                for (id, centroid) in ids.iter().zip(&centroids) {
                    let c = cosine(vectors.row(i), centroid);
                    if *id == ri {
                        in_sum += c;
                        in_n += 1;
                    } else {
                        out_sum += c;
                        out_n += 1;
                    }
                }
            }
        }
    }
    if in_n == 0 {
        return Err(Error::Domain("no region has two or more patches".into()));
    }
    Ok(ValueSimilarity {
        in_in: in_sum / in_n as f64,
        in_out: out_sum / out_n as f64,
    })
}

/// Resizes a whole image to the model's square input and normalizes it.
pub fn model_input(image: &RgbImage, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    let hwc = bilinear_resize(&image.to_hwc(), s, s)?;
    let mut out = vec![0.0f32; 3 * s * s];
    for (p, px) in hwc.data().chunks(3).enumerate() {
        for c in 0..3 {
            out[c * s * s + p] = (f64::from(px[c] - cfg.mean[c]) / f64::from(cfg.std[c])) as f32;
        }
    }
    Tensor::new(vec![3, s, s], out)
}

/// Label at each patch center of the resized input, `None` for ignore.
pub fn patch_regions(label: &GrayImage, cfg: &ModelConfig, ignore_index: u8) -> Vec<Option<u32>> {
    let (grid, s) = (cfg.grid(), cfg.image_size as f64);
    let at = |g: usize, len: usize| {
        let center = (g as f64 + 0.5) * cfg.patch as f64;
        ((center * len as f64 / s) as usize).min(len - 1)
    };
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let v = label.get(at(gx, label.width), at(gy, label.height));
            out.push((v != ignore_index).then_some(u32::from(v)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenChoice {
    Global,
    Random,
}

impl std::str::FromStr for TokenChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("token choice must be global or random, got `{other}`"))),
        }
    }
}

/// Fraction of images whose chosen patch token classifies like CLS.
///
/// `images` are model-ready `[3 × S × S]` tensors. The global token is the
/// strongest global column of the emergence block.
pub fn token_cls_agreement(
    bundle: &ModelBundle,
    bank: &TextBank,
    images: &[Tensor],
    choice: TokenChoice,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Domain("agreement needs at least one image".into()));
    }
    let encoder = Encoder::new(bundle, &EncodeMode::vanilla())?;
    let fusion = FusionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bundle.config().num_patches();
    let f = bundle.config().last_block();
    let mut agree = 0usize;
    for img in images {
        let out = encoder.encode(img)?;
        let cls_class = bank.classify(&out.cls_feature)?;
        let patch = match choice {
            TokenChoice::Random => rng.gen_range(0..n),
            TokenChoice::Global => {
                let g = find_emergence_block(&out.record.maps[..f], &fusion)?;
                let det = detect_global_tokens(&out.record.maps[g], &fusion)?;
                det.strongest().expect("emergence block has a global token") - 1
            }
        };
        if bank.classify(out.patch_features.row(patch))? == cls_class {
            agree += 1;
        }
    }
    Ok(agree as f64 / images.len() as f64)
}

/// `header\nkey,value` lines.
pub fn to_csv<K: std::fmt::Display, V: std::fmt::Display>(header: &str, rows: &[(K, V)]) -> String {
    let mut s = format!("{header}\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

pub fn global_tokens_csv(report: &GlobalTokenReport) -> String {
    let mut s = String::from("block,global,columns,cls_alignment\n");
    for b in &report.blocks {
        let cols: Vec<String> = b.columns.iter().map(ToString::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{}",
            b.block,
            u8::from(!b.columns.is_empty()),
            cols.join(";"),
            b.cls_alignment.map(|a| format!("{a:.6}")).unwrap_or_default()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic;

    fn record_with(maps: Vec<Tensor>, values: Tensor) -> AttentionRecord {
        AttentionRecord {
            final_map: maps.last().unwrap().clone(),
            maps,
            values,
        }
    }

    #[test]
    fn entropy_profile_of_random_and_planted() {
        let cfg = ModelConfig::new(4, 16, 2, 4, 8, 4);
        let bundle = generate_synthetic(&cfg, 1).unwrap();
        let prof = entropy_profile(&bundle).unwrap();
        assert_eq!(prof.len(), 4);
        assert!(prof.iter().all(|&(_, h)| h > 0.9 && h <= 1.0));

        let name = "blocks.2.mlp.fc2.weight";
        let mut w = bundle.get(name).clone();
        w.row_mut(3).iter_mut().for_each(|v| *v *= 50.0);
        let planted = bundle.with_tensor(name, w).unwrap();
        let prof = entropy_profile(&planted).unwrap();
        assert!(prof[2].1 < prof[1].1 && prof[2].1 < prof[3].1);
    }

    #[test]
    fn alignment_examples() {
        let map = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        let rec = record_with(vec![map], Tensor::zeros(vec![1, 4, 1]));
        assert!((attention_alignment(&rec, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(attention_alignment(&rec, 0, 2).unwrap(), 0.0);
        assert!(attention_alignment(&rec, 0, 0).is_err());
        assert!(attention_alignment(&rec, 0, 4).is_err());
        assert!(attention_alignment(&rec, 1, 1).is_err());
    }

    #[test]
    fn global_column_aligns_better_than_other_tokens() {
        // CLS and patch 3 both look mostly at column 3; patch 1 looks at itself.
        let t = 6;
        let mut rows = vec![vec![0.02f32; t]; t];
        for (r, row) in rows.iter_mut().enumerate() {
            row[3] = 0.9;
            if r == 1 {
                row[3] = 0.3;
                row[1] = 0.62;
            }
        }
        let map = Tensor::from_rows(&rows).unwrap();
        let rec = record_with(vec![map.clone(), map], Tensor::zeros(vec![1, t, 1]));
        let global = attention_alignment(&rec, 0, 3).unwrap();
        let other = attention_alignment(&rec, 0, 1).unwrap();
        assert!(global > other);
        let report = global_token_report(&rec, &FusionConfig::default()).unwrap();
        assert_eq!(report.g, Some(0));
        assert!(report.blocks[0].columns.contains(&3));
    }

    #[test]
    fn similarity_examples() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let regions = [Some(0), Some(0), Some(1), Some(1)];
        for stat in [SimilarityStatistic::Pairwise, SimilarityStatistic::Centroid] {
            let r = value_similarity_report(&v, &regions, stat).unwrap();
            assert!((r.in_in - 1.0).abs() < 1e-12 && r.in_out.abs() < 1e-12);
            let swapped = [Some(7), Some(7), Some(2), Some(2)];
            assert_eq!(value_similarity_report(&v, &swapped, stat).unwrap(), r);
        }
        let one = [Some(0); 4];
        assert!(matches!(
            value_similarity_report(&v, &one, SimilarityStatistic::Pairwise),
            Err(Error::Domain(_))
        ));
        let singletons = [Some(0), Some(1), None, None];
        assert!(value_similarity_report(&v, &singletons, SimilarityStatistic::Pairwise).is_err());
    }

    #[test]
    fn value_vectors_layout() {
        let bundle = generate_synthetic(&ModelConfig::tiny(), 0).unwrap();
        // heads=2, tokens=5, dh=4; value = 100*h + 10*t + d
        let data: Vec<f32> = (0..2).flat_map(|h| (0..5).flat_map(move |t| (0..4).map(move |d| (100 * h + 10 * t + d) as f32))).collect();
        let rec = record_with(vec![Tensor::identity(5)], Tensor::new(vec![2, 5, 4], data).unwrap());
        let v = patch_value_vectors(&rec, &bundle, ValueSpace::PreProj).unwrap();
        assert_eq!(v.shape(), &[4, 8]);
        assert_eq!(v.row(0), &[10.0, 11.0, 12.0, 13.0, 110.0, 111.0, 112.0, 113.0]);
        let p = patch_value_vectors(&rec, &bundle, ValueSpace::PostProj).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
    }

    #[test]
    fn patch_regions_sample_centers() {
        let cfg = ModelConfig::tiny(); // 2x2 grid over 8 px
        let label = GrayImage::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 255, 255, 2, 2, 255, 255, 2, 2]).unwrap();
        assert_eq!(patch_regions(&label, &cfg, 255), vec![Some(0), Some(1), None, Some(2)]);
    }

    #[test]
    fn agreement_trivial_cases() {
        let cfg = ModelConfig::tiny();
        let bundle = generate_synthetic(&cfg, 0).unwrap();
        let bank = TextBank::new(Tensor::full(vec![1, 4], 1.0), vec!["only".into()], "t").unwrap();
        let img = Tensor::zeros(vec![3, 8, 8]);
        for choice in [TokenChoice::Global, TokenChoice::Random] {
            assert_eq!(token_cls_agreement(&bundle, &bank, std::slice::from_ref(&img), choice, 0).unwrap(), 1.0);
        }
        assert!(token_cls_agreement(&bundle, &bank, &[], TokenChoice::Random, 0).is_err());
    }

    #[test]
    fn random_agreement_is_seeded() {
        let cfg = ModelConfig::tiny();
        let bundle = generate_synthetic(&cfg, 4).unwrap();
        let bank = TextBank::new(
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]).unwrap(),
            vec!["a".into(), "b".into(), "c".into()],
            "t",
        )
        .unwrap();
        let images: Vec<Tensor> = (0..6)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
            })
            .collect();
        let a = token_cls_agreement(&bundle, &bank, &images, TokenChoice::Random, 11).unwrap();
        let b = token_cls_agreement(&bundle, &bank, &images, TokenChoice::Random, 11).unwrap();
        assert_eq!(a, b);
    }
}
