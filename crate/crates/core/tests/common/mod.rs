//! Shared fixtures and an independent reference forward pass.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vit_surgeon::gtf;
use vit_surgeon::model::{ModelBundle, ModelConfig};
use vit_surgeon::netpbm::{self, GrayImage, RgbImage};
use vit_surgeon::pipeline::TEXT_EMBEDDINGS;
use vit_surgeon::Tensor;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// `x · wᵀ + b` with `w` stored `[out × in]`.
fn dense(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b)
                .map(|(wr, bias)| row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>() + bias)
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn gelu_quick(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

pub struct Reference {
    /// `[(1+n) × embed]`, CLS first.
    pub tokens: Mat,
    /// Head-averaged attention of each block.
    pub maps: Vec<Mat>,
}

/// Straightforward f64 ViT forward. `qq_last` switches the final block to
/// query-query attention with no residual and no MLP.
pub fn reference_forward(bundle: &ModelBundle, image: &Tensor, qq_last: bool) -> Reference {
    let cfg = bundle.config();
    let t = |name: &str| bundle.get(name);
    let (w, p, s, heads) = (cfg.width, cfg.patch, cfg.image_size, cfg.heads);
    let grid = s / p;
    let dh = w / heads;
    let eps = f64::from(cfg.ln_eps);
    let img = vecf(image);
    let pe = vecf(t("patch_embed.weight"));
    let cls = vecf(t("cls_token"));
    let pos = mat(t("pos_embed"));

    let mut x: Mat = vec![cls];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut tok = vec![0.0; w];
            for (o, out) in tok.iter_mut().enumerate() {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let pix = img[(c * s + gy * p + dy) * s + gx * p + dx];
                            *out += pe[((o * 3 + c) * p + dy) * p + dx] * pix;
                        }
                    }
                }
            }
            x.push(tok);
        }
    }
    for (row, pr) in x.iter_mut().zip(&pos) {
        for (a, b) in row.iter_mut().zip(pr) {
            *a += b;
        }
    }
    x = norm(&x, &vecf(t("ln_pre.weight")), &vecf(t("ln_pre.bias")), eps);

    let n_tok = x.len();
    let mut maps = Vec::new();
    for i in 0..cfg.layers {
        let b = |suffix: &str| format!("blocks.{i}.{suffix}");
        let last = i + 1 == cfg.layers;
        let h = norm(&x, &vecf(t(&b("ln1.weight"))), &vecf(t(&b("ln1.bias"))), eps);
        let q = dense(&h, &mat(t(&b("attn.q.weight"))), &vecf(t(&b("attn.q.bias"))));
        let k = dense(&h, &mat(t(&b("attn.k.weight"))), &vecf(t(&b("attn.k.bias"))));
        let v = dense(&h, &mat(t(&b("attn.v.weight"))), &vecf(t(&b("attn.v.bias"))));
        let keys = if last && qq_last { &q } else { &k };
        let mut avg = vec![vec![0.0; n_tok]; n_tok];
        let mut head_maps = Vec::new();
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            let a: Mat = (0..n_tok)
                .map(|ii| {
                    let scores: Vec<f64> = (0..n_tok)
                        .map(|jj| {
                            q[ii][r.clone()].iter().zip(&keys[jj][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    softmax(&scores)
                })
                .collect();
            for (ar, hr) in avg.iter_mut().zip(&a) {
                for (x, y) in ar.iter_mut().zip(hr) {
                    *x += y / heads as f64;
                }
            }
            head_maps.push(a);
        }
        // the rewritten last block applies the averaged map to every head
        let mut o = vec![vec![0.0; w]; n_tok];
        for (hd, a) in head_maps.iter().enumerate() {
            let a = if last && qq_last { &avg } else { a };
            for ii in 0..n_tok {
                for jj in 0..n_tok {
                    for d in hd * dh..(hd + 1) * dh {
                        o[ii][d] += a[ii][jj] * v[jj][d];
                    }
                }
            }
        }
        maps.push(avg);
        let attn = dense(&o, &mat(t(&b("attn.proj.weight"))), &vecf(t(&b("attn.proj.bias"))));
        if last && qq_last {
            x = attn;
            break;
        }
        for (row, a) in x.iter_mut().zip(&attn) {
            for (u, v) in row.iter_mut().zip(a) {
                *u += v;
            }
        }
        let h2 = norm(&x, &vecf(t(&b("ln2.weight"))), &vecf(t(&b("ln2.bias"))), eps);
        let mut hidden = dense(&h2, &mat(t(&b("mlp.fc1.weight"))), &vecf(t(&b("mlp.fc1.bias"))));
        hidden.iter_mut().flatten().for_each(|v| *v = gelu_quick(*v));
        let mlp = dense(&hidden, &mat(t(&b("mlp.fc2.weight"))), &vecf(t(&b("mlp.fc2.bias"))));
        for (row, a) in x.iter_mut().zip(&mlp) {
            for (u, v) in row.iter_mut().zip(a) {
                *u += v;
            }
        }
    }
    let y = norm(&x, &vecf(t("ln_post.weight")), &vecf(t("ln_post.bias")), eps);
    let proj = mat(t("visual_proj"));
    let tokens = y
        .iter()
        .map(|row| {
            (0..cfg.embed_dim)
                .map(|e| row.iter().zip(&proj).map(|(a, pr)| a * pr[e]).sum())
                .collect()
        })
        .collect();
    Reference { tokens, maps }
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - y).abs()).fold(0.0, f64::max)
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    Tensor::new(vec![3, s, s], (0..3 * s * s).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| (v / s) as f32));
    }
    Tensor::new(vec![n, n], data).unwrap()
}

/// Two-region fixture: red pixels embed to `+u`, blue to `-u`.
///
/// Every block's attention output projection and MLP contribute nothing
/// to the residual stream, so patch features carry only their own color.
/// Block 1 has uniform attention (global tokens everywhere), blocks 0, 2
/// and the last block attend sharply within a color region, and block 2's
/// fc2 has one dominant row so automatic suppression starts there.
pub fn two_region_model() -> ModelBundle {
    let mut cfg = ModelConfig::new(4, 8, 2, 4, 16, 2);
    cfg.mean = [0.0; 3];
    cfg.std = [1.0; 3];
    let (w, p, m) = (cfg.width, cfg.patch, cfg.mlp_dim);
    let u = [1.0f32, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
    let base = vit_surgeon::generate_synthetic(&cfg, 0).unwrap();
    let mut tensors = base.tensors().clone();
    let mut set = |name: &str, t: Tensor| {
        assert_eq!(tensors[name].shape(), t.shape(), "{name}");
        tensors.insert(name.to_owned(), t);
    };
    let scale = 1.0 / (p * p) as f32;
    let mut pe = vec![0.0f32; w * 3 * p * p];
    for o in 0..w {
        for k in 0..p * p {
            pe[(o * 3) * p * p + k] = u[o] * scale;
            pe[(o * 3 + 2) * p * p + k] = -u[o] * scale;
        }
    }
    set("patch_embed.weight", Tensor::new(vec![w, 3, p, p], pe).unwrap());
    set("cls_token", Tensor::zeros(vec![w]));
    set("pos_embed", Tensor::zeros(vec![1 + cfg.num_patches(), w]));
    for ln in ["ln_pre", "ln_post"] {
        set(&format!("{ln}.weight"), Tensor::full(vec![w], 1.0));
        set(&format!("{ln}.bias"), Tensor::zeros(vec![w]));
    }
    let sharp = {
        let mut t = Tensor::identity(w);
        t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        t
    };
    for i in 0..cfg.layers {
        let b = |s: &str| format!("blocks.{i}.{s}");
        let last = i + 1 == cfg.layers;
        for ln in ["ln1", "ln2"] {
            set(&b(&format!("{ln}.weight")), Tensor::full(vec![w], 1.0));
            set(&b(&format!("{ln}.bias")), Tensor::zeros(vec![w]));
        }
        let qk = if i == 1 { Tensor::zeros(vec![w, w]) } else { sharp.clone() };
        set(&b("attn.q.weight"), qk.clone());
        set(&b("attn.k.weight"), qk);
        set(&b("attn.v.weight"), Tensor::identity(w));
        let proj = if last { Tensor::identity(w) } else { Tensor::zeros(vec![w, w]) };
        set(&b("attn.proj.weight"), proj);
        for name in ["attn.q.bias", "attn.k.bias", "attn.v.bias", "attn.proj.bias", "mlp.fc2.bias"] {
            set(&b(name), Tensor::zeros(vec![w]));
        }
        set(&b("mlp.fc1.weight"), Tensor::zeros(vec![m, w]));
        set(&b("mlp.fc1.bias"), Tensor::zeros(vec![m]));
        let mut fc2 = Tensor::full(vec![w, m], 0.1);
        if i == 2 {
            fc2.row_mut(0).iter_mut().for_each(|v| *v = 100.0);
        }
        set(&b("mlp.fc2.weight"), fc2);
    }
    let mut vp = vec![0.0f32; w * 2];
    for d in 0..w {
        vp[d * 2] = u[d] / 8.0;
        vp[d * 2 + 1] = -u[d] / 8.0;
    }
    set("visual_proj", Tensor::new(vec![w, 2], vp).unwrap());
    ModelBundle::new(cfg, tensors).unwrap()
}

/// 32x24 image: blue rectangle `x in 8..24, y in 4..16` on red.
pub fn two_region_image() -> (RgbImage, GrayImage) {
    let (w, h) = (32, 24);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut label = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let blue = (8..24).contains(&x) && (4..16).contains(&y);
            rgb.extend_from_slice(if blue { &[0, 0, 255] } else { &[255, 0, 0] });
            label.push(u8::from(blue));
        }
    }
    (RgbImage::new(w, h, rgb).unwrap(), GrayImage::new(w, h, label).unwrap())
}

pub fn two_region_bank_tensor() -> Tensor {
    Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()
}

/// Writes model/, text.gtf, classes.txt, image.ppm and data/ under `root`.
pub fn write_two_region_fixture(root: &Path) {
    two_region_model().save_dir(&root.join("model")).unwrap();
    let bank = two_region_bank_tensor();
    std::fs::write(root.join("text.gtf"), gtf::write_gtf([(TEXT_EMBEDDINGS, &bank)]).unwrap()).unwrap();
    std::fs::write(root.join("classes.txt"), "red\nblue\n").unwrap();
    let (img, label) = two_region_image();
    netpbm::write_ppm(&root.join("image.ppm"), &img).unwrap();
    let data = root.join("data");
    std::fs::create_dir_all(data.join("images")).unwrap();
    std::fs::create_dir_all(data.join("labels")).unwrap();
    std::fs::write(data.join("classes.txt"), "red\nblue\n").unwrap();
    netpbm::write_ppm(&data.join("images/scene.ppm"), &img).unwrap();
    netpbm::write_pgm(&data.join("labels/scene.pgm"), &label).unwrap();
}
