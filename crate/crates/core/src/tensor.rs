//! Dense row-major `f32` tensors and the handful of kernels a ViT forward
//! pass needs.
//!
//! Every reduction accumulates in `f64` and rounds once on store, so results
//! do not depend on thread count or platform.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis; rows are the flattened leading axes.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// `(rows, cols)` of a 2-D tensor, or a dimension error naming `what`.
    pub fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Equality on bit patterns (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Copies a subset of rows (2-D) into a new tensor.
    pub fn select_rows(&self, range: std::ops::Range<usize>) -> Self {
        let c = self.cols();
        Self {
            shape: vec![range.len(), c],
            data: self.data[range.start * c..range.end * c].to_vec(),
        }
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// `a · btᵀ` where `bt` is stored `[n × k]`. Rows of both operands are
/// contiguous, which is the layout every linear layer uses.
pub fn matmul_transposed(a: &Tensor, bt: &Tensor) -> Result<Tensor> {
    gemm_bt(a, bt, None)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: [..x{k}] x [{k2}x{n}]"
        )));
    }
    gemm_bt(a, &b.transpose()?, None)
}

/// `x · wᵀ + bias`, with `w` stored `[out × in]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    gemm_bt(x, w, bias)
}

fn gemm_bt(a: &Tensor, bt: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (n, k2) = bt.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions differ: [{m}x{k}] x [{k2}x{n}]ᵀ"
        )));
    }
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "bias has {} elements, output has {n} columns",
                b.len()
            )));
        }
    }
    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return Tensor::new(vec![m, n], out);
    }
    let fill = |(i, out_row): (usize, &mut [f32])| {
        let ar = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let offset = bias.map_or(0.0, |b| f64::from(b.data[j]));
            *o = (dot_f64(ar, &bt.data[j * k..(j + 1) * k]) + offset) as f32;
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        out.chunks_mut(n).enumerate().for_each(fill);
    }
    Tensor::new(vec![m, n], out)
}

/// Softmax along the last axis, with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / total) as f32;
    }
}

/// Per-row normalization with population variance; `eps` sits inside the
/// square root.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over {d} features got gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(d) {
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = f64::from(v) - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let n = (f64::from(*v) - mean) * inv;
            *v = (n * f64::from(gamma.data[j]) + f64::from(beta.data[j])) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    /// `x · sigmoid(1.702 x)`, used by the OpenAI CLIP checkpoints.
    #[default]
    QuickGelu,
    /// `x · Φ(x)` with the Gaussian CDF.
    ExactGelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::QuickGelu => "quick-gelu",
            Activation::ExactGelu => "exact-gelu",
        }
    }

    pub fn apply(self, x: f32) -> f32 {
        let x = f64::from(x);
        let y = match self {
            Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
            Activation::ExactGelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        };
        y as f32
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick-gelu" | "quick_gelu" => Ok(Activation::QuickGelu),
            "exact-gelu" | "gelu" => Ok(Activation::ExactGelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = kind.apply(*v);
    }
    out
}

/// Scales each row to unit L2 norm. All-zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return out;
    }
    for row in out.data.chunks_mut(c) {
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
    out
}

/// Source coordinate and blend weight for one output index, half-pixel
/// centers, clamped to the input range.
fn sample_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resampling of an `[h × w × c]` tensor.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = match x.shape() {
        &[h, w, c] => (h, w, c),
        s => {
            return Err(Error::Dimension(format!(
                "bilinear_resize expects [h x w x c], got {s:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "cannot resize [{h}x{w}] to [{out_h}x{out_w}]"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let cols: Vec<_> = (0..out_w).map(|j| sample_axis(j, w, out_w)).collect();
    let mut out = vec![0.0f32; out_h * out_w * c];
    let src = x.data();
    let fill = |(i, out_row): (usize, &mut [f32])| {
        let (y0, y1, fy) = sample_axis(i, h, out_h);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..c {
                let at = |y: usize, xx: usize| f64::from(src[(y * w + xx) * c + ch]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out_row[j * c + ch] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    };
    let row_len = out_w * c;
    if out_h * row_len >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(fill);
    } else {
        out.chunks_mut(row_len).enumerate().for_each(fill);
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Cosine similarity of two equally long vectors; zero if either is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let ab = dot_f64(a, b);
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        ab / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += f64::from(a.data()[i * k + p]) * f64::from(b.data()[p * n + j]);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(vec![3, 5], &mut rng);
        assert!(matmul(&Tensor::identity(3), &b).unwrap().bit_eq(&b));

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(vec![8, 8], &mut rng);
        let b = random(vec![8, 8], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (got, want) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((f64::from(*got) - want).abs() <= 1e-6 * want.abs().max(1e-6));
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[vec![2f32.ln(), 0.0]]).unwrap());
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-7);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-7);

        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(vec![2], 1.0);
        let zeros = Tensor::zeros(vec![2]);
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);

        let beta = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::full(vec![3], 1.0), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn layer_norm_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(vec![1, 6], &mut rng);
        let g = random(vec![6], &mut rng);
        let b = random(vec![6], &mut rng);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v.into()).collect();
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        for (j, x) in xs.iter().enumerate() {
            let want = (x - mean) / (var + 1e-5).sqrt() * f64::from(g.data()[j]) + f64::from(b.data()[j]);
            assert!((f64::from(y.data()[j]) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(vec![1, 2]);
        let g = Tensor::zeros(vec![2]);
        assert!(layer_norm(&x, &g, &g, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        for kind in [Activation::QuickGelu, Activation::ExactGelu] {
            assert_eq!(kind.apply(0.0), 0.0);
        }
        let want = 1.0 / (1.0 + (-1.702f64).exp());
        assert!((f64::from(Activation::QuickGelu.apply(1.0)) - want).abs() < 1e-7);
        assert!((Activation::QuickGelu.apply(1.0) - 0.8458).abs() < 1e-4);
        assert!(Activation::QuickGelu.apply(-10.0).abs() < 1e-3);
        // Φ(1) = 0.841344746...
        assert!((Activation::ExactGelu.apply(1.0) - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_examples() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let y = l2_normalize_rows(&x);
        assert_eq!(y.data(), &[0.6, 0.8, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_examples() {
        let one = Tensor::new(vec![1, 1, 1], vec![7.5]).unwrap();
        let up = bilinear_resize(&one, 3, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 7.5));

        let row = Tensor::new(vec![1, 2, 1], vec![0.0, 2.0]).unwrap();
        let up = bilinear_resize(&row, 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.5, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![3, 4, 2], &mut rng);
        assert!(bilinear_resize(&x, 3, 4).unwrap().bit_eq(&x));
        assert!(bilinear_resize(&x, 0, 4).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, seed in any::<u64>(), scale in 0.1f32..200.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = random(vec![rows, cols], &mut rng);
            x.data_mut().iter_mut().for_each(|v| *v *= scale);
            let s = softmax_rows(&x);
            for r in 0..rows {
                let row = s.row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0 && v.is_finite()));
                let total: f64 = row.iter().map(|&v| f64::from(v)).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_matches_oracle(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(vec![m, k], &mut rng);
            let b = random(vec![k, n], &mut rng);
            let c = matmul(&a, &b).unwrap();
            for (got, want) in c.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((f64::from(*got) - want).abs() <= 1e-6 * want.abs().max(1e-3));
            }
            prop_assert!(matmul(&Tensor::identity(m), &a).unwrap().bit_eq(&a));
            prop_assert!(matmul(&a, &Tensor::identity(k)).unwrap().bit_eq(&a));
        }

        #[test]
        fn bilinear_exact_on_constants(h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12, v in -5.0f32..5.0) {
            let x = Tensor::full(vec![h, w, 2], v);
            let y = bilinear_resize(&x, oh, ow).unwrap();
            prop_assert!(y.data().iter().all(|&u| u == v));
        }

        #[test]
        fn layer_norm_standardizes(d in 2usize..32, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(vec![1, d], &mut rng);
            prop_assume!(x.data().iter().any(|&v| v != x.data()[0]));
            let y = layer_norm(&x, &Tensor::full(vec![d], 1.0), &Tensor::zeros(vec![d]), 1e-12).unwrap();
            let ys: Vec<f64> = y.data().iter().map(|&v| v.into()).collect();
            let mean = ys.iter().sum::<f64>() / d as f64;
            let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
