//! Dual-axis compressed latent attention.
//!
//! The spatial stage compresses each frame's token grid with a strided 2-D
//! convolution, attends over the compressed grid and upsamples bilinearly. The
//! temporal stage does the same along time with a causal 1-D convolution and
//! linear interpolation. Both stages add their input back.
//!
//! Plain matrix versions of the attention primitives live here; the
//! differentiable stages are in [`stage`].

pub mod stage;

pub use stage::{
    dacla_block, init_dacla_block, init_spatial_stage, init_temporal_stage, multi_head_tape, spatial_stage,
    temporal_stage,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Attention and compression hyperparameters shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    /// Square kernel side of the spatial compression; odd.
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        AttentionConfig { heads, head_dim, spatial_stride: 2, temporal_stride: 2, spatial_kernel: 3, temporal_kernel: 3 }
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads and head_dim must be at least 1"));
        }
        if self.spatial_stride == 0 || self.temporal_stride == 0 {
            return Err(Error::config("strides must be at least 1"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::config(format!("spatial kernel {} must be odd", self.spatial_kernel)));
        }
        if self.temporal_kernel == 0 {
            return Err(Error::config("temporal kernel must be at least 1"));
        }
        Ok(())
    }

    /// Compressed length `ceil(len / stride)`; errors when it would be zero.
    pub fn compressed(len: usize, stride: usize) -> Result<usize> {
        if len == 0 || stride == 0 {
            return Err(Error::config(format!("cannot compress length {len} with stride {stride}")));
        }
        Ok(len.div_ceil(stride))
    }
}

fn matrix_dims(t: &Tensor, name: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::config(format!("{name} must be a matrix, got shape {s:?}"))),
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Row-stochastic matrix `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (nq, dk) = matrix_dims(q, "Q")?;
    let (nk, dk2) = matrix_dims(k, "K")?;
    if dk != dk2 || dk == 0 {
        return Err(Error::config(format!("query width {dk} and key width {dk2} must agree and be positive")));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut s = vec![0.0; nq * nk];
    for i in 0..nq {
        for j in 0..nk {
            let dot: f64 = q.data()[i * dk..(i + 1) * dk].iter().zip(&k.data()[j * dk..(j + 1) * dk]).map(|(a, b)| a * b).sum();
            s[i * nk + j] = dot * scale;
        }
    }
    softmax_rows(&mut s, nk);
    Ok(Tensor::new(vec![nq, nk], s))
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let a = attention_weights(q, k)?;
    let (nk, dv) = matrix_dims(v, "V")?;
    let (nq, nk2) = (a.shape()[0], a.shape()[1]);
    if nk != nk2 {
        return Err(Error::config(format!("{nk2} keys but {nk} values")));
    }
    Ok(Tensor::new(vec![nq, dv], matmul(a.data(), v.data(), nq, nk, dv)))
}

/// Per-head projections and the output map, all `(d, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadWeights {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// `[head_1; ...; head_h] W^O` with `head_i = Attn(Q W^Q_i, K W^K_i, V W^V_i)`,
/// where head `i` owns columns `i*d_k..(i+1)*d_k` of each input projection.
pub fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, w: &MultiHeadWeights) -> Result<Tensor> {
    let (nq, d) = matrix_dims(q, "Q")?;
    let (nk, dk_in) = matrix_dims(k, "K")?;
    let (nv, dv_in) = matrix_dims(v, "V")?;
    if w.heads == 0 || d % w.heads != 0 {
        return Err(Error::config(format!("width {d} is not divisible by {} heads", w.heads)));
    }
    if dk_in != d || dv_in != d || nk != nv {
        return Err(Error::config("Q, K, V widths or key/value counts disagree"));
    }
    for (name, m) in [("W^Q", &w.w_q), ("W^K", &w.w_k), ("W^V", &w.w_v), ("W^O", &w.w_o)] {
        if m.shape() != [d, d] {
            return Err(Error::config(format!("{name} must be {d}x{d}")));
        }
    }
    let dk = d / w.heads;
    let qp = matmul(q.data(), w.w_q.data(), nq, d, d);
    let kp = matmul(k.data(), w.w_k.data(), nk, d, d);
    let vp = matmul(v.data(), w.w_v.data(), nk, d, d);
    let cols = |m: &[f64], rows: usize, h: usize| -> Tensor {
        let data = (0..rows).flat_map(|r| m[r * d + h * dk..r * d + (h + 1) * dk].to_vec()).collect();
        Tensor::new(vec![rows, dk], data)
    };
    let mut concat = vec![0.0; nq * d];
    for h in 0..w.heads {
        let head = scaled_dot_attention(&cols(&qp, nq, h), &cols(&kp, nk, h), &cols(&vp, nk, h))?;
        for r in 0..nq {
            concat[r * d + h * dk..r * d + (h + 1) * dk].copy_from_slice(&head.data()[r * dk..(r + 1) * dk]);
        }
    }
    Ok(Tensor::new(vec![nq, d], matmul(&concat, w.w_o.data(), nq, d, d)))
}

/// Position-wise `ReLU(x W_1 + b_1) W_2 + b_2`.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64]) -> Result<Tensor> {
    let (n, d) = matrix_dims(x, "x")?;
    let (d1, dff) = matrix_dims(w1, "W_1")?;
    let (dff2, d2) = matrix_dims(w2, "W_2")?;
    if d1 != d || dff2 != dff || b1.len() != dff || b2.len() != d2 {
        return Err(Error::config("feed-forward weight shapes disagree"));
    }
    let mut hidden = matmul(x.data(), w1.data(), n, d, dff);
    for row in hidden.chunks_mut(dff) {
        for (h, b) in row.iter_mut().zip(b1) {
            *h = (*h + b).max(0.0);
        }
    }
    let mut out = matmul(&hidden, w2.data(), n, dff, d2);
    for row in out.chunks_mut(d2) {
        row.iter_mut().zip(b2).for_each(|(o, b)| *o += b);
    }
    Ok(Tensor::new(vec![n, d2], out))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn single_key_returns_value() {
        let q = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let k = Tensor::new(vec![1, 3], vec![0.2, 0.1, -0.4]);
        let v = Tensor::new(vec![1, 2], vec![7.0, -3.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[7.0, -3.0, 7.0, -3.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::new(vec![1, 2], vec![0.3, 0.9]);
        let k = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 6.0]);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, vec![3, 3]), random(&mut rng, vec![3, 3]), random(&mut rng, vec![3, 3]));
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|c| q.data()[i * 3 + c] * k.data()[j * 3 + c]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..3 {
                let want: f64 = (0..3).map(|j| logits[j].exp() / z * v.data()[j * 3 + c]).sum();
                assert!((out.data()[i * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_shapes_are_config_errors() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        assert!(matches!(scaled_dot_attention(&a, &b, &b), Err(Error::Config(_))));
        assert!(matches!(scaled_dot_attention(&a, &a, &Tensor::zeros(vec![3, 1])), Err(Error::Config(_))));
    }

    fn weights(rng: &mut ChaCha8Rng, heads: usize, d: usize) -> MultiHeadWeights {
        MultiHeadWeights {
            heads,
            w_q: random(rng, vec![d, d]),
            w_k: random(rng, vec![d, d]),
            w_v: random(rng, vec![d, d]),
            w_o: random(rng, vec![d, d]),
        }
    }

    #[test]
    fn one_head_is_attention_then_output_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = weights(&mut rng, 1, 4);
        let (q, k, v) = (random(&mut rng, vec![3, 4]), random(&mut rng, vec![5, 4]), random(&mut rng, vec![5, 4]));
        let got = multi_head(&q, &k, &v, &w).unwrap();
        let proj = |x: &Tensor, m: &Tensor| Tensor::new(vec![x.shape()[0], 4], matmul(x.data(), m.data(), x.shape()[0], 4, 4));
        let head = scaled_dot_attention(&proj(&q, &w.w_q), &proj(&k, &w.w_k), &proj(&v, &w.w_v)).unwrap();
        let want = proj(&head, &w.w_o);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_heads_match_loop_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h, dk) = (4, 2, 2);
        let w = weights(&mut rng, h, d);
        let (q, k, v) = (random(&mut rng, vec![3, d]), random(&mut rng, vec![4, d]), random(&mut rng, vec![4, d]));
        let got = multi_head(&q, &k, &v, &w).unwrap();
        let mut concat = vec![vec![0.0; d]; 3];
        for head in 0..h {
            let project = |x: &Tensor, m: &Tensor, r: usize, c: usize| -> f64 {
                (0..d).map(|i| x.data()[r * d + i] * m.data()[i * d + head * dk + c]).sum()
            };
            for i in 0..3 {
                let logits: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..dk).map(|c| project(&q, &w.w_q, i, c) * project(&k, &w.w_k, j, c)).sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for c in 0..dk {
                    concat[i][head * dk + c] = (0..4).map(|j| logits[j].exp() / z * project(&v, &w.w_v, j, c)).sum();
                }
            }
        }
        for i in 0..3 {
            for c in 0..d {
                let want: f64 = (0..d).map(|m| concat[i][m] * w.w_o.data()[m * d + c]).sum();
                assert!((got.data()[i * d + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_map_zeroes_result_and_bad_heads_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = weights(&mut rng, 2, 4);
        w.w_o = Tensor::zeros(vec![4, 4]);
        let x = random(&mut rng, vec![3, 4]);
        assert!(multi_head(&x, &x, &x, &w).unwrap().data().iter().all(|&v| v == 0.0));
        w.heads = 3;
        assert!(matches!(multi_head(&x, &x, &x, &w), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, vec![4, 3]);
        let z = ffn(&x, &Tensor::zeros(vec![3, 5]), &[0.0; 5], &Tensor::zeros(vec![5, 3]), &[0.0; 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        // all pre-activations negative: output is the second bias
        let w1 = Tensor::zeros(vec![3, 5]);
        let w2 = random(&mut rng, vec![5, 3]);
        let out = ffn(&x, &w1, &[-1.0; 5], &w2, &[0.5, -0.5, 2.0]).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, &[0.5, -0.5, 2.0]);
        }

        let w1 = random(&mut rng, vec![3, 5]);
        let b1: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();
        let b2 = [0.3, 0.0, -0.1];
        let out = ffn(&x, &w1, &b1, &w2, &b2).unwrap();
        for r in 0..4 {
            let hidden: Vec<f64> = (0..5)
                .map(|j| ((0..3).map(|i| x.data()[r * 3 + i] * w1.data()[i * 5 + j]).sum::<f64>() + b1[j]).max(0.0))
                .collect();
            for c in 0..3 {
                let want = (0..5).map(|j| hidden[j] * w2.data()[j * 3 + c]).sum::<f64>() + b2[c];
                assert!((out.data()[r * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compressed_lengths() {
        assert_eq!(AttentionConfig::compressed(5, 2).unwrap(), 3);
        assert_eq!(AttentionConfig::compressed(1, 2).unwrap(), 1);
        assert!(AttentionConfig::compressed(0, 2).is_err());
        let mut c = AttentionConfig::new(2, 4);
        assert!(c.validate().is_ok());
        c.spatial_kernel = 2;
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn attention_rows_are_stochastic(nq in 1usize..6, nk in 1usize..6, dk in 1usize..5, scale in 0.1f64..20.0, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut q = random(&mut rng, vec![nq, dk]);
            q.data_mut().iter_mut().for_each(|v| *v *= scale);
            let k = random(&mut rng, vec![nk, dk]);
            let a = attention_weights(&q, &k).unwrap();
            for row in a.data().chunks(nk) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
