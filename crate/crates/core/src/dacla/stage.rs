//! Differentiable spatial and temporal stages recorded on a [`Tape`].
//!
//! Parameters of a stage named `p` live in the store as `p.conv.w`, `p.conv.b`,
//! `p.ln.g`, `p.ln.b` and `p.{q,k,v,o}.{w,b}`.

use rand::Rng;

use super::AttentionConfig;
use crate::autodiff::{ConvSpec, PadMode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x W + b` over the last axis of `x`.
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = tape.param(store, &format!("{name}.w"));
    let b = tape.param(store, &format!("{name}.b"));
    let y = tape.matmul(x, w, false);
    tape.bias_add(y, b)
}

pub(crate) fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let g = tape.param(store, &format!("{name}.g"));
    let b = tape.param(store, &format!("{name}.b"));
    tape.layer_norm(x, g, b, LN_EPS)
}

pub(crate) fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert_normal(format!("{name}.w"), vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng);
    store.insert(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(vec![d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(vec![d]));
}

/// Compression kernel starting at the identity on the last tap of the window
/// plus small noise, so a fresh stage begins close to strided subsampling.
fn init_conv<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, kh: usize, kw: usize, d: usize, centre: usize, rng: &mut R) {
    let w_name = format!("{name}.w");
    store.insert_normal(w_name.clone(), vec![kh, kw, d, d], 0.02, rng);
    let w = store.get_mut(&w_name).expect("just inserted");
    for c in 0..d {
        w.data_mut()[(centre * d + c) * d + c] += 1.0;
    }
    store.insert(format!("{name}.b"), Tensor::zeros(vec![d]));
}

fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln"), d);
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, rng);
    }
}

pub fn init_spatial_stage<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
    let (k, d) = (cfg.spatial_kernel, cfg.dim());
    init_conv(store, &format!("{prefix}.conv"), k, k, d, (k / 2) * k + k / 2, rng);
    init_attention(store, prefix, d, rng);
}

pub fn init_temporal_stage<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
    let (k, d) = (cfg.temporal_kernel, cfg.dim());
    // the newest frame in each causal window
    init_conv(store, &format!("{prefix}.conv"), 1, k, d, k - 1, rng);
    init_attention(store, prefix, d, rng);
}

pub fn init_dacla_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
    init_spatial_stage(store, &format!("{prefix}.spatial"), cfg, rng);
    init_temporal_stage(store, &format!("{prefix}.temporal"), cfg, rng);
}

/// Multi-head attention over `(N, n_q, d)` queries and `(N, n_k, d)` keys and
/// values that are already projected.
pub fn multi_head_tape(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let (n, nq, d) = match *tape.shape(q) {
        [n, nq, d] => (n, nq, d),
        ref s => panic!("multi_head_tape: expected rank-3 queries, got {s:?}"),
    };
    let nk = tape.shape(k)[1];
    let dk = d / heads;
    let split = |tape: &mut Tape, x: Var, len: usize| -> Var {
        if heads == 1 {
            return x;
        }
        let x = tape.reshape(x, vec![n, len, heads, dk]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, vec![n * heads, len, dk])
    };
    let (qh, kh, vh) = (split(tape, q, nq), split(tape, k, nk), split(tape, v, nk));
    let scores = tape.bmm(qh, kh, true);
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = tape.softmax_last(scores);
    let out = tape.bmm(attn, vh, false);
    if heads == 1 {
        return out;
    }
    let out = tape.reshape(out, vec![n, heads, nq, dk]);
    let out = tape.permute(out, &[0, 2, 1, 3]);
    tape.reshape(out, vec![n, nq, d])
}

/// Layer norm, Q/K/V projections, self-attention and the output projection
/// over `(N, n, d)` compressed tokens.
fn latent_attention(tape: &mut Tape, store: &ParamStore, prefix: &str, c: Var, heads: usize) -> Var {
    let z = layer_norm(tape, store, &format!("{prefix}.ln"), c);
    let q = linear(tape, store, &format!("{prefix}.q"), z);
    let k = linear(tape, store, &format!("{prefix}.k"), z);
    let v = linear(tape, store, &format!("{prefix}.v"), z);
    let a = multi_head_tape(tape, q, k, v, heads);
    linear(tape, store, &format!("{prefix}.o"), a)
}

fn check_width(got: usize, cfg: &AttentionConfig) -> Result<()> {
    if got != cfg.dim() {
        return Err(Error::config(format!("token width {got} does not match heads x head_dim = {}", cfg.dim())));
    }
    Ok(())
}

/// Spatial stage over `x` of shape `(N, H_p, W_p, d)`; returns the same shape.
pub fn spatial_stage(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    let [n, hp, wp, d] = *tape.shape(x) else {
        return Err(Error::config(format!("spatial stage expects (N, H_p, W_p, d), got {:?}", tape.shape(x))));
    };
    check_width(d, cfg)?;
    let (s, k) = (cfg.spatial_stride, cfg.spatial_kernel);
    let hc = AttentionConfig::compressed(hp, s)?;
    let wc = AttentionConfig::compressed(wp, s)?;
    let half = k / 2;
    let spec = ConvSpec { stride: (s, s), pad: [half, half, half, half], mode: PadMode::Replicate };
    let w = tape.param(store, &format!("{prefix}.conv.w"));
    let b = tape.param(store, &format!("{prefix}.conv.b"));
    let c = tape.conv2d(x, w, Some(b), spec);
    debug_assert_eq!(tape.shape(c), &[n, hc, wc, d]);
    let c = tape.reshape(c, vec![n, hc * wc, d]);
    let a = latent_attention(tape, store, prefix, c, cfg.heads);
    let a = tape.reshape(a, vec![n, hc, wc, d]);
    let up = tape.resample_linear(a, 1, hp);
    let up = tape.resample_linear(up, 2, wp);
    Ok(tape.add(x, up))
}

/// Temporal stage over `x` of shape `(M, T, d)`; returns the same shape.
///
/// The compression window for step `t` covers input steps
/// `t*stride - (kernel - 1) ..= t*stride`, clamped at zero.
pub fn temporal_stage(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    let [m, t, d] = *tape.shape(x) else {
        return Err(Error::config(format!("temporal stage expects (M, T, d), got {:?}", tape.shape(x))));
    };
    check_width(d, cfg)?;
    let tc = temporal_compress(tape, store, prefix, x, cfg)?;
    let c = tape.reshape(tc, vec![m, AttentionConfig::compressed(t, cfg.temporal_stride)?, d]);
    let a = latent_attention(tape, store, prefix, c, cfg.heads);
    let up = tape.resample_linear(a, 1, t);
    Ok(tape.add(x, up))
}

/// The causal convolution alone, `(M, T, d) -> (M, 1, T_c, d)`.
pub fn temporal_compress(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let [m, t, d] = *tape.shape(x) else {
        return Err(Error::config("temporal compression expects (M, T, d)"));
    };
    AttentionConfig::compressed(t, cfg.temporal_stride)?;
    let x4 = tape.reshape(x, vec![m, 1, t, d]);
    let spec = ConvSpec {
        stride: (1, cfg.temporal_stride),
        pad: [0, 0, cfg.temporal_kernel - 1, 0],
        mode: PadMode::Replicate,
    };
    let w = tape.param(store, &format!("{prefix}.conv.w"));
    let b = tape.param(store, &format!("{prefix}.conv.b"));
    Ok(tape.conv2d(x4, w, Some(b), spec))
}

/// Spatial then temporal stage over `(B, T, H_p, W_p, d)` tokens.
pub fn dacla_block(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let [b, t, hp, wp, d] = *tape.shape(x) else {
        return Err(Error::config(format!("DACLA block expects (B, T, H_p, W_p, d), got {:?}", tape.shape(x))));
    };
    let xs = tape.reshape(x, vec![b * t, hp, wp, d]);
    let xs = spatial_stage(tape, store, &format!("{prefix}.spatial"), xs, cfg)?;
    let xs = tape.reshape(xs, vec![b, t, hp, wp, d]);
    let xt = tape.permute(xs, &[0, 2, 3, 1, 4]);
    let xt = tape.reshape(xt, vec![b * hp * wp, t, d]);
    let xt = temporal_stage(tape, store, &format!("{prefix}.temporal"), xt, cfg)?;
    let xt = tape.reshape(xt, vec![b, hp, wp, t, d]);
    Ok(tape.permute(xt, &[0, 3, 1, 2, 4]))
}
