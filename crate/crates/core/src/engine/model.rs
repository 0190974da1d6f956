//! The assembled forecaster: patch tokens, a learned look-back to horizon
//! projection, stacked DACLA + mixture-of-experts layers and a convolutional
//! decoder with transposed-convolution upsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Positional};
use super::data::Batch;
use crate::autodiff::{ConvSpec, PadMode, ParamStore, Tape, Tensor, Var};
use crate::dacla::stage::{init_layer_norm, init_linear, layer_norm, linear};
use crate::dacla::{dacla_block, init_dacla_block};
use crate::error::{Error, Result};
use crate::field_store::{IntensityThresholds, CATEGORY_COUNT, PRECIP_CHANNEL};
use crate::pa_moe::{build_routing_map, init_moe, moe_layer, MoeOutput, RoutingMap};
use crate::tokenizer::{patchify, sinusoidal_pe, solar_alpha_field, token_grid};

#[derive(Clone, Debug)]
pub struct PaNet {
    pub config: ModelConfig,
    /// Routing thresholds, fixed at construction.
    pub thresholds: IntensityThresholds,
    pub params: ParamStore,
}

/// Per-pixel category probabilities `(B, j, H, W, 5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryForecast {
    pub batch: usize,
    pub horizon: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

impl CategoryForecast {
    pub fn pixel(&self, b: usize, t: usize, y: usize, x: usize) -> &[f64] {
        let i = ((b * self.horizon + t) * self.height + y) * self.width + x;
        &self.probs[i * CATEGORY_COUNT..(i + 1) * CATEGORY_COUNT]
    }

    /// Most probable category per pixel, lowest index on ties.
    pub fn argmax(&self) -> Vec<u8> {
        self.probs
            .chunks(CATEGORY_COUNT)
            .map(|p| {
                let mut best = 0;
                for c in 1..CATEGORY_COUNT {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

pub struct ForwardPass {
    /// `(B * j * H * W, 5)` probabilities.
    pub probs: Var,
    pub layers: Vec<MoeOutput>,
    pub budgets: Vec<usize>,
}

impl PaNet {
    pub fn new(config: ModelConfig, thresholds: IntensityThresholds) -> Result<Self> {
        config.validate()?;
        thresholds.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let (d, p) = (c.embed_dim, c.patch);
        let mut s = ParamStore::new();
        init_linear(&mut s, "embed", p * p * c.channels, d, &mut rng);
        let mut lead = vec![0.0; c.lookback * c.horizon];
        lead[(c.lookback - 1) * c.horizon..].iter_mut().for_each(|v| *v = 1.0);
        s.insert("lead.w", Tensor::new(vec![c.lookback, c.horizon], lead));
        s.insert("lead.b", Tensor::zeros(vec![c.horizon]));
        if c.positional == Positional::Solar {
            init_linear(&mut s, "solar", 1, d, &mut rng);
        }
        let attn = c.attention();
        for l in 0..c.layers {
            init_dacla_block(&mut s, &format!("layer{l}.dacla"), &attn, &mut rng);
            init_moe(&mut s, &format!("layer{l}.moe"), d, c.d_ff, c.n_experts, &mut rng);
            init_layer_norm(&mut s, &format!("layer{l}.moe_ln"), d);
        }
        let cd = c.decoder_channels;
        s.insert_normal("dec.conv1.w", vec![3, 3, d, cd], (2.0 / (9 * d) as f64).sqrt(), &mut rng);
        s.insert("dec.conv1.b", Tensor::zeros(vec![cd]));
        s.insert_normal("dec.conv2.w", vec![3, 3, cd, cd], (2.0 / (9 * cd) as f64).sqrt(), &mut rng);
        s.insert("dec.conv2.b", Tensor::zeros(vec![cd]));
        init_linear(&mut s, "dec.up", cd, p * p * CATEGORY_COUNT, &mut rng);
        Ok(PaNet { config, thresholds, params: s })
    }

    fn check_batch(&self, batch: &Batch) -> Result<(usize, usize)> {
        let c = &self.config;
        if batch.lookback != c.lookback || batch.horizon != c.horizon || batch.channels != c.channels {
            return Err(Error::ConfigMismatch(format!(
                "model expects lookback {}, horizon {}, {} channels; data has {}, {}, {}",
                c.lookback, c.horizon, c.channels, batch.lookback, batch.horizon, batch.channels
            )));
        }
        token_grid(batch.height, batch.width, c.patch)
    }

    /// Budgets from the persistence prior, or from the true future rain when
    /// `teacher_forcing` is set.
    pub fn routing_map(&self, batch: &Batch, teacher_forcing: bool) -> Result<RoutingMap> {
        let field = if teacher_forcing { &batch.target } else { &batch.prior };
        build_routing_map(field, self.config.patch, &self.thresholds, &self.config.k)
    }

    /// Records the forward pass on `tape`.
    ///
    /// `frozen` fixes the expert selections of every layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        routing: &RoutingMap,
        frozen: Option<&[Vec<Vec<usize>>]>,
    ) -> Result<ForwardPass> {
        let (hp, wp) = self.check_batch(batch)?;
        let c = &self.config;
        let (b, s, j, d, p) = (batch.size, c.lookback, c.horizon, c.embed_dim, c.patch);
        let (h, w, l) = (batch.height, batch.width, batch.channels);
        let n = hp * wp;
        if (routing.batch, routing.frames, routing.hp, routing.wp) != (b, j, hp, wp) {
            return Err(Error::ConfigMismatch("routing map does not match the token grid".into()));
        }
        if let Some(f) = frozen {
            if f.len() != c.layers {
                return Err(Error::config("frozen selections must cover every layer"));
            }
        }
        let ps = &self.params;

        let frame_len = h * w * l;
        let mut rows = Vec::with_capacity(batch.inputs.len());
        for f in batch.inputs.data().chunks(frame_len) {
            // rain enters on a log scale, matching the roughly geometric category bounds
            let f: Vec<f64> =
                f.iter().enumerate().map(|(i, &v)| if i % l == PRECIP_CHANNEL { v.ln_1p() } else { v }).collect();
            rows.extend(patchify(&f, h, w, l, p)?);
        }
        let rows = tape.constant(Tensor::new(vec![b * s * n, p * p * l], rows));
        let mut x = linear(tape, ps, "embed", rows);
        let pe = match c.positional {
            Positional::Solar => {
                let alpha = solar_alpha_field(&batch.geo, &batch.input_hours, hp, wp, p)?;
                let alpha = tape.constant(Tensor::new(vec![b * s * n, 1], alpha));
                linear(tape, ps, "solar", alpha)
            }
            Positional::Sinusoidal => {
                let mut data = Vec::with_capacity(b * s * n * d);
                for _ in 0..b {
                    for pos in 0..s * n {
                        data.extend(sinusoidal_pe(pos, d)?);
                    }
                }
                tape.constant(Tensor::new(vec![b * s * n, d], data))
            }
        };
        x = tape.add(x, pe);

        let x = tape.reshape(x, vec![b, s, n * d]);
        let x = tape.permute(x, &[0, 2, 1]);
        let x = linear(tape, ps, "lead", x);
        let x = tape.permute(x, &[0, 2, 1]);
        let mut x = tape.reshape(x, vec![b, j, hp, wp, d]);

        let attn = c.attention();
        let mut layers = Vec::with_capacity(c.layers);
        for li in 0..c.layers {
            x = dacla_block(tape, ps, &format!("layer{li}.dacla"), x, &attn)?;
            let tokens = tape.reshape(x, vec![b * j * n, d]);
            let sel = frozen.map(|f| f[li].as_slice());
            let moe = moe_layer(tape, ps, &format!("layer{li}.moe"), tokens, &routing.budgets, c.n_experts, sel)?;
            let y = tape.add(tokens, moe.out);
            let y = layer_norm(tape, ps, &format!("layer{li}.moe_ln"), y);
            x = tape.reshape(y, vec![b, j, hp, wp, d]);
            layers.push(moe);
        }

        let same = ConvSpec { stride: (1, 1), pad: [1, 1, 1, 1], mode: PadMode::Zero };
        let x = tape.reshape(x, vec![b * j, hp, wp, d]);
        let w1 = tape.param(ps, "dec.conv1.w");
        let b1 = tape.param(ps, "dec.conv1.b");
        let x = tape.conv2d(x, w1, Some(b1), same);
        let x = tape.relu(x);
        let w2 = tape.param(ps, "dec.conv2.w");
        let b2 = tape.param(ps, "dec.conv2.b");
        let x = tape.conv2d(x, w2, Some(b2), same);
        let x = tape.relu(x);
        let x = tape.reshape(x, vec![b * j * n, c.decoder_channels]);
        // kernel = stride = p transposed convolution, then depth to space
        let up = linear(tape, ps, "dec.up", x);
        let up = tape.reshape(up, vec![b * j, hp, wp, p, p, CATEGORY_COUNT]);
        let up = tape.permute(up, &[0, 1, 3, 2, 4, 5]);
        let logits = tape.reshape(up, vec![b * j * h * w, CATEGORY_COUNT]);
        let probs = tape.softmax_last(logits);
        Ok(ForwardPass { probs, layers, budgets: routing.budgets.clone() })
    }

    pub fn predict(&self, batch: &Batch) -> Result<CategoryForecast> {
        let routing = self.routing_map(batch, false)?;
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch, &routing, None)?;
        Ok(CategoryForecast {
            batch: batch.size,
            horizon: batch.horizon,
            height: batch.height,
            width: batch.width,
            probs: tape.value(out.probs).data().to_vec(),
        })
    }
}
