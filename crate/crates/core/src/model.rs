//! Shared-encoder, multi-head registration network and its losses.
//!
//! The encoder sees the source and target images stacked as two channels
//! and downsamples with stride-2 convolutions. Every head is a decoder that
//! upsamples back, concatenating the encoder skip features at each scale,
//! and predicts a displacement field at half resolution which is then
//! bilinearly upsampled (and rescaled to full-resolution voxel units).
//!
//! All `p` heads are evaluated on one tape so a single backward pass
//! accumulates every head's contribution into the shared encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pair::{Dvf, RegistrationPair};
use crate::tensor::{Tape, Tensor, Var};

pub const NCC_WINDOW: usize = 9;
pub const NCC_EPS: f64 = 1e-5;
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by `2^depth`.
    pub size: usize,
    pub encoder_channels: Vec<usize>,
    /// One entry per encoder level, coarsest first.
    pub decoder_channels: Vec<usize>,
    pub heads: usize,
    pub share_encoder: bool,
    pub slope: f64,
    /// Standard deviation of the final displacement layer's weights.
    pub flow_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            size: 64,
            encoder_channels: vec![8, 16, 16, 16],
            decoder_channels: vec![16, 16, 16, 8],
            heads: 27,
            share_encoder: true,
            slope: 0.2,
            flow_init_std: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.encoder_channels.len();
        if self.heads == 0 {
            return Err(Error::Config("model needs at least one head (p >= 1)".into()));
        }
        if depth == 0 || self.decoder_channels.len() != depth {
            return Err(Error::Config(format!(
                "{} encoder levels but {} decoder levels",
                depth,
                self.decoder_channels.len()
            )));
        }
        if !self.size.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{depth}",
                self.size
            )));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::Config(format!("leaky-ReLU slope {} not in [0,1)", self.slope)));
        }
        Ok(())
    }
}

/// Kernel `[F,C,3,3]` and bias `[F]` of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn kaiming(cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = gain / ((cin * 9) as f64).sqrt();
        Self::normal(cin, cout, std, rng)
    }

    fn normal(cin: usize, cout: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        ConvParams {
            kernel: Tensor::from_fn(&[cout, cin, 3, 3], |_| dist.sample(rng)),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub convs: Vec<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub convs: Vec<ConvParams>,
    pub flow: ConvParams,
}

/// All trainable tensors. With a shared encoder there is exactly one
/// encoder; otherwise every head owns a full replica.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoders: Vec<EncoderParams>,
    pub heads: Vec<HeadParams>,
}

impl ModelParams {
    /// Kaiming-He normal initialization (fan-in, leaky-ReLU gain); the
    /// displacement layer starts near zero.
    pub fn init(seed: u64, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.slope * config.slope)).sqrt();
        let n_enc = if config.share_encoder { 1 } else { config.heads };
        let enc = &config.encoder_channels;
        let dec = &config.decoder_channels;
        let depth = enc.len();

        let encoders = (0..n_enc)
            .map(|_| {
                let mut cin = 2;
                let convs = enc
                    .iter()
                    .map(|&c| {
                        let p = ConvParams::kaiming(cin, c, gain, &mut rng);
                        cin = c;
                        p
                    })
                    .collect();
                EncoderParams { convs }
            })
            .collect();

        let heads = (0..config.heads)
            .map(|_| {
                let mut convs = Vec::with_capacity(depth);
                convs.push(ConvParams::kaiming(enc[depth - 1], dec[0], gain, &mut rng));
                for level in 1..depth {
                    let cin = dec[level - 1] + enc[depth - 1 - level];
                    convs.push(ConvParams::kaiming(cin, dec[level], gain, &mut rng));
                }
                let flow = ConvParams::normal(dec[depth - 1], 2, config.flow_init_std, &mut rng);
                HeadParams { convs, flow }
            })
            .collect();

        Ok(ModelParams {
            config: config.clone(),
            encoders,
            heads,
        })
    }

    pub fn encoder_for(&self, head: usize) -> usize {
        if self.config.share_encoder {
            0
        } else {
            head
        }
    }

    /// Every tensor in canonical order: encoders, then heads.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for e in &self.encoders {
            for c in &e.convs {
                out.push(&c.kernel);
                out.push(&c.bias);
            }
        }
        for h in &self.heads {
            for c in h.convs.iter().chain(std::iter::once(&h.flow)) {
                out.push(&c.kernel);
                out.push(&c.bias);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for e in &mut self.encoders {
            for c in &mut e.convs {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
        }
        for h in &mut self.heads {
            for c in h.convs.iter_mut().chain(std::iter::once(&mut h.flow)) {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut bind_conv = |c: &ConvParams| (tape.param(c.kernel.clone()), tape.param(c.bias.clone()));
        let encoders = self
            .encoders
            .iter()
            .map(|e| e.convs.iter().map(&mut bind_conv).collect())
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|h| BoundHead {
                convs: h.convs.iter().map(&mut bind_conv).collect(),
                flow: bind_conv(&h.flow),
            })
            .collect();
        BoundParams { encoders, heads }
    }
}

struct BoundHead {
    convs: Vec<(Var, Var)>,
    flow: (Var, Var),
}

/// Tape handles of a [`ModelParams`], in the same canonical order.
pub struct BoundParams {
    encoders: Vec<Vec<(Var, Var)>>,
    heads: Vec<BoundHead>,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for e in &self.encoders {
            for &(k, b) in e {
                out.extend([k, b]);
            }
        }
        for h in &self.heads {
            for &(k, b) in h.convs.iter().chain(std::iter::once(&h.flow)) {
                out.extend([k, b]);
            }
        }
        out
    }

    /// Gradients in canonical order (zeros where backward never reached).
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

/// The images and masks of a pair recorded as constants.
pub struct PairVars {
    pub source: Var,
    pub target: Var,
    pub source_mask: Var,
    pub target_mask: Var,
    pub input: Var,
    ncc_target: NccTarget,
}

struct NccTarget {
    sum: Var,
    var: Var,
    image: Var,
}

impl PairVars {
    pub fn record(tape: &mut Tape, pair: &RegistrationPair) -> Result<Self> {
        pair.validate()?;
        let source = tape.constant(pair.source_image.clone());
        let target = tape.constant(pair.target_image.clone());
        let source_mask = tape.constant(pair.source_mask.clone());
        let target_mask = tape.constant(pair.target_mask.clone());
        let input = tape.concat(source, target)?;
        let ncc_target = ncc_stats(tape, target)?;
        Ok(PairVars {
            source,
            target,
            source_mask,
            target_mask,
            input,
            ncc_target,
        })
    }
}

fn conv_block(
    tape: &mut Tape,
    x: Var,
    (k, b): (Var, Var),
    stride: usize,
    slope: Option<f64>,
) -> Result<Var> {
    let y = tape.conv2d(x, k, stride, 1)?;
    let y = tape.bias_add(y, b)?;
    Ok(match slope {
        Some(s) => tape.leaky_relu(y, s),
        None => y,
    })
}

fn encode(tape: &mut Tape, convs: &[(Var, Var)], input: Var, slope: f64) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(convs.len());
    let mut x = input;
    for &c in convs {
        x = conv_block(tape, x, c, 2, Some(slope))?;
        feats.push(x);
    }
    Ok(feats)
}

fn decode(tape: &mut Tape, head: &BoundHead, feats: &[Var], slope: f64) -> Result<Var> {
    let depth = feats.len();
    let mut x = conv_block(tape, feats[depth - 1], head.convs[0], 1, Some(slope))?;
    for level in 1..depth {
        let up = tape.upsample_bilinear(x, 2)?;
        let cat = tape.concat(up, feats[depth - 1 - level])?;
        x = conv_block(tape, cat, head.convs[level], 1, Some(slope))?;
    }
    // Displacement predicted at half resolution: upsample and rescale to
    // full-resolution voxel units.
    let flow = conv_block(tape, x, head.flow, 1, None)?;
    let flow = tape.upsample_bilinear(flow, 2)?;
    Ok(tape.scale(flow, 2.0))
}

/// Displacement fields of all heads, in head order, on one tape.
pub fn forward_multi_head(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    inputs: &PairVars,
) -> Result<Vec<Var>> {
    let [_, c, h, w] = tape.value(inputs.input).dims4()?;
    let size = params.config.size;
    if c != 2 || h != size || w != size {
        return Err(Error::Shape(format!(
            "model expects two {size}x{size} images, got {c} channels of {h}x{w}"
        )));
    }
    let slope = params.config.slope;
    let mut shared = None;
    let mut out = Vec::with_capacity(bound.heads.len());
    for (i, head) in bound.heads.iter().enumerate() {
        let feats = if params.config.share_encoder {
            if shared.is_none() {
                shared = Some(encode(tape, &bound.encoders[0], inputs.input, slope)?);
            }
            shared.clone().expect("encoded above")
        } else {
            encode(tape, &bound.encoders[params.encoder_for(i)], inputs.input, slope)?
        };
        out.push(decode(tape, head, &feats, slope)?);
    }
    Ok(out)
}

/// Convenience forward pass that returns plain fields.
pub fn predict(params: &ModelParams, pair: &RegistrationPair) -> Result<Vec<Dvf>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs = PairVars::record(&mut tape, pair)?;
    let dvfs = forward_multi_head(&mut tape, params, &bound, &inputs)?;
    dvfs.into_iter()
        .map(|v| Dvf::new(tape.value(v).clone()))
        .collect()
}

/// `out(p) = input(p + u(p))`, bilinear with border clamping. Works for
/// images and (soft) masks alike.
pub fn warp(tape: &mut Tape, input: Var, dvf: Var) -> Result<Var> {
    let coords = tape.flow_to_coords(dvf)?;
    tape.grid_sample(input, coords)
}

/// Warps a plain tensor with a plain field.
pub fn warp_tensor(input: &Tensor, dvf: &Dvf) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let u = tape.constant(dvf.tensor().clone());
    let y = warp(&mut tape, x, u)?;
    Ok(tape.value(y).clone())
}

fn ncc_stats(tape: &mut Tape, image: Var) -> Result<NccTarget> {
    let n = (NCC_WINDOW * NCC_WINDOW) as f64;
    let sum = tape.box_sum(image, NCC_WINDOW)?;
    let sq = tape.square(image);
    let sq_sum = tape.box_sum(sq, NCC_WINDOW)?;
    let sum2 = tape.square(sum);
    let mean_sq = tape.scale(sum2, 1.0 / n);
    let var = tape.sub(sq_sum, mean_sq)?;
    Ok(NccTarget { sum, var, image })
}

fn loss_ncc_with(tape: &mut Tape, warped: Var, target: &NccTarget) -> Result<Var> {
    let n = (NCC_WINDOW * NCC_WINDOW) as f64;
    let moving = ncc_stats(tape, warped)?;
    let prod = tape.mul(warped, target.image)?;
    let prod_sum = tape.box_sum(prod, NCC_WINDOW)?;
    let sums = tape.mul(moving.sum, target.sum)?;
    let sums = tape.scale(sums, 1.0 / n);
    let cross = tape.sub(prod_sum, sums)?;
    let num = tape.square(cross);
    let den = tape.mul(moving.var, target.var)?;
    let den = tape.offset(den, NCC_EPS);
    let cc = tape.div(num, den)?;
    let mean = tape.mean(cc);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.offset(neg, 1.0))
}

/// One minus the mean squared local normalized cross-correlation over all
/// fully-contained 9x9 windows. Lies in `[0, 1]`.
pub fn loss_ncc(tape: &mut Tape, warped: Var, target: Var) -> Result<Var> {
    let stats = ncc_stats(tape, target)?;
    loss_ncc_with(tape, warped, &stats)
}

/// Mean over voxels, components and both directions of the squared forward
/// differences of the field.
pub fn loss_smooth(tape: &mut Tape, dvf: Var) -> Result<Var> {
    let dx = tape.diff(dvf, 3)?;
    let dy = tape.diff(dvf, 2)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let mx = tape.mean(dx2);
    let my = tape.mean(dy2);
    let s = tape.add(mx, my)?;
    Ok(tape.scale(s, 0.5))
}

/// One minus the channel-mean soft Dice `2 sum(ab) / (sum a^2 + sum b^2 + eps)`.
pub fn loss_dice(tape: &mut Tape, warped_mask: Var, target_mask: Var) -> Result<Var> {
    let ab = tape.mul(warped_mask, target_mask)?;
    let inter = tape.channel_sum(ab)?;
    let inter = tape.scale(inter, 2.0);
    let a2 = tape.square(warped_mask);
    let b2 = tape.square(target_mask);
    let sa = tape.channel_sum(a2)?;
    let sb = tape.channel_sum(b2)?;
    let den = tape.add(sa, sb)?;
    let den = tape.offset(den, DICE_EPS);
    let dice = tape.div(inter, den)?;
    let mean = tape.mean(dice);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.offset(neg, 1.0))
}

/// The per-head objectives: image dissimilarity, field roughness and,
/// with guidance, mask dissimilarity.
#[derive(Clone, Copy, Debug)]
pub struct LossVector {
    pub image: Var,
    pub smooth: Var,
    pub seg: Option<Var>,
}

impl LossVector {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.image, self.smooth];
        v.extend(self.seg);
        v
    }

    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        self.vars().into_iter().map(|v| tape.item(v)).collect()
    }
}

/// Losses of one predicted field against the pair.
pub fn loss_vector(tape: &mut Tape, inputs: &PairVars, dvf: Var, guidance: bool) -> Result<LossVector> {
    let warped = warp(tape, inputs.source, dvf)?;
    let image = loss_ncc_with(tape, warped, &inputs.ncc_target)?;
    let smooth = loss_smooth(tape, dvf)?;
    let seg = if guidance {
        let wm = warp(tape, inputs.source_mask, dvf)?;
        Some(loss_dice(tape, wm, inputs.target_mask)?)
    } else {
        None
    };
    Ok(LossVector { image, smooth, seg })
}

/// `sum_k w_k L_k` with the weights entering as constants.
pub fn weighted_total(tape: &mut Tape, losses: &LossVector, weights: &[f64]) -> Result<Var> {
    let vars = losses.vars();
    if weights.len() != vars.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} objectives",
            weights.len(),
            vars.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Contract(format!("weights must be nonnegative: {weights:?}")));
    }
    let mut total: Option<Var> = None;
    for (&v, &w) in vars.iter().zip(weights) {
        let term = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least two objectives"))
}
