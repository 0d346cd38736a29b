//! U-Net backbone and the salient-attention variant.
//!
//! The plain network is a five-level encoder (two 3x3 convolutions + ReLU per
//! level, 2x2 max-pool between levels) and a mirrored decoder (2x nearest
//! up-sampling, 3x3 convolution, concatenation with the encoder features of the
//! same level, two 3x3 convolutions). A 1x1 convolution and a sigmoid produce
//! the probability map.
//!
//! The salient-attention network replaces each of the four encoder
//! down-transitions with an [`AttentionBlock`]: the pooled features `P_n` are
//! multiplied by a per-pixel coefficient map `A` computed from `P_n` and the
//! saliency map max-pooled to the same resolution. Skip connections carry the
//! un-attended features `F_n`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{self, Conv2d, Pooled};
use crate::nn::{Grads, ParamStore, Scalar, Tensor};

pub const ENCODER_LEVELS: usize = 5;
pub const ATTENTION_LEVELS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("the salient-attention network needs a saliency map")]
    MissingSaliency,
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: [usize; 4],
        got: [usize; 4],
    },
}

/// Network architecture. `UnetSa` serves both the full-saliency and the
/// single-contour variants; they differ only in their saliency inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Architecture {
    Unet,
    UnetSa,
}

/// Experimental model variant: architecture plus saliency preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "unet")]
    Unet,
    /// Salient attention with full saliency maps.
    #[serde(rename = "unet-sa")]
    UnetSa,
    /// Salient attention with maps reduced to their top contour.
    #[serde(rename = "unet-sa-c")]
    UnetSaC,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Unet, Variant::UnetSa, Variant::UnetSaC];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Unet => Architecture::Unet,
            Variant::UnetSa | Variant::UnetSaC => Architecture::UnetSa,
        }
    }

    pub fn uses_saliency(self) -> bool {
        self != Variant::Unet
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetSa => "unet-sa",
            Variant::UnetSaC => "unet-sa-c",
        }
    }

    /// Display label as used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Unet => "U-Net",
            Variant::UnetSa => "U-Net-SA",
            Variant::UnetSaC => "U-Net-SA-C",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown variant {s:?} (expected unet, unet-sa or unet-sa-c)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Architecture,
    pub input_side: usize,
    pub encoder_filters: [usize; ENCODER_LEVELS],
    pub attention_channels: usize,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Architecture::UnetSa,
            input_side: 256,
            encoder_filters: [32, 32, 64, 64, 128],
            attention_channels: 128,
            init_seed: 0,
        }
    }
}

/// Tensor shapes around attention block `level`, as `(height, width,
/// channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionBlockIo {
    pub level: usize,
    pub feature_in_shape: (usize, usize, usize),
    pub saliency_in_shape: (usize, usize, usize),
    pub attention_map_shape: (usize, usize, usize),
    pub output_shape: (usize, usize, usize),
}

impl ModelSpec {
    pub fn new(variant: Architecture, input_side: usize) -> Self {
        ModelSpec {
            variant,
            input_side,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_side < 16 || self.input_side % 16 != 0 {
            return Err(ModelError::InvalidSpec(format!(
                "input_side {} must be a positive multiple of 16 (four exact 2x poolings)",
                self.input_side
            )));
        }
        if self.encoder_filters.contains(&0) {
            return Err(ModelError::InvalidSpec("encoder filter counts must be positive".into()));
        }
        if self.attention_channels == 0 {
            return Err(ModelError::InvalidSpec("attention_channels must be positive".into()));
        }
        Ok(())
    }

    /// Shape table for the four attention blocks (levels 1..=4).
    pub fn attention_io(&self) -> Vec<AttentionBlockIo> {
        let s = self.input_side;
        (1..=ATTENTION_LEVELS)
            .map(|n| {
                let k = self.encoder_filters[n - 1];
                let side_in = s >> (n - 1);
                let side_out = s >> n;
                AttentionBlockIo {
                    level: n,
                    feature_in_shape: (side_in, side_in, k),
                    saliency_in_shape: (s, s, 1),
                    attention_map_shape: (side_out, side_out, 1),
                    output_shape: (side_out, side_out, k),
                }
            })
            .collect()
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Debug)]
struct DoubleConvTrace<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    output: Tensor<T>,
}

impl DoubleConv {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            first: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, rng),
            second: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, rng),
        }
    }

    fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, input: Tensor<T>) -> DoubleConvTrace<T> {
        let mut hidden = self.first.forward(store, &input);
        layers::relu_inplace(&mut hidden);
        let mut output = self.second.forward(store, &hidden);
        layers::relu_inplace(&mut output);
        DoubleConvTrace { input, hidden, output }
    }

    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        trace: &DoubleConvTrace<T>,
        mut d_out: Tensor<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        layers::relu_backward(&mut d_out, &trace.output);
        let mut d_hidden = self
            .second
            .backward(store, &trace.hidden, &d_out, grads, true)
            .expect("input grad requested");
        layers::relu_backward(&mut d_hidden, &trace.hidden);
        self.first.backward(store, &trace.input, &d_hidden, grads, need_input_grad)
    }
}

/// Salient attention block for encoder level `n`: `O_n = A * P_n` with
/// `P_n = maxpool(F_n)` and `A = sigmoid(conv1x1(relu(conv3x3(relu(conv1x1(P_n)) + relu(conv1x1(S_n))))))`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    level: usize,
    saliency_proj: Conv2d,
    feature_proj: Conv2d,
    refine: Conv2d,
    score: Conv2d,
}

/// Intermediate tensors of one attention block evaluation.
#[derive(Debug)]
pub struct AttentionTrace<T> {
    pooled: Pooled<T>,
    saliency: Tensor<T>,
    saliency_embed: Tensor<T>,
    feature_embed: Tensor<T>,
    merged: Tensor<T>,
    refined: Tensor<T>,
    attention: Tensor<T>,
}

impl<T: Scalar> AttentionTrace<T> {
    /// Max-pooled features `P_n`.
    pub fn pooled(&self) -> &Tensor<T> {
        &self.pooled.out
    }

    /// Attention coefficients `A`, shape `[N, 1, side/2^n, side/2^n]`.
    pub fn attention(&self) -> &Tensor<T> {
        &self.attention
    }

    /// Intermediate map `I_n` (sum of both 128-channel embeddings).
    pub fn merged(&self) -> &Tensor<T> {
        &self.merged
    }
}

impl AttentionBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        level: usize,
        feature_ch: usize,
        attention_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = format!("att{level}");
        AttentionBlock {
            level,
            saliency_proj: Conv2d::new(store, &format!("{name}.saliency_proj"), 1, attention_ch, 1, rng),
            feature_proj: Conv2d::new(store, &format!("{name}.feature_proj"), feature_ch, attention_ch, 1, rng),
            refine: Conv2d::new(store, &format!("{name}.refine"), attention_ch, attention_ch, 3, rng),
            score: Conv2d::new(store, &format!("{name}.score"), attention_ch, 1, 1, rng),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn num_params(&self) -> usize {
        self.saliency_proj.num_params() + self.feature_proj.num_params() + self.refine.num_params() + self.score.num_params()
    }

    /// `features` is `F_n`; `saliency` is the full-resolution map, which is
    /// max-pooled here by `2^n`. Returns `O_n` and the trace.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        saliency: &Tensor<T>,
    ) -> (Tensor<T>, AttentionTrace<T>) {
        let factor = saliency.height() / (features.height() / 2);
        let pooled_saliency = layers::block_max_pool(saliency, factor);
        self.forward_pooled(store, features, pooled_saliency)
    }

    fn forward_pooled<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        saliency: Tensor<T>,
    ) -> (Tensor<T>, AttentionTrace<T>) {
        let pooled = layers::max_pool2(features);
        let mut saliency_embed = self.saliency_proj.forward(store, &saliency);
        layers::relu_inplace(&mut saliency_embed);
        let mut feature_embed = self.feature_proj.forward(store, &pooled.out);
        layers::relu_inplace(&mut feature_embed);
        let mut merged = feature_embed.clone();
        merged.add_assign(&saliency_embed);
        let mut refined = self.refine.forward(store, &merged);
        layers::relu_inplace(&mut refined);
        let attention = layers::sigmoid(&self.score.forward(store, &refined));
        let output = layers::gate_channels(&attention, &pooled.out);
        (
            output,
            AttentionTrace {
                pooled,
                saliency,
                saliency_embed,
                feature_embed,
                merged,
                refined,
                attention,
            },
        )
    }

    /// Returns the gradient with respect to `F_n`.
    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        trace: &AttentionTrace<T>,
        d_out: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Tensor<T> {
        let (d_attention, mut d_pooled) = layers::gate_channels_backward(d_out, &trace.attention, &trace.pooled.out);
        let d_score = layers::sigmoid_backward(&d_attention, &trace.attention);
        let mut d_refined = self
            .score
            .backward(store, &trace.refined, &d_score, grads, true)
            .expect("input grad requested");
        layers::relu_backward(&mut d_refined, &trace.refined);
        let d_merged = self
            .refine
            .backward(store, &trace.merged, &d_refined, grads, true)
            .expect("input grad requested");
        let mut d_feature_embed = d_merged.clone();
        layers::relu_backward(&mut d_feature_embed, &trace.feature_embed);
        let d_pooled_proj = self
            .feature_proj
            .backward(store, &trace.pooled.out, &d_feature_embed, grads, true)
            .expect("input grad requested");
        d_pooled.add_assign(&d_pooled_proj);
        let mut d_saliency_embed = d_merged;
        layers::relu_backward(&mut d_saliency_embed, &trace.saliency_embed);
        self.saliency_proj
            .backward(store, &trace.saliency, &d_saliency_embed, grads, false);
        layers::max_pool2_backward(&d_pooled, &trace.pooled.argmax)
    }
}

/// Decoder stage: up-sample, 3x3 convolution, concatenate with the skip
/// features, two 3x3 convolutions.
#[derive(Debug, Clone)]
struct UpBlock {
    up_conv: Conv2d,
    convs: DoubleConv,
    skip_channels: usize,
}

#[derive(Debug)]
struct UpTrace<T> {
    upsampled: Tensor<T>,
    up_activated: Tensor<T>,
    convs: DoubleConvTrace<T>,
}

impl UpBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, level: usize, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        UpBlock {
            up_conv: Conv2d::new(store, &format!("dec{level}.up"), in_ch, out_ch, 3, rng),
            convs: DoubleConv::new(store, &format!("dec{level}"), 2 * out_ch, out_ch, rng),
            skip_channels: out_ch,
        }
    }

    fn num_params(&self) -> usize {
        self.up_conv.num_params() + self.convs.num_params()
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, below: &Tensor<T>, skip: &Tensor<T>) -> UpTrace<T> {
        let upsampled = layers::upsample2(below);
        let mut up_activated = self.up_conv.forward(store, &upsampled);
        layers::relu_inplace(&mut up_activated);
        let merged = Tensor::concat_channels(skip, &up_activated);
        let convs = self.convs.forward(store, merged);
        UpTrace {
            upsampled,
            up_activated,
            convs,
        }
    }

    /// Returns `(d_below, d_skip)`.
    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        trace: &UpTrace<T>,
        d_out: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let d_merged = self
            .convs
            .backward(store, &trace.convs, d_out, grads, true)
            .expect("input grad requested");
        let (d_skip, mut d_up) = d_merged.split_channels(self.skip_channels);
        layers::relu_backward(&mut d_up, &trace.up_activated);
        let d_upsampled = self
            .up_conv
            .backward(store, &trace.upsampled, &d_up, grads, true)
            .expect("input grad requested");
        (layers::upsample2_backward(&d_upsampled), d_skip)
    }
}

#[derive(Debug)]
enum Transition<T> {
    Pool(Vec<u8>),
    Attention(AttentionTrace<T>),
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug)]
pub struct Trace<T> {
    encoder: Vec<DoubleConvTrace<T>>,
    transitions: Vec<Transition<T>>,
    decoder: Vec<UpTrace<T>>,
    probabilities: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn probabilities(&self) -> &Tensor<T> {
        &self.probabilities
    }

    /// Trace of attention block `level` (1-based), if the network has one.
    pub fn attention(&self, level: usize) -> Option<&AttentionTrace<T>> {
        match self.transitions.get(level.checked_sub(1)?)? {
            Transition::Attention(t) => Some(t),
            Transition::Pool(_) => None,
        }
    }

    /// Encoder features `F_n` (1-based level) before any down-transition.
    pub fn encoder_features(&self, level: usize) -> &Tensor<T> {
        &self.encoder[level - 1].output
    }

    /// Output of the down-transition after level `level` (`O_n` for attention
    /// networks), i.e. the input of encoder level `level + 1`.
    pub fn transition_output(&self, level: usize) -> &Tensor<T> {
        &self.encoder[level].input
    }
}

/// Sets the score layer of attention blocks so that `A` is constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionPin {
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
    encoder: Vec<DoubleConv>,
    attention: Vec<AttentionBlock>,
    decoder: Vec<UpBlock>,
    head: Conv2d,
}

impl<T: Scalar> Network<T> {
    /// Builds the network with Xavier-normal weights drawn from
    /// `spec.init_seed`.
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = ParamStore::new();
        let f = spec.encoder_filters;

        let mut encoder = Vec::with_capacity(ENCODER_LEVELS);
        let mut attention = Vec::new();
        let mut in_ch = 1;
        for level in 1..=ENCODER_LEVELS {
            encoder.push(DoubleConv::new(&mut params, &format!("enc{level}"), in_ch, f[level - 1], &mut rng));
            if spec.variant == Architecture::UnetSa && level <= ATTENTION_LEVELS {
                attention.push(AttentionBlock::new(&mut params, level, f[level - 1], spec.attention_channels, &mut rng));
            }
            in_ch = f[level - 1];
        }
        let mut decoder = Vec::with_capacity(ATTENTION_LEVELS);
        let mut below = f[ENCODER_LEVELS - 1];
        for level in (1..=ATTENTION_LEVELS).rev() {
            decoder.push(UpBlock::new(&mut params, level, below, f[level - 1], &mut rng));
            below = f[level - 1];
        }
        let head = Conv2d::new(&mut params, "head", f[0], 1, 1, &mut rng);

        let net = Network {
            spec,
            params,
            encoder,
            attention,
            decoder,
            head,
        };
        net.check_attention_table()?;
        Ok(net)
    }

    /// Cross-checks the shape table against the constructed layers.
    fn check_attention_table(&self) -> Result<(), ModelError> {
        for (block, io) in self.attention.iter().zip(self.spec.attention_io()) {
            let (h, w, k) = io.feature_in_shape;
            let (oh, ow, ok) = io.output_shape;
            if oh * 2 != h || ow * 2 != w || ok != k || block.feature_proj.in_ch != k || block.level != io.level {
                return Err(ModelError::InvalidSpec(format!(
                    "attention block {} shape table inconsistent: {io:?}",
                    block.level
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds the layer graph for `spec` around an existing parameter set.
    pub fn from_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self, ModelError> {
        let mut net = Network::new(spec)?;
        if net.params.len() != params.len() {
            return Err(ModelError::InvalidSpec(format!(
                "parameter set has {} tensors, architecture needs {}",
                params.len(),
                net.params.len()
            )));
        }
        for (expect, got) in net.params.iter().zip(params.iter()) {
            if expect.name != got.name || expect.shape != got.shape {
                return Err(ModelError::InvalidSpec(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, expect.name, expect.shape
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameters belonging to the attention blocks only.
    pub fn attention_params(&self) -> usize {
        self.attention.iter().map(AttentionBlock::num_params).sum()
    }

    /// Parameter count from the layer definitions (independent of storage).
    pub fn layer_params(&self) -> usize {
        self.encoder.iter().map(DoubleConv::num_params).sum::<usize>()
            + self.attention_params()
            + self.decoder.iter().map(UpBlock::num_params).sum::<usize>()
            + self.head.num_params()
    }

    pub fn attention_blocks(&self) -> &[AttentionBlock] {
        &self.attention
    }

    /// Overrides every attention block's final 1x1 convolution so the
    /// coefficients saturate at exactly 1 or 0.
    pub fn pin_attention(&mut self, pin: AttentionPin) {
        let bias = match pin {
            AttentionPin::Ones => T::from_f64_lossy(1e3),
            AttentionPin::Zeros => T::from_f64_lossy(-1e3),
        };
        for block in &self.attention {
            self.params.value_mut(block.score.weight).iter_mut().for_each(|w| *w = T::zero());
            self.params.value_mut(block.score.bias).iter_mut().for_each(|b| *b = bias);
        }
    }

    fn check_input(&self, what: &'static str, t: &Tensor<T>, batch: usize) -> Result<(), ModelError> {
        let s = self.spec.input_side;
        let expected = [batch, 1, s, s];
        if t.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                what,
                expected,
                got: t.shape(),
            });
        }
        Ok(())
    }

    /// Inference: returns `[N, 1, side, side]` probabilities. The plain U-Net
    /// ignores `saliency`.
    pub fn forward(&self, image: &Tensor<T>, saliency: Option<&Tensor<T>>) -> Result<Tensor<T>, ModelError> {
        self.forward_traced(image, saliency).map(|t| t.probabilities)
    }

    pub fn forward_traced(&self, image: &Tensor<T>, saliency: Option<&Tensor<T>>) -> Result<Trace<T>, ModelError> {
        let batch = image.batch();
        self.check_input("image", image, batch)?;
        let saliency = match (self.spec.variant, saliency) {
            (Architecture::Unet, _) => None,
            (Architecture::UnetSa, None) => return Err(ModelError::MissingSaliency),
            (Architecture::UnetSa, Some(s)) => {
                self.check_input("saliency", s, batch)?;
                Some(s)
            }
        };

        let io = self.spec.attention_io();
        let mut encoder = Vec::with_capacity(ENCODER_LEVELS);
        let mut transitions = Vec::with_capacity(ATTENTION_LEVELS);
        let mut pyramid = saliency.cloned();
        let mut input = image.clone();
        for (idx, block) in self.encoder.iter().enumerate() {
            let trace = block.forward(&self.params, std::mem::replace(&mut input, Tensor::zeros([0; 4])));
            if idx < ATTENTION_LEVELS {
                input = match (&self.spec.variant, pyramid.as_mut()) {
                    (Architecture::UnetSa, Some(level_saliency)) => {
                        let f = &trace.output;
                        let (h, w, k) = io[idx].feature_in_shape;
                        let got = f.shape();
                        if got != [batch, k, h, w] {
                            return Err(ModelError::ShapeMismatch {
                                what: "attention block input",
                                expected: [batch, k, h, w],
                                got,
                            });
                        }
                        // S_n via one more 2x2 max-pool of S_{n-1}
                        *level_saliency = layers::max_pool2(level_saliency).out;
                        let (out, att) = self.attention[idx].forward_pooled(&self.params, f, level_saliency.clone());
                        let (oh, ow, ok) = io[idx].output_shape;
                        assert_eq!(out.shape(), [batch, ok, oh, ow]);
                        transitions.push(Transition::Attention(att));
                        out
                    }
                    _ => {
                        let pooled = layers::max_pool2(&trace.output);
                        transitions.push(Transition::Pool(pooled.argmax));
                        pooled.out
                    }
                };
            }
            encoder.push(trace);
        }

        let mut decoder = Vec::with_capacity(ATTENTION_LEVELS);
        let mut below = encoder[ENCODER_LEVELS - 1].output.clone();
        for (j, up) in self.decoder.iter().enumerate() {
            let level = ATTENTION_LEVELS - j;
            let trace = up.forward(&self.params, &below, &encoder[level - 1].output);
            below = trace.convs.output.clone();
            decoder.push(trace);
        }
        let probabilities = layers::sigmoid(&self.head.forward(&self.params, &below));
        Ok(Trace {
            encoder,
            transitions,
            decoder,
            probabilities,
        })
    }

    /// Back-propagates `d_probabilities` (gradient of the loss with respect to
    /// the output probabilities) and returns parameter gradients.
    pub fn backward(&self, trace: Trace<T>, d_probabilities: &Tensor<T>) -> Grads<T> {
        let mut grads = Grads::zeros_like(&self.params);
        let d_logits = layers::sigmoid_backward(d_probabilities, &trace.probabilities);
        let head_in = &trace.decoder[ATTENTION_LEVELS - 1].convs.output;
        let mut d = self
            .head
            .backward(&self.params, head_in, &d_logits, &mut grads, true)
            .expect("input grad requested");

        let mut d_skip: Vec<Option<Tensor<T>>> = (0..ENCODER_LEVELS).map(|_| None).collect();
        for (j, up) in self.decoder.iter().enumerate().rev() {
            let level = ATTENTION_LEVELS - j;
            let (d_below, ds) = up.backward(&self.params, &trace.decoder[j], d, &mut grads);
            d_skip[level - 1] = Some(ds);
            d = d_below;
        }

        // d now holds the gradient of the bottleneck output F_5.
        for idx in (0..ENCODER_LEVELS).rev() {
            let mut d_features = d;
            if let Some(ds) = d_skip[idx].take() {
                d_features.add_assign(&ds);
            }
            let need_input = idx > 0;
            let d_input = self.encoder[idx].backward(&self.params, &trace.encoder[idx], d_features, &mut grads, need_input);
            if idx == 0 {
                break;
            }
            let d_transition = d_input.expect("input grad requested");
            d = match &trace.transitions[idx - 1] {
                Transition::Pool(argmax) => layers::max_pool2_backward(&d_transition, argmax),
                Transition::Attention(att) => self.attention[idx - 1].backward(&self.params, att, &d_transition, &mut grads),
            };
        }
        grads
    }
}
