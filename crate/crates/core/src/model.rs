//! Encoder, code-injected decoder and latent discriminator.
//!
//! The encoder is a stack of `L` Conv-BN-LeakyReLU blocks, each halving the
//! spatial size. The decoder mirrors it with transposed convolutions; every
//! decoder block receives `2n` extra constant channels carrying the attribute
//! code. The discriminator sees only the latent map and predicts one
//! probability per attribute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConvBlock, ConvBlockCache, ConvBlockSpec, Dense, Direction};
use crate::error::{FaderError, Result};
use crate::nn::{self, Activation};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub n_attributes: usize,
    pub n_layers: usize,
    pub base_filters: usize,
    pub filter_cap: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub dis_hidden: usize,
    pub code_min: f64,
    pub code_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            n_attributes: 2,
            n_layers: 4,
            base_filters: 16,
            filter_cap: 512,
            leaky_slope: 0.2,
            dropout_rate: 0.3,
            dis_hidden: 512,
            code_min: -1.0,
            code_max: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FaderError::Config(m));
        if self.image_size < 4 || !self.image_size.is_power_of_two() {
            return bad(format!("image size must be a power of two, got {}", self.image_size));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.image_size >> self.n_layers < 2 || !self.image_size.is_multiple_of(1 << self.n_layers) {
            return bad(format!(
                "image size {} with {} layers leaves a latent smaller than 2x2",
                self.image_size, self.n_layers
            ));
        }
        if self.channels == 0 || self.n_attributes == 0 || self.base_filters == 0 || self.dis_hidden == 0 {
            return bad("channels, n_attributes, base_filters and dis_hidden must be positive".into());
        }
        if self.filter_cap < self.base_filters {
            return bad("filter_cap must be at least base_filters".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        if !(self.code_min <= 0.0 && self.code_max >= 1.0) {
            return bad(format!(
                "code range [{}, {}] must contain [0, 1]",
                self.code_min, self.code_max
            ));
        }
        Ok(())
    }

    /// Filter count of encoder layer `i`: `min(base · 2^i, cap)`.
    pub fn encoder_filters(&self) -> Vec<usize> {
        (0..self.n_layers)
            .map(|i| {
                self.base_filters
                    .checked_shl(i as u32)
                    .unwrap_or(usize::MAX)
                    .min(self.filter_cap)
            })
            .collect()
    }

    pub fn latent_channels(&self) -> usize {
        *self.encoder_filters().last().expect("n_layers >= 1")
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.n_layers
    }

    /// `[channels, size, size]` of one latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels(), self.latent_size(), self.latent_size()]
    }

    pub fn code_len(&self) -> usize {
        2 * self.n_attributes
    }

    /// Input channel counts of the decoder blocks, latent side first.
    pub fn decoder_input_channels(&self) -> Vec<usize> {
        self.encoder_filters()
            .iter()
            .rev()
            .map(|f| f + self.code_len())
            .collect()
    }

    pub fn discriminator_filters(&self) -> usize {
        (2 * self.latent_channels()).min(512)
    }

    pub fn code_range(&self) -> (f64, f64) {
        (self.code_min, self.code_max)
    }
}

/// Per-attribute pairs `[1 - α_k, α_k]`, flattened to length `2n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCode {
    values: Vec<f64>,
}

impl AttributeCode {
    /// Continuous code; every `α_k` must lie within `range`.
    pub fn from_alphas(alphas: &[f64], range: (f64, f64)) -> Result<Self> {
        if let Some((k, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !a.is_finite() || **a < range.0 || **a > range.1)
        {
            return Err(FaderError::Range(format!(
                "alpha[{k}] = {a} outside code range [{}, {}]",
                range.0, range.1
            )));
        }
        Ok(Self::unchecked(alphas))
    }

    /// Exact one-hot code for binary labels.
    pub fn from_bits(bits: &[u8]) -> Self {
        let alphas: Vec<f64> = bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect();
        Self::unchecked(&alphas)
    }

    fn unchecked(alphas: &[f64]) -> Self {
        Self {
            values: alphas.iter().flat_map(|&a| [1.0 - a, a]).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_attributes(&self) -> usize {
        self.values.len() / 2
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.values.chunks(2).map(|p| p[1]).collect()
    }
}

/// Alias of [`AttributeCode::from_alphas`].
pub fn make_code(alphas: &[f64], range: (f64, f64)) -> Result<AttributeCode> {
    AttributeCode::from_alphas(alphas, range)
}

/// Rearranges a batch of codes into `2n` per-channel value lists.
pub fn code_channels<T: Real>(codes: &[AttributeCode]) -> Vec<Vec<T>> {
    let len = codes.first().map_or(0, |c| c.values.len());
    (0..len)
        .map(|j| codes.iter().map(|c| T::lit(c.values[j])).collect())
        .collect()
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    blocks: Vec<ConvBlock>,
}

pub struct EncoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub(crate) fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut cin = config.channels;
        let blocks = config
            .encoder_filters()
            .into_iter()
            .enumerate()
            .map(|(i, cout)| {
                let block = ConvBlock::build(
                    ConvBlockSpec {
                        name: &format!("block{i}"),
                        direction: Direction::Down,
                        cin,
                        cout,
                        batch_norm: true,
                        activation: Activation::LeakyRelu(config.leaky_slope),
                    },
                    &mut params,
                    &mut buffers,
                    rng,
                );
                cin = cout;
                block
            })
            .collect();
        Self {
            params,
            buffers,
            blocks,
        }
    }

    pub fn forward_eval(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_eval(&self.params, &self.buffers, &h);
        }
        h
    }

    /// Batch-statistics forward; returns the latent and the cache for [`Encoder::backward`].
    pub fn forward_train(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, EncoderCache<T>) {
        let mut caches: Vec<ConvBlockCache<T>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let input = caches.last().map_or(x, |c| &c.output);
            let cache = b.forward_train(&self.params, input);
            caches.push(cache);
        }
        let z = caches.last().expect("at least one block").output.clone();
        (z, EncoderCache { blocks: caches })
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dz: FeatureMap<T>) -> ParamStore<T> {
        let mut grads = self.params.zeros_like();
        let mut d = dz;
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            match b.backward(&self.params, c, d, &mut grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        grads
    }

    pub fn absorb_batch_stats(&mut self, cache: &EncoderCache<T>) {
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.absorb_batch_stats(&mut self.buffers, c);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    blocks: Vec<ConvBlock>,
    code_len: usize,
}

pub struct DecoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
}

impl<T: Real> Decoder<T> {
    pub(crate) fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let filters = config.encoder_filters();
        let inputs = config.decoder_input_channels();
        let last = config.n_layers - 1;
        let blocks = inputs
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                let is_output = i == last;
                let cout = if is_output {
                    config.channels
                } else {
                    filters[last - 1 - i]
                };
                ConvBlock::build(
                    ConvBlockSpec {
                        name: &format!("block{i}"),
                        direction: Direction::Up,
                        cin,
                        cout,
                        batch_norm: !is_output,
                        activation: if is_output { Activation::Tanh } else { Activation::Relu },
                    },
                    &mut params,
                    &mut buffers,
                    rng,
                )
            })
            .collect();
        Self {
            params,
            buffers,
            blocks,
            code_len: config.code_len(),
        }
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    fn check_code(&self, code: &[Vec<T>], n: usize) {
        assert_eq!(code.len(), self.code_len, "code length");
        assert!(code.iter().all(|c| c.len() == n), "one code per sample");
    }

    pub fn forward_eval(&self, z: &FeatureMap<T>, code: &[Vec<T>]) -> FeatureMap<T> {
        self.check_code(code, z.n);
        let mut h = z.clone();
        for b in &self.blocks {
            h = b.forward_eval(&self.params, &self.buffers, &h.with_constant_channels(code));
        }
        h
    }

    pub fn forward_train(&self, z: &FeatureMap<T>, code: &[Vec<T>]) -> (FeatureMap<T>, DecoderCache<T>) {
        self.check_code(code, z.n);
        let mut caches: Vec<ConvBlockCache<T>> = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let input = caches.last().map_or(z, |c| &c.output).with_constant_channels(code);
            caches.push(b.forward_train(&self.params, &input));
        }
        let out = caches.last().expect("at least one block").output.clone();
        (out, DecoderCache { blocks: caches })
    }

    /// Returns parameter gradients and the latent gradient.
    pub fn backward(&self, cache: &DecoderCache<T>, dout: FeatureMap<T>) -> (ParamStore<T>, FeatureMap<T>) {
        let mut grads = self.params.zeros_like();
        let mut d = dout;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dx = b
                .backward(&self.params, c, d, &mut grads, true)
                .expect("input gradient requested");
            d = dx.truncate_channels(b.cin - self.code_len);
        }
        (grads, d)
    }

    pub fn absorb_batch_stats(&mut self, cache: &DecoderCache<T>) {
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.absorb_batch_stats(&mut self.buffers, c);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
    conv: ConvBlock,
    fc1: Dense,
    fc2: Dense,
    slope: f64,
    dropout_rate: f64,
}

pub struct DiscriminatorCache<T> {
    conv: ConvBlockCache<T>,
    conv_dims: (usize, usize, usize),
    mask1: Vec<T>,
    fc1_in: Vec<T>,
    hidden: Vec<T>,
    mask2: Vec<T>,
    fc2_in: Vec<T>,
    /// `[n_attributes, N]`
    pub probs: Vec<T>,
    pub batch: usize,
}

impl<T: Real> Discriminator<T> {
    pub(crate) fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let filters = config.discriminator_filters();
        let conv = ConvBlock::build(
            ConvBlockSpec {
                name: "conv",
                direction: Direction::Down,
                cin: config.latent_channels(),
                cout: filters,
                batch_norm: true,
                activation: Activation::LeakyRelu(config.leaky_slope),
            },
            &mut params,
            &mut buffers,
            rng,
        );
        let spatial = (config.latent_size() / 2).pow(2);
        let fc1 = Dense::build(
            "fc1",
            filters * spatial,
            config.dis_hidden,
            nn::rectifier_gain(config.leaky_slope),
            &mut params,
            rng,
        );
        let fc2 = Dense::build("fc2", config.dis_hidden, config.n_attributes, 1.0, &mut params, rng);
        Self {
            params,
            buffers,
            conv,
            fc1,
            fc2,
            slope: config.leaky_slope,
            dropout_rate: config.dropout_rate,
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.fc2.fout
    }

    pub fn final_layer(&self) -> &Dense {
        &self.fc2
    }

    fn head(&self, features: &[T], n: usize, mask1: &[T], mask2: &[T]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let fc1_in: Vec<T> = if mask1.is_empty() {
            features.to_vec()
        } else {
            features.iter().zip(mask1).map(|(&a, &m)| a * m).collect()
        };
        let mut hidden = self.fc1.forward(&self.params, &fc1_in, n);
        Activation::LeakyRelu(self.slope).apply(&mut hidden);
        let fc2_in: Vec<T> = if mask2.is_empty() {
            hidden.clone()
        } else {
            hidden.iter().zip(mask2).map(|(&a, &m)| a * m).collect()
        };
        let mut probs = self.fc2.forward(&self.params, &fc2_in, n);
        probs.iter_mut().for_each(|v| *v = nn::sigmoid(*v));
        (fc1_in, hidden, fc2_in, probs)
    }

    /// Inference forward: running statistics, no dropout. Returns `[n_attributes, N]` probabilities.
    pub fn forward_eval(&self, z: &FeatureMap<T>) -> Vec<T> {
        let h = self.conv.forward_eval(&self.params, &self.buffers, z);
        let feats = nn::flatten(&h);
        self.head(&feats, z.n, &[], &[]).3
    }

    /// Training forward with batch statistics; dropout masks are drawn from `rng` when given.
    pub fn forward_train<R: Rng + ?Sized>(&self, z: &FeatureMap<T>, rng: Option<&mut R>) -> DiscriminatorCache<T> {
        let conv = self.conv.forward_train(&self.params, z);
        let feats = nn::flatten(&conv.output);
        let n = z.n;
        let (mask1, mask2) = match rng {
            Some(rng) if self.dropout_rate > 0.0 => (
                nn::dropout_mask(feats.len(), self.dropout_rate, rng),
                nn::dropout_mask(self.fc1.fout * n, self.dropout_rate, rng),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        let (fc1_in, hidden, fc2_in, probs) = self.head(&feats, n, &mask1, &mask2);
        let o = &conv.output;
        let conv_dims = (o.c, o.h, o.w);
        DiscriminatorCache {
            conv,
            conv_dims,
            mask1,
            fc1_in,
            hidden,
            mask2,
            fc2_in,
            probs,
            batch: n,
        }
    }

    /// Backpropagates a gradient w.r.t. the pre-sigmoid logits (`[n_attributes, N]`).
    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        dlogits: &[T],
        want_dz: bool,
    ) -> (ParamStore<T>, Option<FeatureMap<T>>) {
        let n = cache.batch;
        let mut grads = self.params.zeros_like();
        let mut dh = self
            .fc2
            .backward(&self.params, &cache.fc2_in, dlogits, n, &mut grads, true)
            .expect("dx requested");
        if !cache.mask2.is_empty() {
            dh.iter_mut().zip(&cache.mask2).for_each(|(d, &m)| *d = *d * m);
        }
        Activation::LeakyRelu(self.slope).backward(&cache.hidden, &mut dh);
        let mut dfeat = self
            .fc1
            .backward(&self.params, &cache.fc1_in, &dh, n, &mut grads, true)
            .expect("dx requested");
        if !cache.mask1.is_empty() {
            dfeat.iter_mut().zip(&cache.mask1).for_each(|(d, &m)| *d = *d * m);
        }
        let (c, h, w) = cache.conv_dims;
        let dconv = nn::unflatten(&dfeat, c, n, h, w);
        let dz = self.conv.backward(&self.params, &cache.conv, dconv, &mut grads, want_dz);
        (grads, dz)
    }

    pub fn absorb_batch_stats(&mut self, cache: &DiscriminatorCache<T>) {
        self.conv.absorb_batch_stats(&mut self.buffers, &cache.conv);
    }
}

/// All learnable weights of the model.
#[derive(Clone, Debug)]
pub struct FaderModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    pub discriminator: Discriminator<T>,
}

/// Alias used by the training and checkpoint code.
pub type ModelParams<T> = FaderModel<T>;

impl<T: Real> FaderModel<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::build(config, &mut rng);
        let decoder = Decoder::build(config, &mut rng);
        let discriminator = Discriminator::build(config, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn cast<U: Real>(&self) -> FaderModel<U> {
        fn net<A: Real, B: Real>(p: &ParamStore<A>, b: &ParamStore<A>) -> (ParamStore<B>, ParamStore<B>) {
            (p.cast(), b.cast())
        }
        let (ep, eb) = net(&self.encoder.params, &self.encoder.buffers);
        let (dp, db) = net(&self.decoder.params, &self.decoder.buffers);
        let (sp, sb) = net(&self.discriminator.params, &self.discriminator.buffers);
        FaderModel {
            config: self.config.clone(),
            encoder: Encoder {
                params: ep,
                buffers: eb,
                blocks: self.encoder.blocks.clone(),
            },
            decoder: Decoder {
                params: dp,
                buffers: db,
                blocks: self.decoder.blocks.clone(),
                code_len: self.decoder.code_len,
            },
            discriminator: Discriminator {
                params: sp,
                buffers: sb,
                conv: self.discriminator.conv.clone(),
                fc1: self.discriminator.fc1.clone(),
                fc2: self.discriminator.fc2.clone(),
                slope: self.discriminator.slope,
                dropout_rate: self.discriminator.dropout_rate,
            },
        }
    }

    /// Named view of every stored tensor: `(group, store)` pairs, parameters then buffers.
    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 6] {
        [
            ("encoder.", &self.encoder.params),
            ("encoder.buffers.", &self.encoder.buffers),
            ("decoder.", &self.decoder.params),
            ("decoder.buffers.", &self.decoder.buffers),
            ("discriminator.", &self.discriminator.params),
            ("discriminator.buffers.", &self.discriminator.buffers),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 6] {
        [
            ("encoder.", &mut self.encoder.params),
            ("encoder.buffers.", &mut self.encoder.buffers),
            ("decoder.", &mut self.decoder.params),
            ("decoder.buffers.", &mut self.decoder.buffers),
            ("discriminator.", &mut self.discriminator.params),
            ("discriminator.buffers.", &mut self.discriminator.buffers),
        ]
    }

    pub fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let expect = [c.channels, c.image_size, c.image_size];
        match images.shape() {
            [_, rest @ ..] if rest == expect => Ok(()),
            s => Err(FaderError::Shape(format!(
                "expected images of shape [N, {}, {}, {}], got {s:?}",
                expect[0], expect[1], expect[2]
            ))),
        }
    }

    fn check_latent(&self, latent: &Tensor<T>) -> Result<()> {
        let expect = self.config.latent_shape();
        match latent.shape() {
            [_, rest @ ..] if rest == expect => Ok(()),
            s => Err(FaderError::Shape(format!(
                "expected latent of shape [N, {}, {}, {}], got {s:?}",
                expect[0], expect[1], expect[2]
            ))),
        }
    }

    /// Inference-mode encoding of an `[N, C, H, W]` batch.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let x = FeatureMap::from_nchw(images)?;
        Ok(self.encoder.forward_eval(&x).to_nchw())
    }

    /// Training-mode (batch statistics) encoding, without touching running estimates.
    pub fn encode_batch_stats(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let x = FeatureMap::from_nchw(images)?;
        Ok(self.encoder.forward_train(&x).0.to_nchw())
    }

    pub fn decode(&self, latent: &Tensor<T>, codes: &[AttributeCode]) -> Result<Tensor<T>> {
        self.check_latent(latent)?;
        let n = latent.shape()[0];
        if codes.len() != n {
            return Err(FaderError::Shape(format!("{} codes for a batch of {n}", codes.len())));
        }
        if let Some(bad) = codes.iter().find(|c| c.values().len() != self.config.code_len()) {
            return Err(FaderError::Shape(format!(
                "code length {} does not match 2n = {}",
                bad.values().len(),
                self.config.code_len()
            )));
        }
        let z = FeatureMap::from_nchw(latent)?;
        Ok(self.decoder.forward_eval(&z, &code_channels(codes)).to_nchw())
    }

    /// `[N, n]` attribute probabilities. With `dropout` set, dropout masks are drawn
    /// from it and batch statistics are used.
    pub fn discriminate<R: Rng + ?Sized>(&self, latent: &Tensor<T>, dropout: Option<&mut R>) -> Result<Tensor<T>> {
        self.check_latent(latent)?;
        let z = FeatureMap::from_nchw(latent)?;
        let n = z.n;
        let k = self.config.n_attributes;
        let probs = match dropout {
            Some(rng) => self.discriminator.forward_train(&z, Some(rng)).probs,
            None => self.discriminator.forward_eval(&z),
        };
        let mut out = vec![T::zero(); n * k];
        for a in 0..k {
            for b in 0..n {
                out[b * k + a] = probs[a * n + b];
            }
        }
        Tensor::from_vec(&[n, k], out)
    }

    /// `decode(encode(x), code)` in inference mode.
    pub fn reconstruct(&self, images: &Tensor<T>, codes: &[AttributeCode]) -> Result<Tensor<T>> {
        let z = self.encode(images)?;
        self.decode(&z, codes)
    }
}
