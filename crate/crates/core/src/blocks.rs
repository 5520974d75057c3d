//! Composite layers: convolution blocks and dense layers bound to a [`ParamStore`].

use rand::Rng;

use crate::nn::{self, Activation, BatchNormCache};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{FeatureMap, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Strided convolution, halves spatial size.
    Down,
    /// Transposed convolution, doubles spatial size.
    Up,
}

#[derive(Clone, Debug)]
struct NormSlots {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Convolution (or transposed convolution), optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub direction: Direction,
    pub cin: usize,
    pub cout: usize,
    pub activation: Activation,
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<NormSlots>,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache<T> {
    input: Option<FeatureMap<T>>,
    cols: Option<Vec<T>>,
    in_hw: (usize, usize),
    norm: Option<BatchNormCache<T>>,
    pub output: FeatureMap<T>,
}

pub struct ConvBlockSpec<'a> {
    pub name: &'a str,
    pub direction: Direction,
    pub cin: usize,
    pub cout: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl ConvBlock {
    /// Registers the block's tensors. Blocks without batch norm get a bias.
    pub fn build<T: Real, R: Rng + ?Sized>(
        spec: ConvBlockSpec<'_>,
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let ConvBlockSpec {
            name,
            direction,
            cin,
            cout,
            batch_norm,
            activation,
        } = spec;
        let taps = nn::KERNEL * nn::KERNEL;
        let (shape, fan_in) = match direction {
            Direction::Down => ([cout, cin, nn::KERNEL, nn::KERNEL], cin * taps),
            // each output pixel of a stride-2 transposed conv sees a quarter of the taps
            Direction::Up => ([cin, cout, nn::KERNEL, nn::KERNEL], cin * taps / (nn::STRIDE * nn::STRIDE)),
        };
        let gain = match activation {
            Activation::Relu => nn::rectifier_gain(0.0),
            Activation::LeakyRelu(s) => nn::rectifier_gain(s),
            Activation::Tanh | Activation::Identity => 1.0,
        };
        let weight = params.push(format!("{name}.weight"), nn::normal_init(&shape, fan_in, gain, rng));
        let (bias, norm) = if batch_norm {
            let norm = NormSlots {
                gamma: params.push(format!("{name}.bn.gamma"), Tensor::filled(&[cout], T::one())),
                beta: params.push(format!("{name}.bn.beta"), Tensor::zeros(&[cout])),
                running_mean: buffers.push(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout])),
                running_var: buffers.push(format!("{name}.bn.running_var"), Tensor::filled(&[cout], T::one())),
            };
            (None, Some(norm))
        } else {
            (Some(params.push(format!("{name}.bias"), Tensor::zeros(&[cout]))), None)
        };
        Self {
            direction,
            cin,
            cout,
            activation,
            weight,
            bias,
            norm,
        }
    }

    fn linear_part<T: Real>(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> (FeatureMap<T>, Option<Vec<T>>) {
        assert_eq!(x.c, self.cin, "block input channels");
        let w = params.data(self.weight);
        let (mut y, cols) = match self.direction {
            Direction::Down => {
                let (y, cols) = nn::conv_forward(x, w, self.cout);
                (y, Some(cols))
            }
            Direction::Up => (nn::conv_t_forward(x, w, self.cout), None),
        };
        if let Some(b) = self.bias {
            nn::add_channel_bias(&mut y, params.data(b));
        }
        (y, cols)
    }

    pub fn forward_eval<T: Real>(
        &self,
        params: &ParamStore<T>,
        buffers: &ParamStore<T>,
        x: &FeatureMap<T>,
    ) -> FeatureMap<T> {
        let (mut y, _) = self.linear_part(params, x);
        if let Some(n) = &self.norm {
            y = nn::batch_norm_eval(
                &y,
                params.data(n.gamma),
                params.data(n.beta),
                buffers.data(n.running_mean),
                buffers.data(n.running_var),
            );
        }
        self.activation.apply(&mut y.data);
        y
    }

    pub fn forward_train<T: Real>(&self, params: &ParamStore<T>, x: &FeatureMap<T>) -> ConvBlockCache<T> {
        let (mut y, cols) = self.linear_part(params, x);
        let mut norm_cache = None;
        if let Some(n) = &self.norm {
            let (out, cache) = nn::batch_norm_train(&y, params.data(n.gamma), params.data(n.beta));
            y = out;
            norm_cache = Some(cache);
        }
        self.activation.apply(&mut y.data);
        ConvBlockCache {
            input: (self.direction == Direction::Up).then(|| x.clone()),
            cols,
            in_hw: (x.h, x.w),
            norm: norm_cache,
            output: y,
        }
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient if requested.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        cache: &ConvBlockCache<T>,
        mut dy: FeatureMap<T>,
        grads: &mut ParamStore<T>,
        want_dx: bool,
    ) -> Option<FeatureMap<T>> {
        self.activation.backward(&cache.output.data, &mut dy.data);
        if let (Some(n), Some(nc)) = (&self.norm, &cache.norm) {
            let (dx, dgamma, dbeta) = nn::batch_norm_backward(&dy, nc, params.data(n.gamma));
            grads.accumulate(n.gamma, &dgamma);
            grads.accumulate(n.beta, &dbeta);
            dy = dx;
        }
        if let Some(b) = self.bias {
            grads.accumulate(b, &nn::channel_sums(&dy));
        }
        let w = params.data(self.weight);
        let (dw, dx) = match self.direction {
            Direction::Down => nn::conv_backward(
                &dy,
                cache.cols.as_deref().expect("down block caches columns"),
                w,
                self.cin,
                want_dx.then_some(cache.in_hw),
            ),
            Direction::Up => nn::conv_t_backward(
                &dy,
                cache.input.as_ref().expect("up block caches input"),
                w,
                want_dx,
            ),
        };
        grads.accumulate(self.weight, &dw);
        dx
    }

    /// Folds the batch statistics seen in `cache` into the running estimates.
    pub fn absorb_batch_stats<T: Real>(&self, buffers: &mut ParamStore<T>, cache: &ConvBlockCache<T>) {
        if let (Some(n), Some(nc)) = (&self.norm, &cache.norm) {
            nn::update_running(buffers.get_mut(n.running_mean).data_mut(), &nc.batch_mean);
            nn::update_running(buffers.get_mut(n.running_var).data_mut(), &nc.batch_var);
        }
    }
}

/// Fully-connected layer on `[features, N]` matrices.
#[derive(Clone, Debug)]
pub struct Dense {
    pub fin: usize,
    pub fout: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn build<T: Real, R: Rng + ?Sized>(
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        params: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let weight = params.push(format!("{name}.weight"), nn::normal_init(&[fout, fin], fin, gain, rng));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self {
            fin,
            fout,
            weight,
            bias,
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, x: &[T], n: usize) -> Vec<T> {
        nn::linear_forward(x, n, params.data(self.weight), params.data(self.bias))
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &[T],
        dy: &[T],
        n: usize,
        grads: &mut ParamStore<T>,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let (dw, db, dx) = nn::linear_backward(dy, x, n, params.data(self.weight), want_dx);
        grads.accumulate(self.weight, &dw);
        grads.accumulate(self.bias, &db);
        dx
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}
