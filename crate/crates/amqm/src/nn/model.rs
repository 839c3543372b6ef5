//! Model assembly: layer chains, parameters, forward/backward passes.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::ops::{
    conv2d, conv2d_backward, cross_entropy, dropout, dropout_backward, fully_connected,
    fully_connected_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, softmax,
    DropoutRecord, Mode, PoolRecord,
};
use super::tensor::Tensor;
use super::DOMAIN_INIT;

/// One layer in a model chain.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2x2,
    Dropout {
        rate: f64,
    },
    Flatten,
    FullyConnected {
        out_features: usize,
    },
    Softmax,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ActShape {
    fn count(&self) -> usize {
        match self {
            ActShape::Map(c, h, w) => c * h * w,
            ActShape::Flat(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// The stock architecture: three conv/pool stages, two dropout
    /// layers, two fully connected layers, softmax output.
    pub fn default_config(input_height: usize, input_width: usize, n_classes: usize) -> ModelConfig {
        use LayerSpec::*;
        let conv = |out_channels| Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        ModelConfig {
            input_channels: 1,
            input_height,
            input_width,
            n_classes,
            layers: vec![
                conv(8),
                Relu,
                MaxPool2x2,
                conv(16),
                Relu,
                MaxPool2x2,
                conv(32),
                Relu,
                MaxPool2x2,
                Dropout { rate: 0.25 },
                Flatten,
                FullyConnected { out_features: 128 },
                Relu,
                Dropout { rate: 0.5 },
                FullyConnected { out_features: n_classes },
                Softmax,
            ],
        }
    }

    /// Activation shapes from the input through every layer; index 0 is
    /// the input itself. Errors when the chain breaks.
    pub fn shape_chain(&self) -> Result<Vec<ActShape>> {
        if self.n_classes < 2 {
            return Err(Error::config(format!(
                "model needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("model input dimensions must be positive"));
        }
        let mut shapes = vec![ActShape::Map(
            self.input_channels,
            self.input_height,
            self.input_width,
        )];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let next = match (layer, cur) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    ActShape::Map(_, h, w),
                ) => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return Err(Error::config(format!("layer {i}: bad conv geometry")));
                    }
                    let span_h = h as isize + 2 * *pad as isize - *kernel as isize;
                    let span_w = w as isize + 2 * *pad as isize - *kernel as isize;
                    if span_h < 0
                        || span_w < 0
                        || span_h % *stride as isize != 0
                        || span_w % *stride as isize != 0
                    {
                        return Err(Error::shape(format!(
                            "layer {i}: conv output not integral for {h}x{w} input"
                        )));
                    }
                    ActShape::Map(
                        *out_channels,
                        (span_h / *stride as isize) as usize + 1,
                        (span_w / *stride as isize) as usize + 1,
                    )
                }
                (LayerSpec::Relu, shape) => shape,
                (LayerSpec::MaxPool2x2, ActShape::Map(c, h, w)) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::shape(format!(
                            "layer {i}: maxpool2x2 needs even dims, got {h}x{w}"
                        )));
                    }
                    ActShape::Map(c, h / 2, w / 2)
                }
                (LayerSpec::Dropout { rate }, shape) => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::config(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shape
                }
                (LayerSpec::Flatten, shape) => ActShape::Flat(shape.count()),
                (LayerSpec::FullyConnected { out_features }, ActShape::Flat(_)) => {
                    if *out_features == 0 {
                        return Err(Error::config(format!("layer {i}: empty fc layer")));
                    }
                    ActShape::Flat(*out_features)
                }
                (LayerSpec::Softmax, ActShape::Flat(n)) => {
                    if n < 2 {
                        return Err(Error::shape(format!("layer {i}: softmax needs >= 2 logits")));
                    }
                    ActShape::Flat(n)
                }
                (layer, shape) => {
                    return Err(Error::shape(format!(
                        "layer {i}: {layer:?} cannot follow activation shape {shape:?}"
                    )))
                }
            };
            shapes.push(next);
        }
        match shapes.last() {
            Some(ActShape::Flat(n)) if *n == self.n_classes => {}
            other => {
                return Err(Error::shape(format!(
                    "model output {other:?} does not match {} classes",
                    self.n_classes
                )))
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::config("model must end in softmax"));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_chain().map(|_| ())
    }
}

/// Weight/bias pair for one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPair {
    pub weights: Tensor,
    pub bias: Tensor,
}

static NEXT_PARAMS_ID: AtomicU64 = AtomicU64::new(1);

/// Per-layer parameters, aligned with the config's layer list (None for
/// parameter-free layers). Identity plus a version counter lets backward
/// detect caches that predate a parameter update.
#[derive(Debug, Clone)]
pub struct Parameters {
    id: u64,
    version: u64,
    pub layers: Vec<Option<ParamPair>>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Parameters {
    fn fresh(layers: Vec<Option<ParamPair>>) -> Parameters {
        Parameters {
            id: NEXT_PARAMS_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            layers,
        }
    }

    /// All-zero parameters for a config; mostly useful as a reference
    /// point in tests and examples.
    pub fn zeros(config: &ModelConfig) -> Result<Parameters> {
        let shapes = config.shape_chain()?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, layer) in config.layers.iter().enumerate() {
            layers.push(match (layer, shapes[i]) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    ActShape::Map(c_in, _, _),
                ) => Some(ParamPair {
                    weights: Tensor::zeros(vec![*out_channels, c_in, *kernel, *kernel]),
                    bias: Tensor::zeros(vec![*out_channels]),
                }),
                (LayerSpec::FullyConnected { out_features }, ActShape::Flat(n_in)) => {
                    Some(ParamPair {
                        weights: Tensor::zeros(vec![*out_features, n_in]),
                        bias: Tensor::zeros(vec![*out_features]),
                    })
                }
                _ => None,
            });
        }
        Ok(Parameters::fresh(layers))
    }

    /// Rebuilds identity bookkeeping around externally produced layer
    /// tensors (checkpoint loads).
    pub(crate) fn from_layers(layers: Vec<Option<ParamPair>>) -> Parameters {
        Parameters::fresh(layers)
    }

    pub fn total_values(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }
}

/// Shape-mirrors Parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamPair>>,
}

impl Gradients {
    fn zeros_like(params: &Parameters) -> Gradients {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|p| ParamPair {
                        weights: Tensor::zeros(p.weights.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    })
                })
                .collect(),
        }
    }

    fn accumulate(&mut self, layer: usize, d_weights: &Tensor, d_bias: &Tensor) {
        let slot = self.layers[layer]
            .as_mut()
            .expect("gradient slot for a parametric layer");
        for (a, b) in slot.weights.data_mut().iter_mut().zip(d_weights.data()) {
            *a += b;
        }
        for (a, b) in slot.bias.data_mut().iter_mut().zip(d_bias.data()) {
            *a += b;
        }
    }
}

enum LayerRecord {
    Conv { input: Tensor },
    Relu { input: Tensor },
    Pool { record: PoolRecord },
    Dropout { record: DropoutRecord },
    Flatten { shape: Vec<usize> },
    Fc { input: Tensor },
    Softmax,
}

struct ItemCache {
    records: Vec<LayerRecord>,
}

/// Activations retained by a forward pass for the matching backward
/// pass.
pub struct ForwardCache {
    params_id: u64,
    params_version: u64,
    mode: Mode,
    items: Vec<ItemCache>,
    /// Per-item class distributions, identical to the forward return.
    pub probs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.items.len()
    }
}

fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// He-normal initialization: weights drawn from the seeded stream with
/// std sqrt(2/fan_in), biases zero. Values are rounded to the nearest
/// 32-bit-representable real so checkpoints round-trip bit-exactly.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    let shapes = config.shape_chain()?;
    let mut rng = SplitMix64::from_tags(seed, &[DOMAIN_INIT]);
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        layers.push(match (layer, shapes[i]) {
            (
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                ActShape::Map(c_in, _, _),
            ) => {
                let fan_in = c_in * kernel * kernel;
                Some(init_pair(
                    vec![*out_channels, c_in, *kernel, *kernel],
                    *out_channels,
                    fan_in,
                    &mut rng,
                ))
            }
            (LayerSpec::FullyConnected { out_features }, ActShape::Flat(n_in)) => Some(init_pair(
                vec![*out_features, n_in],
                *out_features,
                n_in,
                &mut rng,
            )),
            _ => None,
        });
    }
    Ok(Parameters::fresh(layers))
}

fn init_pair(weight_shape: Vec<usize>, out: usize, fan_in: usize, rng: &mut SplitMix64) -> ParamPair {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut weights = Tensor::zeros(weight_shape);
    for v in weights.data_mut() {
        *v = snap_f32(std * rng.next_gaussian());
    }
    ParamPair {
        weights,
        bias: Tensor::zeros(vec![out]),
    }
}

/// Composes the layer chain over a B x C x H x W batch. Train mode draws
/// dropout masks from `rng`; eval mode ignores it and is deterministic.
pub fn model_forward(
    config: &ModelConfig,
    params: &Parameters,
    batch: &Tensor,
    mode: Mode,
    mut rng: Option<&mut SplitMix64>,
) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    config.validate()?;
    if params.layers.len() != config.layers.len() {
        return Err(Error::shape(
            "parameter list does not align with the layer chain",
        ));
    }
    let (b, c, h, w) = match batch.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(Error::shape(format!(
                "batch must be B x C x H x W, got {other:?}"
            )))
        }
    };
    if (c, h, w) != (config.input_channels, config.input_height, config.input_width) {
        return Err(Error::shape(format!(
            "batch items are {c}x{h}x{w}, model expects {}x{}x{}",
            config.input_channels, config.input_height, config.input_width
        )));
    }

    let item_len = c * h * w;
    let mut items = Vec::with_capacity(b);
    let mut probs = Vec::with_capacity(b);
    for i in 0..b {
        let data = batch.data()[i * item_len..][..item_len].to_vec();
        let mut act = Tensor::new(vec![c, h, w], data)?;
        let mut records = Vec::with_capacity(config.layers.len());
        for (li, layer) in config.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let pair = params.layers[li]
                        .as_ref()
                        .ok_or_else(|| Error::shape(format!("layer {li}: missing conv parameters")))?;
                    let out = conv2d(&act, &pair.weights, &pair.bias, *stride, *pad)?;
                    records.push(LayerRecord::Conv { input: act });
                    act = out;
                }
                LayerSpec::Relu => {
                    let out = relu(&act);
                    records.push(LayerRecord::Relu { input: act });
                    act = out;
                }
                LayerSpec::MaxPool2x2 => {
                    let (out, record) = maxpool2x2(&act)?;
                    records.push(LayerRecord::Pool { record });
                    act = out;
                }
                LayerSpec::Dropout { rate } => {
                    let (out, record) = match mode {
                        Mode::Eval => (act.clone(), DropoutRecord::default()),
                        Mode::Train => {
                            let stream = rng.as_deref_mut().ok_or_else(|| {
                                Error::contract(
                                    "train-mode forward requires a dropout random stream",
                                )
                            })?;
                            dropout(&act, *rate, Mode::Train, stream)?
                        }
                    };
                    records.push(LayerRecord::Dropout { record });
                    act = out;
                }
                LayerSpec::Flatten => {
                    let shape = act.shape().to_vec();
                    let out = act.reshaped(vec![act.len()])?;
                    records.push(LayerRecord::Flatten { shape });
                    act = out;
                }
                LayerSpec::FullyConnected { .. } => {
                    let pair = params.layers[li]
                        .as_ref()
                        .ok_or_else(|| Error::shape(format!("layer {li}: missing fc parameters")))?;
                    let out = fully_connected(&act, &pair.weights, &pair.bias)?;
                    records.push(LayerRecord::Fc { input: act });
                    act = out;
                }
                LayerSpec::Softmax => {
                    let out = softmax(&act)?;
                    records.push(LayerRecord::Softmax);
                    act = out;
                }
            }
        }
        debug_assert!((act.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        probs.push(act.data().to_vec());
        items.push(ItemCache { records });
    }
    let cache = ForwardCache {
        params_id: params.id,
        params_version: params.version,
        mode,
        items,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Gradient of mean cross-entropy at the logits, with softmax fused:
/// (probs - one_hot) / batch.
pub(crate) fn fused_softmax_ce_grad(probs: &[f64], label: usize, batch: usize) -> Vec<f64> {
    let mut d: Vec<f64> = probs.iter().map(|p| p / batch as f64).collect();
    d[label] -= 1.0 / batch as f64;
    d
}

/// Gradient of the batch-mean cross-entropy loss with respect to every
/// parameter.
pub fn model_backward(
    config: &ModelConfig,
    params: &Parameters,
    cache: &ForwardCache,
    true_classes: &[usize],
) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::contract("backward requires a train-mode cache"));
    }
    if cache.params_id != params.id || cache.params_version != params.version {
        return Err(Error::contract(
            "stale forward cache: parameters changed since the forward pass",
        ));
    }
    let b = cache.items.len();
    if true_classes.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            true_classes.len()
        )));
    }
    for &t in true_classes {
        if t >= config.n_classes {
            return Err(Error::domain(format!(
                "label {t} out of range for {} classes",
                config.n_classes
            )));
        }
    }

    let mut grads = Gradients::zeros_like(params);
    for (i, item) in cache.items.iter().enumerate() {
        let mut d = Tensor::new(
            vec![config.n_classes],
            fused_softmax_ce_grad(&cache.probs[i], true_classes[i], b),
        )?;
        for (li, layer) in config.layers.iter().enumerate().rev() {
            let record = &item.records[li];
            d = match (layer, record) {
                (LayerSpec::Softmax, LayerRecord::Softmax) => d,
                (LayerSpec::FullyConnected { .. }, LayerRecord::Fc { input }) => {
                    let pair = params.layers[li].as_ref().unwrap();
                    let fc = fully_connected_backward(input, &pair.weights, &d)?;
                    grads.accumulate(li, &fc.d_weights, &fc.d_bias);
                    fc.d_input
                }
                (LayerSpec::Flatten, LayerRecord::Flatten { shape }) => {
                    d.reshaped(shape.clone())?
                }
                (LayerSpec::Dropout { .. }, LayerRecord::Dropout { record }) => {
                    dropout_backward(record, &d)?
                }
                (LayerSpec::MaxPool2x2, LayerRecord::Pool { record }) => {
                    maxpool2x2_backward(record, &d)?
                }
                (LayerSpec::Relu, LayerRecord::Relu { input }) => relu_backward(input, &d)?,
                (LayerSpec::Conv { stride, pad, .. }, LayerRecord::Conv { input }) => {
                    let pair = params.layers[li].as_ref().unwrap();
                    let conv = conv2d_backward(input, &pair.weights, &d, *stride, *pad)?;
                    grads.accumulate(li, &conv.d_weights, &conv.d_bias);
                    conv.d_input
                }
                _ => {
                    return Err(Error::contract(
                        "forward cache does not line up with the layer chain",
                    ))
                }
            };
        }
    }
    Ok(grads)
}

/// p <- p - lr * g, elementwise. Updated values stay on the
/// 32-bit-representable grid.
pub fn sgd_step(params: &mut Parameters, grads: &Gradients, learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::domain(format!(
            "learning rate {learning_rate} must be finite and nonnegative"
        )));
    }
    if params.layers.len() != grads.layers.len() {
        return Err(Error::shape("gradients do not align with parameters"));
    }
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        match (p, g) {
            (None, None) => {}
            (Some(p), Some(g)) => {
                if p.weights.shape() != g.weights.shape() || p.bias.shape() != g.bias.shape() {
                    return Err(Error::shape("gradient tensor shapes do not match parameters"));
                }
                for (pv, gv) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
                    *pv = snap_f32(*pv - learning_rate * gv);
                }
                for (pv, gv) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *pv = snap_f32(*pv - learning_rate * gv);
                }
            }
            _ => return Err(Error::shape("gradient layer slots do not match parameters")),
        }
    }
    params.version += 1;
    Ok(())
}

/// True when every weight and bias value in the layer list is finite.
pub(crate) fn values_finite(layers: &[Option<ParamPair>]) -> bool {
    layers.iter().flatten().all(|p| {
        p.weights.data().iter().all(|v| v.is_finite())
            && p.bias.data().iter().all(|v| v.is_finite())
    })
}

/// First index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode forward on a single C x H x W input; returns the class
/// distribution.
pub fn predict(config: &ModelConfig, params: &Parameters, input: &Tensor) -> Result<Vec<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let batch = input.reshaped(shape)?;
    let (probs, _) = model_forward(config, params, &batch, Mode::Eval, None)?;
    Ok(probs.into_iter().next().unwrap())
}

/// Mean cross-entropy over a batch of distributions.
pub fn mean_batch_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("loss needs matching nonempty probs and labels"));
    }
    let mut total = 0.0;
    for (p, &label) in probs.iter().zip(labels) {
        total += cross_entropy(&Tensor::new(vec![p.len()], p.clone())?, label)?;
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::stack_batch;
    use crate::nn::DOMAIN_DROPOUT;

    fn tiny_config(with_dropout: bool) -> ModelConfig {
        use LayerSpec::*;
        let mut layers = vec![
            Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Relu,
            MaxPool2x2,
        ];
        if with_dropout {
            layers.push(Dropout { rate: 0.25 });
        }
        layers.push(Flatten);
        layers.push(FullyConnected { out_features: 8 });
        layers.push(Relu);
        if with_dropout {
            layers.push(Dropout { rate: 0.5 });
        }
        layers.push(FullyConnected { out_features: 2 });
        layers.push(Softmax);
        ModelConfig {
            input_channels: 1,
            input_height: 8,
            input_width: 8,
            n_classes: 2,
            layers,
        }
    }

    fn random_batch(b: usize, config: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let items: Vec<Tensor> = (0..b)
            .map(|_| {
                let mut t = Tensor::zeros(vec![
                    config.input_channels,
                    config.input_height,
                    config.input_width,
                ]);
                for v in t.data_mut() {
                    *v = rng.next_f64();
                }
                t
            })
            .collect();
        stack_batch(&items).unwrap()
    }

    #[test]
    fn default_config_has_the_stated_layer_counts() {
        let cfg = ModelConfig::default_config(64, 64, 5);
        cfg.validate().unwrap();
        let count = |pred: &dyn Fn(&LayerSpec) -> bool| cfg.layers.iter().filter(|l| pred(l)).count();
        assert_eq!(count(&|l| matches!(l, LayerSpec::Conv { .. })), 3);
        assert_eq!(count(&|l| matches!(l, LayerSpec::MaxPool2x2)), 3);
        assert_eq!(count(&|l| matches!(l, LayerSpec::Dropout { .. })), 2);
        assert_eq!(count(&|l| matches!(l, LayerSpec::FullyConnected { .. })), 2);
        assert!(matches!(cfg.layers.last(), Some(LayerSpec::Softmax)));
        // 64 -> 32 -> 16 -> 8 through the three pools, 32 channels out.
        let shapes = cfg.shape_chain().unwrap();
        assert!(shapes.contains(&ActShape::Flat(32 * 8 * 8)));
    }

    #[test]
    fn shape_chain_rejects_broken_chains() {
        let mut cfg = ModelConfig::default_config(64, 64, 5);
        cfg.input_height = 63;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default_config(64, 64, 5);
        cfg.layers.insert(0, LayerSpec::Flatten);
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default_config(64, 64, 5);
        cfg.layers.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_params_on_zero_image_give_uniform_distribution() {
        let cfg = tiny_config(false);
        let params = Parameters::zeros(&cfg).unwrap();
        let batch = Tensor::zeros(vec![1, 1, 8, 8]);
        let (probs, _) = model_forward(&cfg, &params, &batch, Mode::Eval, None).unwrap();
        assert_eq!(probs.len(), 1);
        for p in &probs[0] {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_config(true);
        let params = init_weights(&cfg, 5).unwrap();
        let batch = random_batch(2, &cfg, 9);
        let (a, _) = model_forward(&cfg, &params, &batch, Mode::Eval, None).unwrap();
        let (b, _) = model_forward(&cfg, &params, &batch, Mode::Eval, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_forward_equals_stacked_singletons() {
        let cfg = tiny_config(false);
        let params = init_weights(&cfg, 6).unwrap();
        let batch = random_batch(4, &cfg, 10);
        let (together, _) = model_forward(&cfg, &params, &batch, Mode::Eval, None).unwrap();
        for i in 0..4 {
            let item = Tensor::new(
                vec![1, 1, 8, 8],
                batch.data()[i * 64..][..64].to_vec(),
            )
            .unwrap();
            let (alone, _) = model_forward(&cfg, &params, &item, Mode::Eval, None).unwrap();
            assert_eq!(together[i], alone[0]);
        }
    }

    #[test]
    fn forward_distributions_normalize() {
        let cfg = tiny_config(true);
        let params = init_weights(&cfg, 77).unwrap();
        let batch = random_batch(3, &cfg, 78);
        let mut rng = SplitMix64::new(79);
        let (probs, _) =
            model_forward(&cfg, &params, &batch, Mode::Train, Some(&mut rng)).unwrap();
        for p in probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn fused_grad_vanishes_when_probs_hit_the_one_hot() {
        let d = fused_softmax_ce_grad(&[0.0, 1.0, 0.0], 1, 1);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    /// Mean batch loss as a pure function of the parameters, with the
    /// dropout stream re-seeded per call so masks repeat exactly.
    fn loss_of(
        cfg: &ModelConfig,
        params: &Parameters,
        batch: &Tensor,
        labels: &[usize],
        dropout_seed: u64,
    ) -> f64 {
        let mut rng = SplitMix64::from_tags(dropout_seed, &[DOMAIN_DROPOUT]);
        let (probs, _) = model_forward(cfg, params, batch, Mode::Train, Some(&mut rng)).unwrap();
        mean_batch_loss(&probs, labels).unwrap()
    }

    fn gradient_check(cfg: &ModelConfig, seed: u64) {
        let mut params = init_weights(cfg, seed).unwrap();
        let batch = random_batch(2, cfg, seed.wrapping_add(1));
        let labels = [0usize, 1usize];
        let dropout_seed = seed.wrapping_add(2);

        let mut rng = SplitMix64::from_tags(dropout_seed, &[DOMAIN_DROPOUT]);
        let (_, cache) =
            model_forward(cfg, &params, &batch, Mode::Train, Some(&mut rng)).unwrap();
        let grads = model_backward(cfg, &params, &cache, &labels).unwrap();

        let h = 1e-4;
        let mut checked = 0usize;
        for li in 0..cfg.layers.len() {
            if grads.layers[li].is_none() {
                continue;
            }
            for part in 0..2 {
                let len = {
                    let p = params.layers[li].as_ref().unwrap();
                    if part == 0 { p.weights.len() } else { p.bias.len() }
                };
                for idx in 0..len {
                    let analytic = {
                        let g = grads.layers[li].as_ref().unwrap();
                        if part == 0 { g.weights.data()[idx] } else { g.bias.data()[idx] }
                    };
                    let slot = |params: &mut Parameters, delta: f64| {
                        let p = params.layers[li].as_mut().unwrap();
                        let v = if part == 0 {
                            &mut p.weights.data_mut()[idx]
                        } else {
                            &mut p.bias.data_mut()[idx]
                        };
                        let old = *v;
                        *v = old + delta;
                        old
                    };
                    let original = slot(&mut params, h);
                    let up = loss_of(cfg, &params, &batch, &labels, dropout_seed);
                    {
                        let p = params.layers[li].as_mut().unwrap();
                        let v = if part == 0 {
                            &mut p.weights.data_mut()[idx]
                        } else {
                            &mut p.bias.data_mut()[idx]
                        };
                        *v = original - h;
                    }
                    let down = loss_of(cfg, &params, &batch, &labels, dropout_seed);
                    {
                        let p = params.layers[li].as_mut().unwrap();
                        let v = if part == 0 {
                            &mut p.weights.data_mut()[idx]
                        } else {
                            &mut p.bias.data_mut()[idx]
                        };
                        *v = original;
                    }
                    let numeric = (up - down) / (2.0 * h);
                    // Guard the denominator so exact zeros compare cleanly.
                    let rel = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        rel < 1e-4,
                        "layer {li} part {part} idx {idx}: analytic {analytic} vs numeric {numeric} (rel {rel})"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "gradient check looked at too few values");
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(&tiny_config(false), 21);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        gradient_check(&tiny_config(true), 22);
    }

    #[test]
    fn batch_gradient_is_the_mean_of_item_gradients() {
        let cfg = tiny_config(false);
        let params = init_weights(&cfg, 31).unwrap();
        let batch = random_batch(2, &cfg, 32);
        let labels = [1usize, 0usize];

        let (_, cache) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
        let joint = model_backward(&cfg, &params, &cache, &labels).unwrap();

        let mut mean = Gradients::zeros_like(&params);
        for i in 0..2 {
            let item = Tensor::new(vec![1, 1, 8, 8], batch.data()[i * 64..][..64].to_vec())
                .unwrap();
            let (_, c1) = model_forward(&cfg, &params, &item, Mode::Train, None).unwrap();
            let g1 = model_backward(&cfg, &params, &c1, &labels[i..=i]).unwrap();
            for (slot, add) in mean.layers.iter_mut().zip(&g1.layers) {
                if let (Some(a), Some(b)) = (slot, add) {
                    for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                        *x += y / 2.0;
                    }
                    for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                        *x += y / 2.0;
                    }
                }
            }
        }
        for (a, b) in joint.layers.iter().zip(&mean.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                    assert!((x - y).abs() < 1e-10);
                }
                for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = tiny_config(false);
        let mut params = init_weights(&cfg, 41).unwrap();
        let batch = random_batch(1, &cfg, 42);
        let (_, cache) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
        let grads = model_backward(&cfg, &params, &cache, &[0]).unwrap();
        sgd_step(&mut params, &grads, 0.01).unwrap();
        let err = model_backward(&cfg, &params, &cache, &[0]).unwrap_err();
        assert!(err.to_string().contains("stale"));
    }

    #[test]
    fn eval_cache_cannot_feed_backward() {
        let cfg = tiny_config(false);
        let params = init_weights(&cfg, 43).unwrap();
        let batch = random_batch(1, &cfg, 44);
        let (_, cache) = model_forward(&cfg, &params, &batch, Mode::Eval, None).unwrap();
        assert!(model_backward(&cfg, &params, &cache, &[0]).is_err());
    }

    #[test]
    fn init_weights_is_seed_deterministic_with_zero_biases() {
        let cfg = tiny_config(true);
        let a = init_weights(&cfg, 7).unwrap();
        let b = init_weights(&cfg, 7).unwrap();
        let c = init_weights(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for pair in a.layers.iter().flatten() {
            assert!(pair.bias.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_weights_hit_the_he_scale() {
        // One conv with >10k weights: 56 x 20 x 3 x 3 = 10080, fan_in 180.
        let cfg = ModelConfig {
            input_channels: 20,
            input_height: 8,
            input_width: 8,
            n_classes: 2,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 56,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::FullyConnected { out_features: 2 },
                LayerSpec::Softmax,
            ],
        };
        let params = init_weights(&cfg, 99).unwrap();
        let w = &params.layers[0].as_ref().unwrap().weights;
        assert_eq!(w.len(), 10_080);
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / w.len() as f64;
        let target = (2.0 / 180.0_f64).sqrt();
        assert!((var.sqrt() - target).abs() < 0.1 * target);
    }

    #[test]
    fn sgd_step_basics() {
        let cfg = tiny_config(false);
        let mut params = init_weights(&cfg, 51).unwrap();
        let before = params.clone();
        let zero = Gradients::zeros_like(&params);
        sgd_step(&mut params, &zero, 0.5).unwrap();
        assert_eq!(params, before);

        // lr = 0 leaves parameters bit-identical even with live gradients.
        let mut one = Gradients::zeros_like(&params);
        for slot in one.layers.iter_mut().flatten() {
            for v in slot.weights.data_mut() {
                *v = 1.0;
            }
        }
        sgd_step(&mut params, &one, 0.0).unwrap();
        assert_eq!(params, before);

        // p=1, g=0.5, lr=0.01 -> 0.995.
        let mut params = Parameters::fresh(vec![Some(ParamPair {
            weights: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        })]);
        let grads = Gradients {
            layers: vec![Some(ParamPair {
                weights: Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            })],
        };
        sgd_step(&mut params, &grads, 0.01).unwrap();
        let got = params.layers[0].as_ref().unwrap().weights.data()[0];
        assert!((got - 0.995).abs() < 1e-7);

        // One step on the quadratic x^2/2 from x=1 with lr 0.1: the
        // gradient is x, so x moves to 0.9.
        let mut params = Parameters::fresh(vec![Some(ParamPair {
            weights: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        })]);
        let x = params.layers[0].as_ref().unwrap().weights.data()[0];
        let grads = Gradients {
            layers: vec![Some(ParamPair {
                weights: Tensor::new(vec![1, 1], vec![x]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            })],
        };
        sgd_step(&mut params, &grads, 0.1).unwrap();
        let got = params.layers[0].as_ref().unwrap().weights.data()[0];
        assert!((got - 0.9).abs() < 1e-7);
    }

    #[test]
    fn small_steps_do_not_increase_the_batch_loss() {
        for seed in [61, 62, 63] {
            let cfg = tiny_config(false);
            let mut params = init_weights(&cfg, seed).unwrap();
            let batch = random_batch(3, &cfg, seed + 100);
            let labels = [0usize, 1, 0];
            let before = {
                let (probs, _) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
                mean_batch_loss(&probs, &labels).unwrap()
            };
            let (_, cache) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
            let grads = model_backward(&cfg, &params, &cache, &labels).unwrap();
            sgd_step(&mut params, &grads, 1e-4).unwrap();
            let after = {
                let (probs, _) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
                mean_batch_loss(&probs, &labels).unwrap()
            };
            assert!(after <= before + 1e-12, "loss rose from {before} to {after}");
        }
    }

    #[test]
    fn predict_returns_a_distribution_and_shifts_do_not_move_argmax() {
        let cfg = tiny_config(true);
        let params = init_weights(&cfg, 71).unwrap();
        let mut rng = SplitMix64::new(72);
        let mut input = Tensor::zeros(vec![1, 8, 8]);
        for v in input.data_mut() {
            *v = rng.next_f64();
        }
        let probs = predict(&cfg, &params, &input).unwrap();
        assert_eq!(probs.len(), 2);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax(&probs), argmax(&probs));
    }

    #[test]
    fn params_are_f32_representable_after_init_and_steps() {
        let cfg = tiny_config(false);
        let mut params = init_weights(&cfg, 81).unwrap();
        let batch = random_batch(2, &cfg, 82);
        let (_, cache) = model_forward(&cfg, &params, &batch, Mode::Train, None).unwrap();
        let grads = model_backward(&cfg, &params, &cache, &[0, 1]).unwrap();
        sgd_step(&mut params, &grads, 0.05).unwrap();
        for pair in params.layers.iter().flatten() {
            for &v in pair.weights.data().iter().chain(pair.bias.data()) {
                assert_eq!(v, v as f32 as f64);
            }
        }
    }
}
