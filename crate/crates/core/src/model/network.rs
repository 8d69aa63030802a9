//! Parameter layout, initialization and the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Eager, Recorder, Tape};
use crate::ops::{BatchNormParams, PoolSpec, RunningStats};
use crate::tensor::{Element, Tensor};

use super::config::{
    feature_map_plan, DenseNetConfig, STEM_KERNEL, STEM_PADDING, STEM_POOL, STEM_STRIDE, TRANSITION_POOL,
};
use super::ModelError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Zero-mean normal with variance 2/fan_in.
    FanIn(usize),
    Ones,
    Zeros,
}

/// Name and shape of one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayerIdx {
    norm1: NormIdx,
    conv1: usize,
    norm2: NormIdx,
    conv2: usize,
}

#[derive(Debug, Clone, Copy)]
struct TransitionIdx {
    norm: NormIdx,
    conv: usize,
}

/// Index structure shared by every model built from the same config.
#[derive(Debug, Clone)]
pub struct Layout {
    params: Vec<ParamSpec>,
    stats: Vec<(String, usize)>,
    stem_conv: usize,
    stem_norm: NormIdx,
    blocks: Vec<Vec<DenseLayerIdx>>,
    transitions: Vec<TransitionIdx>,
    final_norm: NormIdx,
    fc_weight: usize,
    fc_bias: usize,
}

struct LayoutBuilder {
    params: Vec<ParamSpec>,
    stats: Vec<(String, usize)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamSpec { name, shape, init });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize) -> usize {
        self.add(format!("{name}.weight"), vec![out, inp, k, k], Init::FanIn(inp * k * k))
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormIdx {
        let gamma = self.add(format!("{name}.weight"), vec![channels], Init::Ones);
        let beta = self.add(format!("{name}.bias"), vec![channels], Init::Zeros);
        self.stats.push((name.to_string(), channels));
        NormIdx {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }
}

impl Layout {
    pub fn new(config: &DenseNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = LayoutBuilder {
            params: Vec::new(),
            stats: Vec::new(),
        };
        let k = config.growth_rate;
        let bottleneck = config.bottleneck_width * k;
        let stem_conv = b.conv("features.conv0", config.init_features, config.input_channels, STEM_KERNEL);
        let stem_norm = b.norm("features.norm0", config.init_features);

        let mut width = config.init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &layers) in config.block_layers.iter().enumerate() {
            let mut block = Vec::with_capacity(layers);
            for l in 0..layers {
                let name = format!("features.denseblock{}.denselayer{}", bi + 1, l + 1);
                let input = width + l * k;
                block.push(DenseLayerIdx {
                    norm1: b.norm(&format!("{name}.norm1"), input),
                    conv1: b.conv(&format!("{name}.conv1"), bottleneck, input, 1),
                    norm2: b.norm(&format!("{name}.norm2"), bottleneck),
                    conv2: b.conv(&format!("{name}.conv2"), k, bottleneck, 3),
                });
            }
            blocks.push(block);
            width += layers * k;
            if bi < 3 {
                let name = format!("features.transition{}", bi + 1);
                let out = config.transition_width(width);
                transitions.push(TransitionIdx {
                    norm: b.norm(&format!("{name}.norm"), width),
                    conv: b.conv(&format!("{name}.conv"), out, width, 1),
                });
                width = out;
            }
        }
        let final_norm = b.norm("features.norm5", width);
        let fc_weight = b.add(
            "classifier.weight".into(),
            vec![config.num_outputs, width],
            Init::FanIn(width),
        );
        let fc_bias = b.add("classifier.bias".into(), vec![config.num_outputs], Init::Zeros);
        Ok(Self {
            params: b.params,
            stats: b.stats,
            stem_conv,
            stem_norm,
            blocks,
            transitions,
            final_norm,
            fc_weight,
            fc_bias,
        })
    }

    /// Trainable tensors in enumeration order.
    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    /// Normalization layers as `(name, channels)`, in enumeration order.
    pub fn norm_layers(&self) -> &[(String, usize)] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

/// Shapes observed during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardProbe {
    /// `(stage name, output shape)` in execution order, named as in the plan.
    pub stages: Vec<(String, Vec<usize>)>,
    /// `(block, layer, input channels)` for every dense layer, 1-based.
    pub layer_inputs: Vec<(usize, usize, usize)>,
}

/// An instantiated DenseNet.
#[derive(Debug, Clone)]
pub struct DenseNetModel<T: Element = f32> {
    config: DenseNetConfig,
    layout: Layout,
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Element> DenseNetModel<T> {
    /// Builds and initializes a network; identical seeds give bit-identical
    /// parameters for a given element type.
    pub fn build(config: &DenseNetConfig, seed: u64) -> Result<Self, ModelError> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .params
            .iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::FanIn(fan_in) => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        Tensor::from_fn(spec.shape.clone(), |_| T::from_f64_lossy(normal.sample(&mut rng)))
                    }
                    Init::Ones => Tensor::ones(spec.shape.clone()),
                    Init::Zeros => Tensor::zeros(spec.shape.clone()),
                };
                Param {
                    name: spec.name.clone(),
                    value,
                    grad: None,
                }
            })
            .collect();
        let stats = layout.stats.iter().map(|&(_, c)| RunningStats::new(c)).collect();
        Ok(Self {
            config: config.clone(),
            layout,
            params,
            stats,
        })
    }

    pub(crate) fn from_parts(
        config: DenseNetConfig,
        layout: Layout,
        params: Vec<Param<T>>,
        stats: Vec<RunningStats<T>>,
    ) -> Self {
        Self { config, layout, params, stats }
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Exact number of trainable scalars; running statistics are excluded.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter bound on `tape` into the
    /// parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for &(slot, var) in tape.param_bindings() {
            let Some(g) = tape.grad(var) else { continue };
            let p = &mut self.params[slot];
            match p.grad.as_mut() {
                None => p.grad = Some(g.clone()),
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + b;
                    }
                }
            }
        }
    }

    /// Training-mode forward on `rec`; updates the normalization running
    /// statistics. Returns raw logits N×num_outputs.
    pub fn forward_train<R: Recorder<T>>(
        &mut self,
        rec: &mut R,
        batch: Tensor<T>,
    ) -> Result<R::Node, ModelError> {
        let Self { layout, params, stats, config } = self;
        run(config, layout, params, stats, rec, batch, true, None)
    }

    /// Eval-mode forward: running statistics are read, nothing is mutated.
    pub fn forward_eval(&self, batch: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.forward_eval_on(&mut Eager, batch)
    }

    /// Eval-mode forward recorded on `rec`.
    pub fn forward_eval_on<R: Recorder<T>>(&self, rec: &mut R, batch: Tensor<T>) -> Result<R::Node, ModelError> {
        let mut stats = self.stats.clone();
        run(&self.config, &self.layout, &self.params, &mut stats, rec, batch, false, None)
    }

    /// Forward pass that also records every stage's output shape.
    pub fn forward_probed(
        &mut self,
        batch: Tensor<T>,
        training: bool,
    ) -> Result<(Tensor<T>, ForwardProbe), ModelError> {
        let mut probe = ForwardProbe::default();
        let logits = if training {
            let Self { layout, params, stats, config } = self;
            run(config, layout, params, stats, &mut Eager, batch, true, Some(&mut probe))?
        } else {
            let mut stats = self.stats.clone();
            run(&self.config, &self.layout, &self.params, &mut stats, &mut Eager, batch, false, Some(&mut probe))?
        };
        Ok((logits, probe))
    }
}

#[allow(clippy::too_many_arguments)]
fn run<T: Element, R: Recorder<T>>(
    config: &DenseNetConfig,
    layout: &Layout,
    params: &[Param<T>],
    stats: &mut [RunningStats<T>],
    rec: &mut R,
    batch: Tensor<T>,
    training: bool,
    mut probe: Option<&mut ForwardProbe>,
) -> Result<R::Node, ModelError> {
    let (n, c, h, w) = batch.dims4("densenet")?;
    let size = config.input_size;
    if c != config.input_channels || h != size || w != size || n == 0 {
        return Err(ModelError::InputShape {
            expected: vec![n.max(1), config.input_channels, size, size],
            actual: batch.shape().to_vec(),
        });
    }
    let bn = BatchNormParams {
        eps: BN_EPS,
        momentum: BN_MOMENTUM,
        training,
    };
    fn record<T: Element, R: Recorder<T>>(probe: &mut Option<&mut ForwardProbe>, name: String, node: &R::Node, rec: &R) {
        if let Some(p) = probe.as_deref_mut() {
            p.stages.push((name, rec.value(node).shape().to_vec()));
        }
    }

    let norm_relu = |rec: &mut R, stats: &mut [RunningStats<T>], x: &R::Node, idx: NormIdx| {
        let gamma = rec.param(idx.gamma, &params[idx.gamma].value);
        let beta = rec.param(idx.beta, &params[idx.beta].value);
        let y = rec.batchnorm2d(x, &gamma, &beta, &mut stats[idx.stats], bn)?;
        rec.relu(&y)
    };
    let conv = |rec: &mut R, x: &R::Node, slot: usize, stride: usize, padding: usize| {
        let wgt = rec.param(slot, &params[slot].value);
        rec.conv2d(x, &wgt, stride, padding)
    };

    let x = rec.input(batch);
    let x = conv(rec, &x, layout.stem_conv, STEM_STRIDE, STEM_PADDING)?;
    let x = norm_relu(rec, stats, &x, layout.stem_norm)?;
    record::<T, R>(&mut probe, "conv".into(), &x, rec);
    let mut x = rec.pool2d(&x, STEM_POOL)?;
    record::<T, R>(&mut probe, "pool".into(), &x, rec);

    for (bi, block) in layout.blocks.iter().enumerate() {
        for (li, layer) in block.iter().enumerate() {
            if let Some(p) = probe.as_deref_mut() {
                p.layer_inputs.push((bi + 1, li + 1, rec.value(&x).shape()[1]));
            }
            let y = norm_relu(rec, stats, &x, layer.norm1)?;
            let y = conv(rec, &y, layer.conv1, 1, 0)?;
            let y = norm_relu(rec, stats, &y, layer.norm2)?;
            let y = conv(rec, &y, layer.conv2, 1, 1)?;
            // The running concatenation equals concatenating every preceding
            // output (and the block input) in order.
            x = rec.concat_channels(&[x, y])?;
        }
        record::<T, R>(&mut probe, format!("block{}", bi + 1), &x, rec);
        if let Some(t) = layout.transitions.get(bi) {
            let y = norm_relu(rec, stats, &x, t.norm)?;
            let y = conv(rec, &y, t.conv, 1, 0)?;
            record::<T, R>(&mut probe, format!("transition{}.conv", bi + 1), &y, rec);
            x = rec.pool2d(&y, TRANSITION_POOL)?;
            record::<T, R>(&mut probe, format!("transition{}.pool", bi + 1), &x, rec);
        }
    }

    let x = norm_relu(rec, stats, &x, layout.final_norm)?;
    let x = rec.pool2d(&x, PoolSpec::global_average())?;
    record::<T, R>(&mut probe, "global_pool".into(), &x, rec);
    let x = rec.flatten(&x)?;
    let weight = rec.param(layout.fc_weight, &params[layout.fc_weight].value);
    let bias = rec.param(layout.fc_bias, &params[layout.fc_bias].value);
    let logits = rec.linear(&x, &weight, &bias)?;
    record::<T, R>(&mut probe, "fc".into(), &logits, rec);
    Ok(logits)
}

/// Compares probed shapes with the plan, stage by stage.
pub fn probe_matches_plan(config: &DenseNetConfig, probe: &ForwardProbe) -> Result<bool, ModelError> {
    let plan = feature_map_plan(config)?;
    if plan.len() != probe.stages.len() {
        return Ok(false);
    }
    Ok(plan.iter().zip(&probe.stages).all(|(stage, (name, shape))| {
        let observed = match shape.as_slice() {
            [_, c, h, w] if h == w => Some((*h, *c)),
            [_, d] => Some((1, *d)),
            _ => None,
        };
        *name == stage.name && observed == Some((stage.spatial, stage.channels))
    }))
}
