//! Architecture description and the accounting derived from it.

use std::fmt;

use crate::ops::{out_extent, PoolSpec};

use super::ModelError;

/// Hyper-parameters of a four-block DenseNet-BC.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetConfig {
    /// Feature maps added by every dense layer (k).
    pub growth_rate: usize,
    /// Feature maps produced by the stem convolution (k₀).
    pub init_features: usize,
    pub block_layers: [usize; 4],
    /// Fraction of channels kept by each transition layer (θ).
    pub compression: f64,
    /// Bottleneck 1×1 convolutions emit `bottleneck_width · k` maps.
    pub bottleneck_width: usize,
    pub num_outputs: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

pub const STEM_KERNEL: usize = 7;
pub const STEM_STRIDE: usize = 2;
pub const STEM_PADDING: usize = 3;
pub const STEM_POOL: PoolSpec = PoolSpec {
    mode: crate::ops::PoolMode::Max,
    kernel: 3,
    stride: 2,
    padding: 1,
};
pub const TRANSITION_POOL: PoolSpec = PoolSpec {
    mode: crate::ops::PoolMode::Average,
    kernel: 2,
    stride: 2,
    padding: 0,
};

impl DenseNetConfig {
    pub fn densenet121() -> Self {
        Self {
            growth_rate: 32,
            init_features: 64,
            block_layers: [6, 12, 24, 16],
            compression: 0.5,
            bottleneck_width: 4,
            num_outputs: 2,
            input_channels: 1,
            input_size: 224,
        }
    }

    pub fn densenet169() -> Self {
        Self {
            block_layers: [6, 12, 32, 32],
            ..Self::densenet121()
        }
    }

    /// Small network for tests: blocks [1,2,2,1], k=8, 32×32 input.
    pub fn reduced() -> Self {
        Self {
            growth_rate: 8,
            init_features: 16,
            block_layers: [1, 2, 2, 1],
            input_size: 32,
            ..Self::densenet121()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "densenet121" | "densenet-121" => Some(Self::densenet121()),
            "densenet169" | "densenet-169" => Some(Self::densenet169()),
            "reduced" => Some(Self::reduced()),
            _ => None,
        }
    }

    pub fn with_outputs(mut self, num_outputs: usize) -> Self {
        self.num_outputs = num_outputs;
        self
    }

    /// Human label, e.g. `DenseNet-121` for the 121-layer block list.
    pub fn label(&self) -> String {
        format!("DenseNet-{}", weighted_layer_count(self))
    }

    pub fn transition_width(&self, entry_width: usize) -> usize {
        (self.compression * entry_width as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.growth_rate == 0 || self.init_features == 0 || self.bottleneck_width == 0 {
            return bad("growth_rate, init_features and bottleneck_width must be positive".into());
        }
        if self.num_outputs == 0 || self.input_channels == 0 || self.input_size == 0 {
            return bad("num_outputs, input_channels and input_size must be positive".into());
        }
        if self.block_layers.contains(&0) {
            return bad(format!("every block needs at least one layer, got {:?}", self.block_layers));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression must lie in (0, 1], got {}", self.compression));
        }
        feature_map_plan(self).map(|_| ())
    }

    /// `key = value` lines, the same grammar as the CLI configuration.
    pub fn to_text(&self) -> String {
        let blocks: Vec<String> = self.block_layers.iter().map(|b| b.to_string()).collect();
        format!(
            "growth_rate = {}\ninit_features = {}\nblock_layers = {}\ncompression = {}\n\
             bottleneck_width = {}\nnum_outputs = {}\ninput_channels = {}\ninput_size = {}\n",
            self.growth_rate,
            self.init_features,
            blocks.join(" "),
            self.compression,
            self.bottleneck_width,
            self.num_outputs,
            self.input_channels,
            self.input_size
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::densenet121();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| ModelError::InvalidConfig(format!("{key}: not an integer: {v:?}")))
            };
            match key {
                "growth_rate" => cfg.growth_rate = int(value)?,
                "init_features" => cfg.init_features = int(value)?,
                "block_layers" => {
                    let layers = value
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|s| !s.is_empty())
                        .map(int)
                        .collect::<Result<Vec<_>, _>>()?;
                    cfg.block_layers = layers.try_into().map_err(|v: Vec<usize>| {
                        ModelError::InvalidConfig(format!("block_layers needs exactly 4 entries, got {}", v.len()))
                    })?;
                }
                "compression" => {
                    cfg.compression = value
                        .parse()
                        .map_err(|_| ModelError::InvalidConfig(format!("compression: not a number: {value:?}")))?
                }
                "bottleneck_width" => cfg.bottleneck_width = int(value)?,
                "num_outputs" => cfg.num_outputs = int(value)?,
                "input_channels" => cfg.input_channels = int(value)?,
                "input_size" => cfg.input_size = int(value)?,
                other => return Err(ModelError::InvalidConfig(format!("unknown key {other:?}"))),
            }
            seen.push(key.to_string());
        }
        for required in ["growth_rate", "init_features", "block_layers", "compression", "num_outputs"] {
            if !seen.iter().any(|k| k == required) {
                return Err(ModelError::InvalidConfig(format!("missing key {required:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Convolution and fully-connected layers: stem, two per dense layer, one per
/// transition and the classifier.
pub fn weighted_layer_count(config: &DenseNetConfig) -> usize {
    1 + 2 * config.block_layers.iter().sum::<usize>() + 3 + 1
}

/// Direct connections among `layers` densely connected layers, L(L+1)/2.
pub fn count_connections(layers: u64) -> u64 {
    layers * (layers + 1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Stem,
    Pool,
    DenseBlock,
    TransitionConv,
    TransitionPool,
    GlobalPool,
    Classifier,
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStage {
    pub name: String,
    pub kind: StageKind,
    pub spatial: usize,
    pub channels: usize,
    pub layer: String,
}

impl PlanStage {
    /// Stem, pooling, dense blocks and the global pool: the rows whose sizes
    /// form the 112 → 56 → 56 → 28 → 14 → 7 → 1 progression.
    pub fn is_main(&self) -> bool {
        matches!(
            self.kind,
            StageKind::Stem | StageKind::Pool | StageKind::DenseBlock | StageKind::GlobalPool
        )
    }
}

impl fmt::Display for PlanStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}x{} {}", self.name, self.spatial, self.spatial, self.channels)
    }
}

/// Spatial size and channel width after every stage of the network.
pub fn feature_map_plan(config: &DenseNetConfig) -> Result<Vec<PlanStage>, ModelError> {
    let geometry = |stage: &str, size: usize| {
        ModelError::InvalidConfig(format!("{stage} does not fit a {size}×{size} feature map"))
    };
    let mut plan = Vec::new();
    let mut push = |name: String, kind, spatial, channels, layer: String| {
        plan.push(PlanStage { name, kind, spatial, channels, layer })
    };

    let mut size = out_extent(config.input_size, STEM_KERNEL, STEM_STRIDE, STEM_PADDING)
        .filter(|&s| s > 0)
        .ok_or_else(|| geometry("stem convolution", config.input_size))?;
    let mut width = config.init_features;
    push("conv".into(), StageKind::Stem, size, width, "7x7 conv, stride 2".into());

    size = STEM_POOL
        .output_size(size, size)
        .map_err(|_| geometry("stem max pool", size))?
        .0;
    push("pool".into(), StageKind::Pool, size, width, "3x3 max pool, stride 2".into());

    for (b, &layers) in config.block_layers.iter().enumerate() {
        width += layers * config.growth_rate;
        push(
            format!("block{}", b + 1),
            StageKind::DenseBlock,
            size,
            width,
            format!("[1x1 conv, 3x3 conv] x {layers}"),
        );
        if b < 3 {
            width = config.transition_width(width);
            if width == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "compression {} leaves transition {} with zero channels",
                    config.compression,
                    b + 1
                )));
            }
            push(format!("transition{}.conv", b + 1), StageKind::TransitionConv, size, width, "1x1 conv".into());
            size = TRANSITION_POOL
                .output_size(size, size)
                .map_err(|_| geometry("transition pool", size))?
                .0;
            push(
                format!("transition{}.pool", b + 1),
                StageKind::TransitionPool,
                size,
                width,
                "2x2 average pool, stride 2".into(),
            );
        }
    }
    push(
        "global_pool".into(),
        StageKind::GlobalPool,
        1,
        width,
        format!("{size}x{size} global average pool"),
    );
    push(
        "fc".into(),
        StageKind::Classifier,
        1,
        config.num_outputs,
        format!("{}D fully-connected", config.num_outputs),
    );
    Ok(plan)
}
