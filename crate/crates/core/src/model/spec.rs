use serde::{Deserialize, Serialize};

use super::ModelError;

/// Names accepted by [`NetworkSpec::preset`].
pub const PRESETS: [&str; 2] = ["mini-dense", "mini-effnet"];

/// One stage of a network. Every variant names its input channel count so a
/// spec can be checked for shape consistency before any weights exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// Convolution (no bias) → batchnorm → relu. Padding is
    /// `(kernel - stride) / 2`, so the output extent is exactly `input / stride`.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    /// `num_layers` rounds of batchnorm → relu → 3×3 conv with `growth_rate`
    /// outputs, each concatenated onto the running feature stack.
    Dense { in_channels: usize, growth_rate: usize, num_layers: usize },
    /// Batchnorm → 1×1 conv to `floor(compression * C)` channels → 2×2 average pool.
    Transition { in_channels: usize, compression: f64 },
    /// Inverted bottleneck with squeeze-and-excitation. The depthwise kernel
    /// is `stride + 2` wide with padding 1.
    #[serde(rename = "mbconv")]
    MbConv { in_channels: usize, out_channels: usize, expansion: usize, se_ratio: f64, stride: usize },
}

/// Global average pool → dense to one logit → sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Channels, height, width of one input image.
    pub input_shape: [usize; 3],
    pub blocks: Vec<BlockSpec>,
    pub head: HeadSpec,
    /// Block whose output feeds Grad-CAM; the last block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcam_target: Option<String>,
}

/// Input and output extents (channels, height, width) of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub name: String,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl BlockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::Conv { .. } => "conv",
            BlockSpec::Dense { .. } => "dense",
            BlockSpec::Transition { .. } => "transition",
            BlockSpec::MbConv { .. } => "mbconv",
        }
    }

    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::Conv { in_channels, .. }
            | BlockSpec::Dense { in_channels, .. }
            | BlockSpec::Transition { in_channels, .. }
            | BlockSpec::MbConv { in_channels, .. } => in_channels,
        }
    }

    /// Channels after the expansion conv of an MBConv block.
    pub(crate) fn expanded(&self) -> usize {
        match *self {
            BlockSpec::MbConv { in_channels, expansion, .. } => in_channels * expansion,
            _ => 0,
        }
    }

    /// Hidden width of the squeeze-and-excitation bottleneck, `ceil(e * C * r)`.
    pub(crate) fn se_hidden(&self) -> usize {
        match *self {
            BlockSpec::MbConv { in_channels, expansion, se_ratio, .. } => {
                ((expansion * in_channels) as f64 * se_ratio).ceil().max(1.0) as usize
            }
            _ => 0,
        }
    }

    pub(crate) fn transition_out(c: usize, compression: f64) -> usize {
        // a tiny slack so products like 0.5 * 48 never round down past an integer
        (c as f64 * compression + 1e-9).floor() as usize
    }

    fn output_shape(&self, name: &str, [c, h, w]: [usize; 3]) -> Result<[usize; 3], ModelError> {
        let invalid = |detail: String| Err(ModelError::InvalidBlock { block: name.to_string(), detail });
        match *self {
            BlockSpec::Conv { out_channels, kernel, stride, .. } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return invalid("out_channels, kernel and stride must be positive".into());
                }
                if kernel < stride || (kernel - stride) % 2 != 0 {
                    return invalid(format!("kernel {kernel} with stride {stride} has no symmetric exact padding"));
                }
                if h % stride != 0 || w % stride != 0 {
                    return invalid(format!("input {h}x{w} is not divisible by stride {stride}"));
                }
                Ok([out_channels, h / stride, w / stride])
            }
            BlockSpec::Dense { growth_rate, num_layers, .. } => {
                if growth_rate < 1 {
                    return invalid("growth_rate must be at least 1".into());
                }
                Ok([c + num_layers * growth_rate, h, w])
            }
            BlockSpec::Transition { compression, .. } => {
                if !(compression > 0.0 && compression <= 1.0) {
                    return invalid(format!("compression {compression} outside (0, 1]"));
                }
                let out = Self::transition_out(c, compression);
                if out == 0 {
                    return invalid(format!("compression {compression} leaves no channels from {c}"));
                }
                if h % 2 != 0 || w % 2 != 0 {
                    return invalid(format!("2x2 pooling needs even extents, got {h}x{w}"));
                }
                Ok([out, h / 2, w / 2])
            }
            BlockSpec::MbConv { out_channels, expansion, se_ratio, stride, .. } => {
                if expansion < 1 || out_channels == 0 {
                    return invalid("expansion and out_channels must be at least 1".into());
                }
                if !(se_ratio > 0.0 && se_ratio <= 1.0) {
                    return invalid(format!("se_ratio {se_ratio} outside (0, 1]"));
                }
                if stride != 1 && stride != 2 {
                    return invalid(format!("stride {stride}; only 1 and 2 are supported"));
                }
                if h % stride != 0 || w % stride != 0 {
                    return invalid(format!("input {h}x{w} is not divisible by stride {stride}"));
                }
                Ok([out_channels, h / stride, w / stride])
            }
        }
    }
}

impl NetworkSpec {
    /// A shipped architecture at the given square input size (64 by default
    /// in the CLI). The size must be a multiple of 4.
    pub fn preset(name: &str, input_size: usize) -> Result<Self, ModelError> {
        use BlockSpec::*;
        let blocks = match name {
            "mini-dense" => vec![
                Conv { in_channels: 3, out_channels: 16, kernel: 4, stride: 2 },
                Dense { in_channels: 16, growth_rate: 8, num_layers: 4 },
                Transition { in_channels: 48, compression: 0.5 },
                Dense { in_channels: 24, growth_rate: 8, num_layers: 4 },
            ],
            "mini-effnet" => vec![
                Conv { in_channels: 3, out_channels: 16, kernel: 4, stride: 2 },
                MbConv { in_channels: 16, out_channels: 16, expansion: 1, se_ratio: 0.25, stride: 1 },
                MbConv { in_channels: 16, out_channels: 24, expansion: 4, se_ratio: 0.25, stride: 2 },
                MbConv { in_channels: 24, out_channels: 24, expansion: 4, se_ratio: 0.25, stride: 1 },
                Conv { in_channels: 24, out_channels: 64, kernel: 1, stride: 1 },
            ],
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        };
        let last = match blocks.last() {
            Some(BlockSpec::Dense { in_channels, growth_rate, num_layers }) => in_channels + growth_rate * num_layers,
            Some(BlockSpec::Conv { out_channels, .. }) => *out_channels,
            _ => unreachable!("presets end in a dense or conv block"),
        };
        let spec = Self {
            input_shape: [3, input_size, input_size],
            blocks,
            head: HeadSpec { in_channels: last },
            gradcam_target: None,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    /// Names of the blocks in order: kind followed by position, e.g. `dense1`.
    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().enumerate().map(|(i, b)| format!("{}{i}", b.kind())).collect()
    }

    /// Name of the layer Grad-CAM reads.
    pub fn gradcam_layer(&self) -> String {
        match &self.gradcam_target {
            Some(t) => t.clone(),
            None => self.block_names().pop().unwrap_or_default(),
        }
    }

    /// Walks the block chain symbolically, checking that every block's
    /// declared input channels match what its predecessor produces.
    pub fn infer_shapes(&self) -> Result<Vec<BlockShape>, ModelError> {
        if self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("input shape {:?} has a zero extent", self.input_shape)));
        }
        if self.blocks.is_empty() {
            return Err(ModelError::InvalidSpec("a network needs at least one block".into()));
        }
        let names = self.block_names();
        let mut shape = self.input_shape;
        let mut prev = "input".to_string();
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, name) in self.blocks.iter().zip(&names) {
            if block.in_channels() != shape[0] {
                return Err(ModelError::ShapeChain {
                    boundary: format!("{prev} -> {name}"),
                    detail: format!("{prev} produces {} channels, {name} expects {}", shape[0], block.in_channels()),
                });
            }
            let next = block.output_shape(name, shape)?;
            out.push(BlockShape { name: name.clone(), input: shape, output: next });
            shape = next;
            prev = name.clone();
        }
        if self.head.in_channels != shape[0] {
            return Err(ModelError::ShapeChain {
                boundary: format!("{prev} -> head"),
                detail: format!("{prev} produces {} channels, head expects {}", shape[0], self.head.in_channels),
            });
        }
        if let Some(t) = &self.gradcam_target {
            if !names.contains(t) {
                return Err(ModelError::InvalidSpec(format!("gradcam_target '{t}' is not a block name")));
            }
        }
        Ok(out)
    }

    /// Every trainable tensor as (name, shape), in construction order.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let shapes = self.infer_shapes()?;
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize| {
            out.push((format!("{prefix}.gamma"), vec![c]));
            out.push((format!("{prefix}.beta"), vec![c]));
        };
        for (block, shape) in self.blocks.iter().zip(&shapes) {
            let n = &shape.name;
            match *block {
                BlockSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    out.push((format!("{n}.conv.weight"), vec![out_channels, in_channels, kernel, kernel]));
                    bn(&mut out, &format!("{n}.bn"), out_channels);
                }
                BlockSpec::Dense { in_channels, growth_rate, num_layers } => {
                    for l in 0..num_layers {
                        let c = in_channels + l * growth_rate;
                        bn(&mut out, &format!("{n}.layer{l}.bn"), c);
                        out.push((format!("{n}.layer{l}.conv.weight"), vec![growth_rate, c, 3, 3]));
                    }
                }
                BlockSpec::Transition { in_channels, .. } => {
                    bn(&mut out, &format!("{n}.bn"), in_channels);
                    out.push((format!("{n}.conv.weight"), vec![shape.output[0], in_channels, 1, 1]));
                }
                BlockSpec::MbConv { in_channels, out_channels, stride, .. } => {
                    let e = block.expanded();
                    let hid = block.se_hidden();
                    out.push((format!("{n}.expand.conv.weight"), vec![e, in_channels, 1, 1]));
                    bn(&mut out, &format!("{n}.expand.bn"), e);
                    out.push((format!("{n}.dw.conv.weight"), vec![e, 1, stride + 2, stride + 2]));
                    bn(&mut out, &format!("{n}.dw.bn"), e);
                    out.push((format!("{n}.se.reduce.weight"), vec![e, hid]));
                    out.push((format!("{n}.se.reduce.bias"), vec![hid]));
                    out.push((format!("{n}.se.expand.weight"), vec![hid, e]));
                    out.push((format!("{n}.se.expand.bias"), vec![e]));
                    out.push((format!("{n}.project.conv.weight"), vec![out_channels, e, 1, 1]));
                    bn(&mut out, &format!("{n}.project.bn"), out_channels);
                }
            }
        }
        out.push(("head.weight".into(), vec![self.head.in_channels, 1]));
        out.push(("head.bias".into(), vec![1]));
        Ok(out)
    }

    /// Batchnorm layers as (name, channels), in construction order.
    pub fn batchnorm_layout(&self) -> Result<Vec<(String, usize)>, ModelError> {
        Ok(self
            .param_layout()?
            .into_iter()
            .filter_map(|(name, shape)| name.strip_suffix(".gamma").map(|p| (p.to_string(), shape[0])))
            .collect())
    }

    pub fn param_count(&self) -> Result<usize, ModelError> {
        Ok(self.param_layout()?.iter().map(|(_, s)| s.iter().product::<usize>()).sum())
    }
}
