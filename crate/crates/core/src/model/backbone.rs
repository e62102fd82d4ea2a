//! Reference hierarchical convolutional backbone.

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use super::params::{Init, Scope};
use crate::config::ModelConfig;
use crate::error::{CmidError, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// What the framework needs from an encoder: access to the stem output
/// (where the mask token is added) and the final feature map.
pub trait Backbone {
    /// Input standardization and stem; `B x C0 x H/stem x W/stem`.
    fn stem(&self, images: &Tensor) -> Result<Tensor>;
    /// Remaining stages applied to the stem output.
    fn trunk(&self, stem: &Tensor) -> Result<Tensor>;
    fn stem_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn stem_stride(&self) -> usize;
    fn total_stride(&self) -> usize;

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.trunk(&self.stem(images)?)
    }
}

/// 2-D convolution over `B x C x H x W` with an `[out, in, k, k]` kernel.
///
/// Non-overlapping kernels (`k == stride`, no padding) and stride-1 kernels
/// are lowered to a patch matrix times the kernel matrix, which keeps both
/// the forward and the backward pass on matrix products.
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        if kh != kw {
            return Err(CmidError::Shape(format!("non-square kernel {kh}x{kw}")));
        }
        Ok(Self {
            weight,
            bias,
            kernel: kh,
            stride,
            padding,
        })
    }

    /// Rows of flattened receptive fields, `(B*Ho*Wo) x (C*k*k)`, ordered
    /// `(c, ky, kx)` to match the kernel layout.
    fn patches(&self, x: &Tensor) -> Result<Option<(Tensor, usize, usize)>> {
        let (b, c, h, w) = x.dims4()?;
        let k = self.kernel;
        if k == self.stride && self.padding == 0 {
            if h % k != 0 || w % k != 0 {
                return Err(CmidError::Shape(format!("{h}x{w} input not divisible by kernel {k}")));
            }
            let (ho, wo) = (h / k, w / k);
            let rows = x
                .reshape((b, c, ho, k, wo, k))?
                .permute((0, 2, 4, 1, 3, 5))?
                .reshape((b * ho * wo, c * k * k))?;
            return Ok(Some((rows, ho, wo)));
        }
        if self.stride == 1 {
            let p = self.padding;
            let xp = if p > 0 { x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)? } else { x.clone() };
            let (ho, wo) = (h + 2 * p + 1 - k, w + 2 * p + 1 - k);
            let mut shifted = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    shifted.push(xp.narrow(2, ky, ho)?.narrow(3, kx, wo)?);
                }
            }
            let rows = Tensor::stack(&shifted, 2)?
                .permute((0, 3, 4, 1, 2))?
                .reshape((b * ho * wo, c * k * k))?;
            return Ok(Some((rows, ho, wo)));
        }
        Ok(None)
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let (cout, cin, k, _) = self.weight.dims4()?;
        let lowered = self
            .patches(x)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let out = match lowered {
            Some((rows, ho, wo)) => {
                let kernel = self.weight.reshape((cout, cin * k * k))?;
                rows.matmul(&kernel.t()?)?
                    .broadcast_add(&self.bias)?
                    .reshape((b, ho, wo, cout))?
                    .permute((0, 3, 1, 2))?
            }
            None => {
                let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
                y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?
            }
        };
        Ok(out)
    }
}

pub(crate) fn conv(
    scope: &Scope,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv> {
    let fan_in = cin * kernel * kernel;
    let w = scope.var("weight", &[cout, cin, kernel, kernel], Init::FanInUniform { fan_in })?;
    let b = scope.var("bias", &[cout], Init::FanInUniform { fan_in })?;
    Conv::new(w, b, stride, padding)
}

fn norm(scope: &Scope, channels: usize) -> Result<GroupNorm> {
    let groups = if channels % 8 == 0 { 8 } else { 1 };
    let w = scope.var("weight", &[channels], Init::Const(1.0))?;
    let b = scope.var("bias", &[channels], Init::Const(0.0))?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

struct ResidualBlock {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
}

impl ResidualBlock {
    fn new(scope: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: conv(&scope.pp("conv1"), channels, channels, 3, 1, 1)?,
            norm1: norm(&scope.pp("norm1"), channels)?,
            conv2: conv(&scope.pp("conv2"), channels, channels, 3, 1, 1)?,
            norm2: norm(&scope.pp("norm2"), channels)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok((h + x)?.relu()?)
    }
}

struct Stage {
    down: Option<(Conv, GroupNorm)>,
    blocks: Vec<ResidualBlock>,
}

/// Patchifying stem followed by stages of residual 3x3 blocks; each stage
/// begins with a strided (or 1x1) projection when its stride or width
/// differs from the previous stage.
pub struct ConvBackbone {
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<Stage>,
    mean: Vec<f64>,
    std: Vec<f64>,
    stem_stride: usize,
    total_stride: usize,
    stem_channels: usize,
    out_channels: usize,
}

impl ConvBackbone {
    pub fn new(scope: &Scope, cfg: &ModelConfig, in_channels: usize) -> Result<Self> {
        let s = cfg.stem_stride;
        let c0 = cfg.stage_widths[0];
        let stem = conv(&scope.pp("stem"), in_channels, c0, s, s, 0)?;
        let stem_norm = norm(&scope.pp("stem_norm"), c0)?;
        let mut stages = Vec::new();
        let mut cin = c0;
        for (i, (&stride, &width)) in cfg.stage_strides.iter().zip(&cfg.stage_widths).enumerate() {
            let sc = scope.pp(&format!("stage{i}"));
            let down = if stride > 1 || width != cin {
                let k = stride.max(1);
                Some((
                    conv(&sc.pp("down"), cin, width, k, stride, 0)?,
                    norm(&sc.pp("down_norm"), width)?,
                ))
            } else {
                None
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| ResidualBlock::new(&sc.pp(&format!("block{b}")), width))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { down, blocks });
            cin = width;
        }
        let (mean, std) = if in_channels == 3 {
            (IMAGENET_MEAN.to_vec(), IMAGENET_STD.to_vec())
        } else {
            (vec![0.5; in_channels], vec![0.25; in_channels])
        };
        Ok(Self {
            stem,
            stem_norm,
            stages,
            mean,
            std,
            stem_stride: s,
            total_stride: cfg.total_stride(),
            stem_channels: c0,
            out_channels: cin,
        })
    }
}

impl Backbone for ConvBackbone {
    fn stem(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.mean.len() {
            return Err(CmidError::Shape(format!(
                "expected {} input channels, got {c}",
                self.mean.len()
            )));
        }
        if h % self.total_stride != 0 || w % self.total_stride != 0 {
            return Err(CmidError::Shape(format!(
                "input {h}x{w} not divisible by total stride {}",
                self.total_stride
            )));
        }
        let dev = images.device();
        let mean = Tensor::new(self.mean.as_slice(), dev)?
            .to_dtype(images.dtype())?
            .reshape((1, c, 1, 1))?;
        let inv_std: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        let inv_std = Tensor::new(inv_std.as_slice(), dev)?
            .to_dtype(images.dtype())?
            .reshape((1, c, 1, 1))?;
        let x = images.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        Ok(self.stem_norm.forward(&self.stem.forward(&x)?)?.relu()?)
    }

    fn trunk(&self, stem: &Tensor) -> Result<Tensor> {
        let mut x = stem.clone();
        for stage in &self.stages {
            if let Some((conv, norm)) = &stage.down {
                x = norm.forward(&conv.forward(&x)?)?.relu()?;
            }
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
        }
        Ok(x)
    }

    fn stem_channels(&self) -> usize {
        self.stem_channels
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn stem_stride(&self) -> usize {
        self.stem_stride
    }

    fn total_stride(&self) -> usize {
        self.total_stride
    }
}
