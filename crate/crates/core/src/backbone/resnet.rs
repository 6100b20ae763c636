//! ResNet-50 with torchvision parameter names, so converted torchvision
//! checkpoints load directly. Block outputs are tapped as `layer{s}.{b}`;
//! the stage ends also answer to the conventional layer numbers
//! `L11`, `L21`, `L39` and `L49`.

use candle_core::{Tensor, D};

use super::{LayerRef, Taps, VisionModel};
use crate::error::Result;
use crate::nn::{Init, ParamSource, Recorder};

const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STAGE_ALIASES: [&str; 4] = ["L11", "L21", "L39", "L49"];

struct Conv {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        ps: &mut dyn ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        Ok(Self {
            weight: ps.param(
                &format!("{name}.weight"),
                &[out_ch, in_ch, k, k],
                Init::Normal { std },
            )?,
            stride,
            padding,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?)
    }
}

/// Inference-mode batch norm folded into a per-channel affine map.
struct BatchNorm {
    scale: Tensor,
    shift: Tensor,
}

impl BatchNorm {
    fn new(ps: &mut dyn ParamSource, name: &str, ch: usize) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[ch], Init::Ones)?;
        let bias = ps.param(&format!("{name}.bias"), &[ch], Init::Zeros)?;
        let mean = ps.param(&format!("{name}.running_mean"), &[ch], Init::Zeros)?;
        let var = ps.param(&format!("{name}.running_var"), &[ch], Init::Ones)?;
        let scale = weight.div(&(var + 1e-5)?.sqrt()?)?;
        let shift = (bias - mean.mul(&scale)?)?;
        Ok(Self {
            scale: scale.reshape((1, ch, 1, 1))?,
            shift: shift.reshape((1, ch, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?.broadcast_add(&self.shift)?)
    }
}

struct Bottleneck {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    conv3: Conv,
    bn3: BatchNorm,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn new(
        ps: &mut dyn ParamSource,
        name: &str,
        in_ch: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let out_ch = width * 4;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv::new(
                    ps,
                    &format!("{name}.downsample.0"),
                    in_ch,
                    out_ch,
                    1,
                    stride,
                    0,
                )?,
                BatchNorm::new(ps, &format!("{name}.downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), in_ch, width, 1, 1, 0)?,
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), width)?,
            conv2: Conv::new(ps, &format!("{name}.conv2"), width, width, 3, stride, 1)?,
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), width)?,
            conv3: Conv::new(ps, &format!("{name}.conv3"), width, out_ch, 1, 1, 0)?,
            bn3: BatchNorm::new(ps, &format!("{name}.bn3"), out_ch)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

pub struct ResNet50 {
    conv1: Conv,
    bn1: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
    params: Vec<(String, Tensor)>,
}

impl ResNet50 {
    pub fn new(ps: &mut dyn ParamSource) -> Result<Self> {
        let mut recorder = Recorder {
            inner: ps,
            seen: Vec::new(),
        };
        let conv1 = Conv::new(&mut recorder, "conv1", 3, 64, 7, 2, 3)?;
        let bn1 = BatchNorm::new(&mut recorder, "bn1", 64)?;
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for (s, (&blocks, &width)) in STAGE_BLOCKS.iter().zip(&STAGE_WIDTHS).enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(
                    &mut recorder,
                    &format!("layer{}.{b}", s + 1),
                    in_ch,
                    width,
                    stride,
                )?);
                in_ch = width * 4;
            }
            stages.push(stage);
        }
        let params = recorder.seen;
        Ok(Self {
            conv1,
            bn1,
            stages,
            params,
        })
    }
}

impl VisionModel for ResNet50 {
    fn tap_names(&self) -> Vec<LayerRef> {
        let mut names = Vec::new();
        for (s, &blocks) in STAGE_BLOCKS.iter().enumerate() {
            for b in 0..blocks {
                names.push(LayerRef::new(format!("layer{}.{b}", s + 1)));
            }
            names.push(LayerRef::new(STAGE_ALIASES[s]));
        }
        names
    }

    fn forward(&self, input: &Tensor, taps: &mut Taps) -> Result<()> {
        let x = self.bn1.forward(&self.conv1.forward(input)?)?.relu()?;
        // Post-ReLU values are non-negative, so zero padding equals -inf padding here.
        let mut x = x
            .pad_with_zeros(D::Minus2, 1, 1)?
            .pad_with_zeros(D::Minus1, 1, 1)?
            .max_pool2d_with_stride(3, 2)?;
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                x = block.forward(&x)?;
                taps.record(&format!("layer{}.{b}", s + 1), &x);
            }
            taps.record(STAGE_ALIASES[s], &x);
            if taps.complete() {
                break;
            }
        }
        Ok(())
    }

    fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }
}
