use candle_core::Tensor;

use super::{LayerRef, Taps, VisionModel};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamSource, Recorder, TransformerBlock};

/// Drops the leading class token of `(B, 1 + H*W, D)` tokens and lays the
/// patch tokens out as a `(B, D, H, W)` grid, row-major over patches.
pub fn tokens_to_grid(tokens: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, n, d) = tokens.dims3()?;
    if n != height * width + 1 {
        return Err(Error::integrity(format!(
            "{n} tokens cannot form a {height}x{width} grid plus class token"
        )));
    }
    Ok(tokens
        .narrow(1, 1, height * width)?
        .reshape((b, height, width, d))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Plain ViT; every block output (after its MLP) is tapped as `L{k}`, 1-based.
pub struct VisionTransformer {
    patch_weight: Tensor,
    patch_bias: Tensor,
    class_token: Tensor,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    patch_size: usize,
    grid: (usize, usize),
    params: Vec<(String, Tensor)>,
}

impl VisionTransformer {
    pub fn new(
        ps: &mut dyn ParamSource,
        input_size: [usize; 2],
        patch_size: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> Result<Self> {
        if patch_size == 0
            || !input_size[0].is_multiple_of(patch_size)
            || !input_size[1].is_multiple_of(patch_size)
        {
            return Err(Error::config(format!(
                "input {input_size:?} is not divisible into {patch_size}px patches"
            )));
        }
        let grid = (input_size[0] / patch_size, input_size[1] / patch_size);
        let mut rec = Recorder {
            inner: ps,
            seen: Vec::new(),
        };
        let std = (1.0 / (3 * patch_size * patch_size) as f64).sqrt();
        let patch_weight = rec.param(
            "patch_embed.weight",
            &[dim, 3, patch_size, patch_size],
            Init::Normal { std },
        )?;
        let patch_bias = rec.param("patch_embed.bias", &[dim], Init::Zeros)?;
        let class_token = rec.param("class_token", &[1, 1, dim], Init::Normal { std: 0.02 })?;
        let positions = rec.param(
            "positions",
            &[1, grid.0 * grid.1 + 1, dim],
            Init::Normal { std: 0.02 },
        )?;
        let blocks = (0..depth)
            .map(|k| TransformerBlock::new(&mut rec, &format!("blocks.{k}"), dim, heads, mlp_dim))
            .collect::<Result<_>>()?;
        let params = rec.seen;
        Ok(Self {
            patch_weight,
            patch_bias,
            class_token,
            positions,
            blocks,
            patch_size,
            grid,
            params,
        })
    }
}

impl VisionModel for VisionTransformer {
    fn tap_names(&self) -> Vec<LayerRef> {
        (1..=self.blocks.len())
            .map(|k| LayerRef::new(format!("L{k}")))
            .collect()
    }

    fn forward(&self, input: &Tensor, taps: &mut Taps) -> Result<()> {
        let b = input.dim(0)?;
        let patches = input
            .conv2d(&self.patch_weight, 0, self.patch_size, 1, 1)?
            .broadcast_add(&self.patch_bias.reshape((1, (), 1, 1))?)?;
        let (_, d, gh, gw) = patches.dims4()?;
        let tokens = patches.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let cls = self.class_token.broadcast_as((b, 1, d))?.contiguous()?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.positions)?;
        debug_assert_eq!((gh, gw), self.grid);
        for (k, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, None)?;
            let name = format!("L{}", k + 1);
            if taps.wants(&name) {
                taps.record(&name, &tokens_to_grid(&x, gh, gw)?);
            }
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
