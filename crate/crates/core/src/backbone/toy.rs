use candle_core::Tensor;

use super::{LayerRef, Taps, VisionModel};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamSource};

/// Small strided conv net with frozen random weights. Each stage halves the
/// resolution, so a stage's receptive field stays local.
pub struct ToyConvNet {
    stages: Vec<(Tensor, Tensor)>,
    params: Vec<(String, Tensor)>,
}

impl ToyConvNet {
    pub fn new(ps: &mut dyn ParamSource, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::config("toy backbone needs non-zero stage widths"));
        }
        let mut stages = Vec::new();
        let mut params = Vec::new();
        let mut in_ch = 3;
        for (k, &out_ch) in channels.iter().enumerate() {
            let name = format!("stage{}", k + 1);
            let std = (2.0 / (in_ch * 9) as f64).sqrt();
            let w = ps.param(
                &format!("{name}.weight"),
                &[out_ch, in_ch, 3, 3],
                Init::Normal { std },
            )?;
            let b = ps.param(
                &format!("{name}.bias"),
                &[out_ch],
                Init::Normal { std: 0.1 },
            )?;
            params.push((format!("{name}.weight"), w.clone()));
            params.push((format!("{name}.bias"), b.clone()));
            stages.push((w, b));
            in_ch = out_ch;
        }
        Ok(Self { stages, params })
    }
}

impl VisionModel for ToyConvNet {
    fn tap_names(&self) -> Vec<LayerRef> {
        (1..=self.stages.len())
            .map(|k| LayerRef::new(format!("stage{k}")))
            .collect()
    }

    fn forward(&self, input: &Tensor, taps: &mut Taps) -> Result<()> {
        let mut x = input.clone();
        for (k, (w, b)) in self.stages.iter().enumerate() {
            x = x
                .conv2d(w, 1, 2, 1, 1)?
                .broadcast_add(&b.reshape((1, (), 1, 1))?)?
                .relu()?;
            taps.record(&format!("stage{}", k + 1), &x);
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
