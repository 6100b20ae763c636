//! Structured training dropout: whole spatial vectors are removed before
//! pooling, and whole layers are removed from the translator input. A draw
//! that would remove everything is thrown away and redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pool_features, FeatureVector, KeepGrid, LayerDims, SpatialFeatureMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub p_feature: f64,
    pub p_token: f64,
    pub seed: u64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            p_feature: 0.5,
            p_token: 0.5,
            seed: 0,
        }
    }
}

impl DropoutConfig {
    pub fn disabled() -> Self {
        Self {
            p_feature: 0.0,
            p_token: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_feature", self.p_feature), ("p_token", self.p_token)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub layer_keep: Vec<bool>,
    pub location_keep: Vec<KeepGrid>,
}

impl DropoutMask {
    /// Keeps everything.
    pub fn full(dims: &[LayerDims]) -> Self {
        Self {
            layer_keep: vec![true; dims.len()],
            location_keep: dims
                .iter()
                .map(|d| KeepGrid::all(d.height, d.width))
                .collect(),
        }
    }

    /// True when at least one layer is kept and every kept layer keeps a location.
    pub fn is_admissible(&self) -> bool {
        self.layer_keep.iter().any(|&k| k)
            && self
                .layer_keep
                .iter()
                .zip(&self.location_keep)
                .all(|(&k, g)| !k || g.kept() > 0)
    }
}

fn keep_flags<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    loop {
        let flags: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        if flags.iter().any(|&k| k) {
            return flags;
        }
    }
}

/// Each cell kept independently with probability `1 - p`, redrawn until one survives.
pub fn sample_feature_mask<R: Rng>(
    height: usize,
    width: usize,
    p: f64,
    rng: &mut R,
) -> Result<KeepGrid> {
    if height * width == 0 {
        return Err(Error::argument("feature mask needs at least one cell"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::argument(format!(
            "drop probability {p} is outside [0, 1)"
        )));
    }
    Ok(KeepGrid {
        height,
        width,
        keep: keep_flags(height * width, p, rng),
    })
}

/// Per-layer keep flags with the same redraw rule.
pub fn sample_token_mask<R: Rng>(layers: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if layers == 0 {
        return Err(Error::argument("token mask needs at least one layer"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::argument(format!(
            "drop probability {p} is outside [0, 1)"
        )));
    }
    Ok(keep_flags(layers, p, rng))
}

/// Owns the RNG stream; one per training worker.
#[derive(Clone, Debug)]
pub struct DropoutSampler {
    cfg: DropoutConfig,
    rng: ChaCha8Rng,
}

impl DropoutSampler {
    pub fn new(cfg: DropoutConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn config(&self) -> &DropoutConfig {
        &self.cfg
    }

    /// Position in the RNG stream, for checkpoints.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn seek(&mut self, position: u128) {
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.rng.set_word_pos(position);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Token and feature masks are redrawn independently of each other.
    pub fn sample(&mut self, dims: &[LayerDims]) -> Result<DropoutMask> {
        let layer_keep = sample_token_mask(dims.len(), self.cfg.p_token, &mut self.rng)?;
        let location_keep = dims
            .iter()
            .map(|d| sample_feature_mask(d.height, d.width, self.cfg.p_feature, &mut self.rng))
            .collect::<Result<_>>()?;
        Ok(DropoutMask {
            layer_keep,
            location_keep,
        })
    }
}

/// Masked-mean pooled vector for every kept layer; dropped layers are left out.
pub fn apply(mask: &DropoutMask, maps: &[SpatialFeatureMap]) -> Result<Vec<FeatureVector>> {
    if mask.layer_keep.len() != maps.len() || mask.location_keep.len() != maps.len() {
        return Err(Error::integrity(format!(
            "mask covers {} layers, {} maps given",
            mask.layer_keep.len(),
            maps.len()
        )));
    }
    if !mask.is_admissible() {
        return Err(Error::InvalidMask(
            "mask drops every layer or every location".into(),
        ));
    }
    maps.iter()
        .zip(&mask.layer_keep)
        .zip(&mask.location_keep)
        .filter(|((_, &keep), _)| keep)
        .map(|((map, _), grid)| pool_features(map, Some(grid)))
        .collect()
}
