//! Deletion and insertion curves for saliency maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, ImageInput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Number of equal pixel batches; the curve has `steps + 1` points.
    pub steps: usize,
    /// Value written into deleted pixels, normally the dataset channel mean.
    pub fill: [f32; 3],
    /// Gaussian sigma, in pixels, of the insertion starting image.
    pub blur_sigma: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            fill: [0.485, 0.456, 0.406],
            blur_sigma: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Deletion,
    Insertion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionInsertionCurve {
    pub kind: CurveKind,
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
    /// Set when the saliency was constant and the row-major order decided.
    pub tie_broken: bool,
}

impl DeletionInsertionCurve {
    /// `fraction<TAB>probability` lines for plotting.
    pub fn to_table(&self) -> String {
        let mut s = String::from("fraction\tprobability\n");
        for (f, p) in self.fractions.iter().zip(&self.probabilities) {
            s.push_str(&format!("{f}\t{p}\n"));
        }
        s
    }
}

pub fn trapezoid_auc(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Pixel indices by descending saliency; equal values keep row-major order.
/// The flag reports a constant map.
pub fn saliency_order(saliency: &Grid) -> Result<(Vec<usize>, bool)> {
    if saliency.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("saliency contains non-finite values"));
    }
    let mut order: Vec<usize> = (0..saliency.values.len()).collect();
    order.sort_by(|&a, &b| saliency.values[b].total_cmp(&saliency.values[a]));
    let (lo, hi) = saliency.min_max();
    Ok((order, lo == hi))
}

pub type Classifier<'a> = dyn FnMut(&ImageInput) -> Result<f64> + 'a;

fn checked(classifier: &mut Classifier, image: &ImageInput) -> Result<f64> {
    let p = classifier(image)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::argument(format!(
            "classifier returned {p}, expected a probability"
        )));
    }
    Ok(p)
}

/// Walks `order` in `cfg.steps` equal batches. Deletion overwrites pixels of
/// `image` with the fill; insertion copies them from `image` into a blurred copy.
pub fn curve_with_order(
    kind: CurveKind,
    image: &ImageInput,
    order: &[usize],
    classifier: &mut Classifier,
    cfg: &CurveConfig,
    tie_broken: bool,
) -> Result<DeletionInsertionCurve> {
    if cfg.steps < 2 {
        return Err(Error::argument("a curve needs at least 2 steps"));
    }
    let n = image.pixels();
    if order.len() != n {
        return Err(Error::argument(format!(
            "order covers {} of {n} pixels",
            order.len()
        )));
    }
    let w = image.width();
    let mut current = match kind {
        CurveKind::Deletion => image.clone(),
        CurveKind::Insertion => image.gaussian_blur(cfg.blur_sigma),
    };
    let mut fractions = Vec::with_capacity(cfg.steps + 1);
    let mut probabilities = Vec::with_capacity(cfg.steps + 1);
    let mut done = 0;
    for k in 0..=cfg.steps {
        let upto = ((k * n) as f64 / cfg.steps as f64).round() as usize;
        for &p in &order[done..upto] {
            let (r, c) = (p / w, p % w);
            let value = match kind {
                CurveKind::Deletion => cfg.fill,
                CurveKind::Insertion => image.pixel(r, c),
            };
            current.set_pixel(r, c, value);
        }
        done = upto;
        fractions.push(k as f64 / cfg.steps as f64);
        probabilities.push(checked(classifier, &current)?);
    }
    Ok(DeletionInsertionCurve {
        kind,
        auc: trapezoid_auc(&fractions, &probabilities),
        fractions,
        probabilities,
        tie_broken,
    })
}

fn by_saliency(
    kind: CurveKind,
    image: &ImageInput,
    saliency: &Grid,
    classifier: &mut Classifier,
    cfg: &CurveConfig,
) -> Result<DeletionInsertionCurve> {
    if (saliency.height, saliency.width) != (image.height(), image.width()) {
        return Err(Error::argument(format!(
            "saliency is {}x{}, image is {}x{}; upsample it first",
            saliency.height,
            saliency.width,
            image.height(),
            image.width()
        )));
    }
    let (order, constant) = saliency_order(saliency)?;
    if constant {
        log::warn!("constant saliency map, pixels taken in row-major order");
    }
    curve_with_order(kind, image, &order, classifier, cfg, constant)
}

/// Class probability as the most salient pixels are replaced by the fill value.
pub fn deletion_curve(
    image: &ImageInput,
    saliency: &Grid,
    classifier: &mut Classifier,
    cfg: &CurveConfig,
) -> Result<DeletionInsertionCurve> {
    by_saliency(CurveKind::Deletion, image, saliency, classifier, cfg)
}

/// Class probability as the most salient pixels are restored into a blurred copy.
pub fn insertion_curve(
    image: &ImageInput,
    saliency: &Grid,
    classifier: &mut Classifier,
    cfg: &CurveConfig,
) -> Result<DeletionInsertionCurve> {
    by_saliency(CurveKind::Insertion, image, saliency, classifier, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> ImageInput {
        let data = (0..h * w * 3)
            .map(|k| ((k * 37) % 101) as f32 / 100.0)
            .collect();
        ImageInput::new(h, w, data).unwrap()
    }

    #[test]
    fn constant_classifier_gives_its_value() {
        let img = image(6, 5);
        let sal = Grid::new(6, 5, (0..30).map(|k| (k as f64).sin()).collect()).unwrap();
        let cfg = CurveConfig {
            steps: 7,
            ..Default::default()
        };
        for kind in [CurveKind::Deletion, CurveKind::Insertion] {
            let mut f = |_: &ImageInput| Ok(0.37);
            let c = by_saliency(kind, &img, &sal, &mut f, &cfg).unwrap();
            assert!((c.auc - 0.37).abs() < 1e-12);
            assert!(!c.tie_broken);
        }
    }

    #[test]
    fn three_by_three_hand_enumerated() {
        // Saliency ranks pixels 8, 7, ..., 0. With 3 steps, each step deletes
        // 3 pixels. The scripted classifier reports how many of pixels {0, 4, 8}
        // survive, divided by 3.
        let img = image(3, 3);
        let sal = Grid::new(3, 3, (0..9).map(|k| k as f64).collect()).unwrap();
        let fill = [0.5f32, 0.5, 0.5];
        let cfg = CurveConfig {
            steps: 3,
            fill,
            blur_sigma: 1.0,
        };
        let original = img.clone();
        let mut f = |x: &ImageInput| {
            let alive = [0usize, 4, 8]
                .iter()
                .filter(|&&p| x.pixel(p / 3, p % 3) == original.pixel(p / 3, p % 3))
                .count();
            Ok(alive as f64 / 3.0)
        };
        let c = deletion_curve(&img, &sal, &mut f, &cfg).unwrap();
        // step 0: all 3 alive; deleting {8,7,6}: 2 alive; {5,4,3}: 1 alive; all: 0
        assert_eq!(c.probabilities, vec![1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0]);
        let want = (1.0 + 2.0 / 3.0) / 6.0 + (2.0 / 3.0 + 1.0 / 3.0) / 6.0 + (1.0 / 3.0) / 6.0;
        assert!((c.auc - want).abs() < 1e-12);
    }

    #[test]
    fn constant_saliency_is_flagged_and_row_major() {
        let sal = Grid::new(2, 2, vec![1.0; 4]).unwrap();
        let (order, flat) = saliency_order(&sal).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert!(flat);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let img = image(2, 2);
        let sal = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut f = |_: &ImageInput| Ok(1.5);
        assert!(deletion_curve(&img, &sal, &mut f, &CurveConfig::default()).is_err());
        let mut g = |_: &ImageInput| Ok(0.5);
        let one = CurveConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(deletion_curve(&img, &sal, &mut g, &one).is_err());
        let small = Grid::new(1, 1, vec![0.0]).unwrap();
        assert!(deletion_curve(&img, &small, &mut g, &CurveConfig::default()).is_err());
    }
}
