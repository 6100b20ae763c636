//! Training corpora: the synthetic colored-shapes scenes and local
//! tab-separated `image<TAB>caption` files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageInput;
use crate::lm::{PretrainSample, Tokenizer};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub image: ImageInput,
    pub caption: String,
}

impl TrainingExample {
    pub fn new(image: ImageInput, caption: impl Into<String>) -> Result<Self> {
        let caption = caption.into();
        if caption.trim().is_empty() {
            return Err(Error::argument("caption is empty"));
        }
        Ok(Self { image, caption })
    }
}

pub const BACKGROUND: [f32; 3] = [0.5; 3];

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

const RGB: [[f32; 3]; 4] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
];

/// Words a tokenizer needs for shapes captions.
pub fn shapes_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = COLORS.to_vec();
    v.extend(SHAPES);
    v.push("and");
    v
}

/// Quadrant index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeObject {
    pub color: usize,
    pub shape: usize,
    pub quadrant: usize,
}

impl ShapeObject {
    pub fn phrase(&self) -> String {
        format!("{} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScene {
    pub objects: Vec<ShapeObject>,
    /// Per-object pixel offset inside its quadrant and brightness jitter.
    pub jitter: Vec<(i32, i32, f32)>,
}

impl ShapeScene {
    /// One to four objects with distinct colors, shapes and quadrants.
    pub fn random<R: Rng>(rng: &mut R, count: usize) -> Self {
        let count = count.clamp(1, 4);
        let mut colors: Vec<usize> = (0..4).collect();
        let mut shapes: Vec<usize> = (0..4).collect();
        let mut quads: Vec<usize> = (0..4).collect();
        colors.shuffle(rng);
        shapes.shuffle(rng);
        quads.shuffle(rng);
        let objects = (0..count)
            .map(|k| ShapeObject {
                color: colors[k],
                shape: shapes[k],
                quadrant: quads[k],
            })
            .collect();
        let jitter = (0..count)
            .map(|_| {
                (
                    rng.random_range(-1..=1),
                    rng.random_range(-1..=1),
                    rng.random_range(0.85..1.0),
                )
            })
            .collect();
        Self { objects, jitter }
    }

    /// Objects named in scene order, which is random, joined with "and".
    pub fn caption(&self) -> String {
        self.objects
            .iter()
            .map(ShapeObject::phrase)
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Draws the scene on a gray `size`×`size` canvas.
    pub fn render(&self, size: usize) -> ImageInput {
        let mut img = ImageInput::filled(size, size, BACKGROUND);
        let half = size as i32 / 2;
        let r = (size as f64 * 0.17).max(1.0);
        for (o, &(dy, dx, gain)) in self.objects.iter().zip(&self.jitter) {
            let cy = (o.quadrant / 2) as i32 * half + half / 2 + dy;
            let cx = (o.quadrant % 2) as i32 * half + half / 2 + dx;
            let rgb = RGB[o.color].map(|c| c * gain);
            for y in 0..size as i32 {
                for x in 0..size as i32 {
                    let (fy, fx) = ((y - cy) as f64 + 0.5, (x - cx) as f64 + 0.5);
                    let inside = match o.shape {
                        0 => fy.abs() <= r && fx.abs() <= r,
                        1 => fy * fy + fx * fx <= r * r * 1.1,
                        2 => fy <= r && fy >= -r && fx.abs() <= (fy + r) / 2.0,
                        _ => {
                            (fy.abs() <= r && fx.abs() <= r * 0.35)
                                || (fx.abs() <= r && fy.abs() <= r * 0.35)
                        }
                    };
                    if inside {
                        img.set_pixel(y as usize, x as usize, rgb);
                    }
                }
            }
        }
        img
    }

    /// Whether cell `(i, j)` of an `h`×`w` grid lies in `quadrant`.
    pub fn quadrant_contains(quadrant: usize, h: usize, w: usize, i: usize, j: usize) -> bool {
        let top = quadrant / 2 == 0;
        let left = quadrant.is_multiple_of(2);
        (i < h / 2) == top && (j < w / 2) == left
    }
}

/// Scenes with one or two objects, reproducible from `seed`.
pub fn shapes_scenes(count: usize, seed: u64, max_objects: usize) -> Vec<ShapeScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=max_objects.max(1));
            ShapeScene::random(&mut rng, n)
        })
        .collect()
}

pub fn shapes_examples(scenes: &[ShapeScene], size: usize) -> Vec<TrainingExample> {
    scenes
        .iter()
        .map(|s| TrainingExample {
            image: s.render(size),
            caption: s.caption(),
        })
        .collect()
}

/// Text-only samples for pretraining a decoder on shapes captions. Half of
/// them carry the caption's content words, shuffled, as context tokens; the
/// rest have no context.
pub fn shapes_pretrain_samples(
    tokenizer: &Tokenizer,
    count: usize,
    seed: u64,
) -> Vec<PretrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let and = tokenizer.id("and");
    (0..count)
        .map(|k| {
            let n = rng.random_range(1..=2);
            let scene = ShapeScene::random(&mut rng, n);
            let text = tokenizer.encode(&scene.caption());
            let context = if k % 2 == 0 {
                let mut words: Vec<u32> =
                    text.iter().copied().filter(|&t| Some(t) != and).collect();
                words.shuffle(&mut rng);
                words
            } else {
                Vec::new()
            };
            PretrainSample { context, text }
        })
        .collect()
}

/// Reads `image<TAB>caption` lines. Relative image paths resolve against the
/// file's directory; remote URLs are not fetched. Images are scaled and
/// center-cropped to `size`.
pub fn load_tsv(path: &Path, size: (usize, usize)) -> Result<Vec<TrainingExample>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (image, caption) = line.split_once('\t').ok_or_else(|| {
            Error::argument(format!(
                "{}:{}: expected image<TAB>caption",
                path.display(),
                n + 1
            ))
        })?;
        if image.contains("://") {
            return Err(Error::config(format!(
                "{}:{}: remote image `{image}` is not supported, download it first",
                path.display(),
                n + 1
            )));
        }
        let img = ImageInput::open(&base.join(image))?;
        out.push(TrainingExample::new(
            img.fit(size.0, size.1)?,
            caption.trim(),
        )?);
    }
    Ok(out)
}
