//! Synthetic shifted-digit dataset for desk-scale domain adaptation.
//!
//! Ten 8x8 digit glyphs are rendered into 3-channel images. Source-domain
//! samples draw a bright tinted foreground on a dark background with mild
//! noise. Target-domain samples are color-inverted and carry stronger noise,
//! giving a real covariate shift over the same label set. The source split
//! is labeled, the target split is unlabeled, and a held-out labeled target
//! split exists for evaluation only.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 8;
pub const NUM_CLASSES: usize = 10;

/// 8x8 digit glyph bitmaps, one byte per row, most significant bit left.
const GLYPHS: [[u8; 8]; 10] = [
    [0x3C, 0x66, 0x6E, 0x76, 0x66, 0x66, 0x3C, 0x00], // 0
    [0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00], // 1
    [0x3C, 0x66, 0x06, 0x0C, 0x18, 0x30, 0x7E, 0x00], // 2
    [0x3C, 0x66, 0x06, 0x1C, 0x06, 0x66, 0x3C, 0x00], // 3
    [0x0C, 0x1C, 0x3C, 0x6C, 0x7E, 0x0C, 0x0C, 0x00], // 4
    [0x7E, 0x60, 0x7C, 0x06, 0x06, 0x66, 0x3C, 0x00], // 5
    [0x1C, 0x30, 0x60, 0x7C, 0x66, 0x66, 0x3C, 0x00], // 6
    [0x7E, 0x06, 0x0C, 0x18, 0x30, 0x30, 0x30, 0x00], // 7
    [0x3C, 0x66, 0x66, 0x3C, 0x66, 0x66, 0x3C, 0x00], // 8
    [0x3C, 0x66, 0x66, 0x3E, 0x06, 0x0C, 0x38, 0x00], // 9
];

/// Labeled source data, unlabeled target data, and a held-out labeled target
/// split used for evaluation only.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub source_images: Vec<Tensor>,
    pub source_labels: Vec<usize>,
    pub target_images: Vec<Tensor>,
    pub eval_images: Vec<Tensor>,
    pub eval_labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub per_class_source: usize,
    pub per_class_target: usize,
    pub per_class_eval: usize,
    pub noise_source: f64,
    pub noise_target: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            per_class_source: 24,
            per_class_target: 24,
            per_class_eval: 16,
            noise_source: 0.05,
            noise_target: 0.10,
            seed: 7,
        }
    }
}

/// Render one digit sample. Target-domain samples (`invert`) flip the color
/// scale before noise lands on top.
pub fn render_digit(class: usize, invert: bool, noise: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if class >= NUM_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "digit class {} out of range",
            class
        )));
    }
    let glyph = &GLYPHS[class];
    let fg_level: f64 = rng.gen_range(0.65..0.95);
    let bg_level: f64 = rng.gen_range(0.05..0.25);
    let tint: [f64; 3] = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];
    let mut data = vec![0.0f64; 3 * GLYPH_SIZE * GLYPH_SIZE];
    for ch in 0..3 {
        for y in 0..GLYPH_SIZE {
            let row = glyph[y];
            for x in 0..GLYPH_SIZE {
                let on = (row >> (7 - x)) & 1 == 1;
                let mut v = if on { fg_level * tint[ch] } else { bg_level * tint[ch] };
                if invert {
                    v = 1.0 - v;
                }
                v += rng.gen_range(-1.0..1.0) * noise;
                data[(ch * GLYPH_SIZE + y) * GLYPH_SIZE + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, GLYPH_SIZE, GLYPH_SIZE], data)
}

/// Generate the full dataset deterministically from the config seed.
pub fn synthetic_digits(cfg: &SyntheticConfig) -> Result<DomainDataset> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut source_images = Vec::new();
    let mut source_labels = Vec::new();
    let mut target_images = Vec::new();
    let mut eval_images = Vec::new();
    let mut eval_labels = Vec::new();
    for class in 0..NUM_CLASSES {
        for _ in 0..cfg.per_class_source {
            source_images.push(render_digit(class, false, cfg.noise_source, &mut rng)?);
            source_labels.push(class);
        }
        for _ in 0..cfg.per_class_target {
            target_images.push(render_digit(class, true, cfg.noise_target, &mut rng)?);
        }
        for _ in 0..cfg.per_class_eval {
            eval_images.push(render_digit(class, true, cfg.noise_target, &mut rng)?);
            eval_labels.push(class);
        }
    }
    // interleave classes so mini-batches see a mix even without shuffling
    let mut order: Vec<usize> = (0..source_images.len()).collect();
    shuffle(&mut order, &mut rng);
    apply_order(&mut source_images, &order);
    apply_order(&mut source_labels, &order);
    let mut order: Vec<usize> = (0..target_images.len()).collect();
    shuffle(&mut order, &mut rng);
    apply_order(&mut target_images, &order);
    Ok(DomainDataset {
        source_images,
        source_labels,
        target_images,
        eval_images,
        eval_labels,
        classes: NUM_CLASSES,
    })
}

/// Fisher-Yates shuffle driven by the dataset RNG.
pub fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn apply_order<T: Clone>(items: &mut Vec<T>, order: &[usize]) {
    let reordered: Vec<T> = order.iter().map(|&i| items[i].clone()).collect();
    *items = reordered;
}
