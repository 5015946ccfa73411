//! Labeled image batches, the synthetic digit corpus, and an IDX (MNIST-format) loader.
//!
//! All images are float32 in `[0,1]` with layout `(N, C, H, W)`. Attacks and
//! training operate in this space; any model-side normalization lives inside
//! the model.

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MadError, Result};

/// A batch of images with class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Array4<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(MadError::Data(format!(
                "image count {} != label count {}",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (channels, height, width) of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let sh = self.images.shape();
        (sh[1], sh[2], sh[3])
    }

    /// Fail if any label is outside `[0, num_classes)`.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= num_classes {
                return Err(MadError::Data(format!(
                    "label {l} at index {i} out of range [0, {num_classes})"
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (c, h, w) = self.image_shape();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            images.slice_mut(s![k, .., .., ..]).assign(&self.images.slice(s![i, .., .., ..]));
            labels.push(self.labels[i]);
        }
        Self { images, labels }
    }

    pub fn concat(&self, other: &LabeledImages) -> Result<Self> {
        if self.image_shape() != other.image_shape() {
            return Err(MadError::Data("cannot concat batches with different image shapes".into()));
        }
        let images = ndarray::concatenate(ndarray::Axis(0), &[self.images.view(), other.images.view()])
            .map_err(|e| MadError::Data(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self { images, labels })
    }
}

/// Standard normal sample via Box-Muller.
pub(crate) fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// Seven-segment layout, as fractions of the digit bounding box.
// Segments: 0=a top, 1=b top-right, 2=c bottom-right, 3=d bottom,
// 4=e bottom-left, 5=f top-left, 6=g middle.
const SEGMENTS_OF_DIGIT: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 2, 3],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

/// Generate a deterministic synthetic digit corpus: ten classes of
/// seven-segment glyphs with random shift, intensity and Gaussian noise.
/// Classes cycle 0,1,2,... so any prefix is near class-balanced.
pub fn synthetic_digits(count: usize, shape: (usize, usize, usize), seed: u64) -> LabeledImages {
    let (c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Array4::<f32>::zeros((count, c, h, w));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = i % 10;
        labels.push(digit);
        render_digit(&mut images, i, digit, c, h, w, &mut rng);
    }
    LabeledImages { images, labels }
}

fn render_digit(
    images: &mut Array4<f32>,
    index: usize,
    digit: usize,
    c: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) {
    // Bounding box of the glyph, with room to jitter.
    let box_top = (h as f64 * 0.15) as i64;
    let box_bot = (h as f64 * 0.85) as i64;
    let box_left = (w as f64 * 0.28) as i64;
    let box_right = (w as f64 * 0.72) as i64;
    let mid = (box_top + box_bot) / 2;
    let thick = ((h as f64 / 10.0).round() as i64).max(2);

    let max_jitter = (h as i64 / 10).max(1);
    let dx = rng.gen_range(-max_jitter..=max_jitter);
    let dy = rng.gen_range(-max_jitter..=max_jitter);
    let intensity = rng.gen_range(0.7..1.0) as f32;
    let sigma = 0.15f64;

    // (y0, y1, x0, x1) per segment.
    let segs: [(i64, i64, i64, i64); 7] = [
        (box_top, box_top + thick, box_left, box_right),
        (box_top, mid, box_right - thick, box_right),
        (mid, box_bot, box_right - thick, box_right),
        (box_bot - thick, box_bot, box_left, box_right),
        (mid, box_bot, box_left, box_left + thick),
        (box_top, mid, box_left, box_left + thick),
        (mid - thick / 2, mid - thick / 2 + thick, box_left, box_right),
    ];

    let mut canvas = vec![0f32; h * w];
    for &seg in SEGMENTS_OF_DIGIT[digit] {
        let (y0, y1, x0, x1) = segs[seg];
        for y in y0 + dy..y1 + dy {
            for x in x0 + dx..x1 + dx {
                if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
                    canvas[y as usize * w + x as usize] = intensity;
                }
            }
        }
    }
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = canvas[y * w + x] as f64 + sigma * randn(rng);
                images[[index, ch, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Load an MNIST-format IDX image/label pair and normalize pixels to `[0,1]`.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<LabeledImages> {
    let img_bytes = std::fs::read(images_path)?;
    let lab_bytes = std::fs::read(labels_path)?;
    if img_bytes.len() < 16 || u32::from_be_bytes(img_bytes[0..4].try_into().unwrap()) != 0x0803 {
        return Err(MadError::Data(format!("{}: not an idx3-ubyte image file", images_path.display())));
    }
    if lab_bytes.len() < 8 || u32::from_be_bytes(lab_bytes[0..4].try_into().unwrap()) != 0x0801 {
        return Err(MadError::Data(format!("{}: not an idx1-ubyte label file", labels_path.display())));
    }
    let n = u32::from_be_bytes(img_bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_be_bytes(img_bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(img_bytes[12..16].try_into().unwrap()) as usize;
    let n_lab = u32::from_be_bytes(lab_bytes[4..8].try_into().unwrap()) as usize;
    if n != n_lab {
        return Err(MadError::Data(format!("image count {n} != label count {n_lab}")));
    }
    if img_bytes.len() != 16 + n * h * w {
        return Err(MadError::Data("truncated idx image file".into()));
    }
    let mut images = Array4::<f32>::zeros((n, 1, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                images[[i, 0, y, x]] = img_bytes[16 + i * h * w + y * w + x] as f32 / 255.0;
            }
        }
    }
    let labels = lab_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    LabeledImages::new(images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_digits(50, (1, 28, 28), 7);
        let b = synthetic_digits(50, (1, 28, 28), 7);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = synthetic_digits(50, (1, 28, 28), 8);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_classes_cycle() {
        let d = synthetic_digits(25, (1, 28, 28), 0);
        assert_eq!(d.labels[0], 0);
        assert_eq!(d.labels[13], 3);
    }

    #[test]
    fn label_bounds_checked() {
        let d = synthetic_digits(10, (1, 8, 8), 0);
        assert!(d.check_labels(10).is_ok());
        assert!(d.check_labels(5).is_err());
    }
}
