//! Synthetic moving-square sequences, written in the `flat_pairs` layout.
//! Used by the test suites and handy for smoke-testing the CLI without a
//! real dataset: a bright textured square translates over a noisy gradient
//! background; the mask is the square's support.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub name: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub square: usize,
    /// Top-left corner at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Uniform noise amplitude added to every pixel.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            frames: 5,
            height: 64,
            width: 64,
            square: 24,
            start: (8.0, 6.0),
            velocity: (2.0, 3.0),
            noise: 0.05,
            seed,
        }
    }
}

/// Writes `root/frames/<name>/fNNN.png` and `root/masks/<name>/fNNN.png`.
pub fn write_sequence(root: &Path, spec: &SynthSpec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    for f in 0..spec.frames {
        let top = (spec.start.0 + spec.velocity.0 * f as f64)
            .round()
            .clamp(0.0, (h - spec.square) as f64) as usize;
        let left = (spec.start.1 + spec.velocity.1 * f as f64)
            .round()
            .clamp(0.0, (w - spec.square) as f64) as usize;
        let mut frame = image::RgbImage::new(w as u32, h as u32);
        let mut mask = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let inside =
                    y >= top && y < top + spec.square && x >= left && x < left + spec.square;
                let n = rng.gen_range(-spec.noise..=spec.noise);
                let (r, g, b) = if inside {
                    (0.85 + n, 0.75 + n, 0.2 + n)
                } else {
                    // gradient background with a little texture
                    let gy = y as f64 / h as f64;
                    let gx = x as f64 / w as f64;
                    (0.15 + 0.25 * gy + n, 0.2 + 0.2 * gx + n, 0.35 + 0.15 * gy + n)
                };
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
                frame.put_pixel(x as u32, y as u32, image::Rgb([q(r), q(g), q(b)]));
                mask.put_pixel(x as u32, y as u32, image::Luma([if inside { 255 } else { 0 }]));
            }
        }
        let stem = format!("f{f:03}.png");
        let frame_path = root.join("frames").join(&spec.name).join(&stem);
        let mask_path = root.join("masks").join(&spec.name).join(&stem);
        std::fs::create_dir_all(frame_path.parent().unwrap())?;
        std::fs::create_dir_all(mask_path.parent().unwrap())?;
        frame.save(&frame_path)?;
        mask.save(&mask_path)?;
    }
    Ok(())
}

pub fn write_dataset(root: &Path, specs: &[SynthSpec]) -> Result<()> {
    for spec in specs {
        write_sequence(root, spec)?;
    }
    Ok(())
}

/// The 5-frame training sequence used by the toy experiments.
pub fn toy_train_spec() -> SynthSpec {
    SynthSpec::new("train_a", 11)
}

/// Four 5-frame held-out sequences with different trajectories and sizes.
pub fn toy_holdout_specs() -> Vec<SynthSpec> {
    let mut specs = Vec::new();
    for (i, (sq, start, vel)) in [
        (20, (30.0, 28.0), (-2.0, -1.0)),
        (26, (4.0, 30.0), (3.0, -2.0)),
        (22, (24.0, 6.0), (-1.0, 3.0)),
        (28, (12.0, 12.0), (2.0, 2.0)),
    ]
    .iter()
    .enumerate()
    {
        let mut s = SynthSpec::new(format!("holdout_{i}"), 100 + i as u64);
        s.square = *sq;
        s.start = *start;
        s.velocity = *vel;
        specs.push(s);
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persistence::dataset::{index_dataset, DatasetLayout};

    #[test]
    fn generated_dataset_round_trips_through_indexing() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::new("seq0", 3);
        spec.frames = 4;
        write_sequence(dir.path(), &spec).unwrap();
        let idx = index_dataset(dir.path(), DatasetLayout::FlatPairs).unwrap();
        assert_eq!(idx.sequences.len(), 1);
        assert_eq!(idx.sequences[0].len(), 4);
        assert!(idx.exceptions.is_empty());
        let mask: crate::tensor::Tensor<f64> =
            crate::persistence::dataset::load_mask(&idx.sequences[0].masks[0].clone().unwrap())
                .unwrap();
        let area: f64 = mask.data().iter().sum();
        assert_eq!(area, (spec.square * spec.square) as f64);
    }
}
