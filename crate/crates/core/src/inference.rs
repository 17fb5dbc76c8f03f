//! Distilled test-time forward path: the spatial branch alone, with the
//! infer-frame encoder removed. Each frame maps to `sigmoid(P_2)` upsampled
//! to the frame's resolution.
//!
//! Exception: a checkpoint trained with the encoder kept for testing runs
//! the temporal branch against the previous frame and emits `P_3`; that is
//! the single stateful mode (frame k pairs with k-1, the first frame with
//! itself).

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::embedding;
use crate::error::{Error, Result};
use crate::features::{self, ArchConfig, FrameTensor};
use crate::nn::NetCtx;
use crate::params::ParameterStore;
use crate::persistence::checkpoint::{diff_against_expected, Checkpoint, ENCODER_PREFIXES};
use crate::persistence::config::RunConfig;
use crate::persistence::dataset::{load_rgb01, save_gray_map, DatasetIndex, Sequence};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{bilinear_resize, Tensor};
use crate::training::FeMode;

#[derive(Debug, Clone, Serialize)]
pub struct TimingStats {
    pub frames: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub std_s: f64,
}

impl TimingStats {
    fn from_samples(mut samples: Vec<f64>) -> Self {
        let frames = samples.len();
        if frames == 0 {
            return Self {
                frames: 0,
                mean_s: 0.0,
                median_s: 0.0,
                std_s: 0.0,
            };
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = samples.iter().sum::<f64>() / frames as f64;
        let median = if frames % 2 == 1 {
            samples[frames / 2]
        } else {
            0.5 * (samples[frames / 2 - 1] + samples[frames / 2])
        };
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / frames as f64;
        Self {
            frames,
            mean_s: mean,
            median_s: median,
            std_s: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceReport {
    pub sequence: String,
    pub maps_written: usize,
    /// Unreadable frames, skipped with their error text.
    pub skipped: Vec<(String, String)>,
    pub timing: TimingStats,
}

/// A validated checkpoint ready to run.
pub struct Inferencer<T: Scalar> {
    pub arch: ArchConfig,
    pub run: RunConfig,
    params: ParameterStore<T>,
    /// Temporal branch retained for inference (`fe = train_and_test`).
    pub stateful: bool,
}

impl<T: Scalar> Inferencer<T> {
    /// Validates the checkpoint against its own architecture snapshot and
    /// converts the parameters into the working precision.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let run = ckpt.run.clone();
        let stateful = run.ablation.fe == FeMode::TrainAndTest;
        let params: ParameterStore<T> = ckpt.parameters.cast();
        // spatial path check: encoder keys are allowed extras unless the
        // checkpoint declares the stateful mode, in which case they are
        // required
        let expected = features::init_params::<T>(&run.arch, 0, stateful, run.fusion)?;
        let mut check = params.clone();
        if !stateful {
            for prefix in ENCODER_PREFIXES {
                check.remove_prefix(prefix);
            }
        }
        let diff = diff_against_expected(&check, &expected);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint does not match its architecture config:\n  {}",
                diff.join("\n  ")
            )));
        }
        Ok(Self {
            arch: run.arch.clone(),
            run,
            params,
            stateful,
        })
    }

    fn spatial_p2(&self, tape: &Tape<T>, ctx: &NetCtx<T>, frame: &FrameTensor<T>) -> Result<(features::PyramidVars, Var)> {
        let f = tape.leaf(frame.tensor().clone());
        let pyr = features::pyramid_on(ctx, &self.arch, f)?;
        let phases = embedding::spatial_forward_on(ctx, &self.arch, &pyr)?;
        Ok((pyr, phases.logits[2]))
    }

    /// Saliency map in `[0,1]` at the frame's resolution.
    pub fn infer_frame(&self, frame: &FrameTensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let ctx = NetCtx::new(&tape, &self.params);
        let (_, p2) = self.spatial_p2(&tape, &ctx, frame)?;
        let map = tape.value(p2).map(Scalar::sigmoid);
        Ok(bilinear_resize(&map, frame.height(), frame.width()))
    }

    /// Stateful mode: runs the temporal branch with a reference frame and
    /// emits `sigmoid(P_3)`.
    pub fn infer_frame_with_ref(
        &self,
        frame: &FrameTensor<T>,
        reference: &FrameTensor<T>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let ctx = NetCtx::new(&tape, &self.params);
        let (pyr_ref, _) = self.spatial_p2(&tape, &ctx, reference)?;
        let (pyr_cur, p2_cur) = self.spatial_p2(&tape, &ctx, frame)?;
        let fused = crate::attention::fuse_variant_on(
            &ctx,
            &self.arch,
            self.run.fusion,
            pyr_ref.high,
            pyr_cur.high,
        )?;
        let (_r3, p3) = embedding::temporal_phase3_on(&ctx, &self.arch, p2_cur, fused)?;
        let map = tape.value(p3).map(Scalar::sigmoid);
        Ok(bilinear_resize(&map, frame.height(), frame.width()))
    }

    /// Runs a sequence, writing one 8-bit map per readable frame (same stem)
    /// into `out_dir`.
    pub fn infer_sequence(&self, seq: &Sequence, out_dir: &Path) -> Result<SequenceReport> {
        if seq.is_empty() {
            return Err(Error::Data(format!("sequence {} has no frames", seq.name)));
        }
        std::fs::create_dir_all(out_dir)?;
        let mut skipped = Vec::new();
        let mut samples = Vec::new();
        let mut written = 0usize;
        let mut prev: Option<FrameTensor<T>> = None;
        for (i, path) in seq.frames.iter().enumerate() {
            let loaded = load_rgb01::<T>(path)
                .and_then(|rgb| FrameTensor::from_rgb01(&rgb, &self.arch));
            let frame = match loaded {
                Ok(f) => f,
                Err(e) => {
                    skipped.push((path.display().to_string(), e.to_string()));
                    continue;
                }
            };
            let start = Instant::now();
            let map = if self.stateful {
                let reference = prev.as_ref().unwrap_or(&frame);
                self.infer_frame_with_ref(&frame, reference)?
            } else {
                self.infer_frame(&frame)?
            };
            samples.push(start.elapsed().as_secs_f64());
            save_gray_map(&out_dir.join(format!("{}.png", seq.stem(i))), &map)?;
            written += 1;
            if self.stateful {
                prev = Some(frame);
            }
        }
        Ok(SequenceReport {
            sequence: seq.name.clone(),
            maps_written: written,
            skipped,
            timing: TimingStats::from_samples(samples),
        })
    }

    /// Runs every (selected) sequence of a dataset into
    /// `out_root/<sequence>/`, writing a timing report alongside.
    pub fn infer_dataset(
        &self,
        index: &DatasetIndex,
        out_root: &Path,
        sequences: Option<&[String]>,
    ) -> Result<Vec<SequenceReport>> {
        let mut reports = Vec::new();
        for seq in &index.sequences {
            if let Some(filter) = sequences {
                if !filter.iter().any(|s| s == &seq.name) {
                    continue;
                }
            }
            reports.push(self.infer_sequence(seq, &out_root.join(&seq.name))?);
        }
        if reports.is_empty() {
            return Err(Error::Data("no sequences matched the selection".into()));
        }
        let json = serde_json::to_string_pretty(&reports)
            .map_err(|e| Error::Data(format!("timing report serialization failed: {e}")))?;
        std::fs::write(out_root.join("timing.json"), json)?;
        Ok(reports)
    }
}

/// One-frame convenience wrapper over a raw parameter store.
pub fn infer_frame<T: Scalar>(
    frame: &FrameTensor<T>,
    params: &ParameterStore<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    let f = tape.leaf(frame.tensor().clone());
    let pyr = features::pyramid_on(&ctx, arch, f)?;
    let phases = embedding::spatial_forward_on(&ctx, arch, &pyr)?;
    let map = tape.value(phases.logits[2]).map(Scalar::sigmoid);
    Ok(bilinear_resize(&map, frame.height(), frame.width()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionKind;
    use crate::features::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.arch = ArchConfig::tiny();
        run.train.crop = 64;
        run
    }

    fn rand_frame(arch: &ArchConfig, seed: u64) -> FrameTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = Tensor::new(
            vec![3, 48, 40],
            (0..3 * 48 * 40).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        FrameTensor::from_rgb01(&rgb, arch).unwrap()
    }

    #[test]
    fn map_is_bounded_and_frame_sized() {
        let run = toy_run();
        let params = init_params::<f32>(&run.arch, 3, false, FusionKind::Mutual).unwrap();
        let ckpt = Checkpoint::new(params.cast(), run.clone());
        let inf = Inferencer::<f32>::from_checkpoint(&ckpt);
        // default flags declare an encoder (fe train_only) but the spatial
        // store has none; still fine since FE_o strips it at test time
        let inf = inf.unwrap();
        let frame = rand_frame(&run.arch, 1);
        let map = inf.infer_frame(&frame).unwrap();
        assert_eq!(map.shape(), &[1, 48, 40]);
        assert!(map.min_value() >= 0.0 && map.max_value() <= 1.0);
    }

    #[test]
    fn mismatched_checkpoint_rejected_with_key_diff() {
        let run = toy_run();
        let mut wrong = run.clone();
        wrong.arch.high_channels = 64; // checkpoint claims a different width
        let params = init_params::<f32>(&run.arch, 3, false, FusionKind::Mutual).unwrap();
        let ckpt = Checkpoint::new(params.cast(), wrong);
        let msg = match Inferencer::<f32>::from_checkpoint(&ckpt) {
            Ok(_) => panic!("mismatched checkpoint accepted"),
            Err(e) => e.to_string(),
        };
        assert!(msg.contains("mismatch") || msg.contains("missing"), "{msg}");
        assert!(msg.contains("fuse_high") || msg.contains("embedding"), "{msg}");
    }

    #[test]
    fn frame_order_independence_without_state() {
        let run = toy_run();
        let params = init_params::<f32>(&run.arch, 9, false, FusionKind::Mutual).unwrap();
        let ckpt = Checkpoint::new(params.cast(), run.clone());
        let inf = Inferencer::<f32>::from_checkpoint(&ckpt).unwrap();
        let frames: Vec<FrameTensor<f32>> = (0..4).map(|i| rand_frame(&run.arch, i)).collect();
        let forward: Vec<_> = frames.iter().map(|f| inf.infer_frame(f).unwrap()).collect();
        let backward: Vec<_> = frames.iter().rev().map(|f| inf.infer_frame(f).unwrap()).collect();
        for (a, b) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(a, b);
        }
    }
}
