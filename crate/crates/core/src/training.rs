//! Two-stage optimization: stage 1 trains the spatial network on single
//! frames; stage 2 finetunes on frame pairs with spatial + temporal
//! distillation and (per flags) the infer-frame encoder. SGD with momentum,
//! weight decay and the poly learning-rate schedule; crop / rotate / flip
//! augmentation applied identically to a pair's frames and masks.
//!
//! Training is bit-reproducible for a fixed seed: one ChaCha stream drives
//! initialization, another drives sampling and augmentation, and every
//! gradient accumulation walks parameters in name order.

use std::collections::HashMap;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding;
use crate::error::{Error, Result};
use crate::features::{self, FrameTensor};
use crate::losses;
use crate::nn::NetCtx;
use crate::params::ParameterStore;
use crate::persistence::checkpoint::save_checkpoint;
use crate::persistence::config::RunConfig;
use crate::persistence::dataset::{load_mask, load_rgb01, DatasetIndex, Sequence};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{area_resize, bilinear_resize, Tensor};

pub const POLY_POWER: f64 = 0.9;
/// Separates the data-sampling RNG stream from the init stream.
const DATA_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Whether the infer-frame encoder exists, and whether it survives into
/// inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeMode {
    Off,
    /// Encoder used in training only; removable at test time.
    TrainOnly,
    /// Encoder kept for inference (the stateful test-time mode).
    TrainAndTest,
}

impl FeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeMode::Off => "off",
            FeMode::TrainOnly => "train_only",
            FeMode::TrainAndTest => "train_and_test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FeMode::Off),
            "train_only" => Ok(FeMode::TrainOnly),
            "train_and_test" => Ok(FeMode::TrainAndTest),
            other => Err(Error::Config(format!("unknown fe mode `{other}`"))),
        }
    }
}

/// Ablation switches (the SD / TD / FE flag matrix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub sd: bool,
    pub td: bool,
    pub fe: FeMode,
}

impl Default for AblationFlags {
    fn default() -> Self {
        // the full method: spatial + temporal distillation, encoder in
        // training only
        Self {
            sd: true,
            td: true,
            fe: FeMode::TrainOnly,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.td && !self.sd {
            return Err(Error::Config(
                "ablation: temporal distillation requires spatial distillation".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_encoder(&self) -> bool {
        self.fe != FeMode::Off
    }

    /// Scenario shorthand used by the `ablate` command.
    pub fn from_scenario(name: &str) -> Result<Self> {
        let flags = match name {
            "bs" => Self { sd: false, td: false, fe: FeMode::Off },
            "sd" => Self { sd: true, td: false, fe: FeMode::Off },
            "sd+td" => Self { sd: true, td: true, fe: FeMode::Off },
            "sd+fe_o" => Self { sd: true, td: false, fe: FeMode::TrainOnly },
            "sd+td+fe_t" => Self { sd: true, td: true, fe: FeMode::TrainAndTest },
            "full" => Self { sd: true, td: true, fe: FeMode::TrainOnly },
            other => return Err(Error::Config(format!("unknown scenario `{other}`"))),
        };
        Ok(flags)
    }

    pub fn all_scenarios() -> [&'static str; 6] {
        ["bs", "sd", "sd+td", "sd+fe_o", "sd+td+fe_t", "full"]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub base_lr: f64,
    pub momentum: f64,
    pub max_iter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub rotation_deg: f64,
    pub hflip: bool,
    pub t0_max: i64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: StageParams {
                base_lr: 1e-3,
                momentum: 0.9,
                max_iter: 40_000,
            },
            stage2: StageParams {
                base_lr: 1e-4,
                momentum: 0.95,
                max_iter: 40_000,
            },
            weight_decay: 5e-4,
            batch_size: 8,
            crop: 473,
            rotation_deg: 10.0,
            hflip: true,
            t0_max: 3,
            seed: 0,
            checkpoint_interval: 1000,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if p.base_lr <= 0.0 {
                return Err(Error::Config(format!("train.{name}.base_lr must be > 0")));
            }
            if p.max_iter == 0 {
                return Err(Error::Config(format!("train.{name}.max_iter must be > 0")));
            }
        }
        if !(1..=3).contains(&self.t0_max) {
            return Err(Error::Config(format!(
                "train.t0_max must be in 1..=3, got {}",
                self.t0_max
            )));
        }
        if self.crop < 64 {
            return Err(Error::Config(format!("train.crop must be >= 64, got {}", self.crop)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Poly schedule: `base_lr * (1 - iter/max_iter)^0.9`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Config(format!(
            "poly_lr: iter {iter} outside 0..={max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(POLY_POWER))
}

// ---------------------------------------------------------------------------
// augmentation

/// One sampled geometric transform, applied identically to every image of a
/// sample (frame pair and masks). Sampling order: crop_y, crop_x, angle,
/// flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub crop_y: usize,
    pub crop_x: usize,
    pub angle_deg: f64,
    pub flip: bool,
}

pub fn sample_augment<R: Rng>(
    rng: &mut R,
    src_h: usize,
    src_w: usize,
    crop: usize,
    rotation_deg: f64,
    hflip: bool,
) -> AugmentParams {
    let crop_y = if src_h > crop { rng.gen_range(0..=src_h - crop) } else { 0 };
    let crop_x = if src_w > crop { rng.gen_range(0..=src_w - crop) } else { 0 };
    let angle_deg = if rotation_deg > 0.0 {
        rng.gen_range(-rotation_deg..=rotation_deg)
    } else {
        0.0
    };
    let flip = hflip && rng.gen_bool(0.5);
    AugmentParams {
        crop_y,
        crop_x,
        angle_deg,
        flip,
    }
}

/// Upscales so both sides reach at least `crop` (aspect preserved).
pub fn ensure_min_size<T: Scalar>(img: &Tensor<T>, crop: usize) -> Tensor<T> {
    let (h, w) = (img.height(), img.width());
    if h >= crop && w >= crop {
        return img.clone();
    }
    let s = (crop as f64 / h as f64).max(crop as f64 / w as f64);
    let nh = ((h as f64 * s).round() as usize).max(crop);
    let nw = ((w as f64 * s).round() as usize).max(crop);
    bilinear_resize(img, nh, nw)
}

fn sample_clamped<T: Scalar>(img: &Tensor<T>, c: usize, sy: f64, sx: f64) -> T {
    let (h, w) = (img.height(), img.width());
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = T::from_f64_c(sy - y0 as f64);
    let fx = T::from_f64_c(sx - x0 as f64);
    let one = T::one();
    img.at3(c, y0, x0) * (one - fy) * (one - fx)
        + img.at3(c, y0, x1) * (one - fy) * fx
        + img.at3(c, y1, x0) * fy * (one - fx)
        + img.at3(c, y1, x1) * fy * fx
}

/// Rotates about the source center, crops, then flips; edges are clamped.
/// The input must already be at least `crop` in both dimensions.
pub fn apply_geometric<T: Scalar>(img: &Tensor<T>, p: &AugmentParams, crop: usize) -> Tensor<T> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    debug_assert!(h >= crop && w >= crop);
    let theta = p.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(vec![c, crop, crop]);
    for y in 0..crop {
        for x in 0..crop {
            let xx = if p.flip { crop - 1 - x } else { x };
            let dy = (p.crop_y + y) as f64 - cy;
            let dx = (p.crop_x + xx) as f64 - cx;
            let sy = cy - dx * sin + dy * cos;
            let sx = cx + dx * cos + dy * sin;
            for ch in 0..c {
                out.set3(ch, y, x, sample_clamped(img, ch, sy, sx));
            }
        }
    }
    out
}

fn binarize_mask<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64_c(0.5);
    mask.map(|v| if v >= half { T::one() } else { T::zero() })
}

/// Augments one frame (and its mask) with a freshly sampled transform.
pub fn augment_single<T: Scalar, R: Rng>(
    frame: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> (Tensor<T>, Option<Tensor<T>>) {
    let frame = ensure_min_size(frame, cfg.crop);
    let p = sample_augment(
        rng,
        frame.height(),
        frame.width(),
        cfg.crop,
        cfg.rotation_deg,
        cfg.hflip,
    );
    let out_frame = apply_geometric(&frame, &p, cfg.crop);
    let out_mask = mask.map(|m| {
        let m = ensure_min_size(m, cfg.crop);
        binarize_mask(&apply_geometric(&m, &p, cfg.crop))
    });
    (out_frame, out_mask)
}

/// A sampled, augmented, normalized frame pair.
#[derive(Debug, Clone)]
pub struct FramePair<T> {
    pub frame_t: FrameTensor<T>,
    pub frame_t0: FrameTensor<T>,
    pub gt_t: Tensor<T>,
    pub gt_t0: Tensor<T>,
    pub offset: i64,
}

/// Uniform frame index plus a uniform nonzero offset within `t0_max` and the
/// sequence bounds.
pub fn sample_pair_indices<R: Rng>(
    seq_len: usize,
    t0_max: i64,
    rng: &mut R,
) -> Result<(usize, i64)> {
    if seq_len < 2 {
        return Err(Error::Data(format!(
            "sequence too short for pair sampling ({seq_len} frames)"
        )));
    }
    let t = rng.gen_range(0..seq_len);
    let mut valid = Vec::new();
    for o in -t0_max..=t0_max {
        if o == 0 {
            continue;
        }
        let u = t as i64 + o;
        if u >= 0 && (u as usize) < seq_len {
            valid.push(o);
        }
    }
    let offset = valid[rng.gen_range(0..valid.len())];
    Ok((t, offset))
}

/// Samples and prepares a training pair from a fully annotated sequence; the
/// same augmentation is applied to both frames and both masks.
pub fn sample_pair<T: Scalar, R: Rng>(
    seq: &Sequence,
    run: &RunConfig,
    rng: &mut R,
) -> Result<FramePair<T>> {
    let (t, offset) = sample_pair_indices(seq.len(), run.train.t0_max, rng)?;
    let u = (t as i64 + offset) as usize;
    let load = |i: usize| -> Result<(Tensor<T>, Tensor<T>)> {
        let frame = load_rgb01(&seq.frames[i])?;
        let mask_path = seq.masks[i]
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: frame {i} has no annotation", seq.name)))?;
        Ok((frame, load_mask(mask_path)?))
    };
    let (f_t, m_t) = load(t)?;
    let (f_u, m_u) = load(u)?;
    let f_t = ensure_min_size(&f_t, run.train.crop);
    let p = sample_augment(
        rng,
        f_t.height(),
        f_t.width(),
        run.train.crop,
        run.train.rotation_deg,
        run.train.hflip,
    );
    let crop = run.train.crop;
    let prep_frame = |f: &Tensor<T>| -> Result<FrameTensor<T>> {
        let f = ensure_min_size(f, crop);
        FrameTensor::from_rgb01(&apply_geometric(&f, &p, crop), &run.arch)
    };
    let prep_mask = |m: &Tensor<T>| -> Tensor<T> {
        let m = ensure_min_size(m, crop);
        binarize_mask(&apply_geometric(&m, &p, crop))
    };
    Ok(FramePair {
        frame_t: prep_frame(&f_t)?,
        frame_t0: prep_frame(&f_u)?,
        gt_t: prep_mask(&m_t),
        gt_t0: prep_mask(&m_u),
        offset,
    })
}

// ---------------------------------------------------------------------------
// optimizer

/// SGD with momentum and decoupled-from-nothing weight decay folded into the
/// gradient: `v = m*v + g + wd*p; p -= lr*v`.
pub struct Sgd<T> {
    velocity: BTreeMap<String, Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: BTreeMap::new(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParameterStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        grad_clip: f64,
    ) -> Result<()> {
        let clip_scale = if grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for g in grads.values() {
                for &v in g.data() {
                    let v = v.to_f64().unwrap_or(0.0);
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > grad_clip {
                grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let m = T::from_f64_c(self.momentum);
        let wd = T::from_f64_c(self.weight_decay);
        let lr = T::from_f64_c(lr);
        let cs = T::from_f64_c(clip_scale);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
            for i in 0..p.len() {
                let g = grad.data()[i] * cs + p.data()[i] * wd;
                let vi = v.data()[i] * m + g;
                v.data_mut()[i] = vi;
                p.data_mut()[i] = p.data()[i] - lr * vi;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// trainers

/// One loss-log line: `iter, lr, L_s, L_t, total`, tab-separated.
fn log_line(iter: u64, lr: f64, ls: f64, lt: f64) -> String {
    format!("{iter}\t{lr:.8e}\t{ls:.8e}\t{lt:.8e}\t{:.8e}", ls + lt)
}

pub struct TrainOutcome<T> {
    pub params: ParameterStore<T>,
    pub log: Vec<String>,
}

/// Which keys a stage-2 warm start adopted from the stage-1 checkpoint and
/// which were freshly initialized.
#[derive(Debug, Clone, Serialize)]
pub struct Stage2InitReport {
    pub adopted: Vec<String>,
    pub initialized: Vec<String>,
}

struct ImageCache<T> {
    frames: HashMap<PathBuf, Tensor<T>>,
    masks: HashMap<PathBuf, Tensor<T>>,
}

impl<T: Scalar> ImageCache<T> {
    fn new() -> Self {
        Self {
            frames: HashMap::new(),
            masks: HashMap::new(),
        }
    }

    fn frame(&mut self, path: &Path) -> Result<Tensor<T>> {
        if let Some(t) = self.frames.get(path) {
            return Ok(t.clone());
        }
        let t = load_rgb01(path)?;
        self.frames.insert(path.to_path_buf(), t.clone());
        Ok(t)
    }

    fn mask(&mut self, path: &Path) -> Result<Tensor<T>> {
        if let Some(t) = self.masks.get(path) {
            return Ok(t.clone());
        }
        let t = load_mask(path)?;
        self.masks.insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

fn collect_grads<T: Scalar>(
    touched: &BTreeMap<String, Var>,
    grads: &Gradients<T>,
) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    for (name, &var) in touched {
        if let Some(g) = grads.get(var) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

fn working_gt<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Rc<Tensor<T>> {
    Rc::new(area_resize(mask, h, w))
}

fn write_artifacts<T: Scalar>(
    out: Option<&Path>,
    stage: u8,
    iter: u64,
    final_save: bool,
    interval: u64,
    params: &ParameterStore<T>,
    run: &RunConfig,
    log: &[String],
) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir)?;
    if final_save || (interval > 0 && iter % interval == 0 && iter > 0) {
        let name = if final_save {
            format!("stage{stage}_final.ckpt")
        } else {
            format!("stage{stage}_iter{iter:06}.ckpt")
        };
        save_checkpoint(&dir.join(name), &params.cast::<f32>(), run)?;
    }
    if final_save {
        std::fs::write(dir.join(format!("stage{stage}_loss.tsv")), log.join("\n") + "\n")?;
    }
    Ok(())
}

/// Frames usable for stage-1: every annotated frame of every sequence,
/// stills and videos alike, uniform over samples.
fn stage1_samples(data: &[DatasetIndex]) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut samples = Vec::new();
    for idx in data {
        for seq in &idx.sequences {
            for (i, frame) in seq.frames.iter().enumerate() {
                if let Some(mask) = &seq.masks[i] {
                    samples.push((frame.clone(), mask.clone()));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("no annotated frames available for training".into()));
    }
    Ok(samples)
}

/// Stage 1: single-frame training of the spatial network (Eq. 3 with the
/// distillation terms present only when the SD flag is set).
pub fn train_stage1<T: Scalar>(
    data: &[DatasetIndex],
    run: &RunConfig,
    init: Option<&ParameterStore<T>>,
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    run.validate()?;
    let stage = &run.train.stage1;
    let samples = stage1_samples(data)?;
    let mut params: ParameterStore<T> = match init {
        Some(p) => p.clone(),
        None => features::init_params(&run.arch, run.train.seed, false, run.fusion)?,
    };
    params.meta.stage = 1;
    params.meta.ablation = run.ablation;
    params.meta.fusion = run.fusion;
    let loss_cfg = losses::LossConfig {
        temporal_mode: losses::TemporalMode::None,
        ..run.loss_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ DATA_STREAM_SALT);
    let mut sgd = Sgd::new(stage.momentum, run.train.weight_decay);
    let mut cache = ImageCache::new();
    let mut log = Vec::with_capacity(stage.max_iter as usize);

    for iter in 0..stage.max_iter {
        let lr = poly_lr(stage.base_lr, iter, stage.max_iter)?;
        let tape = Tape::new();
        let ctx = NetCtx::new(&tape, &params);
        let mut terms = Vec::with_capacity(run.train.batch_size);
        for _ in 0..run.train.batch_size {
            let (frame_path, mask_path) = &samples[rng.gen_range(0..samples.len())];
            let raw_frame = cache.frame(frame_path)?;
            let raw_mask = cache.mask(mask_path)?;
            let frame = ensure_min_size(&raw_frame, run.train.crop);
            let p = sample_augment(
                &mut rng,
                frame.height(),
                frame.width(),
                run.train.crop,
                run.train.rotation_deg,
                run.train.hflip,
            );
            let frame = FrameTensor::from_rgb01(&apply_geometric(&frame, &p, run.train.crop), &run.arch)?;
            let mask = binarize_mask(&apply_geometric(
                &ensure_min_size(&raw_mask, run.train.crop),
                &p,
                run.train.crop,
            ));
            let f = tape.leaf(frame.tensor().clone());
            let pyr = features::pyramid_on(&ctx, &run.arch, f)?;
            let phases = embedding::spatial_forward_on(&ctx, &run.arch, &pyr)?;
            let (wh, ww) = {
                let p0 = tape.value(phases.logits[0]);
                (p0.height(), p0.width())
            };
            let gt = working_gt(&mask, wh, ww);
            let (loss, _report) = losses::spatial_loss_on(&tape, &phases.logits, gt, &loss_cfg)?;
            terms.push(loss);
        }
        let total = tape.scale(
            tape.sum_scalars(&terms),
            T::one() / T::from_f64_c(run.train.batch_size as f64),
        );
        let ls = tape.value(total).item().to_f64().unwrap_or(f64::NAN);
        if !ls.is_finite() {
            return Err(Error::Numeric(format!(
                "stage 1 diverged at iteration {iter}: loss = {ls}"
            )));
        }
        let grads = tape.backward(total)?;
        let grad_map = collect_grads(&ctx.touched(), &grads);
        drop(tape);
        sgd.step(&mut params, &grad_map, lr, run.train.grad_clip)?;
        params.meta.iteration = iter + 1;
        log.push(log_line(iter, lr, ls, 0.0));
        write_artifacts(out, 1, iter + 1, false, run.train.checkpoint_interval, &params, run, &log)?;
    }
    write_artifacts(out, 1, stage.max_iter, true, 0, &params, run, &log)?;
    Ok(TrainOutcome { params, log })
}

/// Builds the stage-2 parameter set: spatial keys adopted from the stage-1
/// store, encoder keys (when the flags call for one) freshly initialized.
pub fn prepare_stage2_params<T: Scalar>(
    init: &ParameterStore<T>,
    run: &RunConfig,
) -> Result<(ParameterStore<T>, Stage2InitReport)> {
    let mut params: ParameterStore<T> = features::init_params(
        &run.arch,
        run.train.seed,
        run.ablation.uses_encoder(),
        run.fusion,
    )?;
    let (adopted, _missing, extra) = params.adopt_from(init);
    if adopted.is_empty() {
        return Err(Error::Checkpoint(
            "stage-1 checkpoint shares no keys with this architecture".into(),
        ));
    }
    params.meta.stage = 2;
    params.meta.iteration = 0;
    params.meta.ablation = run.ablation;
    params.meta.fusion = run.fusion;
    Ok((
        params,
        Stage2InitReport {
            adopted,
            initialized: extra,
        },
    ))
}

/// Stage 2: frame-pair finetuning. Frame `t` runs the spatial branch and
/// supplies the (constant) teacher `P2`; frame `t+t0` runs the spatial
/// branch plus, per flags, the infer-frame encoder and third unit. The step
/// optimizes `L_s + L_t`.
pub fn train_stage2<T: Scalar>(
    init: &ParameterStore<T>,
    data: &[DatasetIndex],
    run: &RunConfig,
    out: Option<&Path>,
) -> Result<(TrainOutcome<T>, Stage2InitReport)> {
    run.validate()?;
    if !run.ablation.td && !run.ablation.uses_encoder() {
        return Err(Error::Config(
            "stage 2 needs temporal distillation or the infer-frame encoder; \
             flags select neither"
                .into(),
        ));
    }
    let stage = &run.train.stage2;
    let sequences: Vec<Sequence> = data
        .iter()
        .flat_map(|idx| idx.fully_annotated().into_iter().cloned())
        .filter(|s| s.len() >= 2)
        .collect();
    if sequences.is_empty() {
        return Err(Error::Data(
            "no fully annotated multi-frame sequences for stage 2".into(),
        ));
    }
    let (mut params, report) = prepare_stage2_params(init, run)?;
    let loss_cfg = run.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ DATA_STREAM_SALT ^ 2);
    let mut sgd = Sgd::new(stage.momentum, run.train.weight_decay);
    let mut log = Vec::with_capacity(stage.max_iter as usize);

    for iter in 0..stage.max_iter {
        let lr = poly_lr(stage.base_lr, iter, stage.max_iter)?;
        let tape = Tape::new();
        let ctx = NetCtx::new(&tape, &params);
        let mut terms = Vec::with_capacity(run.train.batch_size);
        let mut ls_sum = 0.0f64;
        let mut lt_sum = 0.0f64;
        for _ in 0..run.train.batch_size {
            let seq = &sequences[rng.gen_range(0..sequences.len())];
            let pair: FramePair<T> = sample_pair(seq, run, &mut rng)?;

            let f_t = tape.leaf(pair.frame_t.tensor().clone());
            let pyr_t = features::pyramid_on(&ctx, &run.arch, f_t)?;
            let phases_t = embedding::spatial_forward_on(&ctx, &run.arch, &pyr_t)?;
            let (wh, ww) = {
                let p0 = tape.value(phases_t.logits[0]);
                (p0.height(), p0.width())
            };
            let gt_t = working_gt(&pair.gt_t, wh, ww);
            let (ls_var, ls_rep) =
                losses::spatial_loss_on(&tape, &phases_t.logits, gt_t, &loss_cfg)?;
            let teacher_p2 = tape.value(phases_t.logits[2]).as_ref().clone();

            let f_t0 = tape.leaf(pair.frame_t0.tensor().clone());
            let pyr_t0 = features::pyramid_on(&ctx, &run.arch, f_t0)?;
            let phases_t0 = embedding::spatial_forward_on(&ctx, &run.arch, &pyr_t0)?;
            let mut t0_logits = phases_t0.logits.clone();
            if run.ablation.uses_encoder() {
                let fused =
                    crate::attention::fuse_variant_on(&ctx, &run.arch, run.fusion, pyr_t.high, pyr_t0.high)?;
                let (_r3, p3) =
                    embedding::temporal_phase3_on(&ctx, &run.arch, t0_logits[2], fused)?;
                t0_logits.push(p3);
            }
            let gt_t0 = working_gt(&pair.gt_t0, wh, ww);
            let (lt_var, lt_rep) =
                losses::temporal_loss_on(&tape, &t0_logits, &teacher_p2, gt_t0, &loss_cfg)?;
            ls_sum += lt_to_f64(ls_rep.total);
            lt_sum += lt_to_f64(lt_rep.total);
            terms.push(tape.sum_scalars(&[ls_var, lt_var]));
        }
        let inv_b = T::one() / T::from_f64_c(run.train.batch_size as f64);
        let total = tape.scale(tape.sum_scalars(&terms), inv_b);
        let total_v = tape.value(total).item().to_f64().unwrap_or(f64::NAN);
        if !total_v.is_finite() {
            return Err(Error::Numeric(format!(
                "stage 2 diverged at iteration {iter}: loss = {total_v}"
            )));
        }
        let grads = tape.backward(total)?;
        let grad_map = collect_grads(&ctx.touched(), &grads);
        drop(tape);
        sgd.step(&mut params, &grad_map, lr, run.train.grad_clip)?;
        params.meta.iteration = iter + 1;
        let b = run.train.batch_size as f64;
        log.push(log_line(iter, lr, ls_sum / b, lt_sum / b));
        write_artifacts(out, 2, iter + 1, false, run.train.checkpoint_interval, &params, run, &log)?;
    }
    write_artifacts(out, 2, stage.max_iter, true, 0, &params, run, &log)?;
    Ok((TrainOutcome { params, log }, report))
}

fn lt_to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_closed_form_and_monotonicity() {
        assert_eq!(poly_lr(1e-3, 0, 40000).unwrap(), 1e-3);
        assert_eq!(poly_lr(1e-3, 40000, 40000).unwrap(), 0.0);
        let mid = poly_lr(1e-3, 20000, 40000).unwrap();
        assert!((mid - 1e-3 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 5.3589e-4).abs() < 1e-8);
        let mut prev = f64::INFINITY;
        for it in (0..=40000).step_by(500) {
            let lr = poly_lr(1e-3, it, 40000).unwrap();
            assert!(lr < prev || it == 0);
            prev = lr;
        }
        assert!(poly_lr(1e-3, 40001, 40000).is_err());
    }

    #[test]
    fn scenario_flag_matrix_matches_ablation_table() {
        let f = AblationFlags::from_scenario("bs").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (false, false, FeMode::Off));
        let f = AblationFlags::from_scenario("sd").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (true, false, FeMode::Off));
        let f = AblationFlags::from_scenario("sd+td").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (true, true, FeMode::Off));
        let f = AblationFlags::from_scenario("sd+fe_o").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (true, false, FeMode::TrainOnly));
        let f = AblationFlags::from_scenario("sd+td+fe_t").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (true, true, FeMode::TrainAndTest));
        let f = AblationFlags::from_scenario("full").unwrap();
        assert_eq!((f.sd, f.td, f.fe), (true, true, FeMode::TrainOnly));
        assert!(AblationFlags::from_scenario("everything").is_err());
        // TD without SD is inconsistent
        assert!(AblationFlags { sd: false, td: true, fe: FeMode::Off }.validate().is_err());
    }

    #[test]
    fn pair_indices_respect_bounds_and_never_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (t, o) = sample_pair_indices(2, 3, &mut rng).unwrap();
            assert!(o != 0);
            assert!(o.abs() <= 3);
            let u = t as i64 + o;
            assert!((0..2).contains(&u));
        }
        assert!(sample_pair_indices(1, 3, &mut rng).is_err());
    }

    #[test]
    fn identity_augment_is_a_crop() {
        let img = Tensor::<f64>::new(vec![1, 6, 6], (0..36).map(f64::from).collect()).unwrap();
        let p = AugmentParams {
            crop_y: 1,
            crop_x: 2,
            angle_deg: 0.0,
            flip: false,
        };
        let out = apply_geometric(&img, &p, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at3(0, y, x), img.at3(0, y + 1, x + 2));
            }
        }
    }

    #[test]
    fn flip_mirrors_frame_and_mask_together() {
        let img = Tensor::<f64>::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = AugmentParams {
            crop_y: 0,
            crop_x: 0,
            angle_deg: 0.0,
            flip: true,
        };
        let out = apply_geometric(&img, &p, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at3(0, y, x), img.at3(0, y, 3 - x));
            }
        }
    }

    #[test]
    fn augment_sampling_is_reproducible() {
        // golden sequence of sampled parameters for a fixed seed
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            (0..4)
                .map(|_| sample_augment(&mut rng, 96, 96, 64, 10.0, true))
                .collect::<Vec<_>>()
        };
        let a = draw();
        let b = draw();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.crop_y <= 32 && p.crop_x <= 32));
        assert!(a.iter().all(|p| p.angle_deg.abs() <= 10.0));
    }

    #[test]
    fn sgd_plain_step_matches_by_hand() {
        let mut params = ParameterStore::<f64>::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, 0.5]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.0);
        sgd.step(&mut params, &grads, 0.1, 0.0).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.95, -2.05]);
        // momentum kicks in on the second step
        sgd.step(&mut params, &grads, 0.1, 0.0).unwrap();
        let expect0 = 0.95 - 0.1 * (0.9 * 0.5 + 0.5);
        assert!((params.get("w").unwrap().data()[0] - expect0).abs() < 1e-12);
    }
}
