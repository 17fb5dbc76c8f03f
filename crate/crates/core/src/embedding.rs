//! Saliency-guidance feature embedding: an initial prediction from the
//! high-level grid, refined by residual embedding units that alternate
//! between low- and high-level features. Phases are raw logits; sigmoid is
//! applied only in losses and at map export.
//!
//! All phases live at the working resolution (the low-level 1/4 scale); the
//! high-level grid is upsampled before any unit that consumes it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{ArchConfig, FeaturePyramid, PyramidVars};
use crate::nn::{Act, Conv, ConvBlock, NetCtx};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Ordered phase logits `P_0..P_k` and residuals `R_1..R_k` for one frame.
#[derive(Debug, Clone)]
pub struct PhasePredictions<T> {
    pub logits: Vec<Tensor<T>>,
    pub residuals: Vec<Tensor<T>>,
}

impl<T: Scalar> PhasePredictions<T> {
    /// Checks `P_j == P_{j-1} + R_j` bit-exactly for every phase.
    pub fn telescopes(&self) -> bool {
        if self.residuals.len() + 1 != self.logits.len() {
            return false;
        }
        for j in 1..self.logits.len() {
            let readd = match self.logits[j - 1].add(&self.residuals[j - 1]) {
                Ok(t) => t,
                Err(_) => return false,
            };
            if readd != self.logits[j] {
                return false;
            }
        }
        true
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().chain(self.residuals.iter()).all(Tensor::all_finite)
    }
}

/// Tape-side phases.
pub struct PhaseVars {
    pub logits: Vec<Var>,
    pub residuals: Vec<Var>,
}

impl PhaseVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> PhasePredictions<T> {
        PhasePredictions {
            logits: self.logits.iter().map(|&v| tape.value(v).as_ref().clone()).collect(),
            residuals: self
                .residuals
                .iter()
                .map(|&v| tape.value(v).as_ref().clone())
                .collect(),
        }
    }
}

/// One residual refinement unit: three convolutions over
/// `Cat(previous logits, features)`, the last one emitting the 1-channel
/// residual with no normalization or activation.
#[derive(Debug, Clone)]
pub struct EmbeddingUnit {
    pub name: String,
    blocks: [ConvBlock; 3],
}

impl EmbeddingUnit {
    pub fn new(name: impl Into<String>, feat_ch: usize, hidden: usize) -> Self {
        let name = name.into();
        let b1 = ConvBlock::new(
            Conv::new(format!("{name}.conv1"), 1 + feat_ch, hidden, 3),
            Act::PRelu,
        );
        let b2 = ConvBlock::new(Conv::new(format!("{name}.conv2"), hidden, hidden, 3), Act::PRelu);
        let b3 = ConvBlock::bare(Conv::new(format!("{name}.conv3"), hidden, 1, 3));
        Self {
            name,
            blocks: [b1, b2, b3],
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// Returns `(residual, logits)` with `logits = prev + residual`.
    pub fn forward_on<T: Scalar>(
        &self,
        ctx: &NetCtx<T>,
        prev_logits: Var,
        features_in: Var,
    ) -> Result<(Var, Var)> {
        let pv = ctx.tape.value(prev_logits);
        let fv = ctx.tape.value(features_in);
        if pv.height() != fv.height() || pv.width() != fv.width() {
            return Err(Error::Shape(format!(
                "unit {} resolution mismatch: logits {}x{} vs features {}x{}",
                self.name,
                pv.height(),
                pv.width(),
                fv.height(),
                fv.width()
            )));
        }
        let mut x = ctx.tape.concat_channels(&[prev_logits, features_in])?;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        let logits = ctx.tape.add(prev_logits, x)?;
        Ok((x, logits))
    }
}

pub fn unit1(arch: &ArchConfig) -> EmbeddingUnit {
    EmbeddingUnit::new("embedding.unit1", arch.low_channels, arch.phi_channels)
}

pub fn unit2(arch: &ArchConfig) -> EmbeddingUnit {
    EmbeddingUnit::new("embedding.unit2", arch.high_channels, arch.phi_channels)
}

/// The temporal branch's extra unit; its first two units are the spatial
/// ones, parameters shared by construction.
pub fn unit3(arch: &ArchConfig) -> EmbeddingUnit {
    EmbeddingUnit::new("embedding.unit3", arch.high_channels, arch.phi_channels)
}

fn p0_def(arch: &ArchConfig) -> ConvBlock {
    ConvBlock::bare(Conv::new("embedding.p0.conv", arch.high_channels, 1, 3))
}

pub fn init_spatial_params<T: Scalar, R: Rng>(
    arch: &ArchConfig,
    store: &mut ParameterStore<T>,
    rng: &mut R,
) {
    p0_def(arch).init(store, rng);
    unit1(arch).init(store, rng);
    unit2(arch).init(store, rng);
}

pub fn init_temporal_unit<T: Scalar, R: Rng>(
    arch: &ArchConfig,
    store: &mut ParameterStore<T>,
    rng: &mut R,
) {
    unit3(arch).init(store, rng);
}

/// First-phase prediction from the (already working-resolution) high grid.
pub fn initial_prediction_on<T: Scalar>(
    ctx: &NetCtx<T>,
    arch: &ArchConfig,
    high: Var,
) -> Result<Var> {
    p0_def(arch).forward(ctx, high)
}

/// Spatial branch: `P_0` from H, `P_1 = unit1(P_0, L)`, `P_2 = unit2(P_1, H)`.
pub fn spatial_forward_on<T: Scalar>(
    ctx: &NetCtx<T>,
    arch: &ArchConfig,
    pyr: &PyramidVars,
) -> Result<PhaseVars> {
    let (wh, ww) = {
        let low = ctx.tape.value(pyr.low);
        (low.height(), low.width())
    };
    let high_up = ctx.tape.bilinear_resize(pyr.high, wh, ww);
    let p0 = initial_prediction_on(ctx, arch, high_up)?;
    let (r1, p1) = unit1(arch).forward_on(ctx, p0, pyr.low)?;
    let (r2, p2) = unit2(arch).forward_on(ctx, p1, high_up)?;
    Ok(PhaseVars {
        logits: vec![p0, p1, p2],
        residuals: vec![r1, r2],
    })
}

/// Temporal branch tail: the third unit consumes the offset frame's final
/// spatial phase and the fused infer-frame features (upsampled to the
/// working resolution). Returns `(R_3, P_3)`.
pub fn temporal_phase3_on<T: Scalar>(
    ctx: &NetCtx<T>,
    arch: &ArchConfig,
    p2_t0: Var,
    fused: Var,
) -> Result<(Var, Var)> {
    let (wh, ww) = {
        let p = ctx.tape.value(p2_t0);
        (p.height(), p.width())
    };
    let fused_up = ctx.tape.bilinear_resize(fused, wh, ww);
    unit3(arch).forward_on(ctx, p2_t0, fused_up)
}

// ---------------------------------------------------------------------------
// value-level operations

pub fn initial_prediction<T: Scalar>(
    high_level: &Tensor<T>,
    params: &ParameterStore<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    let v = initial_prediction_on(&ctx, arch, tape.leaf(high_level.clone()))?;
    Ok(tape.value(v).as_ref().clone())
}

pub fn embedding_unit<T: Scalar>(
    prev_logits: &Tensor<T>,
    features_in: &Tensor<T>,
    unit: &EmbeddingUnit,
    params: &ParameterStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    let (r, p) = unit.forward_on(
        &ctx,
        tape.leaf(prev_logits.clone()),
        tape.leaf(features_in.clone()),
    )?;
    Ok((
        tape.value(r).as_ref().clone(),
        tape.value(p).as_ref().clone(),
    ))
}

pub fn spatial_forward<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    params: &ParameterStore<T>,
    arch: &ArchConfig,
) -> Result<PhasePredictions<T>> {
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    if pyramid.side_outputs.len() != 5 {
        return Err(Error::Shape(format!(
            "pyramid has {} side outputs, expected 5",
            pyramid.side_outputs.len()
        )));
    }
    let sides: Vec<Var> = pyramid
        .side_outputs
        .iter()
        .map(|s| tape.leaf(s.clone()))
        .collect();
    let pyr = PyramidVars {
        sides: [sides[0], sides[1], sides[2], sides[3], sides[4]],
        low: tape.leaf(pyramid.low_level.clone()),
        high: tape.leaf(pyramid.high_level.clone()),
    };
    let phases = spatial_forward_on(&ctx, arch, &pyr)?;
    Ok(phases.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionKind;
    use crate::features::{extract_pyramid, init_params, FrameTensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ArchConfig, ParameterStore<f32>) {
        let arch = ArchConfig::tiny();
        let store = init_params(&arch, 5, false, FusionKind::Mutual).unwrap();
        (arch, store)
    }

    fn rand_frame(seed: u64) -> FrameTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 64 * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FrameTensor::new(Tensor::new(vec![3, 64, 64], data).unwrap()).unwrap()
    }

    #[test]
    fn initial_prediction_shape() {
        let (arch, store) = setup();
        let high = Tensor::zeros(vec![arch.high_channels, 16, 16]);
        let p0 = initial_prediction(&high, &store, &arch).unwrap();
        assert_eq!(p0.shape(), &[1, 16, 16]);
        // zero input -> bias-constant grid
        let first = p0.data()[0];
        assert!(p0.data().iter().all(|&v| v == first));
    }

    #[test]
    fn unit_shapes_and_determinism() {
        let (arch, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prev = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let feats = Tensor::new(
            vec![arch.low_channels, 8, 8],
            (0..arch.low_channels * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let u = unit1(&arch);
        let (r, p) = embedding_unit(&prev, &feats, &u, &store).unwrap();
        assert_eq!(r.shape(), &[1, 8, 8]);
        assert_eq!(p.shape(), &[1, 8, 8]);
        let (r2, p2) = embedding_unit(&prev, &feats, &u, &store).unwrap();
        assert_eq!(r, r2);
        assert_eq!(p, p2);
    }

    #[test]
    fn unit_rejects_resolution_mismatch() {
        let (arch, store) = setup();
        let prev = Tensor::zeros(vec![1, 8, 8]);
        let feats = Tensor::zeros(vec![arch.low_channels, 16, 16]);
        assert!(embedding_unit(&prev, &feats, &unit1(&arch), &store).is_err());
    }

    #[test]
    fn zeroed_residual_head_is_identity() {
        let (arch, mut store) = setup();
        for name in ["embedding.unit1.conv3.weight", "embedding.unit1.conv3.bias"] {
            let t = store.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let prev = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let feats = Tensor::new(
            vec![arch.low_channels, 8, 8],
            (0..arch.low_channels * 64).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let (r, p) = embedding_unit(&prev, &feats, &unit1(&arch), &store).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(p, prev);
    }

    #[test]
    fn spatial_forward_three_finite_phases_that_telescope() {
        let (arch, store) = setup();
        let frame = rand_frame(1);
        let pyr = extract_pyramid(&frame, &store, &arch).unwrap();
        let phases = spatial_forward(&pyr, &store, &arch).unwrap();
        assert_eq!(phases.logits.len(), 3);
        assert_eq!(phases.residuals.len(), 2);
        assert!(phases.all_finite());
        assert!(phases.telescopes());
        // all phases share one resolution
        let s0 = phases.logits[0].shape().to_vec();
        for p in &phases.logits {
            assert_eq!(p.shape(), &s0[..]);
        }
    }

    #[test]
    fn both_units_zeroed_collapse_all_phases() {
        let (arch, mut store) = setup();
        for unit in ["unit1", "unit2"] {
            for suffix in ["weight", "bias"] {
                let name = format!("embedding.{unit}.conv3.{suffix}");
                let t = store.get_mut(&name).unwrap();
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let frame = rand_frame(2);
        let pyr = extract_pyramid(&frame, &store, &arch).unwrap();
        let phases = spatial_forward(&pyr, &store, &arch).unwrap();
        assert_eq!(phases.logits[0], phases.logits[1]);
        assert_eq!(phases.logits[1], phases.logits[2]);
    }

    #[test]
    fn temporal_unit_keys_are_separate_from_shared_units() {
        let arch = ArchConfig::tiny();
        let store = init_params::<f32>(&arch, 5, true, FusionKind::Mutual).unwrap();
        assert!(store.names_with_prefix("embedding.unit3.").count() > 0);
        // the temporal branch reuses unit1/unit2 keys; there is no shadow copy
        assert_eq!(store.names_with_prefix("temporal.").count(), 0);
    }
}
