//! Mutual-attention infer-frame feature encoding, plus the naive fusion
//! variants used for comparison.
//!
//! Given the high-level grids of two frames reshaped to `[c, n]` (n = w*h),
//! the attention matrix is `A = softmax((1/sqrt(c)) * T(Ht) * Ht0)`,
//! normalized over the reference-frame location axis (the index contracted
//! in `Ht0 * A`), so each output location is a convex combination of the
//! offset frame's feature columns. The attention block itself has no
//! learned parameters; the final fuse is a single convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ArchConfig;
use crate::nn::{Conv, ConvBlock, NetCtx};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Infer-frame fusion selector (the `fusion` config key).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    Add,
    Multiply,
    Concat,
    Mutual,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Multiply => "multiply",
            FusionKind::Concat => "concat",
            FusionKind::Mutual => "mutual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionKind::Add),
            "multiply" => Ok(FusionKind::Multiply),
            "concat" => Ok(FusionKind::Concat),
            "mutual" => Ok(FusionKind::Mutual),
            other => Err(Error::Config(format!("unknown fusion variant `{other}`"))),
        }
    }
}

/// Attention matrix, weighted features and (after [`fuse`]) the fused grid.
#[derive(Debug, Clone)]
pub struct AttentionResult<T> {
    /// `n x n`; every column sums to 1.
    pub attention: Tensor<T>,
    /// `c x w x h` weighted features.
    pub weighted: Tensor<T>,
    /// Fused output, present once the fuse convolution has run.
    pub fused: Option<Tensor<T>>,
    /// `1 / sqrt(c)`.
    pub scale: T,
}

fn fuse_def(arch: &ArchConfig) -> ConvBlock {
    let c = arch.high_channels;
    ConvBlock::bare(Conv::new("attention.fuse.conv", 2 * c, c, 3))
}

fn concat_def(arch: &ArchConfig) -> ConvBlock {
    let c = arch.high_channels;
    ConvBlock::bare(Conv::new("attention.concat.conv", 2 * c, c, 1))
}

/// Initializes the encoder parameters needed by the configured fusion.
pub fn init_encoder_params<T: Scalar, R: Rng>(
    arch: &ArchConfig,
    store: &mut ParameterStore<T>,
    rng: &mut R,
    fusion: FusionKind,
) {
    match fusion {
        FusionKind::Mutual => fuse_def(arch).init(store, rng),
        FusionKind::Concat => concat_def(arch).init(store, rng),
        FusionKind::Add | FusionKind::Multiply => {}
    }
}

fn check_same_grids<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 3 || a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "attention operands must be identical CHW grids, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Tape-side mutual attention; returns `(attention, weighted)`.
pub fn mutual_attention_on<T: Scalar>(tape: &Tape<T>, h_t: Var, h_t0: Var) -> Result<(Var, Var)> {
    let (c, h, w) = {
        let a = tape.value(h_t);
        let b = tape.value(h_t0);
        check_same_grids(&a, &b)?;
        (a.channels(), a.height(), a.width())
    };
    let n = h * w;
    let scale = T::one() / T::from_f64_c(c as f64).sqrt();
    let ht2 = tape.reshape(h_t, vec![c, n])?;
    let ht02 = tape.reshape(h_t0, vec![c, n])?;
    let logits = tape.scale(tape.matmul(tape.transpose(ht2), ht02)?, scale);
    let attn = tape.softmax_cols(logits);
    let weighted2 = tape.matmul(ht02, attn)?;
    let weighted = tape.reshape(weighted2, vec![c, h, w])?;
    Ok((attn, weighted))
}

/// Tape-side fuse: one convolution over `Cat(weighted, original)`.
pub fn fuse_on<T: Scalar>(
    ctx: &NetCtx<T>,
    arch: &ArchConfig,
    weighted: Var,
    original: Var,
) -> Result<Var> {
    let cat = ctx.tape.concat_channels(&[weighted, original])?;
    fuse_def(arch).forward(ctx, cat)
}

/// Tape-side fusion variant dispatch, producing the encoder output `O`.
pub fn fuse_variant_on<T: Scalar>(
    ctx: &NetCtx<T>,
    arch: &ArchConfig,
    kind: FusionKind,
    h_t: Var,
    h_t0: Var,
) -> Result<Var> {
    {
        let a = ctx.tape.value(h_t);
        let b = ctx.tape.value(h_t0);
        check_same_grids(&a, &b)?;
    }
    match kind {
        FusionKind::Add => ctx.tape.add(h_t, h_t0),
        FusionKind::Multiply => ctx.tape.mul(h_t, h_t0),
        FusionKind::Concat => {
            let cat = ctx.tape.concat_channels(&[h_t, h_t0])?;
            concat_def(arch).forward(ctx, cat)
        }
        FusionKind::Mutual => {
            let (_, weighted) = mutual_attention_on(ctx.tape, h_t, h_t0)?;
            fuse_on(ctx, arch, weighted, h_t0)
        }
    }
}

// ---------------------------------------------------------------------------
// value-level operations

/// Mutual attention before the final fusion.
pub fn mutual_attention<T: Scalar>(h_t: &Tensor<T>, h_t0: &Tensor<T>) -> Result<AttentionResult<T>> {
    check_same_grids(h_t, h_t0)?;
    let tape = Tape::inference();
    let (attn, weighted) = mutual_attention_on(&tape, tape.leaf(h_t.clone()), tape.leaf(h_t0.clone()))?;
    Ok(AttentionResult {
        attention: tape.value(attn).as_ref().clone(),
        weighted: tape.value(weighted).as_ref().clone(),
        fused: None,
        scale: T::one() / T::from_f64_c(h_t.channels() as f64).sqrt(),
    })
}

pub fn fuse<T: Scalar>(
    weighted: &Tensor<T>,
    original: &Tensor<T>,
    params: &ParameterStore<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    check_same_grids(weighted, original)?;
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    let v = fuse_on(&ctx, arch, tape.leaf(weighted.clone()), tape.leaf(original.clone()))?;
    Ok(tape.value(v).as_ref().clone())
}

pub fn fuse_variant<T: Scalar>(
    h_t: &Tensor<T>,
    h_t0: &Tensor<T>,
    kind: FusionKind,
    params: &ParameterStore<T>,
    arch: &ArchConfig,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let ctx = NetCtx::new(&tape, params);
    let v = fuse_variant_on(&ctx, arch, kind, tape.leaf(h_t.clone()), tape.leaf(h_t0.clone()))?;
    Ok(tape.value(v).as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_location_attention_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_grid(&mut rng, 7, 1, 1);
        let b = rand_grid(&mut rng, 7, 1, 1);
        let res = mutual_attention(&a, &b).unwrap();
        assert_eq!(res.attention.data(), &[1.0]);
        assert_eq!(res.weighted, b);
    }

    #[test]
    fn scale_is_inverse_sqrt_c() {
        let a = Tensor::<f64>::zeros(vec![256, 2, 2]);
        let res = mutual_attention(&a, &a).unwrap();
        assert_eq!(res.scale, 0.0625);
    }

    #[test]
    fn two_by_two_worked_example() {
        // c = 2, n = 2: Ht = identity, Ht0 = 2*identity (columns are the
        // spatial locations).
        let ht = Tensor::<f64>::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ht0 = Tensor::<f64>::new(vec![2, 1, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let res = mutual_attention(&ht, &ht0).unwrap();
        let s = 2.0f64.sqrt();
        // column j=0: softmax([sqrt(2), 0]); column j=1: softmax([0, sqrt(2)])
        let hi = s.exp() / (s.exp() + 1.0);
        let lo = 1.0 / (s.exp() + 1.0);
        let a = &res.attention;
        assert!((a.at2(0, 0) - hi).abs() < 1e-12);
        assert!((a.at2(1, 0) - lo).abs() < 1e-12);
        assert!((a.at2(0, 1) - lo).abs() < 1e-12);
        assert!((a.at2(1, 1) - hi).abs() < 1e-12);
        // independent matrix-arithmetic oracle for the weighted features
        for ch in 0..2 {
            for j in 0..2 {
                let expect: f64 = (0..2)
                    .map(|i| ht0.at3(ch, 0, i) * a.at2(i, j))
                    .sum();
                assert!((res.weighted.at3(ch, 0, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_grid(&mut rng, 16, 3, 4);
        let b = rand_grid(&mut rng, 16, 3, 4);
        let res = mutual_attention(&a, &b).unwrap();
        let n = 12;
        for j in 0..n {
            let col: f64 = (0..n).map(|i| res.attention.at2(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-5);
        }
        assert!(res
            .attention
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn attention_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![4, 2, 2]);
        let b = Tensor::<f64>::zeros(vec![4, 3, 2]);
        assert!(mutual_attention(&a, &b).is_err());
    }

    #[test]
    fn fuse_output_channels_and_zero_bias_response() {
        let arch = ArchConfig::tiny();
        let store = init_params::<f64>(&arch, 3, true, FusionKind::Mutual).unwrap();
        let c = arch.high_channels;
        let z = Tensor::zeros(vec![c, 4, 4]);
        let fused = fuse(&z, &z, &store, &arch).unwrap();
        assert_eq!(fused.shape(), &[c, 4, 4]);
        assert!(fused.all_finite());
        let first = fused.data()[0];
        assert!(fused.data()[..16].iter().all(|&v| v == first));
    }

    #[test]
    fn fuse_touches_exactly_one_convolution() {
        let arch = ArchConfig::tiny();
        let store = init_params::<f64>(&arch, 3, true, FusionKind::Mutual).unwrap();
        let tape = Tape::inference();
        let ctx = NetCtx::new(&tape, &store);
        let c = arch.high_channels;
        let x = tape.leaf(Tensor::zeros(vec![c, 4, 4]));
        fuse_on(&ctx, &arch, x, x).unwrap();
        let touched: Vec<String> = ctx.touched().keys().cloned().collect();
        assert_eq!(
            touched,
            vec!["attention.fuse.conv.bias", "attention.fuse.conv.weight"]
        );
    }

    #[test]
    fn naive_variants_identities_and_concat_channels() {
        let arch = ArchConfig::tiny();
        let store = init_params::<f64>(&arch, 4, true, FusionKind::Concat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = arch.high_channels;
        let h = rand_grid(&mut rng, c, 3, 3);
        let zero = Tensor::zeros(vec![c, 3, 3]);
        let ones = Tensor::full(vec![c, 3, 3], 1.0);
        let added = fuse_variant(&h, &zero, FusionKind::Add, &store, &arch).unwrap();
        assert_eq!(added, h);
        let mult = fuse_variant(&h, &ones, FusionKind::Multiply, &store, &arch).unwrap();
        assert_eq!(mult, h);
        let cat = fuse_variant(&h, &h, FusionKind::Concat, &store, &arch).unwrap();
        assert_eq!(cat.channels(), c);
    }
}
