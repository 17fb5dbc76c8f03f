//! Supervised and distillation loss terms.
//!
//! `L_g` is mean sigmoid cross entropy against ground truth. `L_d` is the
//! same form against the sigmoid of a deeper (or other-frame) prediction,
//! with the teacher treated as a constant: no gradient ever flows into it.
//! The spatial total distills the two early phases toward the final phase;
//! the temporal total distills every phase of the offset frame toward the
//! reference frame's final phase.

use std::rc::Rc;

use crate::embedding::PhasePredictions;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Selects which temporal objective applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalMode {
    /// Spatial branch only; no temporal loss.
    None,
    /// Three phases on the offset frame (no infer-frame encoder).
    Plain,
    /// Four phases on the offset frame (encoder + third embedding unit).
    Encoded,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Distillation weight, in `[0, 1]`.
    pub alpha: f64,
    pub temporal_mode: TemporalMode,
    /// Include the spatial distillation terms (SD flag).
    pub spatial_distill: bool,
    /// Include the temporal distillation terms (TD flag).
    pub temporal_distill: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            temporal_mode: TemporalMode::Encoded,
            spatial_distill: true,
            temporal_distill: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "loss.alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Spatial,
    Temporal,
}

/// Per-term breakdown of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossReport<T> {
    pub kind: LossKind,
    /// `L_g(P_i, G)` for each phase, in phase order.
    pub g_terms: Vec<T>,
    /// `L_d(P_i, teacher)` for each distilled phase, in phase order.
    pub d_terms: Vec<T>,
    pub alpha: T,
    /// `sum(g) + alpha * sum(d)`.
    pub total: T,
}

impl<T: Scalar> LossReport<T> {
    fn assemble(kind: LossKind, g_terms: Vec<T>, d_terms: Vec<T>, alpha: T) -> Self {
        let total = g_terms.iter().copied().sum::<T>()
            + alpha * d_terms.iter().copied().sum::<T>();
        Self {
            kind,
            g_terms,
            d_terms,
            alpha,
            total,
        }
    }
}

fn check_pair<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "loss shape mismatch: logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean over pixels of `-(t*ln(sigmoid(x)) + (1-t)*ln(1-sigmoid(x)))`,
/// computed in the stable form `max(x,0) - x*t + ln(1+exp(-|x|))`.
pub fn sigmoid_ce<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_pair(logits, target)?;
    let zero = T::zero();
    let one = T::one();
    let mut acc = T::zero();
    for (&x, &t) in logits.data().iter().zip(target.data().iter()) {
        if t < zero || t > one {
            return Err(Error::Numeric(format!("target {t} outside [0,1]")));
        }
        acc += x.max(zero) - x * t + (-x.abs()).softplus();
    }
    Ok(acc / T::from_f64_c(logits.len() as f64))
}

/// Gradient of [`sigmoid_ce`] w.r.t. the logits: `(sigmoid(x) - t) / N`.
pub fn sigmoid_ce_grad<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(logits, target)?;
    let inv_n = T::one() / T::from_f64_c(logits.len() as f64);
    logits.zip_map(target, |x, t| (x.sigmoid() - t) * inv_n)
}

/// Distillation term: sigmoid cross entropy of the student logits against the
/// teacher's sigmoid, teacher held constant.
pub fn distill_term<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    check_pair(student, teacher)?;
    sigmoid_ce(student, &teacher.map(Scalar::sigmoid))
}

/// Gradients of [`distill_term`]: the teacher gradient is exactly zero.
pub fn distill_term_grads<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(student, teacher)?;
    let g_student = sigmoid_ce_grad(student, &teacher.map(Scalar::sigmoid))?;
    Ok((g_student, Tensor::zeros(teacher.shape().to_vec())))
}

fn expect_phases<T: Scalar>(phases: &PhasePredictions<T>, expected: usize) -> Result<()> {
    if phases.logits.len() != expected {
        return Err(Error::Shape(format!(
            "expected {expected} phases, got {}",
            phases.logits.len()
        )));
    }
    Ok(())
}

/// Spatial total: `sum_i L_g(P_i, G) + alpha * sum_{i<2} L_d(P_i, P_2)`.
/// The final phase is the teacher and is not distilled against itself.
pub fn spatial_loss<T: Scalar>(
    phases: &PhasePredictions<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    cfg.validate()?;
    expect_phases(phases, 3)?;
    let alpha = T::from_f64_c(cfg.alpha);
    let mut g_terms = Vec::with_capacity(3);
    for p in &phases.logits {
        g_terms.push(sigmoid_ce(p, gt)?);
    }
    let mut d_terms = Vec::new();
    if cfg.spatial_distill {
        let teacher = phases.logits[2].map(Scalar::sigmoid);
        for p in &phases.logits[..2] {
            d_terms.push(sigmoid_ce(p, &teacher)?);
        }
    }
    Ok(LossReport::assemble(LossKind::Spatial, g_terms, d_terms, alpha))
}

/// Gradients of [`spatial_loss`] w.r.t. each phase's logits, with the
/// teacher's soft target frozen at its current value.
pub fn spatial_loss_grads<T: Scalar>(
    phases: &PhasePredictions<T>,
    gt: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Vec<Tensor<T>>> {
    expect_phases(phases, 3)?;
    let alpha = T::from_f64_c(cfg.alpha);
    let teacher = phases.logits[2].map(Scalar::sigmoid);
    let mut grads = Vec::with_capacity(3);
    for (i, p) in phases.logits.iter().enumerate() {
        let mut g = sigmoid_ce_grad(p, gt)?;
        if cfg.spatial_distill && i < 2 {
            let gd = sigmoid_ce_grad(p, &teacher)?;
            for (a, &b) in g.data_mut().iter_mut().zip(gd.data().iter()) {
                *a += alpha * b;
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

fn temporal_phase_count(mode: TemporalMode) -> Result<usize> {
    match mode {
        TemporalMode::Plain => Ok(3),
        TemporalMode::Encoded => Ok(4),
        TemporalMode::None => Err(Error::Config(
            "temporal loss requested with temporal_mode = none".into(),
        )),
    }
}

/// Temporal total over the offset frame's phases, each supervised by its own
/// ground truth and distilled toward the reference frame's final phase.
pub fn temporal_loss<T: Scalar>(
    phases_t0: &PhasePredictions<T>,
    teacher_p2_of_frame_t: &Tensor<T>,
    gt_t0: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossReport<T>> {
    cfg.validate()?;
    let count = temporal_phase_count(cfg.temporal_mode)?;
    expect_phases(phases_t0, count)?;
    let alpha = T::from_f64_c(cfg.alpha);
    let mut g_terms = Vec::with_capacity(count);
    for p in &phases_t0.logits {
        g_terms.push(sigmoid_ce(p, gt_t0)?);
    }
    let mut d_terms = Vec::new();
    if cfg.temporal_distill {
        let teacher = teacher_p2_of_frame_t.map(Scalar::sigmoid);
        for p in &phases_t0.logits {
            d_terms.push(sigmoid_ce(p, &teacher)?);
        }
    }
    Ok(LossReport::assemble(LossKind::Temporal, g_terms, d_terms, alpha))
}

/// Gradients of [`temporal_loss`] w.r.t. each offset-frame phase.
pub fn temporal_loss_grads<T: Scalar>(
    phases_t0: &PhasePredictions<T>,
    teacher_p2_of_frame_t: &Tensor<T>,
    gt_t0: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Vec<Tensor<T>>> {
    let count = temporal_phase_count(cfg.temporal_mode)?;
    expect_phases(phases_t0, count)?;
    let alpha = T::from_f64_c(cfg.alpha);
    let teacher = teacher_p2_of_frame_t.map(Scalar::sigmoid);
    let mut grads = Vec::with_capacity(count);
    for p in &phases_t0.logits {
        let mut g = sigmoid_ce_grad(p, gt_t0)?;
        if cfg.temporal_distill {
            let gd = sigmoid_ce_grad(p, &teacher)?;
            for (a, &b) in g.data_mut().iter_mut().zip(gd.data().iter()) {
                *a += alpha * b;
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Tape-side assembly of the spatial total. The teacher target is the
/// sigmoid of the final phase's *value*; the node graph never connects it to
/// the final phase, so distillation gradients cannot reach the teacher.
pub fn spatial_loss_on<T: Scalar>(
    tape: &Tape<T>,
    phase_vars: &[Var],
    gt: Rc<Tensor<T>>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport<T>)> {
    if phase_vars.len() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 phases, got {}",
            phase_vars.len()
        )));
    }
    let alpha = T::from_f64_c(cfg.alpha);
    let g_vars: Vec<Var> = phase_vars
        .iter()
        .map(|&p| tape.sigmoid_ce_mean(p, Rc::clone(&gt)))
        .collect::<Result<_>>()?;
    let mut d_vars = Vec::new();
    if cfg.spatial_distill {
        let teacher = Rc::new(tape.value(phase_vars[2]).map(Scalar::sigmoid));
        for &p in &phase_vars[..2] {
            d_vars.push(tape.sigmoid_ce_mean(p, Rc::clone(&teacher))?);
        }
    }
    let total = total_of(tape, &g_vars, &d_vars, alpha);
    let report = LossReport::assemble(
        LossKind::Spatial,
        g_vars.iter().map(|&v| tape.value(v).item()).collect(),
        d_vars.iter().map(|&v| tape.value(v).item()).collect(),
        alpha,
    );
    Ok((total, report))
}

/// Tape-side assembly of the temporal total; `teacher_p2` is the reference
/// frame's final-phase value (already outside this tape's gradient paths).
pub fn temporal_loss_on<T: Scalar>(
    tape: &Tape<T>,
    phase_vars: &[Var],
    teacher_p2: &Tensor<T>,
    gt_t0: Rc<Tensor<T>>,
    cfg: &LossConfig,
) -> Result<(Var, LossReport<T>)> {
    let count = temporal_phase_count(cfg.temporal_mode)?;
    if phase_vars.len() != count {
        return Err(Error::Shape(format!(
            "expected {count} phases, got {}",
            phase_vars.len()
        )));
    }
    let alpha = T::from_f64_c(cfg.alpha);
    let g_vars: Vec<Var> = phase_vars
        .iter()
        .map(|&p| tape.sigmoid_ce_mean(p, Rc::clone(&gt_t0)))
        .collect::<Result<_>>()?;
    let mut d_vars = Vec::new();
    if cfg.temporal_distill {
        let teacher = Rc::new(teacher_p2.map(Scalar::sigmoid));
        for &p in phase_vars {
            d_vars.push(tape.sigmoid_ce_mean(p, Rc::clone(&teacher))?);
        }
    }
    let total = total_of(tape, &g_vars, &d_vars, alpha);
    let report = LossReport::assemble(
        LossKind::Temporal,
        g_vars.iter().map(|&v| tape.value(v).item()).collect(),
        d_vars.iter().map(|&v| tape.value(v).item()).collect(),
        alpha,
    );
    Ok((total, report))
}

fn total_of<T: Scalar>(tape: &Tape<T>, g_vars: &[Var], d_vars: &[Var], alpha: T) -> Var {
    let gsum = tape.sum_scalars(g_vars);
    if d_vars.is_empty() {
        return gsum;
    }
    let dsum = tape.sum_scalars(d_vars);
    tape.sum_scalars(&[gsum, tape.scale(dsum, alpha)])
}
