//! The two training objectives: masked reconstruction and per-patch loss
//! prediction (absolute MSE or pairwise relative BCE).
//!
//! The ground-truth per-patch loss field is always detached: it enters the
//! predictor objectives as plain data, never as a differentiable value.

use crate::diffmath::tape::{Tape, Var};
use crate::engine::mask::PatchMask;
use crate::error::{HpmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossRole {
    TeacherPred,
    StudentPred,
    GroundTruth,
}

/// Per-patch scalar field of length N.
#[derive(Debug, Clone, PartialEq)]
pub struct LossField {
    pub values: Vec<f64>,
    pub role: LossRole,
}

impl LossField {
    pub fn new(values: Vec<f64>, role: LossRole) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HpmError::Contract("loss field contains non-finite values".into()));
        }
        Ok(LossField { values, role })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredMode {
    None,
    AbsoluteMse,
    RelativeBce,
}

impl PredMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredMode::None => "none",
            PredMode::AbsoluteMse => "absolute_mse",
            PredMode::RelativeBce => "relative_bce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PredMode::None),
            "absolute_mse" => Ok(PredMode::AbsoluteMse),
            "relative_bce" => Ok(PredMode::RelativeBce),
            other => Err(HpmError::Config(format!("unknown pred_mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    PixelMse,
    EmaFeatureMse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub pred_mode: PredMode,
    pub measure: Measure,
    pub pred_weight: f64,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pred_weight < 0.0 {
            return Err(HpmError::Config(format!(
                "pred_weight {} must be non-negative",
                self.pred_weight
            )));
        }
        Ok(())
    }
}

/// Masked reconstruction loss. Per-patch loss is the mean squared
/// difference over the patch vector; under `EmaFeatureMse` both sides are
/// l2-normalized per row first. Returns the scalar mean over masked
/// patches plus the detached per-patch ground-truth field (zeros at
/// visible positions).
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    mask: &PatchMask,
    measure: Measure,
) -> Result<(Var, LossField)> {
    let n = tape.shape(pred)[0];
    if tape.shape(pred) != tape.shape(target) {
        return Err(HpmError::Shape {
            op: "reconstruction_loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    if mask.len() != n {
        return Err(HpmError::Contract(format!(
            "mask length {} does not match {} patches",
            mask.len(),
            n
        )));
    }
    let masked = mask.masked_ids();
    if masked.is_empty() {
        return Err(HpmError::Contract("reconstruction loss needs at least one masked patch".into()));
    }
    let (lhs, rhs) = match measure {
        Measure::PixelMse => (pred, target),
        Measure::EmaFeatureMse => {
            let p = tape.l2_normalize_rows(pred, 1e-6)?;
            let t = tape.l2_normalize_rows(target, 1e-6)?;
            (p, t)
        }
    };
    let diff = tape.sub(lhs, rhs)?;
    let sq = tape.mul(diff, diff)?;
    let per_patch = tape.row_mean(sq)?;
    let masked_losses = tape.gather_rows(per_patch, &masked)?;
    let l_rec = tape.mean_all(masked_losses);

    let mut truth = vec![0.0; n];
    let per_patch_vals = tape.value(per_patch);
    for &i in &masked {
        truth[i] = per_patch_vals[i];
    }
    Ok((l_rec, LossField::new(truth, LossRole::GroundTruth)?))
}

fn masked_pair_ids(mask: &PatchMask, field_len: usize, min: usize) -> Result<Vec<usize>> {
    if mask.len() != field_len {
        return Err(HpmError::Contract(format!(
            "mask length {} does not match field length {field_len}",
            mask.len()
        )));
    }
    let masked = mask.masked_ids();
    if masked.len() < min {
        return Err(HpmError::Contract(format!(
            "{} masked patches, need at least {min}",
            masked.len()
        )));
    }
    Ok(masked)
}

/// Mean squared error between the student's predicted field and the
/// detached ground truth, over masked patches only.
pub fn pred_loss_absolute(
    tape: &mut Tape,
    student_field: Var,
    truth: &LossField,
    mask: &PatchMask,
) -> Result<Var> {
    let n = tape.shape(student_field)[0];
    if truth.len() != n {
        return Err(HpmError::Contract(format!(
            "truth field length {} does not match {n} patches",
            truth.len()
        )));
    }
    let masked = masked_pair_ids(mask, n, 1)?;
    let student_masked = tape.gather_rows(student_field, &masked)?;
    let truth_masked: Vec<f64> = masked.iter().map(|&i| truth.values[i]).collect();
    let truth_var = tape.constant(vec![masked.len(), 1], truth_masked);
    let diff = tape.sub(student_masked, truth_var)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Pairwise relative objective over ordered masked pairs (i, j): when the
/// true loss of i exceeds j the term is -log sigma(s_i - s_j), mirrored for
/// the opposite order; ties contribute nothing. Normalized by the number
/// of contributing ordered pairs. Log terms go through softplus, never a
/// raw log.
pub fn pred_loss_relative(
    tape: &mut Tape,
    student_field: Var,
    truth: &LossField,
    mask: &PatchMask,
) -> Result<Var> {
    let n = tape.shape(student_field)[0];
    if truth.len() != n {
        return Err(HpmError::Contract(format!(
            "truth field length {} does not match {n} patches",
            truth.len()
        )));
    }
    let masked = masked_pair_ids(mask, n, 2)?;
    let k = masked.len();

    // Indicator weights from the detached truth: w_plus for truth_i >
    // truth_j, w_minus for truth_i < truth_j.
    let mut w_plus = vec![0.0; k * k];
    let mut w_minus = vec![0.0; k * k];
    let mut contributing = 0usize;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let ti = truth.values[masked[a]];
            let tj = truth.values[masked[b]];
            if ti > tj {
                w_plus[a * k + b] = 1.0;
                contributing += 1;
            } else if ti < tj {
                w_minus[a * k + b] = 1.0;
                contributing += 1;
            }
        }
    }
    if contributing == 0 {
        return Ok(tape.scalar_constant(0.0));
    }

    // Pairwise difference matrix D[a][b] = s_a - s_b via rank-one products.
    let s = tape.gather_rows(student_field, &masked)?;
    let ones_row = tape.constant(vec![1, k], vec![1.0; k]);
    let ones_col = tape.constant(vec![k, 1], vec![1.0; k]);
    let s_broadcast = tape.matmul(s, ones_row)?;
    let s_t = tape.transpose(s)?;
    let s_t_broadcast = tape.matmul(ones_col, s_t)?;
    let d = tape.sub(s_broadcast, s_t_broadcast)?;

    // -log sigma(d) = softplus(-d); -log(1 - sigma(d)) = softplus(d).
    let neg_d = tape.scale(d, -1.0);
    let sp_neg = tape.softplus(neg_d);
    let sp_pos = tape.softplus(d);
    let wp = tape.constant(vec![k, k], w_plus);
    let wm = tape.constant(vec![k, k], w_minus);
    let term_plus = tape.mul(sp_neg, wp)?;
    let term_minus = tape.mul(sp_pos, wm)?;
    let total = tape.add(term_plus, term_minus)?;
    let sum = tape.sum_all(total);
    Ok(tape.scale(sum, 1.0 / contributing as f64))
}

/// L = L_rec + pred_weight * L_pred; plain L_rec when prediction is off.
pub fn total_loss(
    tape: &mut Tape,
    cfg: &ObjectiveConfig,
    l_rec: Var,
    l_pred: Option<Var>,
) -> Result<Var> {
    match (cfg.pred_mode, l_pred) {
        (PredMode::None, _) => Ok(l_rec),
        (_, Some(lp)) => {
            let weighted = tape.scale(lp, cfg.pred_weight);
            tape.add(l_rec, weighted)
        }
        (_, None) => Err(HpmError::Contract(
            "pred_mode requires a prediction loss term".into(),
        )),
    }
}

// ---- value-level wrappers (oracles, CLI, evaluation) ----------------------

pub fn reconstruction_loss_value(
    pred: &crate::diffmath::Tensor,
    target: &crate::diffmath::Tensor,
    mask: &PatchMask,
    measure: Measure,
) -> Result<(f64, LossField)> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.shape().to_vec(), pred.data().to_vec());
    let t = tape.constant(target.shape().to_vec(), target.data().to_vec());
    let (l, truth) = reconstruction_loss(&mut tape, p, t, mask, measure)?;
    Ok((tape.value(l)[0], truth))
}

pub fn pred_loss_relative_value(
    student: &LossField,
    truth: &LossField,
    mask: &PatchMask,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(vec![student.len(), 1], student.values.clone());
    let l = pred_loss_relative(&mut tape, s, truth, mask)?;
    Ok(tape.value(l)[0])
}

pub fn pred_loss_absolute_value(
    student: &LossField,
    truth: &LossField,
    mask: &PatchMask,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(vec![student.len(), 1], student.values.clone());
    let l = pred_loss_absolute(&mut tape, s, truth, mask)?;
    Ok(tape.value(l)[0])
}
