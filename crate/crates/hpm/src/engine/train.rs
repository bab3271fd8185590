//! One HPM training step: teacher predicts per-patch difficulty on the full
//! sequence, the scheduler turns predictions into a mask, the student is
//! optimized on reconstruction plus loss prediction, and the teacher is
//! refreshed by EMA.

use crate::diffmath::adamw::{AdamWConfig, OptimizerState};
use crate::diffmath::tape::{Tape, Var};
use crate::diffmath::{LrSchedule, Tensor};
use crate::engine::ema::{ema_update, EmaConfig};
use crate::engine::losses::{
    pred_loss_absolute, pred_loss_relative, reconstruction_loss, total_loss, LossField, LossRole,
    Measure, ObjectiveConfig, PredMode,
};
use crate::engine::mask::{alpha_at, generate_mask, MaskPlan, PatchMask};
use crate::error::{HpmError, Result};
use crate::model::{
    decode, encode, decode_on, encode_on, register_model, DecoderRole, ModelParams, ModelVars,
};
use crate::patchkit::{make_targets, sincos_embed, PatchGeometry, PatchSequence, TargetMode};
use rand_chacha::ChaCha8Rng;

/// Student parameters trained by gradient, teacher refreshed by EMA.
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub student: ModelParams,
    pub teacher: ModelParams,
}

impl ModelPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: ModelParams) -> Self {
        let teacher = student.clone();
        ModelPair { student, teacher }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub l_rec: f64,
    pub l_pred: f64,
    pub alpha: f64,
    pub hard_count: usize,
    pub random_count: usize,
}

impl StepMetrics {
    pub fn csv_header() -> &'static str {
        "epoch,step,lr,l_rec,l_pred,alpha_t,hard_count,random_count"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.l_rec,
            self.l_pred,
            self.alpha,
            self.hard_count,
            self.random_count
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub geometry: PatchGeometry,
    pub plan: MaskPlan,
    pub objective: ObjectiveConfig,
    pub target_mode: TargetMode,
    pub ema: EmaConfig,
    pub schedule: LrSchedule,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.plan.validate()?;
        self.objective.validate()?;
        let feature_measure = self.objective.measure == Measure::EmaFeatureMse;
        let feature_target = matches!(self.target_mode, TargetMode::EmaFeatures { .. });
        if feature_measure != feature_target {
            return Err(HpmError::Config(
                "ema_feature_mse measure requires the ema_features target and vice versa".into(),
            ));
        }
        Ok(())
    }

    /// Width of the reconstruction target: patch length for pixel targets,
    /// encoder width for feature distillation.
    pub fn target_dim(&self, encoder_width: usize) -> usize {
        match self.target_mode {
            TargetMode::EmaFeatures { .. } => encoder_width,
            _ => self.geometry.token_len(),
        }
    }
}

/// Per-sample products of the teacher pass: the mask, the reconstruction
/// target, and the raw predicted-loss field that produced the mask.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub mask: PatchMask,
    pub target: Tensor,
    pub teacher_field: LossField,
}

#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub samples: Vec<PreparedSample>,
    pub alpha: f64,
}

struct BatchGraph {
    loss: Var,
    l_rec_mean: f64,
    l_pred_mean: f64,
    truths: Vec<LossField>,
}

pub struct Trainer {
    pub setup: TrainSetup,
    pub pair: ModelPair,
    pub opt: OptimizerState,
    pub global_step: u64,
    enc_pos: Tensor,
    rec_pos: Tensor,
    pred_pos: Tensor,
}

impl Trainer {
    pub fn new(setup: TrainSetup, student: ModelParams, opt_cfg: AdamWConfig) -> Result<Self> {
        setup.validate()?;
        student.cfg.validate()?;
        let g = &setup.geometry;
        if student.cfg.encoder.token_dim != g.token_len() {
            return Err(HpmError::Config(format!(
                "encoder token_dim {} does not match patch length {}",
                student.cfg.encoder.token_dim,
                g.token_len()
            )));
        }
        let want = setup.target_dim(student.cfg.encoder.width);
        if student.cfg.reconstructor.output_dim != want {
            return Err(HpmError::Config(format!(
                "reconstructor output_dim {} does not match target dim {want}",
                student.cfg.reconstructor.output_dim
            )));
        }
        let enc_pos = sincos_embed(g, student.cfg.encoder.width)?;
        let rec_pos = sincos_embed(g, student.cfg.reconstructor.width)?;
        let pred_pos = sincos_embed(g, student.cfg.loss_predictor.width)?;
        let sizes = student.param_sizes();
        Ok(Trainer {
            setup,
            pair: ModelPair::new(student),
            opt: OptimizerState::new(opt_cfg, &sizes),
            global_step: 0,
            enc_pos,
            rec_pos,
            pred_pos,
        })
    }

    pub fn encoder_pos(&self) -> &Tensor {
        &self.enc_pos
    }

    /// Teacher forward on the full sequence: predicted per-patch losses and
    /// the encoder latents (used as distillation targets). No gradients.
    pub fn teacher_predict(&self, tokens: &Tensor) -> Result<(LossField, Tensor)> {
        teacher_predict_with(&self.pair.teacher, tokens, &self.enc_pos, &self.pred_pos)
    }

    /// Teacher pass and mask generation for a batch.
    pub fn prepare(
        &self,
        batch: &[PatchSequence],
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PreparedBatch> {
        if batch.is_empty() {
            return Err(HpmError::Contract("empty batch".into()));
        }
        let alpha = alpha_at(&self.setup.plan, epoch)?;
        let frames = self.setup.geometry.token_frames();
        let mut samples = Vec::with_capacity(batch.len());
        for seq in batch {
            let (field, latents) = self.teacher_predict(&seq.tokens)?;
            let mask = generate_mask(&field, &self.setup.plan, epoch, rng, frames)?;
            let target = make_targets(seq, self.setup.target_mode, Some(&latents))?;
            samples.push(PreparedSample { mask, target, teacher_field: field });
        }
        Ok(PreparedBatch { samples, alpha })
    }

    fn build_batch_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        cfg_owner: &ModelParams,
        batch: &[PatchSequence],
        prep: &PreparedBatch,
        truth_override: Option<&[LossField]>,
    ) -> Result<BatchGraph> {
        if batch.len() != prep.samples.len() {
            return Err(HpmError::Contract("batch and prepared samples differ in length".into()));
        }
        let n = self.setup.geometry.num_patches();
        let cfg = &cfg_owner.cfg;
        let enc_pos = tape.constant(self.enc_pos.shape().to_vec(), self.enc_pos.data().to_vec());
        let rec_pos = tape.constant(self.rec_pos.shape().to_vec(), self.rec_pos.data().to_vec());
        let pred_pos =
            tape.constant(self.pred_pos.shape().to_vec(), self.pred_pos.data().to_vec());

        let mut sample_losses = Vec::with_capacity(batch.len());
        let mut truths = Vec::with_capacity(batch.len());
        let mut l_rec_sum = 0.0;
        let mut l_pred_sum = 0.0;
        for (b, (seq, ps)) in batch.iter().zip(&prep.samples).enumerate() {
            let keep = ps.mask.visible_ids();
            let tokens = tape.constant(seq.tokens.shape().to_vec(), seq.tokens.data().to_vec());
            let target = tape.constant(ps.target.shape().to_vec(), ps.target.data().to_vec());
            let latents = encode_on(tape, &vars.encoder, &cfg.encoder, tokens, &keep, enc_pos)?;
            let rec = decode_on(
                tape,
                &vars.reconstructor,
                &cfg.reconstructor,
                latents,
                &keep,
                n,
                rec_pos,
            )?;
            let (l_rec, truth) =
                reconstruction_loss(tape, rec, target, &ps.mask, self.setup.objective.measure)?;
            l_rec_sum += tape.value(l_rec)[0];
            let truth_used = match truth_override {
                Some(t) => &t[b],
                None => &truth,
            };
            let l_pred = match self.setup.objective.pred_mode {
                PredMode::None => None,
                mode => {
                    let field = decode_on(
                        tape,
                        &vars.loss_predictor,
                        &cfg.loss_predictor,
                        latents,
                        &keep,
                        n,
                        pred_pos,
                    )?;
                    let lp = match mode {
                        PredMode::AbsoluteMse => {
                            pred_loss_absolute(tape, field, truth_used, &ps.mask)?
                        }
                        PredMode::RelativeBce => {
                            pred_loss_relative(tape, field, truth_used, &ps.mask)?
                        }
                        PredMode::None => unreachable!(),
                    };
                    l_pred_sum += tape.value(lp)[0];
                    Some(lp)
                }
            };
            truths.push(truth);
            sample_losses.push(total_loss(tape, &self.setup.objective, l_rec, l_pred)?);
        }

        let mut acc = sample_losses[0];
        for &l in &sample_losses[1..] {
            acc = tape.add(acc, l)?;
        }
        let loss = tape.scale(acc, 1.0 / batch.len() as f64);
        Ok(BatchGraph {
            loss,
            l_rec_mean: l_rec_sum / batch.len() as f64,
            l_pred_mean: l_pred_sum / batch.len() as f64,
            truths,
        })
    }

    /// Batch loss value for arbitrary parameters, with the mask, targets,
    /// and (optionally) the predictor's ground truth held fixed. This is
    /// the function the finite-difference suite differentiates.
    pub fn loss_value(
        &self,
        params: &ModelParams,
        batch: &[PatchSequence],
        prep: &PreparedBatch,
        truth_override: Option<&[LossField]>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, params);
        let graph = self.build_batch_loss(&mut tape, &vars, params, batch, prep, truth_override)?;
        Ok(tape.value(graph.loss)[0])
    }

    /// Batch loss plus flat parameter gradients (named-tensor order) and
    /// the detached ground-truth fields computed at this point.
    pub fn loss_grads(
        &self,
        params: &ModelParams,
        batch: &[PatchSequence],
        prep: &PreparedBatch,
        truth_override: Option<&[LossField]>,
    ) -> Result<(f64, Vec<f64>, Vec<LossField>)> {
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, params);
        let graph = self.build_batch_loss(&mut tape, &vars, params, batch, prep, truth_override)?;
        tape.backward(graph.loss)?;
        let mut flat = Vec::new();
        for v in &vars.param_vars {
            flat.extend(tape.grad(*v));
        }
        Ok((tape.value(graph.loss)[0], flat, graph.truths))
    }

    /// Full training step: teacher pass, mask, student update, EMA refresh.
    /// `epoch` drives the alpha schedule (constant within an epoch);
    /// `frac_epoch` drives the learning rate.
    pub fn step(
        &mut self,
        batch: &[PatchSequence],
        epoch: usize,
        frac_epoch: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepMetrics> {
        let prep = self.prepare(batch, epoch, rng)?;
        let lr = self.setup.schedule.lr_at(frac_epoch)?;

        let mut tape = Tape::new();
        let vars = register_model(&mut tape, &self.pair.student);
        let graph =
            self.build_batch_loss(&mut tape, &vars, &self.pair.student, batch, &prep, None)?;
        tape.backward(graph.loss)?;

        self.pair.student.zero_grads();
        for ((_, tensor), var) in
            self.pair.student.named_tensors_mut().into_iter().zip(&vars.param_vars)
        {
            tensor.accumulate_grad(&tape.grad(*var))?;
        }
        drop(tape);

        let mut tensors: Vec<&mut Tensor> = Vec::new();
        for (_, t) in self.pair.student.named_tensors_mut() {
            tensors.push(t);
        }
        self.opt.step(&mut tensors, lr)?;
        ema_update(&mut self.pair.teacher, &self.pair.student, &self.setup.ema)?;
        self.global_step += 1;
        debug_assert!(self.pair.student.is_finite(), "non-finite parameter after step");

        let hard_count = prep.samples.iter().map(|s| s.mask.hard_ids().len()).sum();
        let random_count = prep.samples.iter().map(|s| s.mask.random_ids().len()).sum();
        Ok(StepMetrics {
            epoch: epoch as u64,
            step: self.global_step,
            lr,
            l_rec: graph.l_rec_mean,
            l_pred: graph.l_pred_mean,
            alpha: prep.alpha,
            hard_count,
            random_count,
        })
    }

    /// Mean reconstruction loss of the given parameters under fixed masks;
    /// used for held-out evaluation.
    pub fn eval_l_rec(
        &self,
        params: &ModelParams,
        batch: &[PatchSequence],
        masks: &[PatchMask],
    ) -> Result<f64> {
        if batch.len() != masks.len() {
            return Err(HpmError::Contract("batch and mask lists differ in length".into()));
        }
        let n = self.setup.geometry.num_patches();
        let mut total = 0.0;
        for (seq, mask) in batch.iter().zip(masks) {
            let keep = mask.visible_ids();
            let latents = encode(params, &seq.tokens, &keep, &self.enc_pos)?;
            let rec = decode(params, DecoderRole::Reconstructor, &latents, &keep, n, &self.rec_pos)?;
            let teacher_latents = match self.setup.target_mode {
                TargetMode::EmaFeatures { .. } => {
                    let (_, lat) = self.teacher_predict(&seq.tokens)?;
                    Some(lat)
                }
                _ => None,
            };
            let target = make_targets(seq, self.setup.target_mode, teacher_latents.as_ref())?;
            let (l, _) = crate::engine::losses::reconstruction_loss_value(
                &rec,
                &target,
                mask,
                self.setup.objective.measure,
            )?;
            total += l;
        }
        Ok(total / batch.len() as f64)
    }
}

/// Teacher forward for arbitrary parameters (full visibility, no gradient).
pub fn teacher_predict_with(
    teacher: &ModelParams,
    tokens: &Tensor,
    enc_pos: &Tensor,
    pred_pos: &Tensor,
) -> Result<(LossField, Tensor)> {
    let n = tokens.rows();
    let all: Vec<usize> = (0..n).collect();
    let latents = encode(teacher, tokens, &all, enc_pos)?;
    let field = decode(teacher, DecoderRole::LossPredictor, &latents, &all, n, pred_pos)?;
    Ok((LossField::new(field.data().to_vec(), LossRole::TeacherPred)?, latents))
}
