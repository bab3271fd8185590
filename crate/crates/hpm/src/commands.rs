//! Command implementations behind the CLI: pretraining, frozen-feature
//! evaluation, visualization, the mask ablation sweep, and the gradient
//! self-test. Everything is a library function so tests can drive the
//! exact code paths the binary runs.

use crate::config::{DataSource, RunConfig};
use crate::dataio::checkpoint::{
    capture_rng, load_checkpoint, restore_rng, save_checkpoint, Checkpoint, NamedTensor,
};
use crate::dataio::pack::{read_pack, write_pack};
use crate::dataio::pnm::{read_pnm, write_pnm};
use crate::dataio::synth::{synth_dataset, SampleRecord};
use crate::diffmath::gradcheck::{central_diff, max_rel_err, standard_primitive_suite, GradCheck};
use crate::diffmath::OptimizerState;
use crate::engine::losses::LossRole;
use crate::engine::mask::{generate_mask, MaskPlan, MaskPolicy, PatchMask};
use crate::engine::train::{teacher_predict_with, ModelPair, StepMetrics, Trainer};
use crate::engine::LossField;
use crate::error::{HpmError, Result};
use crate::eval::{extract_features, knn_accuracy, train_linear_probe, SubsetRule};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::patchkit::{patchify, sincos_embed, PatchSequence, VisualTensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const PROBE_EPOCHS: usize = 100;
pub const PROBE_LR: f64 = 0.01;

// ---- checkpoint <-> trainer glue -------------------------------------------

fn params_to_tensors(prefix: &str, params: &ModelParams, out: &mut Vec<NamedTensor>) {
    for (name, t) in params.named_tensors() {
        out.push(NamedTensor {
            name: format!("{prefix}.{name}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    }
}

fn params_from_tensors(
    cfg: &ModelConfig,
    prefix: &str,
    tensors: &[NamedTensor],
) -> Result<ModelParams> {
    let mut params = init_params(cfg, 0)?;
    for (name, t) in params.named_tensors_mut() {
        let full = format!("{prefix}.{name}");
        let found = tensors
            .iter()
            .find(|nt| nt.name == full)
            .ok_or_else(|| HpmError::Checkpoint(format!("missing tensor {full}")))?;
        if found.shape != t.shape() {
            return Err(HpmError::Checkpoint(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                found.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&found.data);
    }
    Ok(params)
}

fn trainer_to_checkpoint(
    trainer: &Trainer,
    config_text: &str,
    epoch: u64,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let mut tensors = Vec::new();
    params_to_tensors("student", &trainer.pair.student, &mut tensors);
    params_to_tensors("teacher", &trainer.pair.teacher, &mut tensors);
    for (kind, moments) in [("m", &trainer.opt.m), ("v", &trainer.opt.v)] {
        for ((name, t), buf) in trainer.pair.student.named_tensors().iter().zip(moments) {
            tensors.push(NamedTensor {
                name: format!("opt.{kind}.{name}"),
                shape: t.shape().to_vec(),
                data: buf.clone(),
            });
        }
    }
    let (rng_seed, rng_stream, rng_word_pos) = capture_rng(rng);
    Checkpoint {
        config_text: config_text.to_string(),
        epoch,
        opt_step: trainer.opt.step,
        rng_seed,
        rng_stream,
        rng_word_pos,
        tensors,
    }
}

/// Rebuild the model pair recorded in a checkpoint, plus its run config.
pub fn pair_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, ModelPair)> {
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let model_cfg = cfg.model_config();
    let student = params_from_tensors(&model_cfg, "student", &ckpt.tensors)?;
    let teacher = params_from_tensors(&model_cfg, "teacher", &ckpt.tensors)?;
    Ok((cfg, ModelPair { student, teacher }))
}

fn restore_optimizer(trainer: &mut Trainer, ckpt: &Checkpoint) -> Result<()> {
    let sizes = trainer.pair.student.param_sizes();
    let mut opt = OptimizerState::new(trainer.opt.cfg, &sizes);
    opt.step = ckpt.opt_step;
    for (kind, moments) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        for ((name, _), buf) in
            trainer.pair.student.named_tensors().iter().zip(moments.iter_mut())
        {
            let full = format!("opt.{kind}.{name}");
            let found = ckpt
                .tensors
                .iter()
                .find(|nt| nt.name == full)
                .ok_or_else(|| HpmError::Checkpoint(format!("missing tensor {full}")))?;
            if found.data.len() != buf.len() {
                return Err(HpmError::Checkpoint(format!("tensor {full} has wrong size")));
            }
            buf.copy_from_slice(&found.data);
        }
    }
    trainer.opt = opt;
    trainer.global_step = ckpt.opt_step;
    Ok(())
}

// ---- dataset handling -------------------------------------------------------

struct RunData {
    train: Vec<SampleRecord>,
    heldout: Vec<SampleRecord>,
}

fn load_run_data(cfg: &RunConfig) -> Result<RunData> {
    let g = cfg.geometry();
    match cfg.source {
        DataSource::Synth => {
            let spec = cfg.synth_spec();
            let mut all = synth_dataset(&spec, &g, cfg.count + cfg.holdout)?;
            let heldout = all.split_off(cfg.count);
            Ok(RunData { train: all, heldout })
        }
        DataSource::Pack => {
            let mut all = read_pack(Path::new(&cfg.data_path), &g)?;
            if cfg.holdout >= all.len() {
                return Err(HpmError::Config(format!(
                    "holdout {} does not leave training data from a pack of {}",
                    cfg.holdout,
                    all.len()
                )));
            }
            let heldout = all.split_off(all.len() - cfg.holdout);
            Ok(RunData { train: all, heldout })
        }
    }
}

fn sequences(samples: &[SampleRecord], cfg: &RunConfig) -> Result<Vec<PatchSequence>> {
    let g = cfg.geometry();
    samples.iter().map(|s| patchify(&s.visual, &g)).collect()
}

/// Fixed random masks for held-out evaluation, independent of the training
/// rng so evaluation never perturbs the run.
fn heldout_masks(cfg: &RunConfig, count: usize) -> Result<Vec<PatchMask>> {
    let g = cfg.geometry();
    let plan = MaskPlan { policy: MaskPolicy::Random, ..cfg.mask_plan() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE7A1_11AA_55AA_11AA);
    let n = g.num_patches();
    let field = LossField::new(vec![0.0; n], LossRole::TeacherPred)?;
    (0..count)
        .map(|_| generate_mask(&field, &plan, 0, &mut rng, g.token_frames()))
        .collect()
}

// ---- pretraining ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub heldout_path: PathBuf,
    pub train_pack: PathBuf,
    pub heldout_pack: PathBuf,
    pub initial_heldout_l_rec: f64,
    pub final_heldout_l_rec: f64,
    /// Mean training reconstruction loss over the last epoch's steps.
    pub final_train_l_rec: f64,
}

/// Run the training loop described by the config, optionally resuming from
/// a checkpoint. Writes metrics.csv, heldout.csv, per-epoch checkpoints,
/// final.ckpt, the config echo, and (for synthetic data) dataset packs.
pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<PretrainOutcome> {
    let setup = cfg.train_setup()?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out_dir)?;
    let config_text = cfg.serialize();
    fs::write(out_dir.join("config.txt"), &config_text)?;

    let data = load_run_data(cfg)?;
    let train_pack = out_dir.join("data/train");
    let heldout_pack = out_dir.join("data/heldout");
    if cfg.source == DataSource::Synth {
        write_pack(&train_pack, &data.train)?;
        write_pack(&heldout_pack, &data.heldout)?;
    }
    let train_seqs = sequences(&data.train, cfg)?;
    let heldout_seqs = sequences(&data.heldout, cfg)?;
    let eval_masks = heldout_masks(cfg, heldout_seqs.len())?;

    let mut trainer;
    let mut rng;
    let start_epoch;
    match resume {
        None => {
            let params = init_params(&cfg.model_config(), cfg.seed)?;
            trainer = Trainer::new(setup, params, cfg.adamw())?;
            rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            start_epoch = 0;
        }
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            // The run must match the checkpoint in everything but where the
            // outputs land.
            let mut recorded = RunConfig::parse(&ckpt.config_text)?;
            recorded.output_dir = cfg.output_dir.clone();
            if recorded != *cfg {
                return Err(HpmError::Config(
                    "checkpoint was produced by a different config".into(),
                ));
            }
            let (_, pair) = pair_from_checkpoint(&ckpt)?;
            trainer = Trainer::new(setup, pair.student, cfg.adamw())?;
            trainer.pair.teacher = pair.teacher;
            restore_optimizer(&mut trainer, &ckpt)?;
            rng = restore_rng(ckpt.rng_seed, ckpt.rng_stream, ckpt.rng_word_pos);
            start_epoch = ckpt.epoch as usize;
        }
    }
    if start_epoch >= cfg.epochs {
        return Err(HpmError::Config(format!(
            "checkpoint is already at epoch {start_epoch} of {}",
            cfg.epochs
        )));
    }

    let metrics_path = out_dir.join("metrics.csv");
    let heldout_path = out_dir.join("heldout.csv");
    let mut metrics_file = fs::File::create(&metrics_path)?;
    writeln!(metrics_file, "{}", StepMetrics::csv_header())?;
    let mut heldout_file = fs::File::create(&heldout_path)?;
    writeln!(heldout_file, "epoch,l_rec")?;

    let eval_l_rec = |t: &Trainer| t.eval_l_rec(&t.pair.student, &heldout_seqs, &eval_masks);
    let initial_heldout_l_rec = eval_l_rec(&trainer)?;
    writeln!(heldout_file, "{start_epoch},{initial_heldout_l_rec}")?;

    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train_seqs.len().div_ceil(batch);
    let mut final_heldout_l_rec = initial_heldout_l_rec;
    let mut final_train_l_rec = initial_heldout_l_rec;
    for epoch in start_epoch..cfg.epochs {
        // Epoch-local sample order drawn from the training rng stream.
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_l_rec = 0.0;
        let mut epoch_steps = 0usize;
        for (step_idx, chunk) in order.chunks(batch).enumerate() {
            let batch_seqs: Vec<PatchSequence> =
                chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let frac = epoch as f64 + step_idx as f64 / steps_per_epoch as f64;
            let metrics = trainer.step(&batch_seqs, epoch, frac, &mut rng)?;
            epoch_l_rec += metrics.l_rec;
            epoch_steps += 1;
            writeln!(metrics_file, "{}", metrics.csv_row())?;
        }
        final_train_l_rec = epoch_l_rec / epoch_steps as f64;
        final_heldout_l_rec = eval_l_rec(&trainer)?;
        writeln!(heldout_file, "{},{final_heldout_l_rec}", epoch + 1)?;

        let completed = epoch + 1;
        if cfg.checkpoint_every > 0
            && (completed % cfg.checkpoint_every == 0 || completed == cfg.epochs)
        {
            let ckpt = trainer_to_checkpoint(&trainer, &config_text, completed as u64, &rng);
            save_checkpoint(&out_dir.join(format!("ckpt-epoch-{completed:04}.ckpt")), &ckpt)?;
        }
    }

    let final_path = out_dir.join("final.ckpt");
    let ckpt = trainer_to_checkpoint(&trainer, &config_text, cfg.epochs as u64, &rng);
    save_checkpoint(&final_path, &ckpt)?;

    Ok(PretrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        heldout_path,
        train_pack,
        heldout_pack,
        initial_heldout_l_rec,
        final_heldout_l_rec,
        final_train_l_rec,
    })
}

// ---- evaluation reports -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub k: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.metric,
            self.value,
            self.k.map_or(String::new(), |k| k.to_string()),
            self.seed,
            self.config_hash
        )
    }
}

/// Append-only report log next to the checkpoint.
fn append_reports(ckpt_path: &Path, reports: &[EvalReport]) -> Result<()> {
    let dir = ckpt_path.parent().unwrap_or_else(|| Path::new("."));
    let path = dir.join("reports.csv");
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        writeln!(file, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Deterministic 80/20 split by manifest order: every fifth record tests.
fn probe_split(samples: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if i % 5 == 4 {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Linear probe on frozen mean-pooled features; the subset rule restricts
/// which patch tokens feed the mean.
pub fn cmd_probe(ckpt_path: &Path, data_dir: &Path, rule: SubsetRule) -> Result<EvalReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (cfg, pair) = pair_from_checkpoint(&ckpt)?;
    let g = cfg.geometry();
    let samples = read_pack(data_dir, &g)?;
    let (train, test) = probe_split(&samples);
    if train.is_empty() || test.is_empty() {
        return Err(HpmError::Contract("probe split left an empty train or test set".into()));
    }
    let classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let train_feats = extract_features(&pair, &g, &train, rule, cfg.seed)?;
    let test_feats = extract_features(&pair, &g, &test, rule, cfg.seed)?;
    let train_labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let probe =
        train_linear_probe(&train_feats, &train_labels, classes, PROBE_EPOCHS, PROBE_LR, cfg.seed)?;
    let report = EvalReport {
        metric: format!("linear_probe_{}", rule.as_str()),
        value: probe.accuracy(&test_feats, &test_labels),
        k: None,
        seed: cfg.seed,
        config_hash: format!("{:016x}", cfg.hash()),
    };
    append_reports(ckpt_path, std::slice::from_ref(&report))?;
    Ok(report)
}

/// Cosine kNN over frozen features for each k, plus the best-of report.
pub fn cmd_knn(ckpt_path: &Path, data_dir: &Path, ks: &[usize]) -> Result<Vec<EvalReport>> {
    if ks.is_empty() {
        return Err(HpmError::Contract("kNN needs at least one k".into()));
    }
    let ckpt = load_checkpoint(ckpt_path)?;
    let (cfg, pair) = pair_from_checkpoint(&ckpt)?;
    let g = cfg.geometry();
    let samples = read_pack(data_dir, &g)?;
    let (train, test) = probe_split(&samples);
    let train_feats = extract_features(&pair, &g, &train, SubsetRule::All, cfg.seed)?;
    let test_feats = extract_features(&pair, &g, &test, SubsetRule::All, cfg.seed)?;
    let train_labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let test_labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let hash = format!("{:016x}", cfg.hash());
    let mut reports = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for &k in ks {
        let acc = knn_accuracy(&train_feats, &train_labels, &test_feats, &test_labels, k)?;
        best = best.max(acc);
        reports.push(EvalReport {
            metric: "knn".into(),
            value: acc,
            k: Some(k),
            seed: cfg.seed,
            config_hash: hash.clone(),
        });
    }
    reports.push(EvalReport {
        metric: "knn_best".into(),
        value: best,
        k: None,
        seed: cfg.seed,
        config_hash: hash,
    });
    append_reports(ckpt_path, &reports)?;
    Ok(reports)
}

// ---- visualization ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct VizPaths {
    pub input: PathBuf,
    pub heatmap: PathBuf,
    pub masked: PathBuf,
}

/// Min-max to [0, 1]; a constant field maps to mid-gray.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }).collect()
}

/// Write the Fig.-2-style tuple for one image: the input, the predicted
/// per-patch loss as a min-max normalized gray heatmap, and the image with
/// the end-of-schedule mask blacked out.
pub fn cmd_visualize(ckpt_path: &Path, image_path: &Path, out_prefix: &Path) -> Result<VizPaths> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let (cfg, pair) = pair_from_checkpoint(&ckpt)?;
    let g = cfg.geometry();
    if g.frames != 1 {
        return Err(HpmError::Contract("visualization handles single-frame runs only".into()));
    }
    let img = read_pnm(image_path)?;
    if img.geometry.height != g.height
        || img.geometry.width != g.width
        || img.geometry.channels != g.channels
    {
        return Err(HpmError::Geometry(format!(
            "image is {}x{}x{}, run geometry wants {}x{}x{}",
            img.geometry.height,
            img.geometry.width,
            img.geometry.channels,
            g.height,
            g.width,
            g.channels
        )));
    }
    let visual = VisualTensor::new(g, img.data)?;
    let seq = patchify(&visual, &g)?;
    let enc_pos = sincos_embed(&g, pair.student.cfg.encoder.width)?;
    let pred_pos = sincos_embed(&g, pair.student.cfg.loss_predictor.width)?;
    let (field, _) = teacher_predict_with(&pair.teacher, &seq.tokens, &enc_pos, &pred_pos)?;
    let norm = minmax_normalize(&field.values);
    let mut heat = VisualTensor::zeros(crate::patchkit::PatchGeometry::image(
        g.height, g.width, 1, g.spatial_patch,
    ));
    let p = g.spatial_patch;
    for (tok, &value) in norm.iter().enumerate() {
        let pr = tok / g.grid_cols();
        let pc = tok % g.grid_cols();
        for dr in 0..p {
            for dc in 0..p {
                heat.set(0, pr * p + dr, pc * p + dc, 0, value);
            }
        }
    }

    // End-of-schedule mask (alpha at the final epoch) rendered as blacked
    // patches.
    let plan = cfg.mask_plan();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mask = generate_mask(&field, &plan, plan.total_epochs, &mut rng, g.token_frames())?;
    let mut masked_img = visual.clone();
    for tok in 0..g.num_patches() {
        if !mask.is_visible(tok) {
            let pr = tok / g.grid_cols();
            let pc = tok % g.grid_cols();
            for dr in 0..p {
                for dc in 0..p {
                    for ch in 0..g.channels {
                        masked_img.set(0, pr * p + dr, pc * p + dc, ch, 0.0);
                    }
                }
            }
        }
    }

    let stem = out_prefix.to_string_lossy();
    let ext = if g.channels == 1 { "pgm" } else { "ppm" };
    let paths = VizPaths {
        input: PathBuf::from(format!("{stem}_input.{ext}")),
        heatmap: PathBuf::from(format!("{stem}_pred.pgm")),
        masked: PathBuf::from(format!("{stem}_mask.{ext}")),
    };
    write_pnm(&visual, &paths.input)?;
    write_pnm(&heat, &paths.heatmap)?;
    write_pnm(&masked_img, &paths.masked)?;
    Ok(paths)
}

// ---- ablation sweep ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblateCell {
    pub policy: MaskPolicy,
    pub alpha0: f64,
    pub alpha_t: f64,
    pub label: String,
    /// Held-out reconstruction loss under shared random evaluation masks.
    pub final_l_rec: f64,
    /// Training reconstruction loss over the cell's own final epoch.
    pub final_train_l_rec: f64,
    pub probe_accuracy: f64,
}

/// Cross product of policies and (alpha0, alphaT) schedules at the base
/// config's scale, all with the base seed. Emits ablate.csv and one probe
/// accuracy + final held-out reconstruction loss per cell.
pub fn cmd_ablate(
    base: &RunConfig,
    policies: &[MaskPolicy],
    schedules: &[(f64, f64)],
) -> Result<Vec<AblateCell>> {
    if policies.is_empty() || schedules.is_empty() {
        return Err(HpmError::Contract("ablation needs at least one policy and schedule".into()));
    }
    let out_root = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&out_root)?;
    let mut cells = Vec::new();
    for &policy in policies {
        for &(alpha0, alpha_t) in schedules {
            let mut cfg = base.clone();
            cfg.policy = policy;
            cfg.alpha0 = alpha0;
            cfg.alpha_t = alpha_t;
            cfg.output_dir = out_root
                .join(format!("cell-{}-{alpha0}-{alpha_t}", policy.as_str()))
                .to_string_lossy()
                .into_owned();
            let outcome = cmd_pretrain(&cfg, None)?;
            let probe = cmd_probe(&outcome.final_checkpoint, &outcome.train_pack, SubsetRule::All)?;
            cells.push(AblateCell {
                policy,
                alpha0,
                alpha_t,
                label: cfg.mask_plan().schedule_label().to_string(),
                final_l_rec: outcome.final_heldout_l_rec,
                final_train_l_rec: outcome.final_train_l_rec,
                probe_accuracy: probe.value,
            });
        }
    }
    let mut csv =
        String::from("policy,schedule,alpha0,alphaT,final_l_rec,final_train_l_rec,probe_accuracy\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.policy.as_str(),
            c.label,
            c.alpha0,
            c.alpha_t,
            c.final_l_rec,
            c.final_train_l_rec,
            c.probe_accuracy
        ));
    }
    fs::write(out_root.join("ablate.csv"), csv)?;
    Ok(cells)
}

// ---- gradient self-test -----------------------------------------------------

/// FD suite over every differentiable primitive plus one full train step
/// at the config's scale. The train-step check freezes the mask and the
/// predictor's ground truth at the base point, which is exactly the
/// function the backward pass differentiates.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheck> {
    let mut gc = standard_primitive_suite(cfg.seed, 20);

    let setup = cfg.train_setup()?;
    let params = init_params(&cfg.model_config(), cfg.seed)?;
    let trainer = Trainer::new(setup, params.clone(), cfg.adamw())?;
    let g = cfg.geometry();
    let spec = cfg.synth_spec();
    let samples = synth_dataset(&spec, &g, 2)?;
    let batch: Vec<PatchSequence> =
        samples.iter().map(|s| patchify(&s.visual, &g)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6AD);
    let prep = trainer.prepare(&batch, 1, &mut rng)?;
    let (_, analytic, truths) = trainer.loss_grads(&params, &batch, &prep, None)?;

    let base = params.flat();
    let mut probe = params.clone();
    let mut f = |x: &[f64]| {
        probe.set_flat(x);
        trainer
            .loss_value(&probe, &batch, &prep, Some(&truths))
            .expect("train-step loss evaluation failed")
    };
    let numeric = central_diff(&mut f, &base, crate::diffmath::gradcheck::FD_STEP);
    gc.record("train_step", max_rel_err(&analytic, &numeric));
    Ok(gc)
}
