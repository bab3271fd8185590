//! Frozen-feature evaluation: mean-pooled encoder features, a softmax
//! regression probe, cosine kNN, and the rank statistics used by the
//! predicted-loss analyses.

use crate::dataio::synth::SampleRecord;
use crate::diffmath::adamw::{AdamWConfig, OptimizerState};
use crate::diffmath::tape::Tape;
use crate::diffmath::Tensor;
use crate::engine::train::{teacher_predict_with, ModelPair};
use crate::error::{HpmError, Result};
use crate::patchkit::{patchify, sincos_embed, PatchGeometry};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which patch tokens feed the mean-pooled feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetRule {
    All,
    Top50PredLoss,
    Bottom50PredLoss,
    Random50,
}

impl SubsetRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetRule::All => "all",
            SubsetRule::Top50PredLoss => "top50_pred_loss",
            SubsetRule::Bottom50PredLoss => "bottom50_pred_loss",
            SubsetRule::Random50 => "random50",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SubsetRule::All),
            "top50_pred_loss" => Ok(SubsetRule::Top50PredLoss),
            "bottom50_pred_loss" => Ok(SubsetRule::Bottom50PredLoss),
            "random50" => Ok(SubsetRule::Random50),
            other => Err(HpmError::Config(format!("unknown subset rule '{other}'"))),
        }
    }
}

/// Mean of the student encoder's token outputs under full visibility,
/// restricted to the subset the rule selects. Loss-ranked subsets use the
/// teacher's predicted per-patch loss.
pub fn extract_features(
    pair: &ModelPair,
    geometry: &PatchGeometry,
    samples: &[SampleRecord],
    rule: SubsetRule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let enc_width = pair.student.cfg.encoder.width;
    let enc_pos = sincos_embed(geometry, enc_width)?;
    let pred_pos = sincos_embed(geometry, pair.student.cfg.loss_predictor.width)?;
    let n = geometry.num_patches();
    let all: Vec<usize> = (0..n).collect();
    let half = n / 2;
    if half == 0 && rule != SubsetRule::All {
        return Err(HpmError::Contract("subset rules need at least two patches".into()));
    }
    let mut feats = Vec::with_capacity(samples.len());
    for (idx, rec) in samples.iter().enumerate() {
        let seq = patchify(&rec.visual, geometry)?;
        let latents = crate::model::encode(&pair.student, &seq.tokens, &all, &enc_pos)?;
        let subset: Vec<usize> = match rule {
            SubsetRule::All => all.clone(),
            SubsetRule::Random50 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64) << 1);
                let mut ids = all.clone();
                ids.shuffle(&mut rng);
                ids.truncate(half);
                ids
            }
            SubsetRule::Top50PredLoss | SubsetRule::Bottom50PredLoss => {
                let (field, _) =
                    teacher_predict_with(&pair.teacher, &seq.tokens, &enc_pos, &pred_pos)?;
                let mut ids = all.clone();
                ids.sort_by(|&a, &b| field.values[b].partial_cmp(&field.values[a]).unwrap());
                if rule == SubsetRule::Bottom50PredLoss {
                    ids.reverse();
                }
                ids.truncate(half);
                ids
            }
        };
        let d = latents.cols();
        let mut feat = vec![0.0; d];
        for &id in &subset {
            for (f, &v) in feat.iter_mut().zip(&latents.data()[id * d..(id + 1) * d]) {
                *f += v;
            }
        }
        for v in &mut feat {
            *v /= subset.len() as f64;
        }
        feats.push(feat);
    }
    Ok(feats)
}

/// Softmax regression on frozen features, with per-dimension
/// standardization fitted on the training split (the affine-free norm
/// layer customary before linear probes).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub w: Tensor,
    pub b: Tensor,
    pub classes: usize,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
}

impl LinearProbe {
    fn normalize(&self, feat: &[f64]) -> Vec<f64> {
        feat.iter()
            .zip(self.feat_mean.iter().zip(&self.feat_std))
            .map(|(&f, (&m, &s))| (f - m) / s)
            .collect()
    }

    pub fn logits(&self, feat: &[f64]) -> Vec<f64> {
        let feat = self.normalize(feat);
        let c = self.classes;
        let mut out = self.b.data().to_vec();
        for (j, &f) in feat.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&self.w.data()[j * c..(j + 1) * c]) {
                *o += f * w;
            }
        }
        out
    }

    pub fn predict(&self, feat: &[f64]) -> usize {
        let logits = self.logits(feat);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, feats: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = feats
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Full-batch softmax regression trained with AdamW, no weight decay, no
/// augmentation.
pub fn train_linear_probe(
    feats: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearProbe> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(HpmError::Contract("probe needs matching features and labels".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(HpmError::Contract(format!("label {bad} out of range for {classes} classes")));
    }
    let n = feats.len();
    let d = feats[0].len();
    let mut feat_mean = vec![0.0; d];
    for f in feats {
        for j in 0..d {
            feat_mean[j] += f[j];
        }
    }
    for m in &mut feat_mean {
        *m /= n as f64;
    }
    let mut feat_var = vec![0.0; d];
    for f in feats {
        for j in 0..d {
            feat_var[j] += (f[j] - feat_mean[j]) * (f[j] - feat_mean[j]);
        }
    }
    let feat_std: Vec<f64> = feat_var.iter().map(|v| (v / n as f64).sqrt().max(1e-8)).collect();
    let x_flat: Vec<f64> = feats
        .iter()
        .flat_map(|f| {
            f.iter()
                .zip(feat_mean.iter().zip(&feat_std))
                .map(|(&x, (&m, &s))| (x - m) / s)
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut onehot = vec![0.0; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let w_init: Vec<f64> =
        (0..d * classes).map(|_| rand_distr::Distribution::sample(&dist, &mut rng)).collect();
    let mut w = Tensor::from_rows(d, classes, w_init)?.with_grad();
    let mut b = Tensor::zeros(vec![classes]).with_grad();
    let mut opt = OptimizerState::new(
        AdamWConfig { weight_decay: 0.0, ..Default::default() },
        &[d * classes, classes],
    );

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let x = tape.constant(vec![n, d], x_flat.clone());
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        let lin = tape.matmul(x, wv)?;
        let logits = tape.add_row(lin, bv)?;

        // Cross entropy via logsumexp with a detached per-row max.
        let logit_vals = tape.value(logits).to_vec();
        let rowmax: Vec<f64> = (0..n)
            .map(|i| {
                logit_vals[i * classes..(i + 1) * classes]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let m = tape.constant(vec![n, 1], rowmax);
        let ones_row = tape.constant(vec![1, classes], vec![1.0; classes]);
        let m_full = tape.matmul(m, ones_row)?;
        let shifted = tape.sub(logits, m_full)?;
        let e = tape.exp(shifted);
        let mean_e = tape.row_mean(e)?;
        let sum_e = tape.scale(mean_e, classes as f64);
        let ln_sum = tape.ln(sum_e);
        let lse = tape.add(ln_sum, m)?;

        let hot = tape.constant(vec![n, classes], onehot.clone());
        let picked_full = tape.mul(logits, hot)?;
        let picked_mean = tape.row_mean(picked_full)?;
        let picked = tape.scale(picked_mean, classes as f64);

        let per_row = tape.sub(lse, picked)?;
        let loss = tape.mean_all(per_row);
        tape.backward(loss)?;

        w.zero_grad();
        b.zero_grad();
        w.accumulate_grad(&tape.grad(wv))?;
        b.accumulate_grad(&tape.grad(bv))?;
        opt.step(&mut [&mut w, &mut b], lr)?;
    }
    Ok(LinearProbe { w, b, classes, feat_mean, feat_std })
}

/// Cosine-similarity kNN with similarity-weighted voting.
pub fn knn_accuracy(
    train_feats: &[Vec<f64>],
    train_labels: &[usize],
    test_feats: &[Vec<f64>],
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if train_feats.is_empty() {
        return Err(HpmError::Contract("kNN needs a non-empty train set".into()));
    }
    if k == 0 || k > train_feats.len() {
        return Err(HpmError::Contract(format!(
            "k = {k} outside [1, {}]",
            train_feats.len()
        )));
    }
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let classes = train_labels.iter().chain(test_labels).max().map_or(1, |&m| m + 1);
    let mut correct = 0usize;
    for (feat, &label) in test_feats.iter().zip(test_labels) {
        let mut sims: Vec<(f64, usize)> = train_feats
            .iter()
            .zip(train_labels)
            .map(|(tf, &tl)| (cosine(feat, tf), tl))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut votes = vec![0.0; classes];
        for &(sim, l) in sims.iter().take(k) {
            votes[l] += sim;
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Average ranks, ties averaged.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &id in &idx[i..=j] {
            out[id] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Probability that a positive outscores a negative (Mann-Whitney), ties
/// counted half.
pub fn ranking_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1.0;
            } else if p == q {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn probe_solves_linearly_separable_toy() {
        // Two classes split by the first coordinate.
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..40 {
            let label = i % 2;
            let x0 = if label == 0 { rng.gen_range(-2.0..-1.0) } else { rng.gen_range(1.0..2.0) };
            feats.push(vec![x0, rng.gen_range(-1.0..1.0)]);
            labels.push(label);
        }
        let probe = train_linear_probe(&feats, &labels, 2, 100, 0.05, 3).unwrap();
        assert_eq!(probe.accuracy(&feats, &labels), 1.0);
    }

    #[test]
    fn knn_identifies_duplicated_point() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let labels = vec![0, 1, 2];
        let acc = knn_accuracy(&train, &labels, &[vec![0.0, 1.0]], &[1], 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn knn_separates_gaussian_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut train = Vec::new();
        let mut train_labels = Vec::new();
        let mut test = Vec::new();
        let mut test_labels = Vec::new();
        for i in 0..200 {
            let label = i % 2;
            let center: f64 = if label == 0 { 3.0 } else { -3.0 };
            let p = vec![center + rng.gen_range(-1.0..1.0), 1.0 + rng.gen_range(-1.0..1.0)];
            if i < 160 {
                train.push(p);
                train_labels.push(label);
            } else {
                test.push(p);
                test_labels.push(label);
            }
        }
        let acc = knn_accuracy(&train, &train_labels, &test, &test_labels, 5).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn knn_contract_errors() {
        assert!(knn_accuracy(&[], &[], &[vec![1.0]], &[0], 1).is_err());
        let train = vec![vec![1.0]];
        assert!(knn_accuracy(&train, &[0], &[vec![1.0]], &[0], 2).is_err());
    }

    #[test]
    fn spearman_handles_order_and_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        // A tie in one list reduces but does not flip the correlation.
        let s = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!(s > 0.9 && s < 1.0, "{s}");
    }

    #[test]
    fn auc_counts_wins_and_ties() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(ranking_auc(&scores, &labels), 1.0);
        let flipped = [false, false, true, true];
        assert_eq!(ranking_auc(&scores, &flipped), 0.0);
        let tied = [0.5, 0.5];
        assert_eq!(ranking_auc(&tied, &[true, false]), 0.5);
    }
}
