//! Easy-to-hard mask generation driven by teacher-predicted losses.
//!
//! At epoch t a fraction alpha_t of the mask budget goes to the patches
//! with the highest predicted loss and the rest is drawn uniformly. Ties
//! are broken by a seeded random permutation applied before sorting, so a
//! strictly increasing transform of the predictions never changes the mask.

use crate::engine::losses::LossField;
use crate::error::{HpmError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    Random,
    Argmax,
    Argmin,
}

impl MaskPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskPolicy::Random => "random",
            MaskPolicy::Argmax => "argmax",
            MaskPolicy::Argmin => "argmin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskPolicy::Random),
            "argmax" => Ok(MaskPolicy::Argmax),
            "argmin" => Ok(MaskPolicy::Argmin),
            other => Err(HpmError::Config(format!("unknown mask policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPlan {
    /// Mask ratio gamma in (0, 1).
    pub gamma: f64,
    pub alpha0: f64,
    pub alpha_t: f64,
    pub total_epochs: usize,
    pub policy: MaskPolicy,
    /// For clips: run the whole selection independently per temporal slice.
    pub per_frame: bool,
}

impl MaskPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(HpmError::Config(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        for (name, a) in [("alpha0", self.alpha0), ("alphaT", self.alpha_t)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(HpmError::Config(format!("{name} {a} outside [0, 1]")));
            }
        }
        if self.total_epochs == 0 {
            return Err(HpmError::Config("total_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Schedule direction label used in ablation reports.
    pub fn schedule_label(&self) -> &'static str {
        if self.alpha0 < self.alpha_t {
            "easy-to-hard"
        } else if self.alpha0 > self.alpha_t {
            "hard-to-easy"
        } else {
            "constant"
        }
    }
}

/// Linear interpolation between alpha_0 and alpha_T; endpoints are exact.
pub fn alpha_at(plan: &MaskPlan, epoch: usize) -> Result<f64> {
    if epoch > plan.total_epochs {
        return Err(HpmError::Contract(format!(
            "epoch {epoch} outside [0, {}]",
            plan.total_epochs
        )));
    }
    let r = epoch as f64 / plan.total_epochs as f64;
    Ok(plan.alpha0 * (1.0 - r) + plan.alpha_t * r)
}

/// Binary patch mask: true means visible, false masked. The masked set is
/// the disjoint union of loss-selected `hard_ids` and uniform `random_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    bits: Vec<bool>,
    hard_ids: Vec<usize>,
    random_ids: Vec<usize>,
}

impl PatchMask {
    fn from_parts(n: usize, mut hard: Vec<usize>, mut random: Vec<usize>) -> Self {
        let mut bits = vec![true; n];
        for &i in hard.iter().chain(random.iter()) {
            debug_assert!(bits[i], "patch {i} masked twice");
            bits[i] = false;
        }
        hard.sort_unstable();
        random.sort_unstable();
        PatchMask { bits, hard_ids: hard, random_ids: random }
    }

    /// Mask with an explicit masked set, all attributed to the random
    /// bucket. Used for fixed and externally chosen masks.
    pub fn from_masked_ids(n: usize, masked: &[usize]) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(HpmError::Index { id: i, len: n });
            }
            if seen[i] {
                return Err(HpmError::Contract(format!("patch {i} masked twice")));
            }
            seen[i] = true;
        }
        Ok(PatchMask::from_parts(n, Vec::new(), masked.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn hard_ids(&self) -> &[usize] {
        &self.hard_ids
    }

    pub fn random_ids(&self) -> &[usize] {
        &self.random_ids
    }

    pub fn visible_ids(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn masked_ids(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&v| !v).count()
    }
}

/// Round-half-up counts used by the selection rule.
fn budget(n: usize, gamma: f64) -> usize {
    (gamma * n as f64).round() as usize
}

fn hard_budget(k: usize, alpha: f64) -> usize {
    (alpha * k as f64).round() as usize
}

/// Select (hard, random) masked ids inside one id group.
fn select_group(
    ids: &[usize],
    field: &[f64],
    k: usize,
    h: usize,
    policy: MaskPolicy,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    debug_assert!(k <= ids.len() && h <= k);
    let hard: Vec<usize> = if h == 0 || policy == MaskPolicy::Random {
        Vec::new()
    } else {
        // Random permutation first, then a stable sort on the field value:
        // uniform tie-breaking, invariant under monotone transforms.
        let mut order: Vec<usize> = ids.to_vec();
        order.shuffle(rng);
        match policy {
            MaskPolicy::Argmax => {
                order.sort_by(|&a, &b| field[b].partial_cmp(&field[a]).unwrap())
            }
            MaskPolicy::Argmin => {
                order.sort_by(|&a, &b| field[a].partial_cmp(&field[b]).unwrap())
            }
            MaskPolicy::Random => unreachable!(),
        }
        order.truncate(h);
        order
    };
    let mut pool: Vec<usize> = ids.iter().copied().filter(|i| !hard.contains(i)).collect();
    let want = k - hard.len();
    // Partial Fisher-Yates draw without replacement.
    let mut random = Vec::with_capacity(want);
    for i in 0..want {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        random.push(pool[i]);
    }
    (hard, random)
}

/// Generate a mask for an N-patch field. `token_frames` is the number of
/// temporal slices; with `per_frame` set, selection runs independently per
/// slice with the budget computed per slice.
pub fn generate_mask(
    field: &LossField,
    plan: &MaskPlan,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    token_frames: usize,
) -> Result<PatchMask> {
    plan.validate()?;
    let n = field.values.len();
    let alpha = alpha_at(plan, epoch)?;
    let groups: Vec<Vec<usize>> = if plan.per_frame && token_frames > 1 {
        if !n.is_multiple_of(token_frames) {
            return Err(HpmError::Contract(format!(
                "field length {n} not divisible by {token_frames} frames"
            )));
        }
        let per = n / token_frames;
        (0..token_frames).map(|f| (f * per..(f + 1) * per).collect()).collect()
    } else {
        vec![(0..n).collect()]
    };

    let mut hard = Vec::new();
    let mut random = Vec::new();
    for ids in &groups {
        let k = budget(ids.len(), plan.gamma);
        if k == 0 || k >= ids.len() {
            return Err(HpmError::Config(format!(
                "mask budget {k} of {} patches leaves no visible or no masked patch",
                ids.len()
            )));
        }
        let h = hard_budget(k, alpha);
        let (gh, gr) = select_group(ids, &field.values, k, h, plan.policy, rng);
        hard.extend(gh);
        random.extend(gr);
    }
    Ok(PatchMask::from_parts(n, hard, random))
}
