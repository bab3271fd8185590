//! Momentum update of the teacher: every teacher tensor moves to
//! m * teacher + (1 - m) * student, covering encoder, reconstructor, and
//! loss predictor alike.

use crate::error::{HpmError, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub momentum: f64,
}

impl EmaConfig {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(HpmError::Config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(EmaConfig { momentum })
    }
}

pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, cfg: &EmaConfig) -> Result<()> {
    let m = cfg.momentum;
    let student_named = student.named_tensors();
    for ((t_name, t), (s_name, s)) in teacher.named_tensors_mut().iter_mut().zip(&student_named) {
        if t_name != s_name || t.shape() != s.shape() {
            return Err(HpmError::Contract(format!(
                "teacher/student mismatch: {t_name} {:?} vs {s_name} {:?}",
                t.shape(),
                s.shape()
            )));
        }
        if m == 1.0 {
            continue;
        }
        // Gap form of m*t + (1-m)*s: a teacher sitting at the student is an
        // exact fixed point.
        let sv = s.data();
        for (tv, &svv) in t.data_mut().iter_mut().zip(sv) {
            *tv = svv + m * (*tv - svv);
        }
    }
    Ok(())
}
