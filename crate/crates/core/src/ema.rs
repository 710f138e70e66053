use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PoseNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig { alpha: 0.999 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("ema.alpha", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// `teacher = alpha * teacher + (1 - alpha) * student` on trainable weights;
/// normalization running statistics are copied from the student.
pub fn ema_update(teacher: &mut PoseNetwork, student: &PoseNetwork, alpha: f64) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::Structure(
            "teacher and student configs differ".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("EMA alpha {alpha} outside [0, 1]")));
    }
    ema_blend(&mut teacher.params, &student.params, alpha);
    teacher.buffers.copy_from_slice(&student.buffers);
    Ok(())
}

/// The convex blend on raw vectors. The boundary values are exact.
pub fn ema_blend(teacher: &mut [f64], student: &[f64], alpha: f64) {
    if alpha == 1.0 {
        return;
    }
    if alpha == 0.0 {
        teacher.copy_from_slice(student);
        return;
    }
    // Written as t + (1 - alpha)(s - t) so that t == s stays bit-exact.
    let beta = 1.0 - alpha;
    for (t, s) in teacher.iter_mut().zip(student) {
        *t += beta * (s - *t);
    }
}
