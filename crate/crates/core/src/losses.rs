//! Loss terms with their analytic gradients, and scheduled loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    LinearRamp,
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub kind: ScheduleKind,
    pub start_value: f64,
    #[serde(default)]
    pub end_value: f64,
    #[serde(default)]
    pub ramp_start_epoch: usize,
    #[serde(default)]
    pub ramp_end_epoch: usize,
}

impl WeightSchedule {
    pub fn constant(v: f64) -> Self {
        WeightSchedule {
            kind: ScheduleKind::Constant,
            start_value: v,
            end_value: v,
            ramp_start_epoch: 0,
            ramp_end_epoch: 0,
        }
    }

    pub fn ramp(from: f64, to: f64, start: usize, end: usize) -> Self {
        WeightSchedule {
            kind: if to >= from {
                ScheduleKind::LinearRamp
            } else {
                ScheduleKind::LinearDecay
            },
            start_value: from,
            end_value: to,
            ramp_start_epoch: start,
            ramp_end_epoch: end,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.kind != ScheduleKind::Constant && self.ramp_end_epoch < self.ramp_start_epoch {
            return Err(Error::config(
                format!("{field}.ramp_end_epoch"),
                format!(
                    "{} is before ramp_start_epoch {}",
                    self.ramp_end_epoch, self.ramp_start_epoch
                ),
            ));
        }
        if !(self.start_value >= 0.0) || !(self.end_value >= 0.0) {
            return Err(Error::config(field, "weights must be non-negative"));
        }
        Ok(())
    }

    /// Piecewise-linear value; constant before and after the ramp.
    pub fn value(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.start_value,
            ScheduleKind::LinearRamp | ScheduleKind::LinearDecay => {
                if epoch <= self.ramp_start_epoch {
                    if epoch == self.ramp_start_epoch && self.ramp_end_epoch == self.ramp_start_epoch {
                        self.end_value
                    } else {
                        self.start_value
                    }
                } else if epoch >= self.ramp_end_epoch {
                    self.end_value
                } else {
                    let t = (epoch - self.ramp_start_epoch) as f64
                        / (self.ramp_end_epoch - self.ramp_start_epoch) as f64;
                    self.start_value + t * (self.end_value - self.start_value)
                }
            }
        }
    }
}

pub fn schedule_value(schedule: &WeightSchedule, epoch: usize) -> Result<f64> {
    schedule.validate("schedule")?;
    Ok(schedule.value(epoch))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_p: WeightSchedule,
    pub lambda_a: WeightSchedule,
    pub lambda_c: WeightSchedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: WeightSchedule::constant(10.0),
            lambda_a: WeightSchedule::constant(0.005),
            lambda_c: WeightSchedule::ramp(0.0, 20.0, 0, 50),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        self.lambda_p.validate("weights.lambda_p")?;
        self.lambda_a.validate("weights.lambda_a")?;
        self.lambda_c.validate("weights.lambda_c")
    }

    pub fn at(&self, epoch: usize) -> (f64, f64, f64) {
        (
            self.lambda_p.value(epoch),
            self.lambda_a.value(epoch),
            self.lambda_c.value(epoch),
        )
    }
}

/// A loss value with the gradient w.r.t. each prediction tensor.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<Tensor>,
    /// Set when nothing contributed (fully masked input); gradients are zero.
    pub empty: bool,
}

impl LossGrad {
    fn add(mut self, other: LossGrad) -> LossGrad {
        self.value += other.value;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        self.empty &= other.empty;
        self
    }
}

/// Masked heatmap MSE averaged over cells, unmasked channels, stacks and
/// batch. `mask[n][k]` selects channel `k` of sample `n`.
pub fn pose_loss(pred: &[Tensor], target: &Tensor, mask: &[Vec<bool>]) -> Result<LossGrad> {
    let shape = target.shape;
    let [n, k, h, w] = shape;
    if pred.is_empty() || pred.iter().any(|p| p.shape != shape) {
        return Err(Error::Shape("pose loss predictions must match the target".into()));
    }
    if mask.len() != n || mask.iter().any(|m| m.len() != k) {
        return Err(Error::Shape(format!("mask must be {n} x {k}")));
    }
    let active = mask.iter().flatten().filter(|&&m| m).count();
    let mut grads: Vec<Tensor> = pred.iter().map(|p| Tensor::zeros(p.shape)).collect();
    if active == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grads,
            empty: true,
        });
    }
    let cells = h * w;
    let denom = (pred.len() * active * cells) as f64;
    let mut value = 0.0;
    for (p, g) in pred.iter().zip(grads.iter_mut()) {
        for (ni, row) in mask.iter().enumerate() {
            for (ki, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                let off = (ni * k + ki) * cells;
                let (ps, ts) = (&p.data[off..off + cells], &target.data[off..off + cells]);
                let gs = &mut g.data[off..off + cells];
                for i in 0..cells {
                    let d = ps[i] - ts[i];
                    value += d * d;
                    gs[i] = 2.0 * d / denom;
                }
            }
        }
    }
    Ok(LossGrad {
        value: value / denom,
        grads,
        empty: false,
    })
}

/// Labeled MSE plus pseudo-labeled MSE for one student. The pseudo targets
/// must come from the other pair's teacher.
pub fn student_pose_loss(
    pred: &[Tensor],
    labeled_target: &Tensor,
    labeled_mask: &[Vec<bool>],
    pseudo_target: &Tensor,
    pseudo_mask: &[Vec<bool>],
) -> Result<LossGrad> {
    let labeled = pose_loss(pred, labeled_target, labeled_mask)?;
    let pseudo = pose_loss(pred, pseudo_target, pseudo_mask)?;
    Ok(labeled.add(pseudo))
}

/// Sum over pairs of the MSE between student and teacher final-stack
/// outputs. Gradients are returned for the students only.
pub fn consistency_loss(student_preds: &[&Tensor], teacher_preds: &[&Tensor]) -> Result<LossGrad> {
    if student_preds.len() != teacher_preds.len() {
        return Err(Error::Shape("one teacher per student".into()));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(student_preds.len());
    for (s, t) in student_preds.iter().zip(teacher_preds) {
        if s.shape != t.shape {
            return Err(Error::Shape(format!("student {:?} vs teacher {:?}", s.shape, t.shape)));
        }
        let denom = s.data.len() as f64;
        let mut g = Tensor::zeros(s.shape);
        let mut v = 0.0;
        for ((gi, a), b) in g.data.iter_mut().zip(&s.data).zip(&t.data) {
            let d = a - b;
            v += d * d;
            *gi = 2.0 * d / denom;
        }
        value += v / denom;
        grads.push(g);
    }
    Ok(LossGrad {
        value,
        grads,
        empty: student_preds.is_empty(),
    })
}

#[derive(Clone, Debug)]
pub struct AdversarialLoss {
    pub value: f64,
    pub grad1: Vec<f64>,
    pub grad2: Vec<f64>,
    pub degenerate: bool,
}

/// Cosine similarity of two flattened parameter vectors, with gradients
/// for both. Minimizing it pushes the vectors apart in angle.
pub fn parameter_adversarial_loss(
    theta1: &ModelParameters,
    theta2: &ModelParameters,
) -> Result<AdversarialLoss> {
    let (a, b) = (theta1.as_slice(), theta2.as_slice());
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "parameter vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(AdversarialLoss {
            value: 0.0,
            grad1: vec![0.0; a.len()],
            grad2: vec![0.0; b.len()],
            degenerate: true,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let grad1 = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let grad2 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    Ok(AdversarialLoss {
        value: cos,
        grad1,
        grad2,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pose_s1: f64,
    pub pose_s2: f64,
    pub adversarial: f64,
    pub consistency: f64,
}

/// Weighted objective at `epoch`. Terms with a zero weight are left out
/// entirely.
pub fn total_loss(components: &LossComponents, weights: &LossWeights, epoch: usize) -> Result<f64> {
    let named = [
        ("pose_s1", components.pose_s1),
        ("pose_s2", components.pose_s2),
        ("adversarial", components.adversarial),
        ("consistency", components.consistency),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: name.to_string(),
            epoch,
        });
    }
    let (lp, la, lc) = weights.at(epoch);
    let mut total = lp * (components.pose_s1 + components.pose_s2);
    if la != 0.0 {
        total += la * components.adversarial;
    }
    if lc != 0.0 {
        total += lc * components.consistency;
    }
    Ok(total)
}
