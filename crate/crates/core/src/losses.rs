//! Training objectives: cross-entropy, spatial and temporal consistency and
//! distillation, summed without weights by default.

use glitr_substrate::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{GlitrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub dist: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.spatial, self.temporal, self.dist, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise sum, for averaging over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.spatial += other.spatial;
        self.temporal += other.temporal;
        self.dist += other.dist;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            cls: self.cls * s,
            spatial: self.spatial * s,
            temporal: self.temporal * s,
            dist: self.dist * s,
            total: self.total * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// Sum of the parts that belong to `role`; the distillation term only counts
/// for the teacher.
pub fn total_objective(parts: &LossBreakdown, role: Role) -> f64 {
    let s = parts.cls + parts.spatial + parts.temporal;
    match role {
        Role::Student => s,
        Role::Teacher => s + parts.dist,
    }
}

/// Multipliers on each term; a zero weight disables the term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub dist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            spatial: 1.0,
            temporal: 1.0,
            dist: 1.0,
        }
    }
}

impl LossWeights {
    /// Parses a comma list of enabled terms, e.g. `cls,spatial,temporal`.
    pub fn from_terms(list: &str) -> Result<Self> {
        let mut w = LossWeights {
            cls: 0.0,
            spatial: 0.0,
            temporal: 0.0,
            dist: 0.0,
        };
        for term in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match term {
                "cls" => w.cls = 1.0,
                "spatial" => w.spatial = 1.0,
                "temporal" => w.temporal = 1.0,
                "dist" => w.dist = 1.0,
                other => return Err(GlitrError::Config(format!("unknown loss term {other:?}"))),
            }
        }
        Ok(w)
    }

    pub fn terms(&self) -> String {
        let mut out = Vec::new();
        for (name, w) in [
            ("cls", self.cls),
            ("spatial", self.spatial),
            ("temporal", self.temporal),
            ("dist", self.dist),
        ] {
            if w != 0.0 {
                out.push(name);
            }
        }
        out.join(",")
    }
}

/// Mean over steps of `-log softmax(logits_t)[label]` for `[T, K]` logits.
pub fn cls_loss<R: Real>(tape: &mut Tape<R>, logits: Var, label: usize) -> Result<Var> {
    let v = tape.value(logits);
    let classes = v.last_dim();
    if label >= classes {
        return Err(GlitrError::Label { label, classes });
    }
    let labels = vec![label; v.rows()];
    Ok(tape.cross_entropy(logits, &labels)?)
}

/// Mean squared difference over all coordinates; the teacher side is a constant.
pub fn spatial_consistency<R: Real>(tape: &mut Tape<R>, student: Var, teacher: &Tensor<R>) -> Result<Var> {
    let t = tape.constant(teacher.clone());
    Ok(tape.mse(student, t)?)
}

/// Mean over steps of `KL(softmax(teacher_t) || softmax(student_t))`.
pub fn temporal_consistency<R: Real>(tape: &mut Tape<R>, student: Var, teacher: &Tensor<R>) -> Result<Var> {
    Ok(tape.kl_to_target(student, teacher)?)
}

/// `KL(softmax(oracle) || softmax(final))` for one `[K]` or `[1, K]` logit row.
pub fn distillation_loss<R: Real>(tape: &mut Tape<R>, final_logits: Var, oracle: &Tensor<R>) -> Result<Var> {
    let k = tape.value(final_logits).len();
    if oracle.len() != k {
        return Err(GlitrError::Substrate(glitr_substrate::SubstrateError::ShapeMismatch {
            op: "distillation_loss",
            lhs: tape.value(final_logits).shape().to_vec(),
            rhs: oracle.shape().to_vec(),
        }));
    }
    let row = tape.reshape(final_logits, &[1, k]);
    let target = oracle.reshape(&[1, k])?;
    Ok(tape.kl_to_target(row, &target)?)
}

/// Weighted terms collected during a forward pass.
#[derive(Debug, Default)]
pub struct Terms {
    pub cls: Option<Var>,
    pub spatial: Option<Var>,
    pub temporal: Option<Var>,
    pub dist: Option<Var>,
}

impl Terms {
    /// Sums the present terms on the tape and reads back the breakdown.
    pub fn finish<R: Real>(&self, tape: &mut Tape<R>, role: Role) -> Result<(Var, LossBreakdown)> {
        let read = |tape: &Tape<R>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64_lossy());
        let mut parts = LossBreakdown {
            cls: read(tape, self.cls),
            spatial: read(tape, self.spatial),
            temporal: read(tape, self.temporal),
            dist: read(tape, self.dist),
            total: 0.0,
        };
        parts.total = total_objective(&parts, role);
        let present: Vec<Var> = [self.cls, self.spatial, self.temporal, self.dist]
            .into_iter()
            .flatten()
            .collect();
        let Some((&first, rest)) = present.split_first() else {
            return Err(GlitrError::Config("no loss term enabled".into()));
        };
        let mut total = first;
        for &v in rest {
            total = tape.add(total, v);
        }
        if !parts.is_finite() {
            return Err(GlitrError::NonFiniteLoss(format!(
                "cls {} spatial {} temporal {} dist {}",
                parts.cls, parts.spatial, parts.temporal, parts.dist
            )));
        }
        Ok((total, parts))
    }
}

/// Applies a weight to a term: `None` when the weight is zero.
pub fn weighted<R: Real>(tape: &mut Tape<R>, weight: f64, build: impl FnOnce(&mut Tape<R>) -> Result<Var>) -> Result<Option<Var>> {
    if weight == 0.0 {
        return Ok(None);
    }
    let v = build(tape)?;
    Ok(Some(if weight == 1.0 { v } else { tape.scale(v, R::lit(weight)) }))
}

/// Plain-value helpers over constant inputs.
pub mod eval {
    use super::*;

    fn with_tape<R: Real>(f: impl FnOnce(&mut Tape<R>) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item().to_f64_lossy())
    }

    pub fn cls_loss<R: Real>(logits: &Tensor<R>, label: usize) -> Result<f64> {
        with_tape(|t| {
            let l = t.constant(logits.clone());
            super::cls_loss(t, l, label)
        })
    }

    pub fn spatial_consistency<R: Real>(student: &Tensor<R>, teacher: &Tensor<R>) -> Result<f64> {
        with_tape(|t| {
            let s = t.constant(student.clone());
            super::spatial_consistency(t, s, teacher)
        })
    }

    pub fn temporal_consistency<R: Real>(student: &Tensor<R>, teacher: &Tensor<R>) -> Result<f64> {
        with_tape(|t| {
            let s = t.constant(student.clone());
            super::temporal_consistency(t, s, teacher)
        })
    }

    pub fn distillation_loss<R: Real>(final_logits: &Tensor<R>, oracle: &Tensor<R>) -> Result<f64> {
        with_tape(|t| {
            let s = t.constant(final_logits.clone());
            super::distillation_loss(t, s, oracle)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_lists_round_trip() {
        let w = LossWeights::from_terms("cls, temporal").unwrap();
        assert_eq!((w.cls, w.spatial, w.temporal, w.dist), (1.0, 0.0, 1.0, 0.0));
        assert_eq!(w.terms(), "cls,temporal");
        assert!(LossWeights::from_terms("cls,bogus").is_err());
    }

    #[test]
    fn zero_weight_skips_the_term() {
        let mut tape = Tape::<f64>::new();
        let mut called = false;
        let v = weighted(&mut tape, 0.0, |_| {
            called = true;
            unreachable!()
        })
        .unwrap();
        assert!(v.is_none() && !called);
    }

    #[test]
    fn finish_requires_a_term() {
        let mut tape = Tape::<f64>::new();
        assert!(Terms::default().finish(&mut tape, Role::Student).is_err());
    }
}
