//! Mini-batch training loops for the oracle, teacher and student.
//!
//! Per-clip gradients are computed in parallel on private tapes and summed
//! in batch order, so results do not depend on the thread count.

use glitr_substrate::{Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::VideoClip;
use crate::error::{GlitrError, Result};
use crate::losses::{LossBreakdown, LossWeights};
use crate::optim::{AdamW, CosineSchedule, GroupRates};
use crate::params::{GradBuffer, ParamStore};
use crate::student::{argmax, student_clip_grads, GliTrModel};
use crate::teacher::{teacher_clip_grads, teacher_forward, teacher_targets, OfflineOracle, TeacherModel, TeacherTargets};

pub trait Trainable<R: Real>: Sync {
    fn params(&self) -> &ParamStore<R>;
    fn params_mut(&mut self) -> &mut ParamStore<R>;
}

impl<R: Real> Trainable<R> for TeacherModel<R> {
    fn params(&self) -> &ParamStore<R> {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.net.params
    }
}

impl<R: Real> Trainable<R> for GliTrModel<R> {
    fn params(&self) -> &ParamStore<R> {
        &self.net.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.net.params
    }
}

impl<R: Real> Trainable<R> for OfflineOracle<R> {
    fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub rates: GroupRates,
    pub weight_decay: f64,
    pub locator_warmup_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: GroupRates,
}

pub const LOG_HEADER: &str = "epoch,step,cls,spatial,temporal,dist,total,lr_spatial,lr_classifier,lr_locator";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, self.step, l.cls, l.spatial, l.temporal, l.dist, l.total, self.lr.spatial, self.lr.classifier, self.lr.locator
        )
    }
}

/// Runs `opts.epochs` passes over `n_items` examples in seeded shuffled
/// order, one optimizer update per batch of averaged per-item gradients.
pub fn train_loop<R: Real, M: Trainable<R>>(
    model: &mut M,
    n_items: usize,
    opts: &TrainOptions,
    item_grads: impl Fn(&M, usize) -> Result<(LossBreakdown, GradBuffer<R>)> + Sync,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if n_items == 0 || opts.batch_size == 0 {
        return Err(GlitrError::Config("training needs a non-empty dataset and batch".into()));
    }
    let per_epoch = n_items.div_ceil(opts.batch_size);
    let schedule = CosineSchedule {
        base: opts.rates,
        total_steps: per_epoch * opts.epochs,
        locator_warmup: per_epoch * opts.locator_warmup_epochs,
    };
    let mut optim = AdamW::new(model.params(), opts.weight_decay);
    let mut rows = Vec::with_capacity(schedule.total_steps);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let m: &M = model;
            let results = batch
                .par_iter()
                .map(|&i| item_grads(m, i))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = GradBuffer::for_store(model.params());
            let mut loss = LossBreakdown::default();
            for (parts, g) in &results {
                grads.merge(g);
                loss.accumulate(parts);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(R::lit(inv));
            let loss = loss.scaled(inv);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(GlitrError::NonFiniteLoss(format!("epoch {epoch} step {step}: {loss:?}")));
            }
            let lr = schedule.rates(step);
            optim.step(model.params_mut(), &grads, &lr);
            let row = LogRow { epoch, step, loss, lr };
            on_step(&row);
            rows.push(row);
            step += 1;
        }
    }
    Ok(rows)
}

pub fn train_oracle(
    oracle: &mut OfflineOracle<f32>,
    clips: &[VideoClip],
    opts: &TrainOptions,
    on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    train_loop(oracle, clips.len(), opts, |m, i| m.clip_grads(&clips[i].frames, clips[i].label), on_step)
}

/// Clip logits from the oracle, needed when the distillation term is on.
pub fn oracle_logits(oracle: &OfflineOracle<f32>, clips: &[VideoClip]) -> Result<Vec<Tensor<f32>>> {
    clips.par_iter().map(|c| oracle.logits(&c.frames)).collect()
}

pub fn train_teacher(
    teacher: &mut TeacherModel<f32>,
    clips: &[VideoClip],
    oracle: Option<&[Tensor<f32>]>,
    weights: &LossWeights,
    opts: &TrainOptions,
    on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if weights.dist != 0.0 && oracle.is_none() {
        return Err(GlitrError::Missing("oracle for the distillation term".into()));
    }
    train_loop(
        teacher,
        clips.len(),
        opts,
        |m, i| teacher_clip_grads(m, &clips[i].frames, clips[i].label, oracle.map(|o| &o[i]), weights),
        on_step,
    )
}

pub fn precompute_targets(teacher: &TeacherModel<f32>, clips: &[VideoClip]) -> Result<Vec<TeacherTargets<f32>>> {
    clips.par_iter().map(|c| teacher_targets(teacher, &c.frames)).collect()
}

pub fn train_student(
    student: &mut GliTrModel<f32>,
    clips: &[VideoClip],
    targets: &[TeacherTargets<f32>],
    weights: &LossWeights,
    opts: &TrainOptions,
    on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    if targets.len() != clips.len() {
        return Err(GlitrError::Missing(format!(
            "teacher targets: {} for {} clips",
            targets.len(),
            clips.len()
        )));
    }
    train_loop(
        student,
        clips.len(),
        opts,
        |m, i| student_clip_grads(m, &clips[i].frames, clips[i].label, Some(&targets[i]), weights),
        on_step,
    )
}

/// Per-step accuracy of the teacher on full frames.
pub fn teacher_accuracy(teacher: &TeacherModel<f32>, clips: &[VideoClip]) -> Result<Vec<f64>> {
    let preds: Vec<Vec<usize>> = clips
        .par_iter()
        .map(|c| {
            let out = teacher_forward(teacher, &c.frames)?;
            let y = &out.logits.values;
            Ok((0..y.rows()).map(|t| argmax(y.row(t))).collect())
        })
        .collect::<Result<_>>()?;
    let t_len = preds.first().map_or(0, Vec::len);
    let n = clips.len().max(1) as f64;
    Ok((0..t_len)
        .map(|t| preds.iter().zip(clips).filter(|(p, c)| p[t] == c.label).count() as f64 / n)
        .collect())
}

pub fn oracle_accuracy(oracle: &OfflineOracle<f32>, clips: &[VideoClip]) -> Result<f64> {
    let logits = oracle_logits(oracle, clips)?;
    let correct = logits.iter().zip(clips).filter(|(l, c)| argmax(l.data()) == c.label).count();
    Ok(correct as f64 / clips.len().max(1) as f64)
}
