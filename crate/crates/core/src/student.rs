//! The glimpse-only student: step-wise inference, full rollouts and the
//! consistency-supervised training graph.

use glitr_substrate::{softmax_rows, Real, Tape, Tensor, Var};

use crate::encoders::EncoderConfig;
use crate::error::{GlitrError, Result};
use crate::glimpse::{bilinear_sample, make_sampling_grid, FrameView, GlimpseGeometry, GlimpseLocation, PixelSource};
use crate::losses::{self, LossBreakdown, LossWeights, Role, Terms};
use crate::network::Network;
use crate::params::{Binding, GradBuffer};
use crate::teacher::{TeacherModel, TeacherTargets, FIRST_LOCATION};

#[derive(Debug, Clone)]
pub struct GliTrModel<R: Real> {
    pub net: Network<R>,
    /// Predefined first glimpse location.
    pub first_location: GlimpseLocation,
}

impl<R: Real> GliTrModel<R> {
    pub fn new(cfg: &EncoderConfig, geometry: &GlimpseGeometry, seed: u64) -> Result<Self> {
        Ok(Self {
            net: Network::new(cfg, geometry, seed)?,
            first_location: GlimpseLocation::CENTER,
        })
    }

    /// Copies all teacher weights; the teacher's learned first location is
    /// kept but frozen and unused.
    pub fn from_teacher(teacher: &TeacherModel<R>) -> Self {
        let mut net = teacher.net.clone();
        if let Some(id) = net.params.find(FIRST_LOCATION) {
            net.params.set_trainable(id, false);
        }
        Self {
            net,
            first_location: GlimpseLocation::CENTER,
        }
    }

    pub fn cast<S: Real>(&self) -> GliTrModel<S> {
        GliTrModel {
            net: self.net.cast(),
            first_location: self.first_location,
        }
    }
}

/// Features seen so far in an online episode.
#[derive(Debug, Clone, Default)]
pub struct GliTrState<R> {
    features: Vec<R>,
    steps: usize,
}

impl<R: Real> GliTrState<R> {
    pub fn new() -> Self {
        Self {
            features: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<R> {
    pub glimpse: Tensor<R>,
    pub feature: Tensor<R>,
    pub logits: Tensor<R>,
    pub next_location: GlimpseLocation,
}

/// One online step: read the glimpse at `loc`, encode it, append the
/// feature and predict the class and the next location from all features so far.
pub fn glitr_step<R: Real>(
    model: &GliTrModel<R>,
    state: &mut GliTrState<R>,
    frame: &dyn PixelSource<R>,
    loc: GlimpseLocation,
) -> Result<StepOutput<R>> {
    let net = &model.net;
    let geom = &net.geometry;
    let cfg = net.config();
    if frame.dims() != (geom.channels, geom.frame_h, geom.frame_w) {
        return Err(GlitrError::Geometry(format!("frame dims {:?} do not match {geom:?}", frame.dims())));
    }
    if state.steps >= cfg.max_t {
        return Err(GlitrError::SequenceTooLong {
            len: state.steps + 1,
            max: cfg.max_t,
        });
    }
    let d = cfg.embed_dim;
    let mut tape = Tape::new();
    let mut p = Binding::frozen(&net.params);
    let center = tape.constant(loc.to_tensor());
    let f = net.glimpse_features(&mut tape, &mut p, &[frame], &[center])?;
    let feature = tape.value(f).reshape(&[d])?;
    state.features.extend_from_slice(feature.data());
    state.steps += 1;
    let t = state.steps;
    let all = tape.constant(Tensor::new(vec![t, d], state.features.clone())?);
    let y = net.encoders.classifier.forward(&mut tape, &mut p, all)?;
    let l = net.encoders.locator.forward(&mut tape, &mut p, all)?;
    let logits = Tensor::from_vec(tape.value(y).row(t - 1).to_vec());
    let next_location = GlimpseLocation::from_values(tape.value(l).row(t - 1));
    let glimpse = bilinear_sample(frame, &make_sampling_grid(loc, geom));
    Ok(StepOutput {
        glimpse,
        feature,
        logits,
        next_location,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace<R> {
    pub glimpses: Vec<Tensor<R>>,
    /// Locations actually sampled, `l_1 .. l_t`.
    pub locations: Vec<GlimpseLocation>,
    /// The model's own proposals `l_2 .. l_{t+1}`.
    pub proposals: Vec<GlimpseLocation>,
    /// `[t, d]`.
    pub features: Tensor<R>,
    /// `[t, K]`.
    pub logits: Tensor<R>,
}

impl<R: Real> RolloutTrace<R> {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Argmax class at each step.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.logits.rows()).map(|t| argmax(self.logits.row(t))).collect()
    }

    /// Maximum softmax probability at each step.
    pub fn confidences(&self) -> Result<Vec<f64>> {
        let p = softmax_rows(&self.logits)?;
        Ok((0..p.rows())
            .map(|t| p.row(t).iter().fold(0.0f64, |m, &v| m.max(v.to_f64_lossy())))
            .collect())
    }
}

pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the online loop over `frames`. `choose(t, proposal)` picks the
/// location for step `t` (1-based) given the model's proposal (`l_hat_1` at
/// `t = 1`); `stop(logits)` may end the episode early.
pub fn rollout_with<R: Real>(
    model: &GliTrModel<R>,
    frames: &[&dyn PixelSource<R>],
    mut choose: impl FnMut(usize, GlimpseLocation) -> Result<GlimpseLocation>,
    mut stop: impl FnMut(&Tensor<R>) -> Result<bool>,
) -> Result<RolloutTrace<R>> {
    let mut state = GliTrState::new();
    let mut trace = RolloutTrace {
        glimpses: Vec::new(),
        locations: Vec::new(),
        proposals: Vec::new(),
        features: Tensor::zeros(&[0, model.net.config().embed_dim]),
        logits: Tensor::zeros(&[0, model.net.config().num_classes]),
    };
    let mut feats = Vec::new();
    let mut logits = Vec::new();
    let mut proposal = model.first_location;
    for (i, &frame) in frames.iter().enumerate() {
        let loc = choose(i + 1, proposal)?;
        let out = glitr_step(model, &mut state, frame, loc)?;
        feats.extend_from_slice(out.feature.data());
        logits.extend_from_slice(out.logits.data());
        trace.glimpses.push(out.glimpse);
        trace.locations.push(loc);
        trace.proposals.push(out.next_location);
        proposal = out.next_location;
        if stop(&out.logits)? {
            break;
        }
    }
    let t = trace.locations.len();
    trace.features = Tensor::new(vec![t, model.net.config().embed_dim], feats)?;
    trace.logits = Tensor::new(vec![t, model.net.config().num_classes], logits)?;
    Ok(trace)
}

pub fn frame_views<R: Real>(frames: &Tensor<R>) -> Result<Vec<FrameView<'_, R>>> {
    (0..frames.shape().first().copied().unwrap_or(0))
        .map(|t| FrameView::of_clip(frames, t))
        .collect()
}

/// Rollout following the model's own location proposals.
pub fn glitr_rollout<R: Real>(model: &GliTrModel<R>, frames: &Tensor<R>) -> Result<RolloutTrace<R>> {
    model.net.check_frames(frames)?;
    let views = frame_views(frames)?;
    let sources: Vec<&dyn PixelSource<R>> = views.iter().map(|v| v as &dyn PixelSource<R>).collect();
    rollout_with(model, &sources, |_, l| Ok(l), |_| Ok(false))
}

/// Differentiable episode for one clip.
pub struct StudentGraph<'s, R: Real> {
    pub tape: Tape<R>,
    pub binding: Binding<'s, R>,
    pub terms: Terms,
    /// `[T, d]` glimpse features and `[T, K]` logits.
    pub features: Var,
    pub logits: Var,
    /// `[2]` location variables `l_2 .. l_T`.
    pub locations: Vec<Var>,
}

/// Records the full student rollout with gradients flowing through the
/// sampler into predicted locations; `T_l` reads detached features.
pub fn student_graph<'s, R: Real>(
    model: &'s GliTrModel<R>,
    frames: &Tensor<R>,
    label: usize,
    targets: Option<&TeacherTargets<R>>,
    weights: &LossWeights,
) -> Result<StudentGraph<'s, R>> {
    let net = &model.net;
    let enc = &net.encoders;
    let t_len = net.check_frames(frames)?;
    let needs_targets = weights.spatial != 0.0 || weights.temporal != 0.0;
    if needs_targets && targets.is_none() {
        return Err(GlitrError::Missing("teacher targets for the consistency terms".into()));
    }
    let views = frame_views(frames)?;
    let mut tape = Tape::new();
    let mut p = Binding::trainable(&net.params);
    let mut loc = tape.constant(model.first_location.to_tensor());
    let mut feats = Vec::with_capacity(t_len);
    let mut detached = Vec::with_capacity(t_len);
    let mut locations = Vec::with_capacity(t_len.saturating_sub(1));
    for (t, view) in views.iter().enumerate() {
        let f = net.glimpse_features(&mut tape, &mut p, &[view as &dyn PixelSource<R>], &[loc])?;
        feats.push(f);
        detached.push(tape.detach(f));
        if t + 1 < t_len {
            let prefix = tape.concat_rows(&detached);
            let l = enc.locator.forward(&mut tape, &mut p, prefix)?;
            let row = tape.row(l, t);
            loc = tape.reshape(row, &[2]);
            locations.push(loc);
        }
    }
    let f = tape.concat_rows(&feats);
    let y = enc.classifier.forward(&mut tape, &mut p, f)?;
    let mut terms = Terms {
        cls: losses::weighted(&mut tape, weights.cls, |t| losses::cls_loss(t, y, label))?,
        ..Terms::default()
    };
    if let Some(tg) = targets {
        terms.spatial = losses::weighted(&mut tape, weights.spatial, |t| losses::spatial_consistency(t, f, &tg.features))?;
        terms.temporal = losses::weighted(&mut tape, weights.temporal, |t| losses::temporal_consistency(t, y, &tg.logits))?;
    }
    Ok(StudentGraph {
        tape,
        binding: p,
        terms,
        features: f,
        logits: y,
        locations,
    })
}

pub fn student_clip_grads<R: Real>(
    model: &GliTrModel<R>,
    frames: &Tensor<R>,
    label: usize,
    targets: Option<&TeacherTargets<R>>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, GradBuffer<R>)> {
    let mut g = student_graph(model, frames, label, targets, weights)?;
    let (total, parts) = g.terms.finish(&mut g.tape, Role::Student)?;
    let grads = g.tape.backward(total)?;
    let mut buf = GradBuffer::for_store(&model.net.params);
    g.binding.accumulate(&grads, &mut buf);
    Ok((parts, buf))
}
