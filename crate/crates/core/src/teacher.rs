//! Full-frame online teacher, its two-step training objective, and the
//! offline clip-level oracle used for distillation.

use glitr_substrate::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, FeatureSeq, LocationSeq, LogitSeq, SpatialEncoder, TemporalEncoder, Builder, Linear};
use crate::error::{GlitrError, Result};
use crate::glimpse::{FrameView, GlimpseGeometry, GlimpseLocation, PixelSource};
use crate::losses::{self, LossBreakdown, LossWeights, Role, Terms};
use crate::network::Network;
use crate::params::{Binding, GradBuffer, ParamGroup, ParamId, ParamStore};

pub const FIRST_LOCATION: &str = "locator.first_location";

#[derive(Debug, Clone)]
pub struct TeacherModel<R: Real> {
    pub net: Network<R>,
    /// Pre-tanh first glimpse location, trained with the locator group.
    pub first_loc: ParamId,
}

impl<R: Real> TeacherModel<R> {
    pub fn new(cfg: &EncoderConfig, geometry: &GlimpseGeometry, seed: u64) -> Result<Self> {
        let mut net = Network::new(cfg, geometry, seed)?;
        let first_loc = net
            .params
            .add(FIRST_LOCATION, Tensor::zeros(&[2]), ParamGroup::Locator, false);
        Ok(Self { net, first_loc })
    }

    /// `tanh` of the stored pre-activation.
    pub fn first_location(&self) -> GlimpseLocation {
        let v = self.net.params.value(self.first_loc);
        GlimpseLocation {
            y: v.data()[0].to_f64_lossy().tanh(),
            x: v.data()[1].to_f64_lossy().tanh(),
        }
    }

    pub fn cast<S: Real>(&self) -> TeacherModel<S> {
        TeacherModel {
            net: self.net.cast(),
            first_loc: self.first_loc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput<R> {
    pub features: FeatureSeq<R>,
    pub logits: LogitSeq<R>,
    /// Predicted `l_2 .. l_{T+1}`; the last one is never used.
    pub locations: LocationSeq,
}

/// Detached teacher outputs a student is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets<R> {
    pub features: Tensor<R>,
    pub logits: Tensor<R>,
    /// Glimpse locations `l_1 .. l_T` chosen by the teacher.
    pub locations: Vec<GlimpseLocation>,
}

/// Full-frame forward pass with frozen weights.
pub fn teacher_forward<R: Real>(model: &TeacherModel<R>, frames: &Tensor<R>) -> Result<TeacherOutput<R>> {
    let net = &model.net;
    let mut tape = Tape::new();
    let mut p = Binding::frozen(&net.params);
    let f = net.frame_features(&mut tape, &mut p, frames)?;
    let y = net.encoders.classifier.forward(&mut tape, &mut p, f)?;
    let l = net.encoders.locator.forward(&mut tape, &mut p, f)?;
    Ok(TeacherOutput {
        features: FeatureSeq {
            values: tape.value(f).clone(),
        },
        logits: LogitSeq {
            values: tape.value(y).clone(),
        },
        locations: LocationSeq::from_tensor(tape.value(l)),
    })
}

pub fn teacher_targets<R: Real>(model: &TeacherModel<R>, frames: &Tensor<R>) -> Result<TeacherTargets<R>> {
    let out = teacher_forward(model, frames)?;
    let t = out.locations.values.len();
    let mut locations = Vec::with_capacity(t);
    locations.push(model.first_location());
    locations.extend_from_slice(&out.locations.values[..t - 1]);
    Ok(TeacherTargets {
        features: out.features.values,
        logits: out.logits.values,
        locations,
    })
}

/// One clip's training graph, kept alive so callers can inspect routing.
pub struct TeacherGraph<'s, R: Real> {
    pub tape: Tape<R>,
    pub binding: Binding<'s, R>,
    pub terms: Terms,
    /// Step 1: `[T, d]` frame features, `[T, K]` logits, `[T, 2]` next locations.
    pub features: Var,
    pub logits: Var,
    pub locations: Var,
    /// Step 2 glimpse features and logits through the frozen copies.
    pub glimpse_features: Option<Var>,
    pub glimpse_logits: Option<Var>,
    pub first_location: Option<Var>,
}

/// Records both steps for one clip.
///
/// Step 1 runs trainable `T_f` and `T_c` on full frames and `T_l` on
/// detached features. Step 2 samples glimpses at `[tanh(l_1), l_2 .. l_T]`
/// and runs frozen copies of `T_f` and `T_c`, so the consistency terms can
/// only move `T_l` and `l_1`.
pub fn teacher_graph<'s, R: Real>(
    model: &'s TeacherModel<R>,
    frames: &Tensor<R>,
    label: usize,
    oracle_logits: Option<&Tensor<R>>,
    weights: &LossWeights,
) -> Result<TeacherGraph<'s, R>> {
    let net = &model.net;
    let enc = &net.encoders;
    let t_len = net.check_frames(frames)?;
    let mut tape = Tape::new();
    let mut p = Binding::trainable(&net.params);

    let f = net.frame_features(&mut tape, &mut p, frames)?;
    let y = enc.classifier.forward(&mut tape, &mut p, f)?;
    let f_detached = tape.detach(f);
    let locs = enc.locator.forward(&mut tape, &mut p, f_detached)?;

    let mut terms = Terms {
        cls: losses::weighted(&mut tape, weights.cls, |t| losses::cls_loss(t, y, label))?,
        ..Terms::default()
    };
    terms.dist = losses::weighted(&mut tape, weights.dist, |t| {
        let oracle = oracle_logits.ok_or_else(|| GlitrError::Missing("oracle logits for the distillation term".into()))?;
        let last = t.row(y, t_len - 1);
        losses::distillation_loss(t, last, oracle)
    })?;

    let mut graph_glimpse = (None, None, None);
    if weights.spatial != 0.0 || weights.temporal != 0.0 {
        let pre = p.var(&mut tape, model.first_loc);
        let l1 = tape.tanh(pre);
        let mut centers = vec![l1];
        for r in 0..t_len - 1 {
            let row = tape.row(locs, r);
            centers.push(tape.reshape(row, &[2]));
        }
        let views = (0..t_len)
            .map(|t| FrameView::of_clip(frames, t))
            .collect::<Result<Vec<_>>>()?;
        let sources: Vec<&dyn PixelSource<R>> = views.iter().map(|v| v as &dyn PixelSource<R>).collect();
        let mut frozen = Binding::frozen(&net.params);
        let fh = net.glimpse_features(&mut tape, &mut frozen, &sources, &centers)?;
        let yh = enc.classifier.forward(&mut tape, &mut frozen, fh)?;
        let f_target = tape.value(f).clone();
        let y_target = tape.value(y).clone();
        terms.spatial = losses::weighted(&mut tape, weights.spatial, |t| losses::spatial_consistency(t, fh, &f_target))?;
        terms.temporal = losses::weighted(&mut tape, weights.temporal, |t| losses::temporal_consistency(t, yh, &y_target))?;
        graph_glimpse = (Some(fh), Some(yh), Some(pre));
    }

    Ok(TeacherGraph {
        tape,
        binding: p,
        terms,
        features: f,
        logits: y,
        locations: locs,
        glimpse_features: graph_glimpse.0,
        glimpse_logits: graph_glimpse.1,
        first_location: graph_glimpse.2,
    })
}

/// Loss breakdown and parameter gradients of one clip.
pub fn teacher_clip_grads<R: Real>(
    model: &TeacherModel<R>,
    frames: &Tensor<R>,
    label: usize,
    oracle_logits: Option<&Tensor<R>>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, GradBuffer<R>)> {
    let mut g = teacher_graph(model, frames, label, oracle_logits, weights)?;
    let (total, parts) = g.terms.finish(&mut g.tape, Role::Teacher)?;
    let grads = g.tape.backward(total)?;
    let mut buf = GradBuffer::for_store(&model.net.params);
    g.binding.accumulate(&grads, &mut buf);
    Ok((parts, buf))
}

/// Clip-level classifier over full frames with a bidirectional temporal
/// encoder and mean pooling over time.
#[derive(Debug, Clone)]
pub struct OfflineOracle<R: Real> {
    pub geometry: GlimpseGeometry,
    pub config: EncoderConfig,
    pub spatial: SpatialEncoder,
    pub temporal: TemporalEncoder,
    pub head: Linear,
    pub params: ParamStore<R>,
    net_pos: Tensor<R>,
}

impl<R: Real> OfflineOracle<R> {
    pub fn new(cfg: &EncoderConfig, geometry: &GlimpseGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
            group: ParamGroup::Spatial,
        };
        let spatial = SpatialEncoder::build(&mut b, "oracle.spatial", cfg, geometry.patch_dim());
        b.group = ParamGroup::Classifier;
        let temporal = TemporalEncoder::build(&mut b, "oracle.temporal", cfg, false);
        let head = Linear::build(&mut b, "oracle.head", cfg.embed_dim, cfg.num_classes);
        Ok(Self {
            geometry: *geometry,
            config: *cfg,
            spatial,
            temporal,
            head,
            params,
            net_pos: crate::glimpse::frame_position_embeddings(geometry, cfg.embed_dim)?,
        })
    }

    /// `[1, K]` clip logits.
    pub fn forward(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, frames: &Tensor<R>) -> Result<Var> {
        let s = frames.shape();
        let g = &self.geometry;
        if s.len() != 4 || s[1] != g.channels || s[2] != g.frame_h || s[3] != g.frame_w {
            return Err(GlitrError::Geometry(format!("frames shaped {s:?}")));
        }
        let t = s[0];
        let patches = tape.constant(crate::glimpse::patchify(frames, g.patch_p)?);
        let mut pos = Vec::with_capacity(t * self.net_pos.len());
        for _ in 0..t {
            pos.extend_from_slice(self.net_pos.data());
        }
        let pos = tape.constant(Tensor::new(vec![t * self.net_pos.rows(), self.config.embed_dim], pos)?);
        let f = self.spatial.forward(tape, p, patches, pos, t)?;
        let h = self.temporal.forward(tape, p, f)?;
        let avg = tape.constant(Tensor::full(&[1, t], R::lit(1.0 / t as f64)));
        let pooled = tape.matmul(avg, h);
        Ok(self.head.forward(tape, p, pooled))
    }

    /// Detached `[K]` logits for one clip.
    pub fn logits(&self, frames: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let mut p = Binding::frozen(&self.params);
        let y = self.forward(&mut tape, &mut p, frames)?;
        Ok(tape.value(y).reshape(&[self.config.num_classes])?)
    }

    pub fn clip_grads(&self, frames: &Tensor<R>, label: usize) -> Result<(LossBreakdown, GradBuffer<R>)> {
        let mut tape = Tape::new();
        let mut p = Binding::trainable(&self.params);
        let y = self.forward(&mut tape, &mut p, frames)?;
        let terms = Terms {
            cls: Some(losses::cls_loss(&mut tape, y, label)?),
            ..Terms::default()
        };
        let (total, parts) = terms.finish(&mut tape, Role::Student)?;
        let grads = tape.backward(total)?;
        let mut buf = GradBuffer::for_store(&self.params);
        p.accumulate(&grads, &mut buf);
        Ok((parts, buf))
    }
}
