//! Fixtures and the checks behind the acceptance criteria that need no
//! training. Each suite returns named checks so the acceptance binary can
//! report them and ordinary tests can assert them.
#![allow(dead_code)]

use glitr::encoders::EncoderConfig;
use glitr::glimpse::{
    grid_op, make_sampling_grid, sample_op, FrameSource, FrameView, GlimpseGeometry, GlimpseLocation, PixelSource,
};
use glitr::losses::{self, eval, LossWeights, Role};
use glitr::params::{GradBuffer, ParamGroup, ParamId, ParamStore};
use glitr::report::pixels_sensed;
use glitr::student::{glitr_rollout, student_clip_grads, student_graph, GliTrModel};
use glitr::teacher::{
    teacher_clip_grads, teacher_forward, teacher_graph, teacher_targets, TeacherModel, TeacherTargets,
};
use glitr_substrate::gradcheck::{grad_check_with, GradCheckOptions};
use glitr_substrate::{SubstrateError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ok,
            detail: detail.into(),
        }
    }
}

pub fn assert_all(checks: &[Check]) {
    let bad: Vec<String> = checks
        .iter()
        .filter(|c| !c.ok)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    assert!(!checks.is_empty());
    assert!(bad.is_empty(), "failed checks:\n{}", bad.join("\n"));
}

pub fn tiny_geometry() -> GlimpseGeometry {
    GlimpseGeometry {
        frame_h: 16,
        frame_w: 16,
        glimpse_g: 8,
        patch_p: 4,
        channels: 1,
    }
}

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        spatial_depth: 1,
        spatial_heads: 2,
        temporal_depth: 1,
        temporal_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        max_t: 4,
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_frames(rng: &mut ChaCha8Rng, t: usize, geom: &GlimpseGeometry) -> Tensor<f64> {
    random_tensor(rng, &[t, geom.channels, geom.frame_h, geom.frame_w], 0.0, 1.0)
}

/// Overwrites every parameter, including gains, biases and the teacher's
/// first location, so no gradient vanishes by initialization.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, random_tensor(rng, &shape, -scale, scale)).unwrap();
    }
}

pub fn random_teacher(seed: u64) -> TeacherModel<f64> {
    let mut m = TeacherModel::new(&tiny_config(), &tiny_geometry(), seed).unwrap();
    randomize(&mut m.net.params, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc), 0.5);
    m
}

pub fn random_student(seed: u64) -> GliTrModel<f64> {
    let mut m = GliTrModel::new(&tiny_config(), &tiny_geometry(), seed).unwrap();
    randomize(&mut m.net.params, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xdef), 0.5);
    m
}

fn to_substrate(e: glitr::GlitrError) -> SubstrateError {
    SubstrateError::InvalidArgument {
        op: "glitr",
        reason: e.to_string(),
    }
}

fn grad_case(
    name: &str,
    f: impl Fn(&mut Tape<f64>, Var) -> glitr_substrate::Result<Var>,
    x: &Tensor<f64>,
    tol: f64,
) -> Check {
    match grad_check_with(f, x, &GradCheckOptions::default()) {
        Ok(r) => Check::new(name, r.max_rel_error < tol, format!("max rel error {:.3e}", r.max_rel_error)),
        Err(e) => Check::new(name, false, e.to_string()),
    }
}

/// Normalized center whose grid sits at least `margin` pixels off the
/// integer lattice, keeping finite differences away from bilinear kinks.
pub fn non_aligned_center(rng: &mut ChaCha8Rng, geom: &GlimpseGeometry, margin: f64) -> GlimpseLocation {
    loop {
        let loc = GlimpseLocation::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)).unwrap();
        let (cy, cx) = geom.centroid(loc);
        let half = (geom.glimpse_g as f64 - 1.0) / 2.0;
        let off = |v: f64| {
            let f = (v - half).rem_euclid(1.0);
            f.min(1.0 - f)
        };
        if off(cy) >= margin && off(cx) >= margin {
            return loc;
        }
    }
}

/// Student objective with the locator reading `held` instead of the live
/// features, which is the function the stop-gradient differentiates.
fn objective_held(
    model: &GliTrModel<f64>,
    frames: &Tensor<f64>,
    label: usize,
    targets: &TeacherTargets<f64>,
    held: &Tensor<f64>,
) -> f64 {
    let net = &model.net;
    let mut tape = Tape::new();
    let mut p = glitr::params::Binding::frozen(&net.params);
    let mut loc = tape.constant(model.first_location.to_tensor());
    let mut feats = Vec::new();
    let t_len = frames.shape()[0];
    for t in 0..t_len {
        let view = FrameView::of_clip(frames, t).unwrap();
        let f = net.glimpse_features(&mut tape, &mut p, &[&view as &dyn PixelSource<f64>], &[loc]).unwrap();
        feats.push(f);
        if t + 1 < t_len {
            let rows: Vec<f64> = held.data()[..(t + 1) * held.last_dim()].to_vec();
            let prefix = tape.constant(Tensor::new(vec![t + 1, held.last_dim()], rows).unwrap());
            let l = net.encoders.locator.forward(&mut tape, &mut p, prefix).unwrap();
            let row = tape.row(l, t);
            loc = tape.reshape(row, &[2]);
        }
    }
    let f = tape.concat_rows(&feats);
    let y = net.encoders.classifier.forward(&mut tape, &mut p, f).unwrap();
    let fv = tape.value(f).clone();
    let yv = tape.value(y).clone();
    eval::cls_loss(&yv, label).unwrap()
        + eval::spatial_consistency(&fv, &targets.features).unwrap()
        + eval::temporal_consistency(&yv, &targets.logits).unwrap()
}

/// Analytic gradients of the sampler, every loss, and the full student
/// objective against central differences in f64.
pub fn gradient_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geom = tiny_geometry();
    let g = geom.glimpse_g;
    let mut out = Vec::new();

    let frame = random_tensor(&mut rng, &[1, geom.frame_h, geom.frame_w], 0.0, 1.0);
    let w = random_tensor(&mut rng, &[1, g, g], -1.0, 1.0);
    let center = non_aligned_center(&mut rng, &geom, 0.1);
    let grid = make_sampling_grid::<f64>(center, &geom).coords;
    out.push(grad_case(
        "sampler w.r.t. frame",
        |t, x| {
            let grid = t.constant(grid.clone());
            let s = sample_op(t, FrameSource::Var(x), grid).map_err(to_substrate)?;
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv);
            Ok(t.sum(p))
        },
        &frame,
        1e-4,
    ));
    let view = FrameView::new(frame.data(), 1, geom.frame_h, geom.frame_w).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let c = non_aligned_center(&mut rng, &geom, 0.1);
        let r = grad_check_with(
            |t, x| {
                let grid = grid_op(t, x, &geom);
                let s = sample_op(t, FrameSource::Pixels(&view as &dyn PixelSource<f64>), grid).map_err(to_substrate)?;
                let wv = t.constant(w.clone());
                let p = t.mul(s, wv);
                Ok(t.sum(p))
            },
            &c.to_tensor(),
            &GradCheckOptions::default(),
        );
        worst = worst.max(r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY));
    }
    out.push(Check::new("sampler w.r.t. center", worst < 1e-4, format!("max rel error {worst:.3e} over 8 centers")));

    let logits = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let target_logits = random_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    let feats = random_tensor(&mut rng, &[3, 7], -1.0, 1.0);
    let target_feats = random_tensor(&mut rng, &[3, 7], -1.0, 1.0);
    let oracle = random_tensor(&mut rng, &[5], -2.0, 2.0);
    let first = Tensor::from_vec(logits.row(0).to_vec());
    out.push(grad_case("cross-entropy w.r.t. logits", |t, x| losses::cls_loss(t, x, 2).map_err(to_substrate), &logits, 1e-4));
    out.push(grad_case(
        "feature MSE w.r.t. student features",
        |t, x| losses::spatial_consistency(t, x, &target_feats).map_err(to_substrate),
        &feats,
        1e-4,
    ));
    out.push(grad_case(
        "logit KL w.r.t. student logits",
        |t, x| losses::temporal_consistency(t, x, &target_logits).map_err(to_substrate),
        &logits,
        1e-4,
    ));
    out.push(grad_case(
        "distillation KL w.r.t. final logits",
        |t, x| losses::distillation_loss(t, x, &oracle).map_err(to_substrate),
        &first,
        1e-4,
    ));

    let model = random_student(21);
    let teacher = random_teacher(22);
    let frames = random_frames(&mut rng, 3, &geom);
    let targets = teacher_targets(&teacher, &frames).unwrap();
    let weights = LossWeights::from_terms("cls,spatial,temporal").unwrap();
    let (_, grads) = student_clip_grads(&model, &frames, 1, Some(&targets), &weights).unwrap();
    let base = student_graph(&model, &frames, 1, Some(&targets), &weights).unwrap();
    let held = base.tape.value(base.features).clone();
    let direct = objective_held(&model, &frames, 1, &targets, &held);
    let mut g = base;
    let (total, _) = g.terms.finish(&mut g.tape, Role::Student).unwrap();
    let recorded = g.tape.value(total).item();
    out.push(Check::new(
        "student objective oracle matches the recorded graph",
        (direct - recorded).abs() < 1e-12,
        format!("{direct} vs {recorded}"),
    ));
    for name in [
        "spatial.patch_embed.weight",
        "spatial.block0.q.weight",
        "classifier.block0.fc1.weight",
        "classifier.head.weight",
        "locator.block0.v.weight",
        "locator.head.weight",
    ] {
        let id = model.net.params.find(name).unwrap();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(model.net.params.value(id).shape()));
        let n = analytic.len();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in (0..n).step_by((n / 5).max(1)) {
            let probe = |delta: f64| {
                let mut m = model.clone();
                let mut v = m.net.params.value(id).clone();
                v.data_mut()[k] += delta;
                m.net.params.set_value(id, v).unwrap();
                objective_held(&m, &frames, 1, &targets, &held)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        out.push(Check::new(
            format!("student objective w.r.t. {name}"),
            worst < 1e-3,
            format!("max rel error {worst:.3e}"),
        ));
    }
    out
}

/// Online contract: later frames never change earlier outputs, and the
/// step-wise rollout matches the whole-sequence pass.
pub fn causality_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let geom = tiny_geometry();
    let t_len = tiny_config().max_t;
    let mut out = Vec::new();
    let mut student_ok = true;
    let mut teacher_ok = true;
    for trial in 0..3 {
        let student = random_student(100 + trial);
        let teacher = random_teacher(200 + trial);
        let frames = random_frames(&mut rng, t_len, &geom);
        let base = glitr_rollout(&student, &frames).unwrap();
        let tbase = teacher_forward(&teacher, &frames).unwrap();
        for t in 1..t_len {
            let mut changed = frames.clone();
            let per = geom.frame_len();
            for v in &mut changed.data_mut()[t * per..] {
                *v = rng.random_range(0.0..1.0);
            }
            let other = glitr_rollout(&student, &changed).unwrap();
            let prefix = t * tiny_config().num_classes;
            student_ok &= base.logits.data()[..prefix] == other.logits.data()[..prefix];
            student_ok &= base.proposals[..t] == other.proposals[..t];
            student_ok &= base.locations[..t] == other.locations[..t];
            let tother = teacher_forward(&teacher, &changed).unwrap();
            teacher_ok &= tbase.logits.values.data()[..prefix] == tother.logits.values.data()[..prefix];
            teacher_ok &= tbase.locations.values[..t] == tother.locations.values[..t];
        }
    }
    out.push(Check::new("student prefix unchanged by later frames", student_ok, "bit-identical logits and locations"));
    out.push(Check::new("teacher prefix unchanged by later frames", teacher_ok, "bit-identical logits and locations"));

    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    let weights = LossWeights::from_terms("cls").unwrap();
    for trial in 0..3 {
        let student = random_student(300 + trial);
        let frames = random_frames(&mut rng, t_len, &geom);
        let trace = glitr_rollout(&student, &frames).unwrap();
        let g = student_graph(&student, &frames, 0, None, &weights).unwrap();
        worst64 = worst64.max(max_diff(trace.logits.data(), g.tape.value(g.logits).data()));
        for (t, &l) in g.locations.iter().enumerate() {
            let v = g.tape.value(l);
            worst64 = worst64.max((v.data()[0] - trace.proposals[t].y).abs());
            worst64 = worst64.max((v.data()[1] - trace.proposals[t].x).abs());
        }
        let s32 = student.cast::<f32>();
        let f32s: Tensor<f32> = frames.cast();
        let trace = glitr_rollout(&s32, &f32s).unwrap();
        let g = student_graph(&s32, &f32s, 0, None, &weights).unwrap();
        let a: Vec<f64> = trace.logits.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = g.tape.value(g.logits).data().iter().map(|&v| v as f64).collect();
        worst32 = worst32.max(max_diff(&a, &b));
    }
    out.push(Check::new(
        "incremental rollout equals whole-sequence pass (f64)",
        worst64 <= 1e-6,
        format!("max abs diff {worst64:.3e}"),
    ));
    out.push(Check::new(
        "incremental rollout equals whole-sequence pass (f32)",
        worst32 <= 1e-6,
        format!("max abs diff {worst32:.3e}"),
    ));
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn group_max(store: &ParamStore<f64>, grads: &GradBuffer<f64>, group: ParamGroup, skip: Option<ParamId>) -> f64 {
    let ids: Vec<ParamId> = store.ids_in(group).into_iter().filter(|&id| Some(id) != skip).collect();
    grads.max_abs(&ids)
}

/// Which parameters each loss is allowed to move.
pub fn routing_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let geom = tiny_geometry();
    let mut out = Vec::new();

    for terms in ["spatial,temporal", "spatial", "temporal"] {
        let teacher = random_teacher(7);
        let weights = LossWeights::from_terms(terms).unwrap();
        let mut buf = GradBuffer::for_store(&teacher.net.params);
        for label in 0..4 {
            let frames = random_frames(&mut rng, 4, &geom);
            let (_, g) = teacher_clip_grads(&teacher, &frames, label % 3, None, &weights).unwrap();
            buf.merge(&g);
        }
        let store = &teacher.net.params;
        let frozen = group_max(store, &buf, ParamGroup::Spatial, None).max(group_max(store, &buf, ParamGroup::Classifier, None));
        let locator = group_max(store, &buf, ParamGroup::Locator, Some(teacher.first_loc));
        let first = buf.get(teacher.first_loc).map_or(0.0, |g| g.max_abs());
        out.push(Check::new(
            format!("teacher {terms} loss leaves T_f and T_c untouched"),
            frozen == 0.0,
            format!("max |grad| {frozen:e}"),
        ));
        out.push(Check::new(
            format!("teacher {terms} loss reaches T_l and l_1"),
            locator > 0.0 && first > 0.0,
            format!("T_l {locator:.3e}, l_1 {first:.3e}"),
        ));
    }

    let teacher = random_teacher(7);
    let mut buf = GradBuffer::for_store(&teacher.net.params);
    for label in 0..4 {
        let frames = random_frames(&mut rng, 4, &geom);
        let (_, g) = teacher_clip_grads(&teacher, &frames, label % 3, None, &LossWeights::from_terms("cls").unwrap()).unwrap();
        buf.merge(&g);
    }
    let store = &teacher.net.params;
    let locator = group_max(store, &buf, ParamGroup::Locator, None);
    let trained = group_max(store, &buf, ParamGroup::Spatial, None).min(group_max(store, &buf, ParamGroup::Classifier, None));
    out.push(Check::new(
        "teacher cls loss leaves T_l and l_1 untouched",
        locator == 0.0 && trained > 0.0,
        format!("T_l {locator:e}, T_f/T_c {trained:.3e}"),
    ));
    out.push(frozen_copy_fidelity(&teacher, &random_frames(&mut rng, 4, &geom)));

    let teacher = random_teacher(8);
    let frames = random_frames(&mut rng, 4, &geom);
    let targets = teacher_targets(&teacher, &frames).unwrap();
    let student = GliTrModel::from_teacher(&teacher);
    let before = teacher.net.params.checksum();
    let weights = LossWeights::from_terms("cls,spatial,temporal").unwrap();
    let (_, grads) = student_clip_grads(&student, &frames, 2, Some(&targets), &weights).unwrap();
    let first = grads.get(teacher.first_loc).map_or(0.0, |g| g.max_abs());
    out.push(Check::new(
        "student losses never reach teacher outputs",
        teacher_targets_are_detached(&teacher, &frames),
        "teacher parameters bound on the same tape get no gradient",
    ));
    out.push(Check::new(
        "student training leaves the teacher and its first location alone",
        first == 0.0 && teacher.net.params.checksum() == before,
        format!("first-location grad {first:e}"),
    ));

    let student = random_student(9);
    let mut g = student_graph(&student, &frames, 0, None, &LossWeights::from_terms("cls").unwrap()).unwrap();
    let rows: Vec<Var> = g.locations.iter().map(|&l| g.tape.reshape(l, &[1, 2])).collect();
    let locs = g.tape.concat_rows(&rows);
    let w = g.tape.constant(random_tensor(&mut rng, &[rows.len(), 2], -1.0, 1.0));
    let prod = g.tape.mul(locs, w);
    let total = g.tape.sum(prod);
    let grads = g.tape.backward(total).unwrap();
    let mut buf = GradBuffer::for_store(&student.net.params);
    g.binding.accumulate(&grads, &mut buf);
    let store = &student.net.params;
    let tf = group_max(store, &buf, ParamGroup::Spatial, None);
    let tl = group_max(store, &buf, ParamGroup::Locator, None);
    out.push(Check::new(
        "student locations send no gradient into T_f through T_l inputs",
        tf == 0.0 && tl > 0.0,
        format!("T_f {tf:e}, T_l {tl:.3e}"),
    ));
    out
}

/// Step 2 glimpse features from the frozen copy against a fresh trainable
/// pass of the same parameters at the recorded centers.
fn frozen_copy_fidelity(teacher: &TeacherModel<f64>, frames: &Tensor<f64>) -> Check {
    let net = &teacher.net;
    let weights = LossWeights::from_terms("cls,spatial,temporal").unwrap();
    let g = teacher_graph(teacher, frames, 0, None, &weights).unwrap();
    let frozen = g.tape.value(g.glimpse_features.unwrap()).clone();
    let locs = g.tape.value(g.locations).clone();
    let first = teacher.first_location();

    let mut tape = Tape::new();
    let mut p = glitr::params::Binding::trainable(&net.params);
    let t_len = frames.shape()[0];
    let mut centers = vec![tape.constant(Tensor::new(vec![2], vec![first.y, first.x]).unwrap())];
    for r in 0..t_len - 1 {
        centers.push(tape.constant(Tensor::new(vec![2], locs.data()[2 * r..2 * r + 2].to_vec()).unwrap()));
    }
    let views: Vec<FrameView<'_, f64>> = (0..t_len).map(|t| FrameView::of_clip(frames, t).unwrap()).collect();
    let sources: Vec<&dyn PixelSource<f64>> = views.iter().map(|v| v as &dyn PixelSource<f64>).collect();
    let live = net.glimpse_features(&mut tape, &mut p, &sources, &centers).unwrap();
    let same = tape.value(live).data() == frozen.data();
    Check::new(
        "frozen copies reproduce the live encoder bit for bit",
        same,
        format!("{} glimpse features compared", frozen.data().len()),
    )
}

/// Binds teacher parameters as trainable leaves, feeds the resulting
/// values to the consistency losses, and checks nothing flows back.
fn teacher_targets_are_detached(teacher: &TeacherModel<f64>, frames: &Tensor<f64>) -> bool {
    let net = &teacher.net;
    let mut tape = Tape::new();
    let mut p = glitr::params::Binding::trainable(&net.params);
    let f = net.frame_features(&mut tape, &mut p, frames).unwrap();
    let y = net.encoders.classifier.forward(&mut tape, &mut p, f).unwrap();
    let (ft, yt) = (tape.value(f).clone(), tape.value(y).clone());
    let sf = tape.variable(ft.map(|v| v + 0.1));
    let sy = tape.variable(yt.map(|v| v * 0.5));
    let a = losses::spatial_consistency(&mut tape, sf, &ft).unwrap();
    let b = losses::temporal_consistency(&mut tape, sy, &yt).unwrap();
    let total = tape.add(a, b);
    let grads = tape.backward(total).unwrap();
    let mut buf = GradBuffer::for_store(&net.params);
    p.accumulate(&grads, &mut buf);
    let ids: Vec<ParamId> = net.params.ids().collect();
    grads.get(sf).is_some() && buf.max_abs(&ids) == 0.0
}

/// Closed-form values of every loss.
pub fn loss_oracle_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let ce = eval::cls_loss(&Tensor::<f64>::zeros(&[8, 4]), 1).unwrap();
    out.push(Check::new("cross-entropy of uniform logits is ln 4", (ce - 4f64.ln()).abs() < 1e-6, format!("{ce}")));
    let mut sat = Tensor::<f64>::zeros(&[1, 4]);
    sat.data_mut()[2] = 30.0;
    let ce = eval::cls_loss(&sat, 2).unwrap();
    out.push(Check::new("cross-entropy of a saturated true logit is ~0", ce < 1e-9, format!("{ce:e}")));

    let a = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap();
    let mse0 = eval::spatial_consistency(&a, &a).unwrap();
    let mse1 = eval::spatial_consistency(&a, &a.map(|v| v + 1.0)).unwrap();
    out.push(Check::new("feature MSE is 0 on identical inputs", mse0 == 0.0, format!("{mse0}")));
    out.push(Check::new("feature MSE is 1 under a unit offset", (mse1 - 1.0).abs() < 1e-12, format!("{mse1}")));

    let kl0 = eval::temporal_consistency(&a, &a).unwrap();
    out.push(Check::new("logit KL is 0 on identical inputs", kl0 == 0.0, format!("{kl0}")));
    let teacher = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
    let kl = eval::temporal_consistency(&Tensor::zeros(&[1, 2]), &teacher).unwrap();
    out.push(Check::new(
        "KL of softmax [ln 2, 0] from uniform is 0.0566",
        (kl - 0.0566).abs() < 1e-4,
        format!("{kl:.6}"),
    ));
    let dist = eval::distillation_loss(&Tensor::from_vec(vec![0.0, 0.0]), &Tensor::from_vec(vec![2f64.ln(), 0.0])).unwrap();
    out.push(Check::new("distillation KL closed form", (dist - 0.0566).abs() < 1e-4, format!("{dist:.6}")));

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut min_seen = f64::INFINITY;
    for _ in 0..200 {
        let s = random_tensor(&mut rng, &[3, 5], -4.0, 4.0);
        let t = random_tensor(&mut rng, &[3, 5], -4.0, 4.0);
        min_seen = min_seen
            .min(eval::temporal_consistency(&s, &t).unwrap())
            .min(eval::spatial_consistency(&s, &t).unwrap())
            .min(eval::distillation_loss(&Tensor::from_vec(s.row(0).to_vec()), &Tensor::from_vec(t.row(0).to_vec())).unwrap());
    }
    out.push(Check::new("divergences are nonnegative on random pairs", min_seen >= 0.0, format!("min {min_seen:e}")));
    out
}

/// Pixel budgets of the reported glimpse sizes.
pub fn pixel_accounting_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (g, t, expect) in [(64, 16, 65_536), (96, 16, 147_456), (128, 16, 262_144), (64, 8, 32_768), (128, 8, 131_072)] {
        let got = pixels_sensed(g, t, 224, 224).map(|b| b.pixels_total);
        out.push(Check::new(
            format!("{t} glimpses of {g}x{g} sense {expect} pixels"),
            got.as_ref().ok() == Some(&expect),
            format!("{got:?}"),
        ));
    }
    let area = pixels_sensed(128, 1, 224, 224).unwrap().area_fraction;
    out.push(Check::new("128x128 glimpse covers ~33% of a 224x224 frame", (area - 0.3265).abs() <= 0.0005, format!("{area:.5}")));
    out
}
