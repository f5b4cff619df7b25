//! Glimpse-location strategies behind a common trait, selected by name,
//! plus strategy evaluation and early-exit inference.

use std::collections::BTreeMap;

use glitr_substrate::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{GlitrError, Result};
use crate::glimpse::{GlimpseGeometry, GlimpseLocation, PixelSource};
use crate::student::{argmax, frame_views, rollout_with, GliTrModel, RolloutTrace};

/// Per-step inputs a strategy may use.
pub struct StepContext<'a> {
    /// 1-based step index.
    pub t: usize,
    /// The model's own proposal (`l_hat_1` at `t = 1`).
    pub proposal: GlimpseLocation,
    /// Teacher locations `l_1 .. l_T` for this clip, when available.
    pub teacher: Option<&'a [GlimpseLocation]>,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait GlimpseStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// True when locations depend on the random stream.
    fn stochastic(&self) -> bool {
        false
    }

    fn needs_teacher(&self) -> bool {
        false
    }

    fn next_location(&self, ctx: &mut StepContext<'_>) -> Result<GlimpseLocation>;
}

pub struct UniformRandom;

impl GlimpseStrategy for UniformRandom {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn next_location(&self, ctx: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        let y = ctx.rng.random_range(-1.0..=1.0);
        let x = ctx.rng.random_range(-1.0..=1.0);
        Ok(GlimpseLocation { y, x })
    }
}

pub struct GaussianRandom;

impl GlimpseStrategy for GaussianRandom {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn next_location(&self, ctx: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        let y: f64 = StandardNormal.sample(ctx.rng);
        let x: f64 = StandardNormal.sample(ctx.rng);
        Ok(GlimpseLocation { y: y.tanh(), x: x.tanh() })
    }
}

pub struct Center;

impl GlimpseStrategy for Center {
    fn name(&self) -> &'static str {
        "center"
    }

    fn next_location(&self, _: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        Ok(GlimpseLocation::CENTER)
    }
}

pub struct BottomLeft {
    pub location: GlimpseLocation,
}

impl GlimpseStrategy for BottomLeft {
    fn name(&self) -> &'static str {
        "bottomleft"
    }

    fn next_location(&self, _: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        Ok(self.location)
    }
}

pub struct TeacherLocations;

impl GlimpseStrategy for TeacherLocations {
    fn name(&self) -> &'static str {
        "teacher"
    }

    fn needs_teacher(&self) -> bool {
        true
    }

    fn next_location(&self, ctx: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        let locs = ctx
            .teacher
            .ok_or_else(|| GlitrError::Missing("teacher locations for the teacher strategy".into()))?;
        locs.get(ctx.t - 1)
            .copied()
            .ok_or_else(|| GlitrError::Missing(format!("teacher location for step {}", ctx.t)))
    }
}

pub struct GliTrPolicy;

impl GlimpseStrategy for GliTrPolicy {
    fn name(&self) -> &'static str {
        "glitr"
    }

    fn next_location(&self, ctx: &mut StepContext<'_>) -> Result<GlimpseLocation> {
        Ok(ctx.proposal)
    }
}

type Factory = fn(&GlimpseGeometry) -> Box<dyn GlimpseStrategy>;

/// Strategy constructors by name.
pub struct StrategyRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("uniform", |_| Box::new(UniformRandom));
        r.register("gaussian", |_| Box::new(GaussianRandom));
        r.register("center", |_| Box::new(Center));
        r.register("bottomleft", |g| Box::new(BottomLeft { location: g.bottom_left() }));
        r.register("teacher", |_| Box::new(TeacherLocations));
        r.register("glitr", |_| Box::new(GliTrPolicy));
        r
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, geometry: &GlimpseGeometry) -> Result<Box<dyn GlimpseStrategy>> {
        self.factories
            .get(name)
            .map(|f| f(geometry))
            .ok_or_else(|| GlitrError::UnknownStrategy(name.to_string()))
    }
}

/// Random stream for `(seed, clip)`; independent of evaluation order.
pub fn clip_rng(seed: u64, clip: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip as u64);
    rng
}

/// One clip to evaluate.
pub struct EvalClip<'a, R> {
    pub frames: &'a Tensor<R>,
    pub label: usize,
    /// Teacher locations `l_1 .. l_T`.
    pub teacher: Option<&'a [GlimpseLocation]>,
}

/// Rollout of one clip with locations from `strategy`.
pub fn strategy_rollout<R: Real>(
    model: &GliTrModel<R>,
    clip: &EvalClip<'_, R>,
    strategy: &dyn GlimpseStrategy,
    rng: &mut ChaCha8Rng,
    stop: impl FnMut(&Tensor<R>) -> Result<bool>,
) -> Result<RolloutTrace<R>> {
    model.net.check_frames(clip.frames)?;
    let views = frame_views(clip.frames)?;
    let sources: Vec<&dyn PixelSource<R>> = views.iter().map(|v| v as &dyn PixelSource<R>).collect();
    let choose = |t: usize, proposal: GlimpseLocation| {
        let mut ctx = StepContext {
            t,
            proposal,
            teacher: clip.teacher,
            rng: &mut *rng,
        };
        strategy.next_location(&mut ctx)
    };
    rollout_with(model, &sources, choose, stop)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCurves {
    pub name: String,
    pub seeds: Vec<u64>,
    /// `[seed][t]` accuracy.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation over seeds.
    pub std: Vec<f64>,
}

fn accuracy_curve<R: Real>(
    model: &GliTrModel<R>,
    clips: &[EvalClip<'_, R>],
    strategy: &dyn GlimpseStrategy,
    seed: u64,
) -> Result<Vec<f64>> {
    let hits: Vec<Vec<bool>> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let mut rng = clip_rng(seed, i);
            let trace = strategy_rollout(model, clip, strategy, &mut rng, |_| Ok(false))?;
            Ok(trace.predictions().into_iter().map(|p| p == clip.label).collect())
        })
        .collect::<Result<_>>()?;
    let t_len = hits.first().map_or(0, Vec::len);
    let n = clips.len().max(1) as f64;
    Ok((0..t_len)
        .map(|t| hits.iter().filter(|h| h[t]).count() as f64 / n)
        .collect())
}

/// Per-step accuracy over `clips` for each seed. Deterministic strategies
/// are evaluated once and repeated for every seed.
pub fn evaluate_strategy<R: Real>(
    model: &GliTrModel<R>,
    clips: &[EvalClip<'_, R>],
    strategy: &dyn GlimpseStrategy,
    seeds: &[u64],
) -> Result<StrategyCurves> {
    if seeds.is_empty() {
        return Err(GlitrError::Config("at least one evaluation seed is required".into()));
    }
    if strategy.needs_teacher() && clips.iter().any(|c| c.teacher.is_none()) {
        return Err(GlitrError::Missing(format!("teacher locations for strategy {}", strategy.name())));
    }
    let per_seed = if strategy.stochastic() {
        seeds
            .iter()
            .map(|&s| accuracy_curve(model, clips, strategy, s))
            .collect::<Result<Vec<_>>>()?
    } else {
        let curve = accuracy_curve(model, clips, strategy, seeds[0])?;
        vec![curve; seeds.len()]
    };
    let (mean, std) = mean_std(&per_seed);
    Ok(StrategyCurves {
        name: strategy.name().to_string(),
        seeds: seeds.to_vec(),
        per_seed,
        mean,
        std,
    })
}

/// Column-wise mean and population standard deviation.
pub fn mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let t_len = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; t_len];
    let mut std = vec![0.0; t_len];
    for t in 0..t_len {
        let first = rows[0][t];
        if rows.iter().all(|r| r[t] == first) {
            mean[t] = first;
            continue;
        }
        let m = rows.iter().map(|r| r[t]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[t] - m) * (r[t] - m)).sum::<f64>() / n;
        mean[t] = m;
        std[t] = v.sqrt();
    }
    (mean, std)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyExitResult {
    /// 1-based step at which the episode stopped.
    pub t_stop: usize,
    pub prediction: usize,
    pub confidence: f64,
}

/// Runs the model's own policy until the maximum softmax probability
/// exceeds `gamma`, or to the last frame.
pub fn early_exit_run<R: Real>(model: &GliTrModel<R>, frames: &Tensor<R>, gamma: f64) -> Result<EarlyExitResult> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(GlitrError::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let clip = EvalClip {
        frames,
        label: 0,
        teacher: None,
    };
    let mut rng = clip_rng(0, 0);
    let confident = |logits: &Tensor<R>| -> Result<bool> { Ok(max_prob(logits)? > gamma) };
    let trace = strategy_rollout(model, &clip, &GliTrPolicy, &mut rng, confident)?;
    let t = trace.len();
    let last = trace.logits.row(t - 1);
    Ok(EarlyExitResult {
        t_stop: t,
        prediction: argmax(last),
        confidence: max_prob(&Tensor::from_vec(last.to_vec()))?,
    })
}

fn max_prob<R: Real>(logits: &Tensor<R>) -> Result<f64> {
    let n = logits.len();
    let p = glitr_substrate::softmax_rows(&logits.reshape(&[1, n])?)?;
    Ok(p.data().iter().fold(0.0f64, |m, &v| m.max(v.to_f64_lossy())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyExitSummary {
    pub gamma: f64,
    pub mean_t_stop: f64,
    pub accuracy: f64,
}

/// Mean stopping step and accuracy over `clips` for each threshold.
pub fn early_exit_sweep<R: Real>(
    model: &GliTrModel<R>,
    clips: &[EvalClip<'_, R>],
    gammas: &[f64],
) -> Result<Vec<EarlyExitSummary>> {
    gammas
        .iter()
        .map(|&gamma| {
            let results: Vec<EarlyExitResult> = clips
                .par_iter()
                .map(|c| early_exit_run(model, c.frames, gamma))
                .collect::<Result<_>>()?;
            let n = clips.len().max(1) as f64;
            let correct = results.iter().zip(clips).filter(|(r, c)| r.prediction == c.label).count();
            Ok(EarlyExitSummary {
                gamma,
                mean_t_stop: results.iter().map(|r| r.t_stop as f64).sum::<f64>() / n,
                accuracy: correct as f64 / n,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_every_strategy() {
        let r = StrategyRegistry::default();
        assert_eq!(r.names(), ["bottomleft", "center", "gaussian", "glitr", "teacher", "uniform"]);
        let g = GlimpseGeometry::default();
        for name in r.names() {
            assert_eq!(r.create(name, &g).unwrap().name(), name);
        }
        assert!(matches!(r.create("zigzag", &g), Err(GlitrError::UnknownStrategy(_))));
    }

    #[test]
    fn teacher_strategy_without_teacher_errors() {
        let mut rng = clip_rng(0, 0);
        let mut ctx = StepContext {
            t: 1,
            proposal: GlimpseLocation::CENTER,
            teacher: None,
            rng: &mut rng,
        };
        assert!(TeacherLocations.next_location(&mut ctx).is_err());
    }

    #[test]
    fn mean_std_of_identical_rows_is_exact() {
        let rows = vec![vec![0.3, 0.7]; 5];
        let (m, s) = mean_std(&rows);
        assert_eq!(s, vec![0.0, 0.0]);
        assert!((m[0] - 0.3).abs() < 1e-15);
    }
}
