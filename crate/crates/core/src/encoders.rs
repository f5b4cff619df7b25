//! Spatial encoder (class-token readout), causal temporal encoders and the
//! classification and location heads.

use glitr_substrate::{AttnMask, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlitrError, Result};
use crate::glimpse::GlimpseLocation;
use crate::params::{trunc_normal, xavier, Binding, ParamGroup, ParamId, ParamStore};

/// Subtracted from every pixel before the patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub spatial_depth: usize,
    pub spatial_heads: usize,
    pub temporal_depth: usize,
    pub temporal_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub max_t: usize,
}

impl Default for EncoderConfig {
    // ViT-S scale would be embed_dim 768, 6 heads, temporal depth 4.
    fn default() -> Self {
        Self {
            embed_dim: 64,
            spatial_depth: 4,
            spatial_heads: 4,
            temporal_depth: 2,
            temporal_heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
            max_t: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GlitrError::Config(m));
        let d = self.embed_dim;
        if d == 0 || d % 4 != 0 {
            return fail(format!("embed_dim {d} must be a positive multiple of 4"));
        }
        for (name, h) in [("spatial_heads", self.spatial_heads), ("temporal_heads", self.temporal_heads)] {
            if h == 0 || d % h != 0 {
                return fail(format!("{name} = {h} does not divide embed_dim {d}"));
            }
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes {} < 2", self.num_classes));
        }
        if self.max_t == 0 || self.mlp_ratio == 0 {
            return fail("max_t and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// `[t, d]` per-step features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq<R> {
    pub values: Tensor<R>,
}

/// `[t, K]` per-step class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSeq<R> {
    pub values: Tensor<R>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocationSeq {
    pub values: Vec<GlimpseLocation>,
}

impl LocationSeq {
    pub fn from_tensor<R: Real>(t: &Tensor<R>) -> Self {
        Self {
            values: (0..t.rows()).map(|r| GlimpseLocation::from_values(t.row(r))).collect(),
        }
    }
}

/// Builds parameters with hierarchical names under one group.
pub struct Builder<'a, R: Real, G: Rng> {
    pub store: &'a mut ParamStore<R>,
    pub rng: &'a mut G,
    pub group: ParamGroup,
}

impl<R: Real, G: Rng> Builder<'_, R, G> {
    fn add(&mut self, name: String, value: Tensor<R>, decay: bool) -> ParamId {
        self.store.add(name, value, self.group, decay)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn build<R: Real, G: Rng>(b: &mut Builder<'_, R, G>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = xavier(b.rng, fan_in, fan_out);
        Self {
            weight: b.add(format!("{name}.weight"), w, true),
            bias: b.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, x: Var) -> Var {
        let w = p.var(tape, self.weight);
        let b = p.var(tape, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn build<R: Real, G: Rng>(b: &mut Builder<'_, R, G>, name: &str, d: usize) -> Self {
        Self {
            gain: b.add(format!("{name}.gain"), Tensor::full(&[d], R::one()), false),
            bias: b.add(format!("{name}.bias"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, x: Var) -> Var {
        let g = p.var(tape, self.gain);
        let b = p.var(tape, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block with a GELU MLP.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn build<R: Real, G: Rng>(b: &mut Builder<'_, R, G>, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = d * mlp_ratio;
        Self {
            norm1: Norm::build(b, &format!("{name}.norm1"), d),
            q: Linear::build(b, &format!("{name}.q"), d, d),
            k: Linear::build(b, &format!("{name}.k"), d, d),
            v: Linear::build(b, &format!("{name}.v"), d, d),
            proj: Linear::build(b, &format!("{name}.proj"), d, d),
            norm2: Norm::build(b, &format!("{name}.norm2"), d),
            fc1: Linear::build(b, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::build(b, &format!("{name}.fc2"), hidden, d),
            heads,
        }
    }

    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &mut Binding<'_, R>,
        x: Var,
        groups: usize,
        mask: &AttnMask<R>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x);
        let q = self.q.forward(tape, p, h);
        let k = self.k.forward(tape, p, h);
        let v = self.v.forward(tape, p, h);
        let a = tape.attention(q, k, v, self.heads, groups, mask.clone())?;
        let a = self.proj.forward(tape, p, a);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, p, x);
        let h = self.fc1.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h);
        Ok(tape.add(x, h))
    }
}

/// ViT-style frame or glimpse encoder returning the class-token output.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub dim: usize,
}

impl SpatialEncoder {
    pub fn build<R: Real, G: Rng>(b: &mut Builder<'_, R, G>, name: &str, cfg: &EncoderConfig, patch_dim: usize) -> Self {
        let d = cfg.embed_dim;
        let patch_embed = Linear::build(b, &format!("{name}.patch_embed"), patch_dim, d);
        let cls_init = trunc_normal(b.rng, &[d], 0.02);
        let cls = b.add(format!("{name}.cls_token"), cls_init, false);
        let blocks = (0..cfg.spatial_depth)
            .map(|i| Block::build(b, &format!("{name}.block{i}"), d, cfg.spatial_heads, cfg.mlp_ratio))
            .collect();
        let norm = Norm::build(b, &format!("{name}.norm"), d);
        Self {
            patch_embed,
            cls,
            blocks,
            norm,
            dim: d,
        }
    }

    /// Encodes `groups` images at once: `patches` is `[groups * N, P]`, `pos`
    /// is `[groups * N, d]`; returns `[groups, d]`. Pixels are centered by
    /// `PIXEL_MEAN` first.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &mut Binding<'_, R>,
        patches: Var,
        pos: Var,
        groups: usize,
    ) -> Result<Var> {
        let rows = tape.value(patches).rows();
        if groups == 0 || rows % groups != 0 || tape.value(pos).shape() != [rows, self.dim] {
            return Err(GlitrError::Geometry(format!(
                "{rows} patch rows, {groups} groups, pos {:?}",
                tape.value(pos).shape()
            )));
        }
        let n = rows / groups;
        let shape = tape.value(patches).shape().to_vec();
        let mean = tape.constant(Tensor::full(&shape, R::lit(-PIXEL_MEAN)));
        let centered = tape.add(patches, mean);
        let x = self.patch_embed.forward(tape, p, centered);
        let x = tape.add(x, pos);
        let cls = p.var(tape, self.cls);
        let mut x = tape.insert_cls(cls, x, groups);
        for block in &self.blocks {
            x = block.forward(tape, p, x, groups, &AttnMask::Full)?;
        }
        let x = self.norm.forward(tape, p, x);
        let readout: Vec<usize> = (0..groups).map(|g| g * (n + 1)).collect();
        Ok(tape.select_rows(x, &readout))
    }
}

/// Temporal transformer over per-step features with learned position
/// embeddings and no class token.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub causal: bool,
    pub max_t: usize,
}

impl TemporalEncoder {
    pub fn build<R: Real, G: Rng>(b: &mut Builder<'_, R, G>, name: &str, cfg: &EncoderConfig, causal: bool) -> Self {
        let d = cfg.embed_dim;
        let pos_init = trunc_normal(b.rng, &[cfg.max_t, d], 0.02);
        let pos = b.add(format!("{name}.temporal_pos"), pos_init, false);
        let blocks = (0..cfg.temporal_depth)
            .map(|i| Block::build(b, &format!("{name}.block{i}"), d, cfg.temporal_heads, cfg.mlp_ratio))
            .collect();
        let norm = Norm::build(b, &format!("{name}.norm"), d);
        Self {
            pos,
            blocks,
            norm,
            causal,
            max_t: cfg.max_t,
        }
    }

    /// `[t, d]` features to `[t, d]` hidden states.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, features: Var) -> Result<Var> {
        let t = tape.value(features).rows();
        if t > self.max_t {
            return Err(GlitrError::SequenceTooLong { len: t, max: self.max_t });
        }
        let pos = p.var(tape, self.pos);
        let rows: Vec<usize> = (0..t).collect();
        let pos = tape.select_rows(pos, &rows);
        let mut x = tape.add(features, pos);
        let mask = if self.causal { AttnMask::Causal } else { AttnMask::Full };
        for block in &self.blocks {
            x = block.forward(tape, p, x, 1, &mask)?;
        }
        Ok(self.norm.forward(tape, p, x))
    }
}

/// Affine map `d -> K`.
#[derive(Debug, Clone, Copy)]
pub struct ClassHead(pub Linear);

impl ClassHead {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, hidden: Var) -> Var {
        self.0.forward(tape, p, hidden)
    }
}

/// Affine map `d -> 2` followed by tanh.
#[derive(Debug, Clone, Copy)]
pub struct LocateHead(pub Linear);

impl LocateHead {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, hidden: Var) -> Var {
        let pre = self.0.forward(tape, p, hidden);
        tape.tanh(pre)
    }
}

/// `T_c`: causal temporal encoder followed by a class head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub temporal: TemporalEncoder,
    pub head: ClassHead,
}

impl Classifier {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, features: Var) -> Result<Var> {
        let h = self.temporal.forward(tape, p, features)?;
        Ok(self.head.forward(tape, p, h))
    }
}

/// `T_l`: causal temporal encoder followed by a location head.
#[derive(Debug, Clone)]
pub struct Locator {
    pub temporal: TemporalEncoder,
    pub head: LocateHead,
}

impl Locator {
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, features: Var) -> Result<Var> {
        let h = self.temporal.forward(tape, p, features)?;
        Ok(self.head.forward(tape, p, h))
    }
}

/// The three networks shared by teacher and student.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub spatial: SpatialEncoder,
    pub classifier: Classifier,
    pub locator: Locator,
}

impl Encoders {
    pub fn build<R: Real, G: Rng>(store: &mut ParamStore<R>, rng: &mut G, cfg: &EncoderConfig, patch_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut b = Builder {
            store,
            rng,
            group: ParamGroup::Spatial,
        };
        let spatial = SpatialEncoder::build(&mut b, "spatial", cfg, patch_dim);
        b.group = ParamGroup::Classifier;
        let classifier = Classifier {
            temporal: TemporalEncoder::build(&mut b, "classifier", cfg, true),
            head: ClassHead(Linear::build(&mut b, "classifier.head", d, cfg.num_classes)),
        };
        b.group = ParamGroup::Locator;
        let locator = Locator {
            temporal: TemporalEncoder::build(&mut b, "locator", cfg, true),
            head: LocateHead(Linear::build(&mut b, "locator.head", d, 2)),
        };
        Ok(Self {
            config: *cfg,
            spatial,
            classifier,
            locator,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            spatial_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let one_class = EncoderConfig {
            num_classes: 1,
            ..EncoderConfig::default()
        };
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_grouped() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoders::build(&mut store, &mut rng, &EncoderConfig::default(), 64).unwrap();
        let mut names: Vec<_> = store.iter().map(|(_, p)| p.name.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(store.get(enc.locator.head.0.weight).group, ParamGroup::Locator);
        assert_eq!(store.get(enc.spatial.cls).group, ParamGroup::Spatial);
    }

    #[test]
    fn sequence_longer_than_max_t_is_rejected() {
        let cfg = EncoderConfig {
            embed_dim: 8,
            spatial_depth: 1,
            spatial_heads: 2,
            temporal_depth: 1,
            temporal_heads: 2,
            mlp_ratio: 1,
            num_classes: 2,
            max_t: 2,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoders::build(&mut store, &mut rng, &cfg, 4).unwrap();
        let mut tape = Tape::new();
        let mut p = Binding::frozen(&store);
        let f = tape.constant(Tensor::zeros(&[3, 8]));
        assert!(matches!(
            enc.classifier.forward(&mut tape, &mut p, f),
            Err(GlitrError::SequenceTooLong { len: 3, max: 2 })
        ));
    }
}
