//! Parameters plus layout of the three encoders, and the feature
//! extraction paths over full frames and glimpses.

use glitr_substrate::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{GlitrError, Result};
use crate::glimpse::{frame_position_embeddings, glimpse_tokens, patchify, FrameSource, GlimpseGeometry, PixelSource};
use crate::params::{Binding, ParamStore};

#[derive(Debug, Clone)]
pub struct Network<R: Real> {
    pub geometry: GlimpseGeometry,
    pub encoders: Encoders,
    pub params: ParamStore<R>,
    frame_pos: Tensor<R>,
}

impl<R: Real> Network<R> {
    pub fn new(cfg: &EncoderConfig, geometry: &GlimpseGeometry, seed: u64) -> Result<Self> {
        geometry.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoders = Encoders::build(&mut params, &mut rng, cfg, geometry.patch_dim())?;
        Ok(Self {
            geometry: *geometry,
            encoders,
            params,
            frame_pos: frame_position_embeddings(geometry, cfg.embed_dim)?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoders.config
    }

    pub fn cast<S: Real>(&self) -> Network<S> {
        Network {
            geometry: self.geometry,
            encoders: self.encoders.clone(),
            params: self.params.cast(),
            frame_pos: self.frame_pos.cast(),
        }
    }

    pub fn check_frames(&self, frames: &Tensor<R>) -> Result<usize> {
        let g = &self.geometry;
        let s = frames.shape();
        if s.len() != 4 || s[1] != g.channels || s[2] != g.frame_h || s[3] != g.frame_w {
            return Err(GlitrError::Geometry(format!(
                "frames shaped {s:?}, expected [T, {}, {}, {}]",
                g.channels, g.frame_h, g.frame_w
            )));
        }
        if s[0] == 0 || s[0] > self.config().max_t {
            return Err(GlitrError::SequenceTooLong {
                len: s[0],
                max: self.config().max_t,
            });
        }
        Ok(s[0])
    }

    /// `[T, d]` class-token features of full `[T, C, H, W]` frames.
    pub fn frame_features(&self, tape: &mut Tape<R>, p: &mut Binding<'_, R>, frames: &Tensor<R>) -> Result<Var> {
        let t = self.check_frames(frames)?;
        let patches = tape.constant(patchify(frames, self.geometry.patch_p)?);
        let n = self.frame_pos.rows();
        let d = self.frame_pos.last_dim();
        let mut pos = Vec::with_capacity(t * n * d);
        for _ in 0..t {
            pos.extend_from_slice(self.frame_pos.data());
        }
        let pos = tape.constant(Tensor::new(vec![t * n, d], pos)?);
        self.encoders.spatial.forward(tape, p, patches, pos, t)
    }

    /// `[t, d]` features of glimpses at `centers` (each a `[2]` variable)
    /// over the matching `sources`, encoded as one batch.
    pub fn glimpse_features(
        &self,
        tape: &mut Tape<R>,
        p: &mut Binding<'_, R>,
        sources: &[&dyn PixelSource<R>],
        centers: &[Var],
    ) -> Result<Var> {
        assert_eq!(sources.len(), centers.len(), "one center per frame");
        let d = self.config().embed_dim;
        let mut patches = Vec::with_capacity(centers.len());
        let mut pos = Vec::with_capacity(centers.len());
        for (&src, &c) in sources.iter().zip(centers) {
            let (pt, ps) = glimpse_tokens(tape, FrameSource::Pixels(src), c, &self.geometry, d)?;
            patches.push(pt);
            pos.push(ps);
        }
        let patches = tape.concat_rows(&patches);
        let pos = tape.concat_rows(&pos);
        self.encoders.spatial.forward(tape, p, patches, pos, centers.len())
    }
}
