//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{ClipSpec, Variant};
use crate::encoders::EncoderConfig;
use crate::error::{GlitrError, Result};
use crate::glimpse::GlimpseGeometry;
use crate::losses::LossWeights;
use crate::optim::GroupRates;

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| GlitrError::Config(format!("{key} = {value:?}: {e}")))
}

macro_rules! run_config {
    ($( $(#[doc = $doc:expr])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = parse_value(key, value)?, )*
                    _ => return Err(GlitrError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), self.$field.to_string()) ),*]
            }
        }
    };
}

run_config! {
    /// Seed for initialization, shuffling and evaluation streams.
    seed: u64 = 0,
    frame_h: usize = 64,
    frame_w: usize = 64,
    glimpse_g: usize = 24,
    patch_p: usize = 8,
    channels: usize = 1,
    frames: usize = 8,
    num_classes: usize = 8,
    n_train: usize = 800,
    n_val: usize = 200,
    variant: Variant = Variant::Centered,
    data_seed: u64 = 7,
    embed_dim: usize = 64,
    spatial_depth: usize = 4,
    spatial_heads: usize = 4,
    temporal_depth: usize = 2,
    temporal_heads: usize = 4,
    mlp_ratio: usize = 4,
    batch_size: usize = 16,
    weight_decay: f64 = 0.05,
    oracle_epochs: usize = 20,
    oracle_lr: f64 = 1e-3,
    teacher_epochs: usize = 30,
    teacher_lr_spatial: f64 = 5e-4,
    teacher_lr_classifier: f64 = 1e-3,
    teacher_lr_locator: f64 = 1e-3,
    /// Epochs over which the locator learning rate ramps up from zero.
    teacher_locator_warmup: usize = 5,
    teacher_loss: String = "cls,spatial,temporal,dist".into(),
    student_epochs: usize = 20,
    student_lr_spatial: f64 = 2e-4,
    student_lr_classifier: f64 = 5e-4,
    student_lr_locator: f64 = 5e-4,
    student_loss: String = "cls,spatial,temporal".into(),
    eval_seeds: usize = 5,
    strategies: String = "uniform,gaussian,center,bottomleft,teacher,glitr".into(),
    gammas: String = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9".into(),
    hist_bins: usize = 8,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GlitrError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlitrError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| GlitrError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlitrError::io(path, e))
    }

    pub fn geometry(&self) -> GlimpseGeometry {
        GlimpseGeometry {
            frame_h: self.frame_h,
            frame_w: self.frame_w,
            glimpse_g: self.glimpse_g,
            patch_p: self.patch_p,
            channels: self.channels,
        }
    }

    pub fn clip_spec(&self) -> ClipSpec {
        ClipSpec {
            geometry: self.geometry(),
            frames: self.frames,
            num_classes: self.num_classes,
            variant: self.variant,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            spatial_depth: self.spatial_depth,
            spatial_heads: self.spatial_heads,
            temporal_depth: self.temporal_depth,
            temporal_heads: self.temporal_heads,
            mlp_ratio: self.mlp_ratio,
            num_classes: self.num_classes,
            max_t: self.frames,
        }
    }

    pub fn teacher_rates(&self) -> GroupRates {
        GroupRates {
            spatial: self.teacher_lr_spatial,
            classifier: self.teacher_lr_classifier,
            locator: self.teacher_lr_locator,
        }
    }

    pub fn student_rates(&self) -> GroupRates {
        GroupRates {
            spatial: self.student_lr_spatial,
            classifier: self.student_lr_classifier,
            locator: self.student_lr_locator,
        }
    }

    pub fn teacher_weights(&self) -> Result<LossWeights> {
        LossWeights::from_terms(&self.teacher_loss)
    }

    pub fn student_weights(&self) -> Result<LossWeights> {
        LossWeights::from_terms(&self.student_loss)
    }

    pub fn strategy_names(&self) -> Vec<String> {
        split_list(&self.strategies)
    }

    pub fn gamma_values(&self) -> Result<Vec<f64>> {
        split_list(&self.gammas)
            .iter()
            .map(|g| parse_value::<f64>("gammas", g))
            .collect()
    }

    pub fn eval_seed_values(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.clip_spec().validate()?;
        self.encoder_config().validate()?;
        if self.batch_size == 0 {
            return Err(GlitrError::Config("batch_size must be positive".into()));
        }
        self.teacher_weights()?;
        self.student_weights()?;
        for g in self.gamma_values()? {
            if !(0.0..=1.0).contains(&g) {
                return Err(GlitrError::Config(format!("gamma {g} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}
