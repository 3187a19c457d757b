use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusionhead::FusionConfig;
use crate::hnf::{HnfConfig, ScaleSpec};
use crate::odeflow::GradMode;
use crate::textknow::{LmConfig, MAX_LEN};

/// Every knob of a training run. Serialized as flat TOML `key = value`
/// lines; omitted keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patch_sizes: Vec<usize>,
    pub knn: Vec<usize>,
    /// Number of Chebyshev terms.
    pub k_cheb: usize,
    /// Cross-modal attention heads.
    pub heads: usize,
    pub d_h: usize,
    pub folds: usize,
    pub seed: u64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub mask_rate: f64,
    pub aux_match_weight: f64,

    pub image_size: usize,
    pub channels: usize,
    /// Attention heads inside the ODE dynamics and the text encoder.
    pub ode_heads: usize,
    pub ode_steps: usize,
    pub grad_mode: GradMode,
    /// Feed-forward width of the encoder blocks; `None` means `2·d`.
    pub ff_width: Option<usize>,
    pub tie_directions: bool,
    /// Masked-LM pretraining passes over the description corpus.
    pub mlm_epochs: usize,
    pub mlm_lr: f64,
    /// Train only the first `max_folds` folds; `None` runs all of them.
    pub max_folds: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 64,
            batch: 48,
            epochs: 50,
            lr: 1e-3,
            patch_sizes: vec![16, 28, 32],
            knn: vec![10, 6, 4],
            k_cheb: 3,
            heads: 4,
            d_h: 16,
            folds: 10,
            seed: 0,
            plateau_patience: 5,
            lr_factor: 0.5,
            early_stop_patience: 10,
            mask_rate: 0.15,
            aux_match_weight: 0.5,
            image_size: 224,
            channels: 1,
            ode_heads: 4,
            ode_steps: 8,
            grad_mode: GradMode::Irdm,
            ff_width: None,
            tie_directions: false,
            mlm_epochs: 1,
            mlm_lr: 1e-3,
            max_folds: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("k_cheb", self.k_cheb),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("image_size", self.image_size),
            ("ode_heads", self.ode_heads),
            ("ode_steps", self.ode_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds = {} (need ≥ 2)", self.folds)));
        }
        if self.patch_sizes.is_empty() || self.patch_sizes.len() != self.knn.len() {
            return Err(Error::Config(format!(
                "{} patch sizes with {} neighbor counts",
                self.patch_sizes.len(),
                self.knn.len()
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.mlm_lr >= 0.0) {
            return Err(Error::Config(format!("learning rates {} / {}", self.lr, self.mlm_lr)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::Config(format!("lr_factor {} outside (0, 1]", self.lr_factor)));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.aux_match_weight < 0.0 {
            return Err(Error::Config("aux_match_weight must be non-negative".into()));
        }
        if self.ff_width == Some(0) || self.max_folds == Some(0) {
            return Err(Error::Config("ff_width and max_folds must be positive when set".into()));
        }
        self.hnf().validate()
    }

    pub fn ff(&self) -> usize {
        self.ff_width.unwrap_or(2 * self.d)
    }

    pub fn hnf(&self) -> HnfConfig {
        HnfConfig {
            image_size: self.image_size,
            channels: self.channels,
            d: self.d,
            layers: self
                .patch_sizes
                .iter()
                .zip(&self.knn)
                .map(|(&patch_size, &k)| ScaleSpec { patch_size, k })
                .collect(),
            ode_heads: self.ode_heads,
            ff_width: self.ff(),
            cheb_order: self.k_cheb,
            ode_steps: self.ode_steps,
            grad_mode: self.grad_mode,
            tie_directions: self.tie_directions,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            heads: self.heads,
            head_dim: self.d_h,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            d: self.d,
            heads: self.ode_heads,
            ff_width: self.ff(),
            max_len: MAX_LEN,
        }
    }

    /// Fields that fix tensor shapes; a checkpoint only loads under a
    /// configuration that agrees on all of them.
    pub fn shape_mismatch(&self, other: &TrainConfig) -> Option<String> {
        let a = (
            self.d,
            &self.patch_sizes,
            self.k_cheb,
            self.heads,
            self.d_h,
            self.image_size,
            self.channels,
            self.ff(),
        );
        let b = (
            other.d,
            &other.patch_sizes,
            other.k_cheb,
            other.heads,
            other.d_h,
            other.image_size,
            other.channels,
            other.ff(),
        );
        (a != b).then(|| format!("checkpoint has {b:?}, configuration has {a:?} (d, patch_sizes, k_cheb, heads, d_h, image_size, channels, ff)"))
    }

    /// The configuration used by the desk-scale learnability check: default
    /// layer shapes with `d = 16`.
    pub fn desk_scale() -> Self {
        TrainConfig {
            d: 16,
            ..TrainConfig::default()
        }
    }
}
