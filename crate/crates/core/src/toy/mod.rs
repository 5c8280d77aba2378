//! Desk-scale training harness for comparing pooling heads.
//!
//! A tiny trunk (1x1 convolution followed by `max(x, 0)`) feeds one of three
//! interchangeable heads (GNAP, plain GAP, or a fully connected layer), and
//! an additive angular margin softmax loss trains the lot with plain SGD on
//! synthetic data in which a random half of each sample's positions are
//! attenuated, mimicking local features seen from a hard viewpoint.

mod data;
mod loss;
mod model;
mod train;

pub use data::{generate_batch, SyntheticBatch, SyntheticSample};
pub use loss::{angular_margin_loss, LossOutput};
pub use model::{HeadParams, ToyParams};
pub use train::{cosine, embed_pairs, held_out_pairs, train, HeldOut, TrainingLog, VerificationPair};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gnap,
    Gap,
    Fc,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Gnap => "gnap",
            HeadKind::Gap => "gap",
            HeadKind::Fc => "fc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub head: HeadKind,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning-rate factor for the classifier weights.
    pub lr_head_multiplier: f64,
    /// Applied to every weight matrix (trunk, FC head, classifier).
    pub weight_decay: f64,
    pub margin: f64,
    pub scale_s: f64,
    pub classes: usize,
    /// Trunk output channels, which is also the embedding size for every head.
    pub embed_dim: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Fraction of spatial positions attenuated in each sample.
    pub hard_fraction: f64,
    /// Per-sample attenuation factor is uniform on this range.
    pub attenuation: (f64, f64),
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            head: HeadKind::Gnap,
            seed: 0,
            steps: 500,
            batch: 64,
            lr: 0.05,
            lr_head_multiplier: 1.0,
            weight_decay: 0.0,
            margin: 0.2,
            scale_s: 16.0,
            classes: 8,
            embed_dim: 8,
            in_channels: 3,
            height: 4,
            width: 4,
            noise_std: 0.5,
            hard_fraction: 0.5,
            attenuation: (0.05, 0.3),
        }
    }
}

impl ToyConfig {
    /// 10x classifier learning rate and 5e-4 weight decay.
    pub fn faster_fc(mut self) -> Self {
        self.lr_head_multiplier = 10.0;
        self.weight_decay = 5e-4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::parameter(msg.to_string()))
            }
        };
        check(self.lr >= 0.0 && self.lr.is_finite(), "lr must be non-negative")?;
        check(self.lr_head_multiplier >= 0.0, "lr_head_multiplier must be non-negative")?;
        check(self.weight_decay >= 0.0, "weight_decay must be non-negative")?;
        check(
            (0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin),
            "margin must lie in [0, pi/2)",
        )?;
        check(self.scale_s > 0.0, "scale_s must be positive")?;
        check(self.classes >= 2, "need at least two classes")?;
        check(self.batch >= 2, "batch must hold at least two samples")?;
        check(
            self.embed_dim >= 1 && self.in_channels >= 1 && self.height >= 1 && self.width >= 1,
            "dimensions must be positive",
        )?;
        check(self.noise_std >= 0.0, "noise_std must be non-negative")?;
        check((0.0..=1.0).contains(&self.hard_fraction), "hard_fraction must lie in [0, 1]")?;
        let (lo, hi) = self.attenuation;
        check(lo > 0.0 && lo <= hi, "attenuation range must satisfy 0 < lo <= hi")?;
        Ok(())
    }
}
