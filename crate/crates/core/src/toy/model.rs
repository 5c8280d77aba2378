use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    fc_head_backward, fc_head_forward, gap_backward, gap_forward, gnap_backward, gnap_forward,
    gnap_infer, pointwise_conv_backward, pointwise_conv_forward, FcCache, GnapCache, GnapState,
    Mode, PointwiseCache,
};
use crate::tensor::{FeatureMap, Matrix, Shape4};

use super::data::stream_seed;
use super::{HeadKind, ToyConfig};

const INIT_SALT: u64 = 0x2c6a_93f1_0000_0003;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadParams {
    Gnap { state: GnapState },
    Gap,
    Fc { weights: Matrix, bias: Vec<f64> },
}

/// Every trainable quantity of the toy network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyParams {
    /// `in_channels x embed_dim` trunk weights.
    pub trunk: Matrix,
    pub head: HeadParams,
    /// `embed_dim x classes`, one column per class.
    pub classifier: Matrix,
}

pub(crate) enum HeadCache {
    Gnap(GnapCache),
    Gap(Shape4),
    Fc(FcCache),
}

pub(crate) struct ForwardCache {
    trunk: PointwiseCache,
    pre_activation: FeatureMap,
    head: HeadCache,
}

pub(crate) struct Gradients {
    pub trunk: Vec<f64>,
    pub beta_in: Vec<f64>,
    pub beta_out: Vec<f64>,
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

impl ToyParams {
    pub fn init(config: &ToyConfig) -> Result<Self> {
        let seed = |k| stream_seed(config.seed, INIT_SALT, k);
        let d = config.embed_dim;
        let trunk = Matrix::randn_seeded(
            config.in_channels,
            d,
            seed(0),
            (2.0 / config.in_channels as f64).sqrt(),
        )?;
        let classifier = Matrix::randn_seeded(d, config.classes, seed(1), 1.0)?;
        let head = match config.head {
            HeadKind::Gnap => HeadParams::Gnap {
                state: GnapState::new(d).with_mode(Mode::Train),
            },
            HeadKind::Gap => HeadParams::Gap,
            HeadKind::Fc => {
                let fan_in = d * config.height * config.width;
                HeadParams::Fc {
                    weights: Matrix::randn_seeded(fan_in, d, seed(2), 1.0 / (fan_in as f64).sqrt())?,
                    bias: vec![0.0; d],
                }
            }
        };
        Ok(ToyParams {
            trunk,
            head,
            classifier,
        })
    }

    fn trunk_forward(&self, x: &FeatureMap) -> Result<(FeatureMap, PointwiseCache, FeatureMap)> {
        let (pre, cache) = pointwise_conv_forward(x, &self.trunk)?;
        let act = pre.map(|v| v.max(0.0));
        Ok((act, cache, pre))
    }

    /// Train-mode forward pass. A GNAP head updates its running statistics.
    pub(crate) fn forward_train(&mut self, x: &FeatureMap) -> Result<(Matrix, ForwardCache)> {
        let (act, trunk, pre_activation) = self.trunk_forward(x)?;
        let (emb, head) = match &mut self.head {
            HeadParams::Gnap { state } => {
                state.mode = Mode::Train;
                let (emb, cache) = gnap_forward(&act, state)?;
                (emb, HeadCache::Gnap(cache))
            }
            HeadParams::Gap => (gap_forward(&act), HeadCache::Gap(act.shape())),
            HeadParams::Fc { weights, bias } => {
                let (emb, cache) = fc_head_forward(&act, weights, bias)?;
                (emb, HeadCache::Fc(cache))
            }
        };
        Ok((
            emb,
            ForwardCache {
                trunk,
                pre_activation,
                head,
            },
        ))
    }

    /// Inference-mode embeddings; a GNAP head uses its running statistics.
    pub fn embed(&self, x: &FeatureMap) -> Result<Matrix> {
        let (act, _, _) = self.trunk_forward(x)?;
        match &self.head {
            HeadParams::Gnap { state } => gnap_infer(&act, state),
            HeadParams::Gap => Ok(gap_forward(&act)),
            HeadParams::Fc { weights, bias } => Ok(fc_head_forward(&act, weights, bias)?.0),
        }
    }

    pub(crate) fn backward(&self, d_emb: &Matrix, cache: &ForwardCache) -> Result<Gradients> {
        let mut grads = Gradients {
            trunk: Vec::new(),
            beta_in: Vec::new(),
            beta_out: Vec::new(),
            fc_weights: Vec::new(),
            fc_bias: Vec::new(),
        };
        let d_act = match &cache.head {
            HeadCache::Gnap(c) => {
                let g = gnap_backward(d_emb, c)?;
                grads.beta_in = g.param("beta_in").unwrap_or_default().to_vec();
                grads.beta_out = g.param("beta_out").unwrap_or_default().to_vec();
                g.d_input
            }
            HeadCache::Gap(shape) => gap_backward(d_emb, *shape)?,
            HeadCache::Fc(c) => {
                let g = fc_head_backward(d_emb, c)?;
                grads.fc_weights = g.param("weights").unwrap_or_default().to_vec();
                grads.fc_bias = g.param("bias").unwrap_or_default().to_vec();
                g.d_input
            }
        };
        let mut d_pre = d_act;
        for (g, &z) in d_pre.data_mut().iter_mut().zip(cache.pre_activation.data()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let trunk = pointwise_conv_backward(&d_pre, &cache.trunk)?;
        grads.trunk = trunk.param("weights").unwrap_or_default().to_vec();
        Ok(grads)
    }

    /// Plain SGD step. Weight decay applies to weight matrices only.
    pub(crate) fn sgd_step(&mut self, grads: &Gradients, d_classifier: &Matrix, config: &ToyConfig) {
        let lr = config.lr;
        let wd = config.weight_decay;
        let decay_step = |w: &mut [f64], g: &[f64], lr: f64| {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * (g + wd * *w);
            }
        };
        decay_step(self.trunk.data_mut(), &grads.trunk, lr);
        decay_step(
            self.classifier.data_mut(),
            d_classifier.data(),
            lr * config.lr_head_multiplier,
        );
        match &mut self.head {
            HeadParams::Gnap { state } => {
                for (b, g) in state.entry.beta.iter_mut().zip(&grads.beta_in) {
                    *b -= lr * g;
                }
                for (b, g) in state.exit.beta.iter_mut().zip(&grads.beta_out) {
                    *b -= lr * g;
                }
            }
            HeadParams::Gap => {}
            HeadParams::Fc { weights, bias } => {
                decay_step(weights.data_mut(), &grads.fc_weights, lr);
                for (b, g) in bias.iter_mut().zip(&grads.fc_bias) {
                    *b -= lr * g;
                }
            }
        }
    }
}
