//! Forward and hand-derived backward passes for the norm-aware pooling block
//! and the heads it is compared against.

mod batch_norm;
mod fc;
mod gap;
mod gnap;
mod pointwise;
mod reweight;

pub use batch_norm::{
    bn_channel_backward, bn_channel_forward, bn_feature_backward, bn_feature_forward, BnAxis,
    BnCache, BnSettings, FixedGammaBn, Mode, DEFAULT_EPS_BN, DEFAULT_MOMENTUM,
};
pub use fc::{fc_head_backward, fc_head_forward, FcCache};
pub use gap::{gap_backward, gap_forward};
pub use gnap::{gnap_backward, gnap_forward, gnap_infer, GnapCache, GnapState};
pub use pointwise::{pointwise_conv_backward, pointwise_conv_forward, PointwiseCache};
pub use reweight::{
    local_norms, mean_norm, reweight, reweight_backward, reweight_owned, NormCache, NormGrid, DEFAULT_EPS_NORM,
};

use crate::tensor::FeatureMap;

/// Gradient with respect to one learnable parameter, flattened in the
/// parameter's own storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub name: &'static str,
    pub values: Vec<f64>,
}

/// Result of a backward pass: the gradient for the forward input plus one
/// entry per learnable parameter of the producing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle<D = FeatureMap> {
    pub d_input: D,
    pub d_params: Vec<ParamGrad>,
}

impl<D> GradBundle<D> {
    pub fn input_only(d_input: D) -> Self {
        GradBundle {
            d_input,
            d_params: Vec::new(),
        }
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.d_params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.values.as_slice())
    }
}
