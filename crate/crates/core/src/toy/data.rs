use crate::tensor::{FeatureMap, NormalStream, Shape4};

use super::ToyConfig;

const TEMPLATE_SALT: u64 = 0x7e3f_1a2b_0000_0001;
const STEP_SALT: u64 = 0x51d3_8c4e_0000_0002;

pub(crate) fn stream_seed(seed: u64, salt: u64, index: u64) -> u64 {
    seed ^ salt ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// One synthetic face: a class template plus noise, with some positions
/// attenuated.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub map: FeatureMap,
    pub class_id: usize,
    pub hard_mask: Vec<bool>,
    pub attenuation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub inputs: FeatureMap,
    pub labels: Vec<usize>,
    pub hard_masks: Vec<Vec<bool>>,
    pub attenuations: Vec<f64>,
}

impl SyntheticBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, k: usize) -> SyntheticSample {
        let s = self.inputs.shape();
        let map = FeatureMap::from_vec(
            Shape4::new(1, s.c, s.h, s.w),
            self.inputs.sample(k).to_vec(),
        )
        .expect("sample shape");
        SyntheticSample {
            map,
            class_id: self.labels[k],
            hard_mask: self.hard_masks[k].clone(),
            attenuation: self.attenuations[k],
        }
    }
}

pub(crate) fn class_templates(config: &ToyConfig) -> FeatureMap {
    FeatureMap::randn_seeded(
        (config.classes, config.in_channels, config.height, config.width),
        stream_seed(config.seed, TEMPLATE_SALT, 0),
        1.0,
    )
    .expect("validated config")
}

/// Deterministic batch for `(config.seed, step)`.
pub fn generate_batch(config: &ToyConfig, step: u64) -> SyntheticBatch {
    generate(config, config.batch, stream_seed(config.seed, STEP_SALT, step))
}

pub(crate) fn generate(config: &ToyConfig, count: usize, stream: u64) -> SyntheticBatch {
    let templates = class_templates(config);
    let shape = Shape4::new(count, config.in_channels, config.height, config.width);
    let hw = shape.spatial();
    let hard_count = (config.hard_fraction * hw as f64).round() as usize;
    let mut rng = NormalStream::new(stream);

    let mut data = Vec::with_capacity(count * shape.sample_len());
    let mut labels = Vec::with_capacity(count);
    let mut hard_masks = Vec::with_capacity(count);
    let mut attenuations = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.below(config.classes);
        let mut order: Vec<usize> = (0..hw).collect();
        for k in 0..hard_count.min(hw) {
            let r = k + rng.below(hw - k);
            order.swap(k, r);
        }
        let mut mask = vec![false; hw];
        for &p in &order[..hard_count.min(hw)] {
            mask[p] = true;
        }
        let (lo, hi) = config.attenuation;
        let factor = rng.uniform_in(lo, hi);
        let template = templates.sample(class_id);
        for (k, &t) in template.iter().enumerate() {
            let v = t + config.noise_std * rng.next();
            data.push(if mask[k % hw] { factor * v } else { v });
        }
        labels.push(class_id);
        hard_masks.push(mask);
        attenuations.push(factor);
    }
    SyntheticBatch {
        inputs: FeatureMap::from_vec(shape, data).expect("shape"),
        labels,
        hard_masks,
        attenuations,
    }
}
