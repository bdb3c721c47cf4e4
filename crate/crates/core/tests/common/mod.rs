#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tars_lab::encoders::{SceneObject, TokenSeq, VisualScene, NUM_SPECIAL};
use tars_lab::policy::ModelConfig;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 4,
        d_hidden: 5,
        max_len: 24,
        d_raw: 3,
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, d_raw: usize) -> VisualScene {
    let n = rng.random_range(1..=3);
    let objects = (0..n)
        .map(|i| SceneObject {
            object_id: i,
            feature: (0..d_raw).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    VisualScene::new(rng.random(), objects).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> TokenSeq {
    TokenSeq::new(
        (0..len)
            .map(|_| rng.random_range(NUM_SPECIAL..vocab))
            .collect(),
    )
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    v.iter().map(|x| x - z).collect()
}

pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `‖Re DFT_k(z[·, d])‖₂` over features, by the O(L²) definition, after
/// zero-padding `z` to `len` rows.
pub fn naive_spectrum(z: &tars_lab::numcore::Tensor, len: usize) -> Vec<f64> {
    let d = z.cols();
    let at = |t: usize, c: usize| if t < z.rows() { z.at(t, c) } else { 0.0 };
    (0..len)
        .map(|k| {
            (0..d)
                .map(|c| {
                    let re: f64 = (0..len)
                        .map(|t| {
                            at(t, c)
                                * (2.0 * std::f64::consts::PI * (k * t) as f64 / len as f64).cos()
                        })
                        .sum();
                    re * re
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
