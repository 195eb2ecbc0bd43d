use ndarray::{Array, ArrayD, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::vit::block_shapes;
use crate::error::Result;
use crate::params::{ParameterStore, StoreMeta};
use crate::rng::{self, domain};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fill {
    Xavier,
    Ones,
    Zeros,
    Token,
}

fn fill_for(name: &str, shape: &[usize]) -> Fill {
    if name.ends_with("mask_token") {
        Fill::Token
    } else if name.ends_with(".bias") {
        Fill::Zeros
    } else if shape.len() == 1 {
        Fill::Ones
    } else {
        Fill::Xavier
    }
}

/// Every parameter of the model described by `cfg`, with its shape.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("encoder.patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("encoder.patch_embed.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.depth {
        out.extend(block_shapes("encoder", i, d, cfg.hidden_dim()));
    }
    out.push(("encoder.norm.weight".into(), vec![d]));
    out.push(("encoder.norm.bias".into(), vec![d]));
    if cfg.use_decoder {
        let dd = cfg.decoder_dim;
        out.push(("decoder.embed.weight".into(), vec![d, dd]));
        out.push(("decoder.embed.bias".into(), vec![dd]));
        out.push(("decoder.mask_token".into(), vec![dd]));
        for i in 0..cfg.decoder_depth {
            out.extend(block_shapes("decoder", i, dd, cfg.decoder_hidden_dim()));
        }
        out.push(("decoder.norm.weight".into(), vec![dd]));
        out.push(("decoder.norm.bias".into(), vec![dd]));
    } else {
        out.push(("encoder.mask_token".into(), vec![d]));
    }
    out.push(("head.weight".into(), vec![cfg.head_input_dim(), cfg.projection_dim]));
    out.push(("head.bias".into(), vec![cfg.projection_dim]));
    out
}

/// Xavier-uniform bound for a `fan_in × fan_out` linear map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn name_key(name: &str) -> u64 {
    // FNV-1a; the stream for a parameter depends only on its name.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Fresh weights for `cfg`: Xavier-uniform linear maps, zero biases, unit
/// LayerNorm gains and `N(0, 0.02²)` mask tokens. Each parameter draws from
/// its own stream, keyed by `seed` and its name.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for (name, shape) in parameter_shapes(cfg) {
        let mut r = rng::stream(seed, &[domain::INIT, name_key(&name)]);
        let value: ArrayD<f64> = match fill_for(&name, &shape) {
            Fill::Zeros => ArrayD::zeros(IxDyn(&shape)),
            Fill::Ones => ArrayD::ones(IxDyn(&shape)),
            Fill::Token => {
                let normal = Normal::new(0.0, 0.02).expect("valid normal");
                Array::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut r))
            }
            Fill::Xavier => {
                let bound = xavier_bound(shape[0], shape[1]);
                Array::from_shape_simple_fn(IxDyn(&shape), || r.gen_range(-bound..=bound))
            }
        };
        store.insert(name, value);
    }
    store.meta = StoreMeta {
        config_hash: cfg.config_hash(),
        init_seed: seed,
    };
    Ok(store)
}
