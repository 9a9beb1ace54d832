//! Shared fixtures for the criterion benchmarks.

use grtrack_core::config::ModelConfig;
use grtrack_core::encoder::{TokenKind, TokenMeta, Tokens};
use grtrack_core::pipeline::ModelParams;
use grtrack_core::{Graph, Rng, Tensor};

pub fn desk_model() -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig::desk();
    let mut rng = Rng::new(1);
    let params = ModelParams::init(&mut rng, &cfg).unwrap();
    (cfg, params)
}

/// Random embedded tokens of the given kind, outside any real image.
pub fn fake_tokens(g: &mut Graph, n: usize, dim: usize, kind: TokenKind, rng: &mut Rng) -> Tokens {
    let var = g.constant(Tensor::randn(&[n, dim], 1.0, rng));
    Tokens {
        var,
        meta: (0..n)
            .map(|i| TokenMeta {
                frame_id: 0,
                spatial_index: i as u32,
                kind,
            })
            .collect(),
    }
}
