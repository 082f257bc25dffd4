//! Frozen transformer vision encoder.
//!
//! Stands in for a large pre-trained 2D encoder: weights are drawn once from
//! a seeded stream and registered frozen, so they are bit-identical across
//! any number of training steps. Gradients still flow *through* the frozen
//! blocks into the learnable patch embedding upstream. Real weights can be
//! substituted by loading a checkpoint whose entries use the same names.

use crate::attention::{encoder_block, init_encoder_block};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug)]
pub struct VisionConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_vis: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_vis % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_vis {} not divisible by heads {}",
                self.d_vis, self.heads
            )));
        }
        Ok(())
    }
}

fn layer_prefix(i: usize) -> String {
    format!("vision.l{i}")
}

/// Sample the frozen encoder weights deterministically from the config seed.
pub fn init_frozen_vision<E: Element>(store: &mut ParamStore<E>, cfg: &VisionConfig) -> Result<()> {
    cfg.validate()?;
    let mut r = rng::stream(rng::derive_seed(cfg.seed, "vision"));
    for i in 0..cfg.layers {
        init_encoder_block(
            store,
            &layer_prefix(i),
            cfg.d_vis,
            cfg.d_vis * cfg.mlp_ratio,
            &mut r,
            true,
        )?;
    }
    Ok(())
}

/// Run the pre-norm encoder stack over vision tokens (rows, d_vis). Zero
/// layers is the identity. Row count is preserved.
pub fn encode_image<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    tokens: NodeId,
    cfg: &VisionConfig,
) -> Result<NodeId> {
    let shape = g.shape(tokens);
    if shape.len() != 2 || shape[1] != cfg.d_vis {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            lhs: shape.to_vec(),
            rhs: vec![shape.first().copied().unwrap_or(0), cfg.d_vis],
        });
    }
    let mut x = tokens;
    for i in 0..cfg.layers {
        x = encoder_block(g, store, x, cfg.heads, &layer_prefix(i), false, None)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_cfg(seed: u64) -> VisionConfig {
        VisionConfig {
            layers: 2,
            heads: 4,
            d_vis: 8,
            mlp_ratio: 4,
            seed,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        let cfg = toy_cfg(99);
        let mut a: ParamStore<f32> = ParamStore::new(0);
        let mut b: ParamStore<f32> = ParamStore::new(0);
        init_frozen_vision(&mut a, &cfg).unwrap();
        init_frozen_vision(&mut b, &cfg).unwrap();
        assert!(a.prefix_bit_eq(&b, "vision."));
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let mut a: ParamStore<f32> = ParamStore::new(0);
        let mut b: ParamStore<f32> = ParamStore::new(0);
        init_frozen_vision(&mut a, &toy_cfg(1)).unwrap();
        init_frozen_vision(&mut b, &toy_cfg(2)).unwrap();
        assert!(!a.prefix_bit_eq(&b, "vision."));
    }

    #[test]
    fn every_entry_is_frozen() {
        let mut store: ParamStore<f32> = ParamStore::new(0);
        init_frozen_vision(&mut store, &toy_cfg(7)).unwrap();
        assert!(store.iter().all(|(_, e)| e.frozen));
        assert!(store.len() > 0);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // per layer: attention 4d^2 + 4d, mlp 2*ratio*d^2 + (ratio+1)d,
        // two layer norms 4d; with ratio 4: 12d^2 + 13d per layer.
        let cfg = toy_cfg(3);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_frozen_vision(&mut store, &cfg).unwrap();
        let d = cfg.d_vis;
        let expected = cfg.layers * (12 * d * d + 13 * d);
        assert_eq!(store.total_scalars(), expected);
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = VisionConfig {
            layers: 0,
            ..toy_cfg(0)
        };
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_frozen_vision(&mut store, &cfg).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let t = Tensor::from_fn(vec![3, 8], |i| i as f64 * 0.1).unwrap();
        let x = g.constant(t.clone());
        let y = encode_image(&mut g, &store, x, &cfg).unwrap();
        assert!(g.tensor(y).bit_eq(&t));
    }

    #[test]
    fn output_preserves_row_count_and_is_deterministic() {
        let cfg = toy_cfg(42);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_frozen_vision(&mut store, &cfg).unwrap();
        let t = Tensor::from_fn(vec![5, 8], |i| ((i * 31 % 17) as f64) / 17.0).unwrap();
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(t.clone());
            let y = encode_image(&mut g, &store, x, &cfg).unwrap();
            g.tensor(y)
        };
        let y1 = run();
        let y2 = run();
        assert_eq!(y1.shape(), &[5, 8]);
        assert!(y1.bit_eq(&y2));
    }

    #[test]
    fn width_mismatch_rejected() {
        let cfg = toy_cfg(1);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_frozen_vision(&mut store, &cfg).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 6]));
        assert!(encode_image(&mut g, &store, x, &cfg).is_err());
    }
}
