//! Query-former bridge between image features and the language space.
//!
//! A bank of L learnable queries passes through N blocks of query
//! self-attention, cross-attention over the image features, and an MLP; the
//! result is a fixed L-row matrix however large the image is. A parallel
//! text transformer embeds record text and Q&A strings for the contrastive
//! objective (first-token pooling). A final linear projection maps query
//! outputs into the decoder embedding width as the visual prefix.
//!
//! The query stream and the text stream share no attention state.

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    encoder_block, init_attention, init_encoder_block, init_layer_norm, init_linear, init_mlp,
    layer_norm_affine, linear, mlp_forward, multi_head_attention,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng::{self, trunc_normal_tensor};
use crate::tensor::Element;

pub const QUERY_BANK: &str = "qformer.queries";
pub const PREFIX_PROJ: &str = "qformer.prefix_proj.w";
pub const TEXT_TOK_EMB: &str = "qformer.text.tok_emb";
pub const TEXT_POS: &str = "qformer.text.pos";

#[derive(Clone, Copy, Debug)]
pub struct QFormerConfig {
    /// Number of learnable queries (L).
    pub queries: usize,
    /// Query/text embedding width (d_e).
    pub d_e: usize,
    /// Blocks in each stream (N).
    pub layers: usize,
    pub heads: usize,
    /// Width of incoming image features; projected to d_e when different.
    pub d_vis: usize,
    pub mlp_ratio: usize,
    pub text_vocab: usize,
    pub max_text_len: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_e {} not divisible by heads {}",
                self.d_e, self.heads
            )));
        }
        Ok(())
    }

    pub fn needs_input_proj(&self) -> bool {
        self.d_vis != self.d_e
    }
}

fn img_layer(i: usize) -> String {
    format!("qformer.img.l{i}")
}

fn text_layer(i: usize) -> String {
    format!("qformer.text.l{i}")
}

pub fn init_qformer<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &QFormerConfig,
    lm_width: usize,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut r: ChaCha8Rng = rng::stream(rng::derive_seed(seed, "qformer"));
    store.insert(
        QUERY_BANK,
        trunc_normal_tensor(&mut r, vec![cfg.queries, cfg.d_e], 0.02),
        false,
    )?;
    if cfg.needs_input_proj() {
        init_linear(
            store,
            "qformer.in_proj.w",
            Some("qformer.in_proj.b"),
            cfg.d_vis,
            cfg.d_e,
            &mut r,
            false,
        )?;
    }
    let hidden = cfg.d_e * cfg.mlp_ratio;
    for i in 0..cfg.layers {
        let p = img_layer(i);
        init_layer_norm(store, &format!("{p}.ln1"), cfg.d_e, false)?;
        init_attention(store, &format!("{p}.attn_self"), cfg.d_e, &mut r, false)?;
        init_layer_norm(store, &format!("{p}.ln_cross"), cfg.d_e, false)?;
        init_attention(store, &format!("{p}.attn_cross"), cfg.d_e, &mut r, false)?;
        init_layer_norm(store, &format!("{p}.ln2"), cfg.d_e, false)?;
        init_mlp(store, &format!("{p}.mlp"), cfg.d_e, hidden, &mut r, false)?;
    }
    store.insert(
        TEXT_TOK_EMB,
        trunc_normal_tensor(&mut r, vec![cfg.text_vocab, cfg.d_e], 0.02),
        false,
    )?;
    store.insert(
        TEXT_POS,
        trunc_normal_tensor(&mut r, vec![cfg.max_text_len, cfg.d_e], 0.02),
        false,
    )?;
    for i in 0..cfg.layers {
        init_encoder_block(store, &text_layer(i), cfg.d_e, hidden, &mut r, false)?;
    }
    init_linear(store, PREFIX_PROJ, None, cfg.d_e, lm_width, &mut r, false)?;
    Ok(())
}

/// Image-grounded query encoding: (image rows, d_vis) -> (L, d_e).
pub fn encode_queries<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    image_feats: NodeId,
    cfg: &QFormerConfig,
) -> Result<NodeId> {
    let fs = g.shape(image_feats);
    if fs.len() != 2 || fs[1] != cfg.d_vis {
        return Err(Error::ShapeMismatch {
            op: "encode_queries",
            lhs: fs.to_vec(),
            rhs: vec![fs.first().copied().unwrap_or(0), cfg.d_vis],
        });
    }
    let feats = if cfg.needs_input_proj() {
        linear(
            g,
            store,
            image_feats,
            "qformer.in_proj.w",
            Some("qformer.in_proj.b"),
            None,
        )?
    } else {
        image_feats
    };
    let mut x = g.param(store, QUERY_BANK)?;
    for i in 0..cfg.layers {
        let p = img_layer(i);
        let normed = layer_norm_affine(g, store, x, &format!("{p}.ln1"))?;
        let self_attn = multi_head_attention(
            g,
            store,
            normed,
            normed,
            cfg.heads,
            &format!("{p}.attn_self"),
            false,
            None,
        )?;
        x = g.add(x, self_attn)?;
        let normed = layer_norm_affine(g, store, x, &format!("{p}.ln_cross"))?;
        let cross = multi_head_attention(
            g,
            store,
            normed,
            feats,
            cfg.heads,
            &format!("{p}.attn_cross"),
            false,
            None,
        )?;
        x = g.add(x, cross)?;
        let normed = layer_norm_affine(g, store, x, &format!("{p}.ln2"))?;
        let mlp = mlp_forward(g, store, normed, &format!("{p}.mlp"))?;
        x = g.add(x, mlp)?;
    }
    Ok(x)
}

/// Text encoding: token ids -> (sequence states, first-token pooled vector).
pub fn encode_text<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    ids: &[u32],
    cfg: &QFormerConfig,
) -> Result<(NodeId, NodeId)> {
    if ids.is_empty() {
        return Err(Error::invalid("encode_text requires at least one token"));
    }
    if ids.len() > cfg.max_text_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_text_len,
        });
    }
    let table = g.param(store, TEXT_TOK_EMB)?;
    let emb = g.embedding(table, ids)?;
    let pos_table = g.param(store, TEXT_POS)?;
    let pos = g.slice(pos_table, 0, 0, ids.len())?;
    let mut x = g.add(emb, pos)?;
    for i in 0..cfg.layers {
        x = encoder_block(g, store, x, cfg.heads, &text_layer(i), false, None)?;
    }
    let first = g.slice(x, 0, 0, 1)?;
    let pooled = g.reshape(first, vec![cfg.d_e])?;
    Ok((x, pooled))
}

/// Project query outputs (L, d_e) into the visual prefix (L, lm width).
pub fn project_prefix<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    query_outputs: NodeId,
) -> Result<NodeId> {
    let w = g.param(store, PREFIX_PROJ)?;
    g.matmul(query_outputs, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn micro_cfg(layers: usize) -> QFormerConfig {
        QFormerConfig {
            queries: 3,
            d_e: 4,
            layers,
            heads: 2,
            d_vis: 4,
            mlp_ratio: 2,
            text_vocab: 11,
            max_text_len: 16,
        }
    }

    fn rand_feats(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed);
        Tensor::from_fn(vec![rows, cols], |_| rng::uniform(&mut r, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn zero_layers_returns_query_bank() {
        let cfg = micro_cfg(0);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 5).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let feats = g.constant(rand_feats(6, 4, 1));
        let z = encode_queries(&mut g, &store, feats, &cfg).unwrap();
        assert!(g.tensor(z).bit_eq(store.tensor(QUERY_BANK).unwrap()));
    }

    #[test]
    fn output_rows_fixed_at_query_count_for_any_image_size() {
        let cfg = micro_cfg(2);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 9).unwrap();
        for rows in [1usize, 4, 17] {
            let mut g: Graph<f64> = Graph::new();
            let feats = g.constant(rand_feats(rows, 4, rows as u64));
            let z = encode_queries(&mut g, &store, feats, &cfg).unwrap();
            assert_eq!(g.shape(z), &[3, 4]);
        }
    }

    #[test]
    fn permuting_image_feature_rows_leaves_queries_unchanged() {
        let cfg = micro_cfg(2);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 13).unwrap();
        let feats = rand_feats(5, 4, 3);
        let mut permuted = feats.clone();
        for c in 0..4 {
            permuted.data_mut().swap(c, 16 + c); // rows 0 <-> 4
        }
        let run = |f: &Tensor<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let fi = g.constant(f.clone());
            let z = encode_queries(&mut g, &store, fi, &cfg).unwrap();
            g.tensor(z)
        };
        assert!(run(&feats).max_abs_diff(&run(&permuted)) < 1e-9);
    }

    #[test]
    fn input_projection_created_only_when_widths_differ() {
        let same = micro_cfg(1);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &same, 4, 2).unwrap();
        assert!(!store.contains("qformer.in_proj.w"));

        let wide = QFormerConfig {
            d_vis: 6,
            ..micro_cfg(1)
        };
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &wide, 4, 2).unwrap();
        assert!(store.contains("qformer.in_proj.w"));
        let mut g: Graph<f64> = Graph::new();
        let feats = g.constant(rand_feats(5, 6, 8));
        let z = encode_queries(&mut g, &store, feats, &wide).unwrap();
        assert_eq!(g.shape(z), &[3, 4]);
    }

    #[test]
    fn single_token_zero_layers_pools_embedding_plus_position() {
        let cfg = micro_cfg(0);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 21).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let (_, pooled) = encode_text(&mut g, &store, &[7], &cfg).unwrap();
        let emb = store.tensor(TEXT_TOK_EMB).unwrap();
        let pos = store.tensor(TEXT_POS).unwrap();
        for j in 0..4 {
            let expect = emb.data()[7 * 4 + j] + pos.data()[j];
            assert!((g.data(pooled)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_sequences_pool_identically() {
        let cfg = micro_cfg(2);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 33).unwrap();
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let (_, pooled) = encode_text(&mut g, &store, &[1, 5, 2, 9], &cfg).unwrap();
            g.tensor(pooled)
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let cfg = micro_cfg(1);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 4, 1).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let err = encode_text(&mut g, &store, &[11], &cfg);
        assert!(matches!(err, Err(Error::OutOfVocab { id: 11, .. })));
    }

    #[test]
    fn prefix_projection_shapes_and_identity() {
        let cfg = micro_cfg(0);
        let mut store: ParamStore<f64> = ParamStore::new(0);
        init_qformer(&mut store, &cfg, 8, 2).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(rand_feats(3, 4, 5));
        let prefix = project_prefix(&mut g, &store, z).unwrap();
        assert_eq!(g.shape(prefix), &[3, 8]);

        // zero projection gives a zero prefix
        let mut zero_store: ParamStore<f64> = ParamStore::new(0);
        zero_store
            .insert(PREFIX_PROJ, Tensor::zeros(vec![4, 8]), false)
            .unwrap();
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(rand_feats(3, 4, 6));
        let prefix = project_prefix(&mut g, &zero_store, z).unwrap();
        assert!(g.data(prefix).iter().all(|&v| v == 0.0));

        // identity projection returns the query outputs
        let mut id_store: ParamStore<f64> = ParamStore::new(0);
        let mut w = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        id_store.insert(PREFIX_PROJ, w, false).unwrap();
        let zt = rand_feats(2, 4, 7);
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(zt.clone());
        let prefix = project_prefix(&mut g, &id_store, z).unwrap();
        assert!(g.tensor(prefix).max_abs_diff(&zt) < 1e-12);
    }
}
