//! Shared transformer building blocks: affine layer norm, linear layers,
//! multi-head attention (self or cross, optionally causal, optionally with
//! low-rank adapters on the query/value projections), and the GELU MLP.
//!
//! Parameters are addressed by dotted names under a caller-supplied prefix,
//! so the same code serves the frozen vision encoder, the query former, the
//! text encoder, and the causal decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::rng::trunc_normal_tensor;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Fill value for masked attention scores; large enough that softmax assigns
/// exactly zero weight in f32 after max subtraction.
pub const MASK_FILL: f64 = -1e9;

/// Low-rank update wiring for one attention projection: parameter names for
/// the A (r, d_in) and B (d_out, r) factors plus the alpha/r scale.
#[derive(Clone, Debug)]
pub struct LoraWiring {
    pub a_name: String,
    pub b_name: String,
    pub scale: f64,
}

/// Adapter wiring for one attention block.
#[derive(Clone, Debug, Default)]
pub struct AttnLora {
    pub q: Option<LoraWiring>,
    pub v: Option<LoraWiring>,
}

pub fn init_linear<E: Element>(
    store: &mut ParamStore<E>,
    w_name: &str,
    b_name: Option<&str>,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
    frozen: bool,
) -> Result<()> {
    store.insert(w_name, trunc_normal_tensor(rng, vec![d_in, d_out], 0.02), frozen)?;
    if let Some(b) = b_name {
        store.insert(b, Tensor::zeros(vec![d_out]), frozen)?;
    }
    Ok(())
}

pub fn init_layer_norm<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    d: usize,
    frozen: bool,
) -> Result<()> {
    store.insert(
        &format!("{prefix}.gain"),
        Tensor::full(vec![d], E::ONE)?,
        frozen,
    )?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![d]), frozen)?;
    Ok(())
}

pub fn init_attention<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
    frozen: bool,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(
            store,
            &format!("{prefix}.{proj}"),
            Some(&format!("{prefix}.{}", proj.replace('w', "b"))),
            d,
            d,
            rng,
            frozen,
        )?;
    }
    Ok(())
}

pub fn init_mlp<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
    frozen: bool,
) -> Result<()> {
    init_linear(
        store,
        &format!("{prefix}.w1"),
        Some(&format!("{prefix}.b1")),
        d,
        hidden,
        rng,
        frozen,
    )?;
    init_linear(
        store,
        &format!("{prefix}.w2"),
        Some(&format!("{prefix}.b2")),
        hidden,
        d,
        rng,
        frozen,
    )
}

/// x @ W (+ bias), with an optional low-rank update W + (alpha/r) B A
/// realized as x @ W + scale * (x A^T) B^T so B = 0 reproduces the base
/// matrix bit-for-bit.
pub fn linear<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    w_name: &str,
    b_name: Option<&str>,
    lora: Option<&LoraWiring>,
) -> Result<NodeId> {
    let w = g.param(store, w_name)?;
    let mut out = g.matmul(x, w)?;
    if let Some(wiring) = lora {
        let a = g.param(store, &wiring.a_name)?;
        let b = g.param(store, &wiring.b_name)?;
        let a_t = g.transpose(a)?;
        let b_t = g.transpose(b)?;
        let xa = g.matmul(x, a_t)?;
        let xab = g.matmul(xa, b_t)?;
        let scaled = g.scale(xab, E::from_f64(wiring.scale))?;
        out = g.add(out, scaled)?;
    }
    match b_name {
        Some(b) => {
            let bias = g.param(store, b)?;
            g.add_row(out, bias)
        }
        None => Ok(out),
    }
}

/// Affine layer norm over the last axis.
pub fn layer_norm_affine<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let axis = g.shape(x).len() - 1;
    let normed = g.layer_norm(x, axis, LN_EPS)?;
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    let scaled = g.mul_row(normed, gain)?;
    g.add_row(scaled, bias)
}

/// Multi-head attention. `q_in` is (n, d); `kv_in` is (m, d). With `causal`
/// set (requires n == m) position i attends only to positions <= i.
pub fn multi_head_attention<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    prefix: &str,
    causal: bool,
    lora: Option<&AttnLora>,
) -> Result<NodeId> {
    let d = *g.shape(q_in).last().ok_or_else(|| Error::invalid("attention on scalar"))?;
    if d % heads != 0 {
        return Err(Error::invalid(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let n = g.shape(q_in)[0];
    let m = g.shape(kv_in)[0];
    if causal && n != m {
        return Err(Error::invalid("causal attention requires square attention"));
    }
    let dh = d / heads;
    let q_lora = lora.and_then(|l| l.q.as_ref());
    let v_lora = lora.and_then(|l| l.v.as_ref());
    let q = linear(g, store, q_in, &format!("{prefix}.wq"), Some(&format!("{prefix}.bq")), q_lora)?;
    let k = linear(g, store, kv_in, &format!("{prefix}.wk"), Some(&format!("{prefix}.bk")), None)?;
    let v = linear(g, store, kv_in, &format!("{prefix}.wv"), Some(&format!("{prefix}.bv")), v_lora)?;

    let causal_mask: Vec<bool> = if causal {
        (0..n * m).map(|idx| idx % m > idx / m).collect()
    } else {
        Vec::new()
    };

    let inv_sqrt_dh = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kh_t = g.transpose(kh)?;
        let scores = g.matmul(qh, kh_t)?;
        let scores = g.scale(scores, inv_sqrt_dh)?;
        let scores = if causal {
            g.masked_fill(scores, &causal_mask, E::from_f64(MASK_FILL))?
        } else {
            scores
        };
        let attn = g.softmax(scores, 1)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(1, &head_outputs)?;
    linear(g, store, merged, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")), None)
}

/// Pre-norm encoder block: x + attn(ln1(x)), then x + mlp(ln2(x)).
pub fn encoder_block<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    heads: usize,
    prefix: &str,
    causal: bool,
    lora: Option<&AttnLora>,
) -> Result<NodeId> {
    let normed = layer_norm_affine(g, store, x, &format!("{prefix}.ln1"))?;
    let attn = multi_head_attention(g, store, normed, normed, heads, &format!("{prefix}.attn"), causal, lora)?;
    let x = g.add(x, attn)?;
    let normed = layer_norm_affine(g, store, x, &format!("{prefix}.ln2"))?;
    let mlp = mlp_forward(g, store, normed, &format!("{prefix}.mlp"))?;
    g.add(x, mlp)
}

pub fn mlp_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let h = linear(g, store, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")), None)?;
    let h = g.gelu(h)?;
    linear(g, store, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")), None)
}

pub fn init_encoder_block<E: Element>(
    store: &mut ParamStore<E>,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
    rng: &mut ChaCha8Rng,
    frozen: bool,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d, frozen)?;
    init_attention(store, &format!("{prefix}.attn"), d, rng, frozen)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d, frozen)?;
    init_mlp(store, &format!("{prefix}.mlp"), d, mlp_hidden, rng, frozen)
}
