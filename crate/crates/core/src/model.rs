//! Tiny Llama-style decoder-only transformer with explicit backward passes.
//!
//! Pre-norm blocks, gated SiLU MLP, learned absolute position embeddings,
//! causal single- or multi-head attention. Every projection that an adapter
//! can target is addressable as "layer.{i}.{name}" with name one of q_proj,
//! k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj.
//!
//! Weights are plain f64 tensors of shape [d_out, d_in]; a projection applies
//! y = x W^T with one sequence position per row. Adapters add their delta on
//! the activation path so the base weight never changes unless merged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{embedding_bwd, embedding_fwd, rmsnorm_bwd, rmsnorm_fwd, silu_bwd, silu_fwd};
use crate::lora::{delta_backward, delta_forward_cached, AdapterGrads, DeltaCache, LoraSet};
use crate::rng::Rng;
use crate::tensor::{matmul, softmax_in_place, Tensor};

pub const PROJECTION_NAMES: [&str; 7] = [
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    /// Dimensions sized for the bundled synthetic corpus (29-token
    /// vocabulary) on desk-scale hardware.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 29,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

const INIT_STD: f64 = 0.02;

impl DecoderModel {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                q_proj: Tensor::randn(&[d, d], INIT_STD, rng),
                k_proj: Tensor::randn(&[d, d], INIT_STD, rng),
                v_proj: Tensor::randn(&[d, d], INIT_STD, rng),
                o_proj: Tensor::randn(&[d, d], INIT_STD, rng),
                gate_proj: Tensor::randn(&[ff, d], INIT_STD, rng),
                up_proj: Tensor::randn(&[ff, d], INIT_STD, rng),
                down_proj: Tensor::randn(&[d, ff], INIT_STD, rng),
                attn_norm: Tensor::from_vec(&[d], vec![1.0; d]).expect("shape"),
                mlp_norm: Tensor::from_vec(&[d], vec![1.0; d]).expect("shape"),
            })
            .collect();
        Ok(DecoderModel {
            config: *config,
            tok_emb: Tensor::randn(&[config.vocab_size, d], INIT_STD, rng),
            pos_emb: Tensor::randn(&[config.max_seq, d], INIT_STD, rng),
            layers,
            final_norm: Tensor::from_vec(&[d], vec![1.0; d]).expect("shape"),
            // The unembedding uses 1/sqrt(d) scale: the final norm pins the
            // hidden state to unit RMS, so a smaller head would cap logit
            // magnitudes and leave the frozen-base loss floor unreachably
            // high for adapter-only fine-tuning.
            head: Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
        })
    }

    fn parse_path<'a>(&self, path: &'a str) -> Result<(usize, &'a str)> {
        let bad = || Error::InvalidArgument(format!("unknown projection path {path:?}"));
        let rest = path.strip_prefix("layer.").ok_or_else(bad)?;
        let (idx, name) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = idx.parse().map_err(|_| bad())?;
        if layer >= self.layers.len() || !PROJECTION_NAMES.contains(&name) {
            return Err(bad());
        }
        Ok((layer, name))
    }

    pub fn projection(&self, path: &str) -> Result<&Tensor> {
        let (layer, name) = self.parse_path(path)?;
        let l = &self.layers[layer];
        Ok(match name {
            "q_proj" => &l.q_proj,
            "k_proj" => &l.k_proj,
            "v_proj" => &l.v_proj,
            "o_proj" => &l.o_proj,
            "gate_proj" => &l.gate_proj,
            "up_proj" => &l.up_proj,
            "down_proj" => &l.down_proj,
            _ => unreachable!(),
        })
    }

    pub fn projection_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        let (layer, name) = self.parse_path(path)?;
        let l = &mut self.layers[layer];
        Ok(match name {
            "q_proj" => &mut l.q_proj,
            "k_proj" => &mut l.k_proj,
            "v_proj" => &mut l.v_proj,
            "o_proj" => &mut l.o_proj,
            "gate_proj" => &mut l.gate_proj,
            "up_proj" => &mut l.up_proj,
            "down_proj" => &mut l.down_proj,
            _ => unreachable!(),
        })
    }

    /// (d_out, d_in) of a named projection.
    pub fn projection_dims(&self, path: &str) -> Result<(usize, usize)> {
        let w = self.projection(path)?;
        Ok((w.rows(), w.cols()))
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerCache {
    attn_in: Tensor,
    attn_normed: Tensor,
    attn_rms: Vec<f64>,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head causal attention probabilities, each [T, T].
    probs: Vec<Tensor>,
    /// Concatenated per-head context, the o_proj input.
    ctx: Tensor,
    mlp_in: Tensor,
    mlp_normed: Tensor,
    mlp_rms: Vec<f64>,
    gate_pre: Tensor,
    up_out: Tensor,
    silu_gate: Tensor,
    gated: Tensor,
    deltas: BTreeMap<String, DeltaCache>,
}

#[derive(Debug, Clone)]
pub struct SeqCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    final_in: Tensor,
    final_rms: Vec<f64>,
    final_normed: Tensor,
}

/// Saved activations of one forward call, sufficient for an exact backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    seqs: Vec<SeqCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }
}

fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    matmul(x, &w.transpose())
}

struct ProjCtx<'a> {
    adapters: Option<&'a LoraSet>,
    layer: usize,
    training: bool,
}

impl<'a> ProjCtx<'a> {
    fn apply(
        &self,
        name: &str,
        w: &Tensor,
        x: &Tensor,
        rng: &mut Rng,
        deltas: &mut BTreeMap<String, DeltaCache>,
    ) -> Result<Tensor> {
        let mut y = linear(x, w)?;
        if let Some(set) = self.adapters {
            let path = format!("layer.{}.{}", self.layer, name);
            if let Some(adapter) = set.adapters.get(&path) {
                let (delta, cache) = delta_forward_cached(adapter, x, self.training, rng)?;
                y.add_assign(&delta)?;
                deltas.insert(name.to_string(), cache);
            }
        }
        Ok(y)
    }
}

/// Full forward over a batch of (possibly ragged) token sequences.
///
/// `dropout_rng` being `Some` switches training mode on (adapter dropout
/// active); `None` is deterministic evaluation.
pub fn forward(
    model: &DecoderModel,
    batch: &[Vec<usize>],
    adapters: Option<&LoraSet>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Vec<Tensor>, ForwardCache)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut seqs = Vec::with_capacity(batch.len());
    let mut fallback = Rng::new(0);
    let training = dropout_rng.is_some();
    for tokens in batch {
        let rng: &mut Rng = match dropout_rng.as_deref_mut() {
            Some(r) => r,
            None => &mut fallback,
        };
        let (l, c) = forward_seq(model, tokens, adapters, training, rng)?;
        logits.push(l);
        seqs.push(c);
    }
    Ok((logits, ForwardCache { seqs }))
}

fn forward_seq(
    model: &DecoderModel,
    tokens: &[usize],
    adapters: Option<&LoraSet>,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, SeqCache)> {
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::InvalidArgument("forward: empty token sequence".into()));
    }
    if t_len > model.config.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_seq {}",
            t_len, model.config.max_seq
        )));
    }
    let d = model.config.d_model;
    let n_heads = model.config.n_heads;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let tok = embedding_fwd(&model.tok_emb, tokens)?;
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = embedding_fwd(&model.pos_emb, &positions)?;
    let mut h = tok;
    h.add_assign(&pos)?;

    let mut layer_caches = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let ctx_proj = ProjCtx {
            adapters,
            layer: li,
            training,
        };
        let mut deltas = BTreeMap::new();

        let attn_in = h.clone();
        let (attn_normed, attn_rms) = rmsnorm_fwd(&attn_in, &layer.attn_norm)?;
        let q = ctx_proj.apply("q_proj", &layer.q_proj, &attn_normed, rng, &mut deltas)?;
        let k = ctx_proj.apply("k_proj", &layer.k_proj, &attn_normed, rng, &mut deltas)?;
        let v = ctx_proj.apply("v_proj", &layer.v_proj, &attn_normed, rng, &mut deltas)?;

        let mut probs = Vec::with_capacity(n_heads);
        let mut ctx = Tensor::zeros(&[t_len, d]);
        for head in 0..n_heads {
            let off = head * d_head;
            let mut p = Tensor::zeros(&[t_len, t_len]);
            for t in 0..t_len {
                // Causal scores for positions u <= t only.
                let mut row = vec![0.0; t + 1];
                for (u, r) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for i in 0..d_head {
                        s += q.at(t, off + i) * k.at(u, off + i);
                    }
                    *r = s * scale;
                }
                softmax_in_place(&mut row);
                for (u, &pv) in row.iter().enumerate() {
                    *p.at_mut(t, u) = pv;
                    for i in 0..d_head {
                        *ctx.at_mut(t, off + i) += pv * v.at(u, off + i);
                    }
                }
            }
            probs.push(p);
        }

        let attn_out = ctx_proj.apply("o_proj", &layer.o_proj, &ctx, rng, &mut deltas)?;
        let mut mlp_in = attn_in.clone();
        mlp_in.add_assign(&attn_out)?;

        let (mlp_normed, mlp_rms) = rmsnorm_fwd(&mlp_in, &layer.mlp_norm)?;
        let gate_pre = ctx_proj.apply("gate_proj", &layer.gate_proj, &mlp_normed, rng, &mut deltas)?;
        let up_out = ctx_proj.apply("up_proj", &layer.up_proj, &mlp_normed, rng, &mut deltas)?;
        let silu_gate = silu_fwd(&gate_pre);
        let mut gated = silu_gate.clone();
        for (g, &u) in gated.data_mut().iter_mut().zip(up_out.data()) {
            *g *= u;
        }
        let mlp_out = ctx_proj.apply("down_proj", &layer.down_proj, &gated, rng, &mut deltas)?;
        let mut next = mlp_in.clone();
        next.add_assign(&mlp_out)?;

        layer_caches.push(LayerCache {
            attn_in,
            attn_normed,
            attn_rms,
            q,
            k,
            v,
            probs,
            ctx,
            mlp_in,
            mlp_normed,
            mlp_rms,
            gate_pre,
            up_out,
            silu_gate,
            gated,
            deltas,
        });
        h = next;
    }

    let final_in = h;
    let (final_normed, final_rms) = rmsnorm_fwd(&final_in, &model.final_norm)?;
    let logits = linear(&final_normed, &model.head)?;

    Ok((
        logits,
        SeqCache {
            tokens: tokens.to_vec(),
            layers: layer_caches,
            final_in,
            final_rms,
            final_normed,
        },
    ))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ModelGrads {
    fn zeros_like(model: &DecoderModel) -> Self {
        ModelGrads {
            tok_emb: Tensor::zeros(model.tok_emb.shape()),
            pos_emb: Tensor::zeros(model.pos_emb.shape()),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    q_proj: Tensor::zeros(l.q_proj.shape()),
                    k_proj: Tensor::zeros(l.k_proj.shape()),
                    v_proj: Tensor::zeros(l.v_proj.shape()),
                    o_proj: Tensor::zeros(l.o_proj.shape()),
                    gate_proj: Tensor::zeros(l.gate_proj.shape()),
                    up_proj: Tensor::zeros(l.up_proj.shape()),
                    down_proj: Tensor::zeros(l.down_proj.shape()),
                    attn_norm: Tensor::zeros(l.attn_norm.shape()),
                    mlp_norm: Tensor::zeros(l.mlp_norm.shape()),
                })
                .collect(),
            final_norm: Tensor::zeros(model.final_norm.shape()),
            head: Tensor::zeros(model.head.shape()),
        }
    }
}

/// Gradients from one backward call: adapter factor gradients for every
/// targeted projection, plus base-parameter gradients when requested.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub base: Option<ModelGrads>,
    pub adapters: BTreeMap<String, AdapterGrads>,
}

fn add_adapter_grads(
    acc: &mut BTreeMap<String, AdapterGrads>,
    path: String,
    g: AdapterGrads,
) -> Result<()> {
    match acc.get_mut(&path) {
        Some(existing) => {
            existing.d_b.add_assign(&g.d_b)?;
            existing.d_a.add_assign(&g.d_a)?;
        }
        None => {
            acc.insert(path, g);
        }
    }
    Ok(())
}

/// Backward of one projection y = x W^T (+ adapter delta). Returns dx;
/// accumulates dW (when base grads are wanted) and adapter factor grads.
#[allow(clippy::too_many_arguments)]
fn proj_bwd(
    adapters: Option<&LoraSet>,
    layer: usize,
    name: &str,
    w: &Tensor,
    x: &Tensor,
    dy: &Tensor,
    cache: &LayerCache,
    dw: Option<&mut Tensor>,
    adapter_grads: &mut BTreeMap<String, AdapterGrads>,
) -> Result<Tensor> {
    if let Some(dw) = dw {
        dw.add_assign(&matmul(&dy.transpose(), x)?)?;
    }
    let mut dx = matmul(dy, w)?;
    if let Some(set) = adapters {
        let path = format!("layer.{layer}.{name}");
        if let Some(adapter) = set.adapters.get(&path) {
            let delta_cache = cache.deltas.get(name).ok_or_else(|| {
                Error::State(format!(
                    "missing delta cache for {path} (cache/adapter mismatch)"
                ))
            })?;
            let (dxa, ag) = delta_backward(adapter, delta_cache, dy)?;
            dx.add_assign(&dxa)?;
            add_adapter_grads(adapter_grads, path, ag)?;
        }
    }
    Ok(dx)
}

/// Backward through the whole model given per-sequence logit gradients.
///
/// `compute_base` controls whether gradients for the frozen base parameters
/// are produced; adapter-only training skips them.
pub fn backward(
    model: &DecoderModel,
    cache: &ForwardCache,
    dlogits: &[Tensor],
    adapters: Option<&LoraSet>,
    compute_base: bool,
) -> Result<GradSet> {
    if dlogits.len() != cache.seqs.len() {
        return Err(Error::ShapeMismatch {
            context: "backward batch",
            lhs: vec![dlogits.len()],
            rhs: vec![cache.seqs.len()],
        });
    }
    let mut base = compute_base.then(|| ModelGrads::zeros_like(model));
    let mut adapter_grads = BTreeMap::new();
    for (dl, seq) in dlogits.iter().zip(&cache.seqs) {
        backward_seq(model, seq, dl, adapters, &mut base, &mut adapter_grads)?;
    }
    Ok(GradSet {
        base,
        adapters: adapter_grads,
    })
}

fn backward_seq(
    model: &DecoderModel,
    cache: &SeqCache,
    dlogits: &Tensor,
    adapters: Option<&LoraSet>,
    base: &mut Option<ModelGrads>,
    adapter_grads: &mut BTreeMap<String, AdapterGrads>,
) -> Result<()> {
    let t_len = cache.tokens.len();
    if dlogits.rows() != t_len || dlogits.cols() != model.config.vocab_size {
        return Err(Error::ShapeMismatch {
            context: "backward dlogits",
            lhs: dlogits.shape().to_vec(),
            rhs: vec![t_len, model.config.vocab_size],
        });
    }
    let d = model.config.d_model;
    let n_heads = model.config.n_heads;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    // Head: logits = final_normed * head^T.
    if let Some(b) = base.as_mut() {
        b.head
            .add_assign(&matmul(&dlogits.transpose(), &cache.final_normed)?)?;
    }
    let d_final_normed = matmul(dlogits, &model.head)?;
    let (mut dh, d_final_gain) = rmsnorm_bwd(
        &cache.final_in,
        &model.final_norm,
        &cache.final_rms,
        &d_final_normed,
    )?;
    if let Some(b) = base.as_mut() {
        b.final_norm.add_assign(&d_final_gain)?;
    }

    for (li, layer) in model.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];

        // --- MLP block: out = mlp_in + down(silu(gate(x)) * up(x)) ---
        let d_down_out = dh.clone();
        let mut d_mlp_in = dh;
        let d_gated = proj_bwd(
            adapters,
            li,
            "down_proj",
            &layer.down_proj,
            &lc.gated,
            &d_down_out,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].down_proj),
            adapter_grads,
        )?;
        let mut d_silu = d_gated.clone();
        for (v, &u) in d_silu.data_mut().iter_mut().zip(lc.up_out.data()) {
            *v *= u;
        }
        let mut d_up = d_gated;
        for (v, &s) in d_up.data_mut().iter_mut().zip(lc.silu_gate.data()) {
            *v *= s;
        }
        let d_gate_pre = silu_bwd(&lc.gate_pre, &d_silu)?;

        let mut d_mlp_normed = proj_bwd(
            adapters,
            li,
            "gate_proj",
            &layer.gate_proj,
            &lc.mlp_normed,
            &d_gate_pre,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].gate_proj),
            adapter_grads,
        )?;
        let d2 = proj_bwd(
            adapters,
            li,
            "up_proj",
            &layer.up_proj,
            &lc.mlp_normed,
            &d_up,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].up_proj),
            adapter_grads,
        )?;
        d_mlp_normed.add_assign(&d2)?;
        let (d_mlp_in2, d_mlp_gain) =
            rmsnorm_bwd(&lc.mlp_in, &layer.mlp_norm, &lc.mlp_rms, &d_mlp_normed)?;
        d_mlp_in.add_assign(&d_mlp_in2)?;
        if let Some(b) = base.as_mut() {
            b.layers[li].mlp_norm.add_assign(&d_mlp_gain)?;
        }

        // --- Attention block: mlp_in = attn_in + o(ctx) ---
        let d_attn_out = d_mlp_in.clone();
        let mut d_attn_in = d_mlp_in;
        let d_ctx = proj_bwd(
            adapters,
            li,
            "o_proj",
            &layer.o_proj,
            &lc.ctx,
            &d_attn_out,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].o_proj),
            adapter_grads,
        )?;

        let mut dq = Tensor::zeros(&[t_len, d]);
        let mut dk = Tensor::zeros(&[t_len, d]);
        let mut dv = Tensor::zeros(&[t_len, d]);
        for head in 0..n_heads {
            let off = head * d_head;
            let p = &lc.probs[head];
            for t in 0..t_len {
                // dp over the causal window, dv accumulation.
                let mut dp = vec![0.0; t + 1];
                for (u, dpu) in dp.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for i in 0..d_head {
                        s += d_ctx.at(t, off + i) * lc.v.at(u, off + i);
                        *dv.at_mut(u, off + i) += p.at(t, u) * d_ctx.at(t, off + i);
                    }
                    *dpu = s;
                }
                // Softmax backward on the causal row.
                let dot: f64 = (0..=t).map(|u| p.at(t, u) * dp[u]).sum();
                for (u, dpu) in dp.iter().enumerate() {
                    let ds = p.at(t, u) * (dpu - dot) * scale;
                    for i in 0..d_head {
                        *dq.at_mut(t, off + i) += ds * lc.k.at(u, off + i);
                        *dk.at_mut(u, off + i) += ds * lc.q.at(t, off + i);
                    }
                }
            }
        }

        let mut d_attn_normed = proj_bwd(
            adapters,
            li,
            "q_proj",
            &layer.q_proj,
            &lc.attn_normed,
            &dq,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].q_proj),
            adapter_grads,
        )?;
        let d2 = proj_bwd(
            adapters,
            li,
            "k_proj",
            &layer.k_proj,
            &lc.attn_normed,
            &dk,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].k_proj),
            adapter_grads,
        )?;
        d_attn_normed.add_assign(&d2)?;
        let d2 = proj_bwd(
            adapters,
            li,
            "v_proj",
            &layer.v_proj,
            &lc.attn_normed,
            &dv,
            lc,
            base.as_mut().map(|b| &mut b.layers[li].v_proj),
            adapter_grads,
        )?;
        d_attn_normed.add_assign(&d2)?;
        let (d_attn_in2, d_attn_gain) =
            rmsnorm_bwd(&lc.attn_in, &layer.attn_norm, &lc.attn_rms, &d_attn_normed)?;
        d_attn_in.add_assign(&d_attn_in2)?;
        if let Some(b) = base.as_mut() {
            b.layers[li].attn_norm.add_assign(&d_attn_gain)?;
        }

        dh = d_attn_in;
    }

    if let Some(b) = base.as_mut() {
        b.tok_emb
            .add_assign(&embedding_bwd(model.tok_emb.shape(), &cache.tokens, &dh)?)?;
        let positions: Vec<usize> = (0..t_len).collect();
        b.pos_emb
            .add_assign(&embedding_bwd(model.pos_emb.shape(), &positions, &dh)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapters, ScalingMode, TargetPreset};
    use crate::tensor::cross_entropy;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 1,
            d_ff: 12,
            max_seq: 16,
        }
    }

    fn batch() -> Vec<Vec<usize>> {
        vec![vec![1, 4, 2, 7, 3], vec![5, 0, 9]]
    }

    /// Total loss: sum over sequences of mean next-token cross-entropy, and
    /// the matching per-sequence logit gradients.
    fn lm_loss(
        model: &DecoderModel,
        batch: &[Vec<usize>],
        adapters: Option<&LoraSet>,
    ) -> (f64, Vec<Tensor>, ForwardCache) {
        let (logits, cache) = forward(model, batch, adapters, None).unwrap();
        let mut total = 0.0;
        let mut dlogits = Vec::new();
        for (seq, l) in batch.iter().zip(&logits) {
            let rows = seq.len() - 1;
            let pred = Tensor::from_vec(
                &[rows, l.cols()],
                l.data()[..rows * l.cols()].to_vec(),
            )
            .unwrap();
            let (loss, dl_pred) = cross_entropy(&pred, &seq[1..]).unwrap();
            total += loss;
            let mut dl = Tensor::zeros(l.shape());
            dl.data_mut()[..rows * l.cols()].copy_from_slice(dl_pred.data());
            dlogits.push(dl);
        }
        (total, dlogits, cache)
    }

    #[test]
    fn forward_rejects_empty_and_overlong_sequences() {
        let mut rng = Rng::new(1);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        assert!(forward(&model, &[vec![]], None, None).is_err());
        assert!(forward(&model, &[vec![0; 17]], None, None).is_err());
        assert!(forward(&model, &[vec![0; 16]], None, None).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.n_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        cfg = small_config();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn logits_are_causal() {
        // Changing a later token must not move any earlier logit row.
        let mut rng = Rng::new(2);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let base = vec![1, 2, 3, 4, 5, 6];
        let (logits_a, _) = forward(&model, &[base.clone()], None, None).unwrap();
        for flip_at in 1..base.len() {
            let mut other = base.clone();
            other[flip_at] = (other[flip_at] + 3) % 11;
            let (logits_b, _) = forward(&model, &[other], None, None).unwrap();
            for t in 0..flip_at {
                for v in 0..11 {
                    assert!(
                        (logits_a[0].at(t, v) - logits_b[0].at(t, v)).abs() < 1e-12,
                        "row {t} changed when token {flip_at} flipped"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_rank_one_layer_model_runs() {
        let cfg = ModelConfig {
            vocab_size: 3,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            max_seq: 4,
        };
        let mut rng = Rng::new(3);
        let model = DecoderModel::new(&cfg, &mut rng).unwrap();
        let (logits, _) = forward(&model, &[vec![0]], None, None).unwrap();
        assert_eq!(logits[0].shape(), &[1, 3]);
        assert!(logits[0].all_finite());
    }

    #[test]
    fn fresh_adapters_do_not_change_logits() {
        // B starts at zero, so the delta path contributes exactly nothing.
        let mut rng = Rng::new(4);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let adapters = init_adapters(
            &model,
            TargetPreset::AttentionMlp,
            4,
            16.0,
            0.0,
            ScalingMode::AlphaOverRank,
            &mut rng,
        )
        .unwrap();
        let (plain, _) = forward(&model, &batch(), None, None).unwrap();
        let (with, _) = forward(&model, &batch(), Some(&adapters), None).unwrap();
        for (a, b) in plain.iter().zip(&with) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_dlogits_give_zero_grads() {
        let mut rng = Rng::new(5);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let mut adapters = init_adapters(
            &model,
            TargetPreset::AttentionMlp,
            2,
            4.0,
            0.0,
            ScalingMode::AlphaOverRank,
            &mut rng,
        )
        .unwrap();
        for ad in adapters.adapters.values_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng);
        }
        let (logits, cache) = forward(&model, &batch(), Some(&adapters), None).unwrap();
        let dlogits: Vec<Tensor> = logits.iter().map(|l| Tensor::zeros(l.shape())).collect();
        let grads = backward(&model, &cache, &dlogits, Some(&adapters), true).unwrap();
        let base = grads.base.unwrap();
        assert_eq!(base.head.max_abs_diff(&Tensor::zeros(base.head.shape())), 0.0);
        assert_eq!(
            base.tok_emb.max_abs_diff(&Tensor::zeros(base.tok_emb.shape())),
            0.0
        );
        for g in grads.adapters.values() {
            assert!(g.d_a.data().iter().all(|&v| v == 0.0));
            assert!(g.d_b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn untargeted_projections_get_no_adapter_grads() {
        let mut rng = Rng::new(6);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let adapters = init_adapters(
            &model,
            TargetPreset::MlpOnly,
            2,
            4.0,
            0.0,
            ScalingMode::AlphaOverRank,
            &mut rng,
        )
        .unwrap();
        let (_, dlogits, cache) = lm_loss(&model, &batch(), Some(&adapters));
        let grads = backward(&model, &cache, &dlogits, Some(&adapters), false).unwrap();
        assert!(grads.base.is_none());
        assert_eq!(grads.adapters.len(), 2 * 3); // 2 layers x 3 mlp targets
        assert!(grads.adapters.keys().all(|k| !k.contains("q_proj")));
    }

    fn fd_base_entry(
        model: &mut DecoderModel,
        batch: &[Vec<usize>],
        get: impl Fn(&mut DecoderModel) -> &mut f64,
    ) -> f64 {
        let h = 1e-6;
        let orig = *get(model);
        *get(model) = orig + h;
        let (lp, _, _) = lm_loss(model, batch, None);
        *get(model) = orig - h;
        let (lm, _, _) = lm_loss(model, batch, None);
        *get(model) = orig;
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn base_grads_match_finite_differences() {
        let mut rng = Rng::new(7);
        let mut model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let b = batch();
        let (_, dlogits, cache) = lm_loss(&model, &b, None);
        let grads = backward(&model, &cache, &dlogits, None, true)
            .unwrap()
            .base
            .unwrap();

        // One probe per parameter kind, spread over indices and both layers.
        let cases: Vec<(&str, f64, Box<dyn Fn(&mut DecoderModel) -> &mut f64>)> = vec![
            ("q_proj", grads.layers[0].q_proj.at(1, 2), Box::new(|m| m.layers[0].q_proj.at_mut(1, 2))),
            ("k_proj", grads.layers[1].k_proj.at(0, 3), Box::new(|m| m.layers[1].k_proj.at_mut(0, 3))),
            ("v_proj", grads.layers[0].v_proj.at(4, 0), Box::new(|m| m.layers[0].v_proj.at_mut(4, 0))),
            ("o_proj", grads.layers[1].o_proj.at(2, 5), Box::new(|m| m.layers[1].o_proj.at_mut(2, 5))),
            ("gate_proj", grads.layers[0].gate_proj.at(3, 1), Box::new(|m| m.layers[0].gate_proj.at_mut(3, 1))),
            ("up_proj", grads.layers[1].up_proj.at(7, 6), Box::new(|m| m.layers[1].up_proj.at_mut(7, 6))),
            ("down_proj", grads.layers[0].down_proj.at(5, 9), Box::new(|m| m.layers[0].down_proj.at_mut(5, 9))),
            ("attn_norm", grads.layers[0].attn_norm.data()[3], Box::new(|m| &mut m.layers[0].attn_norm.data_mut()[3])),
            ("mlp_norm", grads.layers[1].mlp_norm.data()[6], Box::new(|m| &mut m.layers[1].mlp_norm.data_mut()[6])),
            ("final_norm", grads.final_norm.data()[0], Box::new(|m| &mut m.final_norm.data_mut()[0])),
            ("head", grads.head.at(8, 2), Box::new(|m| m.head.at_mut(8, 2))),
            ("tok_emb", grads.tok_emb.at(4, 5), Box::new(|m| m.tok_emb.at_mut(4, 5))),
            ("pos_emb", grads.pos_emb.at(2, 7), Box::new(|m| m.pos_emb.at_mut(2, 7))),
        ];
        for (name, analytic, get) in cases {
            let fd = fd_base_entry(&mut model, &b, get);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{name}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn adapter_grads_match_finite_differences() {
        for (n_heads, preset) in [
            (1, TargetPreset::AttentionMlp),
            (2, TargetPreset::AttentionOnly),
        ] {
            let mut cfg = small_config();
            cfg.n_heads = n_heads;
            let mut rng = Rng::new(8);
            let model = DecoderModel::new(&cfg, &mut rng).unwrap();
            let mut adapters = init_adapters(
                &model,
                preset,
                3,
                6.0,
                0.0,
                ScalingMode::AlphaOverRank,
                &mut rng,
            )
            .unwrap();
            // Randomize B so the delta path actually carries signal.
            for ad in adapters.adapters.values_mut() {
                ad.b = Tensor::randn(ad.b.shape(), 0.05, &mut rng);
            }
            let b = batch();
            let (_, dlogits, cache) = lm_loss(&model, &b, Some(&adapters));
            let grads = backward(&model, &cache, &dlogits, Some(&adapters), false).unwrap();

            let h = 1e-6;
            for path in adapters.adapters.keys().cloned().collect::<Vec<_>>() {
                let g = &grads.adapters[&path];
                // Probe a few entries of both factors.
                for (factor, idx) in [("b", 0), ("b", 3), ("a", 1), ("a", 5)] {
                    let analytic = match factor {
                        "b" => g.d_b.data()[idx],
                        _ => g.d_a.data()[idx],
                    };
                    let entry = |set: &mut LoraSet| -> *mut f64 {
                        let ad = set.adapters.get_mut(&path).unwrap();
                        match factor {
                            "b" => &mut ad.b.data_mut()[idx],
                            _ => &mut ad.a.data_mut()[idx],
                        }
                    };
                    let orig = unsafe { *entry(&mut adapters) };
                    unsafe { *entry(&mut adapters) = orig + h };
                    let (lp, _, _) = lm_loss(&model, &b, Some(&adapters));
                    unsafe { *entry(&mut adapters) = orig - h };
                    let (lm, _, _) = lm_loss(&model, &b, Some(&adapters));
                    unsafe { *entry(&mut adapters) = orig };
                    let fd = (lp - lm) / (2.0 * h);
                    let denom = analytic.abs().max(fd.abs()).max(1e-5);
                    assert!(
                        (analytic - fd).abs() / denom < 1e-4,
                        "{path} {factor}[{idx}]: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic_in_eval_mode() {
        let mut rng = Rng::new(9);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        let mut adapters = init_adapters(
            &model,
            TargetPreset::AttentionMlp,
            2,
            4.0,
            0.5, // dropout configured but inactive without a training rng
            ScalingMode::AlphaOverRank,
            &mut rng,
        )
        .unwrap();
        for ad in adapters.adapters.values_mut() {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng);
        }
        let (a, _) = forward(&model, &batch(), Some(&adapters), None).unwrap();
        let (b, _) = forward(&model, &batch(), Some(&adapters), None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn projection_paths_resolve() {
        let mut rng = Rng::new(10);
        let model = DecoderModel::new(&small_config(), &mut rng).unwrap();
        assert_eq!(model.projection_dims("layer.0.q_proj").unwrap(), (8, 8));
        assert_eq!(model.projection_dims("layer.1.up_proj").unwrap(), (12, 8));
        assert_eq!(model.projection_dims("layer.1.down_proj").unwrap(), (8, 12));
        assert!(model.projection("layer.2.q_proj").is_err());
        assert!(model.projection("layer.0.w_proj").is_err());
        assert!(model.projection("blah").is_err());
    }
}
