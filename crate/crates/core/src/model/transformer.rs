// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm transformer blocks recorded on a [`Tape`].

use super::config::ModelConfig;
use super::weights::Weights;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::derive_seed;

/// Additive logit for masked attention entries. After the max-shift inside
/// softmax, `exp` of this underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

/// Knobs for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train_mode: bool,
    /// Overrides the configured dropout probability.
    pub dropout_p: Option<f64>,
    pub dropout_seed: u64,
    /// Decoder block whose MLP output is re-entered on the tape as a
    /// differentiable leaf, exposed as [`ForwardVars::hooked`].
    pub hook_layer: Option<usize>,
    /// Replaces the hooked MLP output with this variable instead of a fresh
    /// leaf holding the computed value.
    pub hook_override: Option<Var>,
}

/// Encoder side of an encoder-decoder pass.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    /// Token embeddings `[S × d_model]`, positions not yet added.
    pub embeds: Var,
    /// `true` for real tokens, `false` for padding. `None` means all real.
    pub key_mask: Option<Vec<bool>>,
}

/// Tape handles and captured internals of one pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[T × vocab]`.
    pub logits: Var,
    /// Per decoder layer, `[heads × T × T]`.
    pub self_attention: Vec<Tensor>,
    /// Per decoder layer, `[heads × T × S]`; empty for decoder-only models.
    pub cross_attention: Vec<Tensor>,
    /// Per decoder layer MLP outputs `[T × d_model]`.
    pub mlp_outputs: Vec<Tensor>,
    pub hooked: Option<Var>,
    /// Final encoder states `[S × d_model]`.
    pub encoder_output: Option<Tensor>,
}

struct Ctx<'a> {
    cfg: &'a ModelConfig,
    w: &'a Weights,
    opts: &'a ForwardOptions,
    site: u64,
}

impl Ctx<'_> {
    fn param(&self, tape: &mut Tape, name: &str) -> Var {
        tape.constant(self.w.get(name).clone())
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.site += 1;
        let p = self.opts.dropout_p.unwrap_or(self.cfg.dropout_p);
        tape.dropout(x, p, derive_seed(self.opts.dropout_seed, self.site), self.opts.train_mode)
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm(x, 1, LN_EPS)?;
        let g = self.param(tape, &format!("{prefix}.gain"));
        let b = self.param(tape, &format!("{prefix}.bias"));
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.param(tape, w);
        let bv = self.param(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add(y, bv)
    }

    /// Multi-head attention of queries `q_in` over `kv_in` with an additive
    /// mask `[T × S]`. Returns the projected output and the weights.
    fn attention(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        mask: &Tensor,
        prefix: &str,
    ) -> Result<(Var, Tensor)> {
        let q = self.linear(tape, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(tape, kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(tape, kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mask_var = tape.constant(mask.clone());
        let (t, s) = (mask.shape()[0], mask.shape()[1]);
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut weights = Vec::with_capacity(self.cfg.n_heads * t * s);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice(q, 1, h * hd, (h + 1) * hd)?;
            let kh = tape.slice(k, 1, h * hd, (h + 1) * hd)?;
            let vh = tape.slice(v, 1, h * hd, (h + 1) * hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask_var)?;
            let probs = tape.softmax(scores, 1)?;
            weights.extend_from_slice(tape.value(probs).data());
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let out = self.linear(tape, merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        let weights = Tensor::from_parts(vec![self.cfg.n_heads, t, s], weights);
        Ok((out, weights))
    }

    fn mlp(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.relu(h)?;
        self.linear(tape, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn add_positions(&self, tape: &mut Tape, embeds: Var) -> Result<Var> {
        let len = tape.shape(embeds)[0];
        let table = self.w.get("embed.positions");
        let d = self.cfg.d_model;
        let pos = Tensor::from_parts(vec![len, d], table.data()[..len * d].to_vec());
        let pos = tape.constant(pos);
        tape.add(embeds, pos)
    }
}

fn key_mask(t: usize, s: usize, causal: bool, keys: Option<&[bool]>) -> Tensor {
    let mut data = vec![0.0; t * s];
    for q in 0..t {
        for k in 0..s {
            let hidden = (causal && k > q) || keys.is_some_and(|m| !m[k]);
            if hidden {
                data[q * s + k] = MASK_VALUE;
            }
        }
    }
    Tensor::from_parts(vec![t, s], data)
}

/// Runs the model on decoder token embeddings `[T × d_model]` (and encoder
/// embeddings for encoder-decoder models). Shapes and lengths must already
/// be validated by the caller.
pub(crate) fn forward(
    cfg: &ModelConfig,
    w: &Weights,
    tape: &mut Tape,
    decoder_embeds: Var,
    encoder: Option<&EncoderInput>,
    opts: &ForwardOptions,
) -> Result<ForwardVars> {
    let mut ctx = Ctx { cfg, w, opts, site: 0 };

    let mut memory = None;
    let mut encoder_output = None;
    if let Some(enc) = encoder {
        let s = tape.shape(enc.embeds)[0];
        let mask = key_mask(s, s, false, enc.key_mask.as_deref());
        let mut h = ctx.add_positions(tape, enc.embeds)?;
        h = ctx.dropout(tape, h)?;
        for l in 0..cfg.n_layers_enc {
            let p = format!("encoder.layers.{l}");
            let n = ctx.norm(tape, h, &format!("{p}.ln_attn"))?;
            let (a, _) = ctx.attention(tape, n, n, &mask, &format!("{p}.self_attn"))?;
            let a = ctx.dropout(tape, a)?;
            h = tape.add(h, a)?;
            let n = ctx.norm(tape, h, &format!("{p}.ln_mlp"))?;
            let m = ctx.mlp(tape, n, &format!("{p}.mlp"))?;
            let m = ctx.dropout(tape, m)?;
            h = tape.add(h, m)?;
        }
        let out = ctx.norm(tape, h, "encoder.ln_final")?;
        encoder_output = Some(tape.value(out).clone());
        memory = Some((out, s));
    }

    let t = tape.shape(decoder_embeds)[0];
    let causal = key_mask(t, t, true, None);
    let cross_mask = memory
        .map(|(_, s)| key_mask(t, s, false, encoder.and_then(|e| e.key_mask.as_deref())));

    let mut self_attention = Vec::with_capacity(cfg.n_layers_dec);
    let mut cross_attention = Vec::new();
    let mut mlp_outputs = Vec::with_capacity(cfg.n_layers_dec);
    let mut hooked = None;

    let mut h = ctx.add_positions(tape, decoder_embeds)?;
    h = ctx.dropout(tape, h)?;
    for l in 0..cfg.n_layers_dec {
        let p = format!("decoder.layers.{l}");
        let n = ctx.norm(tape, h, &format!("{p}.ln_attn"))?;
        let (a, weights) = ctx.attention(tape, n, n, &causal, &format!("{p}.self_attn"))?;
        self_attention.push(weights);
        let a = ctx.dropout(tape, a)?;
        h = tape.add(h, a)?;
        if let (Some((mem, _)), Some(mask)) = (memory, cross_mask.as_ref()) {
            let n = ctx.norm(tape, h, &format!("{p}.ln_cross"))?;
            let (c, weights) = ctx.attention(tape, n, mem, mask, &format!("{p}.cross_attn"))?;
            cross_attention.push(weights);
            let c = ctx.dropout(tape, c)?;
            h = tape.add(h, c)?;
        }
        let n = ctx.norm(tape, h, &format!("{p}.ln_mlp"))?;
        let mut m = ctx.mlp(tape, n, &format!("{p}.mlp"))?;
        mlp_outputs.push(tape.value(m).clone());
        if opts.hook_layer == Some(l) {
            m = match opts.hook_override {
                Some(v) => {
                    if tape.shape(v) != tape.shape(m) {
                        return Err(crate::error::Error::shape(
                            "hook",
                            format!("override {:?} vs activation {:?}", tape.shape(v), tape.shape(m)),
                        ));
                    }
                    v
                }
                None => tape.leaf(tape.value(m).clone(), true),
            };
            hooked = Some(m);
        }
        let m = ctx.dropout(tape, m)?;
        h = tape.add(h, m)?;
    }
    let out = ctx.norm(tape, h, "decoder.ln_final")?;
    let logits = ctx.linear(tape, out, "lm_head.weight", "lm_head.bias")?;

    Ok(ForwardVars {
        logits,
        self_attention,
        cross_attention,
        mlp_outputs,
        hooked,
        encoder_output,
    })
}
