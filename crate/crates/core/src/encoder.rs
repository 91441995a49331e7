//! Prompt-based, trigger-aware event encoder.
//!
//! A cloze template is prepended to the context and the encoder reads a
//! distribution `v` over the vocabulary at the template's slot through a
//! tied-embedding MLM head. A per-token binary classifier gives trigger
//! probabilities `p`; combined with the attention mass each context token
//! receives in the last layer they form softmax weights `w`, and the trigger
//! feature `t` is the `w`-weighted sum of context token features. Event
//! features are `[v; t]`, consumed both by the soft verbalizer
//! (`GELU([v;t])·W + b`) and by zero-shot clustering.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Example, Vocabulary, MASK};
use crate::error::{Error, Result};
use crate::graph::{gelu, softmax_into, Graph, NodeId};
use crate::params::ParameterSet;
use crate::rng::seeded_rng;
use crate::tensor::{Scalar, Tensor};

pub const VERBALIZER_GROUP: &str = "verbalizer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptId {
    A,
    B,
    C,
    D,
    Custom,
}

impl std::str::FromStr for PromptId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(PromptId::A),
            "B" => Ok(PromptId::B),
            "C" => Ok(PromptId::C),
            "D" => Ok(PromptId::D),
            "CUSTOM" => Ok(PromptId::Custom),
            _ => Err(Error::Config(format!("unknown prompt template {s:?}"))),
        }
    }
}

impl std::fmt::Display for PromptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PromptId::A => "A",
            PromptId::B => "B",
            PromptId::C => "C",
            PromptId::D => "D",
            PromptId::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub tokens: Vec<String>,
}

impl PromptTemplate {
    pub fn builtin(id: PromptId) -> Result<Self> {
        let words: &[&str] = match id {
            PromptId::A => &["A", MASK, "event"],
            PromptId::B => &["This", "text", "describes", "a", MASK, "event"],
            PromptId::C => &["This", "topic", "is", "about", MASK],
            PromptId::D => &["[", "Event", ":", MASK, "]"],
            PromptId::Custom => {
                return Err(Error::Config("custom prompts need explicit tokens".into()));
            }
        };
        Ok(Self {
            id,
            tokens: words.iter().map(|w| w.to_string()).collect(),
        })
    }

    pub fn custom(tokens: Vec<String>) -> Result<Self> {
        let t = Self {
            id: PromptId::Custom,
            tokens,
        };
        t.slot()?;
        Ok(t)
    }

    /// Position of the single slot marker.
    pub fn slot(&self) -> Result<usize> {
        let slots: Vec<usize> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.as_str() == MASK)
            .map(|(i, _)| i)
            .collect();
        match slots.as_slice() {
            [s] => Ok(*s),
            _ => Err(Error::Config(format!(
                "prompt template must contain exactly one {MASK}, found {}",
                slots.len()
            ))),
        }
    }

    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ResolvedPrompt> {
        let slot = self.slot()?;
        Ok(ResolvedPrompt {
            ids: self.tokens.iter().map(|t| vocab.id_or_unk(t)).collect(),
            slot,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPrompt {
    pub ids: Vec<usize>,
    pub slot: usize,
}

/// Which event features feed the verbalizer and the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `[v; t]`
    #[default]
    Full,
    /// `v` only (no attentive trigger features).
    SlotOnly,
    /// `t` only (slot distribution unused).
    TriggerOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub prompt: PromptTemplate,
    pub feature_mode: FeatureMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            vocab_size: 0,
            max_len: 32,
            prompt: PromptTemplate::builtin(PromptId::A).expect("builtin prompt"),
            feature_mode: FeatureMode::Full,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be set".into());
        }
        if self.prompt.tokens.len() >= self.max_len {
            return fail("prompt leaves no room for context under max_len".into());
        }
        self.prompt.slot()?;
        Ok(())
    }
}

/// Output of one context-encoding backbone pass.
pub struct BackboneOutput {
    /// `L × d` final hidden states.
    pub hidden: NodeId,
    /// Per head `L × L` attention probabilities of the last layer.
    pub attention: Vec<NodeId>,
    /// `V × d` token embedding table (tied to the MLM decoder).
    pub token_embeddings: NodeId,
}

/// A context encoder that can be swapped for a different architecture.
/// Implementations own the first parameters of the model's layout.
pub trait Backbone: Clone + Send + Sync {
    fn hidden_dim(&self) -> usize;
    fn num_heads(&self) -> usize;
    /// Appends freshly initialized backbone parameters.
    fn init_params(&self, params: &mut ParameterSet, rng: &mut ChaCha8Rng);
    fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, ids: &[usize]) -> BackboneOutput;
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

/// Post-layer-norm transformer encoder with learned positions.
#[derive(Clone, Debug)]
pub struct TransformerBackbone {
    num_heads: usize,
    hidden: usize,
    ffn: usize,
    vocab: usize,
    max_len: usize,
    num_layers: usize,
    tok: usize,
    pos: usize,
    ln_g: usize,
    ln_b: usize,
    layers: Vec<LayerIdx>,
}

impl TransformerBackbone {
    pub fn new(config: &EncoderConfig) -> Self {
        let mut next = 0..;
        let mut n = || next.next().unwrap();
        let tok = n();
        let pos = n();
        let ln_g = n();
        let ln_b = n();
        let layers = (0..config.num_layers)
            .map(|_| LayerIdx {
                wq: n(),
                bq: n(),
                wk: n(),
                bk: n(),
                wv: n(),
                bv: n(),
                wo: n(),
                bo: n(),
                ln1_g: n(),
                ln1_b: n(),
                w1: n(),
                b1: n(),
                w2: n(),
                b2: n(),
                ln2_g: n(),
                ln2_b: n(),
            })
            .collect();
        Self {
            num_heads: config.num_heads,
            hidden: config.hidden_dim,
            ffn: config.ffn_dim,
            vocab: config.vocab_size,
            max_len: config.max_len,
            num_layers: config.num_layers,
            tok,
            pos,
            ln_g,
            ln_b,
            layers,
        }
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn linear(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_vec(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

fn ones(cols: usize) -> Tensor<f64> {
    Tensor::from_vec(1, cols, vec![1.0; cols])
}

impl Backbone for TransformerBackbone {
    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn num_heads(&self) -> usize {
        self.num_heads
    }

    fn init_params(&self, p: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        let d = self.hidden;
        let std = 1.0 / (d as f64).sqrt();
        let g = "embeddings";
        p.push("embed.tokens", g, normal(self.vocab, d, std, rng));
        p.push("embed.positions", g, normal(self.max_len, d, std, rng));
        p.push("embed.ln.gamma", g, ones(d));
        p.push("embed.ln.beta", g, Tensor::zeros(1, d));
        for l in 0..self.num_layers {
            let g = format!("layer.{l}");
            let name = |s: &str| format!("layer.{l}.{s}");
            for (w, b) in [("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv"), ("attn.wo", "attn.bo")] {
                p.push(name(w), &g, linear(d, d, rng));
                p.push(name(b), &g, Tensor::zeros(1, d));
            }
            p.push(name("ln1.gamma"), &g, ones(d));
            p.push(name("ln1.beta"), &g, Tensor::zeros(1, d));
            p.push(name("ffn.w1"), &g, linear(d, self.ffn, rng));
            p.push(name("ffn.b1"), &g, Tensor::zeros(1, self.ffn));
            p.push(name("ffn.w2"), &g, linear(self.ffn, d, rng));
            p.push(name("ffn.b2"), &g, Tensor::zeros(1, d));
            p.push(name("ln2.gamma"), &g, ones(d));
            p.push(name("ln2.beta"), &g, Tensor::zeros(1, d));
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, ids: &[usize]) -> BackboneOutput {
        let len = ids.len();
        let dh = self.hidden / self.num_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let e = g.gather(tok, ids);
        let p = g.slice_rows(pos, 0, len);
        let x = g.add(e, p);
        let (lg, lb) = (g.param(self.ln_g), g.param(self.ln_b));
        let mut x = g.layer_norm(x, lg, lb);
        let mut attention = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let proj = |g: &mut Graph<'_, S>, x: NodeId, w: usize, b: usize| {
                let (w, b) = (g.param(w), g.param(b));
                let y = g.matmul(x, w);
                g.add_row(y, b)
            };
            let q = proj(g, x, l.wq, l.bq);
            let k = proj(g, x, l.wk, l.bk);
            let v = proj(g, x, l.wv, l.bv);
            let last = li + 1 == self.layers.len();
            let mut heads = Vec::with_capacity(self.num_heads);
            for h in 0..self.num_heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, a, b);
                let kh = g.slice_cols(k, a, b);
                let vh = g.slice_cols(v, a, b);
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, inv_sqrt);
                let att = g.softmax_rows(s);
                if last {
                    attention.push(att);
                }
                heads.push(g.matmul(att, vh));
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let o = proj(g, cat, l.wo, l.bo);
            let r = g.add(x, o);
            let (g1, b1) = (g.param(l.ln1_g), g.param(l.ln1_b));
            let h1 = g.layer_norm(r, g1, b1);
            let f = proj(g, h1, l.w1, l.b1);
            let f = g.gelu(f);
            let f = proj(g, f, l.w2, l.b2);
            let r2 = g.add(h1, f);
            let (g2, b2) = (g.param(l.ln2_g), g.param(l.ln2_b));
            x = g.layer_norm(r2, g2, b2);
        }
        BackboneOutput {
            hidden: x,
            attention,
            token_embeddings: tok,
        }
    }
}

#[derive(Clone, Debug)]
struct HeadIdx {
    mlm_w: usize,
    mlm_b: usize,
    mlm_g: usize,
    mlm_beta: usize,
    dec_b: usize,
    trig_w: usize,
    trig_b: usize,
    verb_w: usize,
    verb_b: usize,
}

/// Graph nodes produced by one example's forward pass.
pub struct ExampleNodes {
    /// `1 × feature_dim` event features fed to the verbalizer.
    pub features: NodeId,
    /// `L_c × 2` raw trigger logits.
    pub trigger_logits: NodeId,
    /// `L_c × 2` trigger log-probabilities.
    pub trigger_log_probs: NodeId,
    /// `1 × 1` mean per-token trigger NLL against the gold span.
    pub trigger_nll: NodeId,
    pub token_features: NodeId,
    pub slot_distribution: NodeId,
    /// `1 × L_c` trigger probabilities.
    pub trigger_probs: NodeId,
    /// Per head `L_c × L_c` last-layer attention restricted to the context.
    pub context_attention: Vec<NodeId>,
    /// Full-sequence last-layer attention per head.
    pub full_attention: Vec<NodeId>,
    pub weights: NodeId,
    pub trigger_feature: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    /// `L_c × d`
    pub token_features: Tensor<f64>,
    /// Per head `L_c × L_c`.
    pub attention: Vec<Tensor<f64>>,
    /// Per head `L × L` before restriction to the context span.
    pub full_attention: Vec<Tensor<f64>>,
    pub slot_distribution: Vec<f64>,
    pub trigger_probs: Vec<f64>,
}

/// The full event model: backbone, MLM slot head, trigger classifier and the
/// per-episode soft verbalizer.
#[derive(Clone, Debug)]
pub struct EventModel<B: Backbone = TransformerBackbone> {
    pub config: EncoderConfig,
    backbone: B,
    prompt: ResolvedPrompt,
    idx: HeadIdx,
    num_shared: usize,
}

impl EventModel<TransformerBackbone> {
    pub fn new(config: EncoderConfig, vocab: &Vocabulary) -> Result<Self> {
        let backbone = TransformerBackbone::new(&config);
        Self::with_backbone(config, backbone, vocab)
    }
}

impl<B: Backbone> EventModel<B> {
    pub fn with_backbone(config: EncoderConfig, backbone: B, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let prompt = config.prompt.resolve(vocab)?;
        let mut probe = ParameterSet::new();
        backbone.init_params(&mut probe, &mut seeded_rng(0, &[]));
        let base = probe.len();
        let idx = HeadIdx {
            mlm_w: base,
            mlm_b: base + 1,
            mlm_g: base + 2,
            mlm_beta: base + 3,
            dec_b: base + 4,
            trig_w: base + 5,
            trig_b: base + 6,
            verb_w: base + 7,
            verb_b: base + 8,
        };
        Ok(Self {
            config,
            backbone,
            prompt,
            idx,
            num_shared: base + 7,
        })
    }

    /// The same model reading inputs through another template. Parameters
    /// are shared since templates only change the token sequence.
    pub fn with_prompt(&self, template: PromptTemplate, vocab: &Vocabulary) -> Result<Self> {
        let prompt = template.resolve(vocab)?;
        let mut out = self.clone();
        out.config.prompt = template;
        out.prompt = prompt;
        Ok(out)
    }

    pub fn prompt(&self) -> &ResolvedPrompt {
        &self.prompt
    }

    pub fn hidden_dim(&self) -> usize {
        self.backbone.hidden_dim()
    }

    pub fn feature_dim(&self) -> usize {
        match self.config.feature_mode {
            FeatureMode::Full => self.config.vocab_size + self.hidden_dim(),
            FeatureMode::SlotOnly => self.config.vocab_size,
            FeatureMode::TriggerOnly => self.hidden_dim(),
        }
    }

    /// Number of meta-learned (non-verbalizer) parameter tensors.
    pub fn num_shared(&self) -> usize {
        self.num_shared
    }

    /// Shared parameters θ (everything except the verbalizer).
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut rng = seeded_rng(seed, &[0x1_417]);
        let mut p = ParameterSet::new();
        self.backbone.init_params(&mut p, &mut rng);
        let d = self.hidden_dim();
        let v = self.config.vocab_size;
        p.push("mlm.dense.w", "mlm_head", linear(d, d, &mut rng));
        p.push("mlm.dense.b", "mlm_head", Tensor::zeros(1, d));
        p.push("mlm.ln.gamma", "mlm_head", ones(d));
        p.push("mlm.ln.beta", "mlm_head", Tensor::zeros(1, d));
        p.push("mlm.decoder.bias", "mlm_head", Tensor::zeros(1, v));
        p.push("trigger.w", "trigger_head", linear(d, 2, &mut rng));
        p.push("trigger.b", "trigger_head", Tensor::zeros(1, 2));
        debug_assert_eq!(p.len(), self.num_shared);
        p
    }

    /// Zero-initialized verbalizer for an `n_way` episode.
    pub fn fresh_head(&self, n_way: usize) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.push("verbalizer.w", VERBALIZER_GROUP, Tensor::zeros(self.feature_dim(), n_way));
        p.push("verbalizer.b", VERBALIZER_GROUP, Tensor::zeros(1, n_way));
        p
    }

    /// θ followed by a fresh verbalizer.
    pub fn with_head(&self, theta: &ParameterSet, n_way: usize) -> ParameterSet {
        theta.without_group(VERBALIZER_GROUP).merged(&self.fresh_head(n_way))
    }

    pub fn check_params(&self, params: &ParameterSet, need_head: bool) -> Result<()> {
        let want = if need_head { self.num_shared + 2 } else { self.num_shared };
        if params.len() < want {
            return Err(Error::Contract(format!(
                "parameter set has {} tensors, model needs {want}",
                params.len()
            )));
        }
        Ok(())
    }

    pub fn sequence(&self, example: &Example) -> Result<Vec<usize>> {
        let total = self.prompt.ids.len() + example.tokens.len();
        if total > self.config.max_len {
            return Err(Error::Input(format!(
                "prompt ({}) plus context ({}) exceeds max_len {}",
                self.prompt.ids.len(),
                example.tokens.len(),
                self.config.max_len
            )));
        }
        if !example.trigger_span.is_valid_for(example.tokens.len()) {
            return Err(Error::Input("trigger span outside the context".into()));
        }
        if let Some(&t) = example.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {t} outside the vocabulary")));
        }
        let mut ids = self.prompt.ids.clone();
        ids.extend_from_slice(&example.tokens);
        Ok(ids)
    }

    /// Records one example's forward pass. `params` must hold at least the
    /// shared tensors; the verbalizer is not touched here.
    pub fn forward_example<S: Scalar>(&self, g: &mut Graph<'_, S>, example: &Example) -> Result<ExampleNodes> {
        let ids = self.sequence(example)?;
        let ctx_start = self.prompt.ids.len();
        let ctx_len = example.tokens.len();
        let ctx_end = ctx_start + ctx_len;
        let heads = self.backbone.num_heads();
        let out = self.backbone.forward(g, &ids);

        // slot distribution through the tied MLM head
        let slot = g.slice_rows(out.hidden, self.prompt.slot, self.prompt.slot + 1);
        let (w, b) = (g.param(self.idx.mlm_w), g.param(self.idx.mlm_b));
        let h = g.matmul(slot, w);
        let h = g.add_row(h, b);
        let h = g.gelu(h);
        let (lg, lb) = (g.param(self.idx.mlm_g), g.param(self.idx.mlm_beta));
        let h = g.layer_norm(h, lg, lb);
        let logits = g.matmul_t(h, out.token_embeddings);
        let db = g.param(self.idx.dec_b);
        let logits = g.add_row(logits, db);
        let v = g.softmax_rows(logits);

        // per-token trigger classifier
        let tf = g.slice_rows(out.hidden, ctx_start, ctx_end);
        let (tw, tb) = (g.param(self.idx.trig_w), g.param(self.idx.trig_b));
        let tl = g.matmul(tf, tw);
        let tl = g.add_row(tl, tb);
        let logp = g.log_softmax_rows(tl);
        let targets = example.trigger_span.mask(ctx_len);
        let picked = g.pick_per_row(logp, &targets);
        let mean = g.mean(picked);
        let trigger_nll = g.scale(mean, -1.0);
        let lp1 = g.slice_cols(logp, 1, 2);
        let p_col = g.exp(lp1);
        let p = g.reshape(p_col, 1, ctx_len);

        // attention mass received by each context token, averaged over heads
        let mut context_attention = Vec::with_capacity(heads);
        let mut received = None;
        for &a in &out.attention {
            let rows = g.slice_rows(a, ctx_start, ctx_end);
            let ctx = g.slice_cols(rows, ctx_start, ctx_end);
            context_attention.push(ctx);
            let col = g.sum_rows(ctx);
            received = Some(match received {
                None => col,
                Some(acc) => g.add(acc, col),
            });
        }
        let received = g.scale(received.expect("at least one head"), 1.0 / heads as f64);
        let scores = g.mul(p, received);
        let weights = g.softmax_rows(scores);
        let t = g.matmul(weights, tf);

        let features = match self.config.feature_mode {
            FeatureMode::Full => g.concat_cols(&[v, t]),
            FeatureMode::SlotOnly => v,
            FeatureMode::TriggerOnly => t,
        };
        Ok(ExampleNodes {
            features,
            trigger_logits: tl,
            trigger_log_probs: logp,
            trigger_nll,
            token_features: tf,
            slot_distribution: v,
            trigger_probs: p,
            context_attention,
            full_attention: out.attention,
            weights,
            trigger_feature: t,
        })
    }

    /// Value-level forward pass.
    pub fn encode(&self, params: &ParameterSet, example: &Example) -> Result<EncoderOutput> {
        self.check_params(params, false)?;
        let tensors = params.lift::<f64>();
        let mut g = Graph::new(&tensors);
        let n = self.forward_example(&mut g, example)?;
        Ok(EncoderOutput {
            token_features: g.value(n.token_features).clone(),
            attention: n.context_attention.iter().map(|&a| g.value(a).clone()).collect(),
            full_attention: n.full_attention.iter().map(|&a| g.value(a).clone()).collect(),
            slot_distribution: g.value(n.slot_distribution).data.clone(),
            trigger_probs: g.value(n.trigger_probs).data.clone(),
        })
    }

    /// Per-token binary trigger logits, `L_c × 2`; column 1 is the trigger class.
    pub fn trigger_logits(&self, params: &ParameterSet, example: &Example) -> Result<Tensor<f64>> {
        self.check_params(params, false)?;
        let tensors = params.lift::<f64>();
        let mut g = Graph::new(&tensors);
        let n = self.forward_example(&mut g, example)?;
        Ok(g.value(n.trigger_logits).clone())
    }

    /// Event features (`[v;t]` in the full model) of one example.
    pub fn event_features(&self, params: &ParameterSet, example: &Example) -> Result<Vec<f64>> {
        self.check_params(params, false)?;
        let tensors = params.lift::<f64>();
        let mut g = Graph::new(&tensors);
        let n = self.forward_example(&mut g, example)?;
        Ok(g.value(n.features).data.clone())
    }

    pub fn verbalizer(&self, params: &ParameterSet) -> Result<VerbalizerParams> {
        self.check_params(params, true)?;
        Ok(VerbalizerParams {
            weights: params.tensor(self.idx.verb_w).clone(),
            bias: params.tensor(self.idx.verb_b).data.clone(),
        })
    }

    pub(crate) fn verbalizer_indices(&self) -> (usize, usize) {
        (self.idx.verb_w, self.idx.verb_b)
    }

    /// Predicted episode-local classes under adapted parameters.
    pub fn predict(&self, params: &ParameterSet, examples: &[Example]) -> Result<Vec<usize>> {
        let head = self.verbalizer(params)?;
        examples
            .iter()
            .map(|ex| {
                let f = self.event_features(params, ex)?;
                Ok(head.apply(&f)?.1)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerParams {
    /// `(|v| + |t|) × N`
    pub weights: Tensor<f64>,
    pub bias: Vec<f64>,
}

impl VerbalizerParams {
    pub fn n_way(&self) -> usize {
        self.weights.cols
    }

    /// Logits `GELU(x)·W + b` and the argmax (lowest index on ties).
    pub fn apply(&self, features: &[f64]) -> Result<(Vec<f64>, usize)> {
        if features.len() != self.weights.rows || self.bias.len() != self.weights.cols {
            return Err(Error::Contract(format!(
                "verbalizer expects {} inputs and {} biases, got {} and {}",
                self.weights.rows,
                self.weights.cols,
                features.len(),
                self.bias.len()
            )));
        }
        let mut logits = self.bias.clone();
        for (r, &x) in features.iter().enumerate() {
            let gx = gelu(x);
            if gx == 0.0 {
                continue;
            }
            for (l, &w) in logits.iter_mut().zip(self.weights.row(r)) {
                *l += gx * w;
            }
        }
        let pred = argmax(&logits);
        Ok((logits, pred))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Soft verbalizer on a slot distribution and trigger feature.
pub fn verbalize(v: &[f64], t: &[f64], params: &VerbalizerParams) -> Result<(Vec<f64>, usize)> {
    let mut x = v.to_vec();
    x.extend_from_slice(t);
    params.apply(&x)
}

/// Token weights `softmax(p ⊙ received)`, where `received[k]` is the attention
/// mass token `k` receives from all context queries, averaged over heads.
pub fn trigger_weights(output: &EncoderOutput) -> Vec<f64> {
    let l = output.trigger_probs.len();
    let h = output.attention.len() as f64;
    let mut scores = vec![0.0; l];
    for a in &output.attention {
        for j in 0..a.rows {
            for (s, &x) in scores.iter_mut().zip(a.row(j)) {
                *s += x;
            }
        }
    }
    for (s, &p) in scores.iter_mut().zip(&output.trigger_probs) {
        *s = p * (*s / h);
    }
    let mut w = vec![0.0; l];
    softmax_into(&scores, &mut w);
    w
}

/// Weighted sum of context token features.
pub fn trigger_feature(output: &EncoderOutput, weights: &[f64]) -> Result<Vec<f64>> {
    let tf = &output.token_features;
    if weights.len() != tf.rows {
        return Err(Error::Contract(format!(
            "{} weights for {} context tokens",
            weights.len(),
            tf.rows
        )));
    }
    let mut t = vec![0.0; tf.cols];
    for (r, &w) in weights.iter().enumerate() {
        for (o, &x) in t.iter_mut().zip(tf.row(r)) {
            *o += w * x;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, CorpusSpec, TriggerSpan};

    pub(crate) fn tiny() -> (EventModel, ParameterSet, Vec<Example>) {
        let corpus = generate_corpus(&CorpusSpec {
            num_event_types: 3,
            examples_per_type: 4,
            background_vocab: 10,
            context_len_range: (4, 6),
            ..CorpusSpec::default()
        })
        .unwrap();
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: corpus.vocab.len(),
            max_len: 16,
            ..EncoderConfig::default()
        };
        let model = EventModel::new(cfg, &corpus.vocab).unwrap();
        let theta = model.init_params(3);
        let examples = corpus.pool.values().flatten().cloned().collect();
        (model, theta, examples)
    }

    /// Standard normal CDF by Simpson quadrature of the density, independent
    /// of the erf-based implementation.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let n = 20_000;
        let (a, b) = (-12.0, x);
        let h = (b - a) / n as f64;
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(b);
        for i in 1..n {
            let z = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(z);
        }
        s * h / 3.0
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.5, 1.0, 2.5] {
            let oracle = x * normal_cdf_quadrature(x);
            assert!((gelu(x) - oracle).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn normalization_postconditions() {
        let (model, theta, examples) = tiny();
        for ex in &examples {
            let out = model.encode(&theta, ex).unwrap();
            let vs: f64 = out.slot_distribution.iter().sum();
            assert!((vs - 1.0).abs() < 1e-6);
            assert!(out.trigger_probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for a in &out.full_attention {
                for r in 0..a.rows {
                    let s: f64 = a.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
            assert_eq!(out.attention.len(), 2);
            assert_eq!(out.attention[0].shape(), (ex.tokens.len(), ex.tokens.len()));
            let w = trigger_weights(&out);
            assert!(w.iter().all(|&x| x > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let (model, theta, examples) = tiny();
        let a = model.encode(&theta, &examples[0]).unwrap();
        let b = model.encode(&theta, &examples[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swapping_background_tokens_changes_exactly_those_rows() {
        let (model, theta, examples) = tiny();
        let ex = examples
            .iter()
            .find(|e| {
                let s = e.trigger_span.start;
                let bg: Vec<usize> = (0..e.tokens.len()).filter(|&i| i != s).collect();
                bg.len() >= 2 && e.tokens[bg[0]] != e.tokens[bg[1]]
            })
            .unwrap()
            .clone();
        let s = ex.trigger_span.start;
        let bg: Vec<usize> = (0..ex.tokens.len()).filter(|&i| i != s).collect();
        let (i, j) = (bg[0], bg[1]);
        let mut swapped = ex.clone();
        swapped.tokens.swap(i, j);
        let a = model.encode(&theta, &ex).unwrap().token_features;
        let b = model.encode(&theta, &swapped).unwrap().token_features;
        // positional embeddings make the swapped rows differ from a plain row swap
        assert_ne!(a.row(i), b.row(j));
        assert_ne!(a.row(i), b.row(i));
        assert_ne!(a.row(j), b.row(j));
    }

    #[test]
    fn sequence_overflow_is_an_input_error() {
        let (model, theta, _) = tiny();
        let ex = Example {
            tokens: vec![5; 20],
            trigger_span: TriggerSpan::new(0, 1),
            label: 0,
            raw_text: None,
        };
        assert!(matches!(model.encode(&theta, &ex), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_attention_and_probs_give_uniform_weights() {
        let l = 4;
        let out = EncoderOutput {
            token_features: Tensor::zeros(l, 2),
            attention: vec![Tensor::from_vec(l, l, vec![0.25; l * l]); 3],
            full_attention: vec![],
            slot_distribution: vec![],
            trigger_probs: vec![0.3; l],
        };
        for w in trigger_weights(&out) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_weights_match_scalar_softmax() {
        // one head, column sums (2, 1) with p = 1 gives scores (2, 1)
        let out = EncoderOutput {
            token_features: Tensor::zeros(2, 1),
            attention: vec![Tensor::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0])],
            full_attention: vec![],
            slot_distribution: vec![],
            trigger_probs: vec![1.0, 1.0],
        };
        let w = trigger_weights(&out);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((w[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((w[1] - e1 / (e2 + e1)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn trigger_feature_cases() {
        let out = EncoderOutput {
            token_features: Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            attention: vec![],
            full_attention: vec![],
            slot_distribution: vec![],
            trigger_probs: vec![],
        };
        assert_eq!(trigger_feature(&out, &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(trigger_feature(&out, &[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(trigger_feature(&out, &[1.0]).is_err());
        let same = EncoderOutput {
            token_features: Tensor::from_vec(3, 2, vec![0.5, -2.0, 0.5, -2.0, 0.5, -2.0]),
            ..out
        };
        let t = trigger_feature(&same, &[0.2, 0.3, 0.5]).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn verbalize_cases() {
        let zero = VerbalizerParams {
            weights: Tensor::zeros(2, 3),
            bias: vec![0.1, 0.5, 0.2],
        };
        assert_eq!(verbalize(&[0.3], &[4.0], &zero).unwrap().1, 1);
        let scaled = VerbalizerParams {
            bias: vec![0.1 * 7.0, 0.5 * 7.0, 0.2 * 7.0],
            ..zero.clone()
        };
        assert_eq!(verbalize(&[0.3], &[-4.0], &scaled).unwrap().1, 1);
        let ident = VerbalizerParams {
            weights: Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            bias: vec![0.0, 0.0],
        };
        let (logits, pred) = verbalize(&[1.0], &[-1.0], &ident).unwrap();
        let oracle1 = normal_cdf_quadrature(1.0);
        let oraclem1 = -normal_cdf_quadrature(-1.0);
        assert!((logits[0] - oracle1).abs() < 1e-10 && (logits[1] - oraclem1).abs() < 1e-10);
        assert!((logits[0] - 0.8413).abs() < 1e-4 && (logits[1] + 0.1587).abs() < 1e-4);
        assert_eq!(pred, 0);
        assert!(verbalize(&[1.0, 2.0], &[0.0], &ident).is_err());
        let tie = VerbalizerParams {
            weights: Tensor::zeros(1, 3),
            bias: vec![0.4, 0.4, 0.1],
        };
        assert_eq!(tie.apply(&[1.0]).unwrap().1, 0);
    }

    #[test]
    fn zero_trigger_classifier_gives_half_probabilities() {
        let (model, mut theta, examples) = tiny();
        for name in ["trigger.w", "trigger.b"] {
            theta.get_mut(name).unwrap().data.iter_mut().for_each(|x| *x = 0.0);
        }
        let out = model.encode(&theta, &examples[0]).unwrap();
        assert!(out.trigger_probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn span_mask_and_logit_shape() {
        assert_eq!(TriggerSpan::new(2, 4).mask(6), vec![0, 0, 1, 1, 0, 0]);
        let (model, theta, examples) = tiny();
        let l = model.trigger_logits(&theta, &examples[0]).unwrap();
        assert_eq!(l.shape(), (examples[0].tokens.len(), 2));
        let p = model.encode(&theta, &examples[0]).unwrap().trigger_probs;
        for (r, &pi) in p.iter().enumerate() {
            let row = l.row(r);
            let want = 1.0 / (1.0 + (row[0] - row[1]).exp());
            assert!((pi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_example_overfit_locates_the_trigger() {
        use crate::meta::Adam;
        let (model, mut theta, examples) = tiny();
        let ex = examples.iter().find(|e| e.trigger_span.start > 0).unwrap().clone();
        let mut adam = Adam::new(0.0);
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let tensors = theta.lift::<f64>();
            let mut g = Graph::new(&tensors);
            let n = model.forward_example(&mut g, &ex).unwrap();
            last = g.value(n.trigger_nll).data[0];
            let mut grads: Vec<Tensor<f64>> = tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
            g.backward(&[(n.trigger_nll, Tensor::from_vec(1, 1, vec![1.0]))], &mut grads);
            let grads = theta.with_tensors(grads);
            adam.step_set(&mut theta, &grads, 1e-2);
        }
        assert!(last < 1e-2, "trigger loss {last}");
        let p = model.encode(&theta, &ex).unwrap().trigger_probs;
        let best = argmax(&p);
        assert!(ex.trigger_span.start <= best && best < ex.trigger_span.end);
    }

    #[test]
    fn alternate_template_changes_only_the_prefix() {
        let corpus = generate_corpus(&CorpusSpec {
            num_event_types: 3,
            examples_per_type: 2,
            background_vocab: 10,
            context_len_range: (4, 6),
            ..CorpusSpec::default()
        })
        .unwrap();
        let (model, theta, _) = tiny();
        let ex = &corpus.pool.values().next().unwrap()[0];
        let b = model
            .with_prompt(PromptTemplate::builtin(PromptId::B).unwrap(), &corpus.vocab)
            .unwrap();
        assert_eq!(b.config.prompt.id, PromptId::B);
        let sa = model.sequence(ex).unwrap();
        let sb = b.sequence(ex).unwrap();
        assert_eq!(sa[model.prompt().ids.len()..], sb[b.prompt().ids.len()..]);
        assert_eq!(
            b.event_features(&theta, ex).unwrap().len(),
            model.event_features(&theta, ex).unwrap().len()
        );
    }

    #[test]
    fn event_feature_shape_and_label_independence() {
        let (model, theta, examples) = tiny();
        let f = model.event_features(&theta, &examples[0]).unwrap();
        assert_eq!(f.len(), model.config.vocab_size + model.hidden_dim());
        let vs: f64 = f[..model.config.vocab_size].iter().sum();
        assert!((vs - 1.0).abs() < 1e-9);
        let mut relabeled = examples[0].clone();
        relabeled.label = 99;
        assert_eq!(model.event_features(&theta, &relabeled).unwrap(), f);
    }

    #[test]
    fn graph_weights_agree_with_value_route() {
        let (model, theta, examples) = tiny();
        let tensors = theta.lift::<f64>();
        for ex in &examples {
            let mut g = Graph::new(&tensors);
            let n = model.forward_example(&mut g, ex).unwrap();
            let out = model.encode(&theta, ex).unwrap();
            let w = trigger_weights(&out);
            for (a, b) in w.iter().zip(&g.value(n.weights).data) {
                assert!((a - b).abs() < 1e-12);
            }
            let t = trigger_feature(&out, &w).unwrap();
            for (a, b) in t.iter().zip(&g.value(n.trigger_feature).data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn templates_have_one_slot() {
        for id in [PromptId::A, PromptId::B, PromptId::C, PromptId::D] {
            let t = PromptTemplate::builtin(id).unwrap();
            assert!(t.slot().is_ok());
            let r = t.resolve(&Vocabulary::with_reserved()).unwrap();
            assert_eq!(r.ids[r.slot], Vocabulary::with_reserved().mask_id());
        }
        assert!(PromptTemplate::custom(vec!["a".into(), "b".into()]).is_err());
        assert!(PromptTemplate::custom(vec![MASK.into(), MASK.into()]).is_err());
        assert!(PromptTemplate::custom(vec!["event".into(), MASK.into()]).is_ok());
    }
}
