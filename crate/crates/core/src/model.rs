//! Desk-scale encoder-decoder transformer with interchangeable heads.
//!
//! The body uses pre-layer-norm residual blocks, GELU feed-forward layers
//! and fixed sinusoidal positions. One token embedding table is shared by
//! encoder and decoder inputs; the output projection is a head, never tied
//! to the embedding.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{Batch, TokenMatrix};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Graph, ParamId, ParamStore, Parameter, Real, Tensor, Var};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            ffn_dim: 128,
            max_len: 32,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= EOS || self.max_len < 2 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Seq2SeqLm,
    TokenClassification,
    SequenceClassification,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Seq2SeqLm => "seq2seq_lm",
            HeadKind::TokenClassification => "token_classification",
            HeadKind::SequenceClassification => "sequence_classification",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq_lm" => Ok(HeadKind::Seq2SeqLm),
            "token_classification" => Ok(HeadKind::TokenClassification),
            "sequence_classification" => Ok(HeadKind::SequenceClassification),
            other => Err(Error::Config(format!("unknown head kind `{other}`"))),
        }
    }
}

/// An output module: a linear projection named `<prefix>.out.{weight,bias}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Head {
    pub kind: HeadKind,
    pub n_outputs: usize,
    pub prefix: String,
}

impl Head {
    pub fn weight_name(&self) -> String {
        format!("{}.out.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.out.bias", self.prefix)
    }

    pub fn param_names(&self) -> [String; 2] {
        [self.weight_name(), self.bias_name()]
    }
}

/// Canonical parameter name → storage slot, as seen by one model view.
pub type Bindings = HashMap<String, ParamId>;

/// Identity bindings over every parameter of a store.
pub fn bindings_of<T: Real>(store: &ParamStore<T>) -> Bindings {
    store
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect()
}

/// Read access to the parameters one forward pass uses.
#[derive(Clone, Copy)]
pub struct ModelParams<'a, T: Real> {
    pub store: &'a ParamStore<T>,
    pub bindings: &'a Bindings,
}

impl<'a, T: Real> ModelParams<'a, T> {
    pub fn new(store: &'a ParamStore<T>, bindings: &'a Bindings) -> Self {
        Self { store, bindings }
    }

    fn leaf(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self
            .bindings
            .get(name)
            .ok_or_else(|| Error::Routing(format!("parameter `{name}` is not bound")))?;
        Ok(g.param(self.store, *id))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// The architecture; parameters live outside in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn body_layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.ffn_dim);
        let mut out = vec![(
            "body.embed.tokens".to_string(),
            vec![c.vocab_size, d],
            Init::Normal { std: 0.02 },
        )];
        let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), vec![d, d], Init::Uniform { fan_in: d }));
                out.push((format!("{p}.b{w}"), vec![d], Init::Zeros));
            }
        };
        let ln = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            out.push((format!("{p}.gamma"), vec![d], Init::Ones));
            out.push((format!("{p}.beta"), vec![d], Init::Zeros));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f], Init::Uniform { fan_in: d }));
            out.push((format!("{p}.b1"), vec![f], Init::Zeros));
            out.push((format!("{p}.w2"), vec![f, d], Init::Uniform { fan_in: f }));
            out.push((format!("{p}.b2"), vec![d], Init::Zeros));
        };
        for i in 0..c.enc_layers {
            let p = format!("body.encoder.layer{i}");
            ln(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.attn"));
            ln(&mut out, &format!("{p}.ln2"));
            ffn(&mut out, &format!("{p}.ffn"));
        }
        ln(&mut out, "body.encoder.final_ln");
        for i in 0..c.dec_layers {
            let p = format!("body.decoder.layer{i}");
            ln(&mut out, &format!("{p}.ln1"));
            attn(&mut out, &format!("{p}.self_attn"));
            ln(&mut out, &format!("{p}.ln2"));
            attn(&mut out, &format!("{p}.cross_attn"));
            ln(&mut out, &format!("{p}.ln3"));
            ffn(&mut out, &format!("{p}.ffn"));
        }
        ln(&mut out, "body.decoder.final_ln");
        out
    }

    /// Freshly initialized body parameters, deterministic in `rng`.
    pub fn init_body<T: Real>(&self, rng: &mut StreamRng) -> Vec<Parameter<T>> {
        self.body_layout()
            .into_iter()
            .map(|(name, shape, init)| Parameter::new(name, sample(shape, init, rng)))
            .collect()
    }

    pub fn body_param_count(&self) -> usize {
        self.body_layout()
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Output size a head of `kind` must have, when fixed by the model.
    pub fn expected_outputs(&self, kind: HeadKind) -> Option<usize> {
        match kind {
            HeadKind::Seq2SeqLm => Some(self.config.vocab_size),
            _ => None,
        }
    }

    /// Randomly initialized head parameters under `prefix`.
    pub fn init_head<T: Real>(
        &self,
        head: &Head,
        rng: &mut StreamRng,
    ) -> Vec<Parameter<T>> {
        let d = self.config.d_model;
        vec![
            Parameter::new(
                head.weight_name(),
                sample(vec![d, head.n_outputs], Init::Uniform { fan_in: d }, rng),
            ),
            Parameter::new(head.bias_name(), sample(vec![head.n_outputs], Init::Zeros, rng)),
        ]
    }

    /// Checks that a head's bound parameters fit this model.
    pub fn check_head<T: Real>(&self, head: &Head, params: ModelParams<'_, T>) -> Result<()> {
        if let Some(n) = self.expected_outputs(head.kind) {
            if head.n_outputs != n {
                return Err(Error::Compatibility(format!(
                    "{} head must emit {n} outputs, got {}",
                    head.kind, head.n_outputs
                )));
            }
        }
        let d = self.config.d_model;
        let expect = [vec![d, head.n_outputs], vec![head.n_outputs]];
        for (name, shape) in head.param_names().iter().zip(expect) {
            let id = params
                .bindings
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("head parameter `{name}` missing")))?;
            let actual = params.store.get(*id).tensor.shape();
            if actual != shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "head parameter `{name}` has shape {actual:?}, model needs {shape:?}"
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, m: &TokenMatrix) -> Result<()> {
        if m.cols > self.config.max_len {
            return Err(Error::Length {
                len: m.cols,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn check_ids(&self, m: &TokenMatrix) -> Result<()> {
        if let Some(&bad) = m.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for `batch` through `head`: `[B, T, vocab]` for seq2seq,
    /// `[B, S, labels]` for token and `[B, labels]` for sequence
    /// classification. `dropout_rng` enables dropout when the config sets it.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        head: &Head,
        batch: &Batch,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let src = &batch.source;
        self.check_len(src)?;
        self.check_ids(src)?;
        let has_decoder = batch.decoder_input.is_some();
        if has_decoder != (head.kind == HeadKind::Seq2SeqLm) {
            return Err(Error::Input(format!(
                "{} head {} decoder inputs",
                head.kind,
                if has_decoder { "does not take" } else { "requires" }
            )));
        }
        let enc = self.encode(g, params, src, dropout_rng.as_deref_mut())?;
        let (b, d) = (src.rows, self.config.d_model);
        match head.kind {
            HeadKind::Seq2SeqLm => {
                let dec = batch.decoder_input.as_ref().expect("checked above");
                self.check_len(dec)?;
                self.check_ids(dec)?;
                let states = self.decode_states(g, params, enc, src, dec, dropout_rng)?;
                self.project(g, params, head, states)
            }
            HeadKind::TokenClassification => self.project(g, params, head, enc),
            HeadKind::SequenceClassification => {
                // Masked mean over real source positions.
                let mut w = Tensor::<T>::zeros(vec![b, 1, src.cols]);
                for r in 0..b {
                    let mask = src.row_mask(r);
                    let n = mask.iter().filter(|&&m| m).count().max(1);
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            w.data_mut()[r * src.cols + j] = T::one() / T::of(n as f64);
                        }
                    }
                }
                let w = g.constant(&w);
                let pooled = g.matmul(w, enc)?;
                let pooled = g.reshape(pooled, &[b, d])?;
                self.project(g, params, head, pooled)
            }
        }
    }

    fn project<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        head: &Head,
        x: Var,
    ) -> Result<Var> {
        let w = params.leaf(g, &head.weight_name())?;
        let bias = params.leaf(g, &head.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add(y, bias)
    }

    fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        tokens: &TokenMatrix,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let table = params.leaf(g, "body.embed.tokens")?;
        let x = g.embedding(table, &tokens.ids, &[tokens.rows, tokens.cols])?;
        let x = g.scale(x, (d as f64).sqrt())?;
        let pe = g.constant(&sinusoidal::<T>(tokens.cols, d));
        g.add(x, pe)
    }

    /// Encoder states `[B, S, D]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        src: &TokenMatrix,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let mut x = self.embed(g, params, src)?;
        let mask = g.constant(&attention_mask::<T>(src, src.cols, false));
        for i in 0..self.config.enc_layers {
            let p = format!("body.encoder.layer{i}");
            let h = self.layer_norm(g, params, &format!("{p}.ln1"), x)?;
            let a = self.attention(g, params, &format!("{p}.attn"), h, h, mask, src.cols, src.cols)?;
            let a = self.dropout(g, a, dropout_rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, params, &format!("{p}.ln2"), x)?;
            let f = self.ffn(g, params, &format!("{p}.ffn"), h)?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, params, "body.encoder.final_ln", x)
    }

    /// Decoder states `[B, T, D]` given encoder states.
    pub fn decode_states<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        enc: Var,
        src: &TokenMatrix,
        dec: &TokenMatrix,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let mut y = self.embed(g, params, dec)?;
        let self_mask = g.constant(&attention_mask::<T>(dec, dec.cols, true));
        let cross_mask = g.constant(&attention_mask::<T>(src, dec.cols, false));
        for i in 0..self.config.dec_layers {
            let p = format!("body.decoder.layer{i}");
            let h = self.layer_norm(g, params, &format!("{p}.ln1"), y)?;
            let a = self.attention(
                g,
                params,
                &format!("{p}.self_attn"),
                h,
                h,
                self_mask,
                dec.cols,
                dec.cols,
            )?;
            let a = self.dropout(g, a, dropout_rng.as_deref_mut())?;
            y = g.add(y, a)?;
            let h = self.layer_norm(g, params, &format!("{p}.ln2"), y)?;
            let c = self.attention(
                g,
                params,
                &format!("{p}.cross_attn"),
                h,
                enc,
                cross_mask,
                dec.cols,
                src.cols,
            )?;
            let c = self.dropout(g, c, dropout_rng.as_deref_mut())?;
            y = g.add(y, c)?;
            let h = self.layer_norm(g, params, &format!("{p}.ln3"), y)?;
            let f = self.ffn(g, params, &format!("{p}.ffn"), h)?;
            let f = self.dropout(g, f, dropout_rng.as_deref_mut())?;
            y = g.add(y, f)?;
        }
        self.layer_norm(g, params, "body.decoder.final_ln", y)
    }

    fn layer_norm<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let gamma = params.leaf(g, &format!("{prefix}.gamma"))?;
        let beta = params.leaf(g, &format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }

    fn linear<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        weight: &str,
        bias: &str,
        x: Var,
    ) -> Result<Var> {
        let w = params.leaf(g, weight)?;
        let b = params.leaf(g, bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn ffn<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let h = self.linear(g, params, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x)?;
        let h = g.gelu(h)?;
        self.linear(g, params, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: ModelParams<'_, T>,
        prefix: &str,
        query: Var,
        memory: Var,
        mask: Var,
        lq: usize,
        lk: usize,
    ) -> Result<Var> {
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let dh = d / h;
        let b = g.shape(query)[0];
        let proj = |g: &mut Graph<T>, x: Var, w: &str, len: usize| -> Result<Var> {
            let y = self.linear(g, params, &format!("{prefix}.w{w}"), &format!("{prefix}.b{w}"), x)?;
            let y = g.reshape(y, &[b, len, h, dh])?;
            g.transpose(y, 1, 2)
        };
        let q = proj(g, query, "q", lq)?;
        let k = proj(g, memory, "k", lk)?;
        let v = proj(g, memory, "v", lk)?;
        let kt = g.transpose(k, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        self.linear(g, params, &format!("{prefix}.wo"), &format!("{prefix}.bo"), ctx)
    }

    fn dropout<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = g.constant(&Tensor::new(shape, data)?);
        g.mul(x, mask)
    }

    /// Greedy autoregressive decoding of one source sequence (already
    /// wrapped in `<s> .. </s>`). Returns generated ids without `<s>`/`</s>`.
    pub fn greedy_decode<T: Real>(
        &self,
        params: ModelParams<'_, T>,
        head: &Head,
        source: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        Ok(self
            .greedy_decode_batch(params, head, &[source.to_vec()], max_len)?
            .pop()
            .unwrap_or_default())
    }

    /// Batched greedy decoding. Each step appends the argmax token (lowest
    /// id wins ties); a row stops at `</s>` or after `max_len` tokens.
    pub fn greedy_decode_batch<T: Real>(
        &self,
        params: ModelParams<'_, T>,
        head: &Head,
        sources: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if head.kind != HeadKind::Seq2SeqLm {
            return Err(Error::Routing(format!(
                "greedy decoding needs a seq2seq_lm head, got {}",
                head.kind
            )));
        }
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let src = TokenMatrix::from_rows(sources, PAD);
        self.check_len(&src)?;
        self.check_ids(&src)?;
        let steps = max_len.min(self.config.max_len - 1);
        let mut g = Graph::<T>::inference();
        let enc = self.encode(&mut g, params, &src, None)?;
        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS]; sources.len()];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
        let mut done = vec![false; sources.len()];
        let vocab = head.n_outputs;
        for step in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let dec = TokenMatrix::from_rows(&prefix, PAD);
            let states = self.decode_states(&mut g, params, enc, &src, &dec, None)?;
            let logits = self.project(&mut g, params, head, states)?;
            let values = g.value(logits);
            for r in 0..sources.len() {
                if done[r] {
                    prefix[r].push(PAD);
                    continue;
                }
                let base = (r * dec.cols + step) * vocab;
                let row = &values[base..base + vocab];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == EOS {
                    done[r] = true;
                    prefix[r].push(PAD);
                } else {
                    out[r].push(best);
                    prefix[r].push(best);
                }
            }
        }
        Ok(out)
    }
}

fn sample<T: Real>(shape: Vec<usize>, init: Init, rng: &mut StreamRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = match init {
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect()
        }
        Init::Normal { std } => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| T::of(normal.sample(rng))).collect()
        }
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
    };
    Tensor::new(shape, data).expect("sampled to shape")
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("sized to shape")
}

/// Additive mask `[B, 1, Lq, Lk]` hiding padded keys (and future keys when
/// `causal`). A row with no real key keeps key 0 visible as a sentinel.
pub fn attention_mask<T: Real>(keys: &TokenMatrix, lq: usize, causal: bool) -> Tensor<T> {
    let (b, lk) = (keys.rows, keys.cols);
    let masked = T::of(MASKED);
    let mut data = vec![T::zero(); b * lq * lk];
    for r in 0..b {
        let km = keys.row_mask(r);
        let any = km.iter().any(|&m| m);
        for i in 0..lq {
            for j in 0..lk {
                let visible = (km[j] || (!any && j == 0)) && (!causal || j <= i);
                if !visible {
                    data[(r * lq + i) * lk + j] = masked;
                }
            }
        }
    }
    Tensor::new(vec![b, 1, lq, lk], data).expect("sized to shape")
}
