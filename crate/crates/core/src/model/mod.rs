//! The multimodal operator network: a patch-token data encoder, a symbolic
//! equation encoder, self-attention fusion over the concatenated sequence,
//! and a cross-attention decoder that maps query tokens (time, output patch)
//! to per-patch field values.
//!
//! All parameters live in a flat [`ParameterStore`] under dotted names
//! (`data_encoder.layer0.attn.wq.weight`, …), so checkpointing, optimizer
//! state, and parameter-count audits need no model-specific walking code.

mod blocks;

pub use blocks::{additive_mask, attention, cross_block, self_block, LN_EPS, MASK_SCORE};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::patching::{self, PatchConfig, PatchError};
use crate::rng::stream;
use crate::symbolic::TokenSequence;
use crate::tensor::{no_grad, ParameterStore, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sample {sample} has no unmasked tokens")]
    AllMasked { sample: usize },
    #[error("query (time {time}, patch {patch}) outside time < {t_limit}, patch < {p_limit}")]
    QueryOutOfRange { time: usize, patch: usize, t_limit: usize, p_limit: usize },
    #[error("symbol token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Full architectural description. Two checkpoints with equal configs are
/// parameter-compatible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the data/fusion/decoder stream.
    pub d_model: usize,
    /// Width of the symbol encoder; lifted to `d_model` before fusion when
    /// the two differ.
    pub d_sym: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub sym_heads: usize,
    pub layers_data_enc: usize,
    pub layers_sym_enc: usize,
    pub layers_fusion: usize,
    pub layers_decoder: usize,
    pub dropout: f64,
    pub patch: PatchConfig,
    pub vocab_size: usize,
    /// Maximum input-window length; the learned time table has
    /// `t0_max + t_max` rows shared by input frames and queries.
    pub t0_max: usize,
    /// Maximum forecast horizon.
    pub t_max: usize,
    /// Maximum symbol-sequence length (rows of the symbol position table).
    pub max_sym_len: usize,
}

impl ModelConfig {
    /// Laptop-scale profile: trains in minutes on a few CPU cores.
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            d_sym: 128,
            d_ffn: 256,
            n_heads: 4,
            sym_heads: 4,
            layers_data_enc: 2,
            layers_sym_enc: 2,
            layers_fusion: 2,
            layers_decoder: 2,
            dropout: 0.0,
            patch: PatchConfig::new(4, 8, 32).expect("static geometry"),
            vocab_size: 967,
            t0_max: 10,
            t_max: 10,
            max_sym_len: 256,
        }
    }

    /// Reference-scale profile (~167M parameters). Construct counts from it
    /// freely; instantiating the parameters needs ~1.3 GB.
    pub fn paper() -> Self {
        Self {
            d_model: 1024,
            d_sym: 512,
            d_ffn: 2048,
            n_heads: 8,
            sym_heads: 8,
            layers_data_enc: 2,
            layers_sym_enc: 4,
            layers_fusion: 8,
            layers_decoder: 8,
            dropout: 0.0,
            patch: PatchConfig::new(8, 16, 128).expect("static geometry"),
            vocab_size: 967,
            t0_max: 10,
            t_max: 10,
            max_sym_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.layers_sym_enc > 0 {
            if self.d_sym == 0 || self.sym_heads == 0 || self.d_sym % self.sym_heads != 0 {
                return err(format!("d_sym {} not divisible by {} heads", self.d_sym, self.sym_heads));
            }
            if self.vocab_size < 3 {
                return err(format!("vocabulary of {} cannot hold the special tokens", self.vocab_size));
            }
            if self.max_sym_len < 3 {
                return err(format!("max_sym_len {} cannot hold one equation", self.max_sym_len));
            }
        }
        if self.d_ffn == 0 {
            return err("d_ffn must be positive".into());
        }
        if self.layers_data_enc == 0 || self.layers_decoder == 0 {
            return err("at least one data-encoder and one decoder layer are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.t0_max == 0 || self.t_max == 0 {
            return err("t0_max and t_max must be positive".into());
        }
        for p in [self.patch.p_in, self.patch.p_out] {
            if p == 0 || self.patch.h % p != 0 {
                return err(format!("grid side {} not divisible by {p} patches", self.patch.h));
            }
        }
        if self.patch.c_max == 0 {
            return err("c_max must be positive".into());
        }
        Ok(())
    }
}

/// How one parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform `±1/√fan_in` (linear weights).
    Linear { fan_in: usize },
    /// Normal(0, 0.02) (embedding tables).
    Embed,
    /// All zeros (biases, and the output head so the untrained model predicts
    /// the normalized mean).
    Zero,
    /// All ones (layer-norm gains).
    One,
}

impl Init {
    fn sample(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::Linear { fan_in } => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-b..b)).collect()
            }
            Init::Embed => {
                let dist = Normal::new(0.0, 0.02).expect("valid normal");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        Tensor::from_vec(data, shape).expect("consistent spec shape").with_grad()
    }
}

/// Name, shape, and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Linear { fan_in },
    });
    if bias {
        out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![fan_out], init: Init::Zero });
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![d], init: Init::One });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![d], init: Init::Zero });
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    linear_specs(out, &format!("{prefix}.wq"), d, d, true);
    // No key bias: it would shift every key equally, adding a per-query
    // constant that cancels in the softmax — an exactly gradient-free weight.
    linear_specs(out, &format!("{prefix}.wk"), d, d, false);
    linear_specs(out, &format!("{prefix}.wv"), d, d, true);
    linear_specs(out, &format!("{prefix}.wo"), d, d, true);
}

fn self_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize) {
    ln_specs(out, &format!("{prefix}.ln1"), d);
    ln_specs(out, &format!("{prefix}.ln2"), d);
    attn_specs(out, &format!("{prefix}.attn"), d);
    linear_specs(out, &format!("{prefix}.ffn.w1"), d, f, true);
    linear_specs(out, &format!("{prefix}.ffn.w2"), f, d, true);
}

fn cross_block_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize) {
    ln_specs(out, &format!("{prefix}.ln_q"), d);
    ln_specs(out, &format!("{prefix}.ln_ctx"), d);
    ln_specs(out, &format!("{prefix}.ln2"), d);
    attn_specs(out, &format!("{prefix}.attn"), d);
    linear_specs(out, &format!("{prefix}.ffn.w1"), d, f, true);
    linear_specs(out, &format!("{prefix}.ffn.w2"), f, d, true);
}

/// Every parameter tensor of a model with this configuration. The symbol
/// stack is omitted entirely when `layers_sym_enc == 0` (the data-only
/// ablation), so such models carry no dead weights.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let d = cfg.d_model;
    linear_specs(&mut v, "data_proj", cfg.patch.token_dim_in(), d, true);
    for (name, rows) in [
        ("embed.time.weight", cfg.t0_max + cfg.t_max),
        ("embed.data_pos.weight", cfg.patch.tokens_per_frame_in()),
        ("embed.out_pos.weight", cfg.patch.tokens_per_frame_out()),
    ] {
        v.push(ParamSpec { name: name.into(), shape: vec![rows, d], init: Init::Embed });
    }
    for i in 0..cfg.layers_data_enc {
        self_block_specs(&mut v, &format!("data_encoder.layer{i}"), d, cfg.d_ffn);
    }
    if cfg.layers_sym_enc > 0 {
        v.push(ParamSpec {
            name: "embed.sym_tok.weight".into(),
            shape: vec![cfg.vocab_size, cfg.d_sym],
            init: Init::Embed,
        });
        v.push(ParamSpec {
            name: "embed.sym_pos.weight".into(),
            shape: vec![cfg.max_sym_len, cfg.d_sym],
            init: Init::Embed,
        });
        for i in 0..cfg.layers_sym_enc {
            self_block_specs(&mut v, &format!("sym_encoder.layer{i}"), cfg.d_sym, cfg.d_ffn);
        }
        if cfg.d_sym != d {
            linear_specs(&mut v, "sym_lift", cfg.d_sym, d, true);
        }
    }
    for i in 0..cfg.layers_fusion {
        self_block_specs(&mut v, &format!("fusion.layer{i}"), d, cfg.d_ffn);
    }
    for i in 0..cfg.layers_decoder {
        cross_block_specs(&mut v, &format!("decoder.layer{i}"), d, cfg.d_ffn);
    }
    ln_specs(&mut v, "final_ln", d);
    v.push(ParamSpec {
        name: "head.weight".into(),
        shape: vec![d, cfg.patch.token_dim_out()],
        init: Init::Zero,
    });
    v.push(ParamSpec { name: "head.bias".into(), shape: vec![cfg.patch.token_dim_out()], init: Init::Zero });
    v
}

/// Total scalar parameter count implied by a configuration, computed without
/// allocating anything.
pub fn spec_param_count(cfg: &ModelConfig) -> usize {
    parameter_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Whether weight decay applies to a parameter: matrix-shaped `.weight`
/// tensors outside the embedding tables. Biases, norms, and embeddings are
/// exempt.
pub fn decays(name: &str, rank: usize) -> bool {
    name.ends_with(".weight") && rank >= 2 && !name.contains("embed")
}

/// Requested output patches: `(time_index, patch_index)` pairs. Time indices
/// are rows of the shared time table; a forecast of frame `t0 + i` uses row
/// `t0 + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub entries: Vec<(usize, usize)>,
}

impl QuerySet {
    /// The complete grid for `t` output frames after a `t0`-frame window:
    /// time-major, then row-major over `p_out²` patches — the order
    /// `unpatchify` expects.
    pub fn full(t0: usize, t: usize, p_out: usize) -> Self {
        let mut entries = Vec::with_capacity(t * p_out * p_out);
        for ti in 0..t {
            for k in 0..p_out * p_out {
                entries.push((t0 + ti, k));
            }
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A padded batch of symbol-token sequences with per-token validity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolBatch {
    /// `[b · s]` token ids, row-major.
    pub ids: Vec<usize>,
    /// `[b · s]`; `false` marks padding.
    pub valid: Vec<bool>,
    pub b: usize,
    pub s: usize,
}

impl SymbolBatch {
    /// Pads sequences to the longest one in the batch.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Config("empty symbol batch".into()));
        }
        let s = seqs.iter().map(|q| q.len()).max().unwrap_or(0);
        if s == 0 {
            return Err(ModelError::Config("symbol batch of empty sequences".into()));
        }
        let b = seqs.len();
        let mut ids = Vec::with_capacity(b * s);
        let mut valid = Vec::with_capacity(b * s);
        for seq in seqs {
            ids.extend(seq.ids.iter().map(|&i| i as usize));
            valid.extend_from_slice(&seq.mask);
            ids.extend(std::iter::repeat(crate::symbolic::PAD as usize).take(s - seq.len()));
            valid.extend(std::iter::repeat(false).take(s - seq.len()));
        }
        Ok(Self { ids, valid, b, s })
    }
}

/// The assembled network: configuration plus named parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    /// Fresh parameters. Every tensor draws from its own named RNG stream,
    /// so initialization is order-independent and reproducible.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParameterStore::new();
        for spec in parameter_specs(&cfg) {
            let mut rng = stream(seed, &format!("init/{}", spec.name));
            params.insert(spec.name.clone(), spec.init.sample(&spec.shape, &mut rng));
        }
        Ok(Self { cfg, params })
    }

    /// Wraps an existing store (checkpoint load). The store must contain
    /// exactly the configured parameters with matching shapes.
    pub fn from_parts(cfg: ModelConfig, params: ParameterStore) -> Result<Self, ModelError> {
        cfg.validate()?;
        let specs = parameter_specs(&cfg);
        for spec in &specs {
            match params.get(&spec.name) {
                None => return Err(ModelError::Config(format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(ModelError::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                Some(_) => {}
            }
        }
        if params.len() != specs.len() {
            let expected: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<_> =
                params.names().into_iter().filter(|n| !expected.contains(n)).collect();
            return Err(ModelError::Config(format!("unexpected parameters in store: {extra:?}")));
        }
        Ok(Self { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Patch-embeds and self-attends an input window `[B, T0, C, H, W]`
    /// (values already normalized) into data features `[B, T0·p_in², d]`.
    pub fn encode_data(
        &self,
        window: &Tensor,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let t0 = window.shape()[1];
        let tokens = patching::patchify(window, &self.cfg.patch)?;
        let time_idx = patching::input_time_indices(t0, self.cfg.patch.p_in);
        let patch_idx = patching::input_patch_indices(t0, self.cfg.patch.p_in);
        let mut x = patching::add_encodings(
            &tokens,
            self.params.expect("data_proj.weight"),
            self.params.expect("data_proj.bias"),
            self.params.expect("embed.time.weight"),
            self.params.expect("embed.data_pos.weight"),
            &time_idx,
            &patch_idx,
        )?;
        for i in 0..self.cfg.layers_data_enc {
            x = self_block(
                &self.params,
                &format!("data_encoder.layer{i}"),
                &x,
                None,
                self.cfg.n_heads,
                self.cfg.dropout,
                rng,
            )?;
        }
        Ok(x)
    }

    /// Embeds and self-attends symbol tokens into `[B, S, d_model]` features
    /// (lifted from `d_sym` when the widths differ).
    pub fn encode_symbols(
        &self,
        sym: &SymbolBatch,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        if self.cfg.layers_sym_enc == 0 {
            return Err(ModelError::Config("this model has no symbol encoder".into()));
        }
        if sym.s > self.cfg.max_sym_len {
            return Err(ModelError::Config(format!(
                "symbol sequence length {} exceeds maximum {}",
                sym.s, self.cfg.max_sym_len
            )));
        }
        if let Some(&id) = sym.ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.cfg.vocab_size });
        }
        let tok = self
            .params
            .expect("embed.sym_tok.weight")
            .gather(&sym.ids)?
            .reshape(&[sym.b, sym.s, self.cfg.d_sym])?;
        let rows: Vec<usize> = (0..sym.s).collect();
        let pos = self.params.expect("embed.sym_pos.weight").gather(&rows)?;
        let mut x = tok.add(&pos)?;
        let mask = additive_mask(&sym.valid, sym.b, sym.s)?;
        for i in 0..self.cfg.layers_sym_enc {
            x = self_block(
                &self.params,
                &format!("sym_encoder.layer{i}"),
                &x,
                Some(&mask),
                self.cfg.sym_heads,
                self.cfg.dropout,
                rng,
            )?;
        }
        if self.cfg.d_sym != self.cfg.d_model {
            x = blocks::linear(&self.params, "sym_lift", &x)?;
        }
        Ok(x)
    }

    /// Concatenates data and symbol features and runs the fusion stack over
    /// the joint sequence. Returns the full fused sequence and the combined
    /// additive mask (None when there is no symbol segment).
    pub fn fuse(
        &self,
        data: &Tensor,
        symbols: Option<(&Tensor, &SymbolBatch)>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Option<Tensor>), ModelError> {
        let (mut x, mask) = match symbols {
            Some((symf, batch)) => {
                let (b, ld) = (data.shape()[0], data.shape()[1]);
                let joint = Tensor::concat(&[data.clone(), symf.clone()], 1)?;
                let mut valid = Vec::with_capacity(b * (ld + batch.s));
                for bi in 0..b {
                    valid.extend(std::iter::repeat(true).take(ld));
                    valid.extend_from_slice(&batch.valid[bi * batch.s..(bi + 1) * batch.s]);
                }
                let mask = additive_mask(&valid, b, ld + batch.s)?;
                (joint, Some(mask))
            }
            None => (data.clone(), None),
        };
        for i in 0..self.cfg.layers_fusion {
            x = self_block(
                &self.params,
                &format!("fusion.layer{i}"),
                &x,
                mask.as_ref(),
                self.cfg.n_heads,
                self.cfg.dropout,
                rng,
            )?;
        }
        Ok((x, mask))
    }

    /// Cross-attends query tokens against the fused sequence and projects to
    /// per-patch values `[B, Q, c_max·(h/p_out)²]`. Queries never attend to
    /// each other, so each output row is independent of the rest of the set.
    pub fn decode_queries(
        &self,
        fused: &Tensor,
        fused_mask: Option<&Tensor>,
        queries: &QuerySet,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        if queries.is_empty() {
            return Err(ModelError::Config("empty query set".into()));
        }
        let t_limit = self.cfg.t0_max + self.cfg.t_max;
        let p_limit = self.cfg.patch.tokens_per_frame_out();
        let mut times = Vec::with_capacity(queries.len());
        let mut patches = Vec::with_capacity(queries.len());
        for &(time, patch) in &queries.entries {
            if time >= t_limit || patch >= p_limit {
                return Err(ModelError::QueryOutOfRange { time, patch, t_limit, p_limit });
            }
            times.push(time);
            patches.push(patch);
        }
        let q = self
            .params
            .expect("embed.time.weight")
            .gather(&times)?
            .add(&self.params.expect("embed.out_pos.weight").gather(&patches)?)?;
        let b = fused.shape()[0];
        let mut x = Tensor::zeros(&[b, queries.len(), self.cfg.d_model]).add(&q)?;
        for i in 0..self.cfg.layers_decoder {
            x = cross_block(
                &self.params,
                &format!("decoder.layer{i}"),
                &x,
                fused,
                fused_mask,
                self.cfg.n_heads,
                self.cfg.dropout,
                rng,
            )?;
        }
        let x = blocks::layer_norm(&self.params, "final_ln", &x)?;
        Ok(blocks::linear(&self.params, "head", &x)?)
    }

    /// Full operator evaluation: window `[B, T0, C, H, W]` (or unbatched
    /// `[T0, C, H, W]`) plus symbol tokens to a `t_out`-frame forecast of the
    /// same channel count. Values are expected and produced in normalized
    /// space; see [`Model::forward_rollout`] for the physical-space loop.
    pub fn forward(
        &self,
        window: &Tensor,
        symbols: Option<&SymbolBatch>,
        t_out: usize,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor, ModelError> {
        let batched = match window.rank() {
            5 => true,
            4 => false,
            _ => {
                return Err(ModelError::Config(format!(
                    "window must be [t, c, h, w] or [b, t, c, h, w], got {:?}",
                    window.shape()
                )));
            }
        };
        let w5 = if batched {
            window.clone()
        } else {
            let mut s = vec![1];
            s.extend_from_slice(window.shape());
            window.reshape(&s)?
        };
        let sh = w5.shape().to_vec();
        let (b, t0, c, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        if h != self.cfg.patch.h || w != self.cfg.patch.h {
            return Err(ModelError::Config(format!(
                "grid {h}×{w} does not match the configured side {}",
                self.cfg.patch.h
            )));
        }
        if t0 == 0 || t0 > self.cfg.t0_max {
            return Err(ModelError::Config(format!(
                "input window of {t0} frames outside 1..={}",
                self.cfg.t0_max
            )));
        }
        if t_out == 0 || t_out > self.cfg.t_max {
            return Err(ModelError::Config(format!(
                "forecast of {t_out} frames outside 1..={}",
                self.cfg.t_max
            )));
        }
        match (self.cfg.layers_sym_enc, symbols) {
            (0, Some(_)) => {
                return Err(ModelError::Config(
                    "symbol tokens passed to a model without a symbol encoder".into(),
                ));
            }
            (n, None) if n > 0 => {
                return Err(ModelError::Config("this model requires symbol tokens".into()));
            }
            _ => {}
        }
        if let Some(s) = symbols {
            if s.b != b {
                return Err(ModelError::Config(format!(
                    "symbol batch of {} sequences for {b} windows",
                    s.b
                )));
            }
        }
        let data = self.encode_data(&w5, rng)?;
        let symf = symbols.map(|s| self.encode_symbols(s, rng)).transpose()?;
        let pair = symf.as_ref().map(|f| (f, symbols.expect("checked above")));
        let (fused, mask) = self.fuse(&data, pair, rng)?;
        let queries = QuerySet::full(t0, t_out, self.cfg.patch.p_out);
        let tokens = self.decode_queries(&fused, mask.as_ref(), &queries, rng)?;
        let pred = patching::unpatchify(&tokens, &self.cfg.patch, c, t_out)?;
        Ok(if batched { pred } else { pred.reshape(&[t_out, c, h, w])? })
    }

    /// Autoregressive inference in physical space: each step normalizes the
    /// current window by its own statistics, predicts one frame, maps it back,
    /// then slides the window forward. Runs without gradient history.
    pub fn forward_rollout(
        &self,
        window: &Tensor,
        symbols: Option<&SymbolBatch>,
        steps: usize,
    ) -> Result<Tensor, ModelError> {
        if steps == 0 {
            return Err(ModelError::Config("rollout needs at least one step".into()));
        }
        no_grad(|| {
            let batched = window.rank() == 5;
            let mut w5 = if batched {
                window.detach()
            } else {
                let mut s = vec![1];
                s.extend_from_slice(window.shape());
                window.detach().reshape(&s)?
            };
            let sh = w5.shape().to_vec();
            let (b, t0, c, h, w) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
            let chw = c * h * w;
            let mut out = vec![0.0; b * steps * chw];
            for step in 0..steps {
                let stats = patching::window_stats(&w5)?;
                let norm = patching::normalize(&w5, &stats)?;
                let pred_n = self.forward(&norm, symbols, 1, &mut None)?;
                let pred = patching::denormalize(&pred_n, &stats)?;
                let pd = pred.data();
                let wd = w5.data();
                let mut next = Vec::with_capacity(b * t0 * chw);
                for bi in 0..b {
                    let dst = (bi * steps + step) * chw;
                    out[dst..dst + chw].copy_from_slice(&pd[bi * chw..(bi + 1) * chw]);
                    let base = bi * t0 * chw;
                    next.extend_from_slice(&wd[base + chw..base + t0 * chw]);
                    next.extend_from_slice(&pd[bi * chw..(bi + 1) * chw]);
                }
                drop(pd);
                drop(wd);
                w5 = Tensor::from_vec(next, &sh)?;
            }
            let pred = Tensor::from_vec(out, &[b, steps, c, h, w])?;
            Ok(if batched { pred } else { pred.reshape(&[steps, c, h, w])? })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{parse_system, to_polish, Vocabulary};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_sym: 16,
            d_ffn: 24,
            n_heads: 2,
            sym_heads: 2,
            layers_data_enc: 1,
            layers_sym_enc: 1,
            layers_fusion: 1,
            layers_decoder: 1,
            dropout: 0.0,
            patch: PatchConfig::new(2, 2, 8).unwrap(),
            vocab_size: 64,
            t0_max: 3,
            t_max: 3,
            max_sym_len: 16,
        }
    }

    fn random_window(b: usize, t: usize, c: usize, h: usize, tag: &str) -> Tensor {
        let mut rng = stream(11, tag);
        let n = b * t * c * h * h;
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[b, t, c, h, h])
            .unwrap()
    }

    fn tiny_symbols(b: usize) -> SymbolBatch {
        // Hand-rolled id sequences below the tiny vocab size, varying length.
        let seqs: Vec<TokenSequence> = (0..b)
            .map(|i| TokenSequence::new(vec![1, 3 + i as u32, 9, 23, 2]))
            .collect();
        SymbolBatch::from_sequences(&seqs).unwrap()
    }

    /// Randomizes the zero-initialized head so gradients reach the trunk.
    fn randomize_head(model: &Model) {
        let mut rng = stream(12, "head");
        for name in ["head.weight", "head.bias"] {
            let t = model.params.expect(name);
            t.set_data((0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        }
    }

    #[test]
    fn desk_parameter_count_matches_hand_formula() {
        // Per self block at d=128, f=256: 4d² + 2df + 8d + f = 132_352;
        // cross blocks add 2d. Embeds, projections, and head by hand.
        let cfg = ModelConfig::desk();
        let expected = 2 * 132_352       // data encoder
            + 2 * 132_352                // symbol encoder (same widths)
            + 2 * 132_352                // fusion
            + 2 * 132_608                // decoder (cross)
            + 256 * 128 + 128            // data_proj (token dim 4·8² = 256)
            + 967 * 128                  // symbol token table
            + 256 * 128                  // symbol position table
            + 20 * 128                   // time table (t0_max + t_max rows)
            + 16 * 128                   // input patch positions (4²)
            + 64 * 128                   // output patch positions (8²)
            + 2 * 128                    // final layer norm
            + 128 * 64 + 64;             // head (output token dim 4·4² = 64)
        assert_eq!(expected, 1_270_080);
        assert_eq!(spec_param_count(&cfg), expected);
        let model = Model::init(cfg, 1).unwrap();
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn reference_profile_parameter_count_is_in_band() {
        let cfg = ModelConfig::paper();
        let count = spec_param_count(&cfg);
        assert_eq!(count, 166_616_832);
        let (lo, hi) = (152_100_000.0, 185_900_000.0);
        assert!((count as f64) >= lo && (count as f64) <= hi, "{count} outside ±10% of 169M");
    }

    #[test]
    fn data_only_config_carries_no_symbol_parameters() {
        let mut cfg = tiny();
        cfg.layers_sym_enc = 0;
        let specs = parameter_specs(&cfg);
        assert!(specs.iter().all(|s| !s.name.contains("sym")));
        let model = Model::init(cfg, 3).unwrap();
        let x = random_window(1, 2, 2, 8, "dataonly");
        let y = model.forward(&x, None, 2, &mut None).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 8, 8]);
        assert!(matches!(
            model.forward(&x, Some(&tiny_symbols(1)), 2, &mut None),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn zero_head_means_zero_prediction() {
        let model = Model::init(tiny(), 5).unwrap();
        let x = random_window(2, 2, 2, 8, "zerohead");
        let y = model.forward(&x, Some(&tiny_symbols(2)), 3, &mut None).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let cfg = tiny();
        let a = Model::init(cfg.clone(), 7).unwrap();
        let b = Model::init(cfg.clone(), 7).unwrap();
        let c = Model::init(cfg, 8).unwrap();
        randomize_head(&a);
        randomize_head(&b);
        let x = random_window(1, 2, 2, 8, "det");
        let sym = tiny_symbols(1);
        let ya = a.forward(&x, Some(&sym), 2, &mut None).unwrap().to_vec();
        let ya2 = a.forward(&x, Some(&sym), 2, &mut None).unwrap().to_vec();
        let yb = b.forward(&x, Some(&sym), 2, &mut None).unwrap().to_vec();
        assert_eq!(ya, ya2, "same model, same input must be bitwise identical");
        assert_eq!(ya, yb, "same seed must give an identical model");
        let wc = c.params.expect("data_proj.weight").to_vec();
        let wa = a.params.expect("data_proj.weight").to_vec();
        assert_ne!(wa, wc, "different seeds must differ");
    }

    #[test]
    fn queries_are_independent_of_batch_composition() {
        let model = Model::init(tiny(), 9).unwrap();
        randomize_head(&model);
        let x = random_window(1, 2, 2, 8, "qind");
        let sym = tiny_symbols(1);
        let data = model.encode_data(&x, &mut None).unwrap();
        let symf = model.encode_symbols(&sym, &mut None).unwrap();
        let (fused, mask) = model.fuse(&data, Some((&symf, &sym)), &mut None).unwrap();
        let full = QuerySet::full(2, 2, 2);
        let joint = model.decode_queries(&fused, mask.as_ref(), &full, &mut None).unwrap();
        let dout = joint.shape()[2];
        let jv = joint.to_vec();
        for (qi, &entry) in full.entries.iter().enumerate() {
            let single = QuerySet { entries: vec![entry] };
            let alone = model.decode_queries(&fused, mask.as_ref(), &single, &mut None).unwrap();
            for (j, a) in alone.to_vec().iter().enumerate() {
                let d = (jv[qi * dout + j] - a).abs();
                assert!(d <= 1e-10, "query {qi} output depends on its neighbors ({d:.3e})");
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let model = Model::init(tiny(), 13).unwrap();
        randomize_head(&model);
        let x = random_window(2, 2, 2, 8, "flow");
        let sym = tiny_symbols(2);
        let target = random_window(2, 3, 2, 8, "flowt");
        let pred = model.forward(&x, Some(&sym), 3, &mut None).unwrap();
        let loss = pred.sub(&target).unwrap().pow_scalar(2.0).mean_all();
        loss.backward().unwrap();
        for (name, t) in model.params.iter() {
            let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "{name} has zero gradient norm — dead wiring");
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = Model::init(tiny(), 17).unwrap();
        randomize_head(&model);
        let x = random_window(1, 2, 2, 8, "fd");
        let sym = tiny_symbols(1);
        let target = random_window(1, 2, 2, 8, "fdt");
        let loss_value = |m: &Model| {
            let pred = m.forward(&x, Some(&sym), 2, &mut None).unwrap();
            pred.sub(&target).unwrap().pow_scalar(2.0).mean_all().item()
        };
        let pred = model.forward(&x, Some(&sym), 2, &mut None).unwrap();
        let loss = pred.sub(&target).unwrap().pow_scalar(2.0).mean_all();
        loss.backward().unwrap();
        let h = 1e-5;
        for name in ["data_proj.weight", "fusion.layer0.ffn.w1.weight", "head.weight"] {
            let t = model.params.expect(name);
            let analytic = t.grad().unwrap();
            let base = t.to_vec();
            let mut check = stream(14, name);
            for _ in 0..4 {
                let i = check.gen_range(0..base.len());
                let mut d = base.clone();
                d[i] = base[i] + h;
                t.set_data(d.clone()).unwrap();
                let up = loss_value(&model);
                d[i] = base[i] - h;
                t.set_data(d).unwrap();
                let down = loss_value(&model);
                t.set_data(base.clone()).unwrap();
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {} vs numeric {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn symbol_tokens_influence_data_features_through_fusion() {
        let model = Model::init(tiny(), 19).unwrap();
        let x = random_window(1, 2, 2, 8, "perturb");
        let sym_a = SymbolBatch::from_sequences(&[TokenSequence::new(vec![1, 5, 9, 2])]).unwrap();
        let sym_b = SymbolBatch::from_sequences(&[TokenSequence::new(vec![1, 6, 9, 2])]).unwrap();
        let data = model.encode_data(&x, &mut None).unwrap();
        let fa = model.encode_symbols(&sym_a, &mut None).unwrap();
        let fb = model.encode_symbols(&sym_b, &mut None).unwrap();
        let (ya, _) = model.fuse(&data, Some((&fa, &sym_a)), &mut None).unwrap();
        let (yb, _) = model.fuse(&data, Some((&fb, &sym_b)), &mut None).unwrap();
        let ld = data.shape()[1] * data.shape()[2];
        let diff: f64 = ya.to_vec()[..ld]
            .iter()
            .zip(&yb.to_vec()[..ld])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-8, "data segment ignored the symbol change");
    }

    #[test]
    fn fused_length_is_sum_of_segments() {
        let model = Model::init(tiny(), 21).unwrap();
        let x = random_window(1, 2, 2, 8, "len");
        let sym = tiny_symbols(1);
        let data = model.encode_data(&x, &mut None).unwrap();
        let symf = model.encode_symbols(&sym, &mut None).unwrap();
        let (fused, _) = model.fuse(&data, Some((&symf, &sym)), &mut None).unwrap();
        assert_eq!(fused.shape()[1], data.shape()[1] + sym.s);
    }

    #[test]
    fn symbol_batch_pads_to_longest_sequence() {
        let a = TokenSequence::new(vec![1, 9, 2]);
        let b = TokenSequence::new(vec![1, 4, 5, 6, 2]);
        let batch = SymbolBatch::from_sequences(&[a, b]).unwrap();
        assert_eq!((batch.b, batch.s), (2, 5));
        assert_eq!(batch.ids[..5], [1, 9, 2, 0, 0]);
        assert_eq!(batch.valid[..5], [true, true, true, false, false]);
        assert_eq!(batch.ids[5..], [1, 4, 5, 6, 2]);
        assert!(batch.valid[5..].iter().all(|&v| v));
    }

    #[test]
    fn desk_profile_runs_on_real_equations() {
        let cfg = ModelConfig::desk();
        let model = Model::init(cfg, 23).unwrap();
        let vocab = Vocabulary::builtin();
        assert_eq!(vocab.len(), 967);
        let eqs = parse_system("dt(h) + div(h*u) = 0").unwrap();
        let seq = to_polish(&eqs, vocab).unwrap();
        let sym = SymbolBatch::from_sequences(&[seq]).unwrap();
        let x = random_window(1, 10, 3, 32, "desk").reshape(&[10, 3, 32, 32]).unwrap();
        let y = model.forward(&x, Some(&sym), 10, &mut None).unwrap();
        assert_eq!(y.shape(), &[10, 3, 32, 32]);
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rollout_matches_manual_normalize_forward_denormalize() {
        let model = Model::init(tiny(), 29).unwrap();
        randomize_head(&model);
        let x = random_window(2, 2, 2, 8, "roll");
        let sym = tiny_symbols(2);
        let rolled = model.forward_rollout(&x, Some(&sym), 2).unwrap();
        assert_eq!(rolled.shape(), &[2, 2, 2, 8, 8]);
        // Reproduce both steps by hand.
        let mut win = x.clone();
        let mut manual = Vec::new();
        for _ in 0..2 {
            let stats = patching::window_stats(&win).unwrap();
            let norm = patching::normalize(&win, &stats).unwrap();
            let pn = model.forward(&norm, Some(&sym), 1, &mut None).unwrap();
            let p = patching::denormalize(&pn, &stats).unwrap();
            manual.push(p.to_vec());
            let wd = win.to_vec();
            let pd = p.to_vec();
            let chw = 2 * 8 * 8;
            let mut next = Vec::new();
            for bi in 0..2 {
                let base = bi * 2 * chw;
                next.extend_from_slice(&wd[base + chw..base + 2 * chw]);
                next.extend_from_slice(&pd[bi * chw..(bi + 1) * chw]);
            }
            win = Tensor::from_vec(next, &[2, 2, 2, 8, 8]).unwrap();
        }
        let rv = rolled.to_vec();
        let chw = 2 * 8 * 8;
        for bi in 0..2 {
            for step in 0..2 {
                let got = &rv[(bi * 2 + step) * chw..(bi * 2 + step + 1) * chw];
                let want = &manual[step][bi * chw..(bi + 1) * chw];
                assert_eq!(got, want, "rollout step {step} batch {bi} diverged");
            }
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut cfg = tiny();
        cfg.n_heads = 3;
        assert!(matches!(Model::init(cfg, 1), Err(ModelError::Config(_))));
        let mut cfg = tiny();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.layers_decoder = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_validates_runtime_shapes() {
        let model = Model::init(tiny(), 31).unwrap();
        let sym = tiny_symbols(1);
        // Wrong grid side.
        let bad = random_window(1, 2, 2, 4, "badgrid");
        assert!(model.forward(&bad, Some(&sym), 1, &mut None).is_err());
        // Window longer than t0_max.
        let long = random_window(1, 4, 2, 8, "longwin");
        assert!(model.forward(&long, Some(&sym), 1, &mut None).is_err());
        // Horizon beyond t_max.
        let x = random_window(1, 2, 2, 8, "okwin");
        assert!(model.forward(&x, Some(&sym), 4, &mut None).is_err());
        // Missing symbols.
        assert!(model.forward(&x, None, 1, &mut None).is_err());
        // Token id beyond the vocabulary.
        let big = SymbolBatch::from_sequences(&[TokenSequence::new(vec![1, 63, 2])]).unwrap();
        assert!(model.forward(&x, Some(&big), 1, &mut None).is_ok());
        let over = SymbolBatch::from_sequences(&[TokenSequence::new(vec![1, 64, 2])]).unwrap();
        assert!(matches!(
            model.forward(&x, Some(&over), 1, &mut None),
            Err(ModelError::TokenOutOfRange { id: 64, vocab: 64 })
        ));
    }

    #[test]
    fn out_of_range_queries_are_rejected() {
        let model = Model::init(tiny(), 37).unwrap();
        let x = random_window(1, 2, 2, 8, "qrange");
        let sym = tiny_symbols(1);
        let data = model.encode_data(&x, &mut None).unwrap();
        let symf = model.encode_symbols(&sym, &mut None).unwrap();
        let (fused, mask) = model.fuse(&data, Some((&symf, &sym)), &mut None).unwrap();
        let bad_time = QuerySet { entries: vec![(6, 0)] }; // table has t0_max + t_max = 6 rows
        assert!(matches!(
            model.decode_queries(&fused, mask.as_ref(), &bad_time, &mut None),
            Err(ModelError::QueryOutOfRange { time: 6, .. })
        ));
        let bad_patch = QuerySet { entries: vec![(2, 4)] }; // p_out² = 4
        assert!(matches!(
            model.decode_queries(&fused, mask.as_ref(), &bad_patch, &mut None),
            Err(ModelError::QueryOutOfRange { patch: 4, .. })
        ));
    }

    #[test]
    fn from_parts_checks_the_inventory() {
        let cfg = tiny();
        let model = Model::init(cfg.clone(), 41).unwrap();
        // Round-trips cleanly.
        let again = Model::from_parts(cfg.clone(), model.params).unwrap();
        // Missing tensor.
        let mut store = again.params;
        let taken = store.remove("head.bias").unwrap();
        assert!(matches!(
            Model::from_parts(cfg.clone(), store),
            Err(ModelError::Config(ref m)) if m.contains("head.bias")
        ));
        // Rebuild, then add an extra tensor.
        let model = Model::init(cfg.clone(), 41).unwrap();
        let mut store = model.params;
        store.insert("stray.weight", taken);
        assert!(matches!(
            Model::from_parts(cfg.clone(), store),
            Err(ModelError::Config(ref m)) if m.contains("stray.weight")
        ));
        // Wrong shape.
        let model = Model::init(cfg.clone(), 41).unwrap();
        let mut store = model.params;
        store.remove("head.bias");
        store.insert("head.bias", Tensor::zeros(&[7]).with_grad());
        assert!(matches!(Model::from_parts(cfg, store), Err(ModelError::Config(_))));
    }

    #[test]
    fn weight_decay_predicate_selects_matrices_outside_embeddings() {
        assert!(decays("data_encoder.layer0.attn.wq.weight", 2));
        assert!(decays("head.weight", 2));
        assert!(decays("sym_lift.weight", 2));
        assert!(!decays("data_encoder.layer0.attn.wq.bias", 1));
        assert!(!decays("data_encoder.layer0.ln1.gain", 1));
        assert!(!decays("embed.sym_tok.weight", 2));
        assert!(!decays("embed.time.weight", 2));
    }
}
