//! The network: four embedding paths (word, pinyin, wubi, chaizi), a
//! sequence head per feature, a fusion layer, a transformer encoder stack
//! and the MLM output head.

mod checkpoint;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, Tape, Var};
use crate::encoders::{
    EncodedSequence, EncodedToken, FeatureAlphabets, Vocab, PINYIN_CAPACITY, WUBI_CAPACITY,
};
use crate::masking::MaskedBatch;
use crate::tensor::Tensor;
use crate::util::derive_rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

/// Additive score bias for positions attention must ignore.
const MASK_BIAS: f64 = -1e30;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("batch mismatch: {0}")]
    Batch(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "RNN_ATTN")]
    RnnAttn,
    #[serde(rename = "TEXTCNN")]
    TextCnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "CONCAT_LINEAR")]
    ConcatLinear,
    #[serde(rename = "ADD_FC")]
    AddFc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Pinyin,
    Wubi,
    Chaizi,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] =
        [FeatureKind::Pinyin, FeatureKind::Wubi, FeatureKind::Chaizi];

    fn name(self) -> &'static str {
        match self {
            FeatureKind::Pinyin => "pinyin",
            FeatureKind::Wubi => "wubi",
            FeatureKind::Chaizi => "chaizi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionEmbedderConfig {
    pub d_word: usize,
    pub d_feat: usize,
    pub head_kind: HeadKind,
    pub fusion_kind: FusionKind,
    pub d_model: usize,
    pub enabled_features: Vec<FeatureKind>,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub chaizi_capacity: usize,
}

impl Default for FusionEmbedderConfig {
    fn default() -> Self {
        Self {
            d_word: 64,
            d_feat: 32,
            head_kind: HeadKind::RnnAttn,
            fusion_kind: FusionKind::ConcatLinear,
            d_model: 64,
            enabled_features: FeatureKind::ALL.to_vec(),
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 64,
            chaizi_capacity: crate::encoders::DEFAULT_CHAIZI_CAPACITY,
        }
    }
}

impl FusionEmbedderConfig {
    /// Enabled features in the canonical pinyin, wubi, chaizi order.
    pub fn features(&self) -> Vec<FeatureKind> {
        FeatureKind::ALL
            .into_iter()
            .filter(|f| self.enabled_features.contains(f))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.d_word == 0 || self.d_feat == 0 || self.d_ff == 0 {
            return bad("widths must be positive".into());
        }
        if self.n_layers == 0 {
            return bad("n_layers must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.max_len < 3 {
            return bad(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.chaizi_capacity == 0 {
            return bad("chaizi_capacity must be positive".into());
        }
        for f in FeatureKind::ALL {
            if self.enabled_features.iter().filter(|&&g| g == f).count() > 1 {
                return bad(format!("feature {} enabled twice", f.name()));
            }
        }
        if self.fusion_kind == FusionKind::AddFc
            && !self.features().is_empty()
            && self.d_word != self.d_feat
        {
            return bad(format!(
                "ADD_FC needs equal path widths, got d_word {} and d_feat {}",
                self.d_word, self.d_feat
            ));
        }
        Ok(())
    }

    fn feature_capacity(&self, f: FeatureKind) -> usize {
        match f {
            FeatureKind::Pinyin => PINYIN_CAPACITY,
            FeatureKind::Wubi => WUBI_CAPACITY,
            FeatureKind::Chaizi => self.chaizi_capacity,
        }
    }

    /// Filter widths for the TextCNN head, clipped to the capacity.
    fn cnn_widths(&self, f: FeatureKind) -> Vec<usize> {
        let cap = self.feature_capacity(f);
        let w: Vec<usize> = [2usize, 3, 4].into_iter().filter(|&k| k <= cap).collect();
        if w.is_empty() {
            vec![1]
        } else {
            w
        }
    }

    /// Input width of the CONCAT_LINEAR fusion matrix.
    pub fn fusion_in_width(&self) -> usize {
        match self.fusion_kind {
            FusionKind::ConcatLinear => self.d_word + self.features().len() * self.d_feat,
            FusionKind::AddFc => self.d_word,
        }
    }
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Deterministic parameter layout for a given config and alphabet sizes.
fn param_specs(
    config: &FusionEmbedderConfig,
    vocab_size: usize,
    alphabet_sizes: &HashMap<FeatureKind, usize>,
) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let df = config.d_feat;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    p("word.table".into(), vec![vocab_size, config.d_word], Init::TruncNormal);
    for f in config.features() {
        let n = f.name();
        let a = alphabet_sizes[&f];
        p(format!("{n}.table"), vec![a, df], Init::TruncNormal);
        match config.head_kind {
            HeadKind::RnnAttn => {
                for gate in ["z", "r", "n"] {
                    p(format!("{n}.gru.wx{gate}"), vec![df, df], Init::TruncNormal);
                    p(format!("{n}.gru.wh{gate}"), vec![df, df], Init::TruncNormal);
                    p(format!("{n}.gru.b{gate}"), vec![df], Init::Zeros);
                }
                p(format!("{n}.attn.w"), vec![df, df], Init::TruncNormal);
                p(format!("{n}.attn.b"), vec![df], Init::Zeros);
                p(format!("{n}.attn.v"), vec![df, 1], Init::TruncNormal);
            }
            HeadKind::TextCnn => {
                let widths = config.cnn_widths(f);
                for &k in &widths {
                    p(format!("{n}.cnn.w{k}"), vec![k * df, df], Init::TruncNormal);
                    p(format!("{n}.cnn.b{k}"), vec![df], Init::Zeros);
                }
                p(format!("{n}.cnn.proj"), vec![widths.len() * df, df], Init::TruncNormal);
                p(format!("{n}.cnn.proj_b"), vec![df], Init::Zeros);
            }
        }
    }
    p("fuse.w".into(), vec![config.fusion_in_width(), d], Init::TruncNormal);
    p("fuse.b".into(), vec![d], Init::Zeros);
    p("pos.table".into(), vec![config.max_len, d], Init::TruncNormal);
    p("embed.ln.g".into(), vec![d], Init::Ones);
    p("embed.ln.b".into(), vec![d], Init::Zeros);
    for i in 0..config.n_layers {
        for m in ["q", "k", "v", "o"] {
            p(format!("layer{i}.attn.w{m}"), vec![d, d], Init::TruncNormal);
            p(format!("layer{i}.attn.b{m}"), vec![d], Init::Zeros);
        }
        p(format!("layer{i}.ln1.g"), vec![d], Init::Ones);
        p(format!("layer{i}.ln1.b"), vec![d], Init::Zeros);
        p(format!("layer{i}.ffn.w1"), vec![d, config.d_ff], Init::TruncNormal);
        p(format!("layer{i}.ffn.b1"), vec![config.d_ff], Init::Zeros);
        p(format!("layer{i}.ffn.w2"), vec![config.d_ff, d], Init::TruncNormal);
        p(format!("layer{i}.ffn.b2"), vec![d], Init::Zeros);
        p(format!("layer{i}.ln2.g"), vec![d], Init::Ones);
        p(format!("layer{i}.ln2.b"), vec![d], Init::Zeros);
    }
    p("mlm.dense.w".into(), vec![d, config.d_word], Init::TruncNormal);
    p("mlm.dense.b".into(), vec![config.d_word], Init::Zeros);
    p("mlm.ln.g".into(), vec![config.d_word], Init::Ones);
    p("mlm.ln.b".into(), vec![config.d_word], Init::Zeros);
    if config.d_word != config.d_model {
        // untied output projection; tied models reuse word.table
        p("mlm.decoder".into(), vec![config.d_word, vocab_size], Init::TruncNormal);
    }
    p("mlm.bias".into(), vec![vocab_size], Init::Zeros);
    specs
}

/// Fully-specified model: config, digests of the assets it was built
/// against, and every named parameter tensor.
#[derive(Debug, Clone)]
pub struct StyleBertModel {
    pub config: FusionEmbedderConfig,
    pub vocab_size: usize,
    pub alphabet_sizes: HashMap<FeatureKind, usize>,
    pub vocab_digest: String,
    pub alphabets_digest: String,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl StyleBertModel {
    /// Truncated-normal init (σ=0.02) for tables and linears, zeros for
    /// biases, ones for layer-norm gains. All randomness derives from
    /// `seed` and the parameter name.
    pub fn new(
        config: FusionEmbedderConfig,
        vocab: &Vocab,
        alphabets: &FeatureAlphabets,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let alphabet_sizes = HashMap::from([
            (FeatureKind::Pinyin, alphabets.pinyin_size()),
            (FeatureKind::Wubi, alphabets.wubi_size()),
            (FeatureKind::Chaizi, alphabets.chaizi_size()),
        ]);
        let specs = param_specs(&config, vocab.size(), &alphabet_sizes);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::TruncNormal => {
                    let mut rng = derive_rng(seed, &["init", &name], &[]);
                    Tensor::trunc_normal(&shape, 0.02, &mut rng)
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            names.push(name);
            params.push(t);
        }
        let index = names.iter().cloned().zip(0..).collect();
        Ok(Self {
            config,
            vocab_size: vocab.size(),
            alphabet_sizes,
            vocab_digest: vocab.digest(),
            alphabets_digest: alphabets.digest(),
            names,
            params,
            index,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params[self.index[name]]
    }

    /// True when the MLM output projection reuses the word table.
    pub fn tied_output(&self) -> bool {
        self.config.d_word == self.config.d_model
    }

    pub(crate) fn from_parts(
        config: FusionEmbedderConfig,
        vocab_size: usize,
        alphabet_sizes: HashMap<FeatureKind, usize>,
        vocab_digest: String,
        alphabets_digest: String,
        named: Vec<(String, Tensor)>,
    ) -> Self {
        let (names, params): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names.iter().cloned().zip(0..).collect();
        Self {
            config,
            vocab_size,
            alphabet_sizes,
            vocab_digest,
            alphabets_digest,
            names,
            params,
            index,
        }
    }

    /// Expected parameter shapes for a config, in registry order. Used by
    /// the checkpoint loader to validate what it reads.
    pub(crate) fn expected_specs(
        config: &FusionEmbedderConfig,
        vocab_size: usize,
        alphabet_sizes: &HashMap<FeatureKind, usize>,
    ) -> Vec<(String, Vec<usize>)> {
        param_specs(config, vocab_size, alphabet_sizes)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    /// Run the fusion embedder and transformer; returns the fusion vectors,
    /// the final hidden states and the MLM logits together with one tape
    /// `Var` per parameter (aligned with `params()`), so callers can read
    /// gradients after `backward`.
    pub fn forward_mlm<'t>(
        &self,
        tape: &'t Tape,
        batch: &BatchInput,
    ) -> Result<ForwardPass<'t>, ModelError> {
        let pass = self.forward_inner(tape, batch, true)?;
        Ok(pass)
    }

    /// Fusion embeddings only (no transformer); cheap path for probes.
    pub fn fuse_embeddings<'t>(
        &self,
        tape: &'t Tape,
        batch: &BatchInput,
    ) -> Result<ForwardPass<'t>, ModelError> {
        self.forward_inner(tape, batch, false)
    }

    fn forward_inner<'t>(
        &self,
        tape: &'t Tape,
        batch: &BatchInput,
        full: bool,
    ) -> Result<ForwardPass<'t>, ModelError> {
        batch.check(self)?;
        let (b, s) = (batch.batch, batch.seq);
        let n = b * s;
        let d = self.config.d_model;

        let vars: Vec<Var<'t>> =
            self.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let get = |name: &str| vars[self.index[name]];

        // word path
        let word = get("word.table").embedding_lookup(&batch.word_ids)?; // [N, d_word]

        // feature paths
        let mut feature_vecs = Vec::new();
        for f in self.config.features() {
            let grid = batch.grid(f);
            let v = match self.config.head_kind {
                HeadKind::RnnAttn => self.rnn_attn_head(f, grid, n, &get)?,
                HeadKind::TextCnn => self.textcnn_head(f, grid, n, &get)?,
            };
            feature_vecs.push(v);
        }

        // fusion
        let fused_in = match self.config.fusion_kind {
            FusionKind::ConcatLinear => {
                let mut parts = vec![word];
                parts.extend(feature_vecs);
                Var::concat_last(&parts)?
            }
            FusionKind::AddFc => {
                let mut acc = word;
                for v in feature_vecs {
                    acc = acc.add(v)?;
                }
                acc
            }
        };
        let fused = fused_in.matmul(get("fuse.w"))?.add_bias(get("fuse.b"))?; // [N, d]

        if !full {
            return Ok(ForwardPass { params: vars, fused, hidden: fused, logits: fused });
        }

        // positions + embedding layer norm
        let pos_ids: Vec<u32> = (0..n).map(|i| (i % s) as u32).collect();
        let pos = get("pos.table").embedding_lookup(&pos_ids)?;
        let mut x = fused
            .add(pos)?
            .layer_norm(get("embed.ln.g"), get("embed.ln.b"), 1e-12)?;

        // post-LN transformer stack
        let heads = self.config.n_heads;
        let dh = d / heads;
        let score_bias = batch.attention_bias(heads);
        for i in 0..self.config.n_layers {
            let name = |m: &str| format!("layer{i}.{m}");
            let proj = |x: Var<'t>, m: &str| -> Result<Var<'t>, ModelError> {
                Ok(x.matmul(get(&name(&format!("attn.w{m}"))))?
                    .add_bias(get(&name(&format!("attn.b{m}"))))?
                    .reshape(&[b, s, d])?
                    .split_heads(heads)?)
            };
            let q = proj(x, "q")?;
            let k = proj(x, "k")?;
            let v = proj(x, "v")?;
            let scores = q
                .matmul3(k.transpose_last())?
                .scale(1.0 / (dh as f64).sqrt())
                .add_const(&score_bias)?;
            let ctx = scores
                .softmax_last()
                .matmul3(v)?
                .merge_heads(heads)?
                .reshape(&[n, d])?
                .matmul(get(&name("attn.wo")))?
                .add_bias(get(&name("attn.bo")))?;
            x = x
                .add(ctx)?
                .layer_norm(get(&name("ln1.g")), get(&name("ln1.b")), 1e-12)?;
            let ff = x
                .matmul(get(&name("ffn.w1")))?
                .add_bias(get(&name("ffn.b1")))?
                .gelu()
                .matmul(get(&name("ffn.w2")))?
                .add_bias(get(&name("ffn.b2")))?;
            x = x
                .add(ff)?
                .layer_norm(get(&name("ln2.g")), get(&name("ln2.b")), 1e-12)?;
        }

        // MLM head; the decoder reuses the word table when widths match
        let h = x
            .matmul(get("mlm.dense.w"))?
            .add_bias(get("mlm.dense.b"))?
            .gelu()
            .layer_norm(get("mlm.ln.g"), get("mlm.ln.b"), 1e-12)?;
        let decoder = if self.tied_output() {
            get("word.table").transpose_last()
        } else {
            get("mlm.decoder")
        };
        let logits = h.matmul(decoder)?.add_bias(get("mlm.bias"))?;

        Ok(ForwardPass { params: vars, fused, hidden: x, logits })
    }

    /// GRU over the sub-token embeddings, additive attention over the
    /// hidden states, plus the mean of the input embeddings as a skip.
    /// All-PAD rows produce a zero vector.
    fn rnn_attn_head<'t>(
        &self,
        f: FeatureKind,
        grid: &FeatureGrid,
        n: usize,
        get: &dyn Fn(&str) -> Var<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let df = self.config.d_feat;
        let cap = grid.capacity;
        let fname = f.name();
        let tape = get("fuse.w").tape();

        let emb = get(&format!("{fname}.table"))
            .embedding_lookup(&grid.indices)?
            .reshape(&[n, cap, df])?;

        let step_valid: Vec<Vec<f64>> = (0..cap)
            .map(|t| grid.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect())
            .collect();

        let gru = |m: &str| get(&format!("{fname}.gru.{m}"));
        let mut h = tape.leaf(Tensor::zeros(&[n, df]));
        let mut hiddens = Vec::with_capacity(cap);
        let mut skip_sum = tape.leaf(Tensor::zeros(&[n, df]));
        for t in 0..cap {
            let x = emb.slice_axis1(t)?;
            let z = x
                .matmul(gru("wxz"))?
                .add(h.matmul(gru("whz"))?)?
                .add_bias(gru("bz"))?
                .sigmoid();
            let r = x
                .matmul(gru("wxr"))?
                .add(h.matmul(gru("whr"))?)?
                .add_bias(gru("br"))?
                .sigmoid();
            let nn = x
                .matmul(gru("wxn"))?
                .add(r.mul(h)?.matmul(gru("whn"))?)?
                .add_bias(gru("bn"))?
                .tanh_act();
            let h_new = nn.add(z.mul(h.sub(nn)?)?)?; // (1-z)·n + z·h
            // hold the previous state on padded steps
            h = h.add(h_new.sub(h)?.scale_rows(&step_valid[t])?)?;
            hiddens.push(h);
            skip_sum = skip_sum.add(x.scale_rows(&step_valid[t])?)?;
        }

        // additive attention: v·tanh(W h + b), padded steps pushed to -inf
        let mut scores = Vec::with_capacity(cap);
        for &ht in &hiddens {
            scores.push(
                ht.matmul(get(&format!("{fname}.attn.w")))?
                    .add_bias(get(&format!("{fname}.attn.b")))?
                    .tanh_act()
                    .matmul(get(&format!("{fname}.attn.v")))?,
            );
        }
        let mut bias = Tensor::zeros(&[n, cap]);
        for i in 0..n {
            for t in grid.lengths[i]..cap {
                bias.data_mut()[i * cap + t] = MASK_BIAS;
            }
        }
        let attn = Var::concat_last(&scores)?.add_const(&bias)?.softmax_last();
        let mut attended = tape.leaf(Tensor::zeros(&[n, df]));
        for (t, &ht) in hiddens.iter().enumerate() {
            let w = attn.slice_last(t, 1)?;
            attended = attended.add(ht.mul_broadcast_col(w)?)?;
        }

        let inv_len: Vec<f64> =
            grid.lengths.iter().map(|&l| 1.0 / l.max(1) as f64).collect();
        let skip = skip_sum.scale_rows(&inv_len)?;
        let nonzero: Vec<f64> =
            grid.lengths.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect();
        Ok(attended.add(skip)?.scale_rows(&nonzero)?)
    }

    /// Filters of widths {2,3,4} (clipped to the capacity), GeLU, masked
    /// max-pool over windows touching a real position, concat, project.
    fn textcnn_head<'t>(
        &self,
        f: FeatureKind,
        grid: &FeatureGrid,
        n: usize,
        get: &dyn Fn(&str) -> Var<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let df = self.config.d_feat;
        let cap = grid.capacity;
        let fname = f.name();

        let emb = get(&format!("{fname}.table"))
            .embedding_lookup(&grid.indices)?
            .reshape(&[n, cap, df])?;

        let mut pooled = Vec::new();
        for k in self.config.cnn_widths(f) {
            let tw = cap - k + 1;
            let conv = emb
                .windows_axis1(k)?
                .reshape(&[n * tw, k * df])?
                .matmul(get(&format!("{fname}.cnn.w{k}")))?
                .add_bias(get(&format!("{fname}.cnn.b{k}")))?
                .gelu()
                .reshape(&[n, tw, df])?;
            // a window counts when it starts on a real position; empty rows
            // fall back to window 0 and are zeroed below
            let valid: Vec<Vec<bool>> = grid
                .lengths
                .iter()
                .map(|&l| (0..tw).map(|i| i < l.max(1)).collect())
                .collect();
            pooled.push(conv.max_axis1_masked(&valid)?);
        }
        let cat = Var::concat_last(&pooled)?;
        let out = cat
            .matmul(get(&format!("{fname}.cnn.proj")))?
            .add_bias(get(&format!("{fname}.cnn.proj_b")))?;
        let nonzero: Vec<f64> =
            grid.lengths.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect();
        Ok(out.scale_rows(&nonzero)?)
    }
}

/// Everything a forward pass exposes: per-parameter `Var`s (for gradient
/// readout), fusion vectors `[B*S, d_model]`, final hidden states and MLM
/// logits `[B*S, vocab]`.
pub struct ForwardPass<'t> {
    pub params: Vec<Var<'t>>,
    pub fused: Var<'t>,
    pub hidden: Var<'t>,
    pub logits: Var<'t>,
}

/// One feature stream of a batch, flattened: `indices` is
/// `[batch*seq*capacity]`, `lengths` the per-token true lengths.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub capacity: usize,
    pub indices: Vec<u32>,
    pub lengths: Vec<usize>,
}

/// Dense, uniform-length batch ready for `forward_mlm`.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub batch: usize,
    pub seq: usize,
    pub word_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub pinyin: FeatureGrid,
    pub wubi: FeatureGrid,
    pub chaizi: FeatureGrid,
}

impl BatchInput {
    pub fn from_token_rows(rows: &[(&[EncodedToken], &[u8])]) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        let seq = rows[0].0.len();
        let chaizi_cap = rows[0].0[0].chaizi.capacity();
        let mut word_ids = Vec::new();
        let mut attention_mask = Vec::new();
        let mut grids = [
            FeatureGrid { capacity: PINYIN_CAPACITY, indices: vec![], lengths: vec![] },
            FeatureGrid { capacity: WUBI_CAPACITY, indices: vec![], lengths: vec![] },
            FeatureGrid { capacity: chaizi_cap, indices: vec![], lengths: vec![] },
        ];
        for (tokens, mask) in rows {
            if tokens.len() != seq || mask.len() != seq {
                return Err(ModelError::Batch(format!(
                    "ragged batch: expected length {seq}, got {}",
                    tokens.len()
                )));
            }
            for tok in *tokens {
                word_ids.push(tok.word_id);
                for (grid, fs) in
                    grids.iter_mut().zip([&tok.pinyin, &tok.wubi, &tok.chaizi])
                {
                    if fs.capacity() != grid.capacity {
                        return Err(ModelError::Batch(format!(
                            "feature capacity {} does not match {}",
                            fs.capacity(),
                            grid.capacity
                        )));
                    }
                    grid.indices.extend_from_slice(&fs.indices);
                    grid.lengths.push(fs.true_length);
                }
            }
            attention_mask.extend_from_slice(mask);
        }
        let [pinyin, wubi, chaizi] = grids;
        Ok(Self {
            batch: rows.len(),
            seq,
            word_ids,
            attention_mask,
            pinyin,
            wubi,
            chaizi,
        })
    }

    pub fn from_masked(batch: &MaskedBatch) -> Result<Self, ModelError> {
        let rows: Vec<(&[EncodedToken], &[u8])> = batch
            .rows
            .iter()
            .map(|r| (r.tokens.as_slice(), r.attention_mask.as_slice()))
            .collect();
        Self::from_token_rows(&rows)
    }

    pub fn from_sequences(seqs: &[EncodedSequence]) -> Result<Self, ModelError> {
        let rows: Vec<(&[EncodedToken], &[u8])> = seqs
            .iter()
            .map(|s| (s.tokens.as_slice(), s.attention_mask.as_slice()))
            .collect();
        Self::from_token_rows(&rows)
    }

    fn grid(&self, f: FeatureKind) -> &FeatureGrid {
        match f {
            FeatureKind::Pinyin => &self.pinyin,
            FeatureKind::Wubi => &self.wubi,
            FeatureKind::Chaizi => &self.chaizi,
        }
    }

    fn check(&self, model: &StyleBertModel) -> Result<(), ModelError> {
        if self.seq > model.config.max_len {
            return Err(ModelError::Batch(format!(
                "sequence length {} exceeds max_len {}",
                self.seq, model.config.max_len
            )));
        }
        if let Some(&bad) = self.word_ids.iter().find(|&&i| i as usize >= model.vocab_size)
        {
            return Err(ModelError::Batch(format!(
                "word id {bad} outside vocab of size {}",
                model.vocab_size
            )));
        }
        if self.chaizi.capacity != model.config.chaizi_capacity {
            return Err(ModelError::Batch(format!(
                "chaizi capacity {} does not match model capacity {}",
                self.chaizi.capacity, model.config.chaizi_capacity
            )));
        }
        Ok(())
    }

    /// `[B*H, S, S]` additive bias: 0 over real key positions, a large
    /// negative constant over padding.
    fn attention_bias(&self, heads: usize) -> Tensor {
        let (b, s) = (self.batch, self.seq);
        let mut out = Tensor::zeros(&[b * heads, s, s]);
        for bi in 0..b {
            for h in 0..heads {
                for qi in 0..s {
                    for ki in 0..s {
                        if self.attention_mask[bi * s + ki] == 0 {
                            out.data_mut()[((bi * heads + h) * s + qi) * s + ki] =
                                MASK_BIAS;
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
