//! A tiny pre-norm decoder-only transformer with a fused QKV projection per layer.
//!
//! The base weights are frozen during adaptation; an attached adapter rewrites
//! each layer's QKV projection as `W x + ΔW x`. Everything else (attention,
//! MLP, layer norms, embeddings and head) is fixed plumbing around it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams, AdapterVars, ModelDims, TiedLoraConfig};
use crate::error::{LabError, Result};
use crate::numkit::{Graph, Tensor, Var};

pub const BASE_INIT_STD: f64 = 0.02;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 500;

fn default_mlp_mult() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_mlp_mult")]
    pub mlp_mult: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d: 64,
            layers: 4,
            n_heads: 4,
            vocab_size: 32,
            max_seq_len: 128,
            mlp_mult: 4,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        ModelDims::new(self.d, self.layers)?;
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(LabError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.mlp_mult == 0 {
            return Err(LabError::Config("vocab_size and mlp_mult must be positive".into()));
        }
        if self.max_seq_len < 2 {
            return Err(LabError::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.d,
            layers: self.layers,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// Fused QKV projection, `3d × d`.
    pub qkv: Tensor,
    pub qkv_bias: Tensor,
    pub attn_out: Tensor,
    pub mlp_in: Tensor,
    pub mlp_out: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    /// Output head stored as a `vocab × d` map.
    pub head: Tensor,
}

const LAYER_FIELDS: [&str; 9] = [
    "qkv", "qkv_bias", "attn_out", "mlp_in", "mlp_out", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.qkv,
            &self.qkv_bias,
            &self.attn_out,
            &self.mlp_in,
            &self.mlp_out,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.qkv,
            &mut self.qkv_bias,
            &mut self.attn_out,
            &mut self.mlp_in,
            &mut self.mlp_out,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

impl BaseWeights {
    /// Every tensor with its canonical name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{field}"), t));
            }
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable tensors in the same order as [`BaseWeights::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in self.layers.iter_mut() {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    fn zeros_like(config: &TransformerConfig) -> BaseWeights {
        let (d, v, m) = (config.d, config.vocab_size, config.mlp_mult * config.d);
        let layer = LayerWeights {
            qkv: Tensor::zeros(&[3 * d, d]),
            qkv_bias: Tensor::zeros(&[3 * d]),
            attn_out: Tensor::zeros(&[d, d]),
            mlp_in: Tensor::zeros(&[m, d]),
            mlp_out: Tensor::zeros(&[d, m]),
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        };
        BaseWeights {
            tok_emb: Tensor::zeros(&[v, d]),
            pos_emb: Tensor::zeros(&[config.max_seq_len, d]),
            layers: vec![layer; config.layers],
            lnf_gain: Tensor::ones(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            head: Tensor::zeros(&[v, d]),
        }
    }

    /// Rebuilds weights from `(name, tensor)` pairs in canonical order.
    pub fn from_named(config: &TransformerConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut w = BaseWeights::zeros_like(config);
        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != named.len() {
            return Err(LabError::Config(format!(
                "base weights need {} tensors, got {}",
                names.len(),
                named.len()
            )));
        }
        for ((slot, expected), (name, t)) in w.tensors_mut().into_iter().zip(&names).zip(named) {
            if &name != expected {
                return Err(LabError::Config(format!(
                    "base tensor {name:?} found where {expected:?} was expected"
                )));
            }
            if slot.shape() != t.shape() {
                return Err(LabError::dim("base weight", t.shape(), slot.shape()));
            }
            *slot = t;
        }
        Ok(w)
    }

    pub fn qkv_weights(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| l.qkv.clone()).collect()
    }

    pub fn fingerprints(&self) -> Vec<(String, [u8; 32])> {
        self.named().into_iter().map(|(n, t)| (n, t.fingerprint())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// A `batch × seq` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 {
            return Err(LabError::Contract("token batch must be non-empty".into()));
        }
        if rows.iter().any(|r| r.len() != seq) {
            return Err(LabError::Contract("token rows must share one length".into()));
        }
        Ok(TokenBatch {
            batch: rows.len(),
            seq,
            ids: rows.concat(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Which leaves of a registered model require gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Inference only.
    None,
    /// Trainable adapter slots; the base stays frozen.
    Adapter,
    /// Every base weight (full fine-tuning / pretraining).
    Base,
}

struct LayerVars {
    qkv: Var,
    qkv_bias: Var,
    attn_out: Var,
    mlp_in: Var,
    mlp_out: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

/// A model's tensors registered as graph leaves.
pub struct ModelVars {
    base: Vec<Var>,
    layers: Vec<LayerVars>,
    adapter: Option<AdapterVars>,
    scope: GradScope,
}

impl ModelVars {
    /// Leaves that receive gradients under this scope, in trainable-slot order.
    pub fn trainable(&self) -> Vec<Var> {
        match self.scope {
            GradScope::None => Vec::new(),
            GradScope::Base => self.base.clone(),
            GradScope::Adapter => self
                .adapter
                .as_ref()
                .map(|a| a.trainable_vars().to_vec())
                .unwrap_or_default(),
        }
    }

    /// All base-weight leaves in canonical order.
    pub fn base_vars(&self) -> &[Var] {
        &self.base
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: TransformerConfig,
    pub base: BaseWeights,
    adapter: Option<(AdapterParams, TiedLoraConfig)>,
}

/// Random base model: Normal(0, 0.02²) matrices and embeddings, unit layer-norm gains, zero biases.
pub fn build_model(config: &TransformerConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = BaseWeights::zeros_like(config);
    let randomize = |t: &mut Tensor, rng: &mut ChaCha8Rng| {
        *t = Tensor::randn(t.shape(), BASE_INIT_STD, rng);
    };
    randomize(&mut base.tok_emb, &mut rng);
    randomize(&mut base.pos_emb, &mut rng);
    for layer in base.layers.iter_mut() {
        randomize(&mut layer.qkv, &mut rng);
        randomize(&mut layer.attn_out, &mut rng);
        randomize(&mut layer.mlp_in, &mut rng);
        randomize(&mut layer.mlp_out, &mut rng);
    }
    randomize(&mut base.head, &mut rng);
    Ok(Model {
        config: config.clone(),
        base,
        adapter: None,
    })
}

impl Model {
    pub fn from_parts(config: TransformerConfig, base: BaseWeights) -> Result<Self> {
        config.validate()?;
        let expected = BaseWeights::zeros_like(&config);
        for ((name, a), (_, b)) in base.named().into_iter().zip(expected.named()) {
            if a.shape() != b.shape() {
                return Err(LabError::Config(format!(
                    "base tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if base.layers.len() != config.layers {
            return Err(LabError::Config("layer count mismatch".into()));
        }
        Ok(Model {
            config,
            base,
            adapter: None,
        })
    }

    pub fn adapter(&self) -> Option<(&AdapterParams, &TiedLoraConfig)> {
        self.adapter.as_ref().map(|(p, c)| (p, c))
    }

    pub fn adapter_mut(&mut self) -> Option<&mut AdapterParams> {
        self.adapter.as_mut().map(|(p, _)| p)
    }

    /// Attaches an adapter after checking it against the model geometry.
    pub fn attach_adapter(mut self, params: AdapterParams, config: TiedLoraConfig) -> Result<Model> {
        config.validate()?;
        if config.dims != self.config.dims() {
            return Err(LabError::Config(format!(
                "adapter dims {:?} do not match model dims {:?}",
                config.dims,
                self.config.dims()
            )));
        }
        params.validate(&config)?;
        self.adapter = Some((params, config));
        Ok(self)
    }

    pub fn detach_adapter(mut self) -> (Model, Option<(AdapterParams, TiedLoraConfig)>) {
        let a = self.adapter.take();
        (self, a)
    }

    /// The plain model whose QKV weights absorb the attached adapter's update.
    pub fn merged(&self) -> Result<Model> {
        let mut base = self.base.clone();
        if let Some((params, cfg)) = &self.adapter {
            let merged = adapter::merge(params, cfg, &base.qkv_weights())?;
            for (layer, w) in base.layers.iter_mut().zip(merged) {
                layer.qkv = w;
            }
        }
        Ok(Model {
            config: self.config.clone(),
            base,
            adapter: None,
        })
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq_len {
            return Err(LabError::Config(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.seq, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::Index {
                what: "token id",
                index: bad,
                len: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Adds the model's tensors to `g` as leaves.
    pub fn register(&self, g: &mut Graph, scope: GradScope) -> Result<ModelVars> {
        if scope == GradScope::Adapter && self.adapter.is_none() {
            return Err(LabError::Contract("adapter scope needs an attached adapter".into()));
        }
        let train_base = scope == GradScope::Base;
        let base: Vec<Var> = self
            .base
            .named()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), train_base))
            .collect();
        let layers = (0..self.config.layers)
            .map(|l| {
                let o = 2 + l * LAYER_FIELDS.len();
                LayerVars {
                    qkv: base[o],
                    qkv_bias: base[o + 1],
                    attn_out: base[o + 2],
                    mlp_in: base[o + 3],
                    mlp_out: base[o + 4],
                    ln1_gain: base[o + 5],
                    ln1_bias: base[o + 6],
                    ln2_gain: base[o + 7],
                    ln2_bias: base[o + 8],
                }
            })
            .collect();
        let adapter = self
            .adapter
            .as_ref()
            .map(|(p, c)| AdapterVars::register(g, p, c, scope == GradScope::Adapter));
        Ok(ModelVars {
            base,
            layers,
            adapter,
            scope,
        })
    }

    /// Logits for every position, shape `(batch·seq) × vocab`.
    pub fn logits(&self, g: &mut Graph, vars: &ModelVars, tokens: &TokenBatch) -> Result<Var> {
        self.check_tokens(tokens)?;
        let n = vars.base.len();
        let (tok_emb, pos_emb) = (vars.base[0], vars.base[1]);
        let (lnf_gain, lnf_bias, head) = (vars.base[n - 3], vars.base[n - 2], vars.base[n - 1]);
        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
        let te = g.gather(tok_emb, &tokens.ids)?;
        let pe = g.gather(pos_emb, &positions)?;
        let mut x = g.add(te, pe)?;
        for (l, lv) in vars.layers.iter().enumerate() {
            let h = g.layer_norm(x, lv.ln1_gain, lv.ln1_bias)?;
            let qkv = match &vars.adapter {
                Some(a) => a.project(g, l, lv.qkv, Some(lv.qkv_bias), h)?,
                None => adapter::base_projection(g, lv.qkv, Some(lv.qkv_bias), h)?,
            };
            let att = g.causal_attention(qkv, tokens.batch, tokens.seq, self.config.n_heads)?;
            let o = g.matmul_bt(att, lv.attn_out)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, lv.ln2_gain, lv.ln2_bias)?;
            let m = g.matmul_bt(h, lv.mlp_in)?;
            let m = g.gelu(m)?;
            let m = g.matmul_bt(m, lv.mlp_out)?;
            x = g.add(x, m)?;
        }
        let x = g.layer_norm(x, lnf_gain, lnf_bias)?;
        g.matmul_bt(x, head)
    }

    /// Logits as a `batch × seq × vocab` tensor.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, GradScope::None)?;
        let out = self.logits(&mut g, &vars, tokens)?;
        g.value(out)
            .clone()
            .reshape(vec![tokens.batch, tokens.seq, self.config.vocab_size])
    }

    /// Mutable trainable tensors under `scope`, aligned with [`ModelVars::trainable`].
    pub fn trainable_tensors_mut(&mut self, scope: GradScope) -> Vec<&mut Tensor> {
        match scope {
            GradScope::None => Vec::new(),
            GradScope::Base => self.base.tensors_mut(),
            GradScope::Adapter => self
                .adapter
                .as_mut()
                .map(|(p, _)| p.trainable_tensors_mut())
                .unwrap_or_default(),
        }
    }

    /// Names of trainable tensors under `scope`.
    pub fn trainable_names(&self, scope: GradScope) -> Vec<String> {
        match scope {
            GradScope::None => Vec::new(),
            GradScope::Base => self.base.named().into_iter().map(|(n, _)| n).collect(),
            GradScope::Adapter => self
                .adapter
                .as_ref()
                .map(|(p, _)| p.trainable_slots().into_iter().map(|s| s.name).collect())
                .unwrap_or_default(),
        }
    }

    /// Fingerprints of everything that must stay fixed while training `scope`.
    pub fn frozen_fingerprints(&self, scope: GradScope) -> Vec<(String, [u8; 32])> {
        let mut out = Vec::new();
        if scope != GradScope::Base {
            out.extend(self.base.fingerprints());
        }
        if let Some((p, _)) = &self.adapter {
            if scope == GradScope::Adapter {
                out.extend(p.frozen_fingerprints().into_iter().map(|(n, f)| (format!("adapter.{n}"), f)));
            } else {
                out.extend(
                    p.slots()
                        .into_iter()
                        .map(|s| (format!("adapter.{}", s.name), s.tensor.fingerprint())),
                );
            }
        }
        out
    }

    /// Greedy continuation of one prompt; see [`Model::generate_batch`].
    pub fn generate(&self, prompt: &[usize], max_new_tokens: usize, eos: Option<usize>) -> Result<Vec<usize>> {
        let mut out = self.generate_batch(&[prompt.to_vec()], max_new_tokens, eos)?;
        Ok(out.remove(0))
    }

    /// Greedy decoding for prompts of equal length.
    ///
    /// Each step appends the argmax token (lowest id on ties). A sequence stops
    /// after emitting `eos`; all stop at `max_new_tokens` or when the context is full.
    /// Returned sequences include the prompt and any emitted `eos`.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new_tokens: usize,
        eos: Option<usize>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let len = prompts.first().map_or(0, Vec::len);
        if len == 0 || prompts.iter().any(|p| p.len() != len) {
            return Err(LabError::Contract("prompts must be non-empty and of equal length".into()));
        }
        if len > self.config.max_seq_len {
            return Err(LabError::Config(format!(
                "prompt length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut done = vec![false; seqs.len()];
        let steps = max_new_tokens.min(self.config.max_seq_len - len);
        let v = self.config.vocab_size;
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let tokens = TokenBatch::from_rows(&seqs)?;
            let logits = self.forward(&tokens)?;
            let t = tokens.seq;
            for (b, seq) in seqs.iter_mut().enumerate() {
                if done[b] {
                    // keep rows rectangular; the filler is dropped below
                    seq.push(eos.unwrap_or(0));
                    continue;
                }
                let row = &logits.data()[(b * t + t - 1) * v..(b * t + t) * v];
                let next = argmax(row);
                seq.push(next);
                if Some(next) == eos {
                    done[b] = true;
                }
            }
        }
        // drop filler after the first eos of each generated tail
        for seq in seqs.iter_mut() {
            if let Some(e) = eos {
                if let Some(pos) = seq[len..].iter().position(|&x| x == e) {
                    seq.truncate(len + pos + 1);
                }
            }
        }
        Ok(seqs)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
