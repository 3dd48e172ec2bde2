use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::autodiff::{
    archive_hash, encode_records, store_records, ArchiveRecord, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::error::{config_err, input_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    /// Decoder prototypes share storage with the token embeddings.
    pub tie_decoder: bool,
    /// Adds a per-token bias to decoded logits.
    pub decoder_bias: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 6,
            n_heads: 2,
            max_len: 64,
            ffn_mult: 4,
            tie_decoder: true,
            decoder_bias: false,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> Result<usize> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(self.d_model / self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.head_dim()?;
        if self.n_layers == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(config_err("n_layers, max_len and ffn_mult must be positive"));
        }
        Ok(())
    }
}

/// Parameter handles of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub attn_ln_g: ParamId,
    pub attn_ln_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_ln_g: ParamId,
    pub ffn_ln_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub emb_ln_g: ParamId,
    pub emb_ln_b: ParamId,
    pub layers: Vec<LayerLayout>,
    /// Equals `tok_emb` when tied.
    pub decoder: ParamId,
    pub decoder_bias: Option<ParamId>,
}

fn layer_name(l: usize, rest: &str) -> String {
    format!("layer{l}.{rest}")
}

impl ModelLayout {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        let ds = config.head_dim()?;
        let ff = d * config.ffn_mult;
        let std = config.init_std;
        let randn = |shape: &[usize], rng: &mut R| Tensor::randn(shape, std, rng);
        let tok_emb = store.add("embeddings.token", randn(&[vocab_size, d], rng), true)?;
        let pos_emb = store.add("embeddings.position", randn(&[config.max_len, d], rng), true)?;
        let emb_ln_g = store.add("embeddings.ln.gain", Tensor::full(&[d], 1.0), true)?;
        let emb_ln_b = store.add("embeddings.ln.bias", Tensor::zeros(&[d]), true)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let heads = |kind: &str, rng: &mut R, store: &mut ParamStore| -> Result<Vec<ParamId>> {
                (0..config.n_heads)
                    .map(|h| store.add(layer_name(l, &format!("attn.head{h}.W_{kind}")), randn(&[d, ds], rng), true))
                    .collect()
            };
            let w_q = heads("q", rng, store)?;
            let w_k = heads("k", rng, store)?;
            let w_v = heads("v", rng, store)?;
            layers.push(LayerLayout {
                w_q,
                w_k,
                w_v,
                out_w: store.add(layer_name(l, "attn.out.weight"), randn(&[d, d], rng), true)?,
                out_b: store.add(layer_name(l, "attn.out.bias"), Tensor::zeros(&[d]), true)?,
                attn_ln_g: store.add(layer_name(l, "attn.ln.gain"), Tensor::full(&[d], 1.0), true)?,
                attn_ln_b: store.add(layer_name(l, "attn.ln.bias"), Tensor::zeros(&[d]), true)?,
                ffn_in_w: store.add(layer_name(l, "ffn.in.weight"), randn(&[d, ff], rng), true)?,
                ffn_in_b: store.add(layer_name(l, "ffn.in.bias"), Tensor::zeros(&[ff]), true)?,
                ffn_out_w: store.add(layer_name(l, "ffn.out.weight"), randn(&[ff, d], rng), true)?,
                ffn_out_b: store.add(layer_name(l, "ffn.out.bias"), Tensor::zeros(&[d]), true)?,
                ffn_ln_g: store.add(layer_name(l, "ffn.ln.gain"), Tensor::full(&[d], 1.0), true)?,
                ffn_ln_b: store.add(layer_name(l, "ffn.ln.bias"), Tensor::zeros(&[d]), true)?,
            });
        }
        let decoder = if config.tie_decoder {
            tok_emb
        } else {
            store.add("decoder.weight", randn(&[vocab_size, d], rng), true)?
        };
        let decoder_bias = if config.decoder_bias {
            Some(store.add("decoder.bias", Tensor::zeros(&[vocab_size]), true)?)
        } else {
            None
        };
        Ok(Self {
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            decoder,
            decoder_bias,
        })
    }

    /// Resolves handles by name in a store that holds a model's parameters.
    pub fn resolve(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let get = |name: String| store.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let heads = |kind: &str| -> Result<Vec<ParamId>> {
                (0..config.n_heads)
                    .map(|h| get(layer_name(l, &format!("attn.head{h}.W_{kind}"))))
                    .collect()
            };
            layers.push(LayerLayout {
                w_q: heads("q")?,
                w_k: heads("k")?,
                w_v: heads("v")?,
                out_w: get(layer_name(l, "attn.out.weight"))?,
                out_b: get(layer_name(l, "attn.out.bias"))?,
                attn_ln_g: get(layer_name(l, "attn.ln.gain"))?,
                attn_ln_b: get(layer_name(l, "attn.ln.bias"))?,
                ffn_in_w: get(layer_name(l, "ffn.in.weight"))?,
                ffn_in_b: get(layer_name(l, "ffn.in.bias"))?,
                ffn_out_w: get(layer_name(l, "ffn.out.weight"))?,
                ffn_out_b: get(layer_name(l, "ffn.out.bias"))?,
                ffn_ln_g: get(layer_name(l, "ffn.ln.gain"))?,
                ffn_ln_b: get(layer_name(l, "ffn.ln.bias"))?,
            });
        }
        let tok_emb = get("embeddings.token".into())?;
        Ok(Self {
            tok_emb,
            pos_emb: get("embeddings.position".into())?,
            emb_ln_g: get("embeddings.ln.gain".into())?,
            emb_ln_b: get("embeddings.ln.bias".into())?,
            layers,
            decoder: if config.tie_decoder { tok_emb } else { get("decoder.weight".into())? },
            decoder_bias: if config.decoder_bias { Some(get("decoder.bias".into())?) } else { None },
        })
    }

    /// Every parameter handle that belongs to the base model.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb, self.emb_ln_g, self.emb_ln_b];
        for l in &self.layers {
            ids.extend(l.w_q.iter().chain(&l.w_k).chain(&l.w_v));
            ids.extend([
                l.out_w, l.out_b, l.attn_ln_g, l.attn_ln_b, l.ffn_in_w, l.ffn_in_b, l.ffn_out_w, l.ffn_out_b,
                l.ffn_ln_g, l.ffn_ln_b,
            ]);
        }
        if self.decoder != self.tok_emb {
            ids.push(self.decoder);
        }
        ids.extend(self.decoder_bias);
        ids
    }
}

/// Output of one multi-head attention call.
#[derive(Clone, Debug)]
pub struct MhaOutput {
    /// `f(cat(head_1..head_t))`, `n x d`.
    pub output: Var,
    /// Per-head attention probabilities, `n x g` each.
    pub weights: Vec<Var>,
}

/// Graph-building view over a model's parameters. The store may hold extra
/// parameters beyond the base model (adapters, classifier).
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub config: &'a ModelConfig,
    pub layout: &'a ModelLayout,
    pub store: &'a ParamStore,
}

impl<'a> Encoder<'a> {
    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(input_err("empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        let vocab = self.store.value(self.layout.tok_emb).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(input_err(format!("token id {bad} outside vocabulary of size {vocab}")));
        }
        Ok(())
    }

    /// `LN_e(E[id] + P[pos])`
    pub fn embed(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Var> {
        self.check_ids(ids)?;
        let e = g.param(self.store, self.layout.tok_emb);
        let p = g.param(self.store, self.layout.pos_emb);
        let tok = g.gather_rows(e, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.gather_rows(p, &positions)?;
        let x = g.add(tok, pos)?;
        self.embedding_norm(g, x)
    }

    pub fn embedding_norm(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.store, self.layout.emb_ln_g);
        let bias = g.param(self.store, self.layout.emb_ln_b);
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention of layer `l`. Keys and values use `kv` projections
    /// when given, otherwise the layer's own. `mask` is added to the scores.
    pub fn mha(
        &self,
        g: &mut Graph,
        l: usize,
        q_in: Var,
        kv_in: Var,
        kv: Option<(&[ParamId], &[ParamId])>,
        mask: Option<Var>,
    ) -> Result<MhaOutput> {
        let layer = &self.layout.layers[l];
        let ds = self.config.head_dim()?;
        let (wk, wv) = kv.unwrap_or((&layer.w_k, &layer.w_v));
        let scale = 1.0 / (ds as f64).sqrt();
        let mut heads = Vec::with_capacity(layer.w_q.len());
        let mut weights = Vec::with_capacity(layer.w_q.len());
        for h in 0..layer.w_q.len() {
            let wq = g.param(self.store, layer.w_q[h]);
            let wkh = g.param(self.store, wk[h]);
            let wvh = g.param(self.store, wv[h]);
            let q = g.matmul(q_in, wq)?;
            let k = g.matmul(kv_in, wkh)?;
            let v = g.matmul(kv_in, wvh)?;
            let scores = g.matmul_bt(q, k)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let output = self.project_out(g, l, cat)?;
        Ok(MhaOutput { output, weights })
    }

    /// The linear map `f` applied after head concatenation.
    pub fn project_out(&self, g: &mut Graph, l: usize, x: Var) -> Result<Var> {
        let layer = &self.layout.layers[l];
        let w = g.param(self.store, layer.out_w);
        let b = g.param(self.store, layer.out_b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// `LN(x + residual)` with the attention layer-norm of layer `l`.
    pub fn attn_norm(&self, g: &mut Graph, l: usize, x: Var, residual: Var) -> Result<Var> {
        let layer = &self.layout.layers[l];
        let s = g.add(x, residual)?;
        let gain = g.param(self.store, layer.attn_ln_g);
        let bias = g.param(self.store, layer.attn_ln_b);
        g.layer_norm(s, gain, bias)
    }

    /// Feed-forward sub-block with residual and layer-norm.
    pub fn ffn_block(&self, g: &mut Graph, l: usize, h: Var) -> Result<Var> {
        let layer = &self.layout.layers[l];
        let w1 = g.param(self.store, layer.ffn_in_w);
        let b1 = g.param(self.store, layer.ffn_in_b);
        let w2 = g.param(self.store, layer.ffn_out_w);
        let b2 = g.param(self.store, layer.ffn_out_b);
        let a = g.matmul(h, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.gelu(a)?;
        let o = g.matmul(a, w2)?;
        let o = g.add_row(o, b2)?;
        let s = g.add(o, h)?;
        let gain = g.param(self.store, layer.ffn_ln_g);
        let bias = g.param(self.store, layer.ffn_ln_b);
        g.layer_norm(s, gain, bias)
    }

    /// One plain transformer layer.
    pub fn layer(&self, g: &mut Graph, l: usize, h: Var) -> Result<Var> {
        let attn = self.mha(g, l, h, h, None, None)?;
        let h1 = self.attn_norm(g, l, attn.output, h)?;
        self.ffn_block(g, l, h1)
    }

    /// Hidden states after the embedding and after every layer.
    pub fn forward(&self, g: &mut Graph, ids: &[TokenId]) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.config.n_layers + 1);
        let mut h = self.embed(g, ids)?;
        states.push(h);
        for l in 0..self.config.n_layers {
            h = self.layer(g, l, h)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Logits over the vocabulary for each row of `h`.
    pub fn decode(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w = g.param(self.store, self.layout.decoder);
        let logits = g.matmul_bt(h, w)?;
        match self.layout.decoder_bias {
            Some(b) => {
                let b = g.param(self.store, b);
                g.add_row(logits, b)
            }
            None => Ok(logits),
        }
    }
}

/// Embeddings, transformer stack and decoder prototypes produced by MLM
/// pre-training.
#[derive(Clone, Debug)]
pub struct PretrainedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub layout: ModelLayout,
}

impl PretrainedModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = ModelLayout::register(&mut params, &config, vocab.len(), rng)?;
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder {
            config: &self.config,
            layout: &self.layout,
            store: &self.params,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Final-layer hidden states, `n x d`.
    pub fn encode(&self, ids: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let states = self.encoder().forward(&mut g, ids)?;
        Ok(g.value(*states.last().unwrap()).clone())
    }

    pub fn embeddings(&self) -> &Tensor {
        self.params.value(self.layout.tok_emb)
    }

    pub fn positions(&self) -> &Tensor {
        self.params.value(self.layout.pos_emb)
    }

    /// The decoder matrix: one global prototype per vocabulary token.
    pub fn prototypes(&self) -> &Tensor {
        self.params.value(self.layout.decoder)
    }

    /// `logits[w] = W_δ[w] · h` (plus the decoder bias when `with_bias` and the
    /// model has one).
    pub fn decode_logits(&self, h: &[f64], with_bias: bool) -> Result<Vec<f64>> {
        let w = self.prototypes();
        if h.len() != w.cols() {
            return Err(Error::Shape {
                op: "decode_logits",
                shapes: vec![vec![h.len()], w.shape().to_vec()],
            });
        }
        let mut logits: Vec<f64> = (0..w.rows()).map(|r| w.row(r).iter().zip(h).map(|(a, b)| a * b).sum()).collect();
        if let (true, Some(b)) = (with_bias, self.layout.decoder_bias) {
            logits.iter_mut().zip(self.params.value(b).data()).for_each(|(l, b)| *l += b);
        }
        Ok(logits)
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|(_, p)| !p.trainable)
    }

    pub fn records(&self) -> Vec<ArchiveRecord> {
        store_records(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.records())
    }

    /// Hash of the serialized checkpoint, used to bind adapter checkpoints.
    pub fn checkpoint_hash(&self) -> String {
        archive_hash(&self.to_bytes())
    }

    /// Rebuilds a model from archive records, inferring the architecture from
    /// parameter names and shapes.
    pub fn from_records(vocab: Vocabulary, records: Vec<ArchiveRecord>, init_std: f64) -> Result<Self> {
        let mut params = ParamStore::new();
        for r in records {
            params.add(r.name, r.value, r.trainable)?;
        }
        let tok = params
            .id("embeddings.token")
            .ok_or_else(|| Error::Checkpoint("missing embeddings.token".into()))?;
        let (vocab_size, d_model) = (params.value(tok).rows(), params.value(tok).cols());
        if vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {vocab_size} token rows, vocabulary has {}",
                vocab.len()
            )));
        }
        let max_len = params
            .id("embeddings.position")
            .map(|id| params.value(id).rows())
            .ok_or_else(|| Error::Checkpoint("missing embeddings.position".into()))?;
        let n_layers = (0..).take_while(|l| params.id(&layer_name(*l, "attn.out.weight")).is_some()).count();
        let n_heads = (0..).take_while(|h| params.id(&format!("layer0.attn.head{h}.W_q")).is_some()).count();
        let ffn = params
            .id("layer0.ffn.in.weight")
            .map(|id| params.value(id).cols())
            .ok_or_else(|| Error::Checkpoint("missing layer0.ffn.in.weight".into()))?;
        let config = ModelConfig {
            d_model,
            n_layers,
            n_heads,
            max_len,
            ffn_mult: ffn / d_model,
            tie_decoder: params.id("decoder.weight").is_none(),
            decoder_bias: params.id("decoder.bias").is_some(),
            init_std,
        };
        config.validate()?;
        let layout = ModelLayout::resolve(&params, &config)?;
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> PretrainedModel {
        let vocab = Vocabulary::with_specials((0..10).map(|i| format!("t{i}"))).unwrap();
        let config = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 16,
            ..ModelConfig::default()
        };
        PretrainedModel::init(config, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn bad_head_count_is_config_error() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encode_rejects_empty_and_overlong() {
        let m = tiny(1);
        assert!(m.encode(&[]).is_err());
        let long = vec![6; 17];
        assert!(matches!(m.encode(&long), Err(Error::TooLong { len: 17, max: 16 })));
    }

    #[test]
    fn single_pad_token_is_finite() {
        let m = tiny(2);
        let h = m.encode(&[m.vocab.pad]).unwrap();
        assert_eq!(h.shape(), &[1, 8]);
        assert!(h.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_position_sensitive() {
        let m = tiny(3);
        let a = m.encode(&[6, 7, 8]).unwrap();
        let b = m.encode(&[8, 7, 6]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn decode_zero_vector_gives_zero_logits() {
        let m = tiny(4);
        let logits = m.decode_logits(&[0.0; 8], true).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        assert!(m.decode_logits(&[0.0; 7], false).is_err());
    }

    #[test]
    fn decode_matches_row_loop() {
        let m = tiny(5);
        let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = m.decode_logits(&h, false).unwrap();
        let w = m.prototypes();
        for r in 0..w.rows() {
            let mut acc = 0.0;
            for c in 0..8 {
                acc += w.data()[r * 8 + c] * h[c];
            }
            assert!((logits[r] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn records_roundtrip_rebuilds_architecture() {
        let m = tiny(6);
        let rebuilt = PretrainedModel::from_records(m.vocab.clone(), m.records(), m.config.init_std).unwrap();
        assert_eq!(rebuilt.config, m.config);
        assert_eq!(rebuilt.encode(&[6, 7]).unwrap(), m.encode(&[6, 7]).unwrap());
        assert_eq!(rebuilt.checkpoint_hash(), m.checkpoint_hash());
    }
}
