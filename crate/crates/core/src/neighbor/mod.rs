//! Neighbor attention over global token prototypes.
//!
//! Each hidden state entering the adapted band picks `k` neighbors among the
//! `K` token embeddings most similar to it. Inside every adapted layer a
//! trainable attention path over those neighbors is mixed into the frozen
//! self-attention output, and the neighbors themselves are refined by a
//! second trainable attention whose view of the hidden states is cut off
//! from the gradient.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{config_err, input_err, Result};
use crate::transformer::{Encoder, ModelConfig, ModelLayout, PretrainedModel, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborConfig {
    /// Neighbors kept per position.
    pub k: usize,
    /// Size of the candidate pool the neighbors are drawn from.
    pub top_k: usize,
    /// Weight of the neighbor path in the mixed attention output.
    pub lambda: f64,
    /// Adapted layer indices (0-based, contiguous). Empty means the default
    /// band: from the middle layer through the penultimate one.
    pub layers: Vec<usize>,
    /// Also subtract the position embedding of `h` when moving a neighbor
    /// embedding into hidden space.
    pub subtract_position: bool,
    /// Refine the neighbors before the neighbor path reads them. When false
    /// the neighbor path reads the layer's incoming neighbors and the refined
    /// set only feeds the next layer.
    pub update_before_attend: bool,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self {
            k: 5,
            top_k: 100,
            lambda: 0.1,
            layers: Vec::new(),
            subtract_position: false,
            update_before_attend: true,
        }
    }
}

/// `[n/2, n-2]`; for 12 layers this is the 7th through 11th layer.
pub fn default_band(n_layers: usize) -> Vec<usize> {
    if n_layers < 2 {
        return Vec::new();
    }
    (n_layers / 2..=n_layers - 2).collect()
}

impl NeighborConfig {
    pub fn resolved_layers(&self, n_layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            default_band(n_layers)
        } else {
            self.layers.clone()
        }
    }

    pub fn validate(&self, n_layers: usize, vocab_size: usize) -> Result<Vec<usize>> {
        if self.k == 0 || self.k > self.top_k {
            return Err(config_err(format!("need 1 <= k <= K, got k={} K={}", self.k, self.top_k)));
        }
        if self.top_k > vocab_size {
            return Err(config_err(format!("K={} exceeds vocabulary size {vocab_size}", self.top_k)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(config_err(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        let layers = self.resolved_layers(n_layers);
        validate_band(&layers, n_layers)?;
        Ok(layers)
    }
}

pub fn validate_band(layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(config_err(format!("adapted layers {layers:?} are not contiguous")));
    }
    if layers.iter().any(|&l| l + 1 >= n_layers) {
        return Err(config_err(format!(
            "adapted layers {layers:?} must exclude the final layer {}",
            n_layers - 1
        )));
    }
    if layers.len() * 2 > n_layers {
        return Err(config_err(format!(
            "{} adapted layers exceed half of {n_layers} layers",
            layers.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMode {
    /// `k` drawn uniformly without replacement from the top `K`.
    Train,
    /// The `k` most similar.
    Eval,
}

/// Neighbors of every position; row `i*k + j` of `reps` is `m_ij`.
#[derive(Clone, Debug)]
pub struct NeighborSet {
    pub source_ids: Vec<Vec<TokenId>>,
    pub reps: Var,
    pub k: usize,
}

impl NeighborSet {
    pub fn positions(&self) -> usize {
        self.source_ids.len()
    }

    pub fn row(&self, i: usize, j: usize) -> usize {
        i * self.k + j
    }
}

/// Trainable projections of one adapted layer, one matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub layer: usize,
    pub k_theta: Vec<ParamId>,
    pub v_theta: Vec<ParamId>,
    pub k_b: Vec<ParamId>,
    pub v_b: Vec<ParamId>,
}

impl AdapterLayer {
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.k_theta.iter().chain(&self.v_theta).chain(&self.k_b).chain(&self.v_b).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborAdapter {
    pub config: NeighborConfig,
    pub layers: Vec<AdapterLayer>,
}

fn adapter_name(l: usize, h: usize, kind: &str) -> String {
    format!("layer{l}.neigh.head{h}.{kind}")
}

impl NeighborAdapter {
    /// Registers trainable key/value projections for every adapted layer,
    /// initialised as copies of the host layer's frozen key/value.
    pub fn attach(store: &mut ParamStore, model: &ModelConfig, layout: &ModelLayout, config: NeighborConfig) -> Result<Self> {
        let vocab = store.value(layout.tok_emb).rows();
        let band = config.validate(model.n_layers, vocab)?;
        let mut layers = Vec::with_capacity(band.len());
        for &l in &band {
            let host = &layout.layers[l];
            let mut copy = |src: &[ParamId], kind: &str| -> Result<Vec<ParamId>> {
                src.iter()
                    .enumerate()
                    .map(|(h, &id)| {
                        let value = store.value(id).clone();
                        store.add(adapter_name(l, h, kind), value, true)
                    })
                    .collect()
            };
            let k_theta = copy(&host.w_k, "K_theta")?;
            let v_theta = copy(&host.w_v, "V_theta")?;
            let k_b = copy(&host.w_k, "K_b")?;
            let v_b = copy(&host.w_v, "V_b")?;
            layers.push(AdapterLayer {
                layer: l,
                k_theta,
                v_theta,
                k_b,
                v_b,
            });
        }
        Ok(Self { config, layers })
    }

    /// Finds previously registered adapter parameters by name.
    pub fn resolve(store: &ParamStore, model: &ModelConfig, config: NeighborConfig) -> Result<Self> {
        let vocab = store
            .iter()
            .find(|(_, p)| p.name == "embeddings.token")
            .map(|(_, p)| p.value.rows())
            .unwrap_or(0);
        let band = config.validate(model.n_layers, vocab)?;
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| crate::Error::Checkpoint(format!("missing adapter parameter `{name}`")))
        };
        let mut layers = Vec::new();
        for &l in &band {
            let heads = |kind: &str| -> Result<Vec<ParamId>> {
                (0..model.n_heads).map(|h| get(adapter_name(l, h, kind))).collect()
            };
            layers.push(AdapterLayer {
                layer: l,
                k_theta: heads("K_theta")?,
                v_theta: heads("V_theta")?,
                k_b: heads("K_b")?,
                v_b: heads("V_b")?,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    fn for_layer(&self, l: usize) -> Option<&AdapterLayer> {
        self.layers.iter().find(|a| a.layer == l)
    }
}

/// The `top` vocabulary ids with the largest `e_w · h`, in descending
/// order, ties broken by id.
pub fn top_by_similarity(embeddings: &Tensor, h: &[f64], top: usize) -> Vec<TokenId> {
    let sims: Vec<f64> = (0..embeddings.rows())
        .map(|w| embeddings.row(w).iter().zip(h).map(|(a, b)| a * b).sum())
        .collect();
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    let mut order: Vec<TokenId> = (0..sims.len()).collect();
    let top = top.min(order.len());
    if top == 0 {
        return Vec::new();
    }
    if top < order.len() {
        order.select_nth_unstable_by(top - 1, cmp);
        order.truncate(top);
    }
    order.sort_by(cmp);
    order
}

/// Picks `k` neighbors per position among the `K` most similar token
/// embeddings and maps them into hidden space:
/// `m_ij = LN_e(E[w_ij] + P[i] - E[token_i] + h_i)`.
pub fn select_neighbors<R: Rng + ?Sized>(
    enc: &Encoder<'_>,
    g: &mut Graph,
    h: Var,
    token_ids: &[TokenId],
    config: &NeighborConfig,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<NeighborSet> {
    let emb = enc.store.value(enc.layout.tok_emb);
    let (k, top) = (config.k, config.top_k);
    if k == 0 || k > top || top > emb.rows() {
        return Err(config_err(format!(
            "need 1 <= k <= K <= |V|, got k={k} K={top} |V|={}",
            emb.rows()
        )));
    }
    let n = token_ids.len();
    if g.value(h).rows() != n {
        return Err(input_err(format!(
            "{} hidden states for {n} tokens",
            g.value(h).rows()
        )));
    }
    let mut source_ids = Vec::with_capacity(n);
    for i in 0..n {
        let ranked = top_by_similarity(emb, g.value(h).row(i), top);
        let chosen: Vec<TokenId> = match mode {
            SelectionMode::Eval => ranked[..k].to_vec(),
            SelectionMode::Train => sample(rng, top, k).into_iter().map(|r| ranked[r]).collect(),
        };
        source_ids.push(chosen);
    }
    let flat: Vec<TokenId> = source_ids.iter().flatten().copied().collect();
    let owner: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let own_tokens: Vec<TokenId> = owner.iter().map(|&i| token_ids[i]).collect();

    let e = g.param(enc.store, enc.layout.tok_emb);
    let nb = g.gather_rows(e, &flat)?;
    let tok = g.gather_rows(e, &own_tokens)?;
    let hs = g.gather_rows(h, &owner)?;
    let mut x = g.sub(nb, tok)?;
    if !config.subtract_position {
        let p = g.param(enc.store, enc.layout.pos_emb);
        let pos = g.gather_rows(p, &owner)?;
        x = g.add(x, pos)?;
    }
    let x = g.add(x, hs)?;
    let reps = enc.embedding_norm(g, x)?;
    Ok(NeighborSet { source_ids, reps, k })
}

/// Additive mask letting query group `i` (of `per_query` rows) see only the
/// `k` neighbor rows of position `i` and the row of `h_i` itself.
fn group_mask(n: usize, k: usize, per_query: usize) -> Tensor {
    let cols = n * k + n;
    let mut data = vec![f64::NEG_INFINITY; n * per_query * cols];
    for i in 0..n {
        for q in 0..per_query {
            let row = (i * per_query + q) * cols;
            data[row + i * k..row + i * k + k].fill(0.0);
            data[row + n * k + i] = 0.0;
        }
    }
    Tensor::new(vec![n * per_query, cols], data).expect("mask shape")
}

/// Intermediate values of one neighbor-attention layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub hidden: Var,
    pub neighbors: NeighborSet,
    /// Frozen self-attention output `h'` before mixing.
    pub self_path: Var,
    /// Neighbor-attention output `Δh'` before mixing.
    pub neighbor_path: Var,
    /// `(1-λ) h' + λ Δh'`
    pub mixed: Var,
}

/// Neighbor refinement: `m_ij <- LN(f(MHA(Q(m_ij), K_b(M_i || sg(h_i)), V_b(..))) + m_ij)`.
fn update_neighbors(
    enc: &Encoder<'_>,
    g: &mut Graph,
    adapter: &AdapterLayer,
    h: Var,
    neighbors: &NeighborSet,
    stop_grad: bool,
) -> Result<NeighborSet> {
    let (n, k) = (neighbors.positions(), neighbors.k);
    let l = adapter.layer;
    let h_view = if stop_grad { g.stop_grad(h) } else { h };
    let keys = g.concat_rows(&[neighbors.reps, h_view])?;
    let mask = g.constant(group_mask(n, k, k));
    let upd = enc.mha(g, l, neighbors.reps, keys, Some((&adapter.k_b, &adapter.v_b)), Some(mask))?;
    let reps = enc.attn_norm(g, l, upd.output, neighbors.reps)?;
    Ok(NeighborSet {
        source_ids: neighbors.source_ids.clone(),
        reps,
        k,
    })
}

pub(crate) fn neighbor_attention_layer_impl(
    enc: &Encoder<'_>,
    g: &mut Graph,
    adapter: &AdapterLayer,
    config: &NeighborConfig,
    h: Var,
    neighbors: &NeighborSet,
    stop_grad: bool,
) -> Result<LayerOutput> {
    let n = g.value(h).rows();
    if neighbors.positions() != n {
        return Err(input_err(format!(
            "neighbor set covers {} positions, hidden states have {n}",
            neighbors.positions()
        )));
    }
    let l = adapter.layer;
    let lambda = config.lambda;

    let refined = update_neighbors(enc, g, adapter, h, neighbors, stop_grad)?;
    let attended = if config.update_before_attend { &refined } else { neighbors };

    let self_path = enc.mha(g, l, h, h, None, None)?.output;
    let keys = g.concat_rows(&[attended.reps, h])?;
    let mask = g.constant(group_mask(n, attended.k, 1));
    let neighbor_path = enc
        .mha(g, l, h, keys, Some((&adapter.k_theta, &adapter.v_theta)), Some(mask))?
        .output;

    let a = g.scale(self_path, 1.0 - lambda)?;
    let b = g.scale(neighbor_path, lambda)?;
    let mixed = g.add(a, b)?;
    let h1 = enc.attn_norm(g, l, mixed, h)?;
    let hidden = enc.ffn_block(g, l, h1)?;
    Ok(LayerOutput {
        hidden,
        neighbors: refined,
        self_path,
        neighbor_path,
        mixed,
    })
}

/// One adapted transformer layer over hidden states `h` and their neighbors.
pub fn neighbor_attention_layer(
    enc: &Encoder<'_>,
    g: &mut Graph,
    adapter: &AdapterLayer,
    config: &NeighborConfig,
    h: Var,
    neighbors: &NeighborSet,
) -> Result<LayerOutput> {
    neighbor_attention_layer_impl(enc, g, adapter, config, h, neighbors, true)
}

/// Everything a forward pass through the adapted stack produces.
#[derive(Clone, Debug)]
pub struct AdaptedTrace {
    /// Index of the first entry of `states` (0 is the embedding output).
    pub offset: usize,
    /// Hidden states from `offset` on; state `i > 0` is the output of layer `i-1`.
    pub states: Vec<Var>,
    /// Neighbors as selected at the band entry.
    pub initial_neighbors: Option<NeighborSet>,
    /// `(layer, refined neighbors)` for every adapted layer.
    pub layer_neighbors: Vec<(usize, NeighborSet)>,
}

impl AdaptedTrace {
    pub fn last(&self) -> Var {
        *self.states.last().expect("at least the entry state")
    }

    pub fn state(&self, i: usize) -> Option<Var> {
        i.checked_sub(self.offset).and_then(|k| self.states.get(k)).copied()
    }
}

/// A pre-trained model copy whose base parameters are frozen, optionally
/// extended with neighbor attention. Extra parameters (a classifier) may be
/// appended to `params` by the owner.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore,
    pub adapter: Option<NeighborAdapter>,
}

impl AdaptedModel {
    /// Frozen copy of `base` without neighbor attention.
    pub fn plain(base: &PretrainedModel) -> Self {
        let mut params = base.params.clone();
        params.freeze_all();
        Self {
            config: base.config.clone(),
            layout: base.layout.clone(),
            params,
            adapter: None,
        }
    }

    pub fn with_neighbors(base: &PretrainedModel, config: NeighborConfig) -> Result<Self> {
        let mut m = Self::plain(base);
        let adapter = NeighborAdapter::attach(&mut m.params, &m.config, &m.layout, config)?;
        m.adapter = Some(adapter);
        Ok(m)
    }

    pub fn encoder(&self) -> Encoder<'_> {
        Encoder {
            config: &self.config,
            layout: &self.layout,
            store: &self.params,
        }
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        self.layout.all_ids()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapter.as_ref().map(|a| a.param_ids()).unwrap_or_default()
    }

    /// First adapted layer, or the layer count when nothing is adapted.
    pub fn band_start(&self) -> usize {
        self.adapter
            .as_ref()
            .and_then(|a| a.layers.first())
            .map(|l| l.layer)
            .unwrap_or(self.config.n_layers)
    }

    /// Frozen layers below the band, neighbor selection at its entry, adapted
    /// layers inside it, frozen layers above.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ids: &[TokenId],
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<AdaptedTrace> {
        let h = self.encoder().embed(g, ids)?;
        self.forward_from(g, ids, 0, h, mode, rng)
    }

    /// Continues a forward pass from `entry`, the hidden states entering
    /// layer `start`.
    pub fn forward_from<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ids: &[TokenId],
        start: usize,
        entry: Var,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<AdaptedTrace> {
        let enc = self.encoder();
        enc.check_ids(ids)?;
        if start > self.band_start() {
            return Err(input_err(format!(
                "cannot start at layer {start} past the adapted band at {}",
                self.band_start()
            )));
        }
        let mut h = entry;
        let mut trace = AdaptedTrace {
            offset: start,
            states: vec![h],
            initial_neighbors: None,
            layer_neighbors: Vec::new(),
        };
        let mut neighbors: Option<NeighborSet> = None;
        for l in start..self.config.n_layers {
            let adapted = self.adapter.as_ref().and_then(|a| a.for_layer(l).map(|layer| (a, layer)));
            match adapted {
                Some((adapter, layer)) => {
                    if l + 1 == self.config.n_layers {
                        return Err(config_err("adapted band includes the final layer"));
                    }
                    let current = match neighbors.take() {
                        Some(ns) => ns,
                        None => {
                            let ns = select_neighbors(&enc, g, h, ids, &adapter.config, mode, rng)?;
                            trace.initial_neighbors = Some(ns.clone());
                            ns
                        }
                    };
                    let out = neighbor_attention_layer(&enc, g, layer, &adapter.config, h, &current)?;
                    h = out.hidden;
                    trace.layer_neighbors.push((l, out.neighbors.clone()));
                    neighbors = Some(out.neighbors);
                }
                None => h = enc.layer(g, l, h)?,
            }
            trace.states.push(h);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests;
