use log::{debug, info};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, PretrainedModel};
use super::vocab::{TokenId, Vocabulary};
use crate::autodiff::{Graph, Optimizer};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            mask_prob: 0.15,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub heldout_positions: usize,
    pub heldout_top1: f64,
    pub heldout_top5: f64,
    /// `5 / |V|`
    pub chance_top5: f64,
}

/// One masked training instance: corrupted input plus `(position, original)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// BERT-style corruption: each maskable position is selected with
/// `mask_prob` (at least one), then replaced by `[MASK]` 80%, a random token
/// 10%, or kept 10% of the time.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &[TokenId],
    vocab: &Vocabulary,
    mask_prob: f64,
    replacements: &[TokenId],
    rng: &mut R,
) -> Option<MaskedSequence> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| !vocab.is_structural(seq[i])).collect();
    if candidates.is_empty() {
        return None;
    }
    let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.random::<f64>() < mask_prob).collect();
    if chosen.is_empty() {
        chosen.push(*candidates.choose(rng).expect("nonempty"));
    }
    let mut input = seq.to_vec();
    let mut targets = Vec::with_capacity(chosen.len());
    for pos in chosen {
        targets.push((pos, seq[pos]));
        let r: f64 = rng.random();
        if r < 0.8 {
            input[pos] = vocab.mask;
        } else if r < 0.9 {
            input[pos] = *replacements.choose(rng).expect("nonempty replacement pool");
        }
    }
    Some(MaskedSequence { input, targets })
}

fn masked_loss(model: &PretrainedModel, g: &mut Graph, m: &MaskedSequence) -> Result<crate::autodiff::Var> {
    let enc = model.encoder();
    let states = enc.forward(g, &m.input)?;
    let last = *states.last().unwrap();
    let positions: Vec<usize> = m.targets.iter().map(|t| t.0).collect();
    let rows = g.gather_rows(last, &positions)?;
    let logits = enc.decode(g, rows)?;
    let targets: Vec<usize> = m.targets.iter().map(|t| t.1).collect();
    let ce = g.cross_entropy(logits, &targets)?;
    g.mean(ce)
}

/// Top-1 and top-5 accuracy of decoded predictions at masked positions.
pub fn masked_accuracy(model: &PretrainedModel, samples: &[MaskedSequence]) -> Result<(f64, f64, usize)> {
    let (mut top1, mut top5, mut total) = (0usize, 0usize, 0usize);
    for m in samples {
        let h = model.encode(&m.input)?;
        for &(pos, target) in &m.targets {
            let logits = model.decode_logits(h.row(pos), true)?;
            let target_logit = logits[target];
            // rank = number of tokens scoring strictly higher
            let rank = logits.iter().filter(|&&l| l > target_logit).count();
            top1 += (rank == 0) as usize;
            top5 += (rank < 5) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Ok((0.0, 0.0, 0));
    }
    Ok((top1 as f64 / total as f64, top5 as f64 / total as f64, total))
}

/// Trains a fresh model by masked-token prediction over `corpus` and returns
/// it with every parameter frozen.
pub fn mlm_pretrain(
    corpus: &[Vec<TokenId>],
    vocab: Vocabulary,
    model_config: ModelConfig,
    config: &MlmConfig,
) -> Result<(PretrainedModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(config_err("pre-training corpus is empty"));
    }
    if !(config.mask_prob > 0.0 && config.mask_prob < 1.0) {
        return Err(config_err(format!("mask probability must lie in (0,1), got {}", config.mask_prob)));
    }
    if config.batch_size == 0 {
        return Err(config_err("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = PretrainedModel::init(model_config, vocab, &mut rng)?;
    let replacements: Vec<TokenId> = (0..model.vocab.len()).filter(|&t| !model.vocab.is_structural(t)).collect();

    let n_heldout = if corpus.len() >= 10 {
        ((corpus.len() as f64 * config.heldout_fraction).ceil() as usize).clamp(1, corpus.len() - 1)
    } else {
        0
    };
    let (train, heldout) = if n_heldout == 0 {
        (corpus, corpus)
    } else {
        corpus.split_at(corpus.len() - n_heldout)
    };

    let mut opt = Optimizer::adam(config.learning_rate);
    let mut last_loss = f64::NAN;
    for step in 0..config.steps {
        let mut batch_loss = 0.0;
        let mut used = 0usize;
        for _ in 0..config.batch_size {
            let seq = train.choose(&mut rng).expect("nonempty");
            let Some(m) = mask_sequence(seq, &model.vocab, config.mask_prob, &replacements, &mut rng) else {
                continue;
            };
            let mut g = Graph::new();
            let loss = masked_loss(&model, &mut g, &m)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("MLM loss {value} at step {step}")));
            }
            batch_loss += value;
            used += 1;
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, &mut model.params);
        }
        if used == 0 {
            return Err(config_err("no maskable tokens in corpus"));
        }
        model.params.scale_grads(1.0 / used as f64);
        opt.step(&mut model.params)?;
        last_loss = batch_loss / used as f64;
        if step % 250 == 0 {
            debug!("mlm step {step}: loss {last_loss:.4}");
        }
    }
    model.freeze();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let samples: Vec<MaskedSequence> = heldout
        .iter()
        .filter_map(|s| mask_sequence(s, &model.vocab, config.mask_prob, &replacements, &mut eval_rng))
        .map(|mut m| {
            // evaluate on true [MASK] corruption only
            for &(pos, _) in &m.targets {
                m.input[pos] = model.vocab.mask;
            }
            m
        })
        .collect();
    let (top1, top5, positions) = masked_accuracy(&model, &samples)?;
    let report = PretrainReport {
        final_loss: last_loss,
        heldout_positions: positions,
        heldout_top1: top1,
        heldout_top5: top5,
        chance_top5: 5.0 / model.vocab.len() as f64,
    };
    info!(
        "pre-training done: loss {:.4}, held-out top-1 {:.3}, top-5 {:.3} (chance {:.3})",
        report.final_loss, report.heldout_top1, report.heldout_top5, report.chance_top5
    );
    Ok((model, report))
}
