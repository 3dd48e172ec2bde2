use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelVariant;
use crate::autodiff::{ArchiveRecord, Graph, ParamId, Tensor, Var};
use crate::error::{input_err, Error, Result};
use crate::neighbor::{AdaptedModel, AdaptedTrace, NeighborConfig, SelectionMode};
use crate::objectives::{loss_implicit_from_trace, loss_taskwords, neireg_losses, neireg_objective, ClassifierHead};
use crate::tasks::{format_input, FormattedInput, Formulation, LabeledExample, Suite, TaskDescriptor};
use crate::transformer::{PretrainedModel, TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Adds the task-token loss against the frozen prototypes.
    pub explicit_taskwords: bool,
    pub neireg_weight_m: f64,
    pub neireg_weight_n: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            explicit_taskwords: false,
            neireg_weight_m: 1.0,
            neireg_weight_n: 1.0,
        }
    }
}

/// A model variant plus classifier, trained one batch at a time.
///
/// When the layers below the adapted band are frozen their output is
/// memoized per input sequence.
#[derive(Debug)]
pub struct Learner {
    pub variant: ModelVariant,
    pub model: AdaptedModel,
    pub head: ClassifierHead,
    pub vocab: Vocabulary,
    pub formulation: Formulation,
    pub objective: ObjectiveConfig,
    descriptors: BTreeMap<usize, TaskDescriptor>,
    prefix: Option<RefCell<HashMap<Vec<TokenId>, Tensor>>>,
}

impl Learner {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        base: &PretrainedModel,
        variant: ModelVariant,
        suite: &Suite,
        formulation: Formulation,
        neighbor: &NeighborConfig,
        objective: ObjectiveConfig,
        head_init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = if variant.uses_neighbors() {
            AdaptedModel::with_neighbors(base, neighbor.clone())?
        } else {
            AdaptedModel::plain(base)
        };
        if variant == ModelVariant::Ft {
            for id in model.base_ids() {
                model.params.set_trainable(id, true);
            }
        }
        let head = ClassifierHead::new(&mut model.params, base.d_model(), &suite.registry(), head_init_std, rng)?;
        let prefix = (variant != ModelVariant::Ft).then(|| RefCell::new(HashMap::new()));
        Ok(Self {
            variant,
            model,
            head,
            vocab: base.vocab.clone(),
            formulation,
            objective,
            descriptors: suite.tasks.iter().map(|t| (t.descriptor.id, t.descriptor.clone())).collect(),
            prefix,
        })
    }

    pub fn input(&self, ex: &LabeledExample) -> Result<FormattedInput> {
        let desc = self
            .descriptors
            .get(&ex.task)
            .ok_or_else(|| input_err(format!("task {} has no descriptor", ex.task)))?;
        format_input(ex, desc, self.formulation, &self.vocab, self.model.config.max_len)
    }

    /// The decoder matrix of this learner's own parameters.
    pub fn prototypes(&self) -> &Tensor {
        self.model.params.value(self.model.layout.decoder)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.model.params.trainable_ids()
    }

    fn entry_states(&self, ids: &[TokenId], start: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.model.encoder();
        let mut h = enc.embed(&mut g, ids)?;
        for l in 0..start {
            h = enc.layer(&mut g, l, h)?;
        }
        Ok(g.value(h).clone())
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ids: &[TokenId],
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<AdaptedTrace> {
        let Some(cache) = &self.prefix else {
            return self.model.forward(g, ids, mode, rng);
        };
        let start = self.model.band_start();
        let cached = cache.borrow().get(ids).cloned();
        let states = match cached {
            Some(t) => t,
            None => {
                let t = self.entry_states(ids, start)?;
                cache.borrow_mut().insert(ids.to_vec(), t.clone());
                t
            }
        };
        let entry = g.constant(states);
        self.model.forward_from(g, ids, start, entry, mode, rng)
    }

    /// Training loss of one example; also returns the prediction
    /// representation.
    pub fn example_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ex: &LabeledExample,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let input = self.input(ex)?;
        let trace = self.forward(g, &input.ids, mode, rng)?;
        let out = loss_implicit_from_trace(g, &self.model.params, &self.head, &input, trace, ex.y, ex.task)?;
        let mut loss = out.loss;
        if self.objective.explicit_taskwords && !ex.task_tokens.is_empty() {
            let tw = loss_taskwords(g, &self.model.params, self.model.layout.decoder, out.rep, &ex.task_tokens)?;
            loss = g.add(loss, tw)?;
        }
        if self.variant == ModelVariant::NeiReg {
            let reg = neireg_losses(g, &out.trace, input.pred_pos, &input.context_positions(), rng)?;
            loss = neireg_objective(g, loss, &reg, self.objective.neireg_weight_m, self.objective.neireg_weight_n)?;
        }
        Ok((loss, out.rep))
    }

    /// Classification loss only, as used for local adaptation.
    pub fn task_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        ex: &LabeledExample,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<Var> {
        let input = self.input(ex)?;
        let trace = self.forward(g, &input.ids, mode, rng)?;
        Ok(loss_implicit_from_trace(g, &self.model.params, &self.head, &input, trace, ex.y, ex.task)?.loss)
    }

    /// Accumulates the mean gradient of `batch` into the parameter store and
    /// returns the mean loss. `full` selects the training objective over the
    /// plain classification loss.
    pub fn batch_gradient<R: Rng + ?Sized>(
        &mut self,
        batch: &[&LabeledExample],
        full: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(input_err("empty batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            let mut g = Graph::new();
            let loss = if full {
                self.example_loss(&mut g, ex, SelectionMode::Train, rng)?.0
            } else {
                self.task_loss(&mut g, ex, SelectionMode::Train, rng)?
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {value} on a task {} example of class {}",
                    ex.task, ex.y
                )));
            }
            total += value;
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, &mut self.model.params);
        }
        self.model.params.scale_grads(1.0 / batch.len() as f64);
        self.fill_missing_grads();
        Ok(total / batch.len() as f64)
    }

    /// Gives every trainable parameter without a gradient a zero one.
    pub fn fill_missing_grads(&mut self) {
        for id in self.model.params.trainable_ids() {
            if self.model.params.get(id).grad.is_none() {
                let n = self.model.params.value(id).numel();
                self.model.params.accumulate_grad(id, &vec![0.0; n]);
            }
        }
    }

    /// Prediction-position representation in evaluation mode.
    pub fn representation(&self, ex: &LabeledExample) -> Result<Vec<f64>> {
        let input = self.input(ex)?;
        let mut g = Graph::new();
        // eval-mode selection draws nothing from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = self.forward(&mut g, &input.ids, SelectionMode::Eval, &mut rng)?;
        Ok(g.value(trace.last()).row(input.pred_pos).to_vec())
    }

    pub fn representations(&self, examples: &[LabeledExample]) -> Result<Vec<Vec<f64>>> {
        examples.iter().map(|ex| self.representation(ex)).collect()
    }

    pub fn predict(&self, ex: &LabeledExample) -> Result<usize> {
        let rep = self.representation(ex)?;
        self.head.predict(&self.model.params, &rep, ex.task)
    }

    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(input_err("accuracy over an empty split"));
        }
        let mut correct = 0usize;
        for ex in examples {
            correct += (self.predict(ex)? == ex.y) as usize;
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    /// Current values of the trainable parameters.
    pub fn trainable_records(&self) -> Vec<ArchiveRecord> {
        self.model
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| ArchiveRecord {
                name: p.name.clone(),
                trainable: true,
                value: p.value.clone(),
            })
            .collect()
    }

    /// Overwrites parameters by name; shapes must match.
    pub fn load_records(&mut self, records: &[ArchiveRecord]) -> Result<()> {
        for r in records {
            let id = self
                .model
                .params
                .id(&r.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", r.name)))?;
            let p = self.model.params.get_mut(id);
            if p.value.shape() != r.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, checkpoint holds {:?}",
                    r.name,
                    p.value.shape(),
                    r.value.shape()
                )));
            }
            p.value = r.value.clone();
        }
        if let Some(c) = &self.prefix {
            c.borrow_mut().clear();
        }
        Ok(())
    }
}
