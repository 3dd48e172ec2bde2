//! Training losses: restricted-softmax classification, task-token
//! prediction against the frozen prototypes, and the neighbor
//! regularizers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{config_err, input_err, Result};
use crate::neighbor::{AdaptedModel, AdaptedTrace, SelectionMode};
use crate::tasks::FormattedInput;
use crate::transformer::TokenId;

pub const HEAD_NAME: &str = "classifier.weight";

/// Class prototypes `W_γ` plus the task → class-id registry.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: ParamId,
    registry: BTreeMap<usize, Vec<usize>>,
    n_classes: usize,
}

impl ClassifierHead {
    /// Registers `W_γ` (`|C| x d`) in `store`. `tasks` maps task ids to their
    /// global class ids; the sets must be disjoint and cover `0..|C|`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d: usize,
        tasks: &[(usize, Vec<usize>)],
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut registry = BTreeMap::new();
        let mut seen = Vec::new();
        for (task, classes) in tasks {
            if classes.is_empty() {
                return Err(config_err(format!("task {task} has no classes")));
            }
            if registry.insert(*task, classes.clone()).is_some() {
                return Err(config_err(format!("task {task} registered twice")));
            }
            seen.extend_from_slice(classes);
        }
        let n_classes = seen.len();
        seen.sort_unstable();
        if seen != (0..n_classes).collect::<Vec<_>>() {
            return Err(config_err("class ids must be disjoint across tasks and cover 0..|C|"));
        }
        let weight = store.add(HEAD_NAME, Tensor::randn(&[n_classes, d], init_std, rng), true)?;
        Ok(Self {
            weight,
            registry,
            n_classes,
        })
    }

    /// Finds an existing head parameter.
    pub fn resolve(store: &ParamStore, tasks: &[(usize, Vec<usize>)]) -> Result<Self> {
        let weight = store
            .id(HEAD_NAME)
            .ok_or_else(|| crate::Error::Checkpoint(format!("missing `{HEAD_NAME}`")))?;
        let n_classes = tasks.iter().map(|t| t.1.len()).sum();
        Ok(Self {
            weight,
            registry: tasks.iter().cloned().collect(),
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn classes(&self, task: usize) -> Result<&[usize]> {
        self.registry
            .get(&task)
            .map(|c| c.as_slice())
            .ok_or_else(|| input_err(format!("task {task} is not registered")))
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.registry.keys().copied()
    }

    /// Redraws the rows of one task.
    pub fn reinit_task<R: Rng + ?Sized>(&self, store: &mut ParamStore, task: usize, std: f64, rng: &mut R) -> Result<()> {
        let classes = self.classes(task)?.to_vec();
        let w = store.get_mut(self.weight);
        let d = w.value.cols();
        let fresh = Tensor::randn(&[classes.len(), d], std, rng);
        for (i, c) in classes.iter().enumerate() {
            w.value.data_mut()[c * d..(c + 1) * d].copy_from_slice(fresh.row(i));
        }
        Ok(())
    }

    /// Highest-scoring class of `task` for representation `rep`.
    pub fn predict(&self, store: &ParamStore, rep: &[f64], task: usize) -> Result<usize> {
        let w = store.value(self.weight);
        let classes = self.classes(task)?;
        let score = |c: usize| w.row(c).iter().zip(rep).map(|(a, b)| a * b).sum::<f64>();
        let mut best = classes[0];
        let mut best_score = score(best);
        for &c in &classes[1..] {
            let s = score(c);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        Ok(best)
    }
}

/// Cross-entropy of class `y` under a softmax restricted to the classes of
/// `task`. `rep` is a `1 x d` row.
pub fn loss_local(g: &mut Graph, store: &ParamStore, head: &ClassifierHead, rep: Var, y: usize, task: usize) -> Result<Var> {
    let classes = head.classes(task)?;
    let target = classes
        .iter()
        .position(|&c| c == y)
        .ok_or_else(|| input_err(format!("class {y} does not belong to task {task}")))?;
    let w = g.param(store, head.weight);
    let rows = g.gather_rows(w, classes)?;
    let logits = g.matmul_bt(rep, rows)?;
    let ce = g.cross_entropy(logits, &[target])?;
    g.sum(ce)
}

/// Sum over `words` of the full-vocabulary cross-entropy of `rep` decoded
/// with the prototypes `prototypes` (`|V| x d`).
pub fn loss_taskwords(g: &mut Graph, store: &ParamStore, prototypes: ParamId, rep: Var, words: &[TokenId]) -> Result<Var> {
    if words.is_empty() {
        return Err(input_err("task-token set is empty"));
    }
    let w = g.param(store, prototypes);
    let logits = g.matmul_bt(rep, w)?;
    let rows = g.gather_rows(logits, &vec![0; words.len()])?;
    let ce = g.cross_entropy(rows, words)?;
    g.sum(ce)
}

/// `loss_local + loss_taskwords`; the second term is dropped when `words`
/// is `None`.
#[allow(clippy::too_many_arguments)]
pub fn loss_combined(
    g: &mut Graph,
    store: &ParamStore,
    head: &ClassifierHead,
    prototypes: ParamId,
    rep: Var,
    y: usize,
    task: usize,
    words: Option<&[TokenId]>,
) -> Result<Var> {
    let local = loss_local(g, store, head, rep, y, task)?;
    match words {
        Some(w) => {
            let tw = loss_taskwords(g, store, prototypes, rep, w)?;
            g.add(local, tw)
        }
        None => Ok(local),
    }
}

/// Result of running an example through the adapted model.
#[derive(Clone, Debug)]
pub struct ImplicitOutput {
    pub loss: Var,
    /// Prediction-position representation, `1 x d`.
    pub rep: Var,
    pub trace: AdaptedTrace,
}

/// Classification loss on the prediction position of the adapted model's
/// final hidden states.
#[allow(clippy::too_many_arguments)]
pub fn loss_implicit<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &AdaptedModel,
    head: &ClassifierHead,
    input: &FormattedInput,
    y: usize,
    task: usize,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<ImplicitOutput> {
    input.check_prediction_token()?;
    let trace = model.forward(g, &input.ids, mode, rng)?;
    loss_implicit_from_trace(g, &model.params, head, input, trace, y, task)
}

/// [`loss_implicit`] over a forward pass that has already been built.
pub fn loss_implicit_from_trace(
    g: &mut Graph,
    store: &ParamStore,
    head: &ClassifierHead,
    input: &FormattedInput,
    trace: AdaptedTrace,
    y: usize,
    task: usize,
) -> Result<ImplicitOutput> {
    input.check_prediction_token()?;
    let rep = g.gather_rows(trace.last(), &[input.pred_pos])?;
    let loss = loss_local(g, store, head, rep, y, task)?;
    Ok(ImplicitOutput { loss, rep, trace })
}

/// Per adapted layer: context regularization `L_m` and neighborhood
/// regularization `L_n`, both means of cosine similarities.
#[derive(Clone, Debug)]
pub struct NeiRegLosses {
    pub layers: Vec<usize>,
    pub l_m: Vec<Var>,
    pub l_n: Vec<Var>,
}

/// Samples one neighbor per context position at every adapted layer and
/// builds `L_m = mean cos(h_pred, sg(m_ij))` and
/// `L_n = mean cos(sg(h_i), m_ij)`.
pub fn neireg_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    trace: &AdaptedTrace,
    pred_pos: usize,
    context: &[usize],
    rng: &mut R,
) -> Result<NeiRegLosses> {
    if context.is_empty() {
        return Err(input_err("no context positions for neighbor regularization"));
    }
    let mut out = NeiRegLosses {
        layers: Vec::new(),
        l_m: Vec::new(),
        l_n: Vec::new(),
    };
    for (l, ns) in &trace.layer_neighbors {
        let h = trace
            .state(l + 1)
            .ok_or_else(|| input_err(format!("trace does not cover layer {l}")))?;
        let n = ns.positions();
        if let Some(&bad) = context.iter().find(|&&i| i >= n) {
            return Err(input_err(format!("context position {bad} outside {n} positions")));
        }
        let rows: Vec<usize> = context.iter().map(|&i| ns.row(i, rng.random_range(0..ns.k))).collect();
        let m = g.gather_rows(ns.reps, &rows)?;

        let pred = g.gather_rows(h, &vec![pred_pos; context.len()])?;
        let m_fixed = g.stop_grad(m);
        let cm = g.cosine(pred, m_fixed)?;
        out.l_m.push(g.mean(cm)?);

        let hs = g.gather_rows(h, context)?;
        let hs = g.stop_grad(hs);
        let cn = g.cosine(hs, m)?;
        out.l_n.push(g.mean(cn)?);
        out.layers.push(*l);
    }
    Ok(out)
}

/// `base - w_m * mean_l L_m - w_n * mean_l L_n`.
pub fn neireg_objective(g: &mut Graph, base: Var, reg: &NeiRegLosses, weight_m: f64, weight_n: f64) -> Result<Var> {
    let mut total = base;
    for (terms, weight) in [(&reg.l_m, weight_m), (&reg.l_n, weight_n)] {
        if terms.is_empty() || weight == 0.0 {
            continue;
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        let scaled = g.scale(acc, weight / terms.len() as f64)?;
        total = g.sub(total, scaled)?;
    }
    Ok(total)
}
