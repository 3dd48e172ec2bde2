use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::learner::Learner;
use super::memory::{agem_project, EpisodicMemory, Projection, ReplayBuffer};
use super::{Framework, MbpaConfig, ModelVariant, TrainConfig};
use crate::autodiff::{archive_hash, ArchiveRecord, Graph, Optimizer, Tensor};
use crate::error::{config_err, Result};
use crate::metrics::{
    average_accuracy, average_forgetting, drift_between, recall_eval_run, AccuracyMatrix, TaskDrift,
};
use crate::objectives::loss_local;
use crate::tasks::{task_order, Formulation, LabeledExample, Suite};
use crate::transformer::PretrainedModel;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Regular optimizer steps, replay steps excluded.
    pub steps: u64,
    pub replays: u64,
    pub replay_skips: u64,
    pub agem_projections: u64,
    pub agem_zero_reference: u64,
    pub mbpa_queries: u64,
    pub buffer_size: usize,
}

/// Outcome of one (seed, framework, model) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub framework: Framework,
    pub model: ModelVariant,
    pub seed: u64,
    pub formulation: Formulation,
    /// Task ids in training order.
    pub task_order: Vec<usize>,
    /// Row `i`: dev accuracy on every task after training the `i`-th one.
    pub accuracy: AccuracyMatrix,
    pub acc: f64,
    /// Absent under joint training.
    pub forget: Option<f64>,
    /// Mean Recall@k over every dev example after the last task.
    pub recall: f64,
    /// Unadapted accuracy on the same queries as the adapted `accuracy`.
    pub mbpa_unadapted: Option<AccuracyMatrix>,
    /// Representation drift of the first task between its own checkpoint
    /// and the final one.
    pub first_task_drift: Option<TaskDrift>,
    pub counters: Counters,
    /// Hash of the frozen base checkpoint.
    pub base_checkpoint: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn run_id(framework: Framework, model: ModelVariant, seed: u64) -> String {
        format!("{framework}-{model}-s{seed}")
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    /// Trainable parameters after each task, keyed by task id in training
    /// order. Joint training leaves a single entry for its last task.
    pub checkpoints: Vec<(usize, Vec<ArchiveRecord>)>,
    pub learner: Learner,
}

/// Short hash of the serialized configuration.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    archive_hash(&bytes)[..12].to_string()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const ORDER_STREAM: u64 = 0;
const HEAD_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const REPLAY_STREAM: u64 = 3;
const MBPA_STREAM: u64 = 4;
const PROBE_STREAM: u64 = 5;

struct Session<'a> {
    suite: &'a Suite,
    cfg: &'a TrainConfig,
    framework: Framework,
    seed: u64,
    learner: Learner,
    opt: Optimizer,
    train_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    counters: Counters,
    buffer: Option<ReplayBuffer>,
    checkpoints: Vec<(usize, Vec<ArchiveRecord>)>,
}

/// Trains `variant` on `suite` under `framework`; `seed` fixes the task
/// order, head initialization and every sampling decision.
pub fn run_experiment(
    suite: &Suite,
    base: &PretrainedModel,
    variant: ModelVariant,
    framework: Framework,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    cfg.validate()?;
    if suite.tasks.is_empty() {
        return Err(config_err("suite has no tasks"));
    }
    let started = Instant::now();
    let order: Vec<usize> = task_order(suite.tasks.len(), &mut stream(seed, ORDER_STREAM))
        .into_iter()
        .map(|k| suite.tasks[k].descriptor.id)
        .collect();
    let learner = Learner::new(
        base,
        variant,
        suite,
        cfg.formulation,
        &cfg.neighbor,
        cfg.objective.clone(),
        cfg.head_init_std,
        &mut stream(seed, HEAD_STREAM),
    )?;
    let mut s = Session {
        suite,
        cfg,
        framework,
        seed,
        learner,
        opt: Optimizer::adam(cfg.learning_rate),
        train_rng: stream(seed, TRAIN_STREAM),
        replay_rng: stream(seed, REPLAY_STREAM),
        counters: Counters::default(),
        buffer: matches!(framework, Framework::Er | Framework::Agem).then(ReplayBuffer::new),
        checkpoints: Vec::new(),
    };
    info!("{}: task order {order:?}", RunRecord::run_id(framework, variant, seed));

    let mut unadapted = None;
    let mut drift = None;
    let matrix = match framework {
        Framework::Mtl => s.joint(&order)?,
        Framework::Mbpa => {
            let (adapted, plain) = s.mbpa(&order)?;
            unadapted = Some(plain);
            adapted
        }
        _ => {
            let (m, d) = s.sequential(&order)?;
            drift = d;
            m
        }
    };

    let acc = average_accuracy(&matrix)?;
    let forget = match framework {
        Framework::Mtl => None,
        Framework::Mbpa if cfg.mbpa.final_row_only => None,
        _ => Some(average_forgetting(&matrix, cfg.forget_normalization)?),
    };
    let dev: Vec<LabeledExample> = order
        .iter()
        .map(|&t| suite.task(t).map(|task| task.dev.clone()))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let (recall, _) = recall_eval_run(&dev, s.learner.prototypes(), cfg.recall_k, |ex| s.learner.representation(ex))?;
    s.counters.buffer_size = s.buffer.as_ref().map_or(0, |b| b.len());

    let record = RunRecord {
        run_id: RunRecord::run_id(framework, variant, seed),
        framework,
        model: variant,
        seed,
        formulation: cfg.formulation,
        task_order: order,
        accuracy: matrix,
        acc,
        forget,
        recall,
        mbpa_unadapted: unadapted,
        first_task_drift: drift,
        counters: s.counters,
        base_checkpoint: base.checkpoint_hash(),
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        record,
        checkpoints: s.checkpoints,
        learner: s.learner,
    })
}

impl<'a> Session<'a> {
    fn items(&self, task: usize) -> Result<Vec<(usize, usize)>> {
        Ok((0..self.suite.task(task)?.train.len()).map(|k| (task, k)).collect())
    }

    fn example(&self, (task, k): (usize, usize)) -> Result<&'a LabeledExample> {
        Ok(&self.suite.task(task)?.train[k])
    }

    fn dev(&self, task: usize) -> Result<&'a [LabeledExample]> {
        Ok(&self.suite.task(task)?.dev)
    }

    fn checkpoint(&mut self, task: usize) {
        self.checkpoints.push((task, self.learner.trainable_records()));
    }

    /// `epochs` passes over `items` in shuffled batches. `previous` lists the
    /// tasks already trained, whose buffered examples form the A-GEM
    /// reference.
    fn train_on(&mut self, items: &[(usize, usize)], previous: &[usize]) -> Result<()> {
        let cfg = self.cfg;
        let interval = cfg.replay_interval();
        let mut idx: Vec<usize> = (0..items.len()).collect();
        for epoch in 0..cfg.epochs {
            idx.shuffle(&mut self.train_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in idx.chunks(cfg.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| self.example(items[i]))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(buf) = &mut self.buffer {
                    for (&i, ex) in chunk.iter().zip(&batch) {
                        buf.insert(items[i].0, items[i].1, ex);
                    }
                }
                epoch_loss += self.gradient(&batch, previous)?;
                batches += 1;
                self.opt.step(&mut self.learner.model.params)?;
                self.counters.steps += 1;
                if self.framework == Framework::Er && interval > 0 && self.counters.steps % interval == 0 {
                    self.replay()?;
                }
            }
            debug!("epoch {epoch}: mean loss {:.4}", epoch_loss / batches.max(1) as f64);
        }
        Ok(())
    }

    fn gradient(&mut self, batch: &[&LabeledExample], previous: &[usize]) -> Result<f64> {
        if self.framework != Framework::Agem || previous.is_empty() {
            return self.learner.batch_gradient(batch, true, &mut self.train_rng);
        }
        let buf = self.buffer.as_ref().expect("A-GEM keeps a buffer");
        let reference: Vec<LabeledExample> = buf
            .sample_where(self.cfg.agem_batch, &mut self.replay_rng, |e| previous.contains(&e.task))
            .into_iter()
            .cloned()
            .collect();
        if reference.is_empty() {
            return self.learner.batch_gradient(batch, true, &mut self.train_rng);
        }
        let refs: Vec<&LabeledExample> = reference.iter().collect();
        self.learner.batch_gradient(&refs, true, &mut self.train_rng)?;
        let g_ref = self.learner.model.params.flat_grad();
        self.learner.model.params.zero_grads();
        let loss = self.learner.batch_gradient(batch, true, &mut self.train_rng)?;
        let mut g = self.learner.model.params.flat_grad();
        match agem_project(&mut g, &g_ref) {
            Projection::Projected => {
                self.counters.agem_projections += 1;
                self.learner.model.params.set_flat_grad(&g)?;
            }
            Projection::ZeroReference => {
                self.counters.agem_zero_reference += 1;
                debug!("A-GEM reference gradient is zero; applying the raw gradient");
            }
            Projection::Kept => {}
        }
        Ok(loss)
    }

    fn replay(&mut self) -> Result<()> {
        let buf = self.buffer.as_ref().expect("ER keeps a buffer");
        let drawn: Vec<LabeledExample> = buf
            .sample(self.cfg.replay_batch, &mut self.replay_rng)
            .into_iter()
            .cloned()
            .collect();
        if drawn.is_empty() {
            self.counters.replay_skips += 1;
            warn!("replay at step {} skipped: buffer is empty", self.counters.steps);
            return Ok(());
        }
        let refs: Vec<&LabeledExample> = drawn.iter().collect();
        self.learner.batch_gradient(&refs, true, &mut self.train_rng)?;
        self.opt.step(&mut self.learner.model.params)?;
        self.counters.replays += 1;
        Ok(())
    }

    fn eval_row(&self, matrix: &mut AccuracyMatrix, row: usize, order: &[usize]) -> Result<()> {
        for (j, &t) in order.iter().enumerate() {
            matrix.set(row, j, self.learner.accuracy(self.dev(t)?)?);
        }
        Ok(())
    }

    /// Vanilla, ER, A-GEM and probing: tasks in order, full evaluation
    /// after each.
    fn sequential(&mut self, order: &[usize]) -> Result<(AccuracyMatrix, Option<TaskDrift>)> {
        let mut matrix = AccuracyMatrix::new(order.len());
        let mut first_reps = None;
        for (i, &task) in order.iter().enumerate() {
            let items = self.items(task)?;
            self.train_on(&items, &order[..i])?;
            self.checkpoint(task);
            self.eval_row(&mut matrix, i, order)?;
            if i == 0 {
                first_reps = Some(self.learner.representations(self.dev(task)?)?);
            }
            info!("after task {task}: {:?}", matrix.rows[i]);
        }
        let before = first_reps.expect("at least one task");
        let after = self.learner.representations(self.dev(order[0])?)?;
        let drift = drift_between(&[(order[0], before, after)], self.cfg.drift_distance)?
            .tasks
            .pop();
        if self.framework == Framework::Probing {
            let probed = self.probe(order)?;
            let last = order.len() - 1;
            for (j, acc) in probed.into_iter().enumerate() {
                matrix.set(last, j, acc);
            }
        }
        Ok((matrix, drift))
    }

    /// Retrains each task's classifier rows on frozen representations.
    fn probe(&mut self, order: &[usize]) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let mut rng = stream(self.seed, PROBE_STREAM);
        let flags = self.learner.model.params.trainable_ids();
        self.learner.model.params.freeze_all();
        let head = self.learner.head.clone();
        self.learner.model.params.set_trainable(head.weight, true);
        let mut out = Vec::with_capacity(order.len());
        for &task in order {
            head.reinit_task(&mut self.learner.model.params, task, cfg.head_init_std, &mut rng)?;
            let train = &self.suite.task(task)?.train;
            let reps = self.learner.representations(train)?;
            let mut opt = Optimizer::adam(cfg.probe_lr);
            let mut idx: Vec<usize> = (0..train.len()).collect();
            for _ in 0..cfg.probe_epochs {
                idx.shuffle(&mut rng);
                for chunk in idx.chunks(cfg.batch_size) {
                    for &k in chunk {
                        let store = &mut self.learner.model.params;
                        let mut g = Graph::new();
                        let rep = g.constant(Tensor::matrix(1, reps[k].len(), reps[k].clone())?);
                        let loss = loss_local(&mut g, store, &head, rep, train[k].y, task)?;
                        let grads = g.backward(loss)?;
                        g.accumulate_param_grads(&grads, store);
                    }
                    self.learner.model.params.scale_grads(1.0 / chunk.len() as f64);
                    opt.step(&mut self.learner.model.params)?;
                }
            }
            out.push(self.learner.accuracy(self.dev(task)?)?);
        }
        self.learner.model.params.freeze_all();
        for id in flags {
            self.learner.model.params.set_trainable(id, true);
        }
        Ok(out)
    }

    /// Joint training on the union of all tasks; only the final row exists.
    fn joint(&mut self, order: &[usize]) -> Result<AccuracyMatrix> {
        let mut items = Vec::new();
        for &task in order {
            items.extend(self.items(task)?);
        }
        self.train_on(&items, &[])?;
        self.checkpoint(*order.last().expect("nonempty order"));
        let mut matrix = AccuracyMatrix::new(order.len());
        self.eval_row(&mut matrix, order.len() - 1, order)?;
        Ok(matrix)
    }

    /// Dev queries per task: up to `eval_per_class` examples of each class.
    fn mbpa_queries(&self, order: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<LabeledExample>>> {
        let per_class = self.cfg.mbpa.eval_per_class;
        let mut out = Vec::with_capacity(order.len());
        for &t in order {
            let task = self.suite.task(t)?;
            if per_class == 0 {
                out.push(task.dev.clone());
                continue;
            }
            let mut chosen = Vec::new();
            for &c in &task.descriptor.classes {
                let mut of_class: Vec<usize> = (0..task.dev.len()).filter(|&k| task.dev[k].y == c).collect();
                of_class.shuffle(rng);
                of_class.truncate(per_class);
                chosen.extend(of_class);
            }
            chosen.sort_unstable();
            out.push(chosen.into_iter().map(|k| task.dev[k].clone()).collect());
        }
        Ok(out)
    }

    /// Vanilla training, memory keyed by post-task representations, and
    /// locally adapted evaluation of every task trained so far.
    fn mbpa(&mut self, order: &[usize]) -> Result<(AccuracyMatrix, AccuracyMatrix)> {
        let mut rng = stream(self.seed, MBPA_STREAM);
        let queries = self.mbpa_queries(order, &mut rng)?;
        let mut memory = EpisodicMemory::new();
        let mut adapted = AccuracyMatrix::new(order.len());
        let mut plain = AccuracyMatrix::new(order.len());
        for (i, &task) in order.iter().enumerate() {
            let items = self.items(task)?;
            self.train_on(&items, &[])?;
            self.checkpoint(task);
            for ex in &self.suite.task(task)?.train {
                memory.insert(self.learner.representation(ex)?, ex.clone());
            }
            if self.cfg.mbpa.final_row_only && i + 1 < order.len() {
                continue;
            }
            for (j, qs) in queries.iter().enumerate().take(i + 1) {
                let (mut hit, mut hit_plain) = (0usize, 0usize);
                for q in qs {
                    let (a, p) = mbpa_infer(&mut self.learner, q, &memory, &self.cfg.mbpa, self.cfg.learning_rate, &mut rng)?;
                    self.counters.mbpa_queries += 1;
                    hit += (a == q.y) as usize;
                    hit_plain += (p == q.y) as usize;
                }
                adapted.set(i, j, hit as f64 / qs.len() as f64);
                plain.set(i, j, hit_plain as f64 / qs.len() as f64);
            }
            info!("after task {task}: adapted {:?}", adapted.rows[i]);
        }
        Ok((adapted, plain))
    }
}

/// Prediction for `q` after `local_steps` gradient steps on its nearest
/// memory entries, plus the unadapted prediction. Trainable parameters are
/// restored before returning.
pub fn mbpa_infer<R: Rng + ?Sized>(
    learner: &mut Learner,
    q: &LabeledExample,
    memory: &EpisodicMemory,
    cfg: &MbpaConfig,
    task_lr: f64,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let key = learner.representation(q)?;
    let plain = learner.head.predict(&learner.model.params, &key, q.task)?;
    if cfg.local_steps == 0 || memory.is_empty() {
        return Ok((plain, plain));
    }
    let near: Vec<&LabeledExample> = memory.nearest(&key, cfg.retrieve).into_iter().map(|i| memory.example(i)).collect();
    let snapshot = learner.model.params.snapshot_trainable();
    let mut local = Optimizer::plain(cfg.local_lr.unwrap_or(task_lr));
    let mut adapt = || -> Result<usize> {
        for _ in 0..cfg.local_steps {
            learner.batch_gradient(&near, false, rng)?;
            let store = &mut learner.model.params;
            for (id, start) in &snapshot {
                let delta: Vec<f64> = store
                    .value(*id)
                    .data()
                    .iter()
                    .zip(start)
                    .map(|(v, v0)| 2.0 * cfg.drift_penalty * (v - v0))
                    .collect();
                store.accumulate_grad(*id, &delta);
            }
            local.step(store)?;
        }
        learner.predict(q)
    };
    let adapted = adapt();
    learner.model.params.restore(&snapshot);
    learner.model.params.zero_grads();
    Ok((adapted?, plain))
}
