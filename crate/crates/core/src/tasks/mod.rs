//! Task descriptors, input templates and the synthetic task generator.

mod format;

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use format::{format_input, FormattedInput, Formulation};

use crate::error::{config_err, Error, Result};
use crate::transformer::{TokenId, Vocabulary};

const N_SPECIALS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: usize,
    /// One label token per class, aligned with `classes`.
    pub label_tokens: Vec<TokenId>,
    /// Global class ids.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub s1: Vec<TokenId>,
    pub s2: Vec<TokenId>,
    /// Global class id.
    pub y: usize,
    pub task: usize,
    /// Ground-truth task tokens `w(x)`, sorted.
    pub task_tokens: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub descriptor: TaskDescriptor,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub tasks: Vec<Task>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub signal_per_class: usize,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    /// Sentence length before splitting into two halves.
    pub length: usize,
    pub signal_min: usize,
    pub signal_max: usize,
    pub vocab_size: usize,
    pub corpus_size: usize,
    pub corpus_min_len: usize,
    pub corpus_max_len: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            classes_per_task: 2,
            signal_per_class: 8,
            train_per_class: 200,
            dev_per_class: 50,
            length: 16,
            signal_min: 2,
            signal_max: 4,
            vocab_size: 200,
            corpus_size: 4000,
            corpus_min_len: 8,
            corpus_max_len: 16,
        }
    }
}

impl SuiteConfig {
    pub fn n_classes(&self) -> usize {
        self.n_tasks * self.classes_per_task
    }

    fn first_signal(&self) -> usize {
        N_SPECIALS + self.n_classes()
    }

    fn first_filler(&self) -> usize {
        self.first_signal() + self.n_classes() * self.signal_per_class
    }

    pub fn n_fillers(&self) -> usize {
        self.vocab_size.saturating_sub(self.first_filler())
    }

    pub fn label_token(&self, class: usize) -> TokenId {
        N_SPECIALS + class
    }

    pub fn signal_tokens(&self, class: usize) -> Vec<TokenId> {
        let start = self.first_signal() + class * self.signal_per_class;
        (start..start + self.signal_per_class).collect()
    }

    pub fn fillers(&self) -> Vec<TokenId> {
        (self.first_filler()..self.vocab_size).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.classes_per_task == 0 || self.signal_per_class == 0 {
            return Err(config_err("suite needs at least one task, class and signal token"));
        }
        if self.length == 0 || self.train_per_class == 0 || self.dev_per_class == 0 {
            return Err(config_err("sentence length and split sizes must be positive"));
        }
        if self.signal_min == 0 || self.signal_min > self.signal_max || self.signal_max > self.length {
            return Err(config_err(format!(
                "signal range [{}, {}] must lie within sentence length {}",
                self.signal_min, self.signal_max, self.length
            )));
        }
        if self.n_fillers() == 0 && self.signal_min < self.length {
            return Err(config_err(format!(
                "vocabulary of {} leaves no filler tokens after {} specials, labels and signals",
                self.vocab_size,
                self.first_filler()
            )));
        }
        if self.corpus_min_len == 0 || self.corpus_min_len > self.corpus_max_len {
            return Err(config_err("corpus length range is empty"));
        }
        Ok(())
    }

    /// Specials, then `label{c}`, then `sig{c}_{i}`, then `w{i}` fillers.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut extra: Vec<String> = (0..self.n_classes()).map(|c| format!("label{c}")).collect();
        for c in 0..self.n_classes() {
            extra.extend((0..self.signal_per_class).map(|i| format!("sig{c}_{i}")));
        }
        extra.extend((0..self.n_fillers()).map(|i| format!("w{i}")));
        Vocabulary::with_specials(extra)
    }

    /// `length` tokens with `count` signal tokens of `class` at random
    /// positions, fillers elsewhere.
    fn sentence<R: Rng + ?Sized>(&self, class: usize, length: usize, rng: &mut R) -> Vec<TokenId> {
        let signals = self.signal_tokens(class);
        let fillers = self.fillers();
        let count = rng.random_range(self.signal_min..=self.signal_max).min(length);
        let mut out: Vec<TokenId> = (0..length)
            .map(|_| if fillers.is_empty() { signals[0] } else { fillers[rng.random_range(0..fillers.len())] })
            .collect();
        for pos in sample(rng, length, count) {
            out[pos] = signals[rng.random_range(0..signals.len())];
        }
        out
    }

    fn example<R: Rng + ?Sized>(&self, class: usize, task: usize, rng: &mut R) -> LabeledExample {
        let sent = self.sentence(class, self.length, rng);
        let signals = self.signal_tokens(class);
        let mut task_tokens: Vec<TokenId> = sent.iter().copied().filter(|t| signals.contains(t)).collect();
        task_tokens.sort_unstable();
        task_tokens.dedup();
        let half = self.length / 2;
        LabeledExample {
            s1: sent[..half].to_vec(),
            s2: sent[half..].to_vec(),
            y: class,
            task,
            task_tokens,
        }
    }
}

/// Tasks with disjoint class signal sets and disjoint train/dev splits.
pub fn generate_synthetic_suite<R: Rng + ?Sized>(config: &SuiteConfig, rng: &mut R) -> Result<Suite> {
    config.validate()?;
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for t in 0..config.n_tasks {
        let classes: Vec<usize> = (t * config.classes_per_task..(t + 1) * config.classes_per_task).collect();
        let descriptor = TaskDescriptor {
            id: t,
            label_tokens: classes.iter().map(|&c| config.label_token(c)).collect(),
            classes: classes.clone(),
        };
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for &c in &classes {
            let mut seen = HashSet::new();
            let budget = 100 * (config.train_per_class + config.dev_per_class);
            let mut attempts = 0;
            let mut class_train = Vec::new();
            while class_train.len() < config.train_per_class {
                let ex = config.example(c, t, rng);
                seen.insert((ex.s1.clone(), ex.s2.clone()));
                class_train.push(ex);
            }
            let mut class_dev = Vec::new();
            while class_dev.len() < config.dev_per_class {
                attempts += 1;
                if attempts > budget {
                    return Err(config_err(format!(
                        "cannot draw {} dev sentences for class {c} disjoint from its training split",
                        config.dev_per_class
                    )));
                }
                let ex = config.example(c, t, rng);
                if !seen.contains(&(ex.s1.clone(), ex.s2.clone())) {
                    class_dev.push(ex);
                }
            }
            train.extend(class_train);
            dev.extend(class_dev);
        }
        tasks.push(Task { descriptor, train, dev });
    }
    Ok(Suite { tasks })
}

/// Unlabeled `[CLS] s1 [SEP] s2 [SEP]` sequences whose sentences carry the
/// signal tokens of one random class each.
pub fn pretraining_corpus<R: Rng + ?Sized>(config: &SuiteConfig, rng: &mut R) -> Result<Vec<Vec<TokenId>>> {
    config.validate()?;
    let (cls, sep) = (1, 2);
    let mut corpus = Vec::with_capacity(config.corpus_size);
    for _ in 0..config.corpus_size {
        let class = rng.random_range(0..config.n_classes());
        let len = rng.random_range(config.corpus_min_len..=config.corpus_max_len);
        let sent = config.sentence(class, len, rng);
        let half = len / 2;
        let mut seq = vec![cls];
        seq.extend_from_slice(&sent[..half]);
        seq.push(sep);
        if half < len {
            seq.extend_from_slice(&sent[half..]);
            seq.push(sep);
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

impl Suite {
    pub fn task(&self, id: usize) -> Result<&Task> {
        self.tasks
            .iter()
            .find(|t| t.descriptor.id == id)
            .ok_or_else(|| Error::Input(format!("no task {id} in suite")))
    }

    /// `(task id, class ids)` pairs for the classifier registry.
    pub fn registry(&self) -> Vec<(usize, Vec<usize>)> {
        self.tasks
            .iter()
            .map(|t| (t.descriptor.id, t.descriptor.classes.clone()))
            .collect()
    }

    /// Same suite with class ids and label tokens permuted by `perm`
    /// (old class -> new class). Sentences and task tokens are untouched.
    pub fn relabeled(&self, perm: &[usize], config: &SuiteConfig) -> Suite {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let relabel = |ex: &LabeledExample| LabeledExample {
                    y: perm[ex.y],
                    ..ex.clone()
                };
                let classes: Vec<usize> = t.descriptor.classes.iter().map(|&c| perm[c]).collect();
                Task {
                    descriptor: TaskDescriptor {
                        id: t.descriptor.id,
                        label_tokens: classes.iter().map(|&c| config.label_token(c)).collect(),
                        classes,
                    },
                    train: t.train.iter().map(relabel).collect(),
                    dev: t.dev.iter().map(relabel).collect(),
                }
            })
            .collect();
        Suite { tasks }
    }

    /// Header line, one `task` line per descriptor, then one line per
    /// example: `<split> <task> <class> | <s1> | <s2> | <task tokens>`.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "suite v1 tasks {}", self.tasks.len())?;
        let join = |ids: &[TokenId]| ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        for t in &self.tasks {
            writeln!(
                w,
                "task {} labels {} classes {}",
                t.descriptor.id,
                join(&t.descriptor.label_tokens),
                join(&t.descriptor.classes)
            )?;
        }
        for t in &self.tasks {
            for (split, examples) in [("train", &t.train), ("dev", &t.dev)] {
                for ex in examples {
                    writeln!(
                        w,
                        "{split} {} {} | {} | {} | {}",
                        ex.task,
                        ex.y,
                        join(&ex.s1),
                        join(&ex.s2),
                        join(&ex.task_tokens)
                    )?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Suite> {
        let parse_ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad token id `{t}`"))))
                .collect()
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty suite file".into()))??;
        let n_tasks: usize = header
            .strip_prefix("suite v1 tasks ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad suite header `{header}`")))?;
        let mut tasks = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let line = lines.next().ok_or_else(|| Error::Parse("missing task line".into()))??;
            let rest = line
                .strip_prefix("task ")
                .ok_or_else(|| Error::Parse(format!("expected task line, got `{line}`")))?;
            let (id, rest) = rest.split_once(" labels ").ok_or_else(|| Error::Parse(line.clone()))?;
            let (labels, classes) = rest.split_once(" classes ").ok_or_else(|| Error::Parse(line.clone()))?;
            tasks.push(Task {
                descriptor: TaskDescriptor {
                    id: id.trim().parse().map_err(|_| Error::Parse(line.clone()))?,
                    label_tokens: parse_ids(labels)?,
                    classes: parse_ids(classes)?,
                },
                train: Vec::new(),
                dev: Vec::new(),
            });
        }
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('|').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("bad example line `{line}`")));
            }
            let head: Vec<&str> = fields[0].split_whitespace().collect();
            if head.len() != 3 {
                return Err(Error::Parse(format!("bad example line `{line}`")));
            }
            let task: usize = head[1].parse().map_err(|_| Error::Parse(line.clone()))?;
            let ex = LabeledExample {
                s1: parse_ids(fields[1])?,
                s2: parse_ids(fields[2])?,
                y: head[2].parse().map_err(|_| Error::Parse(line.clone()))?,
                task,
                task_tokens: parse_ids(fields[3])?,
            };
            let target = tasks
                .iter_mut()
                .find(|t| t.descriptor.id == task)
                .ok_or_else(|| Error::Parse(format!("example for unknown task {task}")))?;
            match head[0] {
                "train" => target.train.push(ex),
                "dev" => target.dev.push(ex),
                other => return Err(Error::Parse(format!("unknown split `{other}`"))),
            }
        }
        Ok(Suite { tasks })
    }
}

/// Seeded permutation of `0..n`.
pub fn task_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
