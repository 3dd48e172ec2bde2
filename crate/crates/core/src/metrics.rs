//! Accuracy, forgetting, recall and representation drift.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{input_err, Result};
use crate::neighbor::top_by_similarity;
use crate::tasks::LabeledExample;
use crate::transformer::{TokenId, Vocabulary};

/// `a[i][j]`: dev accuracy on the `j`-th task of the order after training the
/// `i`-th. Entries that were never evaluated are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            rows: vec![vec![None; t]; t],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self {
            rows: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.rows[i][j] = Some(value);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn final_row(&self) -> Result<Vec<f64>> {
        let t = self.tasks();
        if t == 0 {
            return Err(input_err("empty accuracy matrix"));
        }
        self.rows[t - 1]
            .iter()
            .enumerate()
            .map(|(j, v)| v.ok_or_else(|| input_err(format!("final row is missing task {j}"))))
            .collect()
    }
}

/// `(1/T) Σ_j a[T][j]`.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetNormalization {
    /// Divide the `T-1` terms by `T`.
    #[default]
    ByTasks,
    /// Divide by the number of terms, `T-1`.
    ByTerms,
}

/// `f_j = max_{j <= l < T} a[l][j] - a[T][j]` summed over `j < T` and
/// normalized per `norm`. One task gives 0.
pub fn average_forgetting(m: &AccuracyMatrix, norm: ForgetNormalization) -> Result<f64> {
    let t = m.tasks();
    let last = m.final_row()?;
    if t == 1 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (j, &final_acc) in last.iter().enumerate().take(t - 1) {
        let mut best = f64::NEG_INFINITY;
        for l in j..t - 1 {
            let v = m
                .get(l, j)
                .ok_or_else(|| input_err(format!("accuracy matrix is missing entry ({l}, {j})")))?;
            best = best.max(v);
        }
        total += best - final_acc;
    }
    let denom = match norm {
        ForgetNormalization::ByTasks => t,
        ForgetNormalization::ByTerms => t - 1,
    };
    Ok(total / denom as f64)
}

/// Share of `relevant` found among the first `k` entries of `ranking`.
pub fn recall_at_k(ranking: &[TokenId], relevant: &[TokenId], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(input_err("recall needs a nonempty relevant set"));
    }
    if ranking.len() < k {
        return Err(input_err(format!("ranking has {} entries, fewer than k={k}", ranking.len())));
    }
    let top = &ranking[..k];
    let hits = relevant.iter().filter(|r| top.contains(r)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Vocabulary ids sorted by descending `w · h` over the rows of `prototypes`.
pub fn rank_tokens(prototypes: &Tensor, h: &[f64]) -> Vec<TokenId> {
    top_by_similarity(prototypes, h, prototypes.rows())
}

/// The `n` tokens whose embeddings have the largest dot product with `h`.
pub fn nearest_tokens(h: &[f64], embeddings: &Tensor, vocab: &Vocabulary, n: usize) -> Vec<String> {
    top_by_similarity(embeddings, h, n)
        .into_iter()
        .map(|id| vocab.token(id).to_string())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDistance {
    #[default]
    Euclidean,
    /// `1 - cos`
    Cosine,
}

impl DriftDistance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DriftDistance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            DriftDistance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb).max(1e-12)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDrift {
    pub task: usize,
    pub centroid: f64,
    pub mean_displacement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub tasks: Vec<TaskDrift>,
}

impl DriftReport {
    pub fn task(&self, id: usize) -> Option<&TaskDrift> {
        self.tasks.iter().find(|t| t.task == id)
    }
}

pub fn centroid(reps: &[Vec<f64>]) -> Vec<f64> {
    let d = reps.first().map(Vec::len).unwrap_or(0);
    let mut c = vec![0.0; d];
    for r in reps {
        c.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|v| *v /= reps.len().max(1) as f64);
    c
}

/// Centroid and mean per-example displacement of paired representations,
/// one `(task, before, after)` entry per task.
pub fn drift_between(pairs: &[(usize, Vec<Vec<f64>>, Vec<Vec<f64>>)], distance: DriftDistance) -> Result<DriftReport> {
    let mut tasks = Vec::with_capacity(pairs.len());
    for (task, before, after) in pairs {
        if before.len() != after.len() || before.is_empty() {
            return Err(input_err(format!(
                "task {task}: {} representations before, {} after",
                before.len(),
                after.len()
            )));
        }
        let centroid_shift = distance.between(&centroid(before), &centroid(after));
        let mean = before.iter().zip(after).map(|(a, b)| distance.between(a, b)).sum::<f64>() / before.len() as f64;
        tasks.push(TaskDrift {
            task: *task,
            centroid: centroid_shift,
            mean_displacement: mean,
        });
    }
    Ok(DriftReport { tasks })
}

/// Mean Recall@k of decoded prediction-position representations against
/// each example's task tokens; also returns the per-example values.
pub fn recall_eval_run<F>(examples: &[LabeledExample], prototypes: &Tensor, k: usize, mut rep_of: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&LabeledExample) -> Result<Vec<f64>>,
{
    let mut values = Vec::with_capacity(examples.len());
    for ex in examples {
        let rep = rep_of(ex)?;
        let ranking = rank_tokens(prototypes, &rep);
        values.push(recall_at_k(&ranking, &ex.task_tokens, k)?);
    }
    if values.is_empty() {
        return Err(input_err("recall needs at least one example"));
    }
    Ok((mean(&values), values))
}

/// Drift of every task's representations between two encoders.
pub fn measure_drift<F, G>(
    tasks: &[(usize, &[LabeledExample])],
    mut before: F,
    mut after: G,
    distance: DriftDistance,
) -> Result<DriftReport>
where
    F: FnMut(&LabeledExample) -> Result<Vec<f64>>,
    G: FnMut(&LabeledExample) -> Result<Vec<f64>>,
{
    let mut pairs = Vec::with_capacity(tasks.len());
    for (task, examples) in tasks {
        let b = examples.iter().map(&mut before).collect::<Result<Vec<_>>>()?;
        let a = examples.iter().map(&mut after).collect::<Result<Vec<_>>>()?;
        if b.iter().zip(&a).any(|(x, y)| x.len() != y.len()) {
            return Err(input_err("representations differ in width between checkpoints"));
        }
        pairs.push((*task, b, a));
    }
    drift_between(&pairs, distance)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
