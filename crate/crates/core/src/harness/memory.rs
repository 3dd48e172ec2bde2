//! Replay buffer, episodic memory and gradient projection.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use crate::tasks::LabeledExample;

/// Keeps every training example the first time it is seen.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    entries: Vec<LabeledExample>,
    seen: HashSet<(usize, usize)>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `example` unless `(task, index)` was stored before.
    pub fn insert(&mut self, task: usize, index: usize, example: &LabeledExample) -> bool {
        if !self.seen.insert((task, index)) {
            return false;
        }
        self.entries.push(example.clone());
        true
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabeledExample] {
        &self.entries
    }

    /// Up to `n` distinct entries drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&LabeledExample> {
        self.sample_where(n, rng, |_| true)
    }

    /// Up to `n` distinct entries drawn uniformly among those passing `keep`.
    pub fn sample_where<R, F>(&self, n: usize, rng: &mut R, keep: F) -> Vec<&LabeledExample>
    where
        R: Rng + ?Sized,
        F: Fn(&LabeledExample) -> bool,
    {
        let pool: Vec<&LabeledExample> = self.entries.iter().filter(|e| keep(e)).collect();
        let n = n.min(pool.len());
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    }
}

/// `(key, example)` pairs searched by squared distance.
#[derive(Clone, Debug, Default)]
pub struct EpisodicMemory {
    keys: Vec<Vec<f64>>,
    examples: Vec<LabeledExample>,
}

impl EpisodicMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: Vec<f64>, example: LabeledExample) {
        self.keys.push(key);
        self.examples.push(example);
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn example(&self, i: usize) -> &LabeledExample {
        &self.examples[i]
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }

    /// Indices of the `r` entries closest to `query`, nearest first, ties
    /// to the earlier entry. Returns every entry when fewer than `r` exist.
    pub fn nearest(&self, query: &[f64], r: usize) -> Vec<usize> {
        let dist: Vec<f64> = self
            .keys
            .iter()
            .map(|k| k.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let cmp = |a: &usize, b: &usize| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b));
        let mut idx: Vec<usize> = (0..dist.len()).collect();
        let r = r.min(idx.len());
        if r == 0 {
            return Vec::new();
        }
        if r < idx.len() {
            idx.select_nth_unstable_by(r - 1, cmp);
            idx.truncate(r);
        }
        idx.sort_by(cmp);
        idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// `g · g_ref >= 0`; `g` left as is.
    Kept,
    Projected,
    /// The reference gradient vanished; `g` left as is.
    ZeroReference,
}

/// `g <- g - (g·r / r·r) r` when `g·r < 0`.
pub fn agem_project(g: &mut [f64], g_ref: &[f64]) -> Projection {
    let rr: f64 = g_ref.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Projection::ZeroReference;
    }
    let gr: f64 = g.iter().zip(g_ref).map(|(a, b)| a * b).sum();
    if gr >= 0.0 {
        return Projection::Kept;
    }
    let c = gr / rr;
    g.iter_mut().zip(g_ref).for_each(|(a, b)| *a -= c * b);
    Projection::Projected
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ex(task: usize, y: usize) -> LabeledExample {
        LabeledExample {
            s1: vec![y],
            s2: vec![],
            y,
            task,
            task_tokens: vec![y],
        }
    }

    #[test]
    fn projection_examples() {
        let mut g = vec![1.0, 0.0];
        assert_eq!(agem_project(&mut g, &[1.0, 1.0]), Projection::Kept);
        assert_eq!(g, vec![1.0, 0.0]);

        let mut g = vec![-1.0, 1.0];
        assert_eq!(agem_project(&mut g, &[1.0, 0.0]), Projection::Projected);
        assert_eq!(g, vec![0.0, 1.0]);

        let mut g = vec![-1.0, 1.0];
        assert_eq!(agem_project(&mut g, &[0.0, 0.0]), Projection::ZeroReference);
        assert_eq!(g, vec![-1.0, 1.0]);
    }

    #[test]
    fn buffer_stores_once() {
        let mut b = ReplayBuffer::new();
        assert!(b.insert(0, 0, &ex(0, 1)));
        assert!(!b.insert(0, 0, &ex(0, 1)));
        assert!(b.insert(1, 0, &ex(1, 2)));
        assert_eq!(b.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.sample(32, &mut rng).len(), 2);
        let old = b.sample_where(32, &mut rng, |e| e.task == 0);
        assert_eq!(old.len(), 1);
        assert_eq!(old[0].task, 0);
    }

    #[test]
    fn nearest_orders_by_distance() {
        let mut m = EpisodicMemory::new();
        m.insert(vec![0.0, 0.0], ex(0, 0));
        m.insert(vec![3.0, 0.0], ex(0, 1));
        m.insert(vec![1.0, 0.0], ex(0, 0));
        m.insert(vec![1.0, 0.0], ex(0, 1));
        assert_eq!(m.nearest(&[1.1, 0.0], 3), vec![2, 3, 0]);
        assert_eq!(m.nearest(&[0.0, 0.0], 10).len(), 4);
    }
}
