use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_atomic, write_json};
use super::run::{checkpoint_file, load_base};
use super::ExperimentConfig;
use crate::autodiff::read_archive;
use crate::error::{Error, Result};
use crate::harness::{Framework, Learner, RunRecord};
use crate::metrics::{drift_between, mean, rank_tokens, recall_at_k};
use crate::tasks::{LabeledExample, Suite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub run_id: String,
    /// Position of the checkpoint in the training order.
    pub checkpoint: usize,
    pub after_task: usize,
    pub recall: f64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub run_id: String,
    pub from: usize,
    pub to: usize,
    pub task: usize,
    pub centroid: f64,
    pub mean_displacement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub recall: Vec<RecallRow>,
    pub drift: Vec<DriftRow>,
    /// Checkpoint files that were expected but absent.
    pub skipped: Vec<String>,
}

fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir.join("records"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Recall@k per checkpoint with per-example dumps, and drift of every task's
/// dev representations between consecutive checkpoints.
pub fn cmd_analyze(dir: &Path) -> Result<AnalysisSummary> {
    let cfg = ExperimentConfig::load(Some(&dir.join("config.toml")))?;
    let base = load_base(&cfg)?;
    let suite = Suite::read(BufReader::new(fs::File::open(dir.join("suite.txt"))?))?;
    let dev: Vec<LabeledExample> = suite.tasks.iter().flat_map(|t| t.dev.clone()).collect();
    let out_dir = dir.join("analysis");
    let mut summary = AnalysisSummary::default();

    for record in read_records(dir)? {
        let id = record.run_id.clone();
        let tc = &record.config;
        let mut learner = Learner::new(
            &base,
            record.model,
            &suite,
            tc.formulation,
            &tc.neighbor,
            tc.objective.clone(),
            tc.head_init_std,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let expected: Vec<(usize, usize)> = match record.framework {
            Framework::Mtl => vec![(0, *record.task_order.last().expect("nonempty order"))],
            _ => record.task_order.iter().copied().enumerate().collect(),
        };
        let mut previous: Option<(usize, Vec<Vec<f64>>)> = None;
        let mut examples_csv = String::from("checkpoint,task,class,recall\n");
        for (k, task) in expected {
            let path = checkpoint_file(dir, &id, k, task);
            if !path.exists() {
                warn!("{id}: missing checkpoint {}, skipped", path.display());
                summary.skipped.push(path.display().to_string());
                previous = None;
                continue;
            }
            learner.load_records(&read_archive(fs::File::open(&path)?)?)?;
            let reps = learner.representations(&dev)?;
            let mut values = Vec::with_capacity(dev.len());
            let mut dump = String::new();
            for (ex, rep) in dev.iter().zip(&reps) {
                let r = recall_at_k(&rank_tokens(learner.prototypes(), rep), &ex.task_tokens, tc.recall_k)?;
                values.push(r);
                let _ = writeln!(examples_csv, "{k},{},{},{r}", ex.task, ex.y);
                let _ = write!(dump, "{},{}", ex.task, ex.y);
                for v in rep {
                    let _ = write!(dump, ",{v}");
                }
                dump.push('\n');
            }
            write_atomic(&out_dir.join(&id).join(format!("reps-{k}.csv")), dump.as_bytes())?;
            summary.recall.push(RecallRow {
                run_id: id.clone(),
                checkpoint: k,
                after_task: task,
                recall: mean(&values),
                examples: values.len(),
            });
            if let Some((from, before)) = previous.take() {
                let pairs: Vec<(usize, Vec<Vec<f64>>, Vec<Vec<f64>>)> = suite
                    .tasks
                    .iter()
                    .map(|t| {
                        let pick = |all: &[Vec<f64>]| -> Vec<Vec<f64>> {
                            dev.iter().zip(all).filter(|(e, _)| e.task == t.descriptor.id).map(|(_, r)| r.clone()).collect()
                        };
                        (t.descriptor.id, pick(&before), pick(&reps))
                    })
                    .collect();
                for d in drift_between(&pairs, tc.drift_distance)?.tasks {
                    summary.drift.push(DriftRow {
                        run_id: id.clone(),
                        from,
                        to: k,
                        task: d.task,
                        centroid: d.centroid,
                        mean_displacement: d.mean_displacement,
                    });
                }
            }
            previous = Some((k, reps));
        }
        write_atomic(&out_dir.join(&id).join("recall_examples.csv"), examples_csv.as_bytes())?;
        info!("{id}: analyzed");
    }

    let mut recall_csv = String::from("run_id,checkpoint,after_task,examples,recall\n");
    for r in &summary.recall {
        let _ = writeln!(recall_csv, "{},{},{},{},{}", r.run_id, r.checkpoint, r.after_task, r.examples, r.recall);
    }
    let mut drift_csv = String::from("run_id,from,to,task,centroid,mean_displacement\n");
    for d in &summary.drift {
        let _ = writeln!(
            drift_csv,
            "{},{},{},{},{},{}",
            d.run_id, d.from, d.to, d.task, d.centroid, d.mean_displacement
        );
    }
    write_atomic(&out_dir.join("recall.csv"), recall_csv.as_bytes())?;
    write_atomic(&out_dir.join("drift.csv"), drift_csv.as_bytes())?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
