use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{write_atomic, write_json};
use super::ExperimentConfig;
use crate::autodiff::{encode_records, read_archive};
use crate::error::{config_err, Error, Result};
use crate::harness::{run_experiment, Framework, ModelVariant, RunRecord};
use crate::metrics::{mean, sample_std};
use crate::tasks::{generate_synthetic_suite, pretraining_corpus, Suite};
use crate::transformer::{mlm_pretrain, PretrainReport, PretrainedModel, Vocabulary};

/// Generates the corpus, pre-trains and writes the frozen checkpoint and its
/// vocabulary.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    cfg.suite.validate()?;
    cfg.model.validate()?;
    let vocab = cfg.suite.vocabulary()?;
    let corpus = pretraining_corpus(&cfg.suite, &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.seed))?;
    info!("pre-training on {} sequences", corpus.len());
    let (model, report) = mlm_pretrain(&corpus, vocab, cfg.model.clone(), &cfg.pretrain)?;
    let mut vocab_text = Vec::new();
    model.vocab.write(&mut vocab_text)?;
    write_atomic(&cfg.checkpoint_path(), &model.to_bytes())?;
    write_atomic(&cfg.vocab_path(), &vocab_text)?;
    write_json(&cfg.out.join("pretrain.json"), &report)?;
    Ok(report)
}

pub fn load_base(cfg: &ExperimentConfig) -> Result<PretrainedModel> {
    let open = |p: PathBuf| {
        fs::File::open(&p).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", p.display())))
    };
    let records = read_archive(open(cfg.checkpoint_path())?)?;
    let vocab = Vocabulary::read(BufReader::new(open(cfg.vocab_path())?))?;
    let model = PretrainedModel::from_records(vocab, records, cfg.model.init_std)?;
    if model.vocab.tokens() != cfg.suite.vocabulary()?.tokens() {
        return Err(Error::Checkpoint(
            "checkpoint vocabulary does not match the configured suite".into(),
        ));
    }
    if !model.is_frozen() {
        return Err(Error::Checkpoint("base checkpoint has trainable parameters".into()));
    }
    Ok(model)
}

/// One line of the aggregate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub framework: Framework,
    pub model: ModelVariant,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub forget_mean: Option<f64>,
    pub forget_std: Option<f64>,
}

/// Mean and sample standard deviation of Acc and Forget per
/// (framework, model), in tag order.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut cells: BTreeMap<(Framework, ModelVariant), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.framework, r.model)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((framework, model), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.acc).collect();
            let forget: Option<Vec<f64>> = rs.iter().map(|r| r.forget).collect();
            AggregateRow {
                framework,
                model,
                runs: rs.len(),
                acc_mean: mean(&acc),
                acc_std: sample_std(&acc),
                forget_mean: forget.as_deref().map(mean),
                forget_std: forget.as_deref().map(sample_std),
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("framework,model,acc_mean,acc_std,forget_mean,forget_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.framework,
            r.model,
            r.acc_mean,
            r.acc_std,
            opt(r.forget_mean),
            opt(r.forget_std)
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<RunRecord>,
    /// `(run id, message)` of every failed cell.
    pub failures: Vec<(String, String)>,
    pub aggregate: Vec<AggregateRow>,
}

pub(crate) fn checkpoint_file(dir: &Path, run_id: &str, k: usize, task: usize) -> PathBuf {
    dir.join("checkpoints").join(run_id).join(format!("{k}-task{task}.ncla"))
}

pub(crate) fn record_file(dir: &Path, run_id: &str) -> PathBuf {
    dir.join("records").join(format!("{run_id}.json"))
}

fn run_cell(
    cfg: &ExperimentConfig,
    suite: &Suite,
    base: &PretrainedModel,
    seed: u64,
    framework: Framework,
    model: ModelVariant,
) -> Result<RunRecord> {
    let out = run_experiment(suite, base, model, framework, seed, &cfg.train)?;
    let id = &out.record.run_id;
    for (k, (task, records)) in out.checkpoints.iter().enumerate() {
        write_atomic(&checkpoint_file(&cfg.out, id, k, *task), &encode_records(records))?;
    }
    write_json(&record_file(&cfg.out, id), &out.record)?;
    info!("{id}: acc {:.4} forget {:?}", out.record.acc, out.record.forget);
    Ok(out.record)
}

/// Runs every (seed, framework, model) cell, writes one record per cell and
/// the aggregate table. Failed cells are reported, not fatal.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let base = load_base(cfg)?;
    let suite = generate_synthetic_suite(&cfg.suite, &mut ChaCha8Rng::seed_from_u64(cfg.suite_seed))?;
    fs::create_dir_all(&cfg.out)?;
    let mut resolved = cfg.clone();
    resolved.checkpoint = Some(cfg.checkpoint_path());
    write_atomic(&cfg.out.join("config.toml"), resolved.to_toml()?.as_bytes())?;
    let mut suite_text = Vec::new();
    suite.write(&mut suite_text)?;
    write_atomic(&cfg.out.join("suite.txt"), &suite_text)?;

    let cells: Vec<(u64, Framework, ModelVariant)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| {
            cfg.frameworks
                .iter()
                .flat_map(move |&f| cfg.models.iter().map(move |&m| (s, f, m)))
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| config_err(format!("cannot start {} workers: {e}", cfg.jobs)))?;
    let results: Vec<(String, Result<RunRecord>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(s, f, m)| (RunRecord::run_id(f, m, s), run_cell(cfg, &suite, &base, s, f, m)))
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                error!("{id} failed: {e}");
                failures.push((id, e.to_string()));
            }
        }
    }
    let rows = aggregate(&records);
    write_atomic(&cfg.out.join("aggregate.csv"), aggregate_csv(&rows).as_bytes())?;
    let failure_file = cfg.out.join("failures.txt");
    if failures.is_empty() {
        if failure_file.exists() {
            fs::remove_file(&failure_file)?;
        }
    } else {
        let text: String = failures.iter().map(|(id, e)| format!("{id}\t{e}\n")).collect();
        write_atomic(&failure_file, text.as_bytes())?;
    }
    Ok(RunSummary {
        records,
        failures,
        aggregate: rows,
    })
}
