//! Training loop, teacher-forced evaluation and the per-task training log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_batch, Corpus, Split};
use crate::curriculum::{active_tasks, CurriculumPlan};
use crate::error::{invalid, Error, Result};
use crate::model::{Batch, ForwardOptions, Model, ModelConfig};
use crate::ndcore::checkpoint::{self, CheckpointMeta};
use crate::ndcore::{lr_schedule, AdamConfig, AdamState, Tape};
use crate::routing::{Phase, RoutingPolicy};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "MOEFORGE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_updates: u64,
    /// Batch size in tokens, prefixes included.
    pub batch_tokens: usize,
    pub warmup_updates: u64,
    pub peak_lr: f64,
    pub valid_interval: u64,
    pub seed: u64,
    /// Task sampling temperature: task weights are `|D_t|^(1/temperature)`.
    pub temperature: f64,
    /// Training examples per task scored for the train perplexity.
    pub train_eval_size: usize,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub curriculum: Option<CurriculumPlan>,
    /// Where checkpoints and logs go. Not part of the serialized config,
    /// so identical runs into different directories hash identically.
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_updates: 20_000,
            batch_tokens: 4096,
            warmup_updates: 1_600,
            peak_lr: 0.004,
            valid_interval: 1_000,
            seed: 0,
            temperature: 1.0,
            train_eval_size: 200,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            curriculum: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        self.model.validate()?;
        if self.valid_interval == 0 || self.total_updates % self.valid_interval != 0 {
            return Err(Error::Config(format!(
                "valid_interval ({}) must be positive and divide total_updates ({})",
                self.valid_interval, self.total_updates
            )));
        }
        if self.warmup_updates == 0 || !(self.peak_lr > 0.0) {
            return Err(Error::Config("warmup_updates and peak_lr must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.model.vocab_size != corpus.vocab_size() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from corpus vocab_size {}",
                self.model.vocab_size,
                corpus.vocab_size()
            )));
        }
        if self.model.max_len < corpus.max_seq_len() {
            return Err(Error::Config(format!(
                "model max_len {} is shorter than the corpus' longest sequence {}",
                self.model.max_len,
                corpus.max_seq_len()
            )));
        }
        if let Some(plan) = &self.curriculum {
            plan.validate().map_err(|e| Error::Config(e.to_string()))?;
            if plan.total_updates != self.total_updates {
                return Err(Error::Config(format!(
                    "curriculum plan covers {} updates, run has {}",
                    plan.total_updates, self.total_updates
                )));
            }
            if let Some(t) = plan.all_tasks().into_iter().find(|&t| t >= corpus.num_tasks()) {
                return Err(Error::Config(format!("curriculum references unknown task {t}")));
            }
        }
        Ok(())
    }
}

/// One `(step, task, split)` row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub task: usize,
    pub split: Split,
    pub ppl: f64,
    pub l_mt: f64,
    pub l_moe: Option<f64>,
    pub l_cmr: Option<f64>,
    pub mean_gate: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        if self.rows.is_empty() {
            wr.write_record(["step", "task", "split", "ppl", "l_mt", "l_moe", "l_cmr", "mean_gate", "lr"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { rows })
    }

    /// Perplexity of `task` on `split` at every logged step.
    pub fn series(&self, task: usize, split: Split) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.task == task && r.split == split)
            .map(|r| (r.step, r.ppl))
            .collect()
    }

    /// `(val, train)` perplexity of `task` at the last logged step.
    pub fn final_ppl(&self, task: usize) -> Option<(f64, f64)> {
        let v = self.series(task, Split::Valid).last()?.1;
        let t = self.series(task, Split::Train).last()?.1;
        Some((v, t))
    }
}

pub struct TrainResult {
    pub model: Model,
    pub log: TrainLog,
}

/// Evaluation threads: `MOEFORGE_THREADS` if set, else available cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Settings of an evaluation pass beyond the model and corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub policy: RoutingPolicy,
    /// Seed of the routing RNG; only random routing consumes it.
    pub seed: u64,
    /// Score at most this many examples per task.
    pub limit: Option<usize>,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { split: Split::Valid, policy: RoutingPolicy::TopK, seed: 0, limit: None, threads: eval_threads() }
    }
}

const EVAL_CHUNK: usize = 64;

/// Summed NLL and token count of `task` under teacher forcing.
fn task_nll(model: &Model, corpus: &Corpus, task: usize, opts: &EvalOptions) -> Result<(f64, usize)> {
    let mut examples = corpus.examples(task, opts.split)?;
    if let Some(n) = opts.limit {
        examples = &examples[..n.min(examples.len())];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(task as u64);
    let fopts = ForwardOptions { phase: Phase::Eval, policy: opts.policy.clone() };
    let (mut nll, mut count) = (0.0, 0);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let items: Vec<_> = chunk.iter().map(|e| (task, e)).collect();
        let batch = corpus.batch_of(&items);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &fopts, &mut rng)?;
        let ce = tape.cross_entropy(out.logits, &out.labels, 0.0)?;
        nll += tape.value(ce).item() * out.labels.len() as f64;
        count += out.labels.len();
    }
    Ok((nll, count))
}

/// Teacher-forced perplexity `exp(mean NLL)` per task, without label
/// smoothing, masking or capacity limits. Tasks are spread over threads.
pub fn evaluate_with(model: &Model, corpus: &Corpus, tasks: &[usize], opts: &EvalOptions) -> Result<BTreeMap<usize, f64>> {
    for &t in tasks {
        corpus.task(t)?;
    }
    let threads = opts.threads.max(1).min(tasks.len().max(1));
    let results: Vec<Result<(usize, f64)>> = if threads <= 1 {
        tasks.iter().map(|&t| task_ppl(model, corpus, t, opts).map(|p| (t, p))).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let mine: Vec<usize> = tasks.iter().copied().skip(w).step_by(threads).collect();
                    s.spawn(move || {
                        mine.into_iter()
                            .map(|t| task_ppl(model, corpus, t, opts).map(|p| (t, p)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation thread panicked")).collect()
        })
    };
    results.into_iter().collect()
}

fn task_ppl(model: &Model, corpus: &Corpus, task: usize, opts: &EvalOptions) -> Result<f64> {
    let (nll, n) = task_nll(model, corpus, task, opts)?;
    if n == 0 {
        return Err(invalid(format!("task {task} has no examples to evaluate")));
    }
    Ok((nll / n as f64).exp())
}

/// Validation perplexity per task.
pub fn evaluate(model: &Model, corpus: &Corpus, tasks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    evaluate_with(model, corpus, tasks, &EvalOptions::default())
}

/// Trains a fresh model on `corpus`.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainResult> {
    train_observed(config, corpus, &mut |_, _| {})
}

/// Like [`train`], calling `observe(step, batch)` before every update.
pub fn train_observed(
    config: &TrainConfig,
    corpus: &Corpus,
    observe: &mut dyn FnMut(u64, &Batch),
) -> Result<TrainResult> {
    config.validate(corpus)?;
    let mut init_rng = stream(config.seed, 0);
    let mut data_rng = stream(config.seed, 1);
    let mut noise_rng = stream(config.seed, 2);
    let mut model = Model::new(config.model.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(&model.params, config.adam);
    let mut log = TrainLog::default();
    let all_tasks: Vec<usize> = (0..corpus.num_tasks()).collect();
    let config_hash = config_hash(config)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut acc = LossAccumulator::default();
    for step in 1..=config.total_updates {
        let active: Vec<usize> = match &config.curriculum {
            Some(plan) => active_tasks(plan, step - 1).into_iter().collect(),
            None => all_tasks.clone(),
        };
        if active.is_empty() {
            return Err(Error::Config(format!("curriculum leaves no task active at step {step}")));
        }
        let batch = sample_batch(corpus, &active, config.batch_tokens, config.temperature, &mut data_rng)?;
        observe(step, &batch);
        let lr = lr_schedule(step as i64, config.warmup_updates, config.peak_lr)?;
        let mut tape = Tape::new();
        let (loss, _) = model.step_loss(&mut tape, &batch, &ForwardOptions::train(), &mut noise_rng)?;
        let total = tape.value(loss.total).item();
        if !total.is_finite() {
            let detail = format!(
                "loss {total} (l_mt {}, l_moe {:?}, l_cmr {:?}) at lr {lr} on tasks {:?}",
                loss.l_mt, loss.l_moe, loss.l_cmr, batch.tasks
            );
            if let Some(dir) = &config.out_dir {
                std::fs::write(dir.join("nan_snapshot.txt"), format!("step {step}: {detail}\n"))?;
            }
            return Err(Error::Numerical { step, detail });
        }
        tape.backward(loss.total)?;
        model.params.zero_grads();
        tape.accumulate_param_grads(&mut model.params);
        adam.step(&mut model.params, lr)?;
        acc.add(&loss);

        if step % config.valid_interval == 0 {
            let summary = acc.take();
            let valid = evaluate(&model, corpus, &all_tasks)?;
            let train_opts = EvalOptions { split: Split::Train, limit: Some(config.train_eval_size), ..Default::default() };
            let train_ppl = evaluate_with(&model, corpus, &all_tasks, &train_opts)?;
            for &t in &all_tasks {
                for (split, ppl) in [(Split::Train, train_ppl[&t]), (Split::Valid, valid[&t])] {
                    log.rows.push(LogRow {
                        step,
                        task: t,
                        split,
                        ppl,
                        l_mt: summary.l_mt,
                        l_moe: summary.l_moe,
                        l_cmr: summary.l_cmr,
                        mean_gate: summary.mean_gate,
                        lr,
                    });
                }
            }
            if let Some(dir) = &config.out_dir {
                let meta = CheckpointMeta { step, config_hash: config_hash.clone() };
                checkpoint::save(&checkpoint_path(dir, step), &model.params, &meta)?;
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
        log.write_csv(std::fs::File::create(dir.join("train_log.csv"))?)?;
    }
    Ok(TrainResult { model, log })
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.bin"))
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Rebuilds a model from its config and a checkpoint written by [`train`].
pub fn load_model(config: &ModelConfig, path: &Path) -> Result<Model> {
    let mut model = Model::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let (store, _) = checkpoint::load(path)?;
    model.params.load_from(&store)?;
    Ok(model)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Default)]
struct LossAccumulator {
    n: usize,
    l_mt: f64,
    l_moe: Option<f64>,
    l_cmr: Option<f64>,
    gate: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LossSummary {
    l_mt: f64,
    l_moe: Option<f64>,
    l_cmr: Option<f64>,
    mean_gate: Option<f64>,
}

impl LossAccumulator {
    fn add(&mut self, l: &crate::model::StepLoss) {
        self.n += 1;
        self.l_mt += l.l_mt;
        let add = |a: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *a = Some(a.unwrap_or(0.0) + v);
            }
        };
        add(&mut self.l_moe, l.l_moe);
        add(&mut self.l_cmr, l.l_cmr);
        add(&mut self.gate, l.mean_gate);
    }

    /// Interval means, resetting the accumulator.
    fn take(&mut self) -> LossSummary {
        let n = self.n.max(1) as f64;
        let s = LossSummary {
            l_mt: self.l_mt / n,
            l_moe: self.l_moe.map(|v| v / n),
            l_cmr: self.l_cmr.map(|v| v / n),
            mean_gate: self.gate.map(|v| v / n),
        };
        *self = Self::default();
        s
    }
}

