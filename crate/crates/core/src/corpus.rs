//! Synthetic imbalanced multitask corpus of translation-like sequence tasks.
//!
//! Token ids `0..2·num_tasks` are reserved for prefixes: task `t` uses `2t`
//! on the source side and `2t + 1` on the target side. The remaining ids
//! form the shared content vocabulary.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{ResourceClass, ResourceThresholds, TaskSpec};
use crate::error::{invalid, Error, Result};
use crate::model::Batch;

/// Which side English sits on, for analysis grouping.
pub const DIRECTIONS: [&str; 2] = ["en-xx", "xx-en"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskDef {
    pub id: usize,
    pub direction: String,
    /// Bijection over content tokens (indices into the content vocabulary).
    pub permutation: Vec<usize>,
    pub reverse: bool,
    pub train_size: usize,
    pub valid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
}

/// Generator settings. Lengths count content tokens only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_sizes: Vec<usize>,
    pub vocab_size: usize,
    #[serde(default = "default_valid_size")]
    pub valid_size: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Reverse the target on every other task.
    #[serde(default = "default_true")]
    pub alternate_reversal: bool,
    /// Each target token additionally depends on the previous source token.
    #[serde(default)]
    pub contextual: bool,
    /// Probability that a target token is replaced by a random content token.
    #[serde(default)]
    pub noise: f64,
    /// Draw identity permutations (copy tasks).
    #[serde(default)]
    pub identity: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_valid_size() -> usize {
    200
}

fn default_min_len() -> usize {
    4
}

fn default_max_len() -> usize {
    8
}

fn default_true() -> bool {
    true
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_sizes: vec![50_000, 50_000, 5_000, 5_000, 300, 300],
            vocab_size: 64,
            valid_size: default_valid_size(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            alternate_reversal: true,
            contextual: false,
            noise: 0.0,
            identity: false,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn num_tasks(&self) -> usize {
        self.train_sizes.len()
    }

    pub fn num_reserved(&self) -> usize {
        2 * self.num_tasks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_sizes.is_empty() {
            return Err(Error::Config("train_sizes must list at least one task".into()));
        }
        if self.vocab_size < 16 {
            return Err(Error::Config(format!("vocab_size must be at least 16, got {}", self.vocab_size)));
        }
        if self.vocab_size < self.num_reserved() + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer than two content tokens after {} prefix ids",
                self.vocab_size,
                self.num_reserved()
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 1 <= min_len <= max_len".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1), got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub def: SyntheticTaskDef,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub tasks: Vec<TaskData>,
}

fn content_offset(num_tasks: usize) -> usize {
    2 * num_tasks
}

/// Applies a task's mapping to a content-token source sequence.
pub fn translate(def: &SyntheticTaskDef, src: &[usize], contextual: bool, offset: usize) -> Vec<usize> {
    let c = def.permutation.len();
    let mut out: Vec<usize> = src
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let mut idx = tok - offset;
            if contextual && i > 0 {
                idx = (idx + src[i - 1] - offset) % c;
            }
            def.permutation[idx] + offset
        })
        .collect();
    if def.reverse {
        out.reverse();
    }
    out
}

/// Deterministically generates the corpus described by `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let n = config.num_tasks();
    let offset = content_offset(n);
    let c = config.vocab_size - offset;
    let mut tasks = Vec::with_capacity(n);
    for (id, &size) in config.train_sizes.iter().enumerate() {
        // Independent stream per task so adding tasks leaves others unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(id as u64 + 1);
        let mut permutation: Vec<usize> = (0..c).collect();
        if !config.identity {
            permutation.shuffle(&mut rng);
        }
        let def = SyntheticTaskDef {
            id,
            direction: DIRECTIONS[id % 2].to_string(),
            permutation,
            reverse: config.alternate_reversal && id % 2 == 1,
            train_size: size,
            valid_size: config.valid_size,
        };
        let total = size + config.valid_size;
        let mut seen = HashSet::with_capacity(total);
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > 50 * total + 1000 {
                return Err(Error::Config(format!(
                    "task {id}: cannot draw {total} distinct sources; raise vocab_size or max_len"
                )));
            }
            let len = rng.gen_range(config.min_len..=config.max_len);
            let src: Vec<usize> = (0..len).map(|_| offset + rng.gen_range(0..c)).collect();
            if !seen.insert(src.clone()) {
                continue;
            }
            let mut tgt = translate(&def, &src, config.contextual, offset);
            if config.noise > 0.0 {
                for t in tgt.iter_mut() {
                    if rng.gen::<f64>() < config.noise {
                        *t = offset + rng.gen_range(0..c);
                    }
                }
            }
            examples.push(Example { src, tgt });
        }
        let valid = examples.split_off(size);
        tasks.push(TaskData { def, train: examples, valid });
    }
    Ok(Corpus { config: config.clone(), tasks })
}

impl Corpus {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Longest prefixed sequence in the corpus.
    pub fn max_seq_len(&self) -> usize {
        self.config.max_len + 1
    }

    pub fn task(&self, id: usize) -> Result<&TaskData> {
        self.tasks
            .get(id)
            .ok_or_else(|| invalid(format!("unknown task {id} (corpus has {})", self.tasks.len())))
    }

    pub fn examples(&self, task: usize, split: Split) -> Result<&[Example]> {
        let t = self.task(task)?;
        Ok(match split {
            Split::Train => &t.train,
            Split::Valid => &t.valid,
        })
    }

    pub fn task_specs(&self, thresholds: &ResourceThresholds) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec {
                id: t.def.id,
                direction: t.def.direction.clone(),
                train_size: t.def.train_size,
                class: thresholds.classify(t.def.train_size),
            })
            .collect()
    }

    /// Label combining direction and resource class, e.g. `en-xx/low`.
    pub fn group_label(&self, task: usize, thresholds: &ResourceThresholds) -> String {
        let t = &self.tasks[task];
        let class: ResourceClass = thresholds.classify(t.def.train_size);
        format!("{}/{}", t.def.direction, class)
    }

    /// Adds the task prefixes to one example.
    pub fn prefixed(task: usize, ex: &Example) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(ex.src.len() + 1);
        src.push(2 * task);
        src.extend_from_slice(&ex.src);
        let mut tgt = Vec::with_capacity(ex.tgt.len() + 1);
        tgt.push(2 * task + 1);
        tgt.extend_from_slice(&ex.tgt);
        (src, tgt)
    }

    pub fn batch_of(&self, items: &[(usize, &Example)]) -> Batch {
        let mut b = Batch::default();
        for &(task, ex) in items {
            let (s, t) = Self::prefixed(task, ex);
            b.push(s, t, task);
        }
        b
    }

    /// Writes the corpus as JSON lines: one header, then one line per example.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header { kind: "corpus".into(), config: self.config.clone(), tasks: self.tasks.iter().map(|t| t.def.clone()).collect() };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in &self.tasks {
            for (split, list) in [(Split::Train, &t.train), (Split::Valid, &t.valid)] {
                for ex in list {
                    let line = Line { kind: "example".into(), task: t.def.id, split, src: ex.src.clone(), tgt: ex.tgt.clone() };
                    serde_json::to_writer(&mut w, &line)?;
                    writeln!(w)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Format("empty corpus file".into()))?;
        let header: Header =
            serde_json::from_str(&first?).map_err(|e| Error::Format(format!("line 1: {e}")))?;
        if header.kind != "corpus" {
            return Err(Error::Format("line 1: expected a corpus header".into()));
        }
        let mut ids = HashSet::new();
        let mut tasks: Vec<TaskData> = Vec::new();
        for (i, def) in header.tasks.into_iter().enumerate() {
            if def.id != i || !ids.insert(def.id) {
                return Err(Error::Format(format!("task ids must be 0..n in order, found {}", def.id)));
            }
            tasks.push(TaskData { def, train: Vec::new(), valid: Vec::new() });
        }
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            let task = tasks
                .get_mut(l.task)
                .ok_or_else(|| Error::Format(format!("line {}: unknown task {}", n + 1, l.task)))?;
            let ex = Example { src: l.src, tgt: l.tgt };
            match l.split {
                Split::Train => task.train.push(ex),
                Split::Valid => task.valid.push(ex),
            }
        }
        Ok(Self { config: header.config, tasks })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "type")]
    kind: String,
    config: CorpusConfig,
    tasks: Vec<SyntheticTaskDef>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(rename = "type")]
    kind: String,
    task: usize,
    split: Split,
    src: Vec<usize>,
    tgt: Vec<usize>,
}

/// Per-task sampling weights `|D_t|^(1/temperature)` over the active set.
pub fn task_weights(corpus: &Corpus, active: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if active.is_empty() {
        return Err(invalid("no active tasks to sample from"));
    }
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    active
        .iter()
        .map(|&t| {
            let n = corpus.task(t)?.train.len();
            Ok(if temperature.is_infinite() { 1.0 } else { (n as f64).powf(1.0 / temperature) })
        })
        .collect()
}

/// Draws examples until the batch holds at least `batch_tokens` tokens
/// (prefixes included). Each example picks its task independently.
pub fn sample_batch(
    corpus: &Corpus,
    active: &[usize],
    batch_tokens: usize,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<Batch> {
    let weights = task_weights(corpus, active, temperature)?;
    let total: f64 = weights.iter().sum();
    let mut batch = Batch::default();
    let mut tokens = 0;
    while tokens < batch_tokens.max(1) {
        let task = pick(active, &weights, total, rng);
        let train = &corpus.tasks[task].train;
        if train.is_empty() {
            return Err(invalid(format!("task {task} has no training examples")));
        }
        let ex = &train[rng.gen_range(0..train.len())];
        let (s, t) = Corpus::prefixed(task, ex);
        tokens += s.len() + t.len();
        batch.push(s, t, task);
    }
    Ok(batch)
}

fn pick(active: &[usize], weights: &[f64], total: f64, rng: &mut dyn RngCore) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (&t, &w) in active.iter().zip(weights) {
        if u < w {
            return t;
        }
        u -= w;
    }
    *active.last().expect("non-empty active set")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        CorpusConfig { train_sizes: vec![30, 20], valid_size: 10, vocab_size: 20, ..Default::default() }
    }

    #[test]
    fn identity_without_reversal_is_copy() {
        let cfg = CorpusConfig { identity: true, alternate_reversal: false, ..tiny() };
        let c = generate_corpus(&cfg).unwrap();
        for t in &c.tasks {
            assert!(t.train.iter().all(|e| e.src == e.tgt));
        }
    }

    #[test]
    fn reversal_maps_last_token_first() {
        let c = generate_corpus(&tiny()).unwrap();
        let def = &c.tasks[1].def;
        assert!(def.reverse);
        let off = 4;
        let src = [off, off + 1, off + 2];
        let want: Vec<usize> = [2, 1, 0].iter().map(|&i| def.permutation[i] + off).collect();
        assert_eq!(translate(def, &src, false, off), want);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let c = generate_corpus(&tiny()).unwrap();
        for t in &c.tasks {
            assert_eq!(t.train.len(), t.def.train_size);
            assert_eq!(t.valid.len(), 10);
            let train: HashSet<_> = t.train.iter().map(|e| &e.src).collect();
            assert!(t.valid.iter().all(|e| !train.contains(&e.src)));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_corpus(&CorpusConfig { vocab_size: 8, ..tiny() }).is_err());
        assert!(generate_corpus(&CorpusConfig { noise: 1.0, ..tiny() }).is_err());
        let cramped = CorpusConfig { train_sizes: vec![5000], vocab_size: 16, min_len: 1, max_len: 1, ..tiny() };
        assert!(generate_corpus(&cramped).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_corpus(&tiny()).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let back = Corpus::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(Corpus::read_jsonl(&b"{\"type\":\"nope\"}\n"[..]).is_err());
    }
}
