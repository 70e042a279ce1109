//! Routing analyses over frozen models: expert-usage histograms, E50,
//! cross-layer co-location, usage similarity and the random-routing probe.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, LayerId, Model, Stack};
use crate::ndcore::Tape;
use crate::routing::{Phase, RoutingPolicy};
use crate::trainer::{evaluate_with, EvalOptions};

/// How a token's use of an expert is quantified in usage matrices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageWeighting {
    /// 1 for the token's top-1 expert, 0 elsewhere.
    #[default]
    Top1,
    /// The sparse gate weight of every selected expert.
    GateWeighted,
}

/// Top-1 token counts of one group in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUsage {
    pub layer: LayerId,
    pub group: String,
    pub counts: Vec<usize>,
}

impl ExpertUsage {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Per-token expert usage `u_{ti}` of one layer, row-major `tokens × experts`.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageMatrix {
    pub layer: LayerId,
    pub experts: usize,
    pub values: Vec<f64>,
}

impl UsageMatrix {
    pub fn tokens(&self) -> usize {
        self.values.len() / self.experts.max(1)
    }

    pub fn column(&self, e: usize) -> Vec<f64> {
        self.values.iter().skip(e).step_by(self.experts).copied().collect()
    }
}

/// Routing statistics of a model over a set of tasks.
#[derive(Debug, Clone, Default)]
pub struct UsageReport {
    /// One entry per (MoE layer, task); the group is the task id.
    pub usages: Vec<ExpertUsage>,
    pub matrices: BTreeMap<LayerId, UsageMatrix>,
    /// Set when the model has no MoE layers.
    pub notice: Option<String>,
}

const CHUNK: usize = 64;

/// What [`collect_usage`] reads and how it routes.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageOptions {
    pub split: Split,
    pub weighting: UsageWeighting,
    pub policy: RoutingPolicy,
}

impl Default for UsageOptions {
    fn default() -> Self {
        Self { split: Split::Valid, weighting: UsageWeighting::Top1, policy: RoutingPolicy::TopK }
    }
}

/// Captures teacher-forced routing of the examples of `tasks`.
/// Encoder layers see source tokens, decoder layers target-side tokens.
pub fn collect_usage(model: &Model, corpus: &Corpus, tasks: &[usize], opts: &UsageOptions) -> Result<UsageReport> {
    let layers = model.moe_layers();
    if layers.is_empty() {
        return Ok(UsageReport { notice: Some("model has no MoE layers; nothing to analyze".into()), ..Default::default() });
    }
    let mut counts: BTreeMap<(LayerId, usize), Vec<usize>> = BTreeMap::new();
    let mut matrices: BTreeMap<LayerId, UsageMatrix> = layers
        .iter()
        .map(|(id, m)| (*id, UsageMatrix { layer: *id, experts: m.config.num_experts, values: Vec::new() }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &task in tasks {
        let examples = corpus.examples(task, opts.split)?;
        for chunk in examples.chunks(CHUNK) {
            let items: Vec<_> = chunk.iter().map(|e| (task, e)).collect();
            let batch = corpus.batch_of(&items);
            let mut tape = Tape::new();
            let fopts = ForwardOptions { phase: Phase::Eval, policy: opts.policy.clone() };
            let out = model.forward(&mut tape, &batch, &fopts, &mut rng)?;
            for r in &out.routing {
                let e = r.decision.num_experts;
                let c = counts.entry((r.layer, task)).or_insert_with(|| vec![0; e]);
                let m = matrices.get_mut(&r.layer).expect("layer registered above");
                for t in 0..r.decision.num_tokens() {
                    let top = r.decision.top1(t);
                    c[top] += 1;
                    let mut row = vec![0.0; e];
                    match opts.weighting {
                        UsageWeighting::Top1 => row[top] = 1.0,
                        UsageWeighting::GateWeighted => {
                            for s in r.decision.tokens[t].iter().filter(|s| s.is_active()) {
                                row[s.expert] = s.weight;
                            }
                        }
                    }
                    m.values.extend_from_slice(&row);
                }
            }
        }
    }
    let usages = counts
        .into_iter()
        .map(|((layer, task), counts)| ExpertUsage { layer, group: task.to_string(), counts })
        .collect();
    Ok(UsageReport { usages, matrices, notice: None })
}

/// Sums per-task usages into groups; `label(task)` names each task's group.
pub fn group_usage(usages: &[ExpertUsage], label: impl Fn(usize) -> String) -> Result<Vec<ExpertUsage>> {
    let mut out: BTreeMap<(LayerId, String), Vec<usize>> = BTreeMap::new();
    for u in usages {
        let task: usize = u.group.parse().map_err(|_| invalid(format!("group `{}` is not a task id", u.group)))?;
        let acc = out.entry((u.layer, label(task))).or_insert_with(|| vec![0; u.counts.len()]);
        for (a, c) in acc.iter_mut().zip(&u.counts) {
            *a += c;
        }
    }
    Ok(out.into_iter().map(|((layer, group), counts)| ExpertUsage { layer, group, counts }).collect())
}

/// Fewest experts whose usage fractions together reach one half.
pub fn e50(fractions: &[f64]) -> Result<usize> {
    if fractions.is_empty() {
        return Err(invalid("e50 of an empty histogram"));
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    for (i, f) in sorted.iter().enumerate() {
        acc += f;
        // Tolerate rounding in fractions that should sum exactly to 0.5.
        if acc >= 0.5 - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Largest Pearson correlation over expert pairs between two layers'
/// usage on the same tokens. Constant columns are skipped.
pub fn colocation(a: &UsageMatrix, b: &UsageMatrix) -> Result<f64> {
    if a.tokens() != b.tokens() {
        return Err(invalid(format!("usage matrices cover {} and {} tokens", a.tokens(), b.tokens())));
    }
    if a.tokens() < 2 {
        return Err(invalid("co-location needs at least two tokens"));
    }
    let ca: Vec<Vec<f64>> = (0..a.experts).map(|e| a.column(e)).collect();
    let cb: Vec<Vec<f64>> = (0..b.experts).map(|e| b.column(e)).collect();
    let mut best: Option<f64> = None;
    for x in &ca {
        for y in &cb {
            if let Some(r) = pearson(x, y) {
                best = Some(best.map_or(r, |b: f64| b.max(r)));
            }
        }
    }
    best.ok_or_else(|| invalid("every usage column is constant"))
}

/// Co-location of consecutive MoE layers within each stack.
pub fn colocation_table(report: &UsageReport) -> Result<Vec<(LayerId, LayerId, f64)>> {
    let layers: Vec<&UsageMatrix> = report.matrices.values().collect();
    let mut out = Vec::new();
    for w in layers.windows(2) {
        if w[0].layer.stack == w[1].layer.stack {
            out.push((w[0].layer, w[1].layer, colocation(w[0], w[1])?));
        }
    }
    Ok(out)
}

/// Pairwise cosine similarity; `None` where either vector is zero.
pub fn similarity_matrix(vectors: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>> {
    if vectors.len() < 2 {
        return Err(invalid("similarity needs at least two groups"));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(invalid("usage vectors differ in length"));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = vectors.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let s = if i == j {
                1.0
            } else {
                let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            m[i][j] = Some(s);
            m[j][i] = Some(s);
        }
    }
    Ok(m)
}

/// Usage vector per group: the concatenated usage fractions over the MoE
/// layers of `stack`, groups in sorted order.
pub fn group_vectors(usages: &[ExpertUsage], stack: Stack) -> Vec<(String, Vec<f64>)> {
    let mut by_group: BTreeMap<&str, Vec<(LayerId, Vec<f64>)>> = BTreeMap::new();
    for u in usages.iter().filter(|u| u.layer.stack == stack) {
        by_group.entry(u.group.as_str()).or_default().push((u.layer, u.fractions()));
    }
    by_group
        .into_iter()
        .map(|(g, mut layers)| {
            layers.sort_by_key(|(l, _)| *l);
            (g.to_string(), layers.into_iter().flat_map(|(_, f)| f).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRoutingRow {
    pub task: usize,
    pub ppl_topk: f64,
    /// Mean over seeds.
    pub ppl_random: f64,
    /// `(ppl_random − ppl_topk) / ppl_topk`.
    pub rel_degradation: f64,
}

/// Perplexity under `k` uniformly random experts per token (weighted by
/// their gate probabilities) against standard top-k routing, averaged
/// over the routing `seeds`.
pub fn random_routing_eval(
    model: &Model,
    corpus: &Corpus,
    tasks: &[usize],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<RandomRoutingRow>> {
    if model.num_moe_layers() == 0 {
        return Err(invalid("random routing needs an MoE model"));
    }
    if seeds.is_empty() {
        return Err(invalid("need at least one routing seed"));
    }
    let base = EvalOptions { threads, ..Default::default() };
    let topk = evaluate_with(model, corpus, tasks, &base)?;
    let mut sums: BTreeMap<usize, f64> = tasks.iter().map(|&t| (t, 0.0)).collect();
    for &seed in seeds {
        let opts = EvalOptions { policy: RoutingPolicy::Random, seed, ..base.clone() };
        for (t, p) in evaluate_with(model, corpus, tasks, &opts)? {
            *sums.get_mut(&t).expect("task evaluated") += p;
        }
    }
    Ok(tasks
        .iter()
        .map(|&t| {
            let r = sums[&t] / seeds.len() as f64;
            RandomRoutingRow { task: t, ppl_topk: topk[&t], ppl_random: r, rel_degradation: (r - topk[&t]) / topk[&t] }
        })
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_usage_csv<W: Write>(w: W, usages: &[ExpertUsage]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "group", "expert", "count"]).map_err(csv_err)?;
    for u in usages {
        for (e, c) in u.counts.iter().enumerate() {
            wr.write_record([u.layer.to_string(), u.group.clone(), e.to_string(), c.to_string()]).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_e50_csv<W: Write>(w: W, usages: &[ExpertUsage]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "group", "e50"]).map_err(csv_err)?;
    for u in usages {
        let v = e50(&u.fractions())?;
        wr.write_record([u.layer.to_string(), u.group.clone(), v.to_string()]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_coloc_csv<W: Write>(w: W, rows: &[(LayerId, LayerId, f64)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["layer", "next_layer", "colocation"]).map_err(csv_err)?;
    for (a, b, c) in rows {
        wr.write_record([a.to_string(), b.to_string(), c.to_string()]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Long-format similarity matrix; undefined entries are left empty.
pub fn write_similarity_csv<W: Write>(w: W, side: &str, labels: &[String], m: &[Vec<Option<f64>>]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["side", "group_a", "group_b", "cosine"]).map_err(csv_err)?;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let v = v.map(|x| x.to_string()).unwrap_or_default();
            wr.write_record([side, &labels[i], &labels[j], &v]).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_random_csv<W: Write>(w: W, rows: &[RandomRoutingRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        wr.write_record(["task", "ppl_topk", "ppl_random", "rel_degradation"]).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e50_examples() {
        assert_eq!(e50(&[0.5, 0.3, 0.2]).unwrap(), 1);
        assert_eq!(e50(&[0.4, 0.3, 0.3]).unwrap(), 2);
        assert_eq!(e50(&[1.0 / 64.0; 64]).unwrap(), 32);
        assert!(e50(&[]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = vec![0.5, 0.5, 0.0, 0.0];
        let b = vec![0.5, 0.0, 0.5, 0.0];
        let c = vec![0.0, 0.0, 0.0, 1.0];
        let z = vec![0.0; 4];
        let m = similarity_matrix(&[a, b, c, z]).unwrap();
        assert_eq!(m[0][0], Some(1.0));
        assert!((m[0][1].unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m[0][2], Some(0.0));
        assert_eq!(m[3][0], None);
        assert_eq!(m[3][3], None);
    }

    #[test]
    fn colocation_constructions() {
        let id = LayerId { stack: Stack::Encoder, index: 1 };
        let next = LayerId { stack: Stack::Encoder, index: 3 };
        let assign = [0usize, 1, 2, 3, 0, 1, 2, 3, 0, 2];
        let onehot = |layer, map: &dyn Fn(usize) -> usize| UsageMatrix {
            layer,
            experts: 4,
            values: assign.iter().flat_map(|&a| (0..4).map(move |e| if e == map(a) { 1.0 } else { 0.0 })).collect(),
        };
        let a = onehot(id, &|e| e);
        assert!((colocation(&a, &onehot(next, &|e| e)).unwrap() - 1.0).abs() < 1e-12);
        let swapped = onehot(next, &|e| [3, 1, 2, 0][e]);
        assert!((colocation(&a, &swapped).unwrap() - 1.0).abs() < 1e-12);
        let short = UsageMatrix { layer: next, experts: 4, values: vec![1.0, 0.0, 0.0, 0.0] };
        assert!(colocation(&short, &short).is_err());
    }
}
