//! Curriculum planning: tasks are grouped into bins, and bin `b_i` joins
//! training at step `U − k_i`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceClass {
    High,
    Low,
    VeryLow,
}

impl fmt::Display for ResourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceClass::High => "high",
            ResourceClass::Low => "low",
            ResourceClass::VeryLow => "very_low",
        })
    }
}

/// Example-count boundaries of the resource classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceThresholds {
    /// Tasks with fewer examples are low-resource.
    pub low_below: usize,
    /// Tasks with fewer examples are very-low-resource.
    pub very_low_below: usize,
}

impl Default for ResourceThresholds {
    fn default() -> Self {
        Self { low_below: 1_000_000, very_low_below: 100_000 }
    }
}

impl ResourceThresholds {
    /// Boundaries for the desk-scale corpora (sizes from hundreds to tens of thousands).
    pub fn desk() -> Self {
        Self { low_below: 20_000, very_low_below: 1_000 }
    }

    pub fn classify(&self, size: usize) -> ResourceClass {
        if size < self.very_low_below {
            ResourceClass::VeryLow
        } else if size < self.low_below {
            ResourceClass::Low
        } else {
            ResourceClass::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub direction: String,
    pub train_size: usize,
    pub class: ResourceClass,
}

/// Per-task `(step, validation perplexity)` samples with increasing steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationHistory {
    tasks: BTreeMap<usize, Vec<(u64, f64)>>,
}

impl ValidationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, task: usize, step: u64, ppl: f64) -> Result<()> {
        let h = self.tasks.entry(task).or_default();
        if let Some(&(last, _)) = h.last() {
            if step <= last {
                return Err(invalid(format!("task {task}: step {step} does not follow {last}")));
            }
        }
        h.push((step, ppl));
        Ok(())
    }

    pub fn get(&self, task: usize) -> Option<&[(u64, f64)]> {
        self.tasks.get(&task).map(Vec::as_slice)
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    /// Reads the `split == valid` rows of a training log CSV.
    pub fn from_log_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("log is missing the `{name}` column")))
        };
        let (c_step, c_task, c_split, c_ppl) = (col("step")?, col("task")?, col("split")?, col("ppl")?);
        let mut h = Self::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            if &rec[c_split] != "valid" {
                continue;
            }
            let parse_err = |what: &str| Error::Format(format!("log row {}: bad {what}", i + 2));
            let step: u64 = rec[c_step].parse().map_err(|_| parse_err("step"))?;
            let task: usize = rec[c_task].parse().map_err(|_| parse_err("task"))?;
            let ppl: f64 = rec[c_ppl].parse().map_err(|_| parse_err("ppl"))?;
            h.push(task, step, ppl)?;
        }
        Ok(h)
    }
}

/// Step with the lowest perplexity; the latest such step on ties.
pub fn detect_s_best(history: &[(u64, f64)]) -> Result<u64> {
    let mut best: Option<(u64, f64)> = None;
    for &(step, ppl) in history {
        match best {
            Some((_, b)) if ppl > b => {}
            _ => best = Some((step, ppl)),
        }
    }
    best.map(|(s, _)| s).ok_or_else(|| invalid("empty validation history"))
}

/// `s_best` for every task of `history`.
pub fn s_best_map(history: &ValidationHistory) -> Result<BTreeMap<usize, u64>> {
    history
        .tasks
        .iter()
        .map(|(&t, h)| Ok((t, detect_s_best(h)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumBin {
    /// Characteristic step: the bin joins at `total_updates − k`.
    pub k: u64,
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub total_updates: u64,
    pub bins: Vec<CurriculumBin>,
}

impl CurriculumPlan {
    /// Every task active from step 0.
    pub fn single_bin(tasks: impl IntoIterator<Item = usize>, total_updates: u64) -> Self {
        Self {
            total_updates,
            bins: vec![CurriculumBin { k: total_updates, tasks: tasks.into_iter().collect() }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for b in &self.bins {
            if b.k > self.total_updates {
                return Err(invalid(format!("bin k={} exceeds total updates {}", b.k, self.total_updates)));
            }
            for &t in &b.tasks {
                if !seen.insert(t) {
                    return Err(invalid(format!("task {t} appears in more than one bin")));
                }
            }
        }
        Ok(())
    }

    pub fn all_tasks(&self) -> BTreeSet<usize> {
        self.bins.iter().flat_map(|b| b.tasks.iter().copied()).collect()
    }

    /// Index of the bin holding `task`.
    pub fn bin_of(&self, task: usize) -> Option<usize> {
        self.bins.iter().position(|b| b.tasks.contains(&task))
    }

    /// Scales every characteristic step to a run of `total_updates`.
    pub fn rescaled(&self, total_updates: u64) -> Self {
        let f = total_updates as f64 / self.total_updates.max(1) as f64;
        Self {
            total_updates,
            bins: self
                .bins
                .iter()
                .map(|b| CurriculumBin { k: ((b.k as f64 * f).round() as u64).min(total_updates), tasks: b.tasks.clone() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Union of the bins introduced at or before `step` (inclusive boundary).
pub fn active_tasks(plan: &CurriculumPlan, step: u64) -> BTreeSet<usize> {
    plan.bins
        .iter()
        .filter(|b| plan.total_updates.saturating_sub(b.k) <= step)
        .flat_map(|b| b.tasks.iter().copied())
        .collect()
}

/// Step-based partitioning: `n` bins with characteristic steps evenly
/// spaced from `s_max` down to `s_min`; every task joins the bin whose
/// step is closest to its `s_best`, the earlier bin winning ties.
/// `n = 1` yields a single bin active from step 0.
pub fn partition_step_based(s_best: &BTreeMap<usize, u64>, n: usize, total_updates: u64) -> Result<CurriculumPlan> {
    if s_best.is_empty() {
        return Err(invalid("no tasks to partition"));
    }
    if n == 0 {
        return Err(invalid("need at least one bin"));
    }
    if n == 1 {
        return Ok(CurriculumPlan::single_bin(s_best.keys().copied(), total_updates));
    }
    let s_max = *s_best.values().max().expect("non-empty");
    let s_min = *s_best.values().min().expect("non-empty");
    if s_max == s_min {
        return Err(invalid(format!(
            "every task has s_best = {s_max}; use a single bin (n = 1) instead"
        )));
    }
    if s_max > total_updates {
        return Err(invalid(format!("s_best {s_max} exceeds total updates {total_updates}")));
    }
    // Distances are compared scaled by (n − 1) so ties are detected exactly.
    let m = (n - 1) as i128;
    let span = (s_max - s_min) as i128;
    let scaled_k = |i: usize| s_max as i128 * m - i as i128 * span;
    let mut bins: Vec<CurriculumBin> = (0..n)
        .map(|i| CurriculumBin { k: (scaled_k(i) as f64 / m as f64).round() as u64, tasks: Vec::new() })
        .collect();
    for (&task, &s) in s_best {
        let dist = |i: usize| (s as i128 * m - scaled_k(i)).abs();
        let mut best = 0;
        for i in 1..n {
            if dist(i) < dist(best) {
                best = i;
            }
        }
        bins[best].tasks.push(task);
    }
    Ok(CurriculumPlan { total_updates, bins })
}

/// Merges the listed 1-based bins, which must be `1..=m`. The merged bin
/// keeps the largest characteristic step.
pub fn merge_bins(plan: &CurriculumPlan, indices: &[usize]) -> Result<CurriculumPlan> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let m = sorted.len();
    if m == 0 || sorted != (1..=m).collect::<Vec<_>>() || m > plan.bins.len() {
        return Err(invalid(format!("merge indices {indices:?} must be contiguous from 1 within {} bins", plan.bins.len())));
    }
    let head = &plan.bins[..m];
    let mut tasks: Vec<usize> = head.iter().flat_map(|b| b.tasks.iter().copied()).collect();
    tasks.sort_unstable();
    let merged = CurriculumBin { k: head.iter().map(|b| b.k).max().expect("non-empty"), tasks };
    let mut bins = vec![merged];
    bins.extend_from_slice(&plan.bins[m..]);
    Ok(CurriculumPlan { total_updates: plan.total_updates, bins })
}

/// Count-based partitioning: bin `i` holds tasks with
/// `|D_t| ≥ thresholds[i]` not claimed by an earlier bin; the last bin
/// takes the rest. Needs `steps.len() == thresholds.len() + 1`.
pub fn partition_count_based(
    tasks: &[TaskSpec],
    thresholds: &[usize],
    steps: &[u64],
    total_updates: u64,
) -> Result<CurriculumPlan> {
    if thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(invalid("count thresholds must be strictly decreasing"));
    }
    if steps.len() != thresholds.len() + 1 {
        return Err(invalid(format!(
            "{} thresholds need {} characteristic steps, got {}",
            thresholds.len(),
            thresholds.len() + 1,
            steps.len()
        )));
    }
    let mut bins: Vec<CurriculumBin> = steps.iter().map(|&k| CurriculumBin { k, tasks: Vec::new() }).collect();
    for t in tasks {
        let i = thresholds.iter().position(|&th| t.train_size >= th).unwrap_or(thresholds.len());
        bins[i].tasks.push(t.id);
    }
    let plan = CurriculumPlan { total_updates, bins };
    plan.validate()?;
    Ok(plan)
}

/// Thresholds of the count-based schedule at full scale.
pub const FULL_SCALE_COUNT_THRESHOLDS: [usize; 2] = [5_000_000, 800_000];
/// Characteristic steps of the count-based schedule at full scale.
pub const FULL_SCALE_COUNT_STEPS: [u64; 3] = [100_000, 40_000, 20_000];
