//! The MoE sublayer: softmax gating, top-k selection, capacity enforcement,
//! sparse dispatch/combine, the load-balancing loss and the EOM / FOM /
//! gating-dropout regularizers.
//!
//! Gate weights are the raw softmax probabilities of the selected experts;
//! nothing is renormalized after top-k. Masked or capacity-dropped
//! selections contribute nothing to the output, while the residual path
//! around the sublayer still carries the token.

use std::io::Write;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Gating hyper-parameters for one MoE sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub num_experts: usize,
    pub k: usize,
    /// Training capacity is `ceil(capacity_factor · T / E)`; evaluation uses `T`.
    pub capacity_factor: f64,
    pub lambda_moe: f64,
    pub p_eom: f64,
    pub p_fom: f64,
    pub p_gd: f64,
    pub num_virtual_devices: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            k: 2,
            capacity_factor: 2.0,
            lambda_moe: 0.01,
            p_eom: 0.0,
            p_fom: 0.0,
            p_gd: 0.0,
            num_virtual_devices: 1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(invalid("num_experts must be positive"));
        }
        if !(1..=2).contains(&self.k) || self.k > self.num_experts {
            return Err(invalid(format!(
                "k must be 1 or 2 and at most num_experts ({}), got {}",
                self.num_experts, self.k
            )));
        }
        if !(self.capacity_factor > 0.0) {
            return Err(invalid("capacity_factor must be positive"));
        }
        for (name, p) in [("p_eom", self.p_eom), ("p_fom", self.p_fom), ("p_gd", self.p_gd)] {
            check_fraction(name, p)?;
        }
        let active = [self.p_eom, self.p_fom, self.p_gd].iter().filter(|p| **p > 0.0).count();
        if active > 1 {
            return Err(invalid("at most one of p_eom, p_fom, p_gd may be nonzero"));
        }
        if self.num_virtual_devices == 0 || self.num_experts % self.num_virtual_devices != 0 {
            return Err(invalid(format!(
                "num_virtual_devices ({}) must divide num_experts ({})",
                self.num_virtual_devices, self.num_experts
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_fraction(name: &str, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("{name} must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// One expert chosen for a token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub expert: usize,
    pub weight: f64,
    pub dropped_by_capacity: bool,
    pub masked_by_eom: bool,
}

impl Selection {
    pub fn is_active(&self) -> bool {
        !self.dropped_by_capacity && !self.masked_by_eom
    }
}

/// Per-token expert assignments for one pass through an MoE sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    pub k: usize,
    /// Selections per token, in descending gate order.
    pub tokens: Vec<Vec<Selection>>,
    /// Full softmax rows, `T×E`, untouched by masking.
    pub probs: Vec<f64>,
}

impl RoutingDecision {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Highest-ranked expert of token `t`, ignoring capacity and masking.
    pub fn top1(&self, t: usize) -> usize {
        self.tokens[t][0].expert
    }

    pub fn prob_row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.num_experts..(t + 1) * self.num_experts]
    }

    /// Surviving selections per expert as `(token, expert)` pairs.
    pub fn active_by_expert(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_experts];
        for (t, sels) in self.tokens.iter().enumerate() {
            for s in sels.iter().filter(|s| s.is_active()) {
                by[s.expert].push(t);
            }
        }
        by
    }

    pub fn active_count(&self, t: usize) -> usize {
        self.tokens[t].iter().filter(|s| s.is_active()).count()
    }

    /// Dense `T×E` gate matrix with inactive selections zeroed.
    pub fn sparse_gates(&self) -> Vec<f64> {
        let e = self.num_experts;
        let mut g = vec![0.0; self.tokens.len() * e];
        for (t, sels) in self.tokens.iter().enumerate() {
            for s in sels.iter().filter(|s| s.is_active()) {
                g[t * e + s.expert] = s.weight;
            }
        }
        g
    }

    /// Writes one JSON object per token.
    pub fn write_jsonl<W: Write>(&self, mut w: W, layer: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            layer: &'a str,
            token: usize,
            experts: Vec<usize>,
            weights: Vec<f64>,
            dropped_by_capacity: Vec<bool>,
            masked_by_eom: Vec<bool>,
        }
        for (t, sels) in self.tokens.iter().enumerate() {
            let line = Line {
                layer,
                token: t,
                experts: sels.iter().map(|s| s.expert).collect(),
                weights: sels.iter().map(|s| s.weight).collect(),
                dropped_by_capacity: sels.iter().map(|s| s.dropped_by_capacity).collect(),
                masked_by_eom: sels.iter().map(|s| s.masked_by_eom).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `softmax(x · W_g)`, one probability row per token.
pub fn gate_forward(tape: &mut Tape, x: Var, w_g: Var) -> Result<Var> {
    let logits = tape.matmul(x, w_g)?;
    Ok(tape.softmax(logits))
}

fn decision_from(probs: &[f64], num_experts: usize, k: usize, picks: Vec<Vec<usize>>) -> RoutingDecision {
    let tokens = picks
        .into_iter()
        .enumerate()
        .map(|(t, experts)| {
            experts
                .into_iter()
                .map(|e| Selection {
                    expert: e,
                    weight: probs[t * num_experts + e],
                    dropped_by_capacity: false,
                    masked_by_eom: false,
                })
                .collect()
        })
        .collect();
    RoutingDecision {
        num_experts,
        k,
        tokens,
        probs: probs.to_vec(),
    }
}

/// Keeps the `k` largest probabilities per row; ties go to the lower expert index.
pub fn top_k_select(probs: &[f64], num_experts: usize, k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > num_experts {
        return Err(invalid(format!("top-k needs 1 <= k <= E, got k={k}, E={num_experts}")));
    }
    if probs.len() % num_experts != 0 {
        return Err(invalid("probability matrix is not T×E"));
    }
    let picks = probs
        .chunks(num_experts)
        .map(|row| {
            let mut order: Vec<usize> = (0..num_experts).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        })
        .collect();
    Ok(decision_from(probs, num_experts, k, picks))
}

/// `k` experts per token drawn uniformly without replacement; their weights
/// are still the softmax probabilities.
pub fn random_select(probs: &[f64], num_experts: usize, k: usize, rng: &mut dyn RngCore) -> Result<RoutingDecision> {
    if k == 0 || k > num_experts {
        return Err(invalid(format!("random routing needs 1 <= k <= E, got k={k}, E={num_experts}")));
    }
    let picks = probs
        .chunks(num_experts)
        .map(|_| rand::seq::index::sample(rng, num_experts, k).into_vec())
        .collect();
    Ok(decision_from(probs, num_experts, k, picks))
}

/// Routes token `t` to `experts[t]` alone.
pub fn forced_select(probs: &[f64], num_experts: usize, experts: &[usize]) -> Result<RoutingDecision> {
    if experts.len() * num_experts != probs.len() {
        return Err(invalid("one forced expert per token is required"));
    }
    if let Some(bad) = experts.iter().find(|&&e| e >= num_experts) {
        return Err(invalid(format!("forced expert {bad} out of range")));
    }
    let picks = experts.iter().map(|&e| vec![e]).collect();
    Ok(decision_from(probs, num_experts, 1, picks))
}

/// Expert capacity policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Capacity {
    /// `ceil(factor · T / E)` selections per expert.
    Factor(f64),
    /// `T` selections per expert; nothing is ever dropped.
    Unbounded,
}

impl Capacity {
    pub fn per_expert(self, tokens: usize, experts: usize) -> usize {
        match self {
            Capacity::Factor(f) => (f * tokens as f64 / experts as f64).ceil() as usize,
            Capacity::Unbounded => tokens,
        }
    }
}

/// Flags selections beyond each expert's capacity. First choices of all
/// tokens are admitted in batch order before any second choice.
pub fn apply_capacity(decision: &mut RoutingDecision, capacity: Capacity) {
    let cap = capacity.per_expert(decision.num_tokens(), decision.num_experts);
    let mut load = vec![0usize; decision.num_experts];
    let max_rank = decision.tokens.iter().map(Vec::len).max().unwrap_or(0);
    for rank in 0..max_rank {
        for sels in decision.tokens.iter_mut() {
            if let Some(s) = sels.get_mut(rank) {
                if load[s.expert] < cap {
                    load[s.expert] += 1;
                } else {
                    s.dropped_by_capacity = true;
                }
            }
        }
    }
}

/// Masks each (token, selection) pair independently with probability `p`.
pub fn eom_mask(decision: &mut RoutingDecision, p: f64, rng: &mut dyn RngCore) -> Result<()> {
    check_fraction("p_eom", p)?;
    if p == 0.0 {
        return Ok(());
    }
    for sels in decision.tokens.iter_mut() {
        for s in sels.iter_mut() {
            if rng.gen::<f64>() < p {
                s.masked_by_eom = true;
            }
        }
    }
    Ok(())
}

/// Rows to zero for final-output masking; `p` may be 1 at this level.
pub fn fom_rows(tokens: usize, p: f64, rng: &mut dyn RngCore) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p_fom must lie in [0, 1], got {p}")));
    }
    if p == 0.0 {
        return Ok(vec![false; tokens]);
    }
    Ok((0..tokens).map(|_| rng.gen::<f64>() < p).collect())
}

/// Zeroes whole MoE-output rows for a random fraction `p` of tokens.
pub fn fom_mask(tape: &mut Tape, moe_out: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
    let t = tape.shape(moe_out).first().copied().unwrap_or(0);
    let rows = fom_rows(t, p, rng)?;
    if rows.iter().any(|m| *m) {
        tape.masked_zero(moe_out, &rows)
    } else {
        Ok(moe_out)
    }
}

/// Virtual device of token `t` out of `tokens`, by contiguous batch position.
pub fn token_device(t: usize, tokens: usize, devices: usize) -> usize {
    t * devices / tokens.max(1)
}

/// Restricts each flagged token's distribution to the experts of its own
/// virtual device and renormalizes over that group.
pub fn restrict_to_local(tape: &mut Tape, probs: Var, restrict: &[bool], devices: usize) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let [t, e] = shape[..] else {
        return Err(invalid("gating probabilities must be T×E"));
    };
    if devices == 0 || e % devices != 0 {
        return Err(invalid(format!("{devices} virtual devices do not divide {e} experts")));
    }
    if restrict.len() != t {
        return Err(invalid("one restriction flag per token is required"));
    }
    if devices == 1 || !restrict.iter().any(|r| *r) {
        return Ok(probs);
    }
    let group = e / devices;
    let mut keep = vec![false; t * e];
    for tok in 0..t {
        let dev = token_device(tok, t, devices);
        for j in dev * group..(dev + 1) * group {
            keep[tok * e + j] = true;
        }
    }
    tape.renormalize_rows(probs, &keep, restrict)
}

/// Gating dropout: with probability `p` a token may only use its local experts.
pub fn gating_dropout(tape: &mut Tape, probs: Var, p: f64, devices: usize, rng: &mut dyn RngCore) -> Result<Var> {
    check_fraction("p_gd", p)?;
    let t = tape.shape(probs).first().copied().unwrap_or(0);
    let e = tape.shape(probs).get(1).copied().unwrap_or(0);
    if devices == 0 || e % devices != 0 {
        return Err(invalid(format!("{devices} virtual devices do not divide {e} experts")));
    }
    if p == 0.0 || devices == 1 {
        return Ok(probs);
    }
    let restrict: Vec<bool> = (0..t).map(|_| rng.gen::<f64>() < p).collect();
    restrict_to_local(tape, probs, &restrict, devices)
}

/// `E · Σ_e f_e · p̄_e`: `f_e` is the share of tokens whose first choice is
/// `e` (before capacity or masking), `p̄_e` the mean gate probability.
/// Differentiable through `p̄` only.
pub fn load_balance_loss(tape: &mut Tape, probs: Var, decision: &RoutingDecision) -> Result<Var> {
    let e = decision.num_experts;
    let t = decision.num_tokens();
    let mut f = vec![0.0; e];
    for tok in 0..t {
        f[decision.top1(tok)] += 1.0;
    }
    f.iter_mut().for_each(|v| *v /= t.max(1) as f64);
    let mean_p = tape.mean_rows(probs)?;
    let f = tape.constant(Tensor::vector(f));
    let prod = tape.mul(mean_p, f)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, e as f64))
}

/// Parameter handles of a two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), Tensor::randn(&[d, hidden], (1.0 / d as f64).sqrt(), rng));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::randn(&[hidden, d], (1.0 / hidden as f64).sqrt(), rng));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        Self { w1, b1, w2, b2 }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }
}

/// `E` experts of identical shape and independent weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertBank {
    pub experts: Vec<FfnParams>,
}

impl ExpertBank {
    pub fn init(store: &mut ParamStore, prefix: &str, num: usize, d: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let experts = (0..num)
            .map(|e| FfnParams::init(store, &format!("{prefix}.expert{e}"), d, hidden, rng))
            .collect();
        Self { experts }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

/// `Σ_e G_{t,e} · FFN_e(x_t)` over surviving selections. Tokens without a
/// surviving selection get a zero row.
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    probs: Var,
    decision: &RoutingDecision,
    experts: &ExpertBank,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [t, d] = shape[..] else {
        return Err(invalid("MoE input must be T×d"));
    };
    if decision.num_tokens() != t || experts.len() != decision.num_experts {
        return Err(invalid(format!(
            "decision covers {} tokens / {} experts, input has {t} tokens and bank {} experts",
            decision.num_tokens(),
            decision.num_experts,
            experts.len()
        )));
    }
    let mut out: Option<Var> = None;
    for (e, toks) in decision.active_by_expert().into_iter().enumerate() {
        if toks.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &toks)?;
        let ye = experts.experts[e].forward(tape, store, xe)?;
        let pairs: Vec<(usize, usize)> = toks.iter().map(|&tok| (tok, e)).collect();
        let w = tape.gather_elems(probs, &pairs)?;
        let scaled = tape.scale_rows(ye, w)?;
        let placed = tape.index_add_rows(scaled, &toks, t)?;
        out = Some(match out {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    Ok(match out {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(&[t, d])),
    })
}

/// Whether the sublayer runs with training-time noise and capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// How experts are picked from the gate distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum RoutingPolicy {
    TopK,
    /// `k` uniformly random experts per token, weighted by their gate probabilities.
    Random,
    /// Every token of task `i` goes to expert `experts[i]` (test double).
    ForcedByTask(Vec<usize>),
}

/// Everything an MoE sublayer returns besides its output.
#[derive(Debug)]
pub struct MoeOutput {
    pub out: Var,
    pub probs: Var,
    pub decision: RoutingDecision,
    pub balance_loss: Var,
}

/// Gate plus expert bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeSublayer {
    pub gate: ParamId,
    pub experts: ExpertBank,
    pub config: GateConfig,
}

impl MoeSublayer {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, config: GateConfig, rng: &mut dyn RngCore) -> Self {
        let gate = store.add(
            format!("{prefix}.gate"),
            Tensor::randn(&[d, config.num_experts], (1.0 / d as f64).sqrt(), rng),
        );
        let experts = ExpertBank::init(store, prefix, config.num_experts, d, hidden, rng);
        Self { gate, experts, config }
    }

    /// Routes the normalized input `x` and combines expert outputs. FOM is
    /// applied here as well, so `out` is the sublayer's residual branch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        phase: Phase,
        policy: &RoutingPolicy,
        token_tasks: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<MoeOutput> {
        let cfg = &self.config;
        let e = cfg.num_experts;
        let t = tape.shape(x)[0];
        let wg = tape.param(store, self.gate);
        let mut probs = gate_forward(tape, x, wg)?;
        if phase == Phase::Train && cfg.p_gd > 0.0 {
            probs = gating_dropout(tape, probs, cfg.p_gd, cfg.num_virtual_devices, rng)?;
        }
        let pv = tape.data(probs).to_vec();
        let mut decision = match policy {
            RoutingPolicy::TopK => top_k_select(&pv, e, cfg.k)?,
            RoutingPolicy::Random => random_select(&pv, e, cfg.k, rng)?,
            RoutingPolicy::ForcedByTask(map) => {
                if token_tasks.len() != t {
                    return Err(invalid("forced routing needs one task id per token"));
                }
                let experts: Vec<usize> = token_tasks
                    .iter()
                    .map(|&task| map.get(task).copied().ok_or_else(|| invalid(format!("no forced expert for task {task}"))))
                    .collect::<Result<_>>()?;
                forced_select(&pv, e, &experts)?
            }
        };
        let balance_loss = load_balance_loss(tape, probs, &decision)?;
        match phase {
            Phase::Train => {
                apply_capacity(&mut decision, Capacity::Factor(cfg.capacity_factor));
                eom_mask(&mut decision, cfg.p_eom, rng)?;
            }
            Phase::Eval => apply_capacity(&mut decision, Capacity::Unbounded),
        }
        let mut out = moe_forward(tape, store, x, probs, &decision, &self.experts)?;
        if phase == Phase::Train && cfg.p_fom > 0.0 {
            out = fom_mask(tape, out, cfg.p_fom, rng)?;
        }
        Ok(MoeOutput { out, probs, decision, balance_loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decision_all_to(expert: usize, t: usize, e: usize) -> RoutingDecision {
        let mut probs = vec![0.0; t * e];
        for tok in 0..t {
            for j in 0..e {
                probs[tok * e + j] = if j == expert { 0.7 } else { 0.3 / (e - 1) as f64 };
            }
        }
        top_k_select(&probs, e, 1).unwrap()
    }

    #[test]
    fn top_k_examples() {
        let row = [0.6095, 0.2242, 0.1360, 0.0303];
        let d = top_k_select(&row, 4, 2).unwrap();
        assert_eq!(d.tokens[0].iter().map(|s| s.expert).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(d.tokens[0].iter().map(|s| s.weight).collect::<Vec<_>>(), vec![0.6095, 0.2242]);

        let d = top_k_select(&[0.25; 4], 4, 2).unwrap();
        assert_eq!(d.tokens[0].iter().map(|s| s.expert).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(d.tokens[0][1].weight, 0.25);

        let d = top_k_select(&row, 4, 4).unwrap();
        assert_eq!(d.sparse_gates(), row.to_vec());
        assert!(top_k_select(&row, 4, 5).is_err());
    }

    #[test]
    fn capacity_examples() {
        let mut d = decision_all_to(0, 4, 2);
        apply_capacity(&mut d, Capacity::Factor(2.0));
        assert!(d.tokens.iter().all(|s| !s[0].dropped_by_capacity));

        let mut d = decision_all_to(0, 4, 4);
        apply_capacity(&mut d, Capacity::Factor(2.0));
        let dropped: Vec<bool> = d.tokens.iter().map(|s| s[0].dropped_by_capacity).collect();
        assert_eq!(dropped, vec![false, false, true, true]);

        let mut d = decision_all_to(0, 4, 4);
        apply_capacity(&mut d, Capacity::Unbounded);
        assert!(d.tokens.iter().all(|s| !s[0].dropped_by_capacity));

        let mut d = decision_all_to(0, 4, 4);
        apply_capacity(&mut d, Capacity::Factor(4.0));
        assert!(d.tokens.iter().all(|s| !s[0].dropped_by_capacity));
    }

    #[test]
    fn capacity_bound_holds_on_random_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let e = rng.gen_range(1..9);
            let t = rng.gen_range(1..40);
            let k = rng.gen_range(1..=e.min(2));
            let probs: Vec<f64> = (0..t * e).map(|_| rng.gen::<f64>()).collect();
            let mut d = top_k_select(&probs, e, k).unwrap();
            let f = rng.gen_range(0.1..3.0);
            apply_capacity(&mut d, Capacity::Factor(f));
            let cap = Capacity::Factor(f).per_expert(t, e);
            for toks in d.active_by_expert() {
                assert!(toks.len() <= cap);
            }
        }
    }

    #[test]
    fn first_choices_win_capacity() {
        // token 0 prefers expert 1 then 0; tokens 1..3 prefer 0 first.
        let probs = [0.4, 0.6, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1];
        let mut d = top_k_select(&probs, 2, 2).unwrap();
        apply_capacity(&mut d, Capacity::Factor(1.0)); // cap = 2
        assert!(!d.tokens[1][0].dropped_by_capacity);
        assert!(!d.tokens[2][0].dropped_by_capacity);
        assert!(d.tokens[3][0].dropped_by_capacity);
        assert!(d.tokens[0][1].dropped_by_capacity);
    }

    #[test]
    fn load_balance_examples() {
        let mut tape = Tape::new();
        let e = 4;
        let t = 8;
        // uniform rows with top-1 spread evenly by construction
        let mut probs = vec![0.25; t * e];
        let p = tape.constant(Tensor::new(vec![t, e], probs.clone()).unwrap());
        let mut d = top_k_select(&probs, e, 1).unwrap();
        for tok in 0..t {
            d.tokens[tok][0].expert = tok % e;
        }
        let l = load_balance_loss(&mut tape, p, &d).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        probs = vec![0.9, 0.1, 0.9, 0.1];
        let p = tape.constant(Tensor::new(vec![2, 2], probs.clone()).unwrap());
        let d = top_k_select(&probs, 2, 1).unwrap();
        let l = load_balance_loss(&mut tape, p, &d).unwrap();
        assert!((tape.value(l).item() - 1.8).abs() < 1e-15);

        let probs = vec![1.0; 5];
        let p = tape.constant(Tensor::new(vec![5, 1], probs.clone()).unwrap());
        let d = top_k_select(&probs, 1, 1).unwrap();
        let l = load_balance_loss(&mut tape, p, &d).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
    }

    #[test]
    fn eom_fractions_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = 10_000;
        let probs: Vec<f64> = (0..t * 4).map(|_| rng.gen::<f64>()).collect();
        let base = top_k_select(&probs, 4, 2).unwrap();
        let mut d = base.clone();
        eom_mask(&mut d, 0.0, &mut rng).unwrap();
        assert_eq!(d, base);
        eom_mask(&mut d, 0.2, &mut rng).unwrap();
        let masked = d.tokens.iter().flatten().filter(|s| s.masked_by_eom).count() as f64;
        let frac = masked / (2 * t) as f64;
        assert!((0.18..=0.22).contains(&frac), "{frac}");
        assert_eq!(d.probs, base.probs);
        assert!(eom_mask(&mut d, 1.0, &mut rng).is_err());
        assert!(eom_mask(&mut d, -0.1, &mut rng).is_err());
    }

    #[test]
    fn fom_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[6, 3], 2.0));
        let y = fom_mask(&mut tape, x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        let y = fom_mask(&mut tape, x, 1.0, &mut rng).unwrap();
        assert!(tape.data(y).iter().all(|v| *v == 0.0));
        assert!(fom_mask(&mut tape, x, 1.5, &mut rng).is_err());

        let rows = fom_rows(10_000, 0.3, &mut rng).unwrap();
        let frac = rows.iter().filter(|m| **m).count() as f64 / 10_000.0;
        assert!((0.28..=0.32).contains(&frac), "{frac}");
    }

    #[test]
    fn gating_dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let row = vec![0.4, 0.1, 0.3, 0.2, 0.4, 0.1, 0.3, 0.2];
        let p = tape.constant(Tensor::new(vec![2, 4], row.clone()).unwrap());
        let same = gating_dropout(&mut tape, p, 0.0, 2, &mut rng).unwrap();
        assert_eq!(tape.data(same), &row[..]);
        let same = gating_dropout(&mut tape, p, 0.9, 1, &mut rng).unwrap();
        assert_eq!(tape.data(same), &row[..]);

        // token 0 sits on device 0 (experts 0, 1)
        let r = restrict_to_local(&mut tape, p, &[true, false], 2).unwrap();
        let got = &tape.data(r)[..4];
        let want = [0.8, 0.2, 0.0, 0.0];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(&tape.data(r)[4..], &row[4..]);

        let p3 = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        assert!(gating_dropout(&mut tape, p3, 0.5, 2, &mut rng).is_err());
    }

    #[test]
    fn gate_config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        let c = GateConfig { p_eom: 0.1, p_fom: 0.1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = GateConfig { num_virtual_devices: 3, ..Default::default() };
        assert!(c.validate().is_err());
        let c = GateConfig { k: 3, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn decision_jsonl_has_one_line_per_token() {
        let d = top_k_select(&[0.7, 0.3, 0.2, 0.8], 2, 2).unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf, "enc.1").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["experts"], serde_json::json!([1, 0]));
        assert_eq!(v["token"], 1);
    }
}
