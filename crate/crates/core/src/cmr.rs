//! Conditional MoE routing: a per-token sigmoid gate blends a shared dense
//! FFN with the MoE branch, trained against a budget on the mean gate.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::routing::{check_fraction, FfnParams, GateConfig, MoeOutput, MoeSublayer, Phase, RoutingPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmrConfig {
    pub budget: f64,
    pub lambda_cmr: f64,
    pub p_cmr: f64,
    /// Top-k of the MoE branch.
    pub k: usize,
    /// Feed the budget loss with post-forcing gates instead of the raw ones.
    pub budget_on_forced: bool,
}

impl Default for CmrConfig {
    fn default() -> Self {
        Self {
            budget: 0.6,
            lambda_cmr: 0.1,
            p_cmr: 0.1,
            k: 1,
            budget_on_forced: false,
        }
    }
}

impl CmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(invalid(format!("budget must lie in [0, 1], got {}", self.budget)));
        }
        check_fraction("p_cmr", self.p_cmr)?;
        if !(1..=2).contains(&self.k) {
            return Err(invalid(format!("CMR top-k must be 1 or 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// `sigmoid(x · W_CMR)`, one scalar per token, shape `[T]`.
pub fn cmr_gates(tape: &mut Tape, x: Var, w_cmr: Var) -> Result<Var> {
    let z = tape.matmul(x, w_cmr)?;
    let g = tape.sigmoid(z);
    let t = tape.shape(g)[0];
    tape.reshape(g, &[t])
}

/// Tokens whose gate is forced to zero, each with probability `p`.
pub fn sample_forced(tokens: usize, p: f64, rng: &mut dyn RngCore) -> Result<Vec<bool>> {
    check_fraction("p_cmr", p)?;
    if p == 0.0 {
        return Ok(vec![false; tokens]);
    }
    Ok((0..tokens).map(|_| rng.gen::<f64>() < p).collect())
}

/// Gates with forced tokens set to exactly zero.
pub fn force_gates(tape: &mut Tape, gates: Var, forced: &[bool]) -> Result<Var> {
    if !forced.iter().any(|f| *f) {
        return Ok(gates);
    }
    let t = tape.shape(gates)[0];
    let col = tape.reshape(gates, &[t, 1])?;
    let z = tape.masked_zero(col, forced)?;
    tape.reshape(z, &[t])
}

/// `(1 − g_t) · shared_t + g_t · moe_t`, per token.
pub fn cmr_combine(tape: &mut Tape, shared: Var, moe: Var, gates: Var) -> Result<Var> {
    let keep_shared = tape.affine(gates, -1.0, 1.0);
    let a = tape.scale_rows(shared, keep_shared)?;
    let b = tape.scale_rows(moe, gates)?;
    tape.add(a, b)
}

/// `mean_t |g_t − b|`.
pub fn cmr_budget_loss(tape: &mut Tape, gates: Var, budget: f64) -> Var {
    let dev = tape.affine(gates, 1.0, -budget);
    let a = tape.abs(dev);
    tape.mean(a)
}

/// `L_MT + λ_MoE · L_MoE + λ_CMR · L_CMR`, skipping absent terms.
pub fn total_loss(
    tape: &mut Tape,
    l_mt: Var,
    l_moe: Option<Var>,
    l_cmr: Option<Var>,
    lambda_moe: f64,
    lambda_cmr: f64,
) -> Result<Var> {
    let mut total = l_mt;
    for (term, lambda) in [(l_moe, lambda_moe), (l_cmr, lambda_cmr)] {
        if let Some(v) = term {
            if lambda != 0.0 {
                let w = tape.scale(v, lambda);
                total = tape.add(total, w)?;
            }
        }
    }
    Ok(total)
}

/// Output of one CMR sublayer pass.
#[derive(Debug)]
pub struct CmrOutput {
    pub out: Var,
    pub moe: MoeOutput,
    /// Raw gate values before forcing.
    pub gates: Var,
    pub forced: Vec<bool>,
    pub budget_loss: Var,
}

/// Shared FFN, MoE branch and gate projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CmrSublayer {
    pub shared: FfnParams,
    pub moe: MoeSublayer,
    pub w_cmr: ParamId,
    pub config: CmrConfig,
}

impl CmrSublayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        gate: GateConfig,
        config: CmrConfig,
        rng: &mut dyn RngCore,
    ) -> Self {
        let gate = GateConfig { k: config.k, ..gate };
        let moe = MoeSublayer::init(store, prefix, d, hidden, gate, rng);
        let shared = FfnParams::init(store, &format!("{prefix}.shared"), d, hidden, rng);
        let w_cmr = store.add(format!("{prefix}.cmr_gate"), Tensor::randn(&[d, 1], (1.0 / d as f64).sqrt(), rng));
        Self { shared, moe, w_cmr, config }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        phase: Phase,
        policy: &RoutingPolicy,
        token_tasks: &[usize],
        rng: &mut dyn RngCore,
    ) -> Result<CmrOutput> {
        let t = tape.shape(x)[0];
        let w = tape.param(store, self.w_cmr);
        let gates = cmr_gates(tape, x, w)?;
        let forced = match phase {
            Phase::Train => sample_forced(t, self.config.p_cmr, rng)?,
            Phase::Eval => vec![false; t],
        };
        let effective = force_gates(tape, gates, &forced)?;
        let shared = self.shared.forward(tape, store, x)?;
        let moe = self.moe.forward(tape, store, x, phase, policy, token_tasks, rng)?;
        let out = cmr_combine(tape, shared, moe.out, effective)?;
        let budget_src = if self.config.budget_on_forced { effective } else { gates };
        let budget_loss = cmr_budget_loss(tape, budget_src, self.config.budget);
        Ok(CmrOutput { out, moe, gates, forced, budget_loss })
    }
}

/// Counts of gate values in 20 equal bins over `[0, 1]`.
pub fn gate_histogram(values: &[f64]) -> [usize; 20] {
    let mut h = [0usize; 20];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * 20.0) as usize).min(19);
        h[b] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_loss_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::vector(vec![0.3, 0.3]));
        let l = cmr_budget_loss(&mut tape, g, 0.3);
        assert_eq!(tape.value(l).item(), 0.0);

        let g = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = cmr_budget_loss(&mut tape, g, 0.5);
        assert_eq!(tape.value(l).item(), 0.5);

        let g = tape.constant(Tensor::vector(vec![0.2, 0.8, 0.5]));
        let l = cmr_budget_loss(&mut tape, g, 0.6);
        assert!((tape.value(l).item() - 0.7 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn budget_subgradient_is_zero_at_target() {
        let mut s = ParamStore::new();
        let id = s.add("g", Tensor::vector(vec![0.6, 0.9]));
        let mut tape = Tape::new();
        let g = tape.param(&s, id);
        let l = cmr_budget_loss(&mut tape, g, 0.6);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(g).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let mt = tape.constant(Tensor::scalar(2.0));
        let moe = tape.constant(Tensor::scalar(1.5));
        let l = total_loss(&mut tape, mt, Some(moe), None, 0.01, 0.1).unwrap();
        assert!((tape.value(l).item() - 2.015).abs() < 1e-15);

        let moe = tape.constant(Tensor::scalar(1.0));
        let cmr = tape.constant(Tensor::scalar(0.2));
        let l = total_loss(&mut tape, mt, Some(moe), Some(cmr), 0.01, 0.1).unwrap();
        assert!((tape.value(l).item() - 2.03).abs() < 1e-15);

        let l = total_loss(&mut tape, mt, Some(moe), Some(cmr), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn histogram_bins() {
        let h = gate_histogram(&[0.0, 0.04, 0.05, 0.5, 0.999, 1.0]);
        assert_eq!(h[0], 2);
        assert_eq!(h[1], 1);
        assert_eq!(h[10], 1);
        assert_eq!(h[19], 2);
        assert_eq!(h.iter().sum::<usize>(), 6);
    }

    #[test]
    fn config_validation() {
        assert!(CmrConfig::default().validate().is_ok());
        assert!(CmrConfig { budget: 1.2, ..Default::default() }.validate().is_err());
        assert!(CmrConfig { p_cmr: 1.0, ..Default::default() }.validate().is_err());
    }
}
