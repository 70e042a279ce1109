//! Pre-LN Transformer encoder-decoder in which every other FFN sublayer is
//! an MoE (or CMR) sublayer.

use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::cmr::{total_loss, CmrConfig, CmrSublayer};
use crate::error::{invalid, Error, Result};
use crate::ndcore::{AttnSegment, ParamId, ParamStore, Tape, Tensor, Var};
use crate::routing::{FfnParams, GateConfig, MoeSublayer, Phase, RoutingDecision, RoutingPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MoeMode {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "moe")]
    Moe,
    #[serde(rename = "moe+eom")]
    MoeEom,
    #[serde(rename = "moe+fom")]
    MoeFom,
    #[serde(rename = "moe+gd")]
    MoeGd,
    #[serde(rename = "cmr_top1")]
    CmrTop1,
    #[serde(rename = "cmr_top2")]
    CmrTop2,
}

impl MoeMode {
    pub fn is_sparse(self) -> bool {
        self != MoeMode::Dense
    }

    pub fn is_cmr(self) -> bool {
        matches!(self, MoeMode::CmrTop1 | MoeMode::CmrTop2)
    }
}

impl fmt::Display for MoeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MoeMode::Dense => "dense",
            MoeMode::Moe => "moe",
            MoeMode::MoeEom => "moe+eom",
            MoeMode::MoeFom => "moe+fom",
            MoeMode::MoeGd => "moe+gd",
            MoeMode::CmrTop1 => "cmr_top1",
            MoeMode::CmrTop2 => "cmr_top2",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub moe_mode: MoeMode,
    pub gate: GateConfig,
    pub cmr: CmrConfig,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            ffn_dim: 256,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            vocab_size: 64,
            max_len: 32,
            moe_mode: MoeMode::Moe,
            gate: GateConfig::default(),
            cmr: CmrConfig::default(),
            dropout: 0.0,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        if self.moe_mode.is_sparse() && self.encoder_layers < 2 && self.decoder_layers < 2 {
            return Err(Error::Config(format!(
                "mode {} needs at least two layers in some stack to host an MoE sublayer",
                self.moe_mode
            )));
        }
        self.effective_gate().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.moe_mode.is_cmr() {
            self.effective_cmr().validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Gate configuration with only the regularizer selected by the mode left on.
    pub fn effective_gate(&self) -> GateConfig {
        let mut g = self.gate.clone();
        let (eom, fom, gd) = (g.p_eom, g.p_fom, g.p_gd);
        g.p_eom = 0.0;
        g.p_fom = 0.0;
        g.p_gd = 0.0;
        match self.moe_mode {
            MoeMode::MoeEom => g.p_eom = eom,
            MoeMode::MoeFom => g.p_fom = fom,
            MoeMode::MoeGd => g.p_gd = gd,
            MoeMode::CmrTop1 => g.k = 1,
            MoeMode::CmrTop2 => g.k = 2,
            MoeMode::Dense | MoeMode::Moe => {}
        }
        g
    }

    pub fn effective_cmr(&self) -> CmrConfig {
        let mut c = self.cmr.clone();
        c.k = if self.moe_mode == MoeMode::CmrTop2 { 2 } else { 1 };
        c
    }

    /// 0-based FFN sublayer indices that are sparse: the 2nd, 4th, …
    pub fn is_moe_layer(&self, index: usize) -> bool {
        self.moe_mode.is_sparse() && index % 2 == 1
    }

    pub fn num_moe_layers(&self) -> usize {
        (0..self.encoder_layers).filter(|&i| self.is_moe_layer(i)).count()
            + (0..self.decoder_layers).filter(|&i| self.is_moe_layer(i)).count()
    }
}

/// Teacher-forcing batch. Sources start with the source prefix token and
/// targets with the target prefix token.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub sources: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub tasks: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn push(&mut self, source: Vec<usize>, target: Vec<usize>, task: usize) {
        self.sources.push(source);
        self.targets.push(target);
        self.tasks.push(task);
    }

    pub fn num_source_tokens(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    /// Predicted target tokens (everything after the prefix).
    pub fn num_target_tokens(&self) -> usize {
        self.targets.iter().map(|t| t.len().saturating_sub(1)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Position of an FFN sublayer in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub stack: Stack,
    pub index: usize,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        write!(f, "{s}.{}", self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LnParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LnParams {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttnParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl AttnParams {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut dyn RngCore) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let mut w = |n: &str| store.add(format!("{name}.{n}"), Tensor::randn(&[d, d], std, rng));
        Self {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        segs: &[AttnSegment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let a = tape.attention(q, k, v, segs, heads, causal)?;
        tape.matmul(a, wo)
    }
}

/// The FFN position of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum FfnBlock {
    Dense(FfnParams),
    Moe(MoeSublayer),
    Cmr(CmrSublayer),
}

impl FfnBlock {
    pub fn moe(&self) -> Option<&MoeSublayer> {
        match self {
            FfnBlock::Dense(_) => None,
            FfnBlock::Moe(m) => Some(m),
            FfnBlock::Cmr(c) => Some(&c.moe),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln_attn: LnParams,
    attn: AttnParams,
    ln_ffn: LnParams,
    ffn: FfnBlock,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    ln_self: LnParams,
    self_attn: AttnParams,
    ln_cross: LnParams,
    cross_attn: AttnParams,
    ln_ffn: LnParams,
    ffn: FfnBlock,
}

/// Routing captured from one MoE sublayer during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer: LayerId,
    pub decision: RoutingDecision,
    /// Task of every routed token.
    pub token_tasks: Vec<usize>,
    /// Raw CMR gate values, for CMR sublayers.
    pub cmr_gates: Option<Vec<f64>>,
}

/// Result of a teacher-forced pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Gold next tokens, one per logits row.
    pub labels: Vec<usize>,
    /// Task of every logits row.
    pub label_tasks: Vec<usize>,
    pub routing: Vec<LayerRouting>,
    pub balance_losses: Vec<Var>,
    pub budget_losses: Vec<Var>,
}

#[derive(Default)]
struct Aux {
    routing: Vec<LayerRouting>,
    balance_losses: Vec<Var>,
    budget_losses: Vec<Var>,
}

/// Knobs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    pub phase: Phase,
    pub policy: RoutingPolicy,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { phase: Phase::Train, policy: RoutingPolicy::TopK }
    }

    pub fn eval() -> Self {
        Self { phase: Phase::Eval, policy: RoutingPolicy::TopK }
    }
}

/// Scalar summary of one training loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    pub l_mt: f64,
    pub l_moe: Option<f64>,
    pub l_cmr: Option<f64>,
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: ParamId,
    pos: ParamId,
    out_proj: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    enc_ln: LnParams,
    dec_ln: LnParams,
}

fn build_ffn(
    config: &ModelConfig,
    store: &mut ParamStore,
    prefix: &str,
    index: usize,
    rng: &mut dyn RngCore,
) -> FfnBlock {
    let (d, f) = (config.d_model, config.ffn_dim);
    if !config.is_moe_layer(index) {
        return FfnBlock::Dense(FfnParams::init(store, prefix, d, f, rng));
    }
    if config.moe_mode.is_cmr() {
        FfnBlock::Cmr(CmrSublayer::init(store, prefix, d, f, config.effective_gate(), config.effective_cmr(), rng))
    } else {
        FfnBlock::Moe(MoeSublayer::init(store, prefix, d, f, config.effective_gate(), rng))
    }
}

impl Model {
    /// Builds a freshly initialized model.
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, config.vocab_size);
        let mut store = ParamStore::new();
        let embed = store.add("embed", Tensor::randn(&[v, d], 1.0, rng));
        let pos = store.add("pos", Tensor::randn(&[config.max_len, d], 1.0, rng));
        let mut enc = Vec::new();
        for i in 0..config.encoder_layers {
            let p = format!("enc.{i}");
            enc.push(EncoderLayer {
                ln_attn: LnParams::init(&mut store, &format!("{p}.ln_attn"), d),
                attn: AttnParams::init(&mut store, &format!("{p}.attn"), d, rng),
                ln_ffn: LnParams::init(&mut store, &format!("{p}.ln_ffn"), d),
                ffn: build_ffn(&config, &mut store, &format!("{p}.ffn"), i, rng),
            });
        }
        let mut dec = Vec::new();
        for i in 0..config.decoder_layers {
            let p = format!("dec.{i}");
            dec.push(DecoderLayer {
                ln_self: LnParams::init(&mut store, &format!("{p}.ln_self"), d),
                self_attn: AttnParams::init(&mut store, &format!("{p}.self_attn"), d, rng),
                ln_cross: LnParams::init(&mut store, &format!("{p}.ln_cross"), d),
                cross_attn: AttnParams::init(&mut store, &format!("{p}.cross_attn"), d, rng),
                ln_ffn: LnParams::init(&mut store, &format!("{p}.ln_ffn"), d),
                ffn: build_ffn(&config, &mut store, &format!("{p}.ffn"), i, rng),
            });
        }
        let enc_ln = LnParams::init(&mut store, "enc.ln_out", d);
        let dec_ln = LnParams::init(&mut store, "dec.ln_out", d);
        let out_proj = store.add("out_proj", Tensor::randn(&[v, d], 0.02, rng));
        Ok(Self { config, params: store, embed, pos, out_proj, enc, dec, enc_ln, dec_ln })
    }

    /// Every FFN block with its layer id, encoder first.
    pub fn ffn_blocks(&self) -> impl Iterator<Item = (LayerId, &FfnBlock)> {
        let e = self.enc.iter().enumerate().map(|(i, l)| (LayerId { stack: Stack::Encoder, index: i }, &l.ffn));
        let d = self.dec.iter().enumerate().map(|(i, l)| (LayerId { stack: Stack::Decoder, index: i }, &l.ffn));
        e.chain(d)
    }

    pub fn moe_layers(&self) -> Vec<(LayerId, &MoeSublayer)> {
        self.ffn_blocks().filter_map(|(id, b)| b.moe().map(|m| (id, m))).collect()
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layers().len()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_ids(&self, seqs: &[Vec<usize>], what: &str) -> Result<()> {
        let v = self.config.vocab_size;
        for s in seqs {
            if s.is_empty() {
                return Err(invalid(format!("empty {what} sequence")));
            }
            if s.len() > self.config.max_len {
                return Err(invalid(format!(
                    "{what} length {} exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= v) {
                return Err(Error::OutOfRange { op: "token id", index: bad, bound: v });
            }
        }
        Ok(())
    }

    fn embed_tokens(
        &self,
        tape: &mut Tape,
        seqs: &[&[usize]],
        phase: Phase,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let emb = tape.param(&self.params, self.embed);
        let pos = tape.param(&self.params, self.pos);
        let e = tape.embedding(emb, &ids)?;
        let p = tape.embedding(pos, &positions)?;
        let x = tape.add(e, p)?;
        self.dropout(tape, x, phase, rng)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, phase: Phase, rng: &mut dyn RngCore) -> Result<Var> {
        let p = self.config.dropout;
        if phase == Phase::Eval || p == 0.0 {
            return Ok(x);
        }
        let n = tape.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let factors = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        tape.mul_const(x, factors)
    }

    #[allow(clippy::too_many_arguments)]
    fn ffn_sublayer(
        &self,
        tape: &mut Tape,
        block: &FfnBlock,
        layer: LayerId,
        h: Var,
        opts: &ForwardOptions,
        token_tasks: &[usize],
        out: &mut Aux,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let store = &self.params;
        match block {
            FfnBlock::Dense(f) => f.forward(tape, store, h),
            FfnBlock::Moe(m) => {
                let r = m.forward(tape, store, h, opts.phase, &opts.policy, token_tasks, rng)?;
                out.balance_losses.push(r.balance_loss);
                out.routing.push(LayerRouting {
                    layer,
                    decision: r.decision,
                    token_tasks: token_tasks.to_vec(),
                    cmr_gates: None,
                });
                Ok(r.out)
            }
            FfnBlock::Cmr(c) => {
                let r = c.forward(tape, store, h, opts.phase, &opts.policy, token_tasks, rng)?;
                out.balance_losses.push(r.moe.balance_loss);
                out.budget_losses.push(r.budget_loss);
                out.routing.push(LayerRouting {
                    layer,
                    decision: r.moe.decision,
                    token_tasks: token_tasks.to_vec(),
                    cmr_gates: Some(tape.data(r.gates).to_vec()),
                });
                Ok(r.out)
            }
        }
    }

    /// Teacher-forced pass: logits for every target token after the prefix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: &ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() || batch.targets.len() != batch.len() || batch.tasks.len() != batch.len() {
            return Err(invalid("batch must hold matching, non-empty source/target/task lists"));
        }
        self.check_ids(&batch.sources, "source")?;
        self.check_ids(&batch.targets, "target")?;
        if let Some(t) = batch.targets.iter().find(|t| t.len() < 2) {
            return Err(invalid(format!("target {t:?} has no token after its prefix")));
        }
        let cfg = &self.config;
        let store = &self.params;

        let mut src_segs = Vec::new();
        let mut src_tasks = Vec::new();
        let mut off = 0;
        for (s, &task) in batch.sources.iter().zip(&batch.tasks) {
            src_segs.push(AttnSegment { q_start: off, q_len: s.len(), k_start: off, k_len: s.len() });
            src_tasks.extend(std::iter::repeat(task).take(s.len()));
            off += s.len();
        }
        let dec_inputs: Vec<&[usize]> = batch.targets.iter().map(|t| &t[..t.len() - 1]).collect();
        let mut tgt_segs = Vec::new();
        let mut cross_segs = Vec::new();
        let mut labels = Vec::new();
        let mut tgt_tasks = Vec::new();
        let mut toff = 0;
        for (i, t) in batch.targets.iter().enumerate() {
            let n = t.len() - 1;
            tgt_segs.push(AttnSegment { q_start: toff, q_len: n, k_start: toff, k_len: n });
            let s = src_segs[i];
            cross_segs.push(AttnSegment { q_start: toff, q_len: n, k_start: s.q_start, k_len: s.q_len });
            labels.extend_from_slice(&t[1..]);
            tgt_tasks.extend(std::iter::repeat(batch.tasks[i]).take(n));
            toff += n;
        }

        let mut out = Aux::default();

        let src_refs: Vec<&[usize]> = batch.sources.iter().map(Vec::as_slice).collect();
        let mut h = self.embed_tokens(tape, &src_refs, opts.phase, rng)?;
        for (i, layer) in self.enc.iter().enumerate() {
            let n = layer.ln_attn.forward(tape, store, h)?;
            let a = layer.attn.forward(tape, store, n, n, &src_segs, cfg.heads, false)?;
            let a = self.dropout(tape, a, opts.phase, rng)?;
            h = tape.add(h, a)?;
            let n = layer.ln_ffn.forward(tape, store, h)?;
            let id = LayerId { stack: Stack::Encoder, index: i };
            let f = self.ffn_sublayer(tape, &layer.ffn, id, n, opts, &src_tasks, &mut out, rng)?;
            let f = self.dropout(tape, f, opts.phase, rng)?;
            h = tape.add(h, f)?;
        }
        let memory = self.enc_ln.forward(tape, store, h)?;

        let mut h = self.embed_tokens(tape, &dec_inputs, opts.phase, rng)?;
        for (i, layer) in self.dec.iter().enumerate() {
            let n = layer.ln_self.forward(tape, store, h)?;
            let a = layer.self_attn.forward(tape, store, n, n, &tgt_segs, cfg.heads, true)?;
            let a = self.dropout(tape, a, opts.phase, rng)?;
            h = tape.add(h, a)?;
            let n = layer.ln_cross.forward(tape, store, h)?;
            let a = layer.cross_attn.forward(tape, store, n, memory, &cross_segs, cfg.heads, false)?;
            let a = self.dropout(tape, a, opts.phase, rng)?;
            h = tape.add(h, a)?;
            let n = layer.ln_ffn.forward(tape, store, h)?;
            let id = LayerId { stack: Stack::Decoder, index: i };
            let f = self.ffn_sublayer(tape, &layer.ffn, id, n, opts, &tgt_tasks, &mut out, rng)?;
            let f = self.dropout(tape, f, opts.phase, rng)?;
            h = tape.add(h, f)?;
        }
        let h = self.dec_ln.forward(tape, store, h)?;
        let w = tape.param(store, self.out_proj);
        let logits = tape.matmul_t(h, w)?;
        Ok(ForwardOutput {
            logits,
            labels,
            label_tasks: tgt_tasks,
            routing: out.routing,
            balance_losses: out.balance_losses,
            budget_losses: out.budget_losses,
        })
    }

    /// Training objective for one batch. `L_MoE` and `L_CMR` are averaged
    /// over the sublayers that produce them.
    pub fn step_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: &ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<(StepLoss, ForwardOutput)> {
        let fwd = self.forward(tape, batch, opts, rng)?;
        let l_mt = tape.cross_entropy(fwd.logits, &fwd.labels, self.config.label_smoothing)?;
        let l_moe = mean_of(tape, &fwd.balance_losses)?;
        let l_cmr = mean_of(tape, &fwd.budget_losses)?;
        let gate = self.config.effective_gate();
        let total = total_loss(tape, l_mt, l_moe, l_cmr, gate.lambda_moe, self.config.cmr.lambda_cmr)?;
        let gates: Vec<f64> = fwd.routing.iter().filter_map(|r| r.cmr_gates.as_ref()).flatten().copied().collect();
        let mean_gate = (!gates.is_empty()).then(|| gates.iter().sum::<f64>() / gates.len() as f64);
        let summary = StepLoss {
            total,
            l_mt: tape.value(l_mt).item(),
            l_moe: l_moe.map(|v| tape.value(v).item()),
            l_cmr: l_cmr.map(|v| tape.value(v).item()),
            mean_gate,
        };
        Ok((summary, fwd))
    }

    /// Test double: copies expert 0 into every expert of every MoE
    /// sublayer, optionally zeroing the gate so routing is uniform.
    pub fn tie_experts(&mut self, uniform_gate: bool) {
        for (_, moe) in self.moe_layers().into_iter().map(|(id, m)| (id, m.clone())).collect::<Vec<_>>() {
            let first = moe.experts.experts[0].ids();
            for other in &moe.experts.experts[1..] {
                for (src, dst) in first.iter().zip(other.ids()) {
                    let data = self.params.get(*src).data().to_vec();
                    self.params.get_mut(dst).data_mut().copy_from_slice(&data);
                }
            }
            if uniform_gate {
                self.params.get_mut(moe.gate).data_mut().fill(0.0);
            }
        }
    }

    /// Swaps experts `a` and `b` of one MoE sublayer together with their gate columns.
    pub fn swap_experts(&mut self, layer: LayerId, a: usize, b: usize) -> Result<()> {
        let moe = self
            .moe_layers()
            .into_iter()
            .find(|(id, _)| *id == layer)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| invalid(format!("{layer} is not an MoE sublayer")))?;
        let e = moe.config.num_experts;
        if a >= e || b >= e {
            return Err(invalid("expert index out of range"));
        }
        for (pa, pb) in moe.experts.experts[a].ids().into_iter().zip(moe.experts.experts[b].ids()) {
            let ta = self.params.get(pa).clone();
            let tb = self.params.get(pb).clone();
            self.params.get_mut(pa).data_mut().copy_from_slice(tb.data());
            self.params.get_mut(pb).data_mut().copy_from_slice(ta.data());
        }
        let g = self.params.get_mut(moe.gate).data_mut();
        for row in g.chunks_mut(e) {
            row.swap(a, b);
        }
        Ok(())
    }
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / vars.len() as f64)))
}
