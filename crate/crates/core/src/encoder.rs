//! Frozen transformer encoder hosting the adapters.
//!
//! Post-norm layers: token and position embeddings, multi-head self
//! attention, a GELU feed-forward block, residual connections and layer
//! norm. The base weights are random, shared behind `Arc` and enter every
//! tape as constants. Only adapters and the classifier head are trainable.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{lora_forward, LoraAdapter, LoraVars};
use crate::planner::{InsertionPlan, MatrixKind, Method, ModelDims, PlanEntry};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::time_axis::{Chain, PassState, StateTrace};
use crate::time_module::{AdapterConfig, Dropout, ModuleVars};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    First,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub classes: usize,
    /// One `d × 3d` attention input projection instead of separate Q, K, V.
    #[serde(default)]
    pub fused_qkv: bool,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("classes", self.classes),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.width ({}) must be divisible by encoder.heads ({})",
                self.width, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("encoder.classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            width: self.width,
            fused_qkv_out: self.fused_qkv.then_some(3 * self.width),
            ff_width: Some(self.ff_width),
        }
    }

    /// Whether this host has a projection of the given kind.
    pub fn has_slot(&self, kind: MatrixKind) -> bool {
        match kind {
            MatrixKind::Query | MatrixKind::Key | MatrixKind::Value => !self.fused_qkv,
            MatrixKind::FusedQkv => self.fused_qkv,
            MatrixKind::FeedForward => true,
        }
    }
}

#[derive(Debug, Clone)]
enum Attention {
    Split {
        q: Arc<Tensor>,
        k: Arc<Tensor>,
        v: Arc<Tensor>,
    },
    Fused(Arc<Tensor>),
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn: Attention,
    wo: Arc<Tensor>,
    w1: Arc<Tensor>,
    w2: Arc<Tensor>,
}

#[derive(Debug, Clone)]
struct BaseWeights {
    tok: Arc<Tensor>,
    pos: Arc<Tensor>,
    layers: Vec<LayerWeights>,
}

impl BaseWeights {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.tok, &self.pos];
        for l in &self.layers {
            match &l.attn {
                Attention::Split { q, k, v } => out.extend([&**q, &**k, &**v]),
                Attention::Fused(w) => out.push(w),
            }
            out.extend([&*l.wo, &*l.w1, &*l.w2]);
        }
        out
    }
}

/// Trainable pooling classifier: `pool(h) · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Chain { chain: usize, position: usize },
    Lora(usize),
}

#[derive(Debug, Clone)]
pub struct Adapters {
    pub plan: InsertionPlan,
    pub cfg: AdapterConfig,
    pub chains: Vec<Chain>,
    pub loras: Vec<(PlanEntry, LoraAdapter)>,
    slots: BTreeMap<(usize, MatrixKind), Slot>,
}

impl Adapters {
    fn empty() -> Self {
        Self {
            plan: InsertionPlan::default(),
            cfg: AdapterConfig::default(),
            chains: Vec::new(),
            loras: Vec::new(),
            slots: BTreeMap::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        let chains: usize = self.chains.iter().flat_map(|c| c.modules()).map(|m| m.param_count()).sum();
        let loras: usize = self.loras.iter().map(|(_, l)| l.param_count()).sum();
        chains + loras
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    base: Arc<BaseWeights>,
    pub head: Head,
    pub adapters: Adapters,
}

/// Token ids of a `batch × seq` block, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "token batch {batch}x{seq} does not hold {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, seq, ids })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[usize]>>(rows: &[R]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != seq) {
            return Err(Error::Input("rows of a token batch must share one length".into()));
        }
        let ids = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), seq, ids)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Enables adapter dropout.
    pub training: bool,
    pub dropout_seed: u64,
    /// Incoming chain states to use instead of the live ones.
    pub pinned: Option<StateTrace>,
    pub record_attention: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            training: true,
            dropout_seed,
            ..Self::default()
        }
    }
}

pub struct ForwardOutput<'t> {
    /// `[batch, classes]`.
    pub logits: Var<'t>,
    pub trace: StateTrace,
    /// Softmax weights per layer, `[batch, heads, seq, seq]`, when recorded.
    pub attention: Vec<Tensor>,
}

/// Trainable tensors of a model registered on one tape, in canonical order.
pub struct Bound<'t> {
    chains: Vec<Vec<ModuleVars<'t>>>,
    loras: Vec<LoraVars<'t>>,
    head_w: Var<'t>,
    head_b: Var<'t>,
}

impl<'t> Bound<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for c in &self.chains {
            for m in c {
                out.extend(m.leaves());
            }
        }
        for l in &self.loras {
            out.extend([l.w_a, l.w_b]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }
}

struct PassCtx<'a, 't> {
    tape: &'t Tape,
    bound: &'a Bound<'t>,
    pass: PassState,
    training: bool,
    dropout_seed: u64,
}

/// Random frozen base with an untrained head and no adapters.
pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<FrozenEncoder> {
    cfg.validate()?;
    let d = cfg.width;
    let mut rng = rng_for(seed, &[0xba5e]);
    let proj = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        Arc::new(Tensor::randn([rows, cols], 1.0 / (rows as f64).sqrt(), rng))
    };
    let tok = Arc::new(Tensor::randn([cfg.vocab, d], 1.0, &mut rng));
    let pos = Arc::new(Tensor::randn([cfg.max_seq, d], 1.0, &mut rng));
    let layers = (0..cfg.layers)
        .map(|_| {
            let attn = if cfg.fused_qkv {
                Attention::Fused(proj(d, 3 * d, &mut rng))
            } else {
                Attention::Split {
                    q: proj(d, d, &mut rng),
                    k: proj(d, d, &mut rng),
                    v: proj(d, d, &mut rng),
                }
            };
            LayerWeights {
                attn,
                wo: proj(d, d, &mut rng),
                w1: proj(d, cfg.ff_width, &mut rng),
                w2: proj(cfg.ff_width, d, &mut rng),
            }
        })
        .collect();
    let mut head_rng = rng_for(seed, &[0x4ead]);
    let head = Head {
        w: Tensor::randn([d, cfg.classes], 1.0 / (d as f64).sqrt(), &mut head_rng),
        b: Tensor::zeros([cfg.classes]),
    };
    Ok(FrozenEncoder {
        cfg: cfg.clone(),
        base: Arc::new(BaseWeights { tok, pos, layers }),
        head,
        adapters: Adapters::empty(),
    })
}

/// Creates the adapters named by `plan`. SSMLoRA entries of one kind form
/// a chain in layer order; LoRA entries are independent pairs.
pub fn attach_adapters(
    mut model: FrozenEncoder,
    plan: &InsertionPlan,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<FrozenEncoder> {
    if !model.adapters.is_empty() {
        return Err(Error::Plan("model already carries adapters".into()));
    }
    plan.validate(model.cfg.layers)?;
    let dims = model.cfg.dims();
    for e in &plan.entries {
        if !model.cfg.has_slot(e.kind) {
            return Err(Error::Plan(format!(
                "layer {} has no {} projection on this host",
                e.layer, e.kind
            )));
        }
        let (d_in, _) = dims.io(e.kind)?;
        cfg.validate(d_in)?;
    }

    let mut adapters = Adapters {
        plan: plan.clone(),
        cfg: *cfg,
        chains: Vec::new(),
        loras: Vec::new(),
        slots: BTreeMap::new(),
    };
    for (kind, layers) in plan.chains() {
        let (d_in, d_out) = dims.io(kind)?;
        let idx = adapters.chains.len();
        let chain = Chain::init(kind, d_in, d_out, layers.len(), cfg, derive_seed(seed, &[1, kind as u64]))?;
        adapters.chains.push(chain);
        for (position, layer) in layers.into_iter().enumerate() {
            adapters.slots.insert((layer, kind), Slot::Chain { chain: idx, position });
        }
    }
    let mut lora_entries: Vec<PlanEntry> = plan.entries.iter().filter(|e| e.method == Method::Lora).copied().collect();
    lora_entries.sort();
    for e in lora_entries {
        let (d_in, d_out) = dims.io(e.kind)?;
        let pair = LoraAdapter::init(d_in, d_out, cfg, derive_seed(seed, &[2, e.layer as u64, e.kind as u64]))?;
        adapters.slots.insert((e.layer, e.kind), Slot::Lora(adapters.loras.len()));
        adapters.loras.push((e, pair));
    }
    model.adapters = adapters;
    Ok(model)
}

impl FrozenEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Same base and head, adapters removed.
    pub fn without_adapters(&self) -> FrozenEncoder {
        FrozenEncoder {
            cfg: self.cfg.clone(),
            base: self.base.clone(),
            head: self.head.clone(),
            adapters: Adapters::empty(),
        }
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.w.numel() + self.head.b.numel()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapter_param_count() + self.head_param_count()
    }

    /// SHA-256 over every base tensor's shape and little-endian data.
    pub fn base_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.base.tensors() {
            h.update((t.ndim() as u64).to_le_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Names of the trainable tensors in canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable().into_iter().map(|(n, _)| n).collect()
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for c in &self.adapters.chains {
            for (t, m) in c.modules().iter().enumerate() {
                for (name, w) in m.matrices() {
                    out.push((format!("chain.{}.{t}.{name}", c.kind()), w));
                }
            }
        }
        for (e, l) in &self.adapters.loras {
            out.push((format!("lora.{}.{}.w_a", e.layer, e.kind), &l.w_a));
            out.push((format!("lora.{}.{}.w_b", e.layer, e.kind), &l.w_b));
        }
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.adapters.chains {
            for m in c.modules_mut() {
                out.extend(m.matrices_mut());
            }
        }
        for (_, l) in &mut self.adapters.loras {
            out.push(&mut l.w_a);
            out.push(&mut l.w_b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Overwrites every trainable tensor; names and shapes must match the
    /// canonical layout exactly.
    pub fn load_trainable(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let names = self.trainable_names();
        if names.len() != named.len() {
            return Err(Error::Input(format!(
                "expected {} trainable tensors, got {}",
                names.len(),
                named.len()
            )));
        }
        for ((want, have), (got, t)) in names.iter().zip(self.trainable()).map(|(n, (_, t))| (n, t)).zip(named) {
            if want != got {
                return Err(Error::Input(format!("expected tensor {want}, found {got}")));
            }
            if have.shape() != t.shape() {
                return Err(Error::dim("load_trainable", have.shape(), t.shape()));
            }
        }
        for (dst, (_, src)) in self.trainable_mut().into_iter().zip(named) {
            *dst = src.clone();
        }
        Ok(())
    }

    /// Adds `N(0, std²)` noise to every adapter matrix that starts at zero
    /// (`w_b`, `w_c`, `w_d`), giving a generic nonzero configuration.
    pub fn perturb_adapters(&mut self, std: f64, seed: u64) {
        let mut rng = rng_for(seed, &[0x9e27]);
        let mut bump = |t: &mut Tensor| {
            let noise = Tensor::randn(t.shape(), std, &mut rng);
            for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *x += n;
            }
        };
        for c in &mut self.adapters.chains {
            for m in c.modules_mut() {
                bump(&mut m.w_b);
                bump(&mut m.w_c);
                bump(&mut m.w_d);
            }
        }
        for (_, l) in &mut self.adapters.loras {
            bump(&mut l.w_b);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            chains: self.adapters.chains.iter().map(|c| c.bind(tape)).collect(),
            loras: self.adapters.loras.iter().map(|(_, l)| l.bind(tape)).collect(),
            head_w: tape.leaf(self.head.w.clone()),
            head_b: tape.leaf(self.head.b.clone()),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        tokens: &TokenBatch,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'t>> {
        let (b, s, d) = (tokens.batch, tokens.seq, self.cfg.width);
        if s > self.cfg.max_seq {
            return Err(Error::Input(format!(
                "sequence length {s} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        let mut pass = PassState::begin(&self.adapters.chains, b, s)?;
        if let Some(trace) = &opts.pinned {
            pass = pass.pin(trace.clone())?;
        }
        let mut ctx = PassCtx {
            tape,
            bound,
            pass,
            training: opts.training,
            dropout_seed: opts.dropout_seed,
        };

        let tok = tape.constant_arc(self.base.tok.clone());
        let pos = tape.constant_arc(self.base.pos.clone()).narrow(0, 0, s)?;
        let mut x = tape.gather(tok, &tokens.ids, &[b, s])?.add(pos)?.layer_norm(LN_EPS);

        let mut attention = Vec::new();
        for (li, lw) in self.base.layers.iter().enumerate() {
            let (q, k, v) = match &lw.attn {
                Attention::Split { q, k, v } => (
                    self.project(&mut ctx, x, q, li, MatrixKind::Query)?,
                    self.project(&mut ctx, x, k, li, MatrixKind::Key)?,
                    self.project(&mut ctx, x, v, li, MatrixKind::Value)?,
                ),
                Attention::Fused(w) => {
                    let qkv = self.project(&mut ctx, x, w, li, MatrixKind::FusedQkv)?;
                    (qkv.narrow(2, 0, d)?, qkv.narrow(2, d, d)?, qkv.narrow(2, 2 * d, d)?)
                }
            };
            let (a, weights) = self.attend(q, k, v, b, s)?;
            if opts.record_attention {
                attention.push((*weights.value()).clone());
            }
            let a = a.matmul(tape.constant_arc(lw.wo.clone()))?;
            x = x.add(a)?.layer_norm(LN_EPS);
            let f = self.project(&mut ctx, x, &lw.w1, li, MatrixKind::FeedForward)?.gelu();
            let f = f.matmul(tape.constant_arc(lw.w2.clone()))?;
            x = x.add(f)?.layer_norm(LN_EPS);
        }

        let pooled = match self.cfg.pooling {
            Pooling::Mean => x.mean_axis(1)?,
            Pooling::First => x.narrow(1, 0, 1)?.reshape([b, d])?,
        };
        let logits = pooled.matmul(bound.head_w)?.add(bound.head_b)?;
        Ok(ForwardOutput {
            logits,
            trace: ctx.pass.into_trace(),
            attention,
        })
    }

    /// Frozen projection `x · w` plus the delta of the adapter in slot
    /// `(layer, kind)`, if any.
    fn project<'t>(
        &self,
        ctx: &mut PassCtx<'_, 't>,
        x: Var<'t>,
        w: &Arc<Tensor>,
        layer: usize,
        kind: MatrixKind,
    ) -> Result<Var<'t>> {
        let base = x.matmul(ctx.tape.constant_arc(w.clone()))?;
        let Some(slot) = self.adapters.slots.get(&(layer, kind)) else {
            return Ok(base);
        };
        let cfg = &self.adapters.cfg;
        let mut dropout = (ctx.training && cfg.dropout > 0.0)
            .then(|| Dropout::new(cfg.dropout, derive_seed(ctx.dropout_seed, &[layer as u64, kind as u64])));
        let delta = match *slot {
            Slot::Chain { chain, position } => {
                ctx.pass
                    .chain_step(chain, &ctx.bound.chains[chain][position], x, cfg, dropout.as_mut())?
            }
            Slot::Lora(i) => lora_forward(x, &ctx.bound.loras[i], cfg, dropout.as_mut())?,
        };
        base.add(delta)
    }

    /// Scaled dot-product attention over `[b, s, d]` inputs. Returns the
    /// merged heads and the softmax weights.
    fn attend<'t>(&self, q: Var<'t>, k: Var<'t>, v: Var<'t>, b: usize, s: usize) -> Result<(Var<'t>, Var<'t>)> {
        let (h, d) = (self.cfg.heads, self.cfg.width);
        let dh = d / h;
        let split = |t: Var<'t>| -> Result<Var<'t>> { t.reshape([b, s, h, dh])?.permute(&[0, 2, 1, 3]) };
        let (q, k, v) = (split(q)?, split(k)?, split(v)?);
        let scores = q.matmul(k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax();
        let out = weights.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape([b, s, d])?;
        Ok((out, weights))
    }

    /// Eval-mode logits as plain values.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = self.forward(&tape, &bound, tokens, &ForwardOptions::eval())?;
        Ok((*out.logits.value()).clone())
    }

    /// Mean cross-entropy and its gradient for every trainable tensor in
    /// canonical order.
    pub fn loss_and_grads(
        &self,
        tokens: &TokenBatch,
        labels: &[usize],
        opts: &ForwardOptions,
    ) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = self.forward(&tape, &bound, tokens, opts)?;
        let loss = out.logits.cross_entropy(labels)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        Ok((value, bound.leaves().into_iter().map(|v| grads.wrt(v)).collect()))
    }

    /// Incoming chain states of a dropout-free pass.
    pub fn state_trace(&self, tokens: &TokenBatch) -> Result<StateTrace> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        Ok(self.forward(&tape, &bound, tokens, &ForwardOptions::eval())?.trace)
    }

    /// Mean cross-entropy only, with optional pinned chain states.
    pub fn loss(&self, tokens: &TokenBatch, labels: &[usize], opts: &ForwardOptions) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = self.forward(&tape, &bound, tokens, opts)?;
        out.logits.cross_entropy(labels)?.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{plan_alternating, plan_dense, plan_skip_one};

    fn small(fused: bool) -> EncoderConfig {
        EncoderConfig {
            layers: 4,
            width: 8,
            heads: 2,
            ff_width: 16,
            vocab: 11,
            max_seq: 6,
            classes: 3,
            fused_qkv: fused,
            pooling: Pooling::Mean,
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::new(2, 5, vec![1, 4, 0, 9, 3, 2, 2, 7, 10, 5]).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_encoder(&small(false), 3).unwrap();
        let b = build_encoder(&small(false), 3).unwrap();
        assert_eq!(a.base_fingerprint(), b.base_fingerprint());
        assert_ne!(a.base_fingerprint(), build_encoder(&small(false), 4).unwrap().base_fingerprint());
        assert_eq!(a.logits(&batch()).unwrap(), b.logits(&batch()).unwrap());
    }

    #[test]
    fn logits_shape_and_finite() {
        let m = build_encoder(&small(false), 1).unwrap();
        let zeros = TokenBatch::new(3, 6, vec![0; 18]).unwrap();
        let l = m.logits(&zeros).unwrap();
        assert_eq!(l.shape(), &[3, 3]);
        assert!(l.is_finite());
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(false);
        c.heads = 3;
        assert!(matches!(build_encoder(&c, 0), Err(Error::Config(_))));
        let mut c = small(false);
        c.vocab = 0;
        assert!(matches!(build_encoder(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn oversize_sequence_rejected() {
        let m = build_encoder(&small(false), 1).unwrap();
        let long = TokenBatch::new(1, 7, vec![0; 7]).unwrap();
        assert!(matches!(m.logits(&long), Err(Error::Input(_))));
    }

    #[test]
    fn fresh_adapters_are_transparent() {
        let base = build_encoder(&small(false), 2).unwrap();
        let want = base.logits(&batch()).unwrap();
        let plans = [
            plan_alternating(4),
            plan_dense(4, &[MatrixKind::Query, MatrixKind::Value]),
            plan_dense(4, &[MatrixKind::FeedForward]).with_method(Method::Ssmlora),
        ];
        for plan in plans {
            let m = attach_adapters(base.clone(), &plan, &AdapterConfig::new(2), 9).unwrap();
            assert_eq!(m.logits(&batch()).unwrap(), want);
        }
        let fused = build_encoder(&small(true), 2).unwrap();
        let want = fused.logits(&batch()).unwrap();
        let m = attach_adapters(fused, &plan_skip_one(4), &AdapterConfig::new(2), 9).unwrap();
        assert_eq!(m.logits(&batch()).unwrap(), want);
    }

    #[test]
    fn alternating_gives_two_chains_of_two() {
        let m = attach_adapters(
            build_encoder(&small(false), 0).unwrap(),
            &plan_alternating(4),
            &AdapterConfig::new(2),
            0,
        )
        .unwrap();
        let lens: Vec<_> = m.adapters.chains.iter().map(|c| (c.kind(), c.len())).collect();
        assert_eq!(lens, vec![(MatrixKind::Query, 2), (MatrixKind::Value, 2)]);
    }

    #[test]
    fn trainable_count_matches_accounting() {
        let cfg = small(false);
        for (plan, method) in [
            (plan_alternating(4), Method::Ssmlora),
            (plan_dense(4, &[MatrixKind::Query, MatrixKind::Value]), Method::Lora),
        ] {
            let m = attach_adapters(build_encoder(&cfg, 0).unwrap(), &plan, &AdapterConfig::new(4), 0).unwrap();
            let want = crate::planner::count_params(&plan, &cfg.dims(), 4, method).unwrap();
            assert_eq!(m.adapter_param_count() as u64, want);
            assert_eq!(m.trainable_param_count(), m.adapter_param_count() + 8 * 3 + 3);
        }
    }

    #[test]
    fn host_type_checked() {
        let fused = build_encoder(&small(true), 0).unwrap();
        let err = attach_adapters(fused, &plan_alternating(4), &AdapterConfig::new(2), 0).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
        let plain = build_encoder(&small(false), 0).unwrap();
        let err = attach_adapters(plain, &plan_skip_one(4), &AdapterConfig::new(2), 0).unwrap_err();
        assert!(matches!(err, Error::Plan(_)));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = build_encoder(&small(false), 5).unwrap();
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let opts = ForwardOptions {
            record_attention: true,
            ..ForwardOptions::eval()
        };
        let out = m.forward(&tape, &bound, &batch(), &opts).unwrap();
        assert_eq!(out.attention.len(), 4);
        for w in &out.attention {
            assert_eq!(w.shape(), &[2, 2, 5, 5]);
            for row in w.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_step_changes_logits() {
        let base = build_encoder(&small(false), 2).unwrap();
        let mut m = attach_adapters(base, &plan_alternating(4), &AdapterConfig::new(2), 1).unwrap();
        let before = m.logits(&batch()).unwrap();
        let (_, grads) = m.loss_and_grads(&batch(), &[0, 2], &ForwardOptions::eval()).unwrap();
        let names = m.trainable_names();
        for ((t, g), n) in m.trainable_mut().into_iter().zip(&grads).zip(&names) {
            if n.starts_with("chain") {
                for (x, dx) in t.data_mut().iter_mut().zip(g.data()) {
                    *x -= 0.1 * dx;
                }
            }
        }
        assert_ne!(m.logits(&batch()).unwrap(), before);
    }

    #[test]
    fn load_trainable_roundtrip_and_checks() {
        let m0 = attach_adapters(
            build_encoder(&small(false), 2).unwrap(),
            &plan_alternating(4),
            &AdapterConfig::new(2),
            1,
        )
        .unwrap();
        let mut m1 = m0.clone();
        m1.perturb_adapters(0.3, 4);
        let named: Vec<(String, Tensor)> = m1.trainable().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut m2 = m0.clone();
        m2.load_trainable(&named).unwrap();
        assert_eq!(m2.logits(&batch()).unwrap(), m1.logits(&batch()).unwrap());
        let mut bad = named.clone();
        bad[0].0 = "chain.query.9.w_a".into();
        assert!(m2.load_trainable(&bad).is_err());
        assert_eq!(named[0].0, "chain.query.0.w_a");
        assert_eq!(named.last().unwrap().0, "head.b");
    }

    #[test]
    fn training_forward_uses_dropout_eval_does_not() {
        let mut m = attach_adapters(
            build_encoder(&small(false), 2).unwrap(),
            &plan_alternating(4),
            &AdapterConfig::new(2),
            1,
        )
        .unwrap();
        m.perturb_adapters(0.5, 1);
        let eval = m.loss(&batch(), &[0, 1], &ForwardOptions::eval()).unwrap();
        assert_eq!(eval, m.loss(&batch(), &[0, 1], &ForwardOptions::eval()).unwrap());
        let t1 = m.loss(&batch(), &[0, 1], &ForwardOptions::train(1)).unwrap();
        assert_ne!(eval, t1);
        assert_eq!(t1, m.loss(&batch(), &[0, 1], &ForwardOptions::train(1)).unwrap());
    }

    #[test]
    fn pinned_trace_reproduces_the_pass() {
        let mut m = attach_adapters(
            build_encoder(&small(false), 2).unwrap(),
            &plan_alternating(4),
            &AdapterConfig::new(2),
            1,
        )
        .unwrap();
        m.perturb_adapters(0.5, 2);
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let out = m.forward(&tape, &bound, &batch(), &ForwardOptions::eval()).unwrap();
        let pinned = ForwardOptions {
            pinned: Some(out.trace.clone()),
            ..ForwardOptions::eval()
        };
        let tape2 = Tape::new();
        let bound2 = m.bind(&tape2);
        let out2 = m.forward(&tape2, &bound2, &batch(), &pinned).unwrap();
        assert_eq!(out.logits.value(), out2.logits.value());
    }
}
