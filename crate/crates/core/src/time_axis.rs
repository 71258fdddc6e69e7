//! Chains of time modules and the state threaded through them.
//!
//! Every chain groups the modules of one matrix kind in layer order. A
//! [`PassState`] lives for exactly one forward pass: all states start at
//! zero, sized from the live batch, and each chain must be stepped in
//! ascending position order. Nothing carries over into the next pass.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::planner::MatrixKind;
use crate::tensor::Tensor;
use crate::time_module::{module_forward, AdapterConfig, Dropout, ModuleVars, TimeModule};

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    kind: MatrixKind,
    modules: Vec<TimeModule>,
}

impl Chain {
    /// Positions must run `0..n` in order and every module must share one rank.
    pub fn new(kind: MatrixKind, modules: Vec<TimeModule>) -> Result<Self> {
        if modules.is_empty() {
            return Err(Error::Plan(format!("{kind} chain has no modules")));
        }
        let r = modules[0].rank();
        for (i, m) in modules.iter().enumerate() {
            if m.position != i {
                return Err(Error::Plan(format!(
                    "{kind} chain module {i} has position {}",
                    m.position
                )));
            }
            if m.rank() != r {
                return Err(Error::Plan(format!("{kind} chain mixes ranks {r} and {}", m.rank())));
            }
        }
        Ok(Self { kind, modules })
    }

    /// `len` freshly initialized modules; module `t` draws from `(seed, t)`.
    pub fn init(kind: MatrixKind, d_in: usize, d_out: usize, len: usize, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let modules = (0..len)
            .map(|t| TimeModule::init(d_in, d_out, cfg, t, seed))
            .collect::<Result<Vec<_>>>()?;
        Self::new(kind, modules)
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.modules[0].rank()
    }

    pub fn modules(&self) -> &[TimeModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [TimeModule] {
        &mut self.modules
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<ModuleVars<'t>> {
        self.modules.iter().map(|m| m.bind(tape)).collect()
    }
}

/// Incoming state seen at every position of every chain during one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrace {
    pub chains: Vec<Vec<Arc<Tensor>>>,
}

#[derive(Debug, Clone)]
struct ChainState {
    h: Arc<Tensor>,
    cursor: usize,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct PassState {
    batch: usize,
    seq: usize,
    chains: Vec<ChainState>,
    pinned: Option<StateTrace>,
    trace: StateTrace,
}

impl PassState {
    /// Zero state of shape `batch × seq × r` for every chain, cursors at 0.
    pub fn begin(chains: &[Chain], batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::Contract(format!("pass needs batch, seq >= 1, got {batch}x{seq}")));
        }
        let states = chains
            .iter()
            .map(|c| ChainState {
                h: Arc::new(Tensor::zeros([batch, seq, c.rank()])),
                cursor: 0,
                len: c.len(),
            })
            .collect();
        Ok(Self {
            batch,
            seq,
            chains: states,
            pinned: None,
            trace: StateTrace {
                chains: vec![Vec::new(); chains.len()],
            },
        })
    }

    /// Replaces every incoming state with the one recorded in `trace`.
    /// Used to evaluate the loss with downstream states held fixed, which
    /// is the function the gradient-stopped backward pass differentiates.
    pub fn pin(mut self, trace: StateTrace) -> Result<Self> {
        if trace.chains.len() != self.chains.len()
            || trace.chains.iter().zip(&self.chains).any(|(t, c)| t.len() != c.len)
        {
            return Err(Error::Contract("pinned trace does not match the chain layout".into()));
        }
        self.pinned = Some(trace);
        Ok(self)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn state(&self, chain: usize) -> &Tensor {
        &self.chains[chain].h
    }

    pub fn cursor(&self, chain: usize) -> usize {
        self.chains[chain].cursor
    }

    pub fn trace(&self) -> &StateTrace {
        &self.trace
    }

    pub fn into_trace(self) -> StateTrace {
        self.trace
    }

    /// Runs `module` on `x` with the chain's current state, stores the
    /// gradient-stopped next state and advances the cursor.
    pub fn chain_step<'t>(
        &mut self,
        chain: usize,
        module: &ModuleVars<'t>,
        x: Var<'t>,
        cfg: &AdapterConfig,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var<'t>> {
        let n_chains = self.chains.len();
        let st = self
            .chains
            .get_mut(chain)
            .ok_or_else(|| Error::Contract(format!("chain {chain} out of range ({n_chains} chains)")))?;
        if module.position != st.cursor || st.cursor >= st.len {
            return Err(Error::Sequencing {
                chain,
                expected: st.cursor,
                actual: module.position,
            });
        }
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.batch || shape[1] != self.seq {
            return Err(Error::dim("chain_step", &shape, &[self.batch, self.seq]));
        }
        let h_in = match &self.pinned {
            Some(p) => p.chains[chain][st.cursor].clone(),
            None => st.h.clone(),
        };
        let out = module_forward(x, &h_in, module, cfg, dropout)?;
        self.trace.chains[chain].push(h_in);
        st.h = out.h_out;
        st.cursor += 1;
        Ok(out.delta)
    }
}

/// Evaluates a whole chain with explicit loops and no tape: projection,
/// state update, normalization and output delta per position. Returns
/// `(delta, h_next)` for every position. Inputs are `[.., d_in]` tensors
/// sharing one leading shape; dropout is not applied.
pub fn run_chain_oracle(chain: &Chain, xs: &[Tensor], cfg: &AdapterConfig) -> Result<Vec<(Tensor, Tensor)>> {
    if xs.len() != chain.len() {
        return Err(Error::Contract(format!(
            "oracle needs {} inputs, got {}",
            chain.len(),
            xs.len()
        )));
    }
    let r = chain.rank();
    let lead: Vec<usize> = xs[0].shape()[..xs[0].ndim().saturating_sub(1)].to_vec();
    let rows: usize = lead.iter().product();
    let mut h = vec![0.0; rows * r];
    let scale = cfg.alpha / r as f64;
    let mut out = Vec::with_capacity(xs.len());

    for (m, x) in chain.modules().iter().zip(xs) {
        let (d, dout) = (m.d_in(), m.d_out());
        if x.numel() != rows * d || x.shape()[..x.ndim() - 1] != *lead {
            return Err(Error::dim("run_chain_oracle", x.shape(), &xs[0].shape()[..]));
        }
        let (wa, wb, wc, wd) = (m.w_a.data(), m.w_b.data(), m.w_c.data(), m.w_d.data());
        let xd = x.data();
        let mut delta = vec![0.0; rows * dout];
        let mut h_next = vec![0.0; rows * r];
        for row in 0..rows {
            let mut x_new = vec![0.0; r];
            for (j, xn) in x_new.iter_mut().enumerate() {
                for p in 0..d {
                    *xn += xd[row * d + p] * wa[p * r + j];
                }
            }
            let hr = &h[row * r..(row + 1) * r];
            for j in 0..r {
                let mut s = hr[j];
                for p in 0..r {
                    s += hr[p] * wc[p * r + j];
                    s += x_new[p] * wd[p * r + j];
                }
                h_next[row * r + j] = s;
            }
            let hn = &h_next[row * r..(row + 1) * r];
            let mut lo = hn[0];
            let mut hi = hn[0];
            for &v in hn {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let denom = hi - lo + cfg.epsilon;
            for k in 0..dout {
                let mut s = 0.0;
                for j in 0..r {
                    s += (x_new[j] + (hn[j] - lo) / denom) * wb[j * dout + k];
                }
                delta[row * dout + k] = scale * s;
            }
        }
        let mut dshape = lead.clone();
        dshape.push(dout);
        let mut hshape = lead.clone();
        hshape.push(r);
        out.push((Tensor::new(dshape, delta)?, Tensor::new(hshape, h_next.clone())?));
        h = h_next;
    }
    Ok(out)
}
