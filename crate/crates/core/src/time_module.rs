//! The SSMLoRA adapter unit.
//!
//! A [`TimeModule`] holds four trainable matrices: the down projection
//! `w_a` (`d_in × r`), the up projection `w_b` (`r × d_out`), the state
//! matrix `w_c` and the control matrix `w_d` (both `r × r`). For an input
//! `x` and incoming state `h` one step computes
//!
//! ```text
//! x_new  = x · w_a
//! h_next = h · w_c + x_new · w_d + h
//! h_norm = (h_next − min) / (max − min + ε)      per token, over r
//! delta  = (α / r) · (x_new + h_norm) · w_b
//! ```
//!
//! and hands `h_next` to the next module on its chain as a constant, so
//! no gradient crosses from one module to the previous one through the
//! state.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stop_gradient, Tape, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Standard deviation of `w_a` entries; `None` means `1/sqrt(d_in)`.
    #[serde(default)]
    pub init_sigma: Option<f64>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_alpha() -> f64 {
    16.0
}
fn default_epsilon() -> f64 {
    1e-5
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self::new(8)
    }
}

impl AdapterConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            init_sigma: None,
            dropout: default_dropout(),
        }
    }

    /// The `α / r` factor applied to every adapter delta.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn sigma(&self, d_in: usize) -> f64 {
        self.init_sigma.unwrap_or(1.0 / (d_in as f64).sqrt())
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_in {
            return Err(Error::Config(format!(
                "rank {} must lie in 1..={d_in}",
                self.rank
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if let Some(s) = self.init_sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("init_sigma must be non-negative, got {s}")));
            }
        }
        Ok(())
    }
}

/// Inverted dropout on the adapter input path.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: rng_for(seed, &[0xd809]),
        }
    }

    pub fn apply<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let shape = x.shape();
        let mask = Tensor::from_fn(shape, |_| {
            if self.rng.random::<f64>() < self.p {
                0.0
            } else {
                keep
            }
        });
        x.mul(x.tape().constant(mask))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeModule {
    pub w_a: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub w_d: Tensor,
    /// Position on the owning chain.
    pub position: usize,
}

impl TimeModule {
    /// Gaussian `w_a`, zero `w_b`, `w_c`, `w_d`. Deterministic in `seed`.
    pub fn init(d_in: usize, d_out: usize, cfg: &AdapterConfig, position: usize, seed: u64) -> Result<Self> {
        cfg.validate(d_in)?;
        let r = cfg.rank;
        let mut rng = rng_for(seed, &[0x7a, position as u64]);
        Ok(Self {
            w_a: Tensor::randn([d_in, r], cfg.sigma(d_in), &mut rng),
            w_b: Tensor::zeros([r, d_out]),
            w_c: Tensor::zeros([r, r]),
            w_d: Tensor::zeros([r, r]),
            position,
        })
    }

    /// Builds a module from explicit matrices, checking their shapes agree.
    pub fn from_parts(w_a: Tensor, w_b: Tensor, w_c: Tensor, w_d: Tensor, position: usize) -> Result<Self> {
        if w_a.ndim() != 2 {
            return Err(Error::dim("time module w_a", w_a.shape(), &[]));
        }
        let r = w_a.shape()[1];
        if w_b.ndim() != 2 || w_b.shape()[0] != r {
            return Err(Error::dim("time module w_b", w_a.shape(), w_b.shape()));
        }
        for w in [&w_c, &w_d] {
            if w.shape() != [r, r] {
                return Err(Error::dim("time module state matrices", w_a.shape(), w.shape()));
            }
        }
        Ok(Self { w_a, w_b, w_c, w_d, position })
    }

    pub fn d_in(&self) -> usize {
        self.w_a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w_b.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.w_a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w_a.numel() + self.w_b.numel() + self.w_c.numel() + self.w_d.numel()
    }

    pub fn matrices(&self) -> [(&'static str, &Tensor); 4] {
        [("w_a", &self.w_a), ("w_b", &self.w_b), ("w_c", &self.w_c), ("w_d", &self.w_d)]
    }

    pub fn matrices_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_a, &mut self.w_b, &mut self.w_c, &mut self.w_d]
    }

    /// Registers the four matrices as trainable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModuleVars<'t> {
        ModuleVars {
            w_a: tape.leaf(self.w_a.clone()),
            w_b: tape.leaf(self.w_b.clone()),
            w_c: tape.leaf(self.w_c.clone()),
            w_d: tape.leaf(self.w_d.clone()),
            position: self.position,
        }
    }

    /// Evaluates one step on plain values (no dropout).
    pub fn forward_values(&self, x: &Tensor, h_in: &Tensor, cfg: &AdapterConfig) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let vars = self.bind(&tape);
        let x = tape.constant(x.clone());
        let out = module_forward(x, &Arc::new(h_in.clone()), &vars, cfg, None)?;
        Ok(((*out.delta.value()).clone(), (*out.h_out).clone()))
    }
}

/// A [`TimeModule`] bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct ModuleVars<'t> {
    pub w_a: Var<'t>,
    pub w_b: Var<'t>,
    pub w_c: Var<'t>,
    pub w_d: Var<'t>,
    pub position: usize,
}

impl<'t> ModuleVars<'t> {
    pub fn leaves(&self) -> [Var<'t>; 4] {
        [self.w_a, self.w_b, self.w_c, self.w_d]
    }

    fn d_in(&self) -> usize {
        self.w_a.shape()[0]
    }
}

/// `x · w_a`, with dropout on `x` when `dropout` is given.
pub fn project_down<'t>(x: Var<'t>, m: &ModuleVars<'t>, dropout: Option<&mut Dropout>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.last() != Some(&m.d_in()) {
        return Err(Error::dim("project_down", &shape, &m.w_a.shape()));
    }
    let x = match dropout {
        Some(d) => d.apply(x)?,
        None => x,
    };
    x.matmul(m.w_a)
}

/// `h · w_c + x_new · w_d + h`.
pub fn state_update<'t>(h: Var<'t>, x_new: Var<'t>, m: &ModuleVars<'t>) -> Result<Var<'t>> {
    let (hs, xs) = (h.shape(), x_new.shape());
    if hs != xs {
        return Err(Error::dim("state_update", &hs, &xs));
    }
    h.matmul(m.w_c)?.add(x_new.matmul(m.w_d)?)?.add(h)
}

/// Per-token min-max rescaling over the rank axis; outputs lie in `[0, 1)`.
pub fn normalize_state<'t>(h_next: Var<'t>, epsilon: f64) -> Result<Var<'t>> {
    h_next.minmax_normalize(epsilon)
}

#[derive(Debug, Clone)]
pub struct ModuleOutput<'t> {
    /// Additive correction to the host projection output.
    pub delta: Var<'t>,
    /// Gradient-stopped next state for the following module.
    pub h_out: Arc<Tensor>,
}

pub fn module_forward<'t>(
    x: Var<'t>,
    h_in: &Arc<Tensor>,
    m: &ModuleVars<'t>,
    cfg: &AdapterConfig,
    dropout: Option<&mut Dropout>,
) -> Result<ModuleOutput<'t>> {
    let tape = x.tape();
    let x_new = project_down(x, m, dropout)?;
    let h = tape.constant_arc(h_in.clone());
    let h_next = state_update(h, x_new, m)?;
    let h_norm = normalize_state(h_next, cfg.epsilon)?;
    let delta = x_new.add(h_norm)?.matmul(m.w_b)?.scale(cfg.scaling());
    Ok(ModuleOutput {
        delta,
        h_out: stop_gradient(h_next).value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn cfg(rank: usize) -> AdapterConfig {
        AdapterConfig {
            dropout: 0.0,
            ..AdapterConfig::new(rank)
        }
    }

    fn seeded_module(d: usize, r: usize, seed: u64) -> TimeModule {
        let mut rng = rng_for(seed, &[1]);
        TimeModule::from_parts(
            Tensor::randn([d, r], 0.5, &mut rng),
            Tensor::randn([r, d], 0.5, &mut rng),
            Tensor::randn([r, r], 0.5, &mut rng),
            Tensor::randn([r, r], 0.5, &mut rng),
            0,
        )
        .unwrap()
    }

    /// Eqs. 5 → 4 → 8 → 10 on raw slices for a `[n, d]` input.
    fn straight_line(m: &TimeModule, x: &Tensor, h: &Tensor, c: &AdapterConfig) -> (Vec<f64>, Vec<f64>) {
        let (d, r, dout) = (m.d_in(), m.rank(), m.d_out());
        let n = x.numel() / d;
        let at = |t: &Tensor, i: usize, j: usize, cols: usize| t.data()[i * cols + j];
        let mut delta = vec![0.0; n * dout];
        let mut h_next = vec![0.0; n * r];
        for row in 0..n {
            let mut xn = vec![0.0; r];
            for j in 0..r {
                for p in 0..d {
                    xn[j] += at(x, row, p, d) * at(&m.w_a, p, j, r);
                }
            }
            for j in 0..r {
                let mut s = at(h, row, j, r);
                for p in 0..r {
                    s += at(h, row, p, r) * at(&m.w_c, p, j, r) + xn[p] * at(&m.w_d, p, j, r);
                }
                h_next[row * r + j] = s;
            }
            let hr = &h_next[row * r..(row + 1) * r];
            let lo = hr.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = hr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for k in 0..dout {
                let mut s = 0.0;
                for j in 0..r {
                    s += (xn[j] + (hr[j] - lo) / (hi - lo + c.epsilon)) * at(&m.w_b, j, k, dout);
                }
                delta[row * dout + k] = c.scaling() * s;
            }
        }
        (delta, h_next)
    }

    #[test]
    fn init_zero_matrices() {
        for (d, r) in [(4, 1), (16, 4), (64, 8)] {
            let m = TimeModule::init(d, d, &cfg(r), 3, 99).unwrap();
            assert_eq!(m.w_b.max_abs(), 0.0);
            assert_eq!(m.w_c.max_abs(), 0.0);
            assert_eq!(m.w_d.max_abs(), 0.0);
            assert!(m.w_a.data().iter().all(|&v| v != 0.0));
            assert_eq!(m.position, 3);
        }
    }

    #[test]
    fn init_rejects_rank_above_width() {
        assert!(matches!(TimeModule::init(4, 4, &cfg(5), 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn init_sigma_zero_is_noop() {
        let c = AdapterConfig { init_sigma: Some(0.0), ..cfg(4) };
        let m = TimeModule::init(4, 4, &c, 0, 1).unwrap();
        assert_eq!(m.w_a.max_abs(), 0.0);
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64 - 7.0);
        let (delta, h) = m.forward_values(&x, &Tensor::zeros([2, 3, 4]), &c).unwrap();
        assert_eq!(delta.max_abs(), 0.0);
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn init_statistics() {
        let (d, r) = (64, 8);
        let c = cfg(r);
        let m = TimeModule::init(d, d, &c, 0, 7).unwrap();
        let n = (d * r) as f64;
        let sigma = c.sigma(d);
        let mean = m.w_a.sum() / n;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        let sd = (m.w_a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - sigma).abs() < 0.2 * sigma, "sd {sd} vs {sigma}");
        assert_eq!(m, TimeModule::init(d, d, &c, 0, 7).unwrap());
    }

    #[test]
    fn project_down_cases() {
        let tape = Tape::new();
        let m = TimeModule::from_parts(Tensor::eye(3), Tensor::eye(3), Tensor::zeros([3, 3]), Tensor::zeros([3, 3]), 0).unwrap();
        let vars = m.bind(&tape);
        let x0 = Tensor::from_fn([2, 2, 3], |i| i as f64 * 0.5);
        let x = tape.constant(x0.clone());
        assert_eq!(*project_down(x, &vars, None).unwrap().value(), x0);
        let z = tape.constant(Tensor::zeros([2, 2, 3]));
        assert_eq!(project_down(z, &vars, None).unwrap().value().max_abs(), 0.0);
        let bad = tape.constant(Tensor::zeros([2, 4]));
        assert!(matches!(project_down(bad, &vars, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn project_down_matches_loop() {
        let m = seeded_module(6, 3, 4);
        let x0 = Tensor::randn([2, 5, 6], 1.0, &mut rng_for(4, &[2]));
        let tape = Tape::new();
        let vars = m.bind(&tape);
        let got = project_down(tape.constant(x0.clone()), &vars, None).unwrap().value();
        for row in 0..10 {
            for j in 0..3 {
                let e: f64 = (0..6).map(|p| x0.data()[row * 6 + p] * m.w_a.data()[p * 3 + j]).sum();
                assert!((got.data()[row * 3 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_update_cases() {
        let tape = Tape::new();
        let r = 3;
        let zero = TimeModule::from_parts(Tensor::eye(r), Tensor::eye(r), Tensor::zeros([r, r]), Tensor::zeros([r, r]), 0).unwrap();
        let v = zero.bind(&tape);
        let h = tape.constant(Tensor::zeros([1, 2, r]));
        let xn = tape.constant(Tensor::from_fn([1, 2, r], |i| i as f64));
        assert_eq!(state_update(h, xn, &v).unwrap().value().max_abs(), 0.0);

        let ident = TimeModule::from_parts(Tensor::eye(r), Tensor::eye(r), Tensor::zeros([r, r]), Tensor::eye(r), 0).unwrap();
        let v = ident.bind(&tape);
        let h0 = Tensor::from_fn([1, 2, r], |i| 10.0 - i as f64);
        let h = tape.constant(h0.clone());
        let got = state_update(h, xn, &v).unwrap().value();
        assert_eq!(*got, xn.value().add(&h0).unwrap());

        let bad = tape.constant(Tensor::zeros([1, 3, r]));
        assert!(state_update(bad, xn, &v).is_err());
    }

    #[test]
    fn state_update_closed_form() {
        let m = seeded_module(4, 4, 8);
        let mut rng = rng_for(8, &[3]);
        let h0 = Tensor::randn([3, 4], 1.0, &mut rng);
        let x0 = Tensor::randn([3, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let v = m.bind(&tape);
        let got = state_update(tape.constant(h0.clone()), tape.constant(x0.clone()), &v).unwrap().value();
        // h (W_c + I) + x_new W_d
        let mut wc_i = m.w_c.clone();
        for i in 0..4 {
            wc_i.data_mut()[i * 4 + i] += 1.0;
        }
        for row in 0..3 {
            for j in 0..4 {
                let mut e = 0.0;
                for p in 0..4 {
                    e += h0.data()[row * 4 + p] * wc_i.data()[p * 4 + j];
                    e += x0.data()[row * 4 + p] * m.w_d.data()[p * 4 + j];
                }
                assert!((got.data()[row * 4 + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_cases() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full([1, 5], 3.7));
        assert!(normalize_state(c, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
        let h = tape.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
        let out = normalize_state(h, 1e-5).unwrap().value();
        assert_eq!(out.data(), &[0.0, 1.0 / (1.0 + 1e-5)]);

        let h0 = Tensor::randn([1, 8], 2.0, &mut rng_for(5, &[]));
        let out = normalize_state(tape.constant(h0.clone()), 1e-5).unwrap().value();
        let (mut lo, mut hi) = (0, 0);
        for i in 0..8 {
            if h0.data()[i] < h0.data()[lo] {
                lo = i;
            }
            if h0.data()[i] > h0.data()[hi] {
                hi = i;
            }
        }
        let range = h0.data()[hi] - h0.data()[lo];
        assert_eq!(out.data()[lo], 0.0);
        assert!((out.data()[hi] - range / (range + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_nan() {
        let tape = Tape::new();
        let h = tape.constant(Tensor::new([2], vec![f64::INFINITY, 0.0]).unwrap());
        assert!(matches!(normalize_state(h, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn fresh_module_delta_is_zero() {
        let c = AdapterConfig::new(4);
        let m = TimeModule::init(8, 8, &c, 0, 3).unwrap();
        let x = Tensor::randn([2, 3, 8], 1.0, &mut rng_for(1, &[]));
        let (delta, _) = m.forward_values(&x, &Tensor::zeros([2, 3, 4]), &c).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert_eq!(delta.shape(), x.shape());
    }

    #[test]
    fn identity_module_passes_input_through() {
        let r = 3;
        let c = AdapterConfig { alpha: r as f64, ..cfg(r) };
        let m = TimeModule::from_parts(Tensor::eye(r), Tensor::eye(r), Tensor::zeros([r, r]), Tensor::zeros([r, r]), 0).unwrap();
        let x = Tensor::randn([2, 2, r], 1.0, &mut rng_for(2, &[]));
        let (delta, h) = m.forward_values(&x, &Tensor::zeros([2, 2, r]), &c).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        assert_eq!(delta, x);
    }

    #[test]
    fn module_matches_straight_line_oracle() {
        let c = cfg(4);
        let m = seeded_module(6, 4, 17);
        let mut rng = rng_for(17, &[9]);
        let x = Tensor::randn([2, 3, 6], 1.0, &mut rng);
        let h = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let (delta, h_out) = m.forward_values(&x, &h, &c).unwrap();
        let (ed, eh) = straight_line(&m, &x, &h, &c);
        for (a, b) in delta.data().iter().zip(&ed) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in h_out.data().iter().zip(&eh) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn doubling_alpha_doubles_delta() {
        let c = cfg(4);
        let c2 = AdapterConfig { alpha: 2.0 * c.alpha, ..c };
        let m = seeded_module(6, 4, 23);
        let mut rng = rng_for(23, &[1]);
        let x = Tensor::randn([4, 6], 1.0, &mut rng);
        let h = Tensor::randn([4, 4], 1.0, &mut rng);
        let (d1, h1) = m.forward_values(&x, &h, &c).unwrap();
        let (d2, h2) = m.forward_values(&x, &h, &c2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(d1.scale(2.0), d2);
    }

    #[test]
    fn dropout_zero_is_identity_and_masks_otherwise() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([100]));
        let mut none = Dropout::new(0.0, 1);
        assert_eq!(none.apply(x).unwrap().id(), x.id());
        let mut half = Dropout::new(0.5, 1);
        let y = half.apply(x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.data().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig::new(8).validate(64).is_ok());
        assert!(AdapterConfig::new(0).validate(64).is_err());
        assert!(AdapterConfig { epsilon: 0.0, ..AdapterConfig::new(2) }.validate(4).is_err());
        assert!(AdapterConfig { dropout: 1.0, ..AdapterConfig::new(2) }.validate(4).is_err());
    }
}
