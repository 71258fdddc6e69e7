//! Plain LoRA pair, the baseline the chained modules are compared against.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use crate::time_module::{AdapterConfig, Dropout};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub w_a: Tensor,
    pub w_b: Tensor,
}

impl LoraAdapter {
    /// Same initialization as a time module's projections: Gaussian `w_a`, zero `w_b`.
    pub fn init(d_in: usize, d_out: usize, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate(d_in)?;
        let mut rng = rng_for(seed, &[0x10a]);
        Ok(Self {
            w_a: Tensor::randn([d_in, cfg.rank], cfg.sigma(d_in), &mut rng),
            w_b: Tensor::zeros([cfg.rank, d_out]),
        })
    }

    pub fn param_count(&self) -> usize {
        self.w_a.numel() + self.w_b.numel()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LoraVars<'t> {
        LoraVars {
            w_a: tape.leaf(self.w_a.clone()),
            w_b: tape.leaf(self.w_b.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars<'t> {
    pub w_a: Var<'t>,
    pub w_b: Var<'t>,
}

/// `(α / r) · dropout(x) · w_a · w_b`.
pub fn lora_forward<'t>(
    x: Var<'t>,
    v: &LoraVars<'t>,
    cfg: &AdapterConfig,
    dropout: Option<&mut Dropout>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let d_in = v.w_a.shape()[0];
    if shape.last() != Some(&d_in) {
        return Err(Error::dim("lora", &shape, &v.w_a.shape()));
    }
    let x = match dropout {
        Some(d) => d.apply(x)?,
        None => x,
    };
    Ok(x.matmul(v.w_a)?.matmul(v.w_b)?.scale(cfg.scaling()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_pair_is_transparent() {
        let cfg = AdapterConfig::new(2);
        let a = LoraAdapter::init(6, 9, &cfg, 4).unwrap();
        assert_eq!(a.param_count(), 6 * 2 + 2 * 9);
        let tape = Tape::new();
        let v = a.bind(&tape);
        let x = tape.constant(Tensor::ones([2, 3, 6]));
        let d = lora_forward(x, &v, &cfg, None).unwrap();
        assert_eq!(d.shape(), vec![2, 3, 9]);
        assert_eq!(d.value().max_abs(), 0.0);
    }
}
