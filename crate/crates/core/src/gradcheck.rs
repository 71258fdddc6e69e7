//! Finite-difference verification of adapter gradients.
//!
//! The backward pass treats every incoming chain state as a constant. The
//! matching scalar function therefore evaluates the loss with all incoming
//! states pinned to the values recorded at the unperturbed point: moving a
//! coordinate of module `t` changes its own output but not the state seen
//! by module `t + 1`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::encoder::{ForwardOptions, FrozenEncoder, TokenBatch};
use crate::error::{Error, Result};
use crate::finite_diff::finite_diff_at;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Central-difference step.
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_coords")]
    pub coords_per_matrix: usize,
    /// Denominator floor of the relative error, so that two gradients
    /// that are both far below the finite-difference noise compare equal.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub seed: u64,
    /// Also check the classifier head.
    #[serde(default)]
    pub include_head: bool,
    /// Pin incoming chain states. Turning this off compares against the
    /// full derivative, which the gradient stop deliberately omits.
    #[serde(default = "default_true")]
    pub pin_states: bool,
}

fn default_step() -> f64 {
    1e-5
}
fn default_coords() -> usize {
    64
}
fn default_floor() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: default_step(),
            coords_per_matrix: default_coords(),
            floor: default_floor(),
            seed: 0,
            include_head: false,
            pin_states: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Largest relative error among coordinates of tensors whose name
    /// ends with `suffix`.
    pub fn max_rel_err_for(&self, suffix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.tensor.ends_with(suffix))
            .map(|c| c.rel_err)
            .fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Compares backward gradients of the trainable tensors against central
/// differences of the dropout-free loss on `(tokens, labels)`. Up to
/// `coords_per_matrix` coordinates per tensor are drawn uniformly without
/// replacement.
pub fn gradcheck(
    model: &FrozenEncoder,
    tokens: &TokenBatch,
    labels: &[usize],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::Contract(format!("gradcheck step must be > 0, got {}", opts.step)));
    }
    let eval = ForwardOptions::eval();
    let (loss, grads) = model.loss_and_grads(tokens, labels, &eval)?;
    let fd_opts = if opts.pin_states {
        ForwardOptions {
            pinned: Some(model.state_trace(tokens)?),
            ..ForwardOptions::eval()
        }
    } else {
        eval
    };

    let names = model.trainable_names();
    let mut work = model.clone();
    let mut checks = Vec::new();
    for (ti, (name, grad)) in names.iter().zip(&grads).enumerate() {
        if name.starts_with("head.") && !opts.include_head {
            continue;
        }
        let n = grad.numel();
        let mut rng = rng_for(opts.seed, &[0x9c, ti as u64]);
        let mut coords = sample(&mut rng, n, opts.coords_per_matrix.min(n)).into_vec();
        coords.sort_unstable();
        let theta = model.trainable()[ti].1.clone();
        let numeric = finite_diff_at(
            |t| {
                *work.trainable_mut()[ti] = t.clone();
                work.loss(tokens, labels, &fd_opts)
            },
            &theta,
            &coords,
            opts.step,
        )?;
        *work.trainable_mut()[ti] = theta;
        for (&j, num) in coords.iter().zip(numeric) {
            let analytic = grad.data()[j];
            checks.push(CoordCheck {
                tensor: name.clone(),
                index: j,
                analytic,
                numeric: num,
                rel_err: relative_error(analytic, num, opts.floor),
            });
        }
    }
    let worst = checks
        .iter()
        .fold(None::<&CoordCheck>, |w, c| match w {
            Some(w) if w.rel_err >= c.rel_err => Some(w),
            _ => Some(c),
        })
        .cloned();
    Ok(GradcheckReport {
        loss,
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        worst,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{attach_adapters, build_encoder, EncoderConfig, Pooling};
    use crate::time_module::AdapterConfig;
    use crate::planner::{plan_alternating, plan_dense, InsertionPlan, MatrixKind};

    fn model(plan: &InsertionPlan, perturb: Option<f64>) -> FrozenEncoder {
        let enc = EncoderConfig {
            layers: 4,
            width: 8,
            heads: 2,
            ff_width: 12,
            vocab: 7,
            max_seq: 5,
            classes: 3,
            fused_qkv: false,
            pooling: Pooling::Mean,
        };
        let mut m = attach_adapters(build_encoder(&enc, 5).unwrap(), plan, &AdapterConfig::new(3), 6).unwrap();
        if let Some(std) = perturb {
            m.perturb_adapters(std, 7);
        }
        m
    }

    fn sample_batch() -> (TokenBatch, Vec<usize>) {
        (TokenBatch::new(2, 5, vec![1, 3, 0, 6, 2, 5, 5, 4, 1, 0]).unwrap(), vec![2, 0])
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(1.0, 1.0, 1e-8), 0.0);
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn fresh_adapters_pass() {
        let m = model(&plan_alternating(4), None);
        let (x, y) = sample_batch();
        let rep = gradcheck(&m, &x, &y, &GradcheckOptions::default()).unwrap();
        assert!(rep.passes(1e-5), "{:?}", rep.worst);
    }

    #[test]
    fn perturbed_adapters_and_head_pass() {
        for plan in [plan_alternating(4), plan_dense(4, &[MatrixKind::Query, MatrixKind::Value])] {
            let m = model(&plan, Some(0.3));
            let (x, y) = sample_batch();
            let opts = GradcheckOptions {
                include_head: true,
                ..GradcheckOptions::default()
            };
            let rep = gradcheck(&m, &x, &y, &opts).unwrap();
            assert!(rep.passes(1e-5), "{:?}", rep.worst);
            assert!(rep.checks.iter().any(|c| c.tensor == "head.w"));
            assert!(rep.checks.iter().any(|c| c.analytic.abs() > 1e-6));
        }
    }

    #[test]
    fn every_adapter_matrix_sampled() {
        let m = model(&plan_alternating(4), Some(0.3));
        let (x, y) = sample_batch();
        let opts = GradcheckOptions {
            coords_per_matrix: 5,
            ..GradcheckOptions::default()
        };
        let rep = gradcheck(&m, &x, &y, &opts).unwrap();
        for name in m.trainable_names().iter().filter(|n| !n.starts_with("head.")) {
            assert_eq!(rep.checks.iter().filter(|c| &c.tensor == name).count(), 5, "{name}");
        }
    }

    #[test]
    fn unpinned_differences_disagree() {
        // The backward pass omits the path through downstream states, so
        // the full derivative must differ once chains carry state.
        let m = model(&plan_alternating(4), Some(0.3));
        let (x, y) = sample_batch();
        let opts = GradcheckOptions {
            pin_states: false,
            ..GradcheckOptions::default()
        };
        let rep = gradcheck(&m, &x, &y, &opts).unwrap();
        assert!(!rep.passes(1e-3), "max {}", rep.max_rel_err);
    }

    #[test]
    fn zero_tolerance_fails_on_noise() {
        let m = model(&plan_alternating(4), Some(0.3));
        let (x, y) = sample_batch();
        let rep = gradcheck(&m, &x, &y, &GradcheckOptions::default()).unwrap();
        assert!(!rep.passes(0.0));
    }

    #[test]
    fn bad_step_rejected() {
        let m = model(&plan_alternating(4), None);
        let (x, y) = sample_batch();
        for step in [0.0, -1e-5, f64::NAN] {
            let opts = GradcheckOptions {
                step,
                ..GradcheckOptions::default()
            };
            assert!(gradcheck(&m, &x, &y, &opts).is_err());
        }
    }
}
