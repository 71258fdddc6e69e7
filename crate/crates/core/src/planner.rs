//! Adapter insertion patterns and trainable-parameter accounting.
//!
//! A plan lists `(layer, matrix kind, method)` slots. Grouping the
//! SSMLoRA entries of one kind in layer order yields the chains that
//! carry hidden state between modules.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which projection of a layer an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    /// First feed-forward projection (`d → d_ff`).
    FeedForward,
    /// Fused attention input projection (`d → 3d`), GPT-2 style.
    FusedQkv,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 5] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::FeedForward,
        MatrixKind::FusedQkv,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MatrixKind::Query => "query",
            MatrixKind::Key => "key",
            MatrixKind::Value => "value",
            MatrixKind::FeedForward => "feed-forward",
            MatrixKind::FusedQkv => "fused-qkv",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Ssmlora,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Ssmlora => "ssmlora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub kind: MatrixKind,
    pub method: Method,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertionPlan {
    pub entries: Vec<PlanEntry>,
}

/// Host dimensions needed for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub width: usize,
    /// Output width of a fused attention projection, e.g. `3 * width`.
    pub fused_qkv_out: Option<usize>,
    /// Feed-forward inner width; required only when feed-forward slots are counted.
    pub ff_width: Option<usize>,
}

impl ModelDims {
    pub fn new(layers: usize, width: usize) -> Self {
        Self {
            layers,
            width,
            fused_qkv_out: None,
            ff_width: None,
        }
    }

    /// `(d_in, d_out)` of the host projection of `kind`.
    pub fn io(&self, kind: MatrixKind) -> Result<(usize, usize)> {
        match kind {
            MatrixKind::Query | MatrixKind::Key | MatrixKind::Value => Ok((self.width, self.width)),
            MatrixKind::FeedForward => self
                .ff_width
                .map(|f| (self.width, f))
                .ok_or_else(|| Error::Config("feed-forward slot needs ff_width".into())),
            MatrixKind::FusedQkv => Ok((self.width, self.fused_qkv_out.unwrap_or(3 * self.width))),
        }
    }
}

/// One plan entry per layer, alternating query (even layers) and value
/// (odd layers); each kind forms its own chain.
pub fn plan_alternating(layers: usize) -> InsertionPlan {
    let entries = (0..layers)
        .map(|layer| PlanEntry {
            layer,
            kind: if layer % 2 == 0 { MatrixKind::Query } else { MatrixKind::Value },
            method: Method::Ssmlora,
        })
        .collect();
    InsertionPlan { entries }
}

/// Fused attention projection of every even layer.
pub fn plan_skip_one(layers: usize) -> InsertionPlan {
    let entries = (0..layers)
        .step_by(2)
        .map(|layer| PlanEntry {
            layer,
            kind: MatrixKind::FusedQkv,
            method: Method::Ssmlora,
        })
        .collect();
    InsertionPlan { entries }
}

/// Every layer gets every requested kind (the LoRA baseline layout).
pub fn plan_dense(layers: usize, kinds: &[MatrixKind]) -> InsertionPlan {
    let entries = (0..layers)
        .flat_map(|layer| {
            kinds.iter().map(move |&kind| PlanEntry {
                layer,
                kind,
                method: Method::Lora,
            })
        })
        .collect();
    InsertionPlan { entries }
}

fn entry_params(dims: &ModelDims, kind: MatrixKind, r: usize, method: Method) -> Result<u64> {
    let (d_in, d_out) = dims.io(kind)?;
    let (d_in, d_out, r) = (d_in as u64, d_out as u64, r as u64);
    let lora = d_in * r + r * d_out;
    Ok(match method {
        Method::Lora => lora,
        Method::Ssmlora => lora + 2 * r * r,
    })
}

/// Trainable adapter parameters when every entry of `plan` uses `method`.
pub fn count_params(plan: &InsertionPlan, dims: &ModelDims, r: usize, method: Method) -> Result<u64> {
    if r == 0 {
        return Err(Error::Config("rank must be at least 1".into()));
    }
    plan.entries
        .iter()
        .map(|e| entry_params(dims, e.kind, r, method))
        .sum()
}

impl InsertionPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same slots, every entry switched to `method`.
    pub fn with_method(mut self, method: Method) -> Self {
        for e in &mut self.entries {
            e.method = method;
        }
        self
    }

    /// Parameter count honoring each entry's own method.
    pub fn param_count(&self, dims: &ModelDims, r: usize) -> Result<u64> {
        if r == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        self.entries
            .iter()
            .map(|e| entry_params(dims, e.kind, r, e.method))
            .sum()
    }

    /// Rejects duplicate slots and layers outside `0..layers`.
    pub fn validate(&self, layers: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if e.layer >= layers {
                return Err(Error::Plan(format!(
                    "layer {} out of range for a {layers}-layer model",
                    e.layer
                )));
            }
            if !seen.insert((e.layer, e.kind)) {
                return Err(Error::Plan(format!(
                    "duplicate adapter at layer {} ({})",
                    e.layer, e.kind
                )));
            }
        }
        Ok(())
    }

    /// Layers of the SSMLoRA entries grouped by kind, in layer order. The
    /// kinds appear in [`MatrixKind`] order.
    pub fn chains(&self) -> Vec<(MatrixKind, Vec<usize>)> {
        let mut out: Vec<(MatrixKind, Vec<usize>)> = Vec::new();
        for kind in MatrixKind::ALL {
            let mut layers: Vec<usize> = self
                .entries
                .iter()
                .filter(|e| e.kind == kind && e.method == Method::Ssmlora)
                .map(|e| e.layer)
                .collect();
            if !layers.is_empty() {
                layers.sort_unstable();
                out.push((kind, layers));
            }
        }
        out
    }

    pub fn union(&self, other: &InsertionPlan) -> InsertionPlan {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().copied());
        InsertionPlan { entries }
    }
}

/// A plan with a display name, as it appears in a budget report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedPlan {
    pub name: String,
    pub plan: InsertionPlan,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub plan: String,
    pub method: Method,
    pub r: usize,
    pub entries: usize,
    pub params: u64,
    /// `params` divided by the first plan's count at the same rank.
    pub ratio_to_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub dims: ModelDims,
    pub rows: Vec<BudgetRow>,
}

impl BudgetReport {
    pub fn row(&self, plan: &str, r: usize) -> Option<&BudgetRow> {
        self.rows.iter().find(|row| row.plan == plan && row.r == r)
    }
}

/// Counts for every `(plan, r)` pair. The first plan is the baseline for
/// ratios; a zero baseline gives a ratio of 0.
pub fn budget_report(plans: &[NamedPlan], dims: &ModelDims, r_values: &[usize]) -> Result<BudgetReport> {
    if plans.is_empty() || r_values.is_empty() {
        return Err(Error::Config("budget report needs at least one plan and one rank".into()));
    }
    let mut rows = Vec::with_capacity(plans.len() * r_values.len());
    for &r in r_values {
        let baseline = count_params(&plans[0].plan, dims, r, plans[0].method)?;
        for p in plans {
            let params = count_params(&p.plan, dims, r, p.method)?;
            rows.push(BudgetRow {
                plan: p.name.clone(),
                method: p.method,
                r,
                entries: p.plan.len(),
                params,
                ratio_to_baseline: if baseline == 0 { 0.0 } else { params as f64 / baseline as f64 },
            });
        }
    }
    Ok(BudgetReport { dims: *dims, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use MatrixKind::*;

    const QV: [MatrixKind; 2] = [Query, Value];

    fn roberta_large() -> ModelDims {
        ModelDims::new(24, 1024)
    }

    #[test]
    fn alternating_l4() {
        let p = plan_alternating(4);
        let slots: Vec<_> = p.entries.iter().map(|e| (e.layer, e.kind)).collect();
        assert_eq!(slots, vec![(0, Query), (1, Value), (2, Query), (3, Value)]);
    }

    #[test]
    fn alternating_l24_splits_evenly() {
        let p = plan_alternating(24);
        assert_eq!(p.len(), 24);
        let chains = p.chains();
        assert_eq!(chains.len(), 2);
        assert!(chains.iter().all(|(_, layers)| layers.len() == 12));
    }

    #[test]
    fn skip_one_l12_even_layers() {
        let p = plan_skip_one(12);
        let layers: Vec<_> = p.entries.iter().map(|e| e.layer).collect();
        assert_eq!(layers, vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(plan_skip_one(1).len(), 1);
    }

    #[test]
    fn dense_counts() {
        assert_eq!(plan_dense(24, &QV).len(), 48);
        assert!(plan_dense(24, &[]).is_empty());
        assert_eq!(plan_dense(1, &[Query]).len(), 1);
    }

    #[test]
    fn roberta_large_table() {
        let dims = roberta_large();
        let dense = plan_dense(24, &QV);
        let alt = plan_alternating(24);
        let expected = [
            (1, 98_304, 49_200),
            (2, 196_608, 98_496),
            (4, 393_216, 197_376),
            (8, 786_432, 396_288),
            (16, 1_572_864, 798_720),
        ];
        for (r, lora, ssm) in expected {
            assert_eq!(count_params(&dense, &dims, r, Method::Lora).unwrap(), lora);
            assert_eq!(count_params(&alt, &dims, r, Method::Ssmlora).unwrap(), ssm);
        }
        assert_eq!(count_params(&InsertionPlan::default(), &dims, 8, Method::Lora).unwrap(), 0);
    }

    #[test]
    fn ratio_closed_form() {
        let dims = roberta_large();
        let plans = [
            NamedPlan { name: "lora".into(), plan: plan_dense(24, &QV), method: Method::Lora },
            NamedPlan { name: "ssm".into(), plan: plan_alternating(24), method: Method::Ssmlora },
        ];
        let rep = budget_report(&plans, &dims, &[8]).unwrap();
        assert_eq!(rep.row("ssm", 8).unwrap().ratio_to_baseline, 0.50390625);

        let small = ModelDims::new(2, 8);
        let plans = [
            NamedPlan { name: "lora".into(), plan: plan_dense(2, &QV), method: Method::Lora },
            NamedPlan { name: "ssm".into(), plan: plan_alternating(2), method: Method::Ssmlora },
        ];
        let rep = budget_report(&plans, &small, &[8]).unwrap();
        assert_eq!(rep.row("ssm", 8).unwrap().ratio_to_baseline, 1.0);
    }

    #[test]
    fn fused_dims() {
        let dims = ModelDims { fused_qkv_out: Some(2304), ..ModelDims::new(12, 768) };
        let n = count_params(&plan_skip_one(12), &dims, 1, Method::Lora).unwrap();
        assert_eq!(n, 6 * (768 + 2304));
    }

    #[test]
    fn feed_forward_needs_width() {
        let dims = ModelDims::new(2, 8);
        assert!(count_params(&plan_dense(2, &[FeedForward]), &dims, 2, Method::Lora).is_err());
        let dims = ModelDims { ff_width: Some(32), ..dims };
        assert_eq!(count_params(&plan_dense(2, &[FeedForward]), &dims, 2, Method::Lora).unwrap(), 2 * (16 + 64));
    }

    #[test]
    fn validate_rejects_duplicates_and_range() {
        let mut p = plan_alternating(4);
        assert!(p.validate(4).is_ok());
        assert!(p.validate(3).is_err());
        p.entries.push(p.entries[0]);
        assert!(matches!(p.validate(4), Err(Error::Plan(_))));
    }

    #[test]
    fn kind_roundtrip() {
        for k in MatrixKind::ALL {
            assert_eq!(k.as_str().parse::<MatrixKind>().unwrap(), k);
        }
        assert!("nope".parse::<MatrixKind>().is_err());
    }
}
