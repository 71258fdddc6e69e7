//! Synthetic sequence-classification tasks.
//!
//! - parity: label is the XOR of the low bit of the first `window` tokens.
//! - copy-classify: a class token sits at position 0 and is repeated at one
//!   later position; all other tokens are filler drawn from outside the
//!   class range. The label is that class.
//! - needle: a marker token (`vocab − 1`) appears once at a uniform
//!   position; the label is the class token right after it.
//!
//! Labels are a function of the tokens alone.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Parity,
    CopyClassify,
    Needle,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::CopyClassify => "copy-classify",
            TaskKind::Needle => "needle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab: usize,
    #[serde(default)]
    pub seed: u64,
    /// Number of labels for copy-classify and needle; parity always has 2.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Leading positions whose bits enter the parity; `None` means all.
    #[serde(default)]
    pub parity_window: Option<usize>,
    /// Sequence lengths for the evaluation split, drawn uniformly per
    /// example. `None` means every example has `seq_len` tokens.
    #[serde(default)]
    pub eval_lengths: Option<Vec<usize>>,
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Count of each label in `0..classes`.
    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::Parity => 2,
            _ => self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let len_ok = |s: usize| -> Result<()> {
            let min = match self.kind {
                TaskKind::Parity => 1,
                _ => 2,
            };
            if s < min {
                return Err(Error::Config(format!(
                    "task.seq_len {s} too short for {}",
                    self.kind.as_str()
                )));
            }
            if let (TaskKind::Parity, Some(w)) = (self.kind, self.parity_window) {
                if w == 0 || w > s {
                    return Err(Error::Config(format!("task.parity_window {w} must lie in 1..={s}")));
                }
            }
            Ok(())
        };
        len_ok(self.seq_len)?;
        for &s in self.eval_lengths.iter().flatten() {
            len_ok(s)?;
        }
        if matches!(&self.eval_lengths, Some(v) if v.is_empty()) {
            return Err(Error::Config("task.eval_lengths must not be empty".into()));
        }
        if self.kind != TaskKind::Parity && self.classes < 2 {
            return Err(Error::Config("task.classes must be >= 2".into()));
        }
        let need = match self.kind {
            TaskKind::Parity => 2,
            TaskKind::CopyClassify => self.classes + 1,
            TaskKind::Needle => self.classes + 2,
        };
        if self.vocab < need {
            return Err(Error::Config(format!(
                "task.vocab {} too small for {} (needs >= {need})",
                self.vocab,
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    /// Largest sequence length appearing in either split.
    pub fn max_len(&self) -> usize {
        self.eval_lengths
            .iter()
            .flatten()
            .copied()
            .chain([self.seq_len])
            .max()
            .unwrap_or(self.seq_len)
    }

    /// The label this task assigns to `tokens`.
    pub fn label_of(&self, tokens: &[usize]) -> Result<usize> {
        match self.kind {
            TaskKind::Parity => {
                let w = self.parity_window.unwrap_or(tokens.len()).min(tokens.len());
                Ok(tokens[..w].iter().fold(0, |acc, t| acc ^ (t & 1)))
            }
            TaskKind::CopyClassify => tokens
                .first()
                .copied()
                .filter(|&c| c < self.classes)
                .ok_or_else(|| Error::Input("copy-classify sequence must start with a class token".into())),
            TaskKind::Needle => {
                let marker = self.vocab - 1;
                tokens
                    .windows(2)
                    .find(|w| w[0] == marker)
                    .map(|w| w[1])
                    .ok_or_else(|| Error::Input("needle sequence has no marker".into()))
            }
        }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let c = self.classes;
        match self.kind {
            TaskKind::Parity => (0..len).map(|_| rng.random_range(0..self.vocab)).collect(),
            TaskKind::CopyClassify => {
                let class = rng.random_range(0..c);
                let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(c..self.vocab)).collect();
                t[0] = class;
                t[rng.random_range(1..len)] = class;
                t
            }
            TaskKind::Needle => {
                let marker = self.vocab - 1;
                let mut t: Vec<usize> = (0..len).map(|_| rng.random_range(c..marker)).collect();
                let p = rng.random_range(0..len - 1);
                t[p] = marker;
                t[p + 1] = rng.random_range(0..c);
                t
            }
        }
    }
}

/// Train and evaluation splits, drawn from independent streams of `spec.seed`.
pub fn gen_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x7a5c, 0]);
    let train = (0..spec.n_train)
        .map(|_| {
            let tokens = spec.sample(spec.seq_len, &mut rng);
            let label = spec.label_of(&tokens)?;
            Ok(Example { tokens, label })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng_for(spec.seed, &[0x7a5c, 1]);
    let eval = (0..spec.n_eval)
        .map(|_| {
            let len = match &spec.eval_lengths {
                Some(v) => *v.choose(&mut rng).expect("validated nonempty"),
                None => spec.seq_len,
            };
            let tokens = spec.sample(len, &mut rng);
            let label = spec.label_of(&tokens)?;
            Ok(Example { tokens, label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset { examples: train }, Dataset { examples: eval }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            seq_len: 16,
            n_train: 200,
            n_eval: 50,
            vocab: 12,
            seed: 1,
            classes: 4,
            parity_window: None,
            eval_lengths: None,
        }
    }

    #[test]
    fn parity_of_zeros_is_zero() {
        assert_eq!(spec(TaskKind::Parity).label_of(&[0; 16]).unwrap(), 0);
        assert_eq!(spec(TaskKind::Parity).label_of(&[1, 0, 3, 0]).unwrap(), 0);
        assert_eq!(spec(TaskKind::Parity).label_of(&[1, 0, 2, 0]).unwrap(), 1);
        let mut s = spec(TaskKind::Parity);
        s.parity_window = Some(2);
        assert_eq!(s.label_of(&[1, 0, 1, 1]).unwrap(), 1);
    }

    #[test]
    fn needle_at_start() {
        let s = spec(TaskKind::Needle);
        assert_eq!(s.label_of(&[11, 3, 5, 6]).unwrap(), 3);
    }

    #[test]
    fn labels_are_functions_of_tokens() {
        for kind in [TaskKind::Parity, TaskKind::CopyClassify, TaskKind::Needle] {
            let s = spec(kind);
            let (tr, ev) = gen_task(&s).unwrap();
            assert_eq!((tr.len(), ev.len()), (200, 50));
            for e in tr.examples.iter().chain(&ev.examples) {
                assert_eq!(s.label_of(&e.tokens).unwrap(), e.label);
                assert!(e.tokens.iter().all(|&t| t < s.vocab));
                assert!(e.label < s.num_classes());
            }
        }
    }

    #[test]
    fn copy_classify_repeats_class_once() {
        let (tr, _) = gen_task(&spec(TaskKind::CopyClassify)).unwrap();
        for e in &tr.examples {
            let n = e.tokens.iter().filter(|&&t| t == e.label).count();
            assert_eq!(n, 2);
            assert!(e.tokens.iter().filter(|&&t| t < 4).count() == 2);
        }
    }

    #[test]
    fn needle_marker_unique() {
        let (tr, _) = gen_task(&spec(TaskKind::Needle)).unwrap();
        for e in &tr.examples {
            assert_eq!(e.tokens.iter().filter(|&&t| t == 11).count(), 1);
        }
    }

    #[test]
    fn vocab_too_small() {
        let mut s = spec(TaskKind::Needle);
        s.vocab = 5;
        assert!(matches!(gen_task(&s), Err(Error::Config(_))));
        let mut s = spec(TaskKind::CopyClassify);
        s.vocab = 4;
        assert!(matches!(gen_task(&s), Err(Error::Config(_))));
        let mut s = spec(TaskKind::Parity);
        s.vocab = 1;
        assert!(matches!(gen_task(&s), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let s = spec(TaskKind::CopyClassify);
        assert_eq!(gen_task(&s).unwrap(), gen_task(&s).unwrap());
        let mut t = s.clone();
        t.seed = 2;
        assert_ne!(gen_task(&s).unwrap().0, gen_task(&t).unwrap().0);
    }

    #[test]
    fn class_balance_within_five_percent() {
        for kind in [TaskKind::Parity, TaskKind::CopyClassify, TaskKind::Needle] {
            let mut s = spec(kind);
            s.n_train = 10_000;
            s.n_eval = 0;
            let (tr, _) = gen_task(&s).unwrap();
            let k = s.num_classes();
            let uniform = 10_000.0 / k as f64;
            for c in tr.label_counts(k) {
                assert!((c as f64 - uniform).abs() / uniform < 0.05, "{kind:?}: {c}");
            }
        }
    }

    #[test]
    fn mixed_eval_lengths() {
        let mut s = spec(TaskKind::Needle);
        s.eval_lengths = Some(vec![4, 8, 16]);
        let (_, ev) = gen_task(&s).unwrap();
        let mut seen: Vec<usize> = ev.examples.iter().map(|e| e.tokens.len()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![4, 8, 16]);
        assert_eq!(s.max_len(), 16);
    }
}
