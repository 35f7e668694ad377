//! Synthetic classification tasks.
//!
//! - `majority`: the class of a token is `token mod n_classes`; the label is
//!   the class that occurs strictly most often in the sequence.
//! - `keycopy`: the label is `perm[token at key_position] mod n_classes`
//!   for a seed-dependent permutation `perm` of the vocabulary.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model::ToyTransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Majority,
    Keycopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub key_position: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Keycopy,
            n_train: 4096,
            n_eval: 1024,
            key_position: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Strict plurality class of `seq` under `token mod n_classes`, if any.
pub fn majority_label(seq: &[usize], n_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_classes];
    for &t in seq {
        counts[t % n_classes] += 1;
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (label, _) = winners.next()?;
    winners.next().is_none().then_some(label)
}

/// Seed-dependent permutation of `0..vocab`.
pub fn keycopy_permutation(vocab: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..vocab).collect();
    Rng::new(seed)
        .fork("keycopy.permutation")
        .shuffle(&mut perm);
    perm
}

const MAX_ATTEMPTS: usize = 1000;

/// Disjoint train and eval sets, deterministic in `seed`.
pub fn make_task(
    spec: &TaskSpec,
    model: &ToyTransformerConfig,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    model.validate()?;
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(Error::Config("task sizes must be positive".into()));
    }
    let (v, t, c) = (model.vocab_size, model.seq_len, model.n_classes);
    if spec.kind == TaskKind::Keycopy && spec.key_position >= t {
        return Err(Error::Config(format!(
            "key position {} outside sequence length {t}",
            spec.key_position
        )));
    }
    if spec.kind == TaskKind::Majority && v < c {
        return Err(Error::Config(format!(
            "majority needs vocab_size >= n_classes, got {v} < {c}"
        )));
    }
    let perm = keycopy_permutation(v, seed);
    let mut rng = Rng::new(seed).fork("task.samples");
    let mut seen = HashSet::new();
    let mut sample = |rng: &mut Rng| -> Result<(Vec<usize>, usize)> {
        let want = rng.below(c);
        for _ in 0..MAX_ATTEMPTS {
            let seq: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
            let label = match spec.kind {
                TaskKind::Majority => match majority_label(&seq, c) {
                    Some(l) if l == want => l,
                    _ => continue,
                },
                TaskKind::Keycopy => perm[seq[spec.key_position]] % c,
            };
            if seen.insert(seq.clone()) {
                return Ok((seq, label));
            }
        }
        Err(Error::Config(format!(
            "could not draw a fresh {:?} sample in {MAX_ATTEMPTS} attempts; the sequence space is too small",
            spec.kind
        )))
    };
    let mut build = |n: usize, rng: &mut Rng| -> Result<Dataset> {
        let mut tokens = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (s, l) = sample(rng)?;
            tokens.push(s);
            labels.push(l);
        }
        Ok(Dataset { tokens, labels })
    };
    let train = build(spec.n_train, &mut rng)?;
    let eval = build(spec.n_eval, &mut rng)?;
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_examples() {
        assert_eq!(majority_label(&[1, 1, 2, 3], 4), Some(1));
        assert_eq!(majority_label(&[5, 1, 2, 3], 4), Some(1));
        assert_eq!(majority_label(&[0, 1], 4), None);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let cfg = ToyTransformerConfig::default();
        for kind in [TaskKind::Majority, TaskKind::Keycopy] {
            let spec = TaskSpec {
                kind,
                n_train: 300,
                n_eval: 100,
                key_position: 2,
            };
            let a = make_task(&spec, &cfg, 5).unwrap();
            let b = make_task(&spec, &cfg, 5).unwrap();
            assert_eq!(a, b);
            let train: HashSet<_> = a.0.tokens.iter().collect();
            assert!(a.1.tokens.iter().all(|s| !train.contains(s)));
            let c = make_task(&spec, &cfg, 6).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn labels_follow_rules() {
        let cfg = ToyTransformerConfig::default();
        let spec = TaskSpec {
            kind: TaskKind::Keycopy,
            n_train: 200,
            n_eval: 10,
            key_position: 3,
        };
        let perm = keycopy_permutation(cfg.vocab_size, 9);
        let (train, _) = make_task(&spec, &cfg, 9).unwrap();
        for (s, &l) in train.tokens.iter().zip(&train.labels) {
            assert_eq!(l, perm[s[3]] % cfg.n_classes);
        }
        let spec = TaskSpec {
            kind: TaskKind::Majority,
            ..spec
        };
        let (train, _) = make_task(&spec, &cfg, 9).unwrap();
        for (s, &l) in train.tokens.iter().zip(&train.labels) {
            assert_eq!(majority_label(s, cfg.n_classes), Some(l));
        }
    }

    #[test]
    fn labels_are_roughly_uniform() {
        let cfg = ToyTransformerConfig::default();
        for kind in [TaskKind::Majority, TaskKind::Keycopy] {
            let spec = TaskSpec {
                kind,
                n_train: 4096,
                n_eval: 16,
                key_position: 0,
            };
            let (train, _) = make_task(&spec, &cfg, 1).unwrap();
            let mut counts = vec![0usize; cfg.n_classes];
            train.labels.iter().for_each(|&l| counts[l] += 1);
            let uniform = 4096.0 / cfg.n_classes as f64;
            for c in counts {
                assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "{kind:?} {c}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let cfg = ToyTransformerConfig::default();
        let spec = TaskSpec {
            key_position: 8,
            ..TaskSpec::default()
        };
        assert!(make_task(&spec, &cfg, 0).is_err());
        let tiny = ToyTransformerConfig {
            vocab_size: 2,
            seq_len: 1,
            ..cfg
        };
        assert!(make_task(&TaskSpec::default(), &tiny, 0).is_err());
    }
}
