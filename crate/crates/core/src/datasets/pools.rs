//! The labeled pool `(X, G)`, the unlabeled pool `X′` and the hidden labels
//! of `X′`.
//!
//! Sample ids index the shared [`Inputs`]. [`HiddenTruth`] has no public
//! accessor for individual labels: only the simulated oracle can read one,
//! and diagnostics get an aggregate error rate.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Inputs};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Where a ground-truth label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Initial,
    Simulated,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub id: usize,
    pub class: usize,
    pub source: LabelSource,
}

#[derive(Clone, Debug)]
pub struct DataPools {
    inputs: Arc<Inputs>,
    classes: usize,
    labeled: Vec<LabeledEntry>,
    unlabeled: Vec<usize>,
}

impl DataPools {
    /// Builds pools from explicit members. Ids must be distinct and in range.
    pub fn new(inputs: Arc<Inputs>, classes: usize, labeled: Vec<LabeledEntry>, unlabeled: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; inputs.len()];
        for id in labeled.iter().map(|e| e.id).chain(unlabeled.iter().copied()) {
            match seen.get_mut(id) {
                None => return Err(Error::Lookup(format!("sample {id} out of {} samples", inputs.len()))),
                Some(true) => return Err(Error::Parameter(format!("sample {id} listed twice"))),
                Some(s) => *s = true,
            }
        }
        if let Some(e) = labeled.iter().find(|e| e.class >= classes) {
            return Err(Error::Parameter(format!("label {} outside 0..{classes}", e.class)));
        }
        Ok(Self {
            inputs,
            classes,
            labeled,
            unlabeled,
        })
    }

    pub fn inputs(&self) -> &Arc<Inputs> {
        &self.inputs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labeled(&self) -> &[LabeledEntry] {
        &self.labeled
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.id).collect()
    }

    /// Members of `X′` in pool order.
    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    /// `|X| + |X′|`.
    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    /// Moves `id` from `X′` to `(X, G)`.
    pub fn acquire(&mut self, id: usize, class: usize, source: LabelSource) -> Result<()> {
        if class >= self.classes {
            return Err(Error::Parameter(format!("label {class} outside 0..{}", self.classes)));
        }
        let pos = self
            .unlabeled
            .iter()
            .position(|&u| u == id)
            .ok_or_else(|| Error::Lookup(format!("sample {id} is not in the unlabeled pool")))?;
        self.unlabeled.remove(pos);
        self.labeled.push(LabeledEntry { id, class, source });
        Ok(())
    }
}

/// Labels of the unlabeled pool, kept away from the training loop.
#[derive(Clone, Debug, Default)]
pub struct HiddenTruth {
    labels: HashMap<usize, usize>,
}

impl HiddenTruth {
    pub fn new(labels: HashMap<usize, usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.labels.contains_key(&id)
    }

    pub(crate) fn reveal(&self, id: usize) -> Option<usize> {
        self.labels.get(&id).copied()
    }

    /// Fraction of `(id, class)` pairs whose class differs from the truth.
    /// `None` for an empty list or when an id is unknown.
    pub fn error_rate(&self, assigned: &[(usize, usize)]) -> Option<f64> {
        if assigned.is_empty() {
            return None;
        }
        let mut wrong = 0usize;
        for (id, class) in assigned {
            if self.labels.get(id)? != class {
                wrong += 1;
            }
        }
        Some(wrong as f64 / assigned.len() as f64)
    }
}

/// Splits a dataset into `n_labeled` ground-truth samples and an unlabeled
/// remainder whose labels go to the returned [`HiddenTruth`].
///
/// With `balanced`, every class contributes `n_labeled / C` samples.
pub fn make_pools(data: &Dataset, n_labeled: usize, balanced: bool, rng: &mut Rng) -> Result<(DataPools, HiddenTruth)> {
    let n = data.len();
    if n_labeled > n {
        return Err(Error::Config(format!("{n_labeled} labels requested from {n} samples")));
    }
    let mut chosen = if balanced {
        if !n_labeled.is_multiple_of(data.classes) {
            return Err(Error::Config(format!(
                "{n_labeled} labels cannot be split evenly over {} classes",
                data.classes
            )));
        }
        let per = n_labeled / data.classes;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
        for (i, &c) in data.labels.iter().enumerate() {
            by_class[c].push(i);
        }
        let mut chosen = Vec::with_capacity(n_labeled);
        for (c, ids) in by_class.iter_mut().enumerate() {
            if ids.len() < per {
                return Err(Error::Config(format!(
                    "class {c} has {} samples, {per} needed",
                    ids.len()
                )));
            }
            ids.shuffle(rng);
            chosen.extend_from_slice(&ids[..per]);
        }
        chosen
    } else {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(rng);
        ids.truncate(n_labeled);
        ids
    };
    chosen.sort_unstable();
    let mut is_labeled = vec![false; n];
    for &i in &chosen {
        is_labeled[i] = true;
    }
    let labeled = chosen
        .iter()
        .map(|&id| LabeledEntry {
            id,
            class: data.labels[id],
            source: LabelSource::Initial,
        })
        .collect();
    let unlabeled: Vec<usize> = (0..n).filter(|&i| !is_labeled[i]).collect();
    let truth = HiddenTruth::new(unlabeled.iter().map(|&i| (i, data.labels[i])).collect());
    let pools = DataPools::new(data.inputs.clone(), data.classes, labeled, unlabeled)?;
    Ok((pools, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let inputs = Inputs::new(vec![1], (0..n).map(|i| i as f32).collect()).unwrap();
        Dataset::new(inputs, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn acquire_moves_between_pools() {
        let (mut pools, truth) = make_pools(&toy(10, 2), 2, true, &mut Rng::from_seed(0)).unwrap();
        let id = pools.unlabeled()[3];
        let class = truth.reveal(id).unwrap();
        pools.acquire(id, class, LabelSource::Simulated).unwrap();
        assert_eq!(pools.labeled().len(), 3);
        assert_eq!(pools.unlabeled().len(), 7);
        assert!(pools.acquire(id, class, LabelSource::Simulated).is_err());
        assert!(pools.acquire(pools.unlabeled()[0], 2, LabelSource::Human).is_err());
    }

    #[test]
    fn error_rate_counts_mismatches() {
        let truth = HiddenTruth::new([(1, 0), (2, 1), (3, 1)].into_iter().collect());
        assert_eq!(truth.error_rate(&[(1, 0), (2, 0)]), Some(0.5));
        assert_eq!(truth.error_rate(&[]), None);
        assert_eq!(truth.error_rate(&[(9, 0)]), None);
    }

    #[test]
    fn duplicate_members_are_rejected() {
        let inputs = Arc::new(Inputs::new(vec![1], vec![0.0; 3]).unwrap());
        let e = LabeledEntry {
            id: 1,
            class: 0,
            source: LabelSource::Initial,
        };
        assert!(DataPools::new(inputs.clone(), 2, vec![e], vec![0, 1]).is_err());
        assert!(DataPools::new(inputs, 2, vec![e], vec![0, 3]).is_err());
    }
}
