//! Admission and acquisition rules over precomputed entropies.

use rand::seq::index;

use super::ThresholdPolicy;
use crate::mc::ClassDistribution;
use crate::rng::Rng;

/// Pseudo-labeled `(id, class)` pairs admitted to the epoch, with the
/// entropy of each.
///
/// `theta` is only read under [`ThresholdPolicy::StepWise`]; admission there
/// is strict, `H < θ`.
pub fn admit(
    ids: &[usize],
    dists: &[ClassDistribution],
    policy: ThresholdPolicy,
    theta: f64,
) -> Vec<(usize, usize, f64)> {
    let take = |h: f64| match policy {
        ThresholdPolicy::AllData => true,
        ThresholdPolicy::StepWise => h < theta,
        ThresholdPolicy::LabeledOnly => false,
    };
    ids.iter()
        .zip(dists)
        .filter_map(|(&id, d)| {
            let h = d.entropy();
            take(h).then(|| (id, d.pseudo_label(), h))
        })
        .collect()
}

/// Positions of the `k` largest entropies, highest first, ties by position.
/// Returns every position when `k` exceeds the length.
pub fn select_max_entropy(entropies: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `k` positions drawn uniformly from the unlabeled entries whose entropy is
/// strictly above the mean over both pools. Missing picks are filled by
/// [`select_max_entropy`] among the rest.
pub fn select_above_average(unlabeled: &[f64], labeled: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = unlabeled.len() + labeled.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mean = unlabeled.iter().chain(labeled).sum::<f64>() / n as f64;
    let eligible: Vec<usize> = (0..unlabeled.len()).filter(|&i| unlabeled[i] > mean).collect();
    if eligible.len() >= k {
        return index::sample(rng, eligible.len(), k).into_iter().map(|j| eligible[j]).collect();
    }
    let mut picked = eligible;
    let rest: Vec<usize> = (0..unlabeled.len()).filter(|i| !picked.contains(i)).collect();
    let rest_h: Vec<f64> = rest.iter().map(|&i| unlabeled[i]).collect();
    let fill = select_max_entropy(&rest_h, k - picked.len());
    picked.extend(fill.into_iter().map(|j| rest[j]));
    picked
}
