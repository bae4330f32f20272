use rand::seq::SliceRandom;

use super::config::{Cycle, TrainConfig};
use crate::augment::RngStream;

/// One optimizer step's data: which labeled dataset (and so which `C_k`),
/// which of its items, and which unlabeled items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedStep {
    pub dataset: usize,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub steps: Vec<PlannedStep>,
}

/// Stream index reserved for epoch shuffles; step streams use the global
/// step number.
const PLAN_STREAM: u64 = 1 << 48;

fn take(order: &[usize], cursor: &mut usize, n: usize) -> Vec<usize> {
    let n = n.min(order.len());
    let out = (0..n).map(|i| order[(*cursor + i) % order.len()]).collect();
    *cursor = (*cursor + n) % order.len().max(1);
    out
}

/// Default number of steps: enough labeled batches to see every labeled
/// image once.
pub fn default_steps_per_epoch(labeled_sizes: &[usize], cfg: &TrainConfig) -> usize {
    let total: usize = labeled_sizes.iter().sum();
    total.div_ceil(cfg.labeled_batch).max(1)
}

/// Deterministic plan for `epoch`. Every step draws from a single labeled
/// dataset; datasets alternate round-robin per step (or per epoch).
pub fn plan_epoch(epoch: usize, labeled_sizes: &[usize], unlabeled_size: usize, cfg: &TrainConfig) -> BatchPlan {
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| default_steps_per_epoch(labeled_sizes, cfg));
    let mut rng = RngStream::with_stream(cfg.seed, PLAN_STREAM + epoch as u64);
    let orders: Vec<Vec<usize>> = labeled_sizes
        .iter()
        .map(|&n| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut unl: Vec<usize> = (0..unlabeled_size).collect();
    unl.shuffle(&mut rng);

    let mut cursors = vec![0; labeled_sizes.len()];
    let mut ucursor = 0;
    let n = labeled_sizes.len();
    let steps = (0..steps)
        .map(|s| {
            let dataset = match cfg.cycle {
                Cycle::Step => s % n,
                Cycle::Epoch => epoch % n,
            };
            PlannedStep {
                dataset,
                labeled: take(&orders[dataset], &mut cursors[dataset], cfg.labeled_batch),
                unlabeled: take(&unl, &mut ucursor, cfg.unlabeled_batch),
            }
        })
        .collect();
    BatchPlan { steps }
}
