//! Greedy key-patch selection.
//!
//! [`kpp_greedy`] grows the visible set one patch at a time, each time adding
//! the patch whose inclusion gives the lowest loss. [`lazy_greedy`] reaches
//! the same answer with fewer loss evaluations when the gain is submodular,
//! and [`random_select`] is the uniform baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KppError, Result};
use crate::oracle::{losses_with_blank, Oracle, PatchSet};
use crate::patch_grid::{central_index, GridSpec, PatchArray, PatchIndex};

/// A cost over subsets of `0..ground_size()`; smaller is better.
pub trait Objective: Sync {
    fn ground_size(&self) -> usize;

    fn loss(&self, set: &PatchSet) -> Result<f64>;
}

/// Masked reconstruction error of one image under one oracle.
///
/// The empty set is scored against a mid-gray prediction so that marginal
/// gains are defined from the very first step.
pub struct ImageObjective<'a> {
    oracle: &'a dyn Oracle,
    truth: &'a PatchArray,
}

impl<'a> ImageObjective<'a> {
    pub fn new(oracle: &'a dyn Oracle, truth: &'a PatchArray) -> Self {
        Self { oracle, truth }
    }
}

impl Objective for ImageObjective<'_> {
    fn ground_size(&self) -> usize {
        self.truth.len()
    }

    fn loss(&self, set: &PatchSet) -> Result<f64> {
        Ok(losses_with_blank(self.oracle, self.truth, set)?.masked_mse)
    }
}

/// How the selected set is seeded before the greedy loop starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Start from the central grid patch.
    #[default]
    Central,
    /// Start from the empty set.
    None,
    /// Start from a given patch.
    Explicit(usize),
}

impl InitPolicy {
    /// The seeded patch for a ground set of `n` patches, if any.
    ///
    /// `Central` needs a square grid.
    pub fn initial_index(&self, n: usize) -> Result<Option<usize>> {
        match *self {
            InitPolicy::None => Ok(None),
            InitPolicy::Explicit(idx) if idx < n => Ok(Some(idx)),
            InitPolicy::Explicit(idx) => Err(KppError::InvalidArgument(format!(
                "initial patch {idx} out of range for {n} patches"
            ))),
            InitPolicy::Central => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n || n == 0 {
                    return Err(KppError::InvalidArgument(format!(
                        "central initial patch needs a square grid, got {n} patches"
                    )));
                }
                Ok(Some(central_index(GridSpec::new(side, 1)?).get()))
            }
        }
    }

    pub fn from_index(idx: PatchIndex) -> Self {
        InitPolicy::Explicit(idx.get())
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitPolicy::Central => f.write_str("central"),
            InitPolicy::None => f.write_str("none"),
            InitPolicy::Explicit(idx) => write!(f, "{idx}"),
        }
    }
}

impl FromStr for InitPolicy {
    type Err = KppError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(InitPolicy::Central),
            "none" => Ok(InitPolicy::None),
            other => other.parse().map(InitPolicy::Explicit).map_err(|_| {
                KppError::InvalidArgument(format!(
                    "init policy must be central, none or a patch index, got {other:?}"
                ))
            }),
        }
    }
}

/// Selection budget: a ratio of the ground set and the resolved patch count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub ratio: f64,
    pub n_keep: usize,
}

/// `n_keep = max(1, ⌊r·n⌋)` for `0 < r ≤ 1`.
pub fn resolve_budget(ratio: f64, n: usize) -> Result<Budget> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(KppError::InvalidArgument(format!(
            "budget ratio must lie in (0, 1], got {ratio}"
        )));
    }
    if n == 0 {
        return Err(KppError::InvalidArgument("no patches to select from".into()));
    }
    // The slack absorbs decimal ratios such as 0.29 landing just below an integer product.
    let n_keep = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    Ok(Budget { ratio, n_keep })
}

/// One greedy iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub chosen: usize,
    pub loss_after: f64,
    pub candidates_evaluated: usize,
}

/// Every step of a selection run; step `i` (1-based) leaves `i` patches selected.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionTrace {
    steps: Vec<SelectionStep>,
    set: PatchSet,
}

impl SelectionTrace {
    pub fn steps(&self) -> &[SelectionStep] {
        &self.steps
    }

    pub fn set(&self) -> &PatchSet {
        &self.set
    }

    pub fn chosen(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.chosen).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss_after).collect()
    }

    pub fn total_evaluations(&self) -> usize {
        self.steps.iter().map(|s| s.candidates_evaluated).sum()
    }

    /// The trace a run with budget `n_keep` would have produced.
    pub fn prefix(&self, n_keep: usize) -> SelectionTrace {
        let n_keep = n_keep.min(self.steps.len());
        SelectionTrace {
            steps: self.steps[..n_keep].to_vec(),
            set: self.set.prefix(n_keep),
        }
    }

    /// Loss after the `n_keep`-th patch.
    pub fn loss_at(&self, n_keep: usize) -> Option<f64> {
        n_keep
            .checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .map(|s| s.loss_after)
    }
}

fn check_budget(n: usize, budget: Budget) -> Result<usize> {
    if budget.n_keep == 0 || budget.n_keep > n {
        return Err(KppError::InvalidArgument(format!(
            "cannot keep {} of {n} patches",
            budget.n_keep
        )));
    }
    Ok(n)
}

fn reject_nan(loss: f64, step: usize) -> Result<f64> {
    if loss.is_nan() {
        return Err(KppError::InvalidArgument("objective returned NaN".into()).at_step(step));
    }
    Ok(loss)
}

fn seed_set<O: Objective + ?Sized>(
    objective: &O,
    n: usize,
    init: InitPolicy,
) -> Result<(PatchSet, Vec<SelectionStep>)> {
    let mut set = PatchSet::empty(n);
    let mut steps = Vec::new();
    if let Some(idx) = init.initial_index(n)? {
        set.insert(idx)?;
        let loss = objective.loss(&set).map_err(|e| e.at_step(1))?;
        steps.push(SelectionStep {
            chosen: idx,
            loss_after: reject_nan(loss, 1)?,
            candidates_evaluated: 0,
        });
    }
    Ok((set, steps))
}

/// Losses of `set ∪ {p}` for each candidate, in candidate order.
fn sweep<O: Objective + ?Sized>(
    objective: &O,
    set: &PatchSet,
    candidates: &[usize],
    step: usize,
) -> Result<Vec<f64>> {
    candidates
        .par_iter()
        .map(|&p| {
            let loss = objective
                .loss(&set.with(p)?)
                .map_err(|e| e.at_step(step))?;
            reject_nan(loss, step)
        })
        .collect()
}

/// Greedy minimization of the objective under a cardinality budget.
///
/// Each iteration scores every unselected patch and keeps the lowest loss;
/// exact ties go to the lowest index. The initial patch, if any, counts
/// toward the budget.
pub fn kpp_greedy<O: Objective + ?Sized>(
    objective: &O,
    budget: Budget,
    init: InitPolicy,
) -> Result<SelectionTrace> {
    let n = check_budget(objective.ground_size(), budget)?;
    let (mut set, mut steps) = seed_set(objective, n, init)?;

    while set.len() < budget.n_keep {
        let step = set.len() + 1;
        let candidates: Vec<usize> = set.complement().collect();
        let losses = sweep(objective, &set, &candidates, step)?;

        let mut best: Option<(usize, f64)> = None;
        for (&p, &loss) in candidates.iter().zip(&losses) {
            // Sentinel is +inf: any finite loss replaces it.
            if loss < best.map_or(f64::INFINITY, |(_, l)| l) {
                best = Some((p, loss));
            }
        }
        let (chosen, loss_after) = best.unwrap_or((candidates[0], losses[0]));
        set.insert(chosen)?;
        steps.push(SelectionStep {
            chosen,
            loss_after,
            candidates_evaluated: candidates.len(),
        });
    }
    Ok(SelectionTrace { steps, set })
}

#[derive(Debug, Clone, Copy)]
struct GainEntry {
    gain: f64,
    loss: f64,
    idx: usize,
    // Set size when the gain was computed; equal to the current size means fresh.
    round: usize,
}

impl PartialEq for GainEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for GainEntry {}

impl PartialOrd for GainEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for GainEntry {
    // Max-heap on gain; lower index wins ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Lazy (CELF) greedy over the gain `loss(X) − loss(X ∪ {p})`.
///
/// Marginal gains from earlier rounds are kept as upper bounds; only the
/// heap top is re-scored, and it is accepted once it is fresh and still on
/// top. Matches [`kpp_greedy`] whenever the gain has diminishing returns.
pub fn lazy_greedy<O: Objective + ?Sized>(
    objective: &O,
    budget: Budget,
    init: InitPolicy,
) -> Result<SelectionTrace> {
    let n = check_budget(objective.ground_size(), budget)?;
    let (mut set, mut steps) = seed_set(objective, n, init)?;
    if set.len() >= budget.n_keep {
        return Ok(SelectionTrace { steps, set });
    }

    let mut current = match steps.last() {
        Some(s) => s.loss_after,
        None => reject_nan(objective.loss(&set).map_err(|e| e.at_step(1))?, 1)?,
    };

    let step = set.len() + 1;
    let candidates: Vec<usize> = set.complement().collect();
    let losses = sweep(objective, &set, &candidates, step)?;
    let round = set.len();
    let mut heap: BinaryHeap<GainEntry> = candidates
        .iter()
        .zip(&losses)
        .map(|(&idx, &loss)| GainEntry {
            gain: current - loss,
            loss,
            idx,
            round,
        })
        .collect();
    let mut evaluated = candidates.len();

    while set.len() < budget.n_keep {
        let step = set.len() + 1;
        let top = heap
            .pop()
            .ok_or_else(|| KppError::InvalidArgument("candidate heap exhausted".into()))?;
        if top.round == set.len() {
            set.insert(top.idx)?;
            current = top.loss;
            steps.push(SelectionStep {
                chosen: top.idx,
                loss_after: top.loss,
                candidates_evaluated: evaluated,
            });
            evaluated = 0;
            continue;
        }
        let loss = objective
            .loss(&set.with(top.idx)?)
            .map_err(|e| e.at_step(step))?;
        let loss = reject_nan(loss, step)?;
        evaluated += 1;
        heap.push(GainEntry {
            gain: current - loss,
            loss,
            idx: top.idx,
            round: set.len(),
        });
    }
    Ok(SelectionTrace { steps, set })
}

/// Uniform sample of `n_keep` distinct patches; the initial patch, if any, is included first.
pub fn random_select(n: usize, budget: Budget, seed: u64, init: InitPolicy) -> Result<PatchSet> {
    check_budget(n, budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PatchSet::empty(n);
    if let Some(idx) = init.initial_index(n)? {
        set.insert(idx)?;
    }
    let pool: Vec<usize> = set.complement().collect();
    let extra = budget.n_keep - set.len();
    for pick in rand::seq::index::sample(&mut rng, pool.len(), extra) {
        set.insert(pool[pick])?;
    }
    Ok(set)
}
