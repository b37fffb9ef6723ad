//! Reconstruction oracles and the two reconstruction losses.
//!
//! An oracle receives the ground-truth patches together with the visible
//! ("unmasked") set and predicts every patch. Oracles are handed the full
//! truth for convenience but must only read the visible patches.
//!
//! * [`masked_mse`] is the selection loss: squared error over hidden patches only.
//! * [`full_mse`] is the whole-image set function used by the submodularity lab.

use crate::error::{KppError, Result};
use crate::patch_grid::{assemble, GridSpec, ImageTensor, PatchArray, PatchIndex};

/// Ordered set of distinct patch indices with a membership bitmap.
///
/// Iteration order is insertion order, which is the greedy acquisition order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    order: Vec<usize>,
    member: Vec<bool>,
}

impl PatchSet {
    pub fn empty(n_patches: usize) -> Self {
        Self {
            order: Vec::new(),
            member: vec![false; n_patches],
        }
    }

    pub fn from_indices(n_patches: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = Self::empty(n_patches);
        for idx in indices {
            set.insert(idx)?;
        }
        Ok(set)
    }

    pub fn full(n_patches: usize) -> Self {
        Self {
            order: (0..n_patches).collect(),
            member: vec![true; n_patches],
        }
    }

    /// Bitmap view. Panics never; the bitmap is always `n_patches` long.
    pub fn from_mask(mask: &[bool]) -> Self {
        Self {
            order: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
            member: mask.to_vec(),
        }
    }

    pub fn insert(&mut self, idx: usize) -> Result<()> {
        match self.member.get(idx) {
            None => Err(KppError::InvalidArgument(format!(
                "patch index {idx} out of range for {} patches",
                self.member.len()
            ))),
            Some(true) => Err(KppError::InvalidArgument(format!(
                "patch index {idx} already selected"
            ))),
            Some(false) => {
                self.member[idx] = true;
                self.order.push(idx);
                Ok(())
            }
        }
    }

    /// Copy of `self` with `idx` appended.
    pub fn with(&self, idx: usize) -> Result<Self> {
        let mut next = self.clone();
        next.insert(idx)?;
        Ok(next)
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.member.get(idx).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ground_size(&self) -> usize {
        self.member.len()
    }

    /// Indices in insertion order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn mask(&self) -> &[bool] {
        &self.member
    }

    /// Members in ascending index order.
    pub fn sorted(&self) -> Vec<usize> {
        self.ascending().collect()
    }

    pub fn ascending(&self) -> impl Iterator<Item = usize> + '_ {
        self.member
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    /// Indices not in the set, ascending.
    pub fn complement(&self) -> impl Iterator<Item = usize> + '_ {
        self.member
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
    }

    pub fn prefix(&self, len: usize) -> Self {
        let mut out = Self::empty(self.member.len());
        for &idx in &self.order[..len.min(self.order.len())] {
            out.member[idx] = true;
            out.order.push(idx);
        }
        out
    }
}

/// An oracle's prediction for every patch plus per-patch squared error against truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    predicted: PatchArray,
    per_patch_sq_err: Vec<f64>,
}

impl Reconstruction {
    /// Wraps a prediction and scores it patch by patch against `truth`.
    pub fn scored(predicted: PatchArray, truth: &PatchArray) -> Result<Self> {
        if !predicted.same_shape(truth) {
            return Err(KppError::Shape("prediction and truth differ in shape".into()));
        }
        let per_patch_sq_err = (0..truth.len())
            .map(|k| sq_err_sum(predicted.patch(k), truth.patch(k)) / truth.patch_len() as f64)
            .collect();
        Ok(Self {
            predicted,
            per_patch_sq_err,
        })
    }

    pub fn patches(&self) -> &PatchArray {
        &self.predicted
    }

    pub fn image(&self) -> Result<ImageTensor> {
        assemble(&self.predicted, self.predicted.grid())
    }

    /// Mean squared error of each patch, averaged over its pixels and channels.
    pub fn per_patch_sq_err(&self) -> &[f64] {
        &self.per_patch_sq_err
    }
}

/// The three loss views every oracle can report for a visible set.
#[derive(Debug, Clone, PartialEq)]
pub struct Losses {
    pub masked_mse: f64,
    pub full_mse: f64,
    pub per_patch_mse: Vec<f64>,
}

/// Behavioral contract for anything that predicts hidden patches from visible ones.
///
/// Implementations must be deterministic and must not read the contents of
/// patches outside `unmasked`.
pub trait Oracle: Send + Sync {
    /// Stable identifier written to reports.
    fn id(&self) -> String;

    /// Whether visible patches are reproduced verbatim in the prediction.
    fn passes_through(&self) -> bool;

    fn reconstruct(&self, truth: &PatchArray, unmasked: &PatchSet) -> Result<Reconstruction>;

    /// Losses for a visible set. Remote oracles override this because they
    /// only return losses, never pixels.
    fn losses(&self, truth: &PatchArray, unmasked: &PatchSet) -> Result<Losses> {
        let recon = self.reconstruct(truth, unmasked)?;
        Ok(Losses {
            masked_mse: masked_mse(&recon, truth, unmasked)?,
            full_mse: full_mse(&recon, truth)?,
            per_patch_mse: recon.per_patch_sq_err,
        })
    }
}

/// Mid-gray value predicted for every pixel when nothing is visible.
pub const BLANK_VALUE: f64 = 0.5;

/// The prediction used for the empty visible set: every pixel mid-gray.
pub fn blank_reconstruction(truth: &PatchArray) -> Result<Reconstruction> {
    let predicted = PatchArray::from_flat(
        truth.grid(),
        truth.channels(),
        vec![BLANK_VALUE; truth.flat().len()],
    )?;
    Reconstruction::scored(predicted, truth)
}

/// Losses for `unmasked`, using [`blank_reconstruction`] when it is empty.
pub fn losses_with_blank(
    oracle: &dyn Oracle,
    truth: &PatchArray,
    unmasked: &PatchSet,
) -> Result<Losses> {
    if !unmasked.is_empty() {
        return oracle.losses(truth, unmasked);
    }
    let recon = blank_reconstruction(truth)?;
    Ok(Losses {
        masked_mse: masked_mse(&recon, truth, unmasked)?,
        full_mse: full_mse(&recon, truth)?,
        per_patch_mse: recon.per_patch_sq_err,
    })
}

fn sq_err_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_visible(truth: &PatchArray, unmasked: &PatchSet) -> Result<()> {
    if unmasked.ground_size() != truth.len() {
        return Err(KppError::Shape(format!(
            "patch set over {} patches, image has {}",
            unmasked.ground_size(),
            truth.len()
        )));
    }
    if unmasked.is_empty() {
        return Err(KppError::EmptyVisibleSet);
    }
    Ok(())
}

/// Mean squared error over hidden patches only; zero when nothing is hidden.
pub fn masked_mse(recon: &Reconstruction, truth: &PatchArray, unmasked: &PatchSet) -> Result<f64> {
    if !recon.predicted.same_shape(truth) || unmasked.ground_size() != truth.len() {
        return Err(KppError::Shape("reconstruction, truth and patch set disagree".into()));
    }
    let mut sum = 0.0;
    let mut hidden = 0usize;
    for k in unmasked.complement() {
        sum += sq_err_sum(recon.predicted.patch(k), truth.patch(k));
        hidden += 1;
    }
    if hidden == 0 {
        return Ok(0.0);
    }
    Ok(sum / (hidden * truth.patch_len()) as f64)
}

/// Mean squared error over the whole image.
pub fn full_mse(recon: &Reconstruction, truth: &PatchArray) -> Result<f64> {
    if !recon.predicted.same_shape(truth) {
        return Err(KppError::Shape("reconstruction and truth differ in shape".into()));
    }
    let sum: f64 = (0..truth.len())
        .map(|k| sq_err_sum(recon.predicted.patch(k), truth.patch(k)))
        .sum();
    Ok(sum / truth.flat().len() as f64)
}

/// Predicts every hidden patch as the element-wise mean of the visible patches.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFill;

impl Oracle for MeanFill {
    fn id(&self) -> String {
        "meanfill".into()
    }

    fn passes_through(&self) -> bool {
        true
    }

    fn reconstruct(&self, truth: &PatchArray, unmasked: &PatchSet) -> Result<Reconstruction> {
        check_visible(truth, unmasked)?;
        let len = truth.patch_len();
        let mut mean = vec![0.0; len];
        for u in unmasked.ascending() {
            for (m, v) in mean.iter_mut().zip(truth.patch(u)) {
                *m += v;
            }
        }
        let count = unmasked.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);

        let mut predicted = truth.clone();
        for k in unmasked.complement() {
            predicted.patch_mut(k).copy_from_slice(&mean);
        }
        Reconstruction::scored(predicted, truth)
    }
}

/// Inverse-distance weighting over grid coordinates: a hidden patch is the
/// average of visible patches weighted by `distance^-alpha`.
#[derive(Debug, Clone, Copy)]
pub struct Idw {
    alpha: f64,
}

impl Idw {
    pub const DEFAULT_ALPHA: f64 = 2.0;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(KppError::InvalidArgument(format!(
                "IDW exponent must be positive, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn weight(&self, grid: GridSpec, from: usize, to: usize) -> f64 {
        let g = grid.grid_side();
        let dr = (from / g) as f64 - (to / g) as f64;
        let dc = (from % g) as f64 - (to % g) as f64;
        (dr * dr + dc * dc).sqrt().powf(-self.alpha)
    }
}

impl Default for Idw {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

impl Oracle for Idw {
    fn id(&self) -> String {
        format!("idw:{}", self.alpha)
    }

    fn passes_through(&self) -> bool {
        true
    }

    fn reconstruct(&self, truth: &PatchArray, unmasked: &PatchSet) -> Result<Reconstruction> {
        check_visible(truth, unmasked)?;
        let grid = truth.grid();
        let visible: Vec<usize> = unmasked.ascending().collect();
        let mut predicted = truth.clone();
        let mut weights = vec![0.0; visible.len()];
        for k in unmasked.complement() {
            for (w, &u) in weights.iter_mut().zip(&visible) {
                *w = self.weight(grid, k, u);
            }
            let total: f64 = weights.iter().sum();
            let out = predicted.patch_mut(k);
            out.fill(0.0);
            for (&w, &u) in weights.iter().zip(&visible) {
                let share = w / total;
                for (o, v) in out.iter_mut().zip(truth.patch(u)) {
                    *o += share * v;
                }
            }
        }
        Reconstruction::scored(predicted, truth)
    }
}

impl PatchSet {
    /// Set holding a single grid index.
    pub fn singleton(n_patches: usize, idx: PatchIndex) -> Result<Self> {
        Self::from_indices(n_patches, [idx.get()])
    }
}
