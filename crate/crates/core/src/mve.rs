//! Multi-scale local visual fields.
//!
//! The student's encoded visible tokens and mask tokens are laid back onto the
//! full patch grid, then square windows of several sizes are cut out as
//! independent reconstruction units. The sampled [`WindowPlan`] is the shared
//! position record: the teacher cuts the identical windows out of the
//! unmasked grid.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor, Var};
use crate::vit::MaskPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub top_left: (usize, usize),
    /// Covered grid indices, row-major within the window.
    pub token_indices: Vec<usize>,
}

impl WindowSpec {
    pub fn new(size: usize, top_left: (usize, usize), grid: (usize, usize)) -> Result<Self> {
        let (r0, c0) = top_left;
        if size == 0 || r0 + size > grid.0 || c0 + size > grid.1 {
            return Err(Error::Invalid(format!(
                "window {size}x{size} at {top_left:?} does not fit grid {grid:?}"
            )));
        }
        let token_indices = (r0..r0 + size)
            .flat_map(|r| (c0..c0 + size).map(move |c| r * grid.1 + c))
            .collect();
        Ok(Self {
            size,
            top_left,
            token_indices,
        })
    }

    pub fn coords(&self) -> Vec<(usize, usize)> {
        let (r0, c0) = self.top_left;
        (r0..r0 + self.size)
            .flat_map(|r| (c0..c0 + self.size).map(move |c| (r, c)))
            .collect()
    }
}

/// Window sizes mapped to how many windows of that size to sample.
pub type WindowCounts = BTreeMap<usize, usize>;

/// 4 windows of 5×5, 2 of 7×7 and 1 of 9×9 patches.
pub fn default_counts() -> WindowCounts {
    WindowCounts::from([(5, 4), (7, 2), (9, 1)])
}

/// Parses `5x4+7x2+9x1` (size x count, joined by `+`).
pub fn parse_counts(s: &str) -> Result<WindowCounts> {
    let mut out = WindowCounts::new();
    for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
        let (size, count) = part.split_once('x').ok_or_else(|| {
            Error::config("window_plan", format!("expected SIZExCOUNT, got {part:?}"))
        })?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config("window_plan", format!("bad number in {part:?}")))
        };
        let (size, count) = (parse(size)?, parse(count)?);
        if size == 0 || count == 0 {
            return Err(Error::config(
                "window_plan",
                "sizes and counts must be positive",
            ));
        }
        *out.entry(size).or_insert(0) += count;
    }
    if out.is_empty() {
        return Err(Error::config("window_plan", "no windows"));
    }
    Ok(out)
}

pub fn format_counts(counts: &WindowCounts) -> String {
    counts
        .iter()
        .map(|(s, c)| format!("{s}x{c}"))
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub grid: (usize, usize),
    pub specs: Vec<WindowSpec>,
    pub seed: u64,
    pub counts_by_size: WindowCounts,
}

impl WindowPlan {
    /// (size, row, col) per window, the form stored in logs and checkpoints.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.specs
            .iter()
            .map(|w| (w.size, w.top_left.0, w.top_left.1))
            .collect()
    }

    pub fn from_triples(
        grid: (usize, usize),
        seed: u64,
        triples: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let mut counts_by_size = WindowCounts::new();
        let specs = triples
            .iter()
            .map(|&(size, r, c)| {
                *counts_by_size.entry(size).or_insert(0) += 1;
                WindowSpec::new(size, (r, c), grid)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            grid,
            specs,
            seed,
            counts_by_size,
        })
    }

    /// Token slots over all windows, overlaps counted with multiplicity.
    pub fn slots(&self) -> usize {
        self.specs.iter().map(|w| w.size * w.size).sum()
    }
}

/// Places every requested window uniformly over its valid top-left positions.
/// Windows may overlap.
pub fn sample_window_plan(
    grid: (usize, usize),
    counts: &WindowCounts,
    seed: u64,
) -> Result<WindowPlan> {
    let mut rng = rng::substream(seed, "window", &[]);
    let mut specs = Vec::new();
    for (&size, &count) in counts {
        if size == 0 || size > grid.0.min(grid.1) {
            return Err(Error::config(
                "window_plan",
                format!("window size {size} exceeds grid {}x{}", grid.0, grid.1),
            ));
        }
        for _ in 0..count {
            let r = rng.random_range(0..=grid.0 - size);
            let c = rng.random_range(0..=grid.1 - size);
            specs.push(WindowSpec::new(size, (r, c), grid)?);
        }
    }
    Ok(WindowPlan {
        grid,
        specs,
        seed,
        counts_by_size: counts.clone(),
    })
}

/// Lays encoded visible tokens and positioned mask tokens back onto the grid.
///
/// `encoded_visible` rows follow ascending visible index order. Masked slot
/// `i` receives `mask_token + pos_table[i]`.
pub fn assemble_full_grid<'t, F: Scalar>(
    encoded_visible: Var<'t, F>,
    plan: &MaskPlan,
    mask_token: Var<'t, F>,
    pos_table: &Tensor<F>,
) -> Result<Var<'t, F>> {
    let tape = encoded_visible.tape();
    let shape = encoded_visible.shape();
    let (v, d) = (shape[0], shape[1]);
    let t = plan.tokens;
    let visible = plan.visible_indices();
    let masked = &plan.masked_indices;
    if v != visible.len() || v + masked.len() != t || pos_table.shape() != [t, d] {
        return Err(Error::Invalid(format!(
            "cannot assemble {v} visible + {} masked tokens onto {t} slots",
            masked.len()
        )));
    }
    let mut all: Vec<usize> = visible.iter().chain(masked).copied().collect();
    all.sort_unstable();
    if all.iter().enumerate().any(|(i, &x)| i != x) {
        return Err(Error::Invalid("visible and masked indices collide".into()));
    }
    let mut full = tape.constant(Tensor::zeros(&[t, d]));
    if v > 0 {
        full = full.scatter(encoded_visible, &visible)?;
    }
    if !masked.is_empty() {
        let pos = tape.constant(pos_table.gather_rows(masked)?);
        let filled = pos.add(mask_token)?;
        full = full.scatter(filled, masked)?;
    }
    Ok(full)
}

/// Per-window gathered tokens; no mixing across windows.
pub struct LocalFieldBatch<'t, F: Scalar> {
    pub tokens: Vec<Var<'t, F>>,
    pub masked: Vec<Vec<bool>>,
    pub coords: Vec<Vec<(usize, usize)>>,
    pub plan: WindowPlan,
}

impl<F: Scalar> LocalFieldBatch<'_, F> {
    pub fn masked_occurrences(&self) -> usize {
        self.masked.iter().flatten().filter(|&&m| m).count()
    }
}

pub fn extract<'t, F: Scalar>(
    full_grid: Var<'t, F>,
    plan: &WindowPlan,
    mask: &MaskPlan,
) -> Result<LocalFieldBatch<'t, F>> {
    let t = plan.grid.0 * plan.grid.1;
    if full_grid.shape()[0] != t || mask.tokens != t {
        return Err(Error::shape("extract", &full_grid.shape(), &[t]));
    }
    let is_masked = mask.is_masked();
    let mut tokens = Vec::with_capacity(plan.specs.len());
    let mut masked = Vec::with_capacity(plan.specs.len());
    let mut coords = Vec::with_capacity(plan.specs.len());
    for w in &plan.specs {
        tokens.push(full_grid.gather(&w.token_indices)?);
        masked.push(w.token_indices.iter().map(|&i| is_masked[i]).collect());
        coords.push(w.coords());
    }
    Ok(LocalFieldBatch {
        tokens,
        masked,
        coords,
        plan: plan.clone(),
    })
}

pub enum AttentionScope<'a> {
    Global((usize, usize)),
    Windowed(&'a WindowPlan),
}

/// Attention score entries per layer (one head): `T²` globally, `Σ (lᵢ²)²`
/// over windows.
pub fn attention_pair_count(scope: &AttentionScope<'_>) -> u64 {
    match scope {
        AttentionScope::Global((gh, gw)) => ((gh * gw) as u64).pow(2),
        AttentionScope::Windowed(plan) => plan
            .specs
            .iter()
            .map(|w| ((w.size * w.size) as u64).pow(2))
            .sum(),
    }
}
