use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, ParamStore, RowMix, Scalar, Session, Var};
use crate::vit::Linear;

/// Encoder blocks to tap (1-based) and the image-scale divisor each tap is
/// resized to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSpec {
    pub blocks: Vec<usize>,
    pub scales: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    /// Nearest-neighbour upsampling by an integer factor.
    Up(usize),
    Same,
    /// Non-overlapping `k×k` cells folded into channels, then projected.
    Down(usize),
}

fn resize_for(grid: (usize, usize), patch: usize, scale: usize) -> Result<Resize> {
    let bad = || {
        Error::config(
            "tap_scales",
            format!("scale 1/{scale} unreachable from {grid:?} tokens of {patch}px"),
        )
    };
    if scale == 0 {
        return Err(bad());
    }
    if scale == patch {
        Ok(Resize::Same)
    } else if scale < patch {
        if !patch.is_multiple_of(scale) {
            return Err(bad());
        }
        Ok(Resize::Up(patch / scale))
    } else {
        let k = scale / patch;
        if !scale.is_multiple_of(patch) || !grid.0.is_multiple_of(k) || !grid.1.is_multiple_of(k) {
            return Err(bad());
        }
        Ok(Resize::Down(k))
    }
}

/// Map size at every pyramid level for a `grid` of `patch`-pixel tokens.
pub fn pyramid_sizes(
    grid: (usize, usize),
    patch: usize,
    scales: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let sizes: Vec<(usize, usize)> = scales
        .iter()
        .map(|&s| {
            Ok(match resize_for(grid, patch, s)? {
                Resize::Up(k) => (grid.0 * k, grid.1 * k),
                Resize::Same => grid,
                Resize::Down(k) => (grid.0 / k, grid.1 / k),
            })
        })
        .collect::<Result<_>>()?;
    let finest = sizes
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::config("tap_scales", "empty"))?;
    if let Some(s) = sizes
        .iter()
        .find(|s| finest.0 % s.0 != 0 || finest.1 % s.1 != 0)
    {
        return Err(Error::config(
            "tap_scales",
            format!("level {s:?} does not divide {finest:?}"),
        ));
    }
    Ok(sizes)
}

fn upsample_index((h, w): (usize, usize), k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * k * k);
    for y in 0..h * k {
        for x in 0..w * k {
            idx.push((y / k) * w + x / k);
        }
    }
    idx
}

/// Row order that groups each `k×k` cell contiguously, cells row-major.
fn space_to_depth_index((h, w): (usize, usize), k: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for cy in 0..h / k {
        for cx in 0..w / k {
            for dy in 0..k {
                for dx in 0..k {
                    idx.push((cy * k + dy) * w + cx * k + dx);
                }
            }
        }
    }
    idx
}

fn axis_weights(inp: usize, out: usize) -> Vec<[(usize, f64); 2]> {
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let f = src - i0 as f64;
            [(i0, 1.0 - f), (i1, f)]
        })
        .collect()
}

/// Bilinear resampling (half-pixel centres, edge clamped) from `from` to `to`
/// as a sparse row mix over row-major maps.
pub fn bilinear_mix<F: Scalar>(from: (usize, usize), to: (usize, usize)) -> RowMix<F> {
    let ys = axis_weights(from.0, to.0);
    let xs = axis_weights(from.1, to.1);
    let mut rows = Vec::with_capacity(to.0 * to.1);
    for wy in &ys {
        for wx in &xs {
            let mut row: Vec<(usize, F)> = Vec::with_capacity(4);
            for &(y, a) in wy {
                for &(x, b) in wx {
                    let wt = a * b;
                    if wt == 0.0 {
                        continue;
                    }
                    let src = y * from.1 + x;
                    match row.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += lit::<F>(wt),
                        None => row.push((src, lit(wt))),
                    }
                }
            }
            rows.push(row);
        }
    }
    RowMix {
        in_rows: from.0 * from.1,
        rows,
    }
}

#[derive(Debug, Clone)]
pub struct Level {
    pub size: (usize, usize),
    pub resize: Resize,
    pub lateral: Linear,
}

/// Simplified feature pyramid: per-tap resize and lateral projection, top-down
/// additive fusion, and a sum of all levels at the finest scale.
#[derive(Debug, Clone)]
pub struct PyramidHead<F> {
    pub grid: (usize, usize),
    pub levels: Vec<Level>,
    pub classifier: Linear,
    pub finest: (usize, usize),
    pub image: (usize, usize),
    upsample: Rc<RowMix<F>>,
}

impl<F: Scalar> PyramidHead<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        grid: (usize, usize),
        patch: usize,
        scales: &[usize],
        dim: usize,
        fpn_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let sizes = pyramid_sizes(grid, patch, scales)?;
        let mut levels = Vec::with_capacity(scales.len());
        for (i, (&scale, &size)) in scales.iter().zip(&sizes).enumerate() {
            let resize = resize_for(grid, patch, scale)?;
            let fan_in = match resize {
                Resize::Down(k) => k * k * dim,
                _ => dim,
            };
            let lateral = Linear::new(
                store,
                &format!("{name}.lateral{i}"),
                fan_in,
                fpn_dim,
                true,
                rng,
            )?;
            levels.push(Level {
                size,
                resize,
                lateral,
            });
        }
        let finest = sizes.iter().copied().max().expect("non-empty");
        let image = (grid.0 * patch, grid.1 * patch);
        Ok(Self {
            grid,
            levels,
            classifier: Linear::new(
                store,
                &format!("{name}.classifier"),
                fpn_dim,
                num_classes,
                true,
                rng,
            )?,
            finest,
            image,
            upsample: Rc::new(bilinear_mix(finest, image)),
        })
    }

    /// Fused `[fh·fw, fpn_dim]` map at the finest level.
    pub fn fuse<'s>(&self, s: &'s Session<'_, F>, features: &[Var<'s, F>]) -> Result<Var<'s, F>> {
        if features.len() != self.levels.len() {
            return Err(Error::Invalid(format!(
                "{} feature maps for {} pyramid levels",
                features.len(),
                self.levels.len()
            )));
        }
        let mut projected = Vec::with_capacity(features.len());
        for (level, &f) in self.levels.iter().zip(features) {
            let p = match level.resize {
                Resize::Same => level.lateral.forward(s, f)?,
                Resize::Up(k) => level
                    .lateral
                    .forward(s, f)?
                    .gather(&upsample_index(self.grid, k))?,
                Resize::Down(k) => {
                    let d = f.shape()[1];
                    let cells = (self.grid.0 / k) * (self.grid.1 / k);
                    let folded = f
                        .gather(&space_to_depth_index(self.grid, k))?
                        .reshape(&[cells, k * k * d])?;
                    level.lateral.forward(s, folded)?
                }
            };
            projected.push((level.size, p));
        }
        // Coarsest first; stable so equal sizes keep tap order.
        projected.sort_by_key(|(size, _)| size.0 * size.1);

        let mut fused: Vec<((usize, usize), Var<'s, F>)> = Vec::with_capacity(projected.len());
        for (size, p) in projected {
            let next = match fused.last() {
                Some(&(prev, acc)) => p.add(up_to(acc, prev, size)?)?,
                None => p,
            };
            fused.push((size, next));
        }
        let mut merged: Option<Var<'s, F>> = None;
        for (size, f) in fused {
            let f = up_to(f, size, self.finest)?;
            merged = Some(match merged {
                Some(m) => m.add(f)?,
                None => f,
            });
        }
        Ok(merged.expect("at least one level"))
    }

    /// Per-pixel logits `[H·W, classes]`.
    pub fn forward<'s>(
        &self,
        s: &'s Session<'_, F>,
        features: &[Var<'s, F>],
    ) -> Result<Var<'s, F>> {
        let fused = self.fuse(s, features)?;
        self.classifier
            .forward(s, fused)?
            .row_mix(self.upsample.clone())
    }
}

fn up_to<'s, F: Scalar>(
    x: Var<'s, F>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Var<'s, F>> {
    if from == to {
        return Ok(x);
    }
    x.gather(&upsample_index(from, to.0 / from.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_full_sizes() {
        assert_eq!(
            pyramid_sizes((8, 8), 8, &[4, 8, 16, 32]).unwrap(),
            vec![(16, 16), (8, 8), (4, 4), (2, 2)]
        );
        assert_eq!(
            pyramid_sizes((14, 14), 16, &[4, 8, 16, 32]).unwrap(),
            vec![(56, 56), (28, 28), (14, 14), (7, 7)]
        );
        assert!(pyramid_sizes((14, 14), 16, &[64]).is_err());
        assert!(pyramid_sizes((8, 8), 8, &[3]).is_err());
    }

    #[test]
    fn bilinear_rows_are_convex() {
        let mix = bilinear_mix::<f64>((4, 4), (16, 16));
        for row in &mix.rows {
            let total: f64 = row.iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|r| r.1 > 0.0));
        }
        let same = bilinear_mix::<f64>((3, 3), (3, 3));
        for (i, row) in same.rows.iter().enumerate() {
            assert_eq!(row, &vec![(i, 1.0)]);
        }
    }

    #[test]
    fn space_to_depth_groups_cells() {
        assert_eq!(
            space_to_depth_index((2, 4), 2),
            vec![0, 1, 4, 5, 2, 3, 6, 7]
        );
    }
}
