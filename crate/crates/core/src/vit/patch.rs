use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Patch tokens of one image on a `gh × gw` grid, in row-major grid order.
#[derive(Debug, Clone)]
pub struct TokenGrid<F> {
    /// `[T, width]`: raw pixels after [`patchify`], embeddings after embedding.
    pub tokens: Tensor<F>,
    pub grid: (usize, usize),
    pub coords: Vec<(usize, usize)>,
    pub visible: Vec<bool>,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Splits a `[C, H, W]` image into non-overlapping `p × p` patches. Each token
/// is the patch flattened as (channel, row, col).
pub fn patchify<F: Scalar>(image: &Tensor<F>, p: usize) -> Result<TokenGrid<F>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("patchify", image.shape(), &[0, 0, 0]));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", image.shape(), &[p, p]));
    }
    let (gh, gw) = (h / p, w / p);
    let width = c * p * p;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * width);
    let mut coords = Vec::with_capacity(gh * gw);
    for gr in 0..gh {
        for gc in 0..gw {
            coords.push((gr, gc));
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + gr * p + dy) * w + gc * p;
                    data.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::new(vec![gh * gw, width], data)?,
        grid: (gh, gw),
        coords,
        visible: vec![true; gh * gw],
    })
}

pub fn unpatchify<F: Scalar>(grid: &TokenGrid<F>, channels: usize, p: usize) -> Result<Tensor<F>> {
    let (gh, gw) = grid.grid;
    let width = channels * p * p;
    if grid.tokens.shape() != [gh * gw, width] {
        return Err(Error::shape(
            "unpatchify",
            grid.tokens.shape(),
            &[gh * gw, width],
        ));
    }
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![F::zero(); channels * h * w];
    let src = grid.tokens.data();
    for (t, &(gr, gc)) in grid.coords.iter().enumerate() {
        let tok = &src[t * width..(t + 1) * width];
        for ch in 0..channels {
            for dy in 0..p {
                let row = (ch * h + gr * p + dy) * w + gc * p;
                let off = (ch * p + dy) * p;
                out[row..row + p].copy_from_slice(&tok[off..off + p]);
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}
