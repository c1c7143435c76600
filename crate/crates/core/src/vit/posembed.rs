use crate::tensor::{Scalar, Tensor};

/// Fixed 2-D sine-cosine table `[gh·gw, dim]`: the first half of the channels
/// encodes the row, the second half the column. `dim` must be divisible by 4.
pub fn sincos_2d<F: Scalar>(dim: usize, gh: usize, gw: usize) -> Tensor<F> {
    assert!(
        dim.is_multiple_of(4),
        "positional dim must be divisible by 4"
    );
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| F::from_f64_lossy((pos * w).sin())));
                data.extend(omega.iter().map(|w| F::from_f64_lossy((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data).expect("table shape")
}
