use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor, Var};

/// SmoothL1 over masked token positions of every window, summed over channels
/// and divided by the number of masked-token occurrences across windows.
/// Visible positions are never read. With no masked token anywhere the loss is
/// a constant 0.
pub fn reconstruction_loss<'s, F: Scalar>(
    predictions: &[Var<'s, F>],
    targets: &[Tensor<F>],
    masked: &[Vec<bool>],
    beta: F,
) -> Result<Var<'s, F>> {
    let tape = predictions
        .first()
        .ok_or_else(|| Error::Invalid("no windows".into()))?
        .tape();
    if predictions.len() != targets.len() || predictions.len() != masked.len() {
        return Err(Error::Invalid(format!(
            "{} predictions, {} targets, {} flag sets",
            predictions.len(),
            targets.len(),
            masked.len()
        )));
    }
    let mut total: Option<Var<'s, F>> = None;
    let mut occurrences = 0usize;
    for ((pred, target), flags) in predictions.iter().zip(targets).zip(masked) {
        if pred.shape() != target.shape() || flags.len() != target.shape()[0] {
            return Err(Error::shape(
                "reconstruction_loss",
                &pred.shape(),
                target.shape(),
            ));
        }
        let idx: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
        if idx.is_empty() {
            continue;
        }
        occurrences += idx.len();
        let t = tape.constant(target.gather_rows(&idx)?);
        let part = pred.gather(&idx)?.sub(t)?.smooth_l1(beta).sum();
        total = Some(match total {
            Some(acc) => acc.add(part)?,
            None => part,
        });
    }
    match total {
        Some(sum) => Ok(sum.scale(F::one() / lit::<F>(occurrences as f64))),
        None => {
            log::warn!("reconstruction loss: no masked token in any window");
            Ok(tape.constant(Tensor::scalar(F::zero())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1], &[v]).unwrap()
    }

    #[test]
    fn closed_forms() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(one(0.0));
        let l = reconstruction_loss(&[p], &[one(0.0)], &[vec![true]], 1.0).unwrap();
        assert_eq!(l.value().data(), &[0.0]);
        let l = reconstruction_loss(&[p], &[one(0.5)], &[vec![true]], 1.0).unwrap();
        assert_eq!(l.value().data(), &[0.125]);
        let l = reconstruction_loss(&[p], &[one(2.0)], &[vec![true]], 1.0).unwrap();
        assert_eq!(l.value().data(), &[1.5]);
    }

    #[test]
    fn nothing_masked_is_zero() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(one(3.0), true);
        let l = reconstruction_loss(&[p], &[one(0.0)], &[vec![false]], 1.0).unwrap();
        assert_eq!(l.value().data(), &[0.0]);
    }

    #[test]
    fn normalizes_by_occurrences() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[2, 3]));
        let t = Tensor::full(&[2, 3], 0.5);
        // Two windows: 2 masked + 1 masked = 3 occurrences, 3 channels at 0.125 each.
        let l = reconstruction_loss(
            &[p, p],
            &[t.clone(), t],
            &[vec![true, true], vec![false, true]],
            1.0,
        )
        .unwrap();
        assert!((l.value().data()[0] - 9.0 * 0.125 / 3.0).abs() < 1e-12);
    }
}
