//! Training objective: cross-entropy + batch-hard triplet + weighted divergence.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub triplet: Var,
    pub divergence: Option<Var>,
}

/// `CE(logits) + triplet(normalize(features)) + lambda_div * divergence`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    logits: Var,
    labels: &[usize],
    divergence: Option<Var>,
    lambda_div: f64,
    margin: f64,
) -> Result<LossTerms> {
    let ce = tape.cross_entropy(logits, labels)?;
    let normed = tape.l2_normalize(features, 1)?;
    let triplet = tape.batch_hard_triplet(normed, labels, margin)?;
    let mut total = tape.add(ce, triplet)?;
    if let Some(d) = divergence {
        let wd = tape.scale(d, lambda_div);
        total = tape.add(total, wd)?;
    }
    Ok(LossTerms {
        total,
        ce,
        triplet,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minima_add_up() {
        let mut tape = Tape::<f64>::new();
        // two well separated identities, confident logits
        let f = tape.constant(Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let logits = tape.constant(Tensor::from_vec(&[4, 2], vec![40.0, 0.0, 40.0, 0.0, 0.0, 40.0, 0.0, 40.0]).unwrap());
        let div = tape.constant(Tensor::scalar(-1.0));
        let terms = total_loss(&mut tape, f, logits, &[0, 0, 1, 1], Some(div), 1.0, 0.3).unwrap();
        assert!((tape.value(terms.total).item() + 1.0).abs() < 1e-12);
        assert_eq!(tape.value(terms.triplet).item(), 0.0);
    }

    #[test]
    fn single_identity_is_input_error() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::ones(&[2, 2]));
        let logits = tape.constant(Tensor::zeros(&[2, 1]));
        let r = total_loss(&mut tape, f, logits, &[0, 0], None, 1.0, 0.3);
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }
}
