use super::kernels::sigmoid;
use super::{Accumulator, Op, Real, Tape, Var};
use crate::error::{Error, Result};

/// Per-sample weighted binary cross-entropy on logits, in the stable form
/// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub(crate) fn bce_term<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    /// Mean over the batch of `w_i · bce(z_i, y_i)`.
    pub fn weighted_bce(&mut self, logits: Var, labels: &[T], weights: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.len() != weights.len() {
            return Err(Error::shape(format!(
                "weighted_bce: {} logits, {} labels, {} weights",
                z.len(),
                labels.len(),
                weights.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Data(format!("non-binary label {bad:?}")));
        }
        let n = T::lit(z.len() as f64);
        let total =
            z.iter().zip(labels).zip(weights).fold(T::zero(), |acc, ((&zi, &yi), &wi)| acc + wi * bce_term(zi, yi));
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![total / n],
            Op::WeightedBce { logits, labels: labels.to_vec(), weights: weights.to_vec() },
            rg,
        ))
    }
}

pub(super) fn bce_backward<T: Real>(acc: &mut Accumulator<'_, T>, logits: Var, labels: &[T], weights: &[T], g: &[T]) {
    let tape = acc.tape;
    let z = tape.value(logits);
    let scale = g[0] / T::lit(z.len() as f64);
    acc.add(logits, |dz| {
        for i in 0..dz.len() {
            dz[i] += scale * weights[i] * (sigmoid(z[i]) - labels[i]);
        }
    });
}
