use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("focal gamma must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// Per-class binary focal loss summed over classes, recorded on the tape.
///
/// Positives contribute `-(1 - p)^gamma * ln p`, negatives
/// `-p^gamma * ln(1 - p)`.
pub fn focal_loss<T: Element>(tape: &mut Tape<T>, probs: Var, targets: &[bool], gamma: f64) -> Result<Var> {
    check_gamma(gamma)?;
    let (rows, cols) = tape.value(probs).shape();
    if rows * cols != targets.len() {
        return Err(Error::shape("focal_loss", (rows, cols), (1, targets.len())));
    }
    let y = Tensor::from_fn(rows, cols, |i, j| if targets[i * cols + j] { T::one() } else { T::zero() });
    let not_y = y.map(|v| T::one() - v);
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);

    let eps = T::of(PROB_EPS);
    let p = tape.clamp(probs, eps, T::one() - eps)?;
    let neg_p = tape.scale(p, -T::one())?;
    let q = tape.add_scalar(neg_p, T::one())?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let w_pos = tape.pow(q, T::of(gamma))?;
    let w_neg = tape.pow(p, T::of(gamma))?;
    let pos = tape.mul(w_pos, log_p)?;
    let neg = tape.mul(w_neg, log_q)?;
    let pos = tape.mul(pos, y)?;
    let neg = tape.mul(neg, not_y)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -T::one())
}

/// Plain evaluation of the same loss.
pub fn focal_loss_value(probs: &[f64], targets: &[bool], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if probs.len() != targets.len() {
        return Err(Error::shape("focal_loss", (1, probs.len()), (1, targets.len())));
    }
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y {
                -(1.0 - p).powf(gamma) * p.ln()
            } else {
                -p.powf(gamma) * (1.0 - p).ln()
            }
        })
        .sum())
}
