use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Smoothing constant of the soft-Dice term.
pub const DICE_EPS: f64 = 1.0;

/// `0.5·BCE(sigmoid(logits), masks) + 0.5·(1 − soft Dice)`.
///
/// BCE is the mean over all pixels; soft Dice pools the whole batch:
/// `(2Σpg + ε) / (Σp + Σg + ε)` with `p = sigmoid(logits)` and `ε = 1`.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, masks: Var) -> Result<Var> {
    if tape.shape(logits) != tape.shape(masks) {
        return Err(Error::shape(
            "loss",
            format!("logits {:?} vs masks {:?}", tape.shape(logits), tape.shape(masks)),
        ));
    }
    let bce = tape.bce_with_logits(logits, masks)?;
    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, masks)?;
    let inter = tape.sum(pg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let sp = tape.sum(p)?;
    let sg = tape.sum(masks)?;
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let dice = tape.div(num, den)?;
    let dice_loss = tape.scale(dice, -0.5)?;
    let dice_loss = tape.add_scalar(dice_loss, 0.5)?;
    let bce = tape.scale(bce, 0.5)?;
    tape.add(bce, dice_loss)
}
