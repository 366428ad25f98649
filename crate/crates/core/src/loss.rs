//! Training objective: L1 reconstruction plus contrastive regularization.
//!
//! The contrastive term treats the prediction as anchor, the ground truth
//! as positive, and the hazy input as negative, measured in the feature
//! space of a frozen extractor. The extractor is three seeded random
//! stride-2 convolutions (3→16→32→64 channels); its seed is recorded in the
//! checkpoint so a run's loss surface is reproducible. Random projections
//! stand in for a pretrained feature network and keep the loss geometry —
//! pull toward the positive, push from the negative — intact.

use crate::error::{Error, Result};
use crate::ops::{ConvParams, ConvSpec};
use crate::tape::{Tape, ValId};
use crate::tensor::{Scalar, Tensor};
use crate::util::seed_for;

/// Per-stage weights of the contrastive term, shallow to deep.
pub const CR_STAGE_WEIGHTS: [f64; 3] = [0.125, 0.25, 0.5];

/// Denominator guard of the contrastive ratio.
pub const CR_EPS: f64 = 1e-7;

/// Default blend weight of the contrastive term in the total loss.
pub const LAMBDA_DEFAULT: f64 = 0.2;

/// Frozen random convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct CrExtractor<T: Scalar> {
    pub stages: [ConvParams<T>; 3],
    pub seed: u64,
}

impl<T: Scalar> CrExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let specs = [
            ConvSpec::new(3, 16, 3, 2),
            ConvSpec::new(16, 32, 3, 2),
            ConvSpec::new(32, 64, 3, 2),
        ];
        let stages = [0, 1, 2].map(|i| {
            ConvParams::init(specs[i], seed_for(&format!("cr.stage{i}"), seed)).frozen()
        });
        CrExtractor { stages, seed }
    }

    /// Record the three stage outputs for one image.
    fn features(&self, tape: &mut Tape<T>, x: ValId) -> Result<[ValId; 3]> {
        let f0 = self.stages[0].apply(tape, x)?;
        let f1 = self.stages[1].apply(tape, f0)?;
        let f2 = self.stages[2].apply(tape, f1)?;
        Ok([f0, f1, f2])
    }
}

fn check_same_shape<T: Scalar>(
    tape: &Tape<T>,
    a: ValId,
    b: ValId,
    ctx: &'static str,
) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch { ctx, lhs: sa, rhs: sb });
    }
    Ok(())
}

/// Mean absolute error over all elements; subgradient 0 at ties.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, a: ValId, b: ValId) -> Result<ValId> {
    check_same_shape(tape, a, b, "l1_loss")?;
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    Ok(tape.mean_all(ad))
}

/// Σ_i w_i · L1(φ_i(pred), φ_i(gt)) / (L1(φ_i(pred), φ_i(hazy)) + ε).
/// Only `pred` carries gradients; gt and hazy enter as constants.
pub fn cr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: ValId,
    gt: ValId,
    hazy: ValId,
    ext: &CrExtractor<T>,
) -> Result<ValId> {
    check_same_shape(tape, pred, gt, "cr_loss pred/gt")?;
    check_same_shape(tape, pred, hazy, "cr_loss pred/hazy")?;
    let fp = ext.features(tape, pred)?;
    let fg = ext.features(tape, gt)?;
    let fh = ext.features(tape, hazy)?;
    let mut total: Option<ValId> = None;
    for i in 0..3 {
        let num = l1_loss(tape, fp[i], fg[i])?;
        let den_raw = l1_loss(tape, fp[i], fh[i])?;
        let eps = tape.constant(Tensor::scalar(T::from_f64(CR_EPS)));
        let den = tape.add(den_raw, eps)?;
        let ratio = tape.div(num, den)?;
        let weighted = tape.scale(ratio, T::from_f64(CR_STAGE_WEIGHTS[i]));
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("three stages"))
}

/// λ·cr_loss + l1_loss.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: ValId,
    gt: ValId,
    hazy: ValId,
    ext: &CrExtractor<T>,
    lambda: f64,
) -> Result<ValId> {
    let l1 = l1_loss(tape, pred, gt)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    let cr = cr_loss(tape, pred, gt, hazy, ext)?;
    let scaled = tape.scale(cr, T::from_f64(lambda));
    tape.add(scaled, l1)
}
