//! Central-difference gradient verification.
//!
//! `finite_diff_check` compares the tape's reverse-mode gradient of a scalar
//! function against central finite differences, element by element, in
//! 64-bit mode. It is the oracle every recorded primitive and every composed
//! module is verified against.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;

/// Builds the scalar root for the function under test on a fresh tape.
pub trait ScalarFn {
    fn build(&self, tape: &mut Tape<f64>, x: ValId) -> Result<ValId>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape<f64>, ValId) -> Result<ValId>,
{
    fn build(&self, tape: &mut Tape<f64>, x: ValId) -> Result<ValId> {
        self(tape, x)
    }
}

/// Max over elements of |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8), with g_fd
/// from central differences of half-width `step`.
pub fn finite_diff_check(f: &dyn ScalarFn, x: &Tensor<f64>, step: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::InvalidArg(format!("finite-difference step {step} outside [1e-7, 1e-4]")));
    }

    // Reverse-mode gradient.
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let xid = tape.leaf(leaf);
    let root = f.build(&mut tape, xid)?;
    let f0 = tape.scalar_value(root);
    if !f0.is_finite() {
        return Err(Error::NonFinite { ctx: "finite_diff_check forward", index: 0 });
    }
    tape.backward(root)?;
    let g_ad = tape
        .grad(xid)
        .ok_or_else(|| Error::InvalidArg("function does not depend on x".into()))?
        .to_vec();

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(probe.clone());
        let root = f.build(&mut tape, id)?;
        Ok(tape.scalar_value(root))
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    probe.set_requires_grad(false);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { ctx: "finite_diff_check probe", index: i });
        }
        let g_fd = (fp - fm) / (2.0 * step);
        if !g_ad[i].is_finite() {
            return Err(Error::NonFinite { ctx: "finite_diff_check gradient", index: i });
        }
        let rel = (g_ad[i] - g_fd).abs() / g_ad[i].abs().max(g_fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
