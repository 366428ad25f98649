//! Haze-aware attention: three learned branches estimate the atmospheric
//! light A, the transmission T, and a learned reciprocal surrogate T' in
//! N-channel feature space, composed as j = x - A·(1-T)·T'.
//!
//! The airlight branch reads only global context (a spatial mean feeding a
//! squeeze/expand bottleneck), so A is constant over space by construction.
//! T and T' share the same architecture — a 3x3 feature conv into the same
//! bottleneck — but never share parameters. Branch outputs can be overridden
//! through [`BranchOverride`], which is how the physics claim behind the
//! composition is tested with exact values.

use crate::error::Result;
use crate::ops::{ConvParams, ConvSpec};
use crate::tape::{Tape, ValId};
use crate::tensor::{Scalar, Tensor};

/// Bottleneck ratio of the squeeze/expand pairs.
pub const BOTTLENECK: usize = 8;

/// Learnable state of one module: the airlight bottleneck plus two
/// structurally identical, independently parameterized map branches.
#[derive(Clone, Debug)]
pub struct HaamWeights<T: Scalar> {
    pub channels: usize,
    pub a_reduce: ConvParams<T>,
    pub a_expand: ConvParams<T>,
    pub t_pre: ConvParams<T>,
    pub t_reduce: ConvParams<T>,
    pub t_expand: ConvParams<T>,
    pub tp_pre: ConvParams<T>,
    pub tp_reduce: ConvParams<T>,
    pub tp_expand: ConvParams<T>,
}

/// Registered tape handles, one conv-var pair per layer.
#[derive(Clone, Copy, Debug)]
pub struct HaamVars {
    pub a_reduce: crate::ops::ConvVars,
    pub a_expand: crate::ops::ConvVars,
    pub t_pre: crate::ops::ConvVars,
    pub t_reduce: crate::ops::ConvVars,
    pub t_expand: crate::ops::ConvVars,
    pub tp_pre: crate::ops::ConvVars,
    pub tp_reduce: crate::ops::ConvVars,
    pub tp_expand: crate::ops::ConvVars,
}

/// Test hook: replace any branch output with an exact tensor.
#[derive(Clone, Debug, Default)]
pub struct BranchOverride<T: Scalar> {
    pub airlight: Option<Tensor<T>>,
    pub trans: Option<Tensor<T>>,
    pub trans_recip: Option<Tensor<T>>,
}

impl<T: Scalar> HaamWeights<T> {
    fn specs(channels: usize) -> [(&'static str, ConvSpec); 8] {
        assert!(channels % BOTTLENECK == 0, "channel width must be divisible by 8");
        let mid = channels / BOTTLENECK;
        [
            ("a_reduce", ConvSpec::new(channels, mid, 1, 1)),
            ("a_expand", ConvSpec::new(mid, channels, 1, 1)),
            ("t_pre", ConvSpec::new(channels, channels, 3, 1)),
            ("t_reduce", ConvSpec::new(channels, mid, 1, 1)),
            ("t_expand", ConvSpec::new(mid, channels, 1, 1)),
            ("tp_pre", ConvSpec::new(channels, channels, 3, 1)),
            ("tp_reduce", ConvSpec::new(channels, mid, 1, 1)),
            ("tp_expand", ConvSpec::new(mid, channels, 1, 1)),
        ]
    }

    pub fn init(channels: usize, prefix: &str, root_seed: u64) -> Self {
        let [a_reduce, a_expand, t_pre, t_reduce, t_expand, tp_pre, tp_reduce, tp_expand] =
            Self::specs(channels)
                .map(|(name, spec)| ConvParams::init_named(spec, &format!("{prefix}.{name}"), root_seed));
        HaamWeights {
            channels,
            a_reduce,
            a_expand,
            t_pre,
            t_reduce,
            t_expand,
            tp_pre,
            tp_reduce,
            tp_expand,
        }
    }

    /// All-zero parameters; every branch then outputs sigmoid(0) = 0.5.
    pub fn zeros(channels: usize) -> Self {
        let [a_reduce, a_expand, t_pre, t_reduce, t_expand, tp_pre, tp_reduce, tp_expand] =
            Self::specs(channels).map(|(_, spec)| ConvParams::zeros(spec));
        HaamWeights {
            channels,
            a_reduce,
            a_expand,
            t_pre,
            t_reduce,
            t_expand,
            tp_pre,
            tp_reduce,
            tp_expand,
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> HaamVars {
        HaamVars {
            a_reduce: self.a_reduce.register(tape),
            a_expand: self.a_expand.register(tape),
            t_pre: self.t_pre.register(tape),
            t_reduce: self.t_reduce.register(tape),
            t_expand: self.t_expand.register(tape),
            tp_pre: self.tp_pre.register(tape),
            tp_reduce: self.tp_reduce.register(tape),
            tp_expand: self.tp_expand.register(tape),
        }
    }

    fn layers(&self) -> [(&'static str, &ConvParams<T>); 8] {
        [
            ("a_reduce", &self.a_reduce),
            ("a_expand", &self.a_expand),
            ("t_pre", &self.t_pre),
            ("t_reduce", &self.t_reduce),
            ("t_expand", &self.t_expand),
            ("tp_pre", &self.tp_pre),
            ("tp_reduce", &self.tp_reduce),
            ("tp_expand", &self.tp_expand),
        ]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(16);
        for (name, p) in self.layers() {
            out.push((format!("{prefix}.{name}.weight"), &p.weight));
            out.push((format!("{prefix}.{name}.bias"), &p.bias));
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(16);
        let layers: [(&'static str, &mut ConvParams<T>); 8] = [
            ("a_reduce", &mut self.a_reduce),
            ("a_expand", &mut self.a_expand),
            ("t_pre", &mut self.t_pre),
            ("t_reduce", &mut self.t_reduce),
            ("t_expand", &mut self.t_expand),
            ("tp_pre", &mut self.tp_pre),
            ("tp_reduce", &mut self.tp_reduce),
            ("tp_expand", &mut self.tp_expand),
        ];
        for (name, p) in layers {
            out.push((format!("{prefix}.{name}.weight"), &mut p.weight));
            out.push((format!("{prefix}.{name}.bias"), &mut p.bias));
        }
        out
    }

    /// Analytic parameter count: three squeeze/expand pairs plus the two
    /// 3x3 feature convs of the T and T' branches.
    pub fn param_count(channels: usize) -> usize {
        let n = channels;
        let mid = n / BOTTLENECK;
        let bottleneck = n * mid + mid + mid * n + n;
        let pre = n * n * 9 + n;
        3 * bottleneck + 2 * pre
    }
}

/// A = sigmoid(expand(relu(reduce(GAP(x))))), shape (n,N,1,1).
pub fn estimate_airlight<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    vars: &HaamVars,
) -> Result<ValId> {
    let gap = tape.mean_spatial(x)?;
    let red = tape.conv2d(gap, vars.a_reduce.w, vars.a_reduce.b, 1)?;
    let act = tape.relu(red);
    let exp = tape.conv2d(act, vars.a_expand.w, vars.a_expand.b, 1)?;
    Ok(tape.sigmoid(exp))
}

/// T = sigmoid(expand(relu(reduce(conv3x3(x))))), spatially varying.
pub fn estimate_transmission<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    vars: &HaamVars,
) -> Result<ValId> {
    let pre = tape.conv2d(x, vars.t_pre.w, vars.t_pre.b, 1)?;
    let red = tape.conv2d(pre, vars.t_reduce.w, vars.t_reduce.b, 1)?;
    let act = tape.relu(red);
    let exp = tape.conv2d(act, vars.t_expand.w, vars.t_expand.b, 1)?;
    Ok(tape.sigmoid(exp))
}

/// T' — same contract as the transmission branch with independent
/// parameters; a learned surrogate for 1/T, not an algebraic reciprocal.
pub fn estimate_transmission_recip<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    vars: &HaamVars,
) -> Result<ValId> {
    let pre = tape.conv2d(x, vars.tp_pre.w, vars.tp_pre.b, 1)?;
    let red = tape.conv2d(pre, vars.tp_reduce.w, vars.tp_reduce.b, 1)?;
    let act = tape.relu(red);
    let exp = tape.conv2d(act, vars.tp_expand.w, vars.tp_expand.b, 1)?;
    Ok(tape.sigmoid(exp))
}

/// j = (x - A·(1-T))·T', differentiable through all three branches.
///
/// Subtracting the veiling term A·(1-T) from the input recovers the
/// attenuated radiance j·t of the scattering model; multiplying by the
/// learned reciprocal T' undoes the attenuation without an explicit
/// division. With T' = 1/T and x assembled from known j, T, A, this
/// returns j exactly.
pub fn haam_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    vars: &HaamVars,
    hook: Option<&BranchOverride<T>>,
) -> Result<ValId> {
    let airlight = match hook.and_then(|h| h.airlight.clone()) {
        Some(t) => tape.constant(t),
        None => estimate_airlight(tape, x, vars)?,
    };
    let trans = match hook.and_then(|h| h.trans.clone()) {
        Some(t) => tape.constant(t),
        None => estimate_transmission(tape, x, vars)?,
    };
    let trans_recip = match hook.and_then(|h| h.trans_recip.clone()) {
        Some(t) => tape.constant(t),
        None => estimate_transmission_recip(tape, x, vars)?,
    };

    let ones = tape.constant(Tensor::ones(tape.value(trans).shape()));
    let one_minus_t = tape.sub(ones, trans)?;
    let veil = tape.mul(one_minus_t, airlight)?;
    let attenuated = tape.sub(x, veil)?;
    tape.mul(attenuated, trans_recip)
}
