//! Multiscale frequency enhancement: a parameter-free decoupler that splits
//! features into low/high-frequency sub-bands at four receptive-field scales
//! (3x3, 5x5, 7x7 box filters and the global mean), and a modulator that
//! re-weights the sub-bands with directly learnable per-channel vectors.
//!
//! With the default initialization (band weights 1, scale weights 1/4) the
//! whole module is the identity map, so training departs smoothly from a
//! no-op. The module contains no convolutions; its learnable state is
//! exactly 12 vectors of length N.

use crate::error::Result;
use crate::ops::{avg_pool, PoolKind};
use crate::tape::{Tape, ValId};
use crate::tensor::{Scalar, Shape, Tensor};

/// The four decoupling scales, in fixed order.
pub const SCALES: [PoolKind; 4] =
    [PoolKind::Window(3), PoolKind::Window(5), PoolKind::Window(7), PoolKind::Global];

const SCALE_NAMES: [&str; 4] = ["k3", "k5", "k7", "global"];

/// Per-channel modulation vectors: `m_low`/`m_high` weight each sub-band,
/// `w_scale` weights each scale's recombined band. All are (1,N,1,1).
#[derive(Clone, Debug)]
pub struct MfemWeights<T: Scalar> {
    pub m_low: [Tensor<T>; 4],
    pub m_high: [Tensor<T>; 4],
    pub w_scale: [Tensor<T>; 4],
}

/// Tape handles for registered modulation vectors.
#[derive(Clone, Copy, Debug)]
pub struct MfemVars {
    pub m_low: [ValId; 4],
    pub m_high: [ValId; 4],
    pub w_scale: [ValId; 4],
}

/// Low/high sub-band pairs produced by the decoupler, one per scale.
#[derive(Clone, Copy, Debug)]
pub struct SubBands {
    pub bands: [(ValId, ValId); 4],
}

impl<T: Scalar> MfemWeights<T> {
    /// Identity initialization: band weights 1, scale weights 1/4.
    pub fn identity(channels: usize) -> Self {
        let col =
            |v: f64| Tensor::full(Shape::new(1, channels, 1, 1), T::from_f64(v)).with_grad();
        MfemWeights {
            m_low: std::array::from_fn(|_| col(1.0)),
            m_high: std::array::from_fn(|_| col(1.0)),
            w_scale: std::array::from_fn(|_| col(0.25)),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> MfemVars {
        MfemVars {
            m_low: std::array::from_fn(|i| tape.leaf(self.m_low[i].clone())),
            m_high: std::array::from_fn(|i| tape.leaf(self.m_high[i].clone())),
            w_scale: std::array::from_fn(|i| tape.leaf(self.w_scale[i].clone())),
        }
    }

    /// Named views in canonical order (matches `register`).
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(12);
        for (i, t) in self.m_low.iter().enumerate() {
            out.push((format!("{prefix}.m_low.{}", SCALE_NAMES[i]), t));
        }
        for (i, t) in self.m_high.iter().enumerate() {
            out.push((format!("{prefix}.m_high.{}", SCALE_NAMES[i]), t));
        }
        for (i, t) in self.w_scale.iter().enumerate() {
            out.push((format!("{prefix}.w_scale.{}", SCALE_NAMES[i]), t));
        }
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(12);
        for (i, t) in self.m_low.iter_mut().enumerate() {
            out.push((format!("{prefix}.m_low.{}", SCALE_NAMES[i]), t));
        }
        for (i, t) in self.m_high.iter_mut().enumerate() {
            out.push((format!("{prefix}.m_high.{}", SCALE_NAMES[i]), t));
        }
        for (i, t) in self.w_scale.iter_mut().enumerate() {
            out.push((format!("{prefix}.w_scale.{}", SCALE_NAMES[i]), t));
        }
        out
    }

    /// 12 per-channel vectors of length N.
    pub fn param_count(channels: usize) -> usize {
        12 * channels
    }
}

/// Split features into four (low, high) sub-band pairs: the low band is the
/// valid-tap box filter (or global mean) at each scale, the high band its
/// residual, so low + high reproduces the input exactly at every scale.
pub fn decouple<T: Scalar>(tape: &mut Tape<T>, x: ValId) -> Result<SubBands> {
    let mut bands = [(x, x); 4];
    for (i, kind) in SCALES.iter().enumerate() {
        let low = avg_pool(tape, x, *kind)?;
        let high = tape.sub(x, low)?;
        bands[i] = (low, high);
    }
    Ok(SubBands { bands })
}

/// y = Σ_k w_scale_k ⊙ (m_low_k ⊙ low_k + m_high_k ⊙ high_k), with every ⊙
/// broadcasting a per-channel vector over the spatial plane.
pub fn modulate<T: Scalar>(
    tape: &mut Tape<T>,
    sub_bands: &SubBands,
    vars: &MfemVars,
) -> Result<ValId> {
    let mut acc: Option<ValId> = None;
    for i in 0..4 {
        let (low, high) = sub_bands.bands[i];
        let wl = tape.mul(low, vars.m_low[i])?;
        let wh = tape.mul(high, vars.m_high[i])?;
        let band = tape.add(wl, wh)?;
        let weighted = tape.mul(band, vars.w_scale[i])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("four scales"))
}

/// Decouple then modulate; shape preserved.
pub fn mfem_forward<T: Scalar>(tape: &mut Tape<T>, x: ValId, vars: &MfemVars) -> Result<ValId> {
    let bands = decouple(tape, x)?;
    modulate(tape, &bands, vars)
}
