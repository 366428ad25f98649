//! Convolution, pooling, and resampling building blocks with their
//! parameter containers and deterministic initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, ValId};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::util::seed_for;

/// Static description of a convolution layer. Padding is always (k-1)/2
/// zero padding, so stride 1 preserves the spatial extent and stride 2
/// produces ceil(in/2).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel must be odd");
        assert!(stride == 1 || stride == 2, "conv stride must be 1 or 2");
        ConvSpec { in_channels, out_channels, kernel, stride }
    }

    /// Learnable element count: weights plus biases.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Pooling form used by the frequency decoupler: a windowed box filter or
/// the global spatial mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Window(usize),
    Global,
}

/// Apply average pooling per `PoolKind`; the global form broadcasts the
/// per-channel mean back to the input extent.
pub fn avg_pool<T: Scalar>(tape: &mut Tape<T>, x: ValId, kind: PoolKind) -> Result<ValId> {
    match kind {
        PoolKind::Window(k) => tape.avg_pool(x, k),
        PoolKind::Global => tape.global_avg_pool(x),
    }
}

/// Weight and bias tensors for one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Tape handles for one registered convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: ValId,
    pub b: ValId,
}

impl<T: Scalar> ConvParams<T> {
    /// Kaiming-style fan-in uniform initialization: weights uniform in
    /// ±sqrt(6 / (in·k²)), biases zero, fully determined by the seed.
    pub fn init(spec: ConvSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (spec.in_channels * spec.kernel * spec.kernel) as f64).sqrt();
        let ws = Shape::new(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel);
        let data = (0..ws.numel()).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        let weight = Tensor::from_vec(ws, data).expect("weight shape").with_grad();
        let bias = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)).with_grad();
        ConvParams { spec, weight, bias }
    }

    /// Seed derived from the parameter name, so identical names initialize
    /// identically regardless of how many other layers exist.
    pub fn init_named(spec: ConvSpec, name: &str, root_seed: u64) -> Self {
        Self::init(spec, seed_for(name, root_seed))
    }

    /// All-zero weights and biases (used for output heads and fusion logits).
    pub fn zeros(spec: ConvSpec) -> Self {
        let ws = Shape::new(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel);
        ConvParams {
            spec,
            weight: Tensor::zeros(ws).with_grad(),
            bias: Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)).with_grad(),
        }
    }

    /// Mark both tensors frozen (no gradient participation).
    pub fn frozen(mut self) -> Self {
        self.weight.set_requires_grad(false);
        self.bias.set_requires_grad(false);
        self
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ConvVars {
        ConvVars { w: tape.leaf(self.weight.clone()), b: tape.leaf(self.bias.clone()) }
    }

    /// Register and apply in one step (for layers whose vars are not reused).
    pub fn apply(&self, tape: &mut Tape<T>, x: ValId) -> Result<ValId> {
        let vars = self.register(tape);
        tape.conv2d(x, vars.w, vars.b, self.spec.stride)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Nearest-neighbor 2x upsampling followed by a 1x1 convolution.
pub fn upsample<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    mix: &ConvParams<T>,
) -> Result<ValId> {
    let up = tape.upsample_nearest2(x);
    mix.apply(tape, up)
}

/// Validate an image-space tensor before feeding the network.
pub fn check_divisible_by_4(shape: Shape) -> Result<()> {
    if shape.h % 4 != 0 || shape.w % 4 != 0 {
        return Err(Error::Indivisible {
            h: shape.h,
            w: shape.w,
            need_h: shape.h.div_ceil(4) * 4,
            need_w: shape.w.div_ceil(4) * 4,
        });
    }
    Ok(())
}
