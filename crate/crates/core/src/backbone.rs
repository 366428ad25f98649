//! Encoder–decoder dehazing network.
//!
//! Two stride-2 stages take the input to quarter resolution, where a cascade
//! of residual blocks refines features; each block normalizes, applies the
//! haze-aware attention module (or a plain 3x3 conv when that module is
//! disabled), then the frequency enhancement module. The decoder mirrors the
//! encoder with nearest+1x1 upsampling and selective-kernel fusion of skip
//! connections. The head predicts a tanh-bounded residual over the hazy
//! input, so a zero-initialized head makes the whole network the identity.

use crate::error::{Error, Result};
use crate::haam::{haam_forward, BranchOverride, HaamVars, HaamWeights};
use crate::mfem::{mfem_forward, MfemVars, MfemWeights};
use crate::ops::{check_divisible_by_4, ConvParams, ConvSpec, ConvVars};
use crate::tape::{Tape, ValId};
use crate::tensor::{Scalar, Shape, Tensor};

/// Topology switches. `base_channels` is the block width N; the stem and
/// the outer stages run at N/2. The ablation arms toggle the three flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub base_channels: usize,
    pub num_haab: usize,
    pub use_haam: bool,
    pub use_mfem: bool,
    pub use_fusion: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { base_channels: 64, num_haab: 4, use_haam: true, use_mfem: true, use_fusion: true }
    }
}

impl NetConfig {
    /// Desk-scale configuration used by the scaled-down experiments.
    pub fn desk() -> Self {
        NetConfig { base_channels: 16, num_haab: 2, ..Default::default() }
    }

    pub fn half(&self) -> usize {
        self.base_channels / 2
    }
}

// ── Per-channel normalization ────────────────────────────────────────

/// Learnable affine for the per-channel (instance) normalization.
#[derive(Clone, Debug)]
pub struct NormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: ValId,
    pub beta: ValId,
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> NormParams<T> {
    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: Tensor::ones(Shape::new(1, channels, 1, 1)).with_grad(),
            beta: Tensor::zeros(Shape::new(1, channels, 1, 1)).with_grad(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> NormVars {
        NormVars { gamma: tape.leaf(self.gamma.clone()), beta: tape.leaf(self.beta.clone()) }
    }
}

/// Normalize each (n,c) plane to zero mean / unit variance, then apply the
/// learnable per-channel scale and shift.
pub fn instance_norm<T: Scalar>(tape: &mut Tape<T>, x: ValId, vars: &NormVars) -> Result<ValId> {
    let s = tape.value(x).shape();
    let mu = tape.mean_spatial(x)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_spatial(sq)?;
    let eps = tape.constant(Tensor::full(Shape::new(s.n, s.c, 1, 1), T::from_f64(NORM_EPS)));
    let var_eps = tape.add(var, eps)?;
    let inv_std = tape.rsqrt(var_eps)?;
    let normed = tape.mul(centered, inv_std)?;
    let scaled = tape.mul(normed, vars.gamma)?;
    tape.add(scaled, vars.beta)
}

// ── Residual block ───────────────────────────────────────────────────

/// One residual block: norm → attention (or plain conv) → frequency
/// enhancement → skip addition.
#[derive(Clone, Debug)]
pub struct HaabWeights<T: Scalar> {
    pub norm: NormParams<T>,
    pub haam: Option<HaamWeights<T>>,
    pub base_conv: Option<ConvParams<T>>,
    pub mfem: Option<MfemWeights<T>>,
}

#[derive(Clone, Debug)]
pub struct HaabVars {
    pub norm: NormVars,
    pub haam: Option<HaamVars>,
    pub base_conv: Option<ConvVars>,
    pub mfem: Option<MfemVars>,
}

impl<T: Scalar> HaabWeights<T> {
    pub fn init(cfg: &NetConfig, prefix: &str, root_seed: u64) -> Self {
        let n = cfg.base_channels;
        HaabWeights {
            norm: NormParams::identity(n),
            haam: cfg.use_haam.then(|| HaamWeights::init(n, &format!("{prefix}.haam"), root_seed)),
            base_conv: (!cfg.use_haam).then(|| {
                ConvParams::init_named(ConvSpec::new(n, n, 3, 1), &format!("{prefix}.conv"), root_seed)
            }),
            mfem: cfg.use_mfem.then(|| MfemWeights::identity(n)),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> HaabVars {
        HaabVars {
            norm: self.norm.register(tape),
            haam: self.haam.as_ref().map(|h| h.register(tape)),
            base_conv: self.base_conv.as_ref().map(|c| c.register(tape)),
            mfem: self.mfem.as_ref().map(|m| m.register(tape)),
        }
    }
}

/// y = x + mfem(haam(norm(x))) with the configured pieces; the attention
/// slot falls back to relu(conv3x3(·)) when the module is disabled.
pub fn haab_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: ValId,
    vars: &HaabVars,
    hook: Option<&BranchOverride<T>>,
) -> Result<ValId> {
    let mut t = instance_norm(tape, x, &vars.norm)?;
    if let Some(haam) = &vars.haam {
        t = haam_forward(tape, t, haam, hook)?;
    } else if let Some(conv) = &vars.base_conv {
        let c = tape.conv2d(t, conv.w, conv.b, 1)?;
        t = tape.relu(c);
    }
    if let Some(mfem) = &vars.mfem {
        t = mfem_forward(tape, t, mfem)?;
    }
    tape.add(x, t)
}

// ── Selective-kernel fusion ──────────────────────────────────────────

/// Fusion parameters: a shared squeeze conv and one logit head per branch.
/// The heads start at zero, so fusion begins as the plain average.
#[derive(Clone, Debug)]
pub struct FusionWeights<T: Scalar> {
    pub reduce: ConvParams<T>,
    pub head_a: ConvParams<T>,
    pub head_b: ConvParams<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub reduce: ConvVars,
    pub head_a: ConvVars,
    pub head_b: ConvVars,
}

impl<T: Scalar> FusionWeights<T> {
    fn mid(channels: usize) -> usize {
        (channels / 8).max(1)
    }

    pub fn init(channels: usize, prefix: &str, root_seed: u64) -> Self {
        let mid = Self::mid(channels);
        FusionWeights {
            reduce: ConvParams::init_named(
                ConvSpec::new(channels, mid, 1, 1),
                &format!("{prefix}.reduce"),
                root_seed,
            ),
            head_a: ConvParams::zeros(ConvSpec::new(mid, channels, 1, 1)),
            head_b: ConvParams::zeros(ConvSpec::new(mid, channels, 1, 1)),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> FusionVars {
        FusionVars {
            reduce: self.reduce.register(tape),
            head_a: self.head_a.register(tape),
            head_b: self.head_b.register(tape),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        let mid = Self::mid(channels);
        ConvSpec::new(channels, mid, 1, 1).param_count()
            + 2 * ConvSpec::new(mid, channels, 1, 1).param_count()
    }
}

/// Per-channel softmax fusion of two equal-shape branches. The two-branch
/// softmax is computed as w_a = sigmoid(logit_a - logit_b), w_b = 1 - w_a,
/// so the weights sum to one exactly.
pub fn sk_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    a: ValId,
    b: ValId,
    vars: &FusionVars,
) -> Result<ValId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::ShapeMismatch { ctx: "sk_fusion", lhs: sa, rhs: sb });
    }
    let sum = tape.add(a, b)?;
    let gap = tape.mean_spatial(sum)?;
    let red = tape.conv2d(gap, vars.reduce.w, vars.reduce.b, 1)?;
    let z = tape.relu(red);
    let la = tape.conv2d(z, vars.head_a.w, vars.head_a.b, 1)?;
    let lb = tape.conv2d(z, vars.head_b.w, vars.head_b.b, 1)?;
    let diff = tape.sub(la, lb)?;
    let wa = tape.sigmoid(diff);
    let ones = tape.constant(Tensor::ones(tape.value(wa).shape()));
    let wb = tape.sub(ones, wa)?;
    let fa = tape.mul(a, wa)?;
    let fb = tape.mul(b, wb)?;
    tape.add(fa, fb)
}

// ── The full network ─────────────────────────────────────────────────

/// Every learnable tensor of the network, named for checkpointing.
#[derive(Clone, Debug)]
pub struct NetWeights<T: Scalar> {
    pub cfg: NetConfig,
    pub stem: ConvParams<T>,
    pub down1: ConvParams<T>,
    pub down2: ConvParams<T>,
    pub haabs: Vec<HaabWeights<T>>,
    pub up1: ConvParams<T>,
    pub fuse1: Option<FusionWeights<T>>,
    pub dec1: ConvParams<T>,
    pub up2: ConvParams<T>,
    pub fuse2: Option<FusionWeights<T>>,
    pub dec2: ConvParams<T>,
    pub head: ConvParams<T>,
}

/// Registered handles plus the flat parameter list in canonical order.
pub struct NetVars {
    pub stem: ConvVars,
    pub down1: ConvVars,
    pub down2: ConvVars,
    pub haabs: Vec<HaabVars>,
    pub up1: ConvVars,
    pub fuse1: Option<FusionVars>,
    pub dec1: ConvVars,
    pub up2: ConvVars,
    pub fuse2: Option<FusionVars>,
    pub dec2: ConvVars,
    pub head: ConvVars,
    /// Aligned one-to-one with `NetWeights::named()`.
    pub param_ids: Vec<ValId>,
}

impl<T: Scalar> NetWeights<T> {
    /// Initialize from a seed. Encoder/decoder convs use fan-in uniform
    /// init; the head starts at zero so the untrained network is the
    /// identity map over the hazy input.
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let n = cfg.base_channels;
        let half = cfg.half();
        assert!(n % 8 == 0, "base_channels must be divisible by 8");
        let conv = |name: &str, ci: usize, co: usize, k: usize, s: usize| {
            ConvParams::init_named(ConvSpec::new(ci, co, k, s), name, seed)
        };
        NetWeights {
            cfg,
            stem: conv("stem", 3, half, 3, 1),
            down1: conv("down1", half, half, 3, 2),
            down2: conv("down2", half, n, 3, 2),
            haabs: (0..cfg.num_haab)
                .map(|i| HaabWeights::init(&cfg, &format!("haab{i}"), seed))
                .collect(),
            up1: conv("up1", n, half, 1, 1),
            fuse1: cfg.use_fusion.then(|| FusionWeights::init(half, "fuse1", seed)),
            dec1: conv("dec1", half, half, 3, 1),
            up2: conv("up2", half, half, 1, 1),
            fuse2: cfg.use_fusion.then(|| FusionWeights::init(half, "fuse2", seed)),
            dec2: conv("dec2", half, half, 3, 1),
            head: ConvParams::zeros(ConvSpec::new(half, 3, 3, 1)),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> NetVars {
        let stem = self.stem.register(tape);
        let down1 = self.down1.register(tape);
        let down2 = self.down2.register(tape);
        let haabs: Vec<HaabVars> = self.haabs.iter().map(|h| h.register(tape)).collect();
        let up1 = self.up1.register(tape);
        let fuse1 = self.fuse1.as_ref().map(|f| f.register(tape));
        let dec1 = self.dec1.register(tape);
        let up2 = self.up2.register(tape);
        let fuse2 = self.fuse2.as_ref().map(|f| f.register(tape));
        let dec2 = self.dec2.register(tape);
        let head = self.head.register(tape);

        let mut param_ids = Vec::new();
        let conv_ids = |v: &ConvVars, out: &mut Vec<ValId>| {
            out.push(v.w);
            out.push(v.b);
        };
        conv_ids(&stem, &mut param_ids);
        conv_ids(&down1, &mut param_ids);
        conv_ids(&down2, &mut param_ids);
        for h in &haabs {
            param_ids.push(h.norm.gamma);
            param_ids.push(h.norm.beta);
            if let Some(hm) = &h.haam {
                for cv in [
                    hm.a_reduce, hm.a_expand, hm.t_pre, hm.t_reduce, hm.t_expand, hm.tp_pre,
                    hm.tp_reduce, hm.tp_expand,
                ] {
                    conv_ids(&cv, &mut param_ids);
                }
            }
            if let Some(cv) = &h.base_conv {
                conv_ids(cv, &mut param_ids);
            }
            if let Some(m) = &h.mfem {
                param_ids.extend(m.m_low);
                param_ids.extend(m.m_high);
                param_ids.extend(m.w_scale);
            }
        }
        conv_ids(&up1, &mut param_ids);
        if let Some(f) = &fuse1 {
            conv_ids(&f.reduce, &mut param_ids);
            conv_ids(&f.head_a, &mut param_ids);
            conv_ids(&f.head_b, &mut param_ids);
        }
        conv_ids(&dec1, &mut param_ids);
        conv_ids(&up2, &mut param_ids);
        if let Some(f) = &fuse2 {
            conv_ids(&f.reduce, &mut param_ids);
            conv_ids(&f.head_a, &mut param_ids);
            conv_ids(&f.head_b, &mut param_ids);
        }
        conv_ids(&dec2, &mut param_ids);
        conv_ids(&head, &mut param_ids);

        NetVars { stem, down1, down2, haabs, up1, fuse1, dec1, up2, fuse2, dec2, head, param_ids }
    }

    /// Named parameter tensors in canonical order (the order `register`
    /// fills `param_ids`, and the checkpoint table order).
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $p:expr) => {
                out.push((format!("{}.weight", $name), &$p.weight));
                out.push((format!("{}.bias", $name), &$p.bias));
            };
        }
        conv!("stem", self.stem);
        conv!("down1", self.down1);
        conv!("down2", self.down2);
        for (i, h) in self.haabs.iter().enumerate() {
            out.push((format!("haab{i}.norm.gamma"), &h.norm.gamma));
            out.push((format!("haab{i}.norm.beta"), &h.norm.beta));
            if let Some(hm) = &h.haam {
                out.extend(hm.named(&format!("haab{i}.haam")));
            }
            if let Some(cv) = &h.base_conv {
                conv!(format!("haab{i}.conv"), cv);
            }
            if let Some(m) = &h.mfem {
                out.extend(m.named(&format!("haab{i}.mfem")));
            }
        }
        conv!("up1", self.up1);
        if let Some(f) = &self.fuse1 {
            conv!("fuse1.reduce", f.reduce);
            conv!("fuse1.head_a", f.head_a);
            conv!("fuse1.head_b", f.head_b);
        }
        conv!("dec1", self.dec1);
        conv!("up2", self.up2);
        if let Some(f) = &self.fuse2 {
            conv!("fuse2.reduce", f.reduce);
            conv!("fuse2.head_a", f.head_a);
            conv!("fuse2.head_b", f.head_b);
        }
        conv!("dec2", self.dec2);
        conv!("head", self.head);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $p:expr) => {
                out.push((format!("{}.weight", $name), &mut $p.weight));
                out.push((format!("{}.bias", $name), &mut $p.bias));
            };
        }
        conv!("stem", self.stem);
        conv!("down1", self.down1);
        conv!("down2", self.down2);
        for (i, h) in self.haabs.iter_mut().enumerate() {
            out.push((format!("haab{i}.norm.gamma"), &mut h.norm.gamma));
            out.push((format!("haab{i}.norm.beta"), &mut h.norm.beta));
            if let Some(hm) = &mut h.haam {
                out.extend(hm.named_mut(&format!("haab{i}.haam")));
            }
            if let Some(cv) = &mut h.base_conv {
                conv!(format!("haab{i}.conv"), cv);
            }
            if let Some(m) = &mut h.mfem {
                out.extend(m.named_mut(&format!("haab{i}.mfem")));
            }
        }
        conv!("up1", self.up1);
        if let Some(f) = &mut self.fuse1 {
            conv!("fuse1.reduce", f.reduce);
            conv!("fuse1.head_a", f.head_a);
            conv!("fuse1.head_b", f.head_b);
        }
        conv!("dec1", self.dec1);
        conv!("up2", self.up2);
        if let Some(f) = &mut self.fuse2 {
            conv!("fuse2.reduce", f.reduce);
            conv!("fuse2.head_a", f.head_a);
            conv!("fuse2.head_b", f.head_b);
        }
        conv!("dec2", self.dec2);
        conv!("head", self.head);
        out
    }

    /// Sum of element counts over the named table.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Parameter count from the layer formulas alone, independent of the
/// tensors; cross-checked against the named table.
pub fn analytic_param_count(cfg: &NetConfig) -> usize {
    let n = cfg.base_channels;
    let half = cfg.half();
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let mut total = conv(3, half, 3) + conv(half, half, 3) + conv(half, n, 3);
    let per_block = 2 * n
        + if cfg.use_haam { HaamWeights::<f32>::param_count(n) } else { conv(n, n, 3) }
        + if cfg.use_mfem { MfemWeights::<f32>::param_count(n) } else { 0 };
    total += cfg.num_haab * per_block;
    total += conv(n, half, 1) + conv(half, half, 3) + conv(half, half, 1) + conv(half, half, 3);
    if cfg.use_fusion {
        total += 2 * FusionWeights::<f32>::param_count(half);
    }
    total += conv(half, 3, 3);
    total
}

/// Run the network: hazy (n,3,h,w) in [0,1] with h,w divisible by 4, out
/// the same shape, clamped to [0,1]. The prediction is
/// hazy + 0.5·tanh(head(decoder(...))).
pub fn net_forward<T: Scalar>(
    tape: &mut Tape<T>,
    hazy: ValId,
    vars: &NetVars,
) -> Result<ValId> {
    let s = tape.value(hazy).shape();
    check_divisible_by_4(s)?;
    if s.c != 3 {
        return Err(Error::ChannelMismatch { ctx: "net_forward", got: s.c, expected: 3 });
    }

    let stem = tape.conv2d(hazy, vars.stem.w, vars.stem.b, 1)?;
    let e0 = tape.relu(stem);
    let d1c = tape.conv2d(e0, vars.down1.w, vars.down1.b, 2)?;
    let e1 = tape.relu(d1c);
    let d2c = tape.conv2d(e1, vars.down2.w, vars.down2.b, 2)?;
    let mut h = tape.relu(d2c);

    for block in &vars.haabs {
        h = haab_forward(tape, h, block, None)?;
    }

    let u1 = tape.upsample_nearest2(h);
    let u1 = tape.conv2d(u1, vars.up1.w, vars.up1.b, 1)?;
    let f1 = match &vars.fuse1 {
        Some(f) => sk_fusion(tape, e1, u1, f)?,
        None => tape.add(e1, u1)?,
    };
    let d1 = tape.conv2d(f1, vars.dec1.w, vars.dec1.b, 1)?;
    let d1 = tape.relu(d1);

    let u2 = tape.upsample_nearest2(d1);
    let u2 = tape.conv2d(u2, vars.up2.w, vars.up2.b, 1)?;
    let f2 = match &vars.fuse2 {
        Some(f) => sk_fusion(tape, e0, u2, f)?,
        None => tape.add(e0, u2)?,
    };
    let d2 = tape.conv2d(f2, vars.dec2.w, vars.dec2.b, 1)?;
    let d2 = tape.relu(d2);

    let logits = tape.conv2d(d2, vars.head.w, vars.head.b, 1)?;
    let residual = tape.tanh_act(logits);
    let scaled = tape.scale(residual, T::from_f64(0.5));
    let sum = tape.add(hazy, scaled)?;
    Ok(tape.clamp01(sum))
}

/// Convenience inference entry: fresh tape, no gradients.
pub fn infer<T: Scalar>(net: &NetWeights<T>, hazy: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut input = hazy.clone();
    input.set_requires_grad(false);
    let x = tape.constant(input);
    let vars = net.register(&mut tape);
    let y = net_forward(&mut tape, x, &vars)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect())
            .unwrap()
    }

    fn desk_cfg() -> NetConfig {
        NetConfig::desk()
    }

    #[test]
    fn haab_pure_residual_path() {
        // Zero HAAM correction (A forced to 0) + identity MFEM:
        // y = x + norm_affine(x).
        let cfg = desk_cfg();
        let block = HaabWeights::<f64>::init(&cfg, "haab0", 5);
        let x = seeded(Shape::new(1, 16, 6, 6), 3, -1.0, 1.0);
        let hook = BranchOverride {
            airlight: Some(Tensor::zeros(Shape::new(1, 16, 1, 1))),
            trans_recip: Some(Tensor::ones(Shape::new(1, 16, 6, 6))),
            ..Default::default()
        };

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let vars = block.register(&mut tape);
        let y = haab_forward(&mut tape, xid, &vars, Some(&hook)).unwrap();

        let mut tape2 = Tape::new();
        let xid2 = tape2.leaf(x.clone());
        let nv = block.norm.register(&mut tape2);
        let normed = instance_norm(&mut tape2, xid2, &nv).unwrap();
        let want: Vec<f64> = x
            .data()
            .iter()
            .zip(tape2.value(normed).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let want = Tensor::from_vec(x.shape(), want).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn haab_preserves_shape() {
        let cfg = desk_cfg();
        let block = HaabWeights::<f64>::init(&cfg, "haab0", 8);
        for &(h, w) in &[(4usize, 4usize), (6, 9), (16, 16)] {
            let x = seeded(Shape::new(2, 16, h, w), 9, -1.0, 1.0);
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let vars = block.register(&mut tape);
            let y = haab_forward(&mut tape, xid, &vars, None).unwrap();
            assert_eq!(tape.value(y).shape(), x.shape());
        }
    }

    #[test]
    fn haab_gradcheck_input() {
        let cfg = NetConfig { base_channels: 8, num_haab: 1, ..NetConfig::desk() };
        let block = HaabWeights::<f64>::init(&cfg, "haab0", 12);
        let x = seeded(Shape::new(1, 8, 6, 6), 21, -1.0, 1.0);
        let err = finite_diff_check(
            &move |tape: &mut Tape<f64>, xid: ValId| {
                let vars = block.register(tape);
                let y = haab_forward(tape, xid, &vars, None)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn fusion_symmetric_init_averages() {
        let f = FusionWeights::<f64>::init(8, "fuse", 7);
        let a = seeded(Shape::new(1, 8, 5, 5), 1, -1.0, 1.0);
        let b = seeded(Shape::new(1, 8, 5, 5), 2, -1.0, 1.0);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(b.clone());
        let vars = f.register(&mut tape);
        let y = sk_fusion(&mut tape, aid, bid, &vars).unwrap();
        let want: Vec<f64> =
            a.data().iter().zip(b.data()).map(|(&x, &z)| 0.5 * (x + z)).collect();
        let want = Tensor::from_vec(a.shape(), want).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fusion_weights_form_convex_combination() {
        // With random logit heads the weights still sum to one per channel:
        // fusing a tensor with itself returns it unchanged.
        let mut f = FusionWeights::<f64>::init(8, "fuse", 7);
        f.head_a = ConvParams::init_named(ConvSpec::new(1, 8, 1, 1), "fuse.head_a", 100);
        f.head_b = ConvParams::init_named(ConvSpec::new(1, 8, 1, 1), "fuse.head_b", 101);
        let a = seeded(Shape::new(2, 8, 4, 4), 3, -1.0, 1.0);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(a.clone());
        let vars = f.register(&mut tape);
        let y = sk_fusion(&mut tape, aid, bid, &vars).unwrap();
        assert!(tape.value(y).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn fusion_matches_reference_composition() {
        // Off-tape oracle: GAP → 1x1 convs → two-way softmax → blend.
        let channels = 8usize;
        let mut f = FusionWeights::<f64>::init(channels, "fuse", 70);
        f.head_a = ConvParams::init_named(ConvSpec::new(1, channels, 1, 1), "ha", 71);
        f.head_b = ConvParams::init_named(ConvSpec::new(1, channels, 1, 1), "hb", 72);
        let a = seeded(Shape::new(1, channels, 4, 4), 4, -1.0, 1.0);
        let b = seeded(Shape::new(1, channels, 4, 4), 5, -1.0, 1.0);

        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(b.clone());
        let vars = f.register(&mut tape);
        let y = sk_fusion(&mut tape, aid, bid, &vars).unwrap();

        // Reference: scalar loops through the same arithmetic.
        let mid = 1usize;
        let mut gap = vec![0.0f64; channels];
        for c in 0..channels {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += a.at(0, c, i, j) + b.at(0, c, i, j);
                }
            }
            gap[c] = s / 16.0;
        }
        let mut z = vec![0.0f64; mid];
        for m in 0..mid {
            let mut s = f.reduce.bias.data()[m];
            for c in 0..channels {
                s += f.reduce.weight.at(m, c, 0, 0) * gap[c];
            }
            z[m] = s.max(0.0);
        }
        let logit = |head: &ConvParams<f64>, c: usize| {
            let mut s = head.bias.data()[c];
            for m in 0..mid {
                s += head.weight.at(c, m, 0, 0) * z[m];
            }
            s
        };
        let mut want = Tensor::zeros(a.shape());
        for c in 0..channels {
            let (la, lb) = (logit(&f.head_a, c), logit(&f.head_b, c));
            let ea = la.exp();
            let eb = lb.exp();
            let wa = ea / (ea + eb);
            for i in 0..4 {
                for j in 0..4 {
                    want.set(0, c, i, j, wa * a.at(0, c, i, j) + (1.0 - wa) * b.at(0, c, i, j));
                }
            }
        }
        assert!(tape.value(y).max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn fusion_rejects_shape_mismatch() {
        let f = FusionWeights::<f64>::init(8, "fuse", 7);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 5)));
        let vars = f.register(&mut tape);
        assert!(sk_fusion(&mut tape, a, b, &vars).is_err());
    }

    #[test]
    fn zero_head_network_is_identity() {
        let net = NetWeights::<f64>::init(desk_cfg(), 42);
        let hazy = seeded(Shape::new(1, 3, 16, 16), 6, 0.0, 1.0);
        let out = infer(&net, &hazy).unwrap();
        assert!(out.max_abs_diff(&hazy) < 1e-12);
    }

    #[test]
    fn output_always_in_unit_range() {
        let mut net = NetWeights::<f64>::init(desk_cfg(), 43);
        net.head = ConvParams::init_named(net.head.spec, "head.random", 99);
        let hazy = seeded(Shape::new(2, 3, 16, 16), 7, 0.0, 1.0);
        let out = infer(&net, &hazy).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = NetWeights::<f64>::init(desk_cfg(), 44);
        let hazy = Tensor::full(Shape::new(1, 3, 18, 20), 0.5);
        let err = infer(&net, &hazy).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("20x20"), "{msg}");
    }

    #[test]
    fn constant_input_constant_interior() {
        // Zero padding pollutes a border band whose width is set by the
        // receptive field; away from it the output of a constant input is
        // constant. 128x128 leaves a comfortable interior at desk scale.
        let mut net = NetWeights::<f64>::init(desk_cfg(), 45);
        net.head = ConvParams::init_named(net.head.spec, "head.random", 77);
        let hazy = Tensor::full(Shape::new(1, 3, 128, 128), 0.4);
        let out = infer(&net, &hazy).unwrap();
        let center = out.at(0, 0, 64, 64);
        for c in 0..3 {
            let v = out.at(0, c, 64, 64);
            for i in 48..80 {
                for j in 48..80 {
                    assert!(
                        (out.at(0, c, i, j) - v).abs() < 1e-9,
                        "at ({i},{j}): {} vs {v}",
                        out.at(0, c, i, j)
                    );
                }
            }
        }
        assert!(center.is_finite());
    }

    #[test]
    fn param_ids_align_with_named_table() {
        for cfg in [
            desk_cfg(),
            NetConfig { use_haam: false, ..desk_cfg() },
            NetConfig { use_mfem: false, ..desk_cfg() },
            NetConfig { use_fusion: false, ..desk_cfg() },
            NetConfig { use_haam: false, use_mfem: false, use_fusion: false, ..desk_cfg() },
        ] {
            let net = NetWeights::<f32>::init(cfg, 1);
            let mut tape = Tape::new();
            let vars = net.register(&mut tape);
            let named = net.named();
            assert_eq!(named.len(), vars.param_ids.len());
            for ((name, tensor), id) in named.iter().zip(&vars.param_ids) {
                assert_eq!(
                    tensor.shape(),
                    tape.value(*id).shape(),
                    "misaligned parameter {name}"
                );
                assert_eq!(tensor.data(), tape.value(*id).data(), "misaligned parameter {name}");
            }
        }
    }

    #[test]
    fn named_mut_matches_named_order() {
        let mut net = NetWeights::<f32>::init(desk_cfg(), 2);
        let names: Vec<String> = net.named().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = net.named_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
    }

    #[test]
    fn analytic_count_matches_table() {
        for cfg in [
            NetConfig::default(),
            desk_cfg(),
            NetConfig { use_haam: false, ..desk_cfg() },
            NetConfig { use_mfem: false, ..desk_cfg() },
            NetConfig { use_haam: false, use_mfem: false, use_fusion: false, ..desk_cfg() },
        ] {
            let net = NetWeights::<f32>::init(cfg, 3);
            assert_eq!(net.param_count(), analytic_param_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn param_count_independent_of_resolution() {
        // Fully convolutional: the parameter table never references the
        // input extent, so the count is resolution-free by construction.
        let net = NetWeights::<f32>::init(desk_cfg(), 4);
        let before = net.param_count();
        for hw in [16usize, 32, 64] {
            let hazy = Tensor::full(Shape::new(1, 3, hw, hw), 0.5f32);
            let _ = infer(&net, &hazy).unwrap();
            assert_eq!(net.param_count(), before);
        }
    }
}
