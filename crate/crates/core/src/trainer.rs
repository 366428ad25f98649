//! Deterministic training: Adam with cosine-annealed learning rate over
//! random crops of procedurally synthesized hazy/clean pairs, periodic
//! validation, checkpoint assembly, and the ablation harness.
//!
//! Reproducibility contract: (seed, dataset_seed, config) fully determine
//! the weight stream, the batch/crop stream, and therefore the final
//! checkpoint and metric log, bit for bit. Weight initialization derives
//! per-parameter seeds from parameter names, so ablation arms share
//! identical initializations for the layers they have in common.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{net_forward, NetConfig, NetWeights};
use crate::checkpoint::{self, meta_scalar, meta_u64};
use crate::error::{Error, Result};
use crate::loss::{total_loss, CrExtractor};
use crate::metrics::{psnr, ssim};
use crate::physics::{generate_scene, synthesize};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::util::seed_for;

/// Optimizer, schedule, crop, batch, and dataset-size settings. Defaults
/// are the desk-scale protocol; the paper-scale values (batch 64, crop 320,
/// 80k steps) are plain overrides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub total_steps: usize,
    pub lambda: f64,
    /// Parsed for provenance; no implemented equation consumes it.
    pub gamma: f64,
    pub seed: u64,
    pub val_every: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub scene_size: usize,
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1.5e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            crop: 64,
            total_steps: 2000,
            lambda: 0.2,
            gamma: 0.25,
            seed: 7,
            val_every: 100,
            train_pairs: 200,
            val_pairs: 50,
            scene_size: 96,
            val_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop % 4 != 0 {
            return Err(Error::InvalidArg(format!(
                "crop must be divisible by 4, got {}",
                self.crop
            )));
        }
        if self.crop > self.scene_size {
            return Err(Error::InvalidArg(format!(
                "crop {} exceeds scene size {}",
                self.crop, self.scene_size
            )));
        }
        if self.val_size % 4 != 0 || self.val_size < 12 {
            return Err(Error::InvalidArg(format!(
                "val_size must be >= 12 and divisible by 4, got {}",
                self.val_size
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.train_pairs == 0 {
            return Err(Error::InvalidArg("batch_size, total_steps, train_pairs must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArg(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// lr(step) = lr_min + (lr_max - lr_min)·(1 + cos(π·step/total))/2.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArg(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }
}

/// One bias-corrected Adam update over named parameters. Gradients are
/// validated first so a non-finite gradient aborts before any mutation.
pub fn adam_step(
    params: &mut [(String, &mut Tensor<f32>)],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    for ((name, p), g) in params.iter().zip(grads) {
        assert_eq!(p.numel(), g.len(), "gradient size mismatch for {name}");
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArg(format!("non-finite gradient in parameter {name}")));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = (1.0 - cfg.beta1.powf(t)) as f32;
    let bc2 = (1.0 - cfg.beta2.powf(t)) as f32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let eps = cfg.eps as f32;
    let lr = lr as f32;
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((w, &g), (mi, vi)) in
            p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── Dataset ──────────────────────────────────────────────────────────

/// One training example, already cast to the training dtype.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub hazy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<TrainPair>,
    pub val: Vec<TrainPair>,
}

/// Synthesize a full dataset from one seed: `train_pairs` scenes at
/// `scene_size` and `val_pairs` held-out scenes at `val_size`.
pub fn synth_dataset(dataset_seed: u64, cfg: &TrainConfig) -> Result<Dataset> {
    let make = |tag: &str, idx: usize, size: usize| -> Result<TrainPair> {
        let scene = generate_scene(seed_for(&format!("{tag}{idx}"), dataset_seed), size)?;
        let pair = synthesize(&scene)?;
        Ok(TrainPair { hazy: pair.hazy.cast(), clean: pair.clean.cast() })
    };
    let mut train = Vec::with_capacity(cfg.train_pairs);
    for i in 0..cfg.train_pairs {
        train.push(make("train", i, cfg.scene_size)?);
    }
    let mut val = Vec::with_capacity(cfg.val_pairs);
    for i in 0..cfg.val_pairs {
        val.push(make("val", i, cfg.val_size)?);
    }
    Ok(Dataset { train, val })
}

// ── Training loop ────────────────────────────────────────────────────

/// Held-out metric snapshot: prediction and raw hazy input against clean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ValStats {
    pub psnr_pred: f64,
    pub psnr_hazy: f64,
    pub ssim_pred: f64,
    pub ssim_hazy: f64,
}

/// One metric-log record. Validation columns are filled on eval steps.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<ValStats>,
}

/// Render the metric log as CSV (step, lr, loss, val_psnr, val_ssim).
pub fn log_to_csv(log: &[LogRow]) -> String {
    let mut out = String::from("step,lr,loss,val_psnr,val_ssim\n");
    for row in log {
        match &row.val {
            Some(v) => out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.step, row.lr, row.loss, v.psnr_pred, v.ssim_pred
            )),
            None => out.push_str(&format!("{},{},{},,\n", row.step, row.lr, row.loss)),
        }
    }
    out
}

pub struct TrainOutput {
    pub net: NetWeights<f32>,
    pub cr_seed: u64,
    pub log: Vec<LogRow>,
    pub final_val: ValStats,
    /// Set when the loop stopped on a non-finite loss or gradient; the
    /// weights are the last good state from before the failing step.
    pub aborted: Option<String>,
}

impl TrainOutput {
    /// Assemble the checkpoint table: config echo, seeds, then weights.
    pub fn checkpoint_table(&self, cfg: &TrainConfig) -> Vec<(String, Tensor<f32>)> {
        let extra = vec![
            ("config.lr_max".to_string(), meta_scalar(cfg.lr_max)),
            ("config.lr_min".to_string(), meta_scalar(cfg.lr_min)),
            ("config.beta1".to_string(), meta_scalar(cfg.beta1)),
            ("config.beta2".to_string(), meta_scalar(cfg.beta2)),
            ("config.eps".to_string(), meta_scalar(cfg.eps)),
            ("config.batch_size".to_string(), meta_scalar(cfg.batch_size as f64)),
            ("config.crop".to_string(), meta_scalar(cfg.crop as f64)),
            ("config.total_steps".to_string(), meta_scalar(cfg.total_steps as f64)),
            ("config.lambda".to_string(), meta_scalar(cfg.lambda)),
            ("config.gamma".to_string(), meta_scalar(cfg.gamma)),
            ("config.val_every".to_string(), meta_scalar(cfg.val_every as f64)),
            ("config.train_pairs".to_string(), meta_scalar(cfg.train_pairs as f64)),
            ("config.val_pairs".to_string(), meta_scalar(cfg.val_pairs as f64)),
            ("config.scene_size".to_string(), meta_scalar(cfg.scene_size as f64)),
            ("config.val_size".to_string(), meta_scalar(cfg.val_size as f64)),
            ("meta.seed".to_string(), meta_u64(cfg.seed)),
            ("meta.cr_seed".to_string(), meta_u64(self.cr_seed)),
        ];
        checkpoint::net_table(&self.net, &extra)
    }
}

/// Evaluate mean PSNR/SSIM over the validation pairs.
pub fn evaluate(net: &NetWeights<f32>, val: &[TrainPair]) -> Result<ValStats> {
    let mut acc = ValStats::default();
    for pair in val {
        let pred = crate::backbone::infer(net, &pair.hazy)?;
        acc.psnr_pred += psnr(&pred, &pair.clean);
        acc.psnr_hazy += psnr(&pair.hazy, &pair.clean);
        acc.ssim_pred += ssim(&pred, &pair.clean)?;
        acc.ssim_hazy += ssim(&pair.hazy, &pair.clean)?;
    }
    let n = val.len() as f64;
    acc.psnr_pred /= n;
    acc.psnr_hazy /= n;
    acc.ssim_pred /= n;
    acc.ssim_hazy /= n;
    Ok(acc)
}

/// Run the full training loop. Batches are sampled and cropped from a
/// dedicated seeded stream, so data order is identical across ablation
/// arms trained with the same seeds.
pub fn train(net_cfg: NetConfig, cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    train_net(NetWeights::<f32>::init(net_cfg, cfg.seed), cfg, dataset)
}

/// Train from explicitly provided initial weights.
pub fn train_net(net: NetWeights<f32>, cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::InvalidArg("dataset must contain train and val pairs".into()));
    }

    let mut net = net;
    let cr_seed = seed_for("cr-extractor", cfg.seed);
    let cr = CrExtractor::<f32>::new(cr_seed);
    let sizes: Vec<usize> = net.named().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed_for("batch-stream", cfg.seed));
    let mut log = Vec::with_capacity(cfg.total_steps);

    let scene_shape = dataset.train[0].hazy.shape();
    let crop = cfg.crop;
    let max_off_h = scene_shape.h - crop;
    let max_off_w = scene_shape.w - crop;

    for step in 0..cfg.total_steps {
        let lr = cosine_lr(step, cfg)?;

        // Assemble the cropped batch.
        let bs = cfg.batch_size;
        let batch_shape = Shape::new(bs, 3, crop, crop);
        let mut hazy = Tensor::<f32>::zeros(batch_shape);
        let mut clean = Tensor::<f32>::zeros(batch_shape);
        for b in 0..bs {
            let idx = data_rng.gen_range(0..dataset.train.len());
            let oy = if max_off_h == 0 { 0 } else { data_rng.gen_range(0..=max_off_h) };
            let ox = if max_off_w == 0 { 0 } else { data_rng.gen_range(0..=max_off_w) };
            let pair = &dataset.train[idx];
            for c in 0..3 {
                for i in 0..crop {
                    for j in 0..crop {
                        hazy.set(b, c, i, j, pair.hazy.at(0, c, oy + i, ox + j));
                        clean.set(b, c, i, j, pair.clean.at(0, c, oy + i, ox + j));
                    }
                }
            }
        }

        // Forward, loss, backward.
        let mut tape = Tape::new();
        let hazy_id = tape.constant(hazy);
        let clean_id = tape.constant(clean);
        let vars = net.register(&mut tape);
        let pred = net_forward(&mut tape, hazy_id, &vars)?;
        let loss_id = total_loss(&mut tape, pred, clean_id, hazy_id, &cr, cfg.lambda)?;
        let loss = tape.scalar_value(loss_id) as f64;
        if !loss.is_finite() {
            let final_val = evaluate(&net, &dataset.val)?;
            return Ok(TrainOutput {
                net,
                cr_seed,
                log,
                final_val,
                aborted: Some(format!("non-finite loss at step {step}")),
            });
        }
        tape.backward(loss_id)?;
        let grads: Vec<Vec<f32>> = vars
            .param_ids
            .iter()
            .enumerate()
            .map(|(i, id)| tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; sizes[i]]))
            .collect();
        drop(tape);

        let mut params = net.named_mut();
        if let Err(e) = adam_step(&mut params, &grads, &mut adam, lr, cfg) {
            drop(params);
            let final_val = evaluate(&net, &dataset.val)?;
            return Ok(TrainOutput {
                net,
                cr_seed,
                log,
                final_val,
                aborted: Some(format!("step {step}: {e}")),
            });
        }
        drop(params);

        let val = if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.total_steps {
            Some(evaluate(&net, &dataset.val)?)
        } else {
            None
        };
        log.push(LogRow { step, lr, loss, val });
    }

    let final_val = evaluate(&net, &dataset.val)?;
    Ok(TrainOutput { net, cr_seed, log, final_val, aborted: None })
}

// ── Ablation harness ─────────────────────────────────────────────────

/// The four arms compared by the scaled-down ablation: a plain conv
/// backbone, each module alone, and the full network.
pub fn ablation_arms(base: NetConfig) -> [(&'static str, NetConfig); 4] {
    [
        ("base", NetConfig { use_haam: false, use_mfem: false, use_fusion: false, ..base }),
        ("base+haam", NetConfig { use_haam: true, use_mfem: false, use_fusion: false, ..base }),
        ("base+mfem", NetConfig { use_haam: false, use_mfem: true, use_fusion: false, ..base }),
        ("full", NetConfig { use_haam: true, use_mfem: true, use_fusion: true, ..base }),
    ]
}

pub struct ArmResult {
    pub name: &'static str,
    pub net_cfg: NetConfig,
    pub val: ValStats,
    pub output: TrainOutput,
}

/// Train every arm under identical seeds and data order.
pub fn run_ablation(
    base: NetConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<Vec<ArmResult>> {
    let mut results = Vec::new();
    for (name, net_cfg) in ablation_arms(base) {
        let output = train(net_cfg, cfg, dataset)?;
        results.push(ArmResult { name, net_cfg, val: output.final_val, output });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 6,
            batch_size: 2,
            crop: 16,
            train_pairs: 3,
            val_pairs: 2,
            scene_size: 24,
            val_size: 16,
            val_every: 3,
            ..Default::default()
        }
    }

    fn tiny_net() -> NetConfig {
        NetConfig { base_channels: 8, num_haab: 1, ..NetConfig::desk() }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), cfg.lr_max);
        let end = cosine_lr(cfg.total_steps, &cfg).unwrap();
        assert!((end - cfg.lr_min).abs() < 1e-18);
        let mid = cosine_lr(cfg.total_steps / 2, &cfg).unwrap();
        assert!((mid - 0.5 * (cfg.lr_max + cfg.lr_min)).abs() < 1e-12);
        assert!(cosine_lr(cfg.total_steps + 1, &cfg).is_err());
    }

    #[test]
    fn cosine_is_monotone_nonincreasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for step in 0..=cfg.total_steps {
            let lr = cosine_lr(step, &cfg).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 1));
        let mut params = vec![("p".to_string(), &mut p)];
        let grads = vec![vec![3.0f32, -0.5]];
        let mut state = AdamState::new(&[2]);
        adam_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
        drop(params);
        assert!((p.data()[0] - (-0.01)).abs() < 1e-6);
        assert!((p.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 1.25);
        let mut state = AdamState::new(&[1]);
        for _ in 0..10 {
            let mut params = vec![("p".to_string(), &mut p)];
            adam_step(&mut params, &[vec![0.0]], &mut state, 0.01, &cfg).unwrap();
        }
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        // f(w) = (w-3)^2 from w=0; 100 steps with lr 0.1 lands near 3.
        let cfg = TrainConfig::default();
        let mut w = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        let mut state = AdamState::new(&[1]);
        for _ in 0..100 {
            let g = 2.0 * (w.data()[0] - 3.0);
            let mut params = vec![("w".to_string(), &mut w)];
            adam_step(&mut params, &[vec![g]], &mut state, 0.1, &cfg).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.5, "w={}", w.data()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_without_mutation() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 2.0);
        let mut state = AdamState::new(&[1]);
        let mut params = vec![("layer.weight".to_string(), &mut p)];
        let err = adam_step(&mut params, &[vec![f32::NAN]], &mut state, 0.01, &cfg).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
        drop(params);
        assert_eq!(p.data()[0], 2.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn adam_second_moments_stay_nonnegative() {
        let cfg = TrainConfig::default();
        let mut p = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        let mut state = AdamState::new(&[3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g: Vec<f32> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut params = vec![("p".to_string(), &mut p)];
            adam_step(&mut params, &[g], &mut state, 0.01, &cfg).unwrap();
        }
        for v in state.second_moments() {
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn dataset_synthesis_is_deterministic() {
        let cfg = tiny_cfg();
        let a = synth_dataset(11, &cfg).unwrap();
        let b = synth_dataset(11, &cfg).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.val.len(), 2);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.hazy.data(), y.hazy.data());
        }
    }

    #[test]
    fn short_training_runs_are_bit_identical() {
        let cfg = tiny_cfg();
        let dataset = synth_dataset(3, &cfg).unwrap();
        let out1 = train(tiny_net(), &cfg, &dataset).unwrap();
        let out2 = train(tiny_net(), &cfg, &dataset).unwrap();
        assert!(out1.aborted.is_none());
        let b1 = checkpoint::to_bytes(&out1.checkpoint_table(&cfg));
        let b2 = checkpoint::to_bytes(&out2.checkpoint_table(&cfg));
        assert_eq!(b1, b2);
        assert_eq!(log_to_csv(&out1.log), log_to_csv(&out2.log));
    }

    #[test]
    fn training_log_has_expected_shape() {
        let cfg = tiny_cfg();
        let dataset = synth_dataset(4, &cfg).unwrap();
        let out = train(tiny_net(), &cfg, &dataset).unwrap();
        assert_eq!(out.log.len(), cfg.total_steps);
        for (i, row) in out.log.iter().enumerate() {
            assert_eq!(row.step, i);
            assert!(row.loss.is_finite());
            let expect_val = (i + 1) % cfg.val_every == 0 || i + 1 == cfg.total_steps;
            assert_eq!(row.val.is_some(), expect_val, "step {i}");
        }
        // Steps strictly increase and lr follows the schedule.
        for w in out.log.windows(2) {
            assert!(w[1].step > w[0].step);
            assert!(w[1].lr <= w[0].lr);
        }
    }

}
