// temporary: full-length comparison of head init policies
use haanet::backbone::*;
use haanet::ops::{ConvParams, ConvSpec};
use haanet::trainer::*;

fn with_head_scale(cfg: NetConfig, seed: u64, scale: f32) -> NetWeights<f32> {
    let mut net = NetWeights::<f32>::init(cfg, seed);
    if scale > 0.0 {
        let mut head = ConvParams::init_named(ConvSpec::new(cfg.half(), 3, 3, 1), "head", seed);
        head.weight = head.weight.map(|v| v * scale).with_grad();
        net.head = head;
    }
    net
}

#[test]
fn head_init_comparison() {
    let cfg = TrainConfig { total_steps: 2000, ..Default::default() };
    let dataset = synth_dataset(42, &cfg).unwrap();
    for (name, scale) in [("zero", 0.0f32), ("k0.10", 0.1), ("k0.02", 0.02)] {
        let net = with_head_scale(NetConfig::desk(), cfg.seed, scale);
        let out = train_net(net, &cfg, &dataset).unwrap();
        println!(
            "head {name}: hazy {:.2} dB / {:.4} -> pred {:.2} dB / {:.4}   gain {:+.2} dB  loss_end {:.3}",
            out.final_val.psnr_hazy, out.final_val.ssim_hazy,
            out.final_val.psnr_pred, out.final_val.ssim_pred,
            out.final_val.psnr_pred - out.final_val.psnr_hazy,
            out.log.last().unwrap().loss
        );
    }
}
