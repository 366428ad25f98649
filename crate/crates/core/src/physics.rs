//! Atmospheric scattering model: hazy-image synthesis, exact analytic
//! inversion, and procedural scene generation.
//!
//! Everything here runs in f64 and stays off the tape; this module is the
//! ground-truth side of the system, used both to build datasets and as the
//! round-trip oracle for the physics tests. Images are (1,3,h,w) in [0,1],
//! depth and transmission maps are (1,1,h,w).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Generative record for one scene: clean radiance, scene depth, scattering
/// coefficient, and per-channel atmospheric light.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub clean: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub seed: u64,
}

/// A synthesized hazy/clean pair with its transmission map and provenance.
#[derive(Clone, Debug)]
pub struct HazyPair {
    pub hazy: Tensor<f64>,
    pub clean: Tensor<f64>,
    pub transmission: Tensor<f64>,
    pub airlight: [f64; 3],
    pub seed: u64,
}

/// t = exp(-beta * d), elementwise over the depth map.
pub fn transmission(depth: &Tensor<f64>, beta: f64) -> Result<Tensor<f64>> {
    if beta <= 0.0 {
        return Err(Error::InvalidArg(format!("beta must be positive, got {beta}")));
    }
    if let Some(i) = depth.data().iter().position(|&d| d < 0.0) {
        return Err(Error::InvalidArg(format!("negative depth at element {i}")));
    }
    Ok(depth.map(|d| (-beta * d).exp()))
}

/// I = J·t + A·(1 - t), per pixel and channel.
pub fn synthesize(scene: &SceneSpec) -> Result<HazyPair> {
    let s = scene.clean.shape();
    if s.c != 3 {
        return Err(Error::ChannelMismatch { ctx: "synthesize", got: s.c, expected: 3 });
    }
    if scene.depth.shape() != Shape::new(s.n, 1, s.h, s.w) {
        return Err(Error::ShapeMismatch {
            ctx: "synthesize depth",
            lhs: s,
            rhs: scene.depth.shape(),
        });
    }
    if scene.clean.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg("clean image values must lie in [0,1]".into()));
    }
    if scene.airlight.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
        return Err(Error::InvalidArg("airlight values must lie in [0,1]".into()));
    }
    let t = transmission(&scene.depth, scene.beta)?;
    let mut hazy = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..3 {
            let a = scene.airlight[c];
            for i in 0..s.h {
                for j in 0..s.w {
                    let tv = t.at(n, 0, i, j);
                    let v = scene.clean.at(n, c, i, j) * tv + a * (1.0 - tv);
                    hazy.set(n, c, i, j, v);
                }
            }
        }
    }
    Ok(HazyPair {
        hazy,
        clean: scene.clean.clone(),
        transmission: t,
        airlight: scene.airlight,
        seed: scene.seed,
    })
}

/// Solve the scattering model for the scene radiance:
/// J = (I - A·(1 - t)) / max(t, t_floor), clamped to [0,1].
pub fn invert_exact(
    hazy: &Tensor<f64>,
    t: &Tensor<f64>,
    airlight: [f64; 3],
    t_floor: f64,
) -> Result<Tensor<f64>> {
    if !(0.0..=0.2).contains(&t_floor) || t_floor == 0.0 {
        return Err(Error::InvalidArg(format!("t_floor must lie in (0, 0.2], got {t_floor}")));
    }
    let s = hazy.shape();
    if t.shape() != Shape::new(s.n, 1, s.h, s.w) {
        return Err(Error::ShapeMismatch { ctx: "invert_exact", lhs: s, rhs: t.shape() });
    }
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let a = airlight[c];
            for i in 0..s.h {
                for j in 0..s.w {
                    let tv = t.at(n, 0, i, j).max(t_floor);
                    let j_hat = (hazy.at(n, c, i, j) - a * (1.0 - tv)) / tv;
                    out.set(n, c, i, j, j_hat.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Default transmission floor for the inversion oracle.
pub const T_FLOOR_DEFAULT: f64 = 0.05;

/// Procedurally generate a scene: a clean image mixing smooth gradients,
/// band-limited noise, and hard-edged rectangles/disks; a depth field of a
/// smooth ramp plus blobs normalized to [0,3]; beta uniform in [0.4,2.0];
/// airlight per channel uniform in [0.7,1.0]. Bit-reproducible from the seed.
pub fn generate_scene(seed: u64, size: usize) -> Result<SceneSpec> {
    if size < 16 {
        return Err(Error::InvalidArg(format!("scene size must be at least 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;

    // Clean image: per-channel linear gradients.
    let mut clean = Tensor::zeros(Shape::new(1, 3, size, size));
    for c in 0..3 {
        let base = rng.gen_range(0.25..0.75);
        let gx = rng.gen_range(-0.35..0.35);
        let gy = rng.gen_range(-0.35..0.35);
        for i in 0..size {
            for j in 0..size {
                clean.set(0, c, i, j, base + gx * (j as f64 / s) + gy * (i as f64 / s));
            }
        }
    }

    // Band-limited noise: a coarse grid bilinearly upsampled, shared across
    // channels with small per-channel variation.
    let grid = 8usize;
    let mut coarse = vec![0.0f64; grid * grid];
    coarse.iter_mut().for_each(|v| *v = rng.gen_range(-0.18..0.18));
    let chan_amp: Vec<f64> = (0..3).map(|_| rng.gen_range(0.7..1.0)).collect();
    for i in 0..size {
        for j in 0..size {
            let v = bilinear(&coarse, grid, i as f64 / (size - 1) as f64, j as f64 / (size - 1) as f64);
            for c in 0..3 {
                let cur = clean.at(0, c, i, j);
                clean.set(0, c, i, j, cur + chan_amp[c] * v);
            }
        }
    }

    // Hard-edged shapes: overwritten fills give genuine high-frequency edges.
    let n_shapes = rng.gen_range(4..8);
    for _ in 0..n_shapes {
        let color: [f64; 3] = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        if rng.gen_bool(0.5) {
            // Rectangle.
            let x0 = rng.gen_range(0..size - 4);
            let y0 = rng.gen_range(0..size - 4);
            let w = rng.gen_range(3..=(size / 3).max(4));
            let h = rng.gen_range(3..=(size / 3).max(4));
            for i in y0..(y0 + h).min(size) {
                for j in x0..(x0 + w).min(size) {
                    for c in 0..3 {
                        clean.set(0, c, i, j, color[c]);
                    }
                }
            }
        } else {
            // Disk.
            let cx = rng.gen_range(0..size) as f64;
            let cy = rng.gen_range(0..size) as f64;
            let r = rng.gen_range(2.0..(s / 5.0).max(3.0));
            for i in 0..size {
                for j in 0..size {
                    let dx = j as f64 - cx;
                    let dy = i as f64 - cy;
                    if dx * dx + dy * dy <= r * r {
                        for c in 0..3 {
                            clean.set(0, c, i, j, color[c]);
                        }
                    }
                }
            }
        }
    }
    let clean = clean.map(|v| v.clamp(0.0, 1.0));

    // Depth: directional ramp plus smooth blobs, normalized to [0,3].
    let mut depth = Tensor::zeros(Shape::new(1, 1, size, size));
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let n_blobs = rng.gen_range(2..5);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(s / 8.0..s / 3.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..size {
        for j in 0..size {
            let mut d = dx * (j as f64 / s) + dy * (i as f64 / s);
            for &(bx, by, br, amp) in &blobs {
                let r2 = ((j as f64 - bx).powi(2) + (i as f64 - by).powi(2)) / (br * br);
                d += amp * (-r2).exp();
            }
            depth.set(0, 0, i, j, d);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = (hi - lo).max(1e-12);
    let depth = depth.map(|d| 3.0 * (d - lo) / span);

    let beta = rng.gen_range(0.4..2.0);
    let airlight = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];

    Ok(SceneSpec { clean, depth, beta, airlight, seed })
}

fn bilinear(grid: &[f64], n: usize, y: f64, x: f64) -> f64 {
    let gy = y * (n - 1) as f64;
    let gx = x * (n - 1) as f64;
    let y0 = gy.floor() as usize;
    let x0 = gx.floor() as usize;
    let y1 = (y0 + 1).min(n - 1);
    let x1 = (x0 + 1).min(n - 1);
    let fy = gy - y0 as f64;
    let fx = gx - x0 as f64;
    let v00 = grid[y0 * n + x0];
    let v01 = grid[y0 * n + x1];
    let v10 = grid[y1 * n + x0];
    let v11 = grid[y1 * n + x1];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}
