#![allow(dead_code)]

use ifmatch_core::featperturb::{shear_offsets, Direction, DrawParams, Intensity, PerturbDraw, Strategy};
use ifmatch_core::nets::{HookPoint, Model, ModelSpec};
use ifmatch_core::{grad_check, Tensor};
use ifmatch_oracle as oracle;
use rand::Rng;

pub fn dir(d: Direction) -> oracle::Dir {
    match d {
        Direction::Up => oracle::Dir::Up,
        Direction::Down => oracle::Dir::Down,
        Direction::Left => oracle::Dir::Left,
        Direction::Right => oracle::Dir::Right,
    }
}

/// The oracle twin of a production draw. Shear offsets are recomputed by
/// the oracle from `len` rather than copied.
pub fn twin(p: &DrawParams, h: usize, w: usize) -> oracle::Perturb {
    match p {
        DrawParams::ChannelDrop { keep } => oracle::Perturb::ChannelDrop { keep: keep.clone() },
        &DrawParams::SpatialDrop { x, y, h, w } => oracle::Perturb::SpatialDrop { x, y, h, w },
        &DrawParams::Translate { dir: d, len } => oracle::Perturb::Translate { dir: dir(d), len },
        &DrawParams::Shear { dir: d, len, .. } => {
            let lines = if matches!(d, Direction::Left | Direction::Right) {
                h
            } else {
                w
            };
            oracle::Perturb::Shear {
                dir: dir(d),
                offsets: oracle::shear_offsets(len, lines),
            }
        }
        &DrawParams::ValueSmooth { k, alpha } => oracle::Perturb::ValueSmooth { k, alpha },
    }
}

pub fn random_tensor<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

pub fn random_shape<R: Rng>(rng: &mut R, min_hw: usize) -> [usize; 4] {
    [
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(min_hw..=16),
        rng.random_range(min_hw..=16),
    ]
}

/// Arbitrary legal parameters, wider than what `draw_strategy` samples.
pub fn random_params<R: Rng>(s: Strategy, [_, c, h, w]: [usize; 4], rng: &mut R) -> DrawParams {
    let d = Direction::ALL[rng.random_range(0..4)];
    match s {
        Strategy::ChannelDrop => DrawParams::ChannelDrop {
            keep: (0..c).map(|_| rng.random()).collect(),
        },
        Strategy::SpatialDrop => {
            let rh = rng.random_range(0..=h);
            let rw = rng.random_range(0..=w);
            DrawParams::SpatialDrop {
                x: rng.random_range(0..=h - rh),
                y: rng.random_range(0..=w - rw),
                h: rh,
                w: rw,
            }
        }
        Strategy::Translate => {
            let ext = if matches!(d, Direction::Left | Direction::Right) {
                w
            } else {
                h
            };
            DrawParams::Translate {
                dir: d,
                len: rng.random_range(0..=ext),
            }
        }
        Strategy::Shear => {
            let (ext, lines) = if matches!(d, Direction::Left | Direction::Right) {
                (w, h)
            } else {
                (h, w)
            };
            let len = rng.random_range(0..=ext);
            DrawParams::Shear {
                dir: d,
                len,
                offsets: shear_offsets(len, lines),
            }
        }
        Strategy::ValueSmooth => {
            let kmax = h.min(w);
            let ks: Vec<usize> = (3..=kmax).filter(|k| k % 2 == 1).collect();
            DrawParams::ValueSmooth {
                k: ks[rng.random_range(0..ks.len())],
                alpha: rng.random_range(0.0..=1.0),
            }
        }
    }
}

pub fn draw(params: DrawParams) -> PerturbDraw {
    PerturbDraw {
        intensity: Intensity::Strong,
        params,
    }
}

/// Runs production and oracle on one case and reports the first bitwise
/// difference.
pub fn compare_case(f: &Tensor, d: &PerturbDraw, mask: Option<&[bool]>) -> Result<(), String> {
    let s = f.shape();
    let shape = [s[0], s[1], s[2], s[3]];
    let got = d.apply(f, mask).map_err(|e| format!("production: {e}"))?;
    let want = oracle::perturb(f.data(), shape, &twin(&d.params, shape[2], shape[3]), mask)
        .map_err(|e| format!("oracle: {e}"))?;
    for (i, (a, b)) in got.data().iter().zip(&want).enumerate() {
        if a.to_bits() != b.to_bits() {
            return Err(format!(
                "{:?} on {shape:?}: element {i} is {a:e}, oracle {b:e}",
                d.params
            ));
        }
    }
    Ok(())
}

/// Fixed, non-trivial parameters of each strategy for a C×6×6 feature map.
pub fn frozen_params(s: Strategy, c: usize) -> DrawParams {
    match s {
        Strategy::ChannelDrop => DrawParams::ChannelDrop {
            keep: (0..c).map(|i| i % 2 == 0).collect(),
        },
        Strategy::SpatialDrop => DrawParams::SpatialDrop { x: 1, y: 2, h: 3, w: 2 },
        Strategy::Translate => DrawParams::Translate {
            dir: Direction::Right,
            len: 2,
        },
        Strategy::Shear => DrawParams::Shear {
            dir: Direction::Down,
            len: 3,
            offsets: shear_offsets(3, 6),
        },
        Strategy::ValueSmooth => DrawParams::ValueSmooth { k: 3, alpha: 0.6 },
    }
}

/// Gradient check of a two-block residual net with `params` frozen at
/// `hook`, applied to the first and last of three samples. Returns the
/// worst relative error over all parameter tensors.
pub fn perturbed_net_grad_check(params: DrawParams, hook: HookPoint) -> ifmatch_core::Result<f64> {
    let spec = ModelSpec {
        stage_widths: vec![4],
        blocks_per_stage: 2,
        input_shape: [2, 6, 6],
        num_classes: 3,
        ..ModelSpec::default()
    };
    let m = Model::build(&spec, 7)?;
    let x = Tensor::from_fn(&[3, 2, 6, 6], |i| ((i * 37 % 29) as f64 / 14.0) - 1.0);
    let target = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    let d = draw(params);
    let mask = [true, false, true];
    let rep = grad_check(
        m.params(),
        |tape, vars| {
            let xv = tape.leaf(x.clone(), false);
            let l = m.forward(tape, vars, xv, Some((hook, &d)), Some(&mask))?;
            let p = tape.softmax(l)?;
            tape.cross_entropy(&target, p, &[0.3, 0.3, 0.4])
        },
        1e-5,
        1e-5,
    )?;
    Ok(rep.max_rel_error())
}

/// The hooks exercised by [`perturbed_net_grad_check`].
pub fn two_block_hooks() -> [HookPoint; 4] {
    [HookPoint::a(0), HookPoint::a(1), HookPoint::b(0, 1), HookPoint::b(1, 2)]
}

// Reference values of N_c = int(N_1 · γ^{-(c-1)/(C-1)}) for C = 10.
pub const TABLES: &[(usize, f64, [usize; 10])] = &[
    (1500, 50.0, [1500, 971, 628, 407, 263, 170, 110, 71, 46, 30]),
    (3000, 50.0, [3000, 1942, 1257, 814, 527, 341, 221, 143, 92, 60]),
    (1500, 100.0, [1500, 899, 539, 323, 193, 116, 69, 41, 25, 15]),
    (3000, 100.0, [3000, 1798, 1078, 646, 387, 232, 139, 83, 50, 30]),
    (1500, 150.0, [1500, 859, 492, 282, 161, 92, 53, 30, 17, 10]),
    (3000, 150.0, [3000, 1719, 985, 564, 323, 185, 106, 60, 34, 20]),
    (150, 20.0, [150, 107, 77, 55, 39, 28, 20, 14, 10, 7]),
    (300, 20.0, [300, 215, 154, 110, 79, 56, 40, 29, 20, 15]),
    (150, 50.0, [150, 97, 62, 40, 26, 17, 11, 7, 4, 3]),
    (300, 50.0, [300, 194, 125, 81, 52, 34, 22, 14, 9, 6]),
    (150, 100.0, [150, 89, 53, 32, 19, 11, 6, 4, 2, 1]),
    (300, 100.0, [300, 179, 107, 64, 38, 23, 13, 8, 5, 3]),
];
