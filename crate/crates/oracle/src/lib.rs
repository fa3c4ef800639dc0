//! Brute-force reference implementations.
//!
//! Every function here is the slowest obviously-correct way to compute its
//! result. Nothing in this crate depends on the production crates: inputs are
//! plain slices plus explicit extents, and the perturbation parameters have
//! their own types. Tests convert production values into these types and
//! compare.

use std::fmt;

/// Largest tensor the oracles accept, as N, C, H, W.
pub const MAX_SHAPE: [usize; 4] = [4, 8, 16, 16];
/// Largest channel count for exhaustive mask enumeration.
pub const MAX_ENUM_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    TooLarge {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    BadInput(String),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::TooLarge { what, got, limit } => {
                write!(f, "oracle size guard: {what} = {got} exceeds {limit}")
            }
            OracleError::BadInput(msg) => write!(f, "oracle input rejected: {msg}"),
        }
    }
}

impl std::error::Error for OracleError {}

pub type Result<T> = std::result::Result<T, OracleError>;

fn guard_shape(shape: [usize; 4]) -> Result<()> {
    const NAMES: [&str; 4] = ["N", "C", "H", "W"];
    for i in 0..4 {
        if shape[i] > MAX_SHAPE[i] {
            return Err(OracleError::TooLarge {
                what: NAMES[i],
                got: shape[i],
                limit: MAX_SHAPE[i],
            });
        }
    }
    Ok(())
}

fn at(shape: [usize; 4], n: usize, c: usize, i: usize, j: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + i) * shape[3] + j
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d(
    input: &[f64],
    in_shape: [usize; 4],
    kernel: &[f64],
    k_shape: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<(Vec<f64>, [usize; 4])> {
    guard_shape(in_shape)?;
    let [n, c, h, w] = in_shape;
    let [co, ci, kh, kw] = k_shape;
    if c != ci {
        return Err(OracleError::BadInput(format!("channels {c} vs kernel {ci}")));
    }
    if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(OracleError::BadInput("kernel larger than padded input".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (y * stride + u) as isize - pad as isize;
                                let ix = (x * stride + v) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[at(in_shape, b, ch, iy as usize, ix as usize)];
                                let kv = kernel[((o * ci + ch) * kh + u) * kw + v];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok((out, [n, co, oh, ow]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Up,
    Down,
    Left,
    Right,
}

/// Reference perturbation parameters, mirroring the production draw.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturb {
    ChannelDrop {
        keep: Vec<bool>,
    },
    /// Rectangle with top-left row `x`, column `y`, height `h`, width `w`.
    SpatialDrop {
        x: usize,
        y: usize,
        h: usize,
        w: usize,
    },
    Translate {
        dir: Dir,
        len: usize,
    },
    Shear {
        dir: Dir,
        offsets: Vec<usize>,
    },
    ValueSmooth {
        k: usize,
        alpha: f64,
    },
}

/// Per-line shear offsets: round-half-even of `linspace(0, len, lines)`.
pub fn shear_offsets(len: usize, lines: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for j in 0..lines {
        let v = if lines == 1 {
            0.0
        } else {
            len as f64 * j as f64 / (lines - 1) as f64
        };
        let fl = v.floor();
        let frac = v - fl;
        let r = if frac > 0.5 {
            fl + 1.0
        } else if frac < 0.5 {
            fl
        } else if (fl as u64) % 2 == 0 {
            fl
        } else {
            fl + 1.0
        };
        out.push(r as usize);
    }
    out
}

/// Applies `p` to every sample where `mask` is true (all samples when absent).
pub fn perturb(f: &[f64], shape: [usize; 4], p: &Perturb, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    guard_shape(shape)?;
    let [n, c, h, w] = shape;
    if f.len() != n * c * h * w {
        return Err(OracleError::BadInput("data length".into()));
    }
    let mut out = f.to_vec();
    for b in 0..n {
        if let Some(m) = mask {
            if !m[b] {
                continue;
            }
        }
        for ch in 0..c {
            let mut plane = vec![vec![0.0; w]; h];
            for i in 0..h {
                for j in 0..w {
                    plane[i][j] = f[at(shape, b, ch, i, j)];
                }
            }
            let res = perturb_plane(&plane, ch, p)?;
            for i in 0..h {
                for j in 0..w {
                    out[at(shape, b, ch, i, j)] = res[i][j];
                }
            }
        }
    }
    Ok(out)
}

fn perturb_plane(plane: &[Vec<f64>], ch: usize, p: &Perturb) -> Result<Vec<Vec<f64>>> {
    let h = plane.len();
    let w = plane[0].len();
    let mut out = vec![vec![0.0; w]; h];
    match p {
        Perturb::ChannelDrop { keep } => {
            for i in 0..h {
                for j in 0..w {
                    out[i][j] = if keep[ch] { plane[i][j] * 2.0 } else { 0.0 };
                }
            }
        }
        Perturb::SpatialDrop { x, y, h: rh, w: rw } => {
            let total = h * w;
            let scale = total as f64 / (total - rh * rw) as f64;
            for i in 0..h {
                for j in 0..w {
                    let inside = i >= *x && i < x + rh && j >= *y && j < y + rw;
                    out[i][j] = if inside { 0.0 } else { plane[i][j] * scale };
                }
            }
        }
        Perturb::Translate { dir, len } => {
            let offsets = match dir {
                Dir::Left | Dir::Right => vec![*len; h],
                Dir::Up | Dir::Down => vec![*len; w],
            };
            shift_lines(plane, &mut out, *dir, &offsets);
        }
        Perturb::Shear { dir, offsets } => {
            shift_lines(plane, &mut out, *dir, offsets);
        }
        Perturb::ValueSmooth { k, alpha } => {
            let r = (*k / 2) as isize;
            for i in 0..h {
                for j in 0..w {
                    // Blend written as x + α·mean(x_w − x).
                    let x = plane[i][j];
                    let mut diffs = Vec::new();
                    for di in -r..=r {
                        for dj in -r..=r {
                            let ii = i as isize + di;
                            let jj = j as isize + dj;
                            if ii >= 0 && jj >= 0 && ii < h as isize && jj < w as isize {
                                diffs.push(plane[ii as usize][jj as usize] - x);
                            }
                        }
                    }
                    let mut s = 0.0;
                    for v in &diffs {
                        s += v;
                    }
                    out[i][j] = x + alpha * (s / diffs.len() as f64);
                }
            }
        }
    }
    Ok(out)
}

/// Line `l` (a row for Left/Right, a column for Up/Down) moves by
/// `offsets[l]` cells; vacated cells take the mean of everything that left.
fn shift_lines(plane: &[Vec<f64>], out: &mut [Vec<f64>], dir: Dir, offsets: &[usize]) {
    let h = plane.len() as isize;
    let w = plane[0].len() as isize;
    let dest = |i: isize, j: isize| -> (isize, isize) {
        match dir {
            Dir::Right => (i, j + offsets[i as usize] as isize),
            Dir::Left => (i, j - offsets[i as usize] as isize),
            Dir::Down => (i + offsets[j as usize] as isize, j),
            Dir::Up => (i - offsets[j as usize] as isize, j),
        }
    };
    // Mean of the values pushed outside, summed in row-major input order.
    let mut s = 0.0;
    let mut cnt = 0usize;
    for i in 0..h {
        for j in 0..w {
            let (di, dj) = dest(i, j);
            if di < 0 || dj < 0 || di >= h || dj >= w {
                s += plane[i as usize][j as usize];
                cnt += 1;
            }
        }
    }
    let mut filled = vec![vec![false; w as usize]; h as usize];
    for i in 0..h {
        for j in 0..w {
            let (di, dj) = dest(i, j);
            if di >= 0 && dj >= 0 && di < h && dj < w {
                out[di as usize][dj as usize] = plane[i as usize][j as usize];
                filled[di as usize][dj as usize] = true;
            }
        }
    }
    for i in 0..h as usize {
        for j in 0..w as usize {
            if !filled[i][j] {
                out[i][j] = s / cnt as f64;
            }
        }
    }
}

/// Mean of channel dropout over all 2^C keep-masks.
pub fn channel_dropout_mask_mean(f: &[f64], shape: [usize; 4]) -> Result<Vec<f64>> {
    let c = shape[1];
    if c > MAX_ENUM_CHANNELS {
        return Err(OracleError::TooLarge {
            what: "C",
            got: c,
            limit: MAX_ENUM_CHANNELS,
        });
    }
    let masks = 1usize << c;
    let mut acc = vec![0.0; f.len()];
    for m in 0..masks {
        let keep: Vec<bool> = (0..c).map(|ch| m >> ch & 1 == 1).collect();
        let out = perturb(f, shape, &Perturb::ChannelDrop { keep }, None)?;
        for (a, o) in acc.iter_mut().zip(out) {
            *a += o;
        }
    }
    Ok(acc.into_iter().map(|a| a / masks as f64).collect())
}

/// Histogram bin of `v` for a 256-bin histogram spanning `[lo, hi]`.
pub fn otsu_bin(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * 256.0).floor();
    if b < 0.0 {
        0
    } else if b > 255.0 {
        255
    } else {
        b as usize
    }
}

/// Exhaustive Otsu split: returns the last bin index of the lower class, or
/// `None` when every value is identical.
///
/// Between-class variance is evaluated exactly in integers, scaled by the
/// constant `n^2`, as `(n1*S0 - n0*S1)^2 / (n0*n1)` with S the bin-index sums.
pub fn otsu_split(values: &[f64]) -> Option<usize> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || lo == hi {
        return None;
    }
    let bins: Vec<u128> = values.iter().map(|&v| otsu_bin(v, lo, hi) as u128).collect();
    let mut best: Option<(u128, u128, usize)> = None;
    for t in 0..255u128 {
        let (mut n0, mut n1, mut s0, mut s1) = (0u128, 0u128, 0u128, 0u128);
        for &b in &bins {
            if b <= t {
                n0 += 1;
                s0 += b;
            } else {
                n1 += 1;
                s1 += b;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = n1 * s0;
        let bb = n0 * s1;
        let d = if a > bb { a - bb } else { bb - a };
        let num = d * d;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((bn, bd, _)) => num * bd > bn * den,
        };
        if better {
            best = Some((num, den, t as usize));
        }
    }
    best.map(|(_, _, t)| t)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        g.push((up - down) / (2.0 * step));
    }
    g
}

/// Windowed mean over the in-bounds part of a `k`×`k` window centred at (i, j).
pub fn windowed_mean(plane: &[Vec<f64>], i: usize, j: usize, k: usize) -> f64 {
    let r = (k / 2) as isize;
    let mut vals = Vec::new();
    for ii in (i as isize - r)..=(i as isize + r) {
        for jj in (j as isize - r)..=(j as isize + r) {
            if ii >= 0 && jj >= 0 && (ii as usize) < plane.len() && (jj as usize) < plane[0].len() {
                vals.push(plane[ii as usize][jj as usize]);
            }
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Softmax of one row by direct exponentiation.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `-sum t ln p` by direct summation.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    let mut s = 0.0;
    for (t, p) in target.iter().zip(pred) {
        if *t != 0.0 {
            s -= t * p.max(1e-12).ln();
        }
    }
    s
}
