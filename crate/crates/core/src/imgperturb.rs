//! Image-level weak (crop + flip) and strong (reduced RandAugment + cutout)
//! augmentation. Every random choice is drawn into a replayable struct first.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageOp {
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    Posterize,
    Solarize,
}

impl ImageOp {
    pub const ALL: [ImageOp; 8] = [
        ImageOp::TranslateX,
        ImageOp::TranslateY,
        ImageOp::ShearX,
        ImageOp::ShearY,
        ImageOp::Brightness,
        ImageOp::Contrast,
        ImageOp::Posterize,
        ImageOp::Solarize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImageOp::TranslateX => "translate_x",
            ImageOp::TranslateY => "translate_y",
            ImageOp::ShearX => "shear_x",
            ImageOp::ShearY => "shear_y",
            ImageOp::Brightness => "brightness",
            ImageOp::Contrast => "contrast",
            ImageOp::Posterize => "posterize",
            ImageOp::Solarize => "solarize",
        }
    }
}

impl fmt::Display for ImageOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageOp {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ImageOp::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown image op '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    /// Reflect padding before the random crop.
    pub pad: usize,
    pub flip_p: f64,
    pub n_ops: usize,
    /// Magnitudes are drawn uniformly from this sub-range of [0, 1].
    pub magnitude: (f64, f64),
    pub pool: Vec<ImageOp>,
    /// Cutout side as a fraction of the image side is drawn from [0, max].
    pub cutout_max: f64,
    /// Per-channel fill for cutout and geometric vacancies.
    pub fill: Vec<f64>,
    /// Legal pixel range.
    pub range: (f64, f64),
}

impl AugPolicy {
    /// Defaults for an image of side `size`: pad 4 at 32×32, scaled.
    pub fn for_size(size: usize, channels: usize) -> Self {
        AugPolicy {
            pad: (size / 8).max(1),
            flip_p: 0.5,
            n_ops: 2,
            magnitude: (0.0, 1.0),
            pool: ImageOp::ALL.to_vec(),
            cutout_max: 0.5,
            fill: vec![0.5; channels],
            range: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.magnitude;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("augment", "magnitude range must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_p) || !(0.0..=1.0).contains(&self.cutout_max) {
            return Err(Error::invalid(
                "augment",
                "probabilities and fractions must lie in [0, 1]",
            ));
        }
        if self.n_ops > 0 && self.pool.is_empty() {
            return Err(Error::invalid("augment", "strong op pool is empty"));
        }
        if self.range.0 > self.range.1 {
            return Err(Error::invalid("augment", "pixel range is inverted"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakDraw {
    pub flip: bool,
    /// Crop origin inside the padded image.
    pub dy: usize,
    pub dx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpDraw {
    pub op: ImageOp,
    pub magnitude: f64,
    /// Direction of signed ops.
    pub negate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongDraw {
    pub ops: Vec<OpDraw>,
    /// Cutout rectangle: row, column, height, width.
    pub cutout: (usize, usize, usize, usize),
}

fn dims(img: &Tensor) -> Result<[usize; 3]> {
    match img.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::invalid("augment", format!("image must be C×H×W, got {s:?}"))),
    }
}

pub fn sample_weak<R: Rng + ?Sized>(policy: &AugPolicy, rng: &mut R) -> WeakDraw {
    WeakDraw {
        flip: rng.random::<f64>() < policy.flip_p,
        dy: rng.random_range(0..=2 * policy.pad),
        dx: rng.random_range(0..=2 * policy.pad),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    // Mirror without repeating the edge pixel, as numpy's "reflect".
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Reflect-pads by `pad`, crops back to H×W at (dy, dx), then flips.
pub fn apply_weak(img: &Tensor, draw: &WeakDraw, pad: usize) -> Result<Tensor> {
    let [c, h, w] = dims(img)?;
    if pad >= h || pad >= w {
        return Err(Error::invalid(
            "weak_aug",
            format!("pad {pad} too large for {h}×{w} image"),
        ));
    }
    if draw.dy > 2 * pad || draw.dx > 2 * pad {
        return Err(Error::invalid("weak_aug", "crop origin outside the padded image"));
    }
    let x = img.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = reflect(i as isize + draw.dy as isize - pad as isize, h);
            for j in 0..w {
                let jj = if draw.flip { w - 1 - j } else { j };
                let sj = reflect(jj as isize + draw.dx as isize - pad as isize, w);
                out[(ch * h + i) * w + j] = x[(ch * h + si) * w + sj];
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, h, w], out))
}

pub fn weak_aug<R: Rng + ?Sized>(img: &Tensor, policy: &AugPolicy, rng: &mut R) -> Result<Tensor> {
    let d = sample_weak(policy, rng);
    apply_weak(img, &d, policy.pad)
}

pub fn sample_strong<R: Rng + ?Sized>(policy: &AugPolicy, h: usize, w: usize, rng: &mut R) -> StrongDraw {
    let (lo, hi) = policy.magnitude;
    let ops = (0..policy.n_ops)
        .map(|_| OpDraw {
            op: policy.pool[rng.random_range(0..policy.pool.len())],
            magnitude: lo + (hi - lo) * rng.random::<f64>(),
            negate: rng.random::<bool>(),
        })
        .collect();
    let frac = policy.cutout_max * rng.random::<f64>();
    let ch = ((frac * h as f64) as usize).min(h);
    let cw = ((frac * w as f64) as usize).min(w);
    StrongDraw {
        ops,
        cutout: (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw),
    }
}

/// Nearest-neighbour resampling: `src(i, j)` gives the source cell for each
/// destination, or `None` for a vacancy.
fn resample(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    fill: &[f64],
    src: impl Fn(usize, usize) -> Option<(usize, usize)>,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = match src(i, j) {
                    Some((si, sj)) => x[(ch * h + si) * w + sj],
                    None => fill[ch],
                };
            }
        }
    }
    out
}

fn in_range(v: isize, n: usize) -> Option<usize> {
    (v >= 0 && (v as usize) < n).then_some(v as usize)
}

fn apply_op(x: Vec<f64>, d: &OpDraw, c: usize, h: usize, w: usize, policy: &AugPolicy) -> Vec<f64> {
    let sign = if d.negate { -1.0 } else { 1.0 };
    let m = d.magnitude;
    let (lo, hi) = policy.range;
    match d.op {
        ImageOp::TranslateX | ImageOp::TranslateY => {
            let along = if d.op == ImageOp::TranslateX { w } else { h };
            let t = (sign * (0.3 * m * along as f64).round()) as isize;
            resample(&x, c, h, w, &policy.fill, |i, j| {
                if d.op == ImageOp::TranslateX {
                    in_range(j as isize - t, w).map(|sj| (i, sj))
                } else {
                    in_range(i as isize - t, h).map(|si| (si, j))
                }
            })
        }
        ImageOp::ShearX | ImageOp::ShearY => {
            let s = sign * 0.3 * m;
            let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            resample(&x, c, h, w, &policy.fill, |i, j| {
                if d.op == ImageOp::ShearX {
                    let sj = (j as f64 + s * (i as f64 - ci)).round() as isize;
                    in_range(sj, w).map(|sj| (i, sj))
                } else {
                    let si = (i as f64 + s * (j as f64 - cj)).round() as isize;
                    in_range(si, h).map(|si| (si, j))
                }
            })
        }
        ImageOp::Brightness => {
            let f = 1.0 + sign * 0.9 * m;
            x.into_iter().map(|v| v * f).collect()
        }
        ImageOp::Contrast => {
            let f = 1.0 + sign * 0.9 * m;
            let mut out = x;
            for plane in out.chunks_mut(h * w) {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                for v in plane.iter_mut() {
                    *v = mean + (*v - mean) * f;
                }
            }
            out
        }
        ImageOp::Posterize => {
            let bits = 8 - (4.0 * m).round() as u32;
            if bits >= 8 {
                return x;
            }
            let levels = ((1u32 << bits) - 1) as f64;
            let span = hi - lo;
            x.into_iter()
                .map(|v| lo + ((v - lo) / span * levels).floor().min(levels) / levels * span)
                .collect()
        }
        ImageOp::Solarize => {
            let thr = hi - m * (hi - lo);
            x.into_iter().map(|v| if v > thr { hi - (v - lo) } else { v }).collect()
        }
    }
}

/// Applies the sampled ops in order, then cutout, then clamps to the legal
/// range.
pub fn apply_strong(img: &Tensor, draw: &StrongDraw, policy: &AugPolicy) -> Result<Tensor> {
    let [c, h, w] = dims(img)?;
    if policy.fill.len() != c {
        return Err(Error::shape(
            "strong_aug",
            "fill length (channels)",
            c,
            policy.fill.len(),
        ));
    }
    let (ry, rx, rh, rw) = draw.cutout;
    if ry + rh > h || rx + rw > w {
        return Err(Error::invalid("strong_aug", "cutout rectangle outside the image"));
    }
    let mut x = img.data().to_vec();
    for d in &draw.ops {
        x = apply_op(x, d, c, h, w, policy);
    }
    for ch in 0..c {
        for i in ry..ry + rh {
            for j in rx..rx + rw {
                x[(ch * h + i) * w + j] = policy.fill[ch];
            }
        }
    }
    let (lo, hi) = policy.range;
    for v in &mut x {
        *v = v.clamp(lo, hi);
    }
    Ok(Tensor::from_raw(vec![c, h, w], x))
}

pub fn strong_aug<R: Rng + ?Sized>(img: &Tensor, policy: &AugPolicy, rng: &mut R) -> Result<Tensor> {
    let [_, h, w] = dims(img)?;
    let d = sample_strong(policy, h, w, rng);
    apply_strong(img, &d, policy)
}

/// Per-channel mean over a set of C×H×W images.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for img in images {
        let [c, h, w] = dims(img)?;
        if acc.is_empty() {
            acc = vec![0.0; c];
        } else if acc.len() != c {
            return Err(Error::shape("channel_means", "channels", acc.len(), c));
        }
        for (ch, plane) in img.data().chunks(h * w).enumerate() {
            acc[ch] += plane.iter().sum::<f64>();
        }
        count += h * w;
    }
    if count == 0 {
        return Err(Error::invalid("channel_means", "no images"));
    }
    Ok(acc.into_iter().map(|s| s / count as f64).collect())
}
