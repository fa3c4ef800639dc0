//! Feature-level perturbations applied to intermediate N×C×H×W maps.
//!
//! All randomness is drawn up front into a [`PerturbDraw`], so applying a
//! draw is a pure linear function of the feature map. That makes every
//! strategy replayable and lets gradients flow through it via an explicit
//! adjoint.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::LinearMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHANNEL_DROP_P: f64 = 0.5;
/// Spatial dropout removes an int(0.5·H) × int(0.5·W) rectangle.
pub const SPATIAL_DROP_FRACTION: f64 = 0.5;
pub const TRANSLATE_ALPHA_MAX: f64 = 0.5;
pub const SHEAR_ALPHA_MAX: f64 = 1.0;
pub const SMOOTH_ALPHA_MIN: f64 = 0.50;
pub const SMOOTH_ALPHA_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    ChannelDrop,
    SpatialDrop,
    Translate,
    Shear,
    ValueSmooth,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ChannelDrop,
        Strategy::SpatialDrop,
        Strategy::Translate,
        Strategy::Shear,
        Strategy::ValueSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ChannelDrop => "channel_drop",
            Strategy::SpatialDrop => "spatial_drop",
            Strategy::Translate => "translate",
            Strategy::Shear => "shear",
            Strategy::ValueSmooth => "value_smooth",
        }
    }

    fn eligible(self, h: usize, w: usize) -> bool {
        match self {
            Strategy::ValueSmooth => h.min(w) >= 3,
            _ => true,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown feature strategy '{s}'"))
    }
}

/// Weak perturbations sit inside a residual component (position B), strong
/// ones on the block output (position A).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intensity {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    fn horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    /// Extent along the movement axis.
    fn extent(self, h: usize, w: usize) -> usize {
        if self.horizontal() {
            w
        } else {
            h
        }
    }

    /// Number of independently shifted lines (rows for horizontal moves).
    fn lines(self, h: usize, w: usize) -> usize {
        if self.horizontal() {
            h
        } else {
            w
        }
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown direction '{s}' (expected up, down, left or right)"))
    }
}

/// Sampled randomness of one perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum DrawParams {
    ChannelDrop {
        keep: Vec<bool>,
    },
    /// Rectangle with top-left row `x`, column `y`, extent `h`×`w`.
    SpatialDrop {
        x: usize,
        y: usize,
        h: usize,
        w: usize,
    },
    Translate {
        dir: Direction,
        len: usize,
    },
    Shear {
        dir: Direction,
        len: usize,
        offsets: Vec<usize>,
    },
    ValueSmooth {
        k: usize,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbDraw {
    pub intensity: Intensity,
    pub params: DrawParams,
}

/// `round_half_even(linspace(0, len, lines))`.
pub fn shear_offsets(len: usize, lines: usize) -> Vec<usize> {
    (0..lines)
        .map(|j| {
            if lines == 1 {
                0
            } else {
                (len as f64 * j as f64 / (lines - 1) as f64).round_ties_even() as usize
            }
        })
        .collect()
}

/// Draws one perturbation for a feature map of extents C×H×W.
pub fn sample_draw<R: Rng + ?Sized>(
    pool: &[Strategy],
    feature: [usize; 3],
    intensity: Intensity,
    rng: &mut R,
) -> Result<PerturbDraw> {
    if pool.is_empty() {
        return Err(Error::invalid("sample_draw", "strategy pool is empty"));
    }
    let [c, h, w] = feature;
    let eligible: Vec<Strategy> = pool.iter().copied().filter(|s| s.eligible(h, w)).collect();
    if eligible.is_empty() {
        return Err(Error::invalid(
            "sample_draw",
            format!("feature map {h}×{w} too small for every strategy in {pool:?}"),
        ));
    }
    let strategy = eligible[rng.random_range(0..eligible.len())];
    draw_strategy(strategy, [c, h, w], intensity, rng)
}

/// Draws the randomness for a fixed strategy.
pub fn draw_strategy<R: Rng + ?Sized>(
    strategy: Strategy,
    feature: [usize; 3],
    intensity: Intensity,
    rng: &mut R,
) -> Result<PerturbDraw> {
    let [c, h, w] = feature;
    if !strategy.eligible(h, w) {
        return Err(Error::invalid(
            "sample_draw",
            format!("{strategy} needs an odd kernel in [3, {}]", h.min(w)),
        ));
    }
    let params = match strategy {
        Strategy::ChannelDrop => DrawParams::ChannelDrop {
            keep: (0..c).map(|_| rng.random::<f64>() >= CHANNEL_DROP_P).collect(),
        },
        Strategy::SpatialDrop => {
            let rh = (SPATIAL_DROP_FRACTION * h as f64) as usize;
            let rw = (SPATIAL_DROP_FRACTION * w as f64) as usize;
            DrawParams::SpatialDrop {
                x: rng.random_range(0..=h - rh),
                y: rng.random_range(0..=w - rw),
                h: rh,
                w: rw,
            }
        }
        Strategy::Translate => {
            let dir = Direction::ALL[rng.random_range(0..4)];
            let alpha = rng.random::<f64>() * TRANSLATE_ALPHA_MAX;
            DrawParams::Translate {
                dir,
                len: (alpha * dir.extent(h, w) as f64) as usize,
            }
        }
        Strategy::Shear => {
            let dir = Direction::ALL[rng.random_range(0..4)];
            let alpha = rng.random::<f64>() * SHEAR_ALPHA_MAX;
            let len = (alpha * dir.extent(h, w) as f64) as usize;
            DrawParams::Shear {
                dir,
                len,
                offsets: shear_offsets(len, dir.lines(h, w)),
            }
        }
        Strategy::ValueSmooth => {
            let ks: Vec<usize> = (3..=h.min(w)).filter(|k| k % 2 == 1).collect();
            let k = ks[rng.random_range(0..ks.len())];
            let alpha = SMOOTH_ALPHA_MIN + rng.random::<f64>() * (SMOOTH_ALPHA_MAX - SMOOTH_ALPHA_MIN);
            DrawParams::ValueSmooth { k, alpha }
        }
    };
    Ok(PerturbDraw { intensity, params })
}

/// Row-major plan for a line-shifting perturbation on one H×W plane.
struct ShiftPlan {
    /// Source index for each destination cell, `None` for vacated cells.
    src: Vec<Option<usize>>,
    /// Indices pushed outside the plane, in row-major input order.
    gone: Vec<usize>,
}

impl ShiftPlan {
    fn new(h: usize, w: usize, dir: Direction, offsets: &[usize]) -> Self {
        let mut src = vec![None; h * w];
        let mut gone = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = match dir {
                    Direction::Right => (i as isize, (j + offsets[i]) as isize),
                    Direction::Left => (i as isize, j as isize - offsets[i] as isize),
                    Direction::Down => ((i + offsets[j]) as isize, j as isize),
                    Direction::Up => (i as isize - offsets[j] as isize, j as isize),
                };
                if di < 0 || dj < 0 || di >= h as isize || dj >= w as isize {
                    gone.push(i * w + j);
                } else {
                    src[di as usize * w + dj as usize] = Some(i * w + j);
                }
            }
        }
        ShiftPlan { src, gone }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        let mut s = 0.0;
        for &q in &self.gone {
            s += x[q];
        }
        let pad = s / self.gone.len() as f64;
        for (o, src) in out.iter_mut().zip(&self.src) {
            *o = match src {
                Some(q) => x[*q],
                None => pad,
            };
        }
    }

    fn adjoint(&self, g: &[f64], out: &mut [f64]) {
        let mut vacated = 0.0;
        for (gv, src) in g.iter().zip(&self.src) {
            match src {
                Some(q) => out[*q] += gv,
                None => vacated += gv,
            }
        }
        if !self.gone.is_empty() {
            let share = vacated / self.gone.len() as f64;
            for &q in &self.gone {
                out[q] += share;
            }
        }
    }
}

enum Plan {
    /// One factor per channel.
    ChannelScale(Vec<f64>),
    /// One factor per spatial cell.
    CellScale(Vec<f64>),
    Shift(ShiftPlan),
    Smooth {
        k: usize,
        alpha: f64,
    },
}

impl PerturbDraw {
    pub fn strategy(&self) -> Strategy {
        match self.params {
            DrawParams::ChannelDrop { .. } => Strategy::ChannelDrop,
            DrawParams::SpatialDrop { .. } => Strategy::SpatialDrop,
            DrawParams::Translate { .. } => Strategy::Translate,
            DrawParams::Shear { .. } => Strategy::Shear,
            DrawParams::ValueSmooth { .. } => Strategy::ValueSmooth,
        }
    }

    /// True when the draw is an exact identity (no movement, nothing dropped
    /// away with unit rescale).
    pub fn is_identity(&self) -> bool {
        match &self.params {
            DrawParams::SpatialDrop { h, w, .. } => h * w == 0,
            DrawParams::Translate { len, .. } => *len == 0,
            DrawParams::Shear { offsets, .. } => offsets.iter().all(|&o| o == 0),
            DrawParams::ChannelDrop { .. } | DrawParams::ValueSmooth { .. } => false,
        }
    }

    /// Checks the draw against feature extents C×H×W.
    pub fn validate(&self, c: usize, h: usize, w: usize) -> Result<()> {
        match &self.params {
            DrawParams::ChannelDrop { keep } => {
                if keep.len() != c {
                    return Err(Error::shape("channel_dropout", "keep-mask length (C)", c, keep.len()));
                }
            }
            DrawParams::SpatialDrop { x, y, h: rh, w: rw } => {
                if x + rh > h || y + rw > w {
                    return Err(Error::invalid(
                        "spatial_dropout",
                        format!("rectangle ({x},{y},{rh},{rw}) outside {h}×{w}"),
                    ));
                }
            }
            DrawParams::Translate { dir, len } => {
                let ext = dir.extent(h, w);
                if *len > ext {
                    return Err(Error::invalid(
                        "translate",
                        format!("length {len} exceeds extent {ext}"),
                    ));
                }
            }
            DrawParams::Shear { dir, len, offsets } => {
                let ext = dir.extent(h, w);
                if *len > ext {
                    return Err(Error::invalid("shear", format!("length {len} exceeds extent {ext}")));
                }
                let lines = dir.lines(h, w);
                if offsets.len() != lines {
                    return Err(Error::shape("shear", "offset count (lines)", lines, offsets.len()));
                }
                if let Some(o) = offsets.iter().find(|&&o| o > *len) {
                    return Err(Error::invalid("shear", format!("offset {o} exceeds length {len}")));
                }
            }
            DrawParams::ValueSmooth { k, alpha } => {
                if k % 2 == 0 || *k < 3 || *k > h.min(w) {
                    return Err(Error::invalid(
                        "value_smooth",
                        format!("kernel {k} must be odd and within [3, {}]", h.min(w)),
                    ));
                }
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::invalid("value_smooth", format!("blend {alpha} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    fn plan(&self, h: usize, w: usize) -> Plan {
        match &self.params {
            DrawParams::ChannelDrop { keep } => {
                let scale = 1.0 / (1.0 - CHANNEL_DROP_P);
                Plan::ChannelScale(keep.iter().map(|&k| if k { scale } else { 0.0 }).collect())
            }
            DrawParams::SpatialDrop { x, y, h: rh, w: rw } => {
                let total = h * w;
                let scale = total as f64 / (total - rh * rw) as f64;
                let mut m = vec![scale; total];
                for i in *x..x + rh {
                    for j in *y..y + rw {
                        m[i * w + j] = 0.0;
                    }
                }
                Plan::CellScale(m)
            }
            DrawParams::Translate { dir, len } => {
                let offsets = vec![*len; dir.lines(h, w)];
                Plan::Shift(ShiftPlan::new(h, w, *dir, &offsets))
            }
            DrawParams::Shear { dir, offsets, .. } => Plan::Shift(ShiftPlan::new(h, w, *dir, offsets)),
            DrawParams::ValueSmooth { k, alpha } => Plan::Smooth { k: *k, alpha: *alpha },
        }
    }

    fn run(&self, f: &Tensor, mask: Option<&[bool]>, adjoint: bool) -> Result<Tensor> {
        let op = self.strategy().name();
        let [n, c, h, w] = match f.shape() {
            &[n, c, h, w] => [n, c, h, w],
            s => return Err(Error::invalid(op, format!("feature map must be N×C×H×W, got {s:?}"))),
        };
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape(op, "sample mask length (N)", n, m.len()));
            }
        }
        self.validate(c, h, w)?;
        let hw = h * w;
        let plan = self.plan(h, w);
        let x = f.data();
        let mut out = if adjoint { vec![0.0; x.len()] } else { x.to_vec() };
        for b in 0..n {
            let active = mask.is_none_or(|m| m[b]);
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                let src = &x[r.clone()];
                let dst = &mut out[r];
                if !active {
                    if adjoint {
                        dst.copy_from_slice(src);
                    }
                    continue;
                }
                match &plan {
                    Plan::ChannelScale(m) => {
                        let s = m[ch];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = if s == 0.0 { 0.0 } else { v * s };
                        }
                    }
                    Plan::CellScale(m) => {
                        for ((d, v), s) in dst.iter_mut().zip(src).zip(m) {
                            *d = if *s == 0.0 { 0.0 } else { v * s };
                        }
                    }
                    Plan::Shift(p) => {
                        if adjoint {
                            p.adjoint(src, dst);
                        } else {
                            p.forward(src, dst);
                        }
                    }
                    Plan::Smooth { k, alpha } => {
                        if adjoint {
                            smooth_adjoint(src, dst, h, w, *k, *alpha);
                        } else {
                            smooth_forward(src, dst, h, w, *k, *alpha);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_raw(f.shape().to_vec(), out))
    }

    /// Applies the perturbation to samples where `mask` is true (every
    /// sample when `mask` is `None`).
    pub fn apply(&self, f: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        self.run(f, mask, false)
    }

    /// Transpose of [`PerturbDraw::apply`] for the same mask.
    pub fn adjoint(&self, g: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        self.run(g, mask, true)
    }
}

fn window(i: usize, r: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(r)..=(i + r).min(n - 1)
}

fn smooth_forward(x: &[f64], out: &mut [f64], h: usize, w: usize, k: usize, alpha: f64) {
    let r = k / 2;
    for i in 0..h {
        for j in 0..w {
            // x + α·(mean − x), with the mean taken over differences from the
            // centre so a flat window contributes exactly zero.
            let c = x[i * w + j];
            let mut d = 0.0;
            let mut cnt = 0usize;
            for ii in window(i, r, h) {
                for jj in window(j, r, w) {
                    d += x[ii * w + jj] - c;
                    cnt += 1;
                }
            }
            out[i * w + j] = c + alpha * (d / cnt as f64);
        }
    }
}

fn smooth_adjoint(g: &[f64], out: &mut [f64], h: usize, w: usize, k: usize, alpha: f64) {
    let r = k / 2;
    for i in 0..h {
        for j in 0..w {
            let rows = window(i, r, h);
            let cols = window(j, r, w);
            let cnt = (rows.end() - rows.start() + 1) * (cols.end() - cols.start() + 1);
            let share = alpha * g[i * w + j] / cnt as f64;
            for ii in rows {
                for jj in cols.clone() {
                    out[ii * w + jj] += share;
                }
            }
            out[i * w + j] += (1.0 - alpha) * g[i * w + j];
        }
    }
}

/// A frozen draw plus optional per-sample mask, usable as a tape node.
#[derive(Debug, Clone)]
pub struct PerturbOp {
    pub draw: PerturbDraw,
    pub mask: Option<Vec<bool>>,
}

impl LinearMap for PerturbOp {
    fn name(&self) -> &'static str {
        self.draw.strategy().name()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.draw.apply(x, self.mask.as_deref())
    }

    fn adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        self.draw.adjoint(grad, self.mask.as_deref())
    }
}

fn single(intensity: Intensity, params: DrawParams) -> PerturbDraw {
    PerturbDraw { intensity, params }
}

pub fn channel_dropout(f: &Tensor, keep: &[bool]) -> Result<Tensor> {
    single(Intensity::Strong, DrawParams::ChannelDrop { keep: keep.to_vec() }).apply(f, None)
}

pub fn spatial_dropout(f: &Tensor, x: usize, y: usize, h: usize, w: usize) -> Result<Tensor> {
    single(Intensity::Strong, DrawParams::SpatialDrop { x, y, h, w }).apply(f, None)
}

pub fn translate(f: &Tensor, dir: Direction, len: usize) -> Result<Tensor> {
    single(Intensity::Strong, DrawParams::Translate { dir, len }).apply(f, None)
}

/// Shear with offsets interpolated from `len`.
pub fn shear(f: &Tensor, dir: Direction, len: usize) -> Result<Tensor> {
    let (h, w) = match f.shape() {
        &[_, _, h, w] => (h, w),
        s => {
            return Err(Error::invalid(
                "shear",
                format!("feature map must be N×C×H×W, got {s:?}"),
            ))
        }
    };
    let offsets = shear_offsets(len, dir.lines(h, w));
    single(Intensity::Strong, DrawParams::Shear { dir, len, offsets }).apply(f, None)
}

pub fn value_smooth(f: &Tensor, k: usize, alpha: f64) -> Result<Tensor> {
    single(Intensity::Strong, DrawParams::ValueSmooth { k, alpha }).apply(f, None)
}
