//! Pseudo-label threshold mechanisms, distribution alignment, the cosine
//! learning-rate schedule and EMA weight averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.95;
/// Decay of the running statistics kept by Free, Soft and DA.
pub const STAT_EMA: f64 = 0.999;
pub const DA_EPS: f64 = 1e-8;
pub const SOFT_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdKind {
    Constant,
    Flex,
    Free,
    Soft,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 4] = [
        ThresholdKind::Constant,
        ThresholdKind::Flex,
        ThresholdKind::Free,
        ThresholdKind::Soft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdKind::Constant => "constant",
            ThresholdKind::Flex => "flex",
            ThresholdKind::Free => "free",
            ThresholdKind::Soft => "soft",
        }
    }
}

impl fmt::Display for ThresholdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ThresholdKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown threshold kind '{s}' (expected constant, flex, free or soft)"))
    }
}

/// Evolving state of one threshold mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    kind: ThresholdKind,
    tau: f64,
    num_classes: usize,
    clamp: Option<(f64, f64)>,
    /// Flex: latest above-threshold class of each sample id.
    learned: BTreeMap<u64, usize>,
    /// Flex: per-class counts derived from `learned`.
    sigma: Vec<f64>,
    /// Free/Soft: EMA of batch-mean max confidence.
    mu: f64,
    /// Soft: EMA of the batch variance of max confidence.
    var: f64,
    /// Free: EMA of batch-mean class probabilities.
    p_tilde: Vec<f64>,
}

impl ThresholdState {
    pub fn new(kind: ThresholdKind, tau: f64, num_classes: usize, clamp: Option<(f64, f64)>) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::invalid("threshold", format!("tau {tau} outside (0, 1]")));
        }
        if num_classes < 2 {
            return Err(Error::invalid("threshold", "need at least two classes"));
        }
        if let Some((lo, hi)) = clamp {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::invalid(
                    "threshold",
                    format!("clamp [{lo}, {hi}] is not a sub-range of [0, 1]"),
                ));
            }
        }
        let uniform = 1.0 / num_classes as f64;
        Ok(ThresholdState {
            kind,
            tau,
            num_classes,
            clamp,
            learned: BTreeMap::new(),
            sigma: vec![0.0; num_classes],
            mu: uniform,
            var: uniform * uniform,
            p_tilde: vec![uniform; num_classes],
        })
    }

    pub fn kind(&self) -> ThresholdKind {
        self.kind
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn variance(&self) -> f64 {
        self.var
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Overrides the Flex pass counts directly.
    pub fn set_sigma(&mut self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.num_classes {
            return Err(Error::shape("threshold", "sigma length", self.num_classes, sigma.len()));
        }
        self.sigma = sigma.to_vec();
        Ok(())
    }

    /// Overrides the Free/Soft running statistics.
    pub fn set_stats(&mut self, mu: f64, var: f64) {
        self.mu = mu;
        self.var = var;
    }

    fn finish(&self, t: f64) -> f64 {
        let t = match self.clamp {
            Some((lo, hi)) => t.clamp(lo, hi),
            None => t,
        };
        t.clamp(0.0, 1.0)
    }

    /// τ_t for class `class`. Flex needs the class; Free falls back to the
    /// global μ_t without one; Soft always reports μ_t.
    pub fn threshold_value(&self, class: Option<usize>) -> Result<f64> {
        if let Some(c) = class {
            if c >= self.num_classes {
                return Err(Error::invalid("threshold", format!("class {c} out of range")));
            }
        }
        let t = match self.kind {
            ThresholdKind::Constant => self.tau,
            ThresholdKind::Flex => {
                let c = class.ok_or_else(|| Error::invalid("threshold", "flex threshold needs a class"))?;
                let max = self.sigma.iter().cloned().fold(0.0, f64::max);
                self.tau * (self.sigma[c] / max.max(1.0))
            }
            ThresholdKind::Free => match class {
                Some(c) => {
                    let max = self.p_tilde.iter().cloned().fold(0.0, f64::max);
                    self.mu * self.p_tilde[c] / max
                }
                None => self.mu,
            },
            ThresholdKind::Soft => self.mu,
        };
        Ok(self.finish(t))
    }

    /// Gaussian soft weight around μ_t.
    pub fn soft_weight(&self, conf: f64) -> f64 {
        if conf >= self.mu {
            return 1.0;
        }
        let var = self.var.max(SOFT_VAR_FLOOR);
        (-(conf - self.mu).powi(2) / (2.0 * var)).exp()
    }

    /// Per-sample weight of the unlabeled loss: a hard 0/1 gate for every
    /// kind except Soft.
    pub fn gate(&self, conf: f64, class: usize) -> Result<f64> {
        match self.kind {
            ThresholdKind::Soft => Ok(self.soft_weight(conf)),
            _ => Ok(if conf >= self.threshold_value(Some(class))? {
                1.0
            } else {
                0.0
            }),
        }
    }

    /// Folds one batch of (aligned) teacher probabilities into the state.
    pub fn update(&mut self, probs: &Tensor, ids: &[u64]) -> Result<()> {
        let [n, c, _, _] = probs.dims4("threshold update")?;
        if c != self.num_classes {
            return Err(Error::shape("threshold update", "classes", self.num_classes, c));
        }
        if ids.len() != n {
            return Err(Error::shape("threshold update", "ids", n, ids.len()));
        }
        let rows: Vec<&[f64]> = probs.data().chunks(c).collect();
        let conf: Vec<f64> = rows.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
        match self.kind {
            ThresholdKind::Constant => {}
            ThresholdKind::Flex => {
                for ((row, &cf), &id) in rows.iter().zip(&conf).zip(ids) {
                    if cf >= self.tau {
                        self.learned.insert(id, argmax(row));
                    }
                }
                self.sigma = vec![0.0; c];
                for &cls in self.learned.values() {
                    self.sigma[cls] += 1.0;
                }
            }
            ThresholdKind::Free => {
                let mean_conf = conf.iter().sum::<f64>() / n as f64;
                self.mu = STAT_EMA * self.mu + (1.0 - STAT_EMA) * mean_conf;
                for (k, p) in self.p_tilde.iter_mut().enumerate() {
                    let m = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
                    *p = STAT_EMA * *p + (1.0 - STAT_EMA) * m;
                }
            }
            ThresholdKind::Soft => {
                let mean_conf = conf.iter().sum::<f64>() / n as f64;
                let var = if n > 1 {
                    conf.iter().map(|v| (v - mean_conf).powi(2)).sum::<f64>() / (n - 1) as f64
                } else {
                    0.0
                };
                self.mu = STAT_EMA * self.mu + (1.0 - STAT_EMA) * mean_conf;
                self.var = STAT_EMA * self.var + (1.0 - STAT_EMA) * var;
            }
        }
        Ok(())
    }

    /// Flat numeric snapshot for checkpoints.
    pub fn snapshot(&self) -> Tensor {
        let mut v = vec![self.mu, self.var];
        v.extend_from_slice(&self.sigma);
        v.extend_from_slice(&self.p_tilde);
        Tensor::from_raw(vec![v.len()], v)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Distribution alignment state.
#[derive(Debug, Clone, PartialEq)]
pub struct DaState {
    p_bar: Vec<f64>,
    target: Vec<f64>,
}

impl DaState {
    pub fn uniform(num_classes: usize) -> Self {
        let u = vec![1.0 / num_classes as f64; num_classes];
        DaState {
            p_bar: u.clone(),
            target: u,
        }
    }

    pub fn with_target(target: &[f64]) -> Result<Self> {
        let s: f64 = target.iter().sum();
        if target.len() < 2 || target.iter().any(|&v| !(v >= 0.0)) || !(s > 0.0) {
            return Err(Error::invalid(
                "da",
                "target must be a nonnegative distribution over at least 2 classes",
            ));
        }
        let c = target.len();
        Ok(DaState {
            p_bar: vec![1.0 / c as f64; c],
            target: target.iter().map(|v| v / s).collect(),
        })
    }

    pub fn p_bar(&self) -> &[f64] {
        &self.p_bar
    }

    pub fn set_p_bar(&mut self, p_bar: &[f64]) -> Result<()> {
        if p_bar.len() != self.target.len() {
            return Err(Error::shape("da", "p_bar length", self.target.len(), p_bar.len()));
        }
        self.p_bar = p_bar.to_vec();
        Ok(())
    }

    /// `normalize(p · target / max(p̄, ε))` for one row; state untouched.
    pub fn align(&self, p: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = p
            .iter()
            .zip(&self.target)
            .zip(&self.p_bar)
            .map(|((p, t), b)| p * t / b.max(DA_EPS))
            .collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            raw.iter().map(|v| v / s).collect()
        } else {
            self.target.clone()
        }
    }

    /// Aligns every row of an N×C batch with the current p̄, then folds the
    /// batch mean of the unaligned rows into p̄.
    pub fn refine(&mut self, probs: &Tensor) -> Result<Tensor> {
        let [n, c, _, _] = probs.dims4("da")?;
        if c != self.target.len() {
            return Err(Error::shape("da", "classes", self.target.len(), c));
        }
        let mut out = Vec::with_capacity(probs.len());
        for row in probs.data().chunks(c) {
            out.extend(self.align(row));
        }
        for k in 0..c {
            let m = probs.data().chunks(c).map(|r| r[k]).sum::<f64>() / n as f64;
            self.p_bar[k] = STAT_EMA * self.p_bar[k] + (1.0 - STAT_EMA) * m;
        }
        Tensor::new(&[n, c], out)
    }
}

/// `η(k) = η0 · cos(7πk / 16K)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub eta0: f64,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, k: usize) -> Result<f64> {
        if k > self.total {
            return Err(Error::invalid(
                "lr_at",
                format!("step {k} beyond schedule length {}", self.total),
            ));
        }
        if self.total == 0 {
            return Ok(self.eta0);
        }
        let frac = (7.0 * std::f64::consts::PI * k as f64) / (16.0 * self.total as f64);
        Ok(self.eta0 * frac.cos())
    }
}

/// Shadow copy of model parameters updated by exponential averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaModel {
    pub decay: f64,
    shadow: Vec<Tensor>,
}

impl EmaModel {
    pub fn new(decay: f64, live: &[Tensor]) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid("ema", format!("decay {decay} outside [0, 1]")));
        }
        Ok(EmaModel {
            decay,
            shadow: live.to_vec(),
        })
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn set_shadow(&mut self, shadow: Vec<Tensor>) -> Result<()> {
        self.check(&shadow)?;
        self.shadow = shadow;
        Ok(())
    }

    fn check(&self, live: &[Tensor]) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(Error::shape(
                "ema_update",
                "parameter count",
                self.shadow.len(),
                live.len(),
            ));
        }
        for (s, l) in self.shadow.iter().zip(live) {
            if s.shape() != l.shape() {
                return Err(Error::invalid(
                    "ema_update",
                    format!("shape {:?} does not match shadow {:?}", l.shape(), s.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `shadow ← m·shadow + (1−m)·live`.
    pub fn update(&mut self, live: &[Tensor]) -> Result<()> {
        self.check(live)?;
        let m = self.decay;
        for (s, l) in self.shadow.iter_mut().zip(live) {
            for (a, b) in s.data_mut().iter_mut().zip(l.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}
