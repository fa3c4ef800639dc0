//! Confidence-based identification of naive samples, plus the loss/OTSU
//! (SAA) baseline it is compared against.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    /// Last recorded branch-2 confidence in the pseudo-label class.
    pub h: f64,
    /// Mask from the most recent query.
    pub m: bool,
}

/// Per-sample target confidences keyed by unlabeled-sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfidenceLedger {
    entries: BTreeMap<u64, LedgerEntry>,
}

/// Perturbations applied to one sample in branch 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbationSet {
    pub image_strong: bool,
    pub feature_weak: bool,
}

/// `M = 1` adds the weak feature perturbation on top of the strong image view.
pub fn select_perturbations(m: bool) -> PerturbationSet {
    PerturbationSet {
        image_strong: true,
        feature_weak: m,
    }
}

impl ConfidenceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&LedgerEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &LedgerEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Stores `pred[class]` as the sample's target confidence.
    pub fn record(&mut self, id: u64, pred: &[f64], class: usize) -> Result<()> {
        let h = *pred.get(class).ok_or_else(|| {
            Error::invalid(
                "record",
                format!("class {class} out of range for {} classes", pred.len()),
            )
        })?;
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::invalid("record", format!("confidence {h} outside [0, 1]")));
        }
        let e = self.entries.entry(id).or_insert(LedgerEntry { h: 0.0, m: false });
        e.h = h;
        Ok(())
    }

    /// `1(h ≥ τ)`; ids never recorded are 0.
    pub fn mask(&mut self, id: u64, tau: f64) -> bool {
        match self.entries.get_mut(&id) {
            Some(e) => {
                e.m = e.h >= tau;
                e.m
            }
            None => false,
        }
    }

    /// Same rule as [`ConfidenceLedger::mask`] without storing the result.
    pub fn peek_mask(&self, id: u64, tau: f64) -> bool {
        self.entries.get(&id).is_some_and(|e| e.h >= tau)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,h,M\n");
        for (id, e) in &self.entries {
            let _ = writeln!(s, "{id},{},{}", e.h, u8::from(e.m));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of the batch whose teacher passed its gate and whose mask is 1.
pub fn naive_ratio(teacher_pass: &[bool], mask: &[bool]) -> Result<f64> {
    if teacher_pass.is_empty() {
        return Err(Error::invalid("naive_ratio", "empty batch"));
    }
    if teacher_pass.len() != mask.len() {
        return Err(Error::shape(
            "naive_ratio",
            "mask length",
            teacher_pass.len(),
            mask.len(),
        ));
    }
    let n = teacher_pass.iter().zip(mask).filter(|(p, m)| **p && **m).count();
    Ok(n as f64 / teacher_pass.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaaSplit {
    pub naive: Vec<bool>,
    /// Upper edge of the last naive bin; `None` when the histogram is
    /// degenerate.
    pub threshold: Option<f64>,
}

impl SaaSplit {
    pub fn naive_ratio(&self) -> f64 {
        if self.naive.is_empty() {
            return 0.0;
        }
        self.naive.iter().filter(|&&b| b).count() as f64 / self.naive.len() as f64
    }
}

fn bin_of(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * OTSU_BINS as f64).floor();
    b.clamp(0.0, (OTSU_BINS - 1) as f64) as usize
}

/// Is `a_num / a_den` strictly greater than `b_num / b_den`?
fn frac_gt(a_num: u128, a_den: u128, b_num: u128, b_den: u128) -> bool {
    match (a_num.checked_mul(b_den), b_num.checked_mul(a_den)) {
        (Some(l), Some(r)) => l > r,
        // Only reachable for hundreds of thousands of samples.
        _ => (a_num as f64 / a_den as f64) > (b_num as f64 / b_den as f64),
    }
}

/// OTSU split of a loss list into naive (low loss) and challenging samples.
pub fn saa_identify(losses: &[f64]) -> Result<SaaSplit> {
    if let Some(v) = losses.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid(
            "saa_identify",
            format!("loss {v} is not a nonnegative finite value"),
        ));
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if losses.is_empty() || lo == hi {
        return Ok(SaaSplit {
            naive: vec![false; losses.len()],
            threshold: None,
        });
    }
    let bins: Vec<usize> = losses.iter().map(|&v| bin_of(v, lo, hi)).collect();
    let mut hist = [0u128; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let total_n = losses.len() as u128;
    let total_s: u128 = bins.iter().map(|&b| b as u128).sum();
    let (mut n0, mut s0) = (0u128, 0u128);
    let mut best: Option<(u128, u128, usize)> = None;
    for (t, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += count;
        s0 += count * t as u128;
        let (n1, s1) = (total_n - n0, total_s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (n1 * s0).abs_diff(n0 * s1);
        let num = d * d;
        let den = n0 * n1;
        if best.is_none_or(|(bn, bd, _)| frac_gt(num, den, bn, bd)) {
            best = Some((num, den, t));
        }
    }
    let (_, _, t) = best.expect("two distinct values give a valid split");
    let width = (hi - lo) / OTSU_BINS as f64;
    Ok(SaaSplit {
        naive: bins.iter().map(|&b| b <= t).collect(),
        threshold: Some(lo + (t + 1) as f64 * width),
    })
}

/// Per-sample loss records for the SAA baseline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SaaLedger {
    losses: BTreeMap<u64, Option<f64>>,
}

impl SaaLedger {
    /// Registers every id with an uninitialized record.
    pub fn new(ids: impl IntoIterator<Item = u64>) -> Self {
        SaaLedger {
            losses: ids.into_iter().map(|id| (id, None)).collect(),
        }
    }

    pub fn record(&mut self, id: u64, loss: f64) {
        self.losses.insert(id, Some(loss));
    }

    /// OTSU identification over the recorded losses. While no record has
    /// been written every sample carries an evenly spaced placeholder loss,
    /// which splits the population in half.
    pub fn identify(&self) -> Result<(Vec<u64>, SaaSplit)> {
        let seen: Vec<(u64, f64)> = self.losses.iter().filter_map(|(id, l)| l.map(|l| (*id, l))).collect();
        if !seen.is_empty() {
            let (ids, vals): (Vec<u64>, Vec<f64>) = seen.into_iter().unzip();
            return Ok((ids, saa_identify(&vals)?));
        }
        let n = self.losses.len();
        let ids: Vec<u64> = self.losses.keys().copied().collect();
        let vals: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        Ok((ids, saa_identify(&vals)?))
    }
}

/// Confidence implied by a cross-entropy loss against a one-hot target.
pub fn loss_to_confidence(loss: f64) -> f64 {
    (-loss).exp()
}

/// Human-readable SAA summary including the loss→confidence mapping.
pub fn saa_report(split: &SaaSplit) -> String {
    let mut s = format!(
        "saa: {} samples, naive ratio {:.4}\n",
        split.naive.len(),
        split.naive_ratio()
    );
    match split.threshold {
        Some(t) => {
            let _ = writeln!(
                s,
                "saa: loss threshold {t:.4} -> confidence threshold {:.4}",
                loss_to_confidence(t)
            );
        }
        None => s.push_str("saa: degenerate loss histogram, every sample challenging\n"),
    }
    s
}
