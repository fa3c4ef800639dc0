//! Synthetic data generation, IDX/CSV ingestion and labeled/unlabeled splits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Seeds};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// C×H×W.
    pub image: Tensor,
    pub class: usize,
}

/// A pool of training candidates plus a disjoint test pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
}

impl Source {
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self
            .train
            .first()
            .or(self.test.first())
            .map(|s| s.image.shape().to_vec())
            .unwrap_or_default();
        match s.as_slice() {
            &[c, h, w] => [c, h, w],
            _ => [0, 0, 0],
        }
    }
}

/// Labeled, unlabeled and test partitions. Unlabeled samples keep their
/// true class for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
}

impl DatasetSplit {
    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.labeled {
            c[s.class] += 1;
        }
        c
    }

    /// Empirical class prior of the labeled set.
    pub fn labeled_prior(&self) -> Vec<f64> {
        let counts = self.labeled_counts();
        let n = self.labeled.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// CSV with one row per sample: `id,role,class` (class blank for
    /// unlabeled rows).
    pub fn manifest_csv(&self) -> String {
        let mut s = String::from("id,role,class\n");
        for x in &self.labeled {
            let _ = writeln!(s, "{},labeled,{}", x.id, x.class);
        }
        for x in &self.unlabeled {
            let _ = writeln!(s, "{},unlabeled,", x.id);
        }
        for x in &self.test {
            let _ = writeln!(s, "{},test,{}", x.id, x.class);
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// 0 gives clean, linearly separable classes; larger values add pixel
    /// noise and orientation jitter.
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            per_class: 100,
            test_per_class: 50,
            channels: 3,
            size: 8,
            difficulty: 1.0,
            seed: 0,
        }
    }
}

struct ClassSignature {
    theta: f64,
    phase: f64,
    tint: Vec<f64>,
}

/// Class-conditional oriented textures: a fixed-phase grating per class
/// plus a random-phase harmonic, per-channel tint and Gaussian noise.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Source> {
    if cfg.classes < 2 {
        return Err(Error::invalid("gen_synthetic", "need at least two classes"));
    }
    if cfg.size < 2 || cfg.channels == 0 || cfg.per_class + cfg.test_per_class == 0 {
        return Err(Error::invalid("gen_synthetic", "degenerate image size or sample count"));
    }
    if !(cfg.difficulty >= 0.0 && cfg.difficulty.is_finite()) {
        return Err(Error::invalid(
            "gen_synthetic",
            "difficulty must be a nonnegative number",
        ));
    }
    let seeds = Seeds::new(cfg.seed);
    let mut sig_rng = seeds.stream(rng::DATA, &[0]);
    let sigs: Vec<ClassSignature> = (0..cfg.classes)
        .map(|k| ClassSignature {
            // Orientations stay inside [0, π/2] so horizontal flips, which map
            // θ to π − θ, never turn one class into another.
            theta: PI / 2.0 * k as f64 / (cfg.classes - 1) as f64,
            phase: sig_rng.random::<f64>() * 2.0 * PI,
            tint: (0..cfg.channels).map(|_| 0.6 + 0.8 * sig_rng.random::<f64>()).collect(),
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, n) = (cfg.channels, cfg.size);
    let freq = 1.5 / n as f64;
    let jitter = cfg.difficulty * PI / (4.0 * (cfg.classes - 1) as f64);
    let noise_sd = 0.12 * cfg.difficulty;
    let render = |class: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Tensor {
        let s = &sigs[class];
        let theta = s.theta + jitter * (2.0 * rng.random::<f64>() - 1.0);
        let tex_phase = rng.random::<f64>() * 2.0 * PI;
        let (ct, st) = (theta.cos(), theta.sin());
        let mut data = Vec::with_capacity(c * n * n);
        for ch in 0..c {
            for i in 0..n {
                for j in 0..n {
                    let u = i as f64 * ct + j as f64 * st;
                    let base = (2.0 * PI * freq * u + s.phase).cos();
                    let tex = (4.0 * PI * freq * u + tex_phase).cos();
                    let v = 0.5 + 0.2 * s.tint[ch] * (base + 0.5 * tex) + noise_sd * noise.sample(rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Tensor::from_raw(vec![c, n, n], data)
    };
    let mut next_id = 0u64;
    let mut make = |count: usize, part: u64| -> Vec<Sample> {
        let mut out = Vec::with_capacity(count * cfg.classes);
        for k in 0..cfg.classes {
            let mut r = seeds.stream(rng::DATA, &[1 + part, k as u64]);
            for _ in 0..count {
                out.push(Sample {
                    id: next_id,
                    image: render(k, &mut r),
                    class: k,
                });
                next_id += 1;
            }
        }
        out
    };
    let train = make(cfg.per_class, 0);
    let test = make(cfg.test_per_class, 1);
    Ok(Source {
        train,
        test,
        num_classes: cfg.classes,
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Data(format!("{what}: truncated header")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (u8 pixels, N×H×W) into 1×H×W tensors in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES {
        return Err(Error::Data(format!(
            "idx images: bad magic, expected 0x{IDX_IMAGES:08x}, found 0x{magic:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let h = be_u32(bytes, 8, "idx images")? as usize;
    let w = be_u32(bytes, 12, "idx images")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::Data("idx images: zero image extent".into()));
    }
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Data(format!(
            "idx images: expected {} pixel bytes, found {}",
            n * h * w,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(h * w)
        .map(|px| Tensor::from_raw(vec![1, h, w], px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS {
        return Err(Error::Data(format!(
            "idx labels: bad magic, expected 0x{IDX_LABELS:08x}, found 0x{magic:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Data(format!(
            "idx labels: expected {n} label bytes, found {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let imgs = parse_idx_images(&read(images)?)?;
    let labs = parse_idx_labels(&read(labels)?)?;
    if imgs.len() != labs.len() {
        return Err(Error::Data(format!(
            "idx: {} images but {} labels",
            imgs.len(),
            labs.len()
        )));
    }
    Ok((imgs, labs))
}

/// Reads `id,class,p0,p1,…` rows with row-major pixels of shape C×H×W.
pub fn load_csv(path: &Path, shape: [usize; 3]) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let want = shape.iter().product::<usize>();
    if headers.get(0) != Some("id") || headers.get(1) != Some("class") || headers.len() != want + 2 {
        return Err(Error::Data(format!(
            "{}: header must be id,class,p0..p{} for shape {shape:?}",
            path.display(),
            want.saturating_sub(1)
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 2));
        let id = rec[0].trim().parse::<u64>().map_err(|_| bad("id"))?;
        let class = rec[1].trim().parse::<usize>().map_err(|_| bad("class"))?;
        let px = rec
            .iter()
            .skip(2)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad("pixel"))?;
        let image = Tensor::new(&shape, px).map_err(|_| bad("pixel"))?;
        out.push(Sample { id, image, class });
    }
    Ok(out)
}

/// Wraps already-loaded samples as a source; ids must be unique.
pub fn source_from_samples(train: Vec<Sample>, test: Vec<Sample>, num_classes: usize) -> Result<Source> {
    let mut ids: Vec<u64> = train.iter().chain(&test).map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Data("duplicate sample ids".into()));
    }
    if let Some(s) = train.iter().chain(&test).find(|s| s.class >= num_classes) {
        return Err(Error::Data(format!(
            "sample {} has class {} ≥ {num_classes}",
            s.id, s.class
        )));
    }
    Ok(Source {
        train,
        test,
        num_classes,
    })
}

/// Shuffled indices of each class inside `source.train`.
fn class_pools(source: &Source, seed: u64) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); source.num_classes];
    for (i, s) in source.train.iter().enumerate() {
        pools[s.class].push(i);
    }
    let seeds = Seeds::new(seed);
    for (k, p) in pools.iter_mut().enumerate() {
        p.shuffle(&mut seeds.stream(rng::SPLIT, &[k as u64]));
    }
    pools
}

fn assemble(source: &Source, labeled: Vec<usize>, unlabeled: Vec<usize>) -> DatasetSplit {
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| source.train[i].clone()).collect();
    DatasetSplit {
        labeled: pick(labeled),
        unlabeled: pick(unlabeled),
        test: source.test.clone(),
        num_classes: source.num_classes,
    }
}

/// `num_labels / C` labeled samples per class. The rest of the pool is
/// unlabeled, or the whole pool when `exclude_labeled` is false.
pub fn split_balanced(source: &Source, num_labels: usize, seed: u64, exclude_labeled: bool) -> Result<DatasetSplit> {
    let c = source.num_classes;
    if !num_labels.is_multiple_of(c) {
        return Err(Error::Data(format!(
            "{num_labels} labels do not divide evenly into {c} classes"
        )));
    }
    let per = num_labels / c;
    let pools = class_pools(source, seed);
    let (mut lab, mut unl) = (Vec::new(), Vec::new());
    for (k, p) in pools.iter().enumerate() {
        if p.len() < per {
            return Err(Error::Data(format!(
                "class {k} has {} samples, {per} labels requested",
                p.len()
            )));
        }
        lab.extend_from_slice(&p[..per]);
        unl.extend_from_slice(if exclude_labeled { &p[per..] } else { p });
    }
    lab.sort_unstable();
    unl.sort_unstable();
    Ok(assemble(source, lab, unl))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailConfig {
    pub n1: usize,
    pub m1: usize,
    pub gamma: f64,
    pub classes: usize,
}

/// `int(head · γ^{−(c−1)/(C−1)})` for c = 1..C, computed as a division so
/// the head and tail counts are exact.
pub fn longtail_counts(head: usize, gamma: f64, classes: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::invalid("longtail_counts", "need at least two classes"));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(
            "longtail_counts",
            format!("imbalance ratio {gamma} must be ≥ 1"),
        ));
    }
    let counts: Vec<usize> = (0..classes)
        .map(|k| {
            let e = k as f64 / (classes - 1) as f64;
            (head as f64 / gamma.powf(e)) as usize
        })
        .collect();
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(
            "longtail_counts",
            format!("class {} would receive no samples (head {head}, γ {gamma})", k + 1),
        ));
    }
    Ok(counts)
}

pub fn split_longtail(source: &Source, cfg: &LongTailConfig, seed: u64) -> Result<DatasetSplit> {
    if cfg.classes != source.num_classes {
        return Err(Error::Data(format!(
            "long-tail config has {} classes, source has {}",
            cfg.classes, source.num_classes
        )));
    }
    let n = longtail_counts(cfg.n1, cfg.gamma, cfg.classes)?;
    let m = longtail_counts(cfg.m1, cfg.gamma, cfg.classes)?;
    let pools = class_pools(source, seed);
    let (mut lab, mut unl) = (Vec::new(), Vec::new());
    for (k, p) in pools.iter().enumerate() {
        if p.len() < n[k] + m[k] {
            return Err(Error::Data(format!(
                "class {k} has {} samples, needs {} labeled + {} unlabeled",
                p.len(),
                n[k],
                m[k]
            )));
        }
        lab.extend_from_slice(&p[..n[k]]);
        unl.extend_from_slice(&p[n[k]..n[k] + m[k]]);
    }
    lab.sort_unstable();
    unl.sort_unstable();
    Ok(assemble(source, lab, unl))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, px: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES.to_be_bytes().to_vec();
        for v in [n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_fixture() {
        let b = idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        let imgs = parse_idx_images(&b).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(imgs[1].shape(), &[1, 2, 2]);
        let mut wrong = b.clone();
        wrong[3] = 0x01;
        let err = parse_idx_images(&wrong).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        assert!(parse_idx_images(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let cfg = SyntheticConfig::default();
        let a = gen_synthetic(&cfg).unwrap();
        assert_eq!(a, gen_synthetic(&cfg).unwrap());
        for k in 0..cfg.classes {
            assert_eq!(a.train.iter().filter(|s| s.class == k).count(), cfg.per_class);
        }
        assert!(gen_synthetic(&SyntheticConfig { classes: 1, ..cfg }).is_err());
    }

    #[test]
    fn balanced_split() {
        let src = gen_synthetic(&SyntheticConfig {
            classes: 10,
            per_class: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let s = split_balanced(&src, 40, 1, true).unwrap();
        assert_eq!(s.labeled_counts(), vec![4; 10]);
        assert_eq!(s.unlabeled.len(), 20);
        let all = split_balanced(&src, 60, 1, true).unwrap();
        assert!(all.unlabeled.is_empty());
        assert!(split_balanced(&src, 41, 1, true).is_err());
        let incl = split_balanced(&src, 40, 1, false).unwrap();
        assert_eq!(incl.unlabeled.len(), 60);
    }

    #[test]
    fn longtail_endpoints() {
        assert_eq!(longtail_counts(1500, 100.0, 10).unwrap()[9], 15);
        assert_eq!(longtail_counts(1500, 150.0, 10).unwrap()[9], 10);
        assert_eq!(longtail_counts(7, 1.0, 5).unwrap(), vec![7; 5]);
        assert!(longtail_counts(10, 100.0, 10).is_err());
    }
}
