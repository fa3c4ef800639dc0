//! The triple-branch training loop, its FixMatch-style baselines, SGD and
//! evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cbi::{self, ConfidenceLedger, SaaLedger, SaaSplit};
use crate::datahub::{DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::featperturb::{draw_strategy, Intensity, PerturbDraw, Strategy};
use crate::imgperturb::{self, AugPolicy};
use crate::nets::{HookPoint, Model, ModelSpec};
use crate::rng::{self, Seeds};
use crate::schedulers::{DaState, EmaModel, LrSchedule, ThresholdKind, ThresholdState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    /// Single strong-image branch with the dynamic threshold.
    FixmatchBaseline,
    /// Weak image + strong feature branch, strong image (+ weak feature on
    /// naive samples) branch.
    Ifmatch,
    /// Strong image and strong feature perturbation stacked in one branch.
    ToyCombined,
    /// Weak image + strong feature branch next to a plain strong-image branch.
    SeparateBranches,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [
        Paradigm::FixmatchBaseline,
        Paradigm::Ifmatch,
        Paradigm::ToyCombined,
        Paradigm::SeparateBranches,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::FixmatchBaseline => "fixmatch_baseline",
            Paradigm::Ifmatch => "ifmatch",
            Paradigm::ToyCombined => "toy_combined",
            Paradigm::SeparateBranches => "separate_branches",
        }
    }

    fn has_branch1(self) -> bool {
        matches!(self, Paradigm::Ifmatch | Paradigm::SeparateBranches)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown paradigm '{s}'"))
    }
}

/// Gate rule of the weak-image/strong-feature branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch1Threshold {
    /// Fixed τ.
    Constant,
    /// The same dynamic rule as the other branch.
    Mirror,
}

impl FromStr for Branch1Threshold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Branch1Threshold::Constant),
            "mirror" => Ok(Branch1Threshold::Mirror),
            _ => Err(format!(
                "unknown branch-1 threshold '{s}' (expected constant or mirror)"
            )),
        }
    }
}

impl fmt::Display for Branch1Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch1Threshold::Constant => "constant",
            Branch1Threshold::Mirror => "mirror",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaTarget {
    Uniform,
    LabeledPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lambda_u: f64,
    pub tau: f64,
    pub threshold: ThresholdKind,
    pub clamp: Option<(f64, f64)>,
    pub branch1_threshold: Branch1Threshold,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub paradigm: Paradigm,
    pub cbi: bool,
    pub da: bool,
    pub da_target: DaTarget,
    pub strategies: Vec<Strategy>,
    /// Image augmentation; `None` derives it from the input size. An empty
    /// `fill` is replaced by the per-channel data mean.
    pub augment: Option<AugPolicy>,
    /// Evaluation cadence; `None` means max(T/100, 50).
    pub eval_every: Option<usize>,
    pub eval_batch: usize,
    /// Record wall-clock time in the metrics (breaks byte-identical output).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_labeled: 16,
            batch_unlabeled: 32,
            lambda_u: 1.0,
            tau: 0.95,
            threshold: ThresholdKind::Constant,
            clamp: None,
            branch1_threshold: Branch1Threshold::Constant,
            steps: 1000,
            lr: 0.03,
            weight_decay: 5e-4,
            momentum: 0.9,
            ema_decay: 0.999,
            seed: 0,
            paradigm: Paradigm::Ifmatch,
            cbi: true,
            da: true,
            da_target: DaTarget::Uniform,
            strategies: Strategy::ALL.to_vec(),
            augment: None,
            eval_every: None,
            eval_batch: 256,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!("lambda_u {} must be ≥ 0", self.lambda_u));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("momentum must lie in [0, 1) and ema decay in [0, 1]".into());
        }
        if self.strategies.is_empty() {
            return bad("feature strategy pool is empty".into());
        }
        if self.eval_every == Some(0) || self.eval_batch == 0 {
            return bad("eval cadence and eval batch must be positive".into());
        }
        Ok(())
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or((self.steps / 100).max(50))
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchOutcome {
    pub loss_s: f64,
    pub loss_u1: f64,
    pub loss_u2: f64,
    pub total: f64,
    pub util_b1: f64,
    pub util_b2: f64,
    pub cbi_mask_rate: f64,
    pub naive_ratio: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes with no test sample.
    pub per_class: Vec<Option<f64>>,
}

/// One metrics row, written at every evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_s: f64,
    pub loss_u1: f64,
    pub loss_u2: f64,
    pub util_b1: f64,
    pub util_b2: f64,
    pub cbi_mask_rate: f64,
    pub naive_ratio: f64,
    pub acc: f64,
    pub ema_acc: f64,
    pub wall_ms: f64,
}

/// Stacks C×H×W images into an N×C×H×W batch.
pub fn batch_of<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::invalid(
                    "batch",
                    format!("image shape {:?} vs {:?}", img.shape(), s),
                ))
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::invalid("batch", "no images"))?;
    let mut full = vec![n];
    full.extend_from_slice(&s);
    Tensor::new(&full, data)
}

pub fn one_hot(classes: &[usize], c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len(), c]);
    for (i, &k) in classes.iter().enumerate() {
        t.data_mut()[i * c + k] = 1.0;
    }
    t
}

/// Mean cross-entropy of the weakly augmented labeled batch.
pub fn supervised_loss(model: &Model, tape: &mut Tape, vars: &[Var], x: &Tensor, y: &[usize]) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::invalid("supervised_loss", "empty labeled batch"));
    }
    let c = model.spec().num_classes;
    if let Some(&k) = y.iter().find(|&&k| k >= c) {
        return Err(Error::invalid("supervised_loss", format!("label {k} out of range")));
    }
    let xv = tape.leaf(x.clone(), false);
    let logits = model.forward(tape, vars, xv, None, None)?;
    let p = tape.softmax(logits)?;
    let w = vec![1.0 / y.len() as f64; y.len()];
    tape.cross_entropy(&one_hot(y, c), p, &w)
}

/// Weighted consistency term `Σ_i weights[i] · H(onehot(pseudo_i), p_i) / N`
/// for one student view.
///
/// Rows with zero weight are skipped unless `keep_all` asks for every
/// row's prediction, which is then returned alongside the loss node.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss(
    model: &Model,
    tape: &mut Tape,
    vars: &[Var],
    x: &Tensor,
    pseudo: &[usize],
    weights: &[f64],
    hook: Option<(HookPoint, &PerturbDraw)>,
    mask: Option<&[bool]>,
    keep_all: bool,
) -> Result<(Option<Var>, Option<Tensor>)> {
    let n = pseudo.len();
    if weights.len() != n || x.shape().first() != Some(&n) {
        return Err(Error::shape("consistency_loss", "batch", n, weights.len()));
    }
    let rows: Vec<usize> = if keep_all {
        (0..n).collect()
    } else {
        (0..n).filter(|&i| weights[i] > 0.0).collect()
    };
    if rows.is_empty() {
        return Ok((None, None));
    }
    let sub = if rows.len() == n {
        x.clone()
    } else {
        Tensor::stack_first(&rows.iter().map(|&i| x.slice_first(i)).collect::<Vec<_>>())?
    };
    let sub_mask: Option<Vec<bool>> = mask.map(|m| rows.iter().map(|&i| m[i]).collect());
    let xv = tape.leaf(sub, false);
    let logits = model.forward(tape, vars, xv, hook, sub_mask.as_deref())?;
    let p = tape.softmax(logits)?;
    let c = model.spec().num_classes;
    let labels: Vec<usize> = rows.iter().map(|&i| pseudo[i]).collect();
    let w: Vec<f64> = rows.iter().map(|&i| weights[i] / n as f64).collect();
    let loss = tape.cross_entropy(&one_hot(&labels, c), p, &w)?;
    let probs = keep_all.then(|| tape.value(p).clone());
    Ok((Some(loss), probs))
}

/// Teacher pseudo-labels for one unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    /// Aligned probabilities, N×C.
    pub probs: Tensor,
    pub conf: Vec<f64>,
    pub pseudo: Vec<usize>,
}

/// Feature perturbations shared by the whole batch for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDraws {
    pub strong: (HookPoint, PerturbDraw),
    pub weak: (HookPoint, PerturbDraw),
}

/// One block and one strategy per step; the strong draw sits at the block
/// output, the weak one after a uniformly chosen inner convolution.
pub fn draw_features<R: Rng + ?Sized>(model: &Model, pool: &[Strategy], rng: &mut R) -> Result<Option<FeatureDraws>> {
    let blocks = model.num_blocks();
    if blocks == 0 {
        return Ok(None);
    }
    let block = rng.random_range(0..blocks);
    let a = HookPoint::a(block);
    let shape = model.hook_feature_shape(&a)?;
    let eligible: Vec<Strategy> = pool
        .iter()
        .copied()
        .filter(|s| *s != Strategy::ValueSmooth || shape[1].min(shape[2]) >= 3)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(
            "draw_features",
            format!("no strategy fits feature shape {shape:?}"),
        ));
    }
    let strategy = eligible[rng.random_range(0..eligible.len())];
    let strong = draw_strategy(strategy, shape, Intensity::Strong, rng)?;
    let b = HookPoint::b(block, rng.random_range(1..=2));
    let weak = draw_strategy(strategy, model.hook_feature_shape(&b)?, Intensity::Weak, rng)?;
    Ok(Some(FeatureDraws {
        strong: (a, strong),
        weak: (b, weak),
    }))
}

pub fn evaluate(model: &Model, params: &[Tensor], test: &[Sample], batch: usize) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluate", "empty test set"));
    }
    let c = model.spec().num_classes;
    let mut hits = vec![0usize; c];
    let mut seen = vec![0usize; c];
    for chunk in test.chunks(batch.max(1)) {
        let x = batch_of(chunk.iter().map(|s| &s.image))?;
        let pred = model.logits_with(params, &x)?.argmax_rows();
        for (s, p) in chunk.iter().zip(pred) {
            seen[s.class] += 1;
            hits[s.class] += usize::from(p == s.class);
        }
    }
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / test.len() as f64,
        per_class: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}

/// Augmented views of one step's batches.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled_x: Tensor,
    pub labeled_y: Vec<usize>,
    pub ids: Vec<u64>,
    pub weak: Tensor,
    pub strong: Tensor,
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub ema: EmaModel,
    pub threshold: ThresholdState,
    pub da: DaState,
    pub ledger: ConfidenceLedger,
    pub saa: SaaLedger,
    pub policy: AugPolicy,
    velocity: Vec<Vec<f64>>,
    schedule: LrSchedule,
    seeds: Seeds,
    data: &'a DatasetSplit,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, spec: &ModelSpec, data: &'a DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::Data("labeled set is empty".into()));
        }
        if data.unlabeled.is_empty() && cfg.lambda_u > 0.0 {
            return Err(Error::Data("unlabeled set is empty".into()));
        }
        if spec.num_classes != data.num_classes {
            return Err(Error::Data(format!(
                "model has {} classes, data has {}",
                spec.num_classes, data.num_classes
            )));
        }
        let model = Model::build(spec, cfg.seed)?;
        let shape = data.labeled[0].image.shape().to_vec();
        if shape != spec.input_shape {
            return Err(Error::Data(format!(
                "images are {shape:?}, model expects {:?}",
                spec.input_shape
            )));
        }
        let ema = EmaModel::new(cfg.ema_decay, model.params())?;
        let threshold = ThresholdState::new(cfg.threshold, cfg.tau, data.num_classes, cfg.clamp)?;
        let da = match cfg.da_target {
            DaTarget::Uniform => DaState::uniform(data.num_classes),
            DaTarget::LabeledPrior => DaState::with_target(&data.labeled_prior())?,
        };
        let mut policy = match &cfg.augment {
            Some(p) => p.clone(),
            None => {
                let mut p = AugPolicy::for_size(spec.input_shape[1].min(spec.input_shape[2]), spec.input_shape[0]);
                p.fill.clear();
                p
            }
        };
        if policy.fill.is_empty() {
            policy.fill = imgperturb::channel_means(data.labeled.iter().chain(&data.unlabeled).map(|s| &s.image))?;
        }
        if policy.fill.len() != spec.input_shape[0] {
            return Err(Error::invalid("augment", "fill length differs from the channel count"));
        }
        policy.validate()?;
        let velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let schedule = LrSchedule {
            eta0: cfg.lr,
            total: cfg.steps,
        };
        Ok(Trainer {
            seeds: Seeds::new(cfg.seed),
            saa: SaaLedger::new(data.unlabeled.iter().map(|s| s.id)),
            cfg,
            model,
            ema,
            threshold,
            da,
            ledger: ConfidenceLedger::new(),
            policy,
            velocity,
            schedule,
            data,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn data(&self) -> &DatasetSplit {
        self.data
    }

    /// Draws and augments the labeled and unlabeled batches of `step`.
    pub fn prepare_batch(&self, step: usize) -> Result<StepBatch> {
        let d = self.data;
        let mut pick = self.seeds.stream(rng::SHUFFLE, &[step as u64]);
        let lab: Vec<&Sample> = (0..self.cfg.batch_labeled)
            .map(|_| &d.labeled[pick.random_range(0..d.labeled.len())])
            .collect();
        let unl: Vec<&Sample> = if d.unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..self.cfg.batch_unlabeled)
                .map(|_| &d.unlabeled[pick.random_range(0..d.unlabeled.len())])
                .collect()
        };
        let weak = |s: &Sample| -> Result<Tensor> {
            let mut r = self.seeds.stream(rng::IMG_WEAK, &[step as u64, s.id]);
            imgperturb::weak_aug(&s.image, &self.policy, &mut r)
        };
        let strong = |s: &Sample| -> Result<Tensor> {
            let mut r = self.seeds.stream(rng::IMG_STRONG, &[step as u64, s.id]);
            let base = imgperturb::weak_aug(&s.image, &self.policy, &mut r)?;
            imgperturb::strong_aug(&base, &self.policy, &mut r)
        };
        let labeled_x = batch_of(&lab.iter().map(|s| weak(s)).collect::<Result<Vec<_>>>()?)?;
        let (weak_u, strong_u) = if unl.is_empty() {
            (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
        } else {
            (
                batch_of(&unl.iter().map(|s| weak(s)).collect::<Result<Vec<_>>>()?)?,
                batch_of(&unl.iter().map(|s| strong(s)).collect::<Result<Vec<_>>>()?)?,
            )
        };
        Ok(StepBatch {
            labeled_x,
            labeled_y: lab.iter().map(|s| s.class).collect(),
            ids: unl.iter().map(|s| s.id).collect(),
            weak: weak_u,
            strong: strong_u,
        })
    }

    /// Detached teacher predictions on the weak view; folds the batch into
    /// the alignment and threshold statistics.
    pub fn teacher(&mut self, weak: &Tensor, ids: &[u64]) -> Result<Teacher> {
        let logits = self.model.logits(weak)?;
        let c = self.data.num_classes;
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.into_iter().map(|v| v / s));
        }
        let mut probs = Tensor::new(logits.shape(), probs)?;
        if self.cfg.da {
            probs = self.da.refine(&probs)?;
        }
        self.threshold.update(&probs, ids)?;
        let pseudo = probs.argmax_rows();
        let conf = probs.data().chunks(c).zip(&pseudo).map(|(r, &j)| r[j]).collect();
        Ok(Teacher { probs, conf, pseudo })
    }

    /// Runs one iteration and returns its diagnostics.
    pub fn train_step(&mut self) -> Result<BatchOutcome> {
        let started = Instant::now();
        let step = self.step;
        let lr = self.schedule.lr_at(step.min(self.cfg.steps))?;
        let batch = self.prepare_batch(step)?;
        let use_unlabeled = !batch.ids.is_empty();
        let paradigm = self.cfg.paradigm;

        let teacher = if use_unlabeled {
            Some(self.teacher(&batch.weak, &batch.ids)?)
        } else {
            None
        };
        let n_u = batch.ids.len();
        let (mut w1, mut w2, mut pass2, mut mask) =
            (vec![0.0; n_u], vec![0.0; n_u], vec![false; n_u], vec![false; n_u]);
        if let Some(t) = &teacher {
            for i in 0..n_u {
                let (conf, j) = (t.conf[i], t.pseudo[i]);
                let tau_t = self.threshold.threshold_value(Some(j))?;
                w2[i] = self.threshold.gate(conf, j)?;
                pass2[i] = conf >= tau_t;
                w1[i] = match self.cfg.branch1_threshold {
                    Branch1Threshold::Constant => f64::from(u8::from(conf >= self.cfg.tau)),
                    Branch1Threshold::Mirror => w2[i],
                };
                mask[i] = match paradigm {
                    Paradigm::Ifmatch if self.cfg.cbi => self.ledger.mask(batch.ids[i], tau_t),
                    Paradigm::Ifmatch => true,
                    _ => false,
                };
            }
        }
        let mut feat_rng = self.seeds.stream(rng::FEAT, &[step as u64]);
        let draws = draw_features(&self.model, &self.cfg.strategies, &mut feat_rng)?;
        let needs_draws = matches!(
            paradigm,
            Paradigm::Ifmatch | Paradigm::ToyCombined | Paradigm::SeparateBranches
        );
        if needs_draws && draws.is_none() && use_unlabeled {
            return Err(Error::invalid(
                "train_step",
                format!("{paradigm} needs a model with hook points"),
            ));
        }

        let mut tape = Tape::new();
        let vars = Model::bind(&mut tape, self.model.params(), true);
        let ls = supervised_loss(&self.model, &mut tape, &vars, &batch.labeled_x, &batch.labeled_y)?;
        let mut lu1 = None;
        let mut lu2 = None;
        let mut branch2_probs = None;
        if let (Some(t), true) = (&teacher, self.cfg.lambda_u > 0.0 || paradigm == Paradigm::Ifmatch) {
            let strong_hook = draws.as_ref().map(|d| (d.strong.0, &d.strong.1));
            let weak_hook = draws.as_ref().map(|d| (d.weak.0, &d.weak.1));
            if paradigm.has_branch1() {
                lu1 = consistency_loss(
                    &self.model,
                    &mut tape,
                    &vars,
                    &batch.weak,
                    &t.pseudo,
                    &w1,
                    strong_hook,
                    None,
                    false,
                )?
                .0;
            }
            let (hook, m, keep) = match paradigm {
                Paradigm::FixmatchBaseline | Paradigm::SeparateBranches => (None, None, false),
                Paradigm::ToyCombined => (strong_hook, None, false),
                Paradigm::Ifmatch => (weak_hook, Some(mask.as_slice()), self.cfg.cbi),
            };
            let (l, p) = consistency_loss(
                &self.model,
                &mut tape,
                &vars,
                &batch.strong,
                &t.pseudo,
                &w2,
                hook,
                m,
                keep,
            )?;
            lu2 = l;
            branch2_probs = p;
        }
        let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let (loss_s, loss_u1, loss_u2) = (val(&tape, Some(ls)), val(&tape, lu1), val(&tape, lu2));
        let unl = match (lu1, lu2) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        };
        let total = match unl {
            Some(u) if self.cfg.lambda_u > 0.0 => {
                let u = tape.scale(u, self.cfg.lambda_u)?;
                tape.add(ls, u)?
            }
            _ => ls,
        };
        let total_value = tape.value(total).data()[0];
        if ![loss_s, loss_u1, loss_u2, total_value].iter().all(|v| v.is_finite()) {
            return Err(Error::NumericAbort {
                step,
                detail: format!("loss_s={loss_s} loss_u1={loss_u1} loss_u2={loss_u2} lr={lr}"),
            });
        }
        tape.backward(total).map_err(|e| Error::NumericAbort {
            step,
            detail: e.to_string(),
        })?;
        self.sgd(&tape, &vars, lr);
        self.ema.update(self.model.params())?;

        if let (Some(t), Some(p)) = (&teacher, &branch2_probs) {
            let c = self.data.num_classes;
            for (i, row) in p.data().chunks(c).enumerate() {
                self.ledger.record(batch.ids[i], row, t.pseudo[i])?;
                self.saa
                    .record(batch.ids[i], -row[t.pseudo[i]].max(crate::autodiff::LOG_EPS).ln());
            }
        }
        self.step += 1;
        let frac = |v: &[bool]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
            }
        };
        let pass1: Vec<bool> = w1.iter().map(|&w| w > 0.0).collect();
        Ok(BatchOutcome {
            loss_s,
            loss_u1,
            loss_u2,
            total: total_value,
            util_b1: if paradigm.has_branch1() { frac(&pass1) } else { 0.0 },
            util_b2: frac(&pass2),
            cbi_mask_rate: if paradigm == Paradigm::Ifmatch {
                frac(&mask)
            } else {
                0.0
            },
            naive_ratio: if n_u == 0 {
                0.0
            } else {
                cbi::naive_ratio(&pass2, &mask)?
            },
            wall_ms: if self.cfg.timing {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        })
    }

    /// Heavy-ball SGD with decoupled-from-norm weight decay.
    fn sgd(&mut self, tape: &Tape, vars: &[Var], lr: f64) {
        let decay = self.model.decay_mask().to_vec();
        let (mom, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (i, p) in self.model.params_mut().iter_mut().enumerate() {
            let Some(g) = tape.grad(vars[i]) else { continue };
            let v = &mut self.velocity[i];
            let wdi = if decay[i] { wd } else { 0.0 };
            for ((x, vel), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mom * *vel + gi + wdi * *x;
                *x -= lr * *vel;
            }
        }
    }

    pub fn evaluate_live(&self) -> Result<EvalReport> {
        evaluate(&self.model, self.model.params(), &self.data.test, self.cfg.eval_batch)
    }

    pub fn evaluate_ema(&self) -> Result<EvalReport> {
        evaluate(&self.model, self.ema.shadow(), &self.data.test, self.cfg.eval_batch)
    }

    /// SAA split over the recorded branch-2 losses.
    pub fn saa_split(&self) -> Result<SaaSplit> {
        self.saa.identify().map(|(_, s)| s)
    }

    /// Model, EMA shadow, scheduler state and ledger as named tensors.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("model.{n}"), t))
            .collect();
        for (n, t) in self.model.param_names().iter().zip(self.ema.shadow()) {
            out.push((format!("ema.{n}"), t.clone()));
        }
        out.push(("sched.threshold".into(), self.threshold.snapshot()));
        out.push((
            "sched.da_p_bar".into(),
            Tensor::from_raw(vec![self.da.p_bar().len()], self.da.p_bar().to_vec()),
        ));
        out.push(("sched.step".into(), Tensor::scalar(self.step as f64)));
        let rows: Vec<f64> = self
            .ledger
            .entries()
            .flat_map(|(id, e)| [id as f64, e.h, f64::from(u8::from(e.m))])
            .collect();
        if !rows.is_empty() {
            let n = rows.len() / 3;
            out.push(("ledger".into(), Tensor::from_raw(vec![n, 3], rows)));
        }
        out
    }
}

/// Loads the model and EMA parameters written by
/// [`Trainer::checkpoint_tensors`] into two models of `spec`.
pub fn restore_models(spec: &ModelSpec, tensors: &[(String, Tensor)]) -> Result<(Model, Vec<Tensor>)> {
    let strip = |prefix: &str| -> Vec<(String, Tensor)> {
        tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    };
    let mut live = Model::build(spec, 0)?;
    live.load_named(&strip("model."))?;
    let mut ema = Model::build(spec, 0)?;
    ema.load_named(&strip("ema."))?;
    Ok((live, ema.params().to_vec()))
}

/// Runs `cfg.steps` iterations, evaluating on the cadence. Returns the
/// metrics rows (first row is the initial evaluation) and the trainer.
pub fn train<'a>(cfg: TrainConfig, spec: &ModelSpec, data: &'a DatasetSplit) -> Result<(Vec<MetricsRow>, Trainer<'a>)> {
    let mut tr = Trainer::new(cfg, spec, data)?;
    let every = tr.cfg.eval_interval();
    let total = tr.cfg.steps;
    let mut rows = Vec::new();
    let mut acc = BatchOutcome::default();
    let mut since = 0usize;
    let started = Instant::now();
    let emit = |tr: &Trainer, acc: &BatchOutcome, since: usize| -> Result<MetricsRow> {
        let k = since.max(1) as f64;
        Ok(MetricsRow {
            step: tr.step,
            lr: tr.schedule.lr_at(tr.step)?,
            loss_s: acc.loss_s / k,
            loss_u1: acc.loss_u1 / k,
            loss_u2: acc.loss_u2 / k,
            util_b1: acc.util_b1 / k,
            util_b2: acc.util_b2 / k,
            cbi_mask_rate: acc.cbi_mask_rate / k,
            naive_ratio: acc.naive_ratio / k,
            acc: tr.evaluate_live()?.accuracy,
            ema_acc: tr.evaluate_ema()?.accuracy,
            wall_ms: if tr.cfg.timing {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        })
    };
    rows.push(emit(&tr, &acc, 0)?);
    for _ in 0..total {
        let o = tr.train_step()?;
        acc.loss_s += o.loss_s;
        acc.loss_u1 += o.loss_u1;
        acc.loss_u2 += o.loss_u2;
        acc.util_b1 += o.util_b1;
        acc.util_b2 += o.util_b2;
        acc.cbi_mask_rate += o.cbi_mask_rate;
        acc.naive_ratio += o.naive_ratio;
        since += 1;
        if tr.step % every == 0 || tr.step == total {
            rows.push(emit(&tr, &acc, since)?);
            acc = BatchOutcome::default();
            since = 0;
        }
    }
    Ok((rows, tr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{gen_synthetic, split_balanced, SyntheticConfig};

    fn tiny() -> (ModelSpec, DatasetSplit) {
        let src = gen_synthetic(&SyntheticConfig {
            classes: 3,
            per_class: 12,
            test_per_class: 4,
            channels: 2,
            size: 6,
            difficulty: 0.5,
            seed: 3,
        })
        .unwrap();
        let split = split_balanced(&src, 6, 1, true).unwrap();
        let spec = ModelSpec {
            stage_widths: vec![4, 6],
            num_classes: 3,
            input_shape: [2, 6, 6],
            ..ModelSpec::default()
        };
        (spec, split)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_labeled: 4,
            batch_unlabeled: 6,
            steps: 5,
            tau: 0.3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn step_reports_consistent_totals() {
        let (spec, data) = tiny();
        let mut tr = Trainer::new(cfg(), &spec, &data).unwrap();
        for _ in 0..3 {
            let o = tr.train_step().unwrap();
            let expect = o.loss_s + tr.cfg.lambda_u * (o.loss_u1 + o.loss_u2);
            assert!((o.total - expect).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&o.util_b2));
        }
    }

    #[test]
    fn zero_steps_gives_one_row() {
        let (spec, data) = tiny();
        let (rows, _) = train(TrainConfig { steps: 0, ..cfg() }, &spec, &data).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 0);
    }

    #[test]
    fn evaluate_marks_absent_classes() {
        let (spec, data) = tiny();
        let m = Model::build(&spec, 1).unwrap();
        let only0: Vec<Sample> = data.test.iter().filter(|s| s.class == 0).cloned().collect();
        let r = evaluate(&m, m.params(), &only0, 8).unwrap();
        assert!(r.per_class[0].is_some());
        assert_eq!(r.per_class[1], None);
        assert!(evaluate(&m, m.params(), &[], 8).is_err());
    }

    #[test]
    fn supervised_loss_uniform_is_ln_c() {
        let (spec, _) = tiny();
        let mut m = Model::build(&spec, 1).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = Model::bind(&mut tape, m.params(), true);
        let x = Tensor::full(&[2, 2, 6, 6], 0.3);
        let l = supervised_loss(&m, &mut tape, &vars, &x, &[0, 2]).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }
}
