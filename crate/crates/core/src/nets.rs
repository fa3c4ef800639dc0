//! Pre-activation residual CNN (plus a small MLP fallback) with named hook
//! points for feature-level perturbation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::featperturb::{PerturbDraw, PerturbOp};
use crate::rng::{self, Seeds};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IFM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResidualCnn,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    /// C_in, H, W.
    pub input_shape: [usize; 3],
    pub kind: ModelKind,
    pub norm: NormMode,
    /// Hidden width of the MLP kind; ignored by the CNN.
    pub mlp_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            stage_widths: vec![8, 16, 32],
            blocks_per_stage: 1,
            num_classes: 10,
            input_shape: [3, 16, 16],
            kind: ModelKind::ResidualCnn,
            norm: NormMode::Sample,
            mlp_hidden: 64,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("model", "num_classes must be at least 2"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::invalid("model", "input extents must be positive"));
        }
        match self.kind {
            ModelKind::ResidualCnn => {
                if self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
                    return Err(Error::invalid(
                        "model",
                        "residual_cnn needs at least one residual block",
                    ));
                }
                if self.stage_widths.contains(&0) {
                    return Err(Error::invalid("model", "stage widths must be positive"));
                }
            }
            ModelKind::Mlp => {
                if self.mlp_hidden == 0 {
                    return Err(Error::invalid("model", "mlp_hidden must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    /// Output of the block's residual summation (strong perturbation).
    A,
    /// Output of one convolution inside the residual component (weak).
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookPoint {
    pub block: usize,
    pub position: Position,
    /// 1 or 2; only meaningful for position B.
    pub conv: u8,
}

impl HookPoint {
    pub fn a(block: usize) -> Self {
        HookPoint {
            block,
            position: Position::A,
            conv: 1,
        }
    }

    pub fn b(block: usize, conv: u8) -> Self {
        HookPoint {
            block,
            position: Position::B,
            conv,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    in_w: usize,
    out_w: usize,
    stride: usize,
    /// Output spatial extents.
    out_hw: (usize, usize),
    conv1: usize,
    conv2: usize,
    norm1: (usize, usize),
    norm2: (usize, usize),
    proj: Option<usize>,
}

#[derive(Debug, Clone)]
enum Layout {
    Cnn {
        stem: usize,
        blocks: Vec<BlockLayout>,
        head_norm: (usize, usize),
        fc: (usize, usize),
    },
    Mlp {
        fc1: (usize, usize),
        fc2: (usize, usize),
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
    decay: Vec<bool>,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    decay: Vec<bool>,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.push(name, t, true)
    }

    fn push(&mut self, name: String, t: Tensor, decay: bool) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.decay.push(decay);
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, c: usize) -> (usize, usize) {
        let s = self.push(format!("{prefix}.scale"), Tensor::full(&[c], 1.0), false);
        let b = self.push(format!("{prefix}.shift"), Tensor::zeros(&[c]), false);
        (s, b)
    }
}

fn conv_out(x: usize, stride: usize) -> usize {
    // 3×3 pad 1 and 1×1 pad 0 agree on the output extent.
    (x - 1) / stride + 1
}

impl Model {
    /// Deterministic He-style initialization from the "init" stream of `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            decay: Vec::new(),
            rng: Seeds::new(seed).stream(rng::INIT, &[]),
        };
        let [cin, h, w] = spec.input_shape;
        let c = spec.num_classes;
        let layout = match spec.kind {
            ModelKind::ResidualCnn => {
                let w0 = spec.stage_widths[0];
                let stem = b.he("stem.conv".into(), &[w0, cin, 3, 3], cin * 9);
                let mut blocks = Vec::new();
                let (mut ch, mut hw) = (w0, (h, w));
                for (s, &width) in spec.stage_widths.iter().enumerate() {
                    for j in 0..spec.blocks_per_stage {
                        let idx = blocks.len();
                        let stride = if s > 0 && j == 0 { 2 } else { 1 };
                        let p = format!("block{idx}");
                        let norm1 = b.norm(&format!("{p}.norm1"), ch);
                        let conv1 = b.he(format!("{p}.conv1"), &[width, ch, 3, 3], ch * 9);
                        let norm2 = b.norm(&format!("{p}.norm2"), width);
                        let conv2 = b.he(format!("{p}.conv2"), &[width, width, 3, 3], width * 9);
                        let proj =
                            (stride != 1 || ch != width).then(|| b.he(format!("{p}.proj"), &[width, ch, 1, 1], ch));
                        let out_hw = (conv_out(hw.0, stride), conv_out(hw.1, stride));
                        blocks.push(BlockLayout {
                            in_w: ch,
                            out_w: width,
                            stride,
                            out_hw,
                            conv1,
                            conv2,
                            norm1,
                            norm2,
                            proj,
                        });
                        ch = width;
                        hw = out_hw;
                    }
                }
                let head_norm = b.norm("head.norm", ch);
                let fw = b.he("head.fc.weight".into(), &[c, ch], ch);
                let fb = b.push("head.fc.bias".into(), Tensor::zeros(&[c]), true);
                Layout::Cnn {
                    stem,
                    blocks,
                    head_norm,
                    fc: (fw, fb),
                }
            }
            ModelKind::Mlp => {
                let d = cin * h * w;
                let hid = spec.mlp_hidden;
                let w1 = b.he("fc1.weight".into(), &[hid, d], d);
                let b1 = b.push("fc1.bias".into(), Tensor::zeros(&[hid]), true);
                let w2 = b.he("fc2.weight".into(), &[c, hid], hid);
                let b2 = b.push("fc2.bias".into(), Tensor::zeros(&[c]), true);
                Layout::Mlp {
                    fc1: (w1, b1),
                    fc2: (w2, b2),
                }
            }
        };
        Ok(Model {
            spec: spec.clone(),
            layout,
            names: b.names,
            params: b.params,
            decay: b.decay,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Whether weight decay applies to each parameter (false for
    /// normalization scale/offset).
    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn num_blocks(&self) -> usize {
        match &self.layout {
            Layout::Cnn { blocks, .. } => blocks.len(),
            Layout::Mlp { .. } => 0,
        }
    }

    /// Every hook point: per block, A then B1 then B2.
    pub fn hook_points(&self) -> Vec<HookPoint> {
        (0..self.num_blocks())
            .flat_map(|b| [HookPoint::a(b), HookPoint::b(b, 1), HookPoint::b(b, 2)])
            .collect()
    }

    /// C×H×W of the feature map seen at `hook`.
    pub fn hook_feature_shape(&self, hook: &HookPoint) -> Result<[usize; 3]> {
        let Layout::Cnn { blocks, .. } = &self.layout else {
            return Err(Error::invalid("forward", "mlp models have no hook points"));
        };
        let bl = blocks.get(hook.block).ok_or_else(|| {
            Error::invalid(
                "forward",
                format!("hook block {} out of range (have {})", hook.block, blocks.len()),
            )
        })?;
        if hook.position == Position::B && !(1..=2).contains(&hook.conv) {
            return Err(Error::invalid(
                "forward",
                format!("hook conv index {} must be 1 or 2", hook.conv),
            ));
        }
        Ok([bl.out_w, bl.out_hw.0, bl.out_hw.1])
    }

    /// Places `params` on the tape in model order.
    pub fn bind(tape: &mut Tape, params: &[Tensor], requires_grad: bool) -> Vec<Var> {
        params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                "parameter count",
                self.params.len(),
                params.len(),
            ));
        }
        for (i, (p, q)) in params.iter().zip(&self.params).enumerate() {
            if p.shape() != q.shape() {
                return Err(Error::invalid(
                    "forward",
                    format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        self.names[i],
                        p.shape(),
                        q.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Logits N×C for `input`, with an optional perturbation installed at
    /// `hook` and restricted to samples where `mask` is true.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        hook: Option<(HookPoint, &PerturbDraw)>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                "parameter count",
                self.params.len(),
                vars.len(),
            ));
        }
        let shape = tape.value(input).shape().to_vec();
        let [cin, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [cin, h, w] {
            return Err(Error::invalid(
                "forward",
                format!("input shape {shape:?} does not match N×{cin}×{h}×{w}"),
            ));
        }
        let n = shape[0];
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("forward", "sample mask length", n, m.len()));
            }
        }
        let op = match hook {
            Some((hp, draw)) => {
                let [c, fh, fw] = self.hook_feature_shape(&hp)?;
                draw.validate(c, fh, fw)?;
                Some((
                    hp,
                    Arc::new(PerturbOp {
                        draw: draw.clone(),
                        mask: mask.map(|m| m.to_vec()),
                    }),
                ))
            }
            None => None,
        };
        let inject = |tape: &mut Tape, x: Var, at: HookPoint| -> Result<Var> {
            match &op {
                Some((hp, map)) if *hp == at => tape.map(x, map.clone()),
                _ => Ok(x),
            }
        };
        let norm = self.spec.norm;
        match &self.layout {
            Layout::Cnn {
                stem,
                blocks,
                head_norm,
                fc,
            } => {
                let mut x = tape.conv2d(input, vars[*stem], 1, 1)?;
                for (bi, bl) in blocks.iter().enumerate() {
                    let a1 = tape.normalize(x, norm)?;
                    let a1 = tape.channel_affine(a1, vars[bl.norm1.0], vars[bl.norm1.1])?;
                    let a1 = tape.relu(a1)?;
                    let r = tape.conv2d(a1, vars[bl.conv1], bl.stride, 1)?;
                    let r = inject(tape, r, HookPoint::b(bi, 1))?;
                    let a2 = tape.normalize(r, norm)?;
                    let a2 = tape.channel_affine(a2, vars[bl.norm2.0], vars[bl.norm2.1])?;
                    let a2 = tape.relu(a2)?;
                    let r = tape.conv2d(a2, vars[bl.conv2], 1, 1)?;
                    let r = inject(tape, r, HookPoint::b(bi, 2))?;
                    let short = match bl.proj {
                        Some(p) => tape.conv2d(a1, vars[p], bl.stride, 0)?,
                        None => x,
                    };
                    debug_assert!(bl.proj.is_some() || bl.in_w == bl.out_w);
                    x = tape.add(r, short)?;
                    x = inject(tape, x, HookPoint::a(bi))?;
                }
                let y = tape.normalize(x, norm)?;
                let y = tape.channel_affine(y, vars[head_norm.0], vars[head_norm.1])?;
                let y = tape.relu(y)?;
                let y = tape.global_avg_pool(y)?;
                tape.linear(y, vars[fc.0], vars[fc.1])
            }
            Layout::Mlp { fc1, fc2 } => {
                if op.is_some() {
                    return Err(Error::invalid("forward", "mlp models have no hook points"));
                }
                let x = tape.flatten(input)?;
                let x = tape.linear(x, vars[fc1.0], vars[fc1.1])?;
                let x = tape.relu(x)?;
                tape.linear(x, vars[fc2.0], vars[fc2.1])
            }
        }
    }

    /// Gradient-free logits using an arbitrary parameter set of this
    /// architecture (e.g. an EMA shadow).
    pub fn logits_with(&self, params: &[Tensor], input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let vars = Model::bind(&mut tape, params, false);
        let x = tape.leaf(input.clone(), false);
        let out = self.forward(&mut tape, &vars, x, None, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.logits_with(&self.params, input)
    }

    /// Replaces parameters from a named list, requiring matching names and
    /// shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut fresh = Vec::with_capacity(self.params.len());
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Data(format!("checkpoint does not match model: missing parameter {name}")))?;
            if t.shape() != self.params[i].shape() {
                return Err(Error::Data(format!(
                    "checkpoint does not match model: {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.params[i].shape()
                )));
            }
            fresh.push(t.clone());
        }
        self.params = fresh;
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }
}

/// Writes named tensors to the flat "IFM1" container.
pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing IFM1 header"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    let u32le = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    loop {
        // A clean end of file can only fall between records.
        let head = match take(4) {
            Ok(s) => u32le(s),
            Err(_) => break,
        };
        let name = String::from_utf8(take(head)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = u32le(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32le(take(4)?));
        }
        let count: usize = shape.iter().product();
        let raw = take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(&format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(out)
}
