//! Compact diffusion transformer with cache hooks at the two residual
//! boundaries of every block.
//!
//! A block computes
//!
//! ```text
//! attn_out = gate_a ⊙ attention(modulate(norm(h), shift_a, scale_a))
//! h        = h + attn_out
//! ffn_out  = gate_f ⊙ ffn(modulate(norm(h), shift_f, scale_f))
//! h        = h + ffn_out
//! ```
//!
//! with the six modulation vectors projected from the timestep embedding.
//! `attn_out` and `ffn_out` are the tensors a [`SublayerHook`] sees: they are
//! what the cache stores and what calibration measures.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f32 = 1e-6;
const TIME_SCALE: f32 = 1000.0;
const MAX_PERIOD: f32 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub seq_len: usize,
    pub in_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            seq_len: 32,
            in_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("seq_len", self.seq_len),
            ("in_dim", self.in_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn layer_count(&self) -> usize {
        2 * self.depth
    }

    /// Shape of `x`, `cond` and the velocity output.
    pub fn sample_shape(&self) -> [usize; 2] {
        [self.seq_len, self.in_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Attn,
    Ffn,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Attn => "attn",
            LayerKind::Ffn => "ffn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attn" => Some(LayerKind::Attn),
            "ffn" => Some(LayerKind::Ffn),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One cacheable sublayer: the attention or FFN half of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LayerKind) -> Self {
        Self { block, kind }
    }

    /// Dense index in `0..2*depth`, attention first within a block.
    pub fn index(self) -> usize {
        2 * self.block + self.kind as usize
    }

    pub fn from_index(index: usize) -> Self {
        let kind = if index.is_multiple_of(2) { LayerKind::Attn } else { LayerKind::Ffn };
        Self::new(index / 2, kind)
    }

    /// All layers in execution order.
    pub fn all(depth: usize) -> impl Iterator<Item = LayerId> {
        (0..2 * depth).map(Self::from_index)
    }

    /// `"block.kind"`, the key used in JSON files.
    pub fn key(self) -> String {
        format!("{}.{}", self.block, self.kind)
    }

    pub fn parse_key(key: &str) -> Option<Self> {
        let (block, kind) = key.split_once('.')?;
        Some(Self::new(block.parse().ok()?, LayerKind::parse(kind)?))
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.kind)
    }
}

/// Classifier-free guidance branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Cond,
    Uncond,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Cond, Branch::Uncond];
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Cond => "cond",
            Branch::Uncond => "uncond",
        })
    }
}

/// Observes and optionally replaces sublayer outputs during a forward pass.
///
/// Before each residual add the model asks [`reuse`](Self::reuse); `Some`
/// skips the sublayer and adds the returned tensor instead. Otherwise the
/// sublayer runs and its output is reported through
/// [`computed`](Self::computed).
pub trait SublayerHook {
    fn reuse(&mut self, step: usize, layer: LayerId, branch: Branch) -> Result<Option<&Tensor>>;

    fn computed(&mut self, step: usize, layer: LayerId, branch: Branch, output: &Tensor) -> Result<()>;
}

/// Computes everything and records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct ComputeAll;

impl SublayerHook for ComputeAll {
    fn reuse(&mut self, _: usize, _: LayerId, _: Branch) -> Result<Option<&Tensor>> {
        Ok(None)
    }

    fn computed(&mut self, _: usize, _: LayerId, _: Branch, _: &Tensor) -> Result<()> {
        Ok(())
    }
}

/// `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f32) -> Self {
        let std = gain / libm::sqrtf(fan_in as f32);
        Self {
            w: rng.normal_tensor(&[fan_in, fan_out], std),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add_row_vector(&self.b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    /// Keys have no bias: it would shift every score in a row equally and
    /// cancel in the softmax.
    pub k: Tensor,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Projects the timestep embedding to
    /// `[shift_a, scale_a, gate_a, shift_f, scale_f, gate_f]`.
    pub modulation: Linear,
    pub attn: Attention,
    pub ffn: FeedForward,
}

/// Per-block modulation vectors, each of length `width`.
pub(crate) struct Modulation {
    pub(crate) raw: Tensor,
    width: usize,
}

impl Modulation {
    fn part(&self, i: usize) -> &[f32] {
        &self.raw.data()[i * self.width..(i + 1) * self.width]
    }

    pub(crate) fn shift(&self, kind: LayerKind) -> &[f32] {
        self.part(3 * kind as usize)
    }

    pub(crate) fn scale(&self, kind: LayerKind) -> &[f32] {
        self.part(3 * kind as usize + 1)
    }

    pub(crate) fn gate(&self, kind: LayerKind) -> &[f32] {
        self.part(3 * kind as usize + 2)
    }
}

/// Model parameters. Also used as the gradient container during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dit {
    pub config: ModelConfig,
    pub time: Linear,
    pub input: Linear,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub output: Linear,
}

/// Sinusoidal timestep features before the learned projection: sines then
/// cosines at geometrically spaced frequencies. Odd widths get a trailing 0.
pub fn sinusoidal_features(t: f32, width: usize) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            name: "t",
            value: t as f64,
            range: "[0, 1]",
        });
    }
    let half = width / 2;
    let mut data = vec![0.0f32; width];
    for k in 0..half {
        let freq = libm::expf(-libm::logf(MAX_PERIOD) * k as f32 / half as f32);
        let arg = TIME_SCALE * t * freq;
        data[k] = libm::sinf(arg);
        data[half + k] = libm::cosf(arg);
    }
    Ok(Tensor::from_vec(&[1, width], data)?)
}

/// Normalizes rows, then applies `(1 + scale) * n + shift`.
pub(crate) fn modulate(x: &Tensor, shift: &[f32], scale: &[f32]) -> Result<(Tensor, Tensor)> {
    let (normed, _) = x.normalize_rows(NORM_EPS);
    let n = x.last_dim();
    let mut data = normed.data().to_vec();
    for row in data.chunks_exact_mut(n) {
        for ((v, &sh), &sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
    let out = Tensor::from_vec(x.dims(), data)?;
    Ok((normed, out))
}

pub(crate) fn apply_gate(x: &Tensor, gate: &[f32]) -> Result<Tensor> {
    let n = x.last_dim();
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(gate).map(|(&v, &g)| v * g))
        .collect();
    Ok(Tensor::from_vec(x.dims(), data)?)
}

/// Multi-head self-attention, returning the output projection. The caller
/// adds the residual.
pub fn attn_sublayer(x: &Tensor, attn: &Attention, heads: usize) -> Result<Tensor> {
    Ok(attention_heads(x, attn, heads)?.out)
}

pub(crate) struct AttentionTrace {
    pub(crate) q: Tensor,
    pub(crate) k: Tensor,
    pub(crate) v: Tensor,
    /// Row-softmaxed scores, one `seq × seq` matrix per head.
    pub(crate) probs: Vec<Tensor>,
    pub(crate) concat: Tensor,
    pub(crate) out: Tensor,
}

pub(crate) fn attention_heads(x: &Tensor, attn: &Attention, heads: usize) -> Result<AttentionTrace> {
    let width = x.last_dim();
    let seq = x.rows();
    let dh = width / heads;
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let q = attn.q.forward(x)?;
    let k = x.matmul(&attn.k)?;
    let v = attn.v.forward(x)?;
    let mut probs = Vec::with_capacity(heads);
    let mut concat = vec![0.0f32; seq * width];
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let p = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?;
        let oh = p.matmul(&vh)?;
        for r in 0..seq {
            concat[r * width + h * dh..r * width + (h + 1) * dh].copy_from_slice(oh.row(r));
        }
        probs.push(p);
    }
    let concat = Tensor::from_vec(&[seq, width], concat)?;
    let out = attn.o.forward(&concat)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        probs,
        concat,
        out,
    })
}

/// Two linear maps with GELU between, `width → ffn_mult·width → width`.
pub fn ffn_sublayer(x: &Tensor, ffn: &FeedForward) -> Result<Tensor> {
    ffn.down.forward(&ffn.up.forward(x)?.gelu()?)
}

impl Dit {
    /// Random initialization from `Purpose::Init` sub-streams of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let hidden = w * config.ffn_mult;
        let mut rng = Rng::substream(seed, Purpose::Init, 0);
        let time = Linear::init(&mut rng, w, w, 1.0);
        let input = Linear::init(&mut rng, 2 * config.in_dim, w, 1.0);
        let pos = rng.normal_tensor(&[config.seq_len, w], 0.02);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut rng = Rng::substream(seed, Purpose::Init, 1 + i as u32);
            let mut modulation = Linear::init(&mut rng, w, 6 * w, 0.1);
            // Gates start at 1 so every block contributes from the first step.
            for kind in [LayerKind::Attn, LayerKind::Ffn] {
                let start = (3 * kind as usize + 2) * w;
                modulation.b.data_mut()[start..start + w].fill(1.0);
            }
            blocks.push(Block {
                modulation,
                attn: Attention {
                    q: Linear::init(&mut rng, w, w, 1.0),
                    k: Linear::init(&mut rng, w, w, 1.0).w,
                    v: Linear::init(&mut rng, w, w, 1.0),
                    o: Linear::init(&mut rng, w, w, 0.5),
                },
                ffn: FeedForward {
                    up: Linear::init(&mut rng, w, hidden, 1.0),
                    down: Linear::init(&mut rng, hidden, w, 0.5),
                },
            });
        }
        let mut rng = Rng::substream(seed, Purpose::Init, 1 + config.depth as u32);
        Ok(Self {
            config,
            time,
            input,
            pos,
            blocks,
            final_gamma: Tensor::full(&[w], 1.0),
            final_beta: Tensor::zeros(&[w]),
            output: Linear::init(&mut rng, w, config.in_dim, 0.1),
        })
    }

    /// All-zero parameters with the layout of `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let hidden = w * config.ffn_mult;
        let block = Block {
            modulation: Linear::zeros(w, 6 * w),
            attn: Attention {
                q: Linear::zeros(w, w),
                k: Tensor::zeros(&[w, w]),
                v: Linear::zeros(w, w),
                o: Linear::zeros(w, w),
            },
            ffn: FeedForward {
                up: Linear::zeros(w, hidden),
                down: Linear::zeros(hidden, w),
            },
        };
        Ok(Self {
            config,
            time: Linear::zeros(w, w),
            input: Linear::zeros(2 * config.in_dim, w),
            pos: Tensor::zeros(&[config.seq_len, w]),
            blocks: vec![block; config.depth],
            final_gamma: Tensor::zeros(&[w]),
            final_beta: Tensor::zeros(&[w]),
            output: Linear::zeros(w, config.in_dim),
        })
    }

    /// Parameter names in the canonical order shared by
    /// [`tensors`](Self::tensors) and [`tensors_mut`](Self::tensors_mut).
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["time.w", "time.b", "input.w", "input.b", "pos"]
            .iter()
            .map(|s| String::from(*s))
            .collect();
        for i in 0..self.blocks.len() {
            for part in [
                "mod.w", "mod.b", "attn.q.w", "attn.q.b", "attn.k.w", "attn.v.w",
                "attn.v.b", "attn.o.w", "attn.o.b", "ffn.up.w", "ffn.up.b", "ffn.down.w",
                "ffn.down.b",
            ] {
                names.push(format!("blocks.{i}.{part}"));
            }
        }
        for s in ["final.gamma", "final.beta", "output.w", "output.b"] {
            names.push(String::from(s));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.time.w, &self.time.b, &self.input.w, &self.input.b, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.modulation.w,
                &b.modulation.b,
                &b.attn.q.w,
                &b.attn.q.b,
                &b.attn.k,
                &b.attn.v.w,
                &b.attn.v.b,
                &b.attn.o.w,
                &b.attn.o.b,
                &b.ffn.up.w,
                &b.ffn.up.b,
                &b.ffn.down.w,
                &b.ffn.down.b,
            ]);
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.output.w, &self.output.b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.time.w,
            &mut self.time.b,
            &mut self.input.w,
            &mut self.input.b,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.modulation.w,
                &mut b.modulation.b,
                &mut b.attn.q.w,
                &mut b.attn.q.b,
                &mut b.attn.k,
                &mut b.attn.v.w,
                &mut b.attn.v.b,
                &mut b.attn.o.w,
                &mut b.attn.o.b,
                &mut b.ffn.up.w,
                &mut b.ffn.up.b,
                &mut b.ffn.down.w,
                &mut b.ffn.down.b,
            ]);
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.output.w,
            &mut self.output.b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Sinusoidal features of `t` through the learned projection and SiLU.
    pub fn timestep_embed(&self, t: f32) -> Result<Tensor> {
        let features = sinusoidal_features(t, self.config.width)?;
        Ok(self.time.forward(&features)?.silu()?)
    }

    pub(crate) fn check_input(&self, x: &Tensor, name: &'static str) -> Result<()> {
        let want = self.config.sample_shape();
        if x.dims() != want {
            return Err(Error::Config(format!(
                "{name} has shape {}, model expects [{}×{}]",
                x.shape(),
                want[0],
                want[1]
            )));
        }
        Ok(())
    }

    /// Condition actually fed to the network: zeros on the unconditional branch.
    pub(crate) fn branch_cond(&self, cond: &Tensor, branch: Branch) -> Tensor {
        match branch {
            Branch::Cond => cond.clone(),
            Branch::Uncond => Tensor::zeros_like(cond),
        }
    }

    pub(crate) fn embed_input(&self, x: &Tensor, cond: &Tensor, branch: Branch) -> Result<Tensor> {
        self.check_input(x, "x")?;
        self.check_input(cond, "cond")?;
        let joined = x.concat_cols(&self.branch_cond(cond, branch))?;
        Ok(self.input.forward(&joined)?.add(&self.pos)?)
    }

    pub(crate) fn modulation(&self, block: usize, t_embed: &Tensor) -> Result<Modulation> {
        Ok(Modulation {
            raw: self.blocks[block].modulation.forward(t_embed)?,
            width: self.config.width,
        })
    }

    /// Gated output of one sublayer: the exact tensor the residual adds.
    pub(crate) fn sublayer_output(
        &self,
        h: &Tensor,
        block: usize,
        kind: LayerKind,
        m: &Modulation,
    ) -> Result<Tensor> {
        let (_, input) = modulate(h, m.shift(kind), m.scale(kind))?;
        let raw = match kind {
            LayerKind::Attn => attn_sublayer(&input, &self.blocks[block].attn, self.config.heads)?,
            LayerKind::Ffn => ffn_sublayer(&input, &self.blocks[block].ffn)?,
        };
        apply_gate(&raw, m.gate(kind))
    }

    /// One block with hooks before each residual add.
    pub fn block_forward(
        &self,
        h: &Tensor,
        t_embed: &Tensor,
        block: usize,
        branch: Branch,
        step: usize,
        hook: &mut dyn SublayerHook,
    ) -> Result<Tensor> {
        let mut h = h.clone();
        let mut modulation = None;
        for kind in [LayerKind::Attn, LayerKind::Ffn] {
            let layer = LayerId::new(block, kind);
            match hook.reuse(step, layer, branch)? {
                Some(cached) => h.add_assign(cached)?,
                None => {
                    if modulation.is_none() {
                        modulation = Some(self.modulation(block, t_embed)?);
                    }
                    let m = modulation.as_ref().expect("set above");
                    let out = self.sublayer_output(&h, block, kind, m)?;
                    hook.computed(step, layer, branch, &out)?;
                    h.add_assign(&out)?;
                }
            }
        }
        Ok(h)
    }

    pub(crate) fn project_output(&self, h: &Tensor) -> Result<Tensor> {
        let normed = h.layer_norm(&self.final_gamma, &self.final_beta, NORM_EPS)?;
        self.output.forward(&normed)
    }

    /// Velocity field `v(x, t, cond)` for one guidance branch, routing every
    /// sublayer through `hook`. `step` is the sampler step index the hook
    /// uses to look up its schedule.
    pub fn forward(
        &self,
        x: &Tensor,
        t: f32,
        cond: &Tensor,
        branch: Branch,
        step: usize,
        hook: &mut dyn SublayerHook,
    ) -> Result<Tensor> {
        let t_embed = self.timestep_embed(t)?;
        let mut h = self.embed_input(x, cond, branch)?;
        for block in 0..self.config.depth {
            h = self.block_forward(&h, &t_embed, block, branch, step, hook)?;
        }
        self.project_output(&h)
    }

    /// Forward pass with no cache machinery at all; the reference the hooked
    /// path must reproduce bit for bit.
    pub fn forward_plain(&self, x: &Tensor, t: f32, cond: &Tensor, branch: Branch) -> Result<Tensor> {
        let t_embed = self.timestep_embed(t)?;
        let mut h = self.embed_input(x, cond, branch)?;
        for block in 0..self.config.depth {
            let m = self.modulation(block, &t_embed)?;
            let attn_out = self.sublayer_output(&h, block, LayerKind::Attn, &m)?;
            h.add_assign(&attn_out)?;
            let ffn_out = self.sublayer_output(&h, block, LayerKind::Ffn, &m)?;
            h.add_assign(&ffn_out)?;
        }
        self.project_output(&h)
    }
}
