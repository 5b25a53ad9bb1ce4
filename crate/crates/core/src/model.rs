//! The two modality encoders, the shared joint layer with per-pass layer
//! norms, global and register tokens, the joint decoder, and the downstream
//! heads built on top of them.
//!
//! The encoders are independent transformer stacks of identical architecture.
//! The joint layer is a single transformer block run three times per step —
//! audio alone, visual alone, and the concatenation of both — sharing its
//! attention and MLP weights across passes while each pass applies its own
//! layer norms. Global tokens carry the contrastive objective; register
//! tokens ride along as computation buffers; neither enters the decoder.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokenizer::{embed, sincos_table, Modality, TokenBatch};

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Architecture {
    pub dim: usize,
    pub enc_depth: usize,
    pub heads: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub n_registers: usize,
    pub use_global_token: bool,
    pub patch: usize,
    pub ln_eps: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            dim: 64,
            enc_depth: 2,
            heads: 4,
            dec_depth: 2,
            dec_dim: 32,
            n_registers: 8,
            use_global_token: true,
            patch: 16,
            ln_eps: 1e-6,
        }
    }
}

impl Architecture {
    /// The paper-scale stack: 11 encoder layers before the 1-layer joint.
    pub fn faithful() -> Self {
        Architecture {
            dim: 768,
            enc_depth: 11,
            heads: 12,
            dec_dim: 384,
            ..Architecture::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim must be a positive multiple of 4, got {}", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide dim {}", self.heads, self.dim)));
        }
        if self.dec_dim == 0 || self.dec_dim % 4 != 0 || self.dec_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dec_dim {} must be a positive multiple of 4 divisible by heads {}",
                self.dec_dim, self.heads
            )));
        }
        if self.enc_depth == 0 {
            return Err(Error::Config("enc_depth must be at least 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }

    /// Tokens prepended before the patch tokens of each modality.
    pub fn prefix_len(&self) -> usize {
        usize::from(self.use_global_token) + self.n_registers
    }
}

/// Input geometry the model is built for.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataShape {
    pub mel_bins: usize,
    pub s_length: usize,
    pub frame_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl DataShape {
    pub fn validate(&self, patch: usize) -> Result<()> {
        for (name, v) in [
            ("mel_bins", self.mel_bins),
            ("s_length", self.s_length),
            ("frame_h", self.frame_h),
            ("frame_w", self.frame_w),
        ] {
            if v == 0 || v % patch != 0 {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a positive multiple of patch size {patch}"
                )));
            }
        }
        if self.frame_channels == 0 {
            return Err(Error::Config("frame_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn audio_grid(&self, patch: usize) -> (usize, usize) {
        (self.mel_bins / patch, self.s_length / patch)
    }

    pub fn visual_grid(&self, patch: usize) -> (usize, usize) {
        (self.frame_h / patch, self.frame_w / patch)
    }

    pub fn audio_patch_len(&self, patch: usize) -> usize {
        patch * patch
    }

    pub fn visual_patch_len(&self, patch: usize) -> usize {
        patch * patch * self.frame_channels
    }
}

// ── Parameter containers ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn init(dim: usize) -> Self {
        LayerNormParams { gain: Tensor::full(vec![1, dim], 1.0), bias: Tensor::zeros(vec![1, dim]) }
    }
}

/// The two layer norms of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct NormPair {
    pub pre_attn: LayerNormParams,
    pub pre_mlp: LayerNormParams,
}

impl NormPair {
    fn init(dim: usize) -> Self {
        NormPair { pre_attn: LayerNormParams::init(dim), pre_mlp: LayerNormParams::init(dim) }
    }
}

/// Attention and MLP weights of one block, without the norms so the joint
/// layer can share these across its three passes.
#[derive(Clone, Debug)]
pub struct BlockCore {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl BlockCore {
    fn init(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let hidden = 4 * dim;
        let w = |r, c, rng: &mut ChaCha20Rng| Tensor::randn(vec![r, c], 0.02, rng);
        BlockCore {
            wq: w(dim, dim, rng),
            bq: Tensor::zeros(vec![1, dim]),
            wk: w(dim, dim, rng),
            bk: Tensor::zeros(vec![1, dim]),
            wv: w(dim, dim, rng),
            bv: Tensor::zeros(vec![1, dim]),
            wo: w(dim, dim, rng),
            bo: Tensor::zeros(vec![1, dim]),
            w_up: w(dim, hidden, rng),
            b_up: Tensor::zeros(vec![1, hidden]),
            w_down: w(hidden, dim, rng),
            b_down: Tensor::zeros(vec![1, dim]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norms: NormPair,
    pub core: BlockCore,
}

impl Block {
    fn init(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        Block { norms: NormPair::init(dim), core: BlockCore::init(dim, rng) }
    }
}

/// One transformer block with shared weights and three norm sets, one per
/// forward pass.
#[derive(Clone, Debug)]
pub struct JointLayer {
    pub core: BlockCore,
    pub norms_audio: NormPair,
    pub norms_visual: NormPair,
    pub norms_joint: NormPair,
}

impl JointLayer {
    fn init(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        JointLayer {
            core: BlockCore::init(dim, rng),
            norms_audio: NormPair::init(dim),
            norms_visual: NormPair::init(dim),
            norms_joint: NormPair::init(dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub w: Tensor,
    pub b: Tensor,
    pub modality: Tensor,
}

impl PatchEmbed {
    fn init(patch_len: usize, dim: usize, rng: &mut ChaCha20Rng) -> Self {
        PatchEmbed {
            w: Tensor::randn(vec![patch_len, dim], 0.02, rng),
            b: Tensor::zeros(vec![1, dim]),
            modality: Tensor::randn(vec![1, dim], 0.02, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub mask_token: Tensor,
    pub modality_audio: Tensor,
    pub modality_visual: Tensor,
    pub blocks: Vec<Block>,
    pub head_audio_w: Tensor,
    pub head_audio_b: Tensor,
    pub head_visual_w: Tensor,
    pub head_visual_b: Tensor,
}

impl Decoder {
    fn init(arch: &Architecture, shapes: &DataShape, rng: &mut ChaCha20Rng) -> Self {
        let d = arch.dec_dim;
        Decoder {
            proj_w: Tensor::randn(vec![arch.dim, d], 0.02, rng),
            proj_b: Tensor::zeros(vec![1, d]),
            mask_token: Tensor::randn(vec![1, d], 0.02, rng),
            modality_audio: Tensor::randn(vec![1, d], 0.02, rng),
            modality_visual: Tensor::randn(vec![1, d], 0.02, rng),
            blocks: (0..arch.dec_depth).map(|_| Block::init(d, rng)).collect(),
            head_audio_w: Tensor::randn(vec![d, shapes.audio_patch_len(arch.patch)], 0.02, rng),
            head_audio_b: Tensor::zeros(vec![1, shapes.audio_patch_len(arch.patch)]),
            head_visual_w: Tensor::randn(vec![d, shapes.visual_patch_len(arch.patch)], 0.02, rng),
            head_visual_b: Tensor::zeros(vec![1, shapes.visual_patch_len(arch.patch)]),
        }
    }
}

/// Probe-time classification head: CLS token, a two-layer transformer and a
/// linear projection of the CLS output.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub width: usize,
    pub classes: usize,
    pub cls: Tensor,
    pub blocks: Vec<Block>,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl ClassifierHead {
    pub fn init(width: usize, classes: usize, rng: &mut ChaCha20Rng) -> Self {
        ClassifierHead {
            width,
            classes,
            cls: Tensor::randn(vec![1, width], 0.02, rng),
            blocks: (0..2).map(|_| Block::init(width, rng)).collect(),
            w_out: Tensor::randn(vec![width, classes], 0.02, rng),
            b_out: Tensor::zeros(vec![1, classes]),
        }
    }
}

/// Every learnable parameter of the model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub arch: Architecture,
    pub shapes: DataShape,
    pub embed_audio: PatchEmbed,
    pub embed_visual: PatchEmbed,
    pub encoder_audio: Vec<Block>,
    pub encoder_visual: Vec<Block>,
    pub joint: JointLayer,
    pub decoder: Decoder,
    pub global_audio: Option<Tensor>,
    pub global_visual: Option<Tensor>,
    pub registers_audio: Option<Tensor>,
    pub registers_visual: Option<Tensor>,
    pub classifier: Option<ClassifierHead>,
}

impl ModelState {
    pub fn init(arch: Architecture, shapes: DataShape, rng: &mut ChaCha20Rng) -> Result<ModelState> {
        arch.validate()?;
        shapes.validate(arch.patch)?;
        let dim = arch.dim;
        let token = |rng: &mut ChaCha20Rng| Tensor::randn(vec![1, dim], 0.02, rng);
        let regs = |n: usize, rng: &mut ChaCha20Rng| {
            (n > 0).then(|| Tensor::randn(vec![n, dim], 0.02, rng))
        };
        Ok(ModelState {
            embed_audio: PatchEmbed::init(shapes.audio_patch_len(arch.patch), dim, rng),
            embed_visual: PatchEmbed::init(shapes.visual_patch_len(arch.patch), dim, rng),
            encoder_audio: (0..arch.enc_depth).map(|_| Block::init(dim, rng)).collect(),
            encoder_visual: (0..arch.enc_depth).map(|_| Block::init(dim, rng)).collect(),
            joint: JointLayer::init(dim, rng),
            decoder: Decoder::init(&arch, &shapes, rng),
            global_audio: arch.use_global_token.then(|| token(rng)),
            global_visual: arch.use_global_token.then(|| token(rng)),
            registers_audio: regs(arch.n_registers, rng),
            registers_visual: regs(arch.n_registers, rng),
            classifier: None,
            arch,
            shapes,
        })
    }

    /// Visit every parameter with a stable, unique name. Checkpoints, the
    /// optimizer and the gradient checker all iterate through here, so the
    /// order must stay deterministic.
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &Tensor)) {
        let visit_block = |prefix: &str, b: &Block, f: &mut dyn FnMut(&str, &Tensor)| {
            visit_norms(prefix, &b.norms, f);
            visit_core(prefix, &b.core, f);
        };
        f("embed_audio.w", &self.embed_audio.w);
        f("embed_audio.b", &self.embed_audio.b);
        f("embed_audio.modality", &self.embed_audio.modality);
        f("embed_visual.w", &self.embed_visual.w);
        f("embed_visual.b", &self.embed_visual.b);
        f("embed_visual.modality", &self.embed_visual.modality);
        for (i, b) in self.encoder_audio.iter().enumerate() {
            visit_block(&format!("encoder_audio.{i}"), b, f);
        }
        for (i, b) in self.encoder_visual.iter().enumerate() {
            visit_block(&format!("encoder_visual.{i}"), b, f);
        }
        visit_core("joint", &self.joint.core, f);
        visit_norms("joint.ln_audio", &self.joint.norms_audio, f);
        visit_norms("joint.ln_visual", &self.joint.norms_visual, f);
        visit_norms("joint.ln_joint", &self.joint.norms_joint, f);
        f("decoder.proj_w", &self.decoder.proj_w);
        f("decoder.proj_b", &self.decoder.proj_b);
        f("decoder.mask_token", &self.decoder.mask_token);
        f("decoder.modality_audio", &self.decoder.modality_audio);
        f("decoder.modality_visual", &self.decoder.modality_visual);
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            visit_block(&format!("decoder.{i}"), b, f);
        }
        f("decoder.head_audio_w", &self.decoder.head_audio_w);
        f("decoder.head_audio_b", &self.decoder.head_audio_b);
        f("decoder.head_visual_w", &self.decoder.head_visual_w);
        f("decoder.head_visual_b", &self.decoder.head_visual_b);
        if let Some(t) = &self.global_audio {
            f("global_audio", t);
        }
        if let Some(t) = &self.global_visual {
            f("global_visual", t);
        }
        if let Some(t) = &self.registers_audio {
            f("registers_audio", t);
        }
        if let Some(t) = &self.registers_visual {
            f("registers_visual", t);
        }
        if let Some(head) = &self.classifier {
            f("classifier.cls", &head.cls);
            for (i, b) in head.blocks.iter().enumerate() {
                visit_block(&format!("classifier.{i}"), b, f);
            }
            f("classifier.w_out", &head.w_out);
            f("classifier.b_out", &head.b_out);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        let visit_block =
            |prefix: &str, b: &mut Block, f: &mut dyn FnMut(&str, &mut Tensor)| {
                visit_norms_mut(prefix, &mut b.norms, f);
                visit_core_mut(prefix, &mut b.core, f);
            };
        f("embed_audio.w", &mut self.embed_audio.w);
        f("embed_audio.b", &mut self.embed_audio.b);
        f("embed_audio.modality", &mut self.embed_audio.modality);
        f("embed_visual.w", &mut self.embed_visual.w);
        f("embed_visual.b", &mut self.embed_visual.b);
        f("embed_visual.modality", &mut self.embed_visual.modality);
        for (i, b) in self.encoder_audio.iter_mut().enumerate() {
            visit_block(&format!("encoder_audio.{i}"), b, f);
        }
        for (i, b) in self.encoder_visual.iter_mut().enumerate() {
            visit_block(&format!("encoder_visual.{i}"), b, f);
        }
        visit_core_mut("joint", &mut self.joint.core, f);
        visit_norms_mut("joint.ln_audio", &mut self.joint.norms_audio, f);
        visit_norms_mut("joint.ln_visual", &mut self.joint.norms_visual, f);
        visit_norms_mut("joint.ln_joint", &mut self.joint.norms_joint, f);
        f("decoder.proj_w", &mut self.decoder.proj_w);
        f("decoder.proj_b", &mut self.decoder.proj_b);
        f("decoder.mask_token", &mut self.decoder.mask_token);
        f("decoder.modality_audio", &mut self.decoder.modality_audio);
        f("decoder.modality_visual", &mut self.decoder.modality_visual);
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            visit_block(&format!("decoder.{i}"), b, f);
        }
        f("decoder.head_audio_w", &mut self.decoder.head_audio_w);
        f("decoder.head_audio_b", &mut self.decoder.head_audio_b);
        f("decoder.head_visual_w", &mut self.decoder.head_visual_w);
        f("decoder.head_visual_b", &mut self.decoder.head_visual_b);
        if let Some(t) = &mut self.global_audio {
            f("global_audio", t);
        }
        if let Some(t) = &mut self.global_visual {
            f("global_visual", t);
        }
        if let Some(t) = &mut self.registers_audio {
            f("registers_audio", t);
        }
        if let Some(t) = &mut self.registers_visual {
            f("registers_visual", t);
        }
        if let Some(head) = &mut self.classifier {
            f("classifier.cls", &mut head.cls);
            for (i, b) in head.blocks.iter_mut().enumerate() {
                visit_block(&format!("classifier.{i}"), b, f);
            }
            f("classifier.w_out", &mut head.w_out);
            f("classifier.b_out", &mut head.b_out);
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

fn visit_norms(prefix: &str, n: &NormPair, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.ln1.gain"), &n.pre_attn.gain);
    f(&format!("{prefix}.ln1.bias"), &n.pre_attn.bias);
    f(&format!("{prefix}.ln2.gain"), &n.pre_mlp.gain);
    f(&format!("{prefix}.ln2.bias"), &n.pre_mlp.bias);
}

fn visit_norms_mut(prefix: &str, n: &mut NormPair, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.ln1.gain"), &mut n.pre_attn.gain);
    f(&format!("{prefix}.ln1.bias"), &mut n.pre_attn.bias);
    f(&format!("{prefix}.ln2.gain"), &mut n.pre_mlp.gain);
    f(&format!("{prefix}.ln2.bias"), &mut n.pre_mlp.bias);
}

fn visit_core(prefix: &str, c: &BlockCore, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.wq"), &c.wq);
    f(&format!("{prefix}.bq"), &c.bq);
    f(&format!("{prefix}.wk"), &c.wk);
    f(&format!("{prefix}.bk"), &c.bk);
    f(&format!("{prefix}.wv"), &c.wv);
    f(&format!("{prefix}.bv"), &c.bv);
    f(&format!("{prefix}.wo"), &c.wo);
    f(&format!("{prefix}.bo"), &c.bo);
    f(&format!("{prefix}.w_up"), &c.w_up);
    f(&format!("{prefix}.b_up"), &c.b_up);
    f(&format!("{prefix}.w_down"), &c.w_down);
    f(&format!("{prefix}.b_down"), &c.b_down);
}

fn visit_core_mut(prefix: &str, c: &mut BlockCore, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.wq"), &mut c.wq);
    f(&format!("{prefix}.bq"), &mut c.bq);
    f(&format!("{prefix}.wk"), &mut c.wk);
    f(&format!("{prefix}.bk"), &mut c.bk);
    f(&format!("{prefix}.wv"), &mut c.wv);
    f(&format!("{prefix}.bv"), &mut c.bv);
    f(&format!("{prefix}.wo"), &mut c.wo);
    f(&format!("{prefix}.bo"), &mut c.bo);
    f(&format!("{prefix}.w_up"), &mut c.w_up);
    f(&format!("{prefix}.b_up"), &mut c.b_up);
    f(&format!("{prefix}.w_down"), &mut c.w_down);
    f(&format!("{prefix}.b_down"), &mut c.b_down);
}

// ── Tape bindings ───────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct LayerNormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}

#[derive(Clone, Copy)]
pub struct NormPairNodes {
    pub pre_attn: LayerNormNodes,
    pub pre_mlp: LayerNormNodes,
}

#[derive(Clone, Copy)]
pub struct BlockCoreNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub w_up: NodeId,
    pub b_up: NodeId,
    pub w_down: NodeId,
    pub b_down: NodeId,
}

#[derive(Clone, Copy)]
pub struct BlockNodes {
    pub norms: NormPairNodes,
    pub core: BlockCoreNodes,
}

pub struct JointNodes {
    pub core: BlockCoreNodes,
    pub norms_audio: NormPairNodes,
    pub norms_visual: NormPairNodes,
    pub norms_joint: NormPairNodes,
}

pub struct PatchEmbedNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub modality: NodeId,
}

pub struct DecoderNodes {
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub mask_token: NodeId,
    pub modality_audio: NodeId,
    pub modality_visual: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub head_audio_w: NodeId,
    pub head_audio_b: NodeId,
    pub head_visual_w: NodeId,
    pub head_visual_b: NodeId,
}

pub struct ClassifierHeadNodes {
    pub cls: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

/// The model's parameters bound onto a tape as differentiable leaves, plus
/// the constant positional tables the forward passes share.
pub struct ModelNodes {
    pub embed_audio: PatchEmbedNodes,
    pub embed_visual: PatchEmbedNodes,
    pub encoder_audio: Vec<BlockNodes>,
    pub encoder_visual: Vec<BlockNodes>,
    pub joint: JointNodes,
    pub decoder: DecoderNodes,
    pub global_audio: Option<NodeId>,
    pub global_visual: Option<NodeId>,
    pub registers_audio: Option<NodeId>,
    pub registers_visual: Option<NodeId>,
    pub pos_audio: NodeId,
    pub pos_visual: NodeId,
    pub pos_audio_dec: NodeId,
    pub pos_visual_dec: NodeId,
    /// (name, node) pairs for every bound parameter, in visitor order.
    pub names: Vec<(String, NodeId)>,
}

fn bind_norms(tape: &mut Tape, prefix: &str, n: &NormPair, names: &mut Vec<(String, NodeId)>) -> NormPairNodes {
    let gain1 = tape.var(n.pre_attn.gain.clone());
    let bias1 = tape.var(n.pre_attn.bias.clone());
    let gain2 = tape.var(n.pre_mlp.gain.clone());
    let bias2 = tape.var(n.pre_mlp.bias.clone());
    names.push((format!("{prefix}.ln1.gain"), gain1));
    names.push((format!("{prefix}.ln1.bias"), bias1));
    names.push((format!("{prefix}.ln2.gain"), gain2));
    names.push((format!("{prefix}.ln2.bias"), bias2));
    NormPairNodes {
        pre_attn: LayerNormNodes { gain: gain1, bias: bias1 },
        pre_mlp: LayerNormNodes { gain: gain2, bias: bias2 },
    }
}

fn bind_core(tape: &mut Tape, prefix: &str, c: &BlockCore, names: &mut Vec<(String, NodeId)>) -> BlockCoreNodes {
    let one = |field: &str, t: &Tensor, tape: &mut Tape, names: &mut Vec<(String, NodeId)>| {
        let id = tape.var(t.clone());
        names.push((format!("{prefix}.{field}"), id));
        id
    };
    BlockCoreNodes {
        wq: one("wq", &c.wq, tape, names),
        bq: one("bq", &c.bq, tape, names),
        wk: one("wk", &c.wk, tape, names),
        bk: one("bk", &c.bk, tape, names),
        wv: one("wv", &c.wv, tape, names),
        bv: one("bv", &c.bv, tape, names),
        wo: one("wo", &c.wo, tape, names),
        bo: one("bo", &c.bo, tape, names),
        w_up: one("w_up", &c.w_up, tape, names),
        b_up: one("b_up", &c.b_up, tape, names),
        w_down: one("w_down", &c.w_down, tape, names),
        b_down: one("b_down", &c.b_down, tape, names),
    }
}

fn bind_block(tape: &mut Tape, prefix: &str, b: &Block, names: &mut Vec<(String, NodeId)>) -> BlockNodes {
    BlockNodes {
        norms: bind_norms(tape, prefix, &b.norms, names),
        core: bind_core(tape, prefix, &b.core, names),
    }
}

pub fn bind_classifier(
    tape: &mut Tape,
    head: &ClassifierHead,
    names: &mut Vec<(String, NodeId)>,
) -> ClassifierHeadNodes {
    let cls = tape.var(head.cls.clone());
    names.push(("classifier.cls".to_string(), cls));
    let blocks = head
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(tape, &format!("classifier.{i}"), b, names))
        .collect();
    let w_out = tape.var(head.w_out.clone());
    let b_out = tape.var(head.b_out.clone());
    names.push(("classifier.w_out".to_string(), w_out));
    names.push(("classifier.b_out".to_string(), b_out));
    ClassifierHeadNodes { cls, blocks, w_out, b_out }
}

/// Bind every model parameter onto the tape. Called once per training step
/// or evaluation forward; all samples in a batch share the bound leaves so
/// gradients accumulate across the batch.
pub fn bind_model(tape: &mut Tape, state: &ModelState) -> Result<ModelNodes> {
    let mut names = Vec::new();
    let bind_embed = |tape: &mut Tape, prefix: &str, e: &PatchEmbed, names: &mut Vec<(String, NodeId)>| {
        let w = tape.var(e.w.clone());
        let b = tape.var(e.b.clone());
        let modality = tape.var(e.modality.clone());
        names.push((format!("{prefix}.w"), w));
        names.push((format!("{prefix}.b"), b));
        names.push((format!("{prefix}.modality"), modality));
        PatchEmbedNodes { w, b, modality }
    };
    let embed_audio = bind_embed(tape, "embed_audio", &state.embed_audio, &mut names);
    let embed_visual = bind_embed(tape, "embed_visual", &state.embed_visual, &mut names);
    let encoder_audio = state
        .encoder_audio
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(tape, &format!("encoder_audio.{i}"), b, &mut names))
        .collect();
    let encoder_visual = state
        .encoder_visual
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(tape, &format!("encoder_visual.{i}"), b, &mut names))
        .collect();
    let joint = JointNodes {
        core: bind_core(tape, "joint", &state.joint.core, &mut names),
        norms_audio: bind_norms(tape, "joint.ln_audio", &state.joint.norms_audio, &mut names),
        norms_visual: bind_norms(tape, "joint.ln_visual", &state.joint.norms_visual, &mut names),
        norms_joint: bind_norms(tape, "joint.ln_joint", &state.joint.norms_joint, &mut names),
    };
    let d = &state.decoder;
    let one = |name: &str, t: &Tensor, tape: &mut Tape, names: &mut Vec<(String, NodeId)>| {
        let id = tape.var(t.clone());
        names.push((name.to_string(), id));
        id
    };
    let decoder = DecoderNodes {
        proj_w: one("decoder.proj_w", &d.proj_w, tape, &mut names),
        proj_b: one("decoder.proj_b", &d.proj_b, tape, &mut names),
        mask_token: one("decoder.mask_token", &d.mask_token, tape, &mut names),
        modality_audio: one("decoder.modality_audio", &d.modality_audio, tape, &mut names),
        modality_visual: one("decoder.modality_visual", &d.modality_visual, tape, &mut names),
        blocks: d
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| bind_block(tape, &format!("decoder.{i}"), b, &mut names))
            .collect(),
        head_audio_w: one("decoder.head_audio_w", &d.head_audio_w, tape, &mut names),
        head_audio_b: one("decoder.head_audio_b", &d.head_audio_b, tape, &mut names),
        head_visual_w: one("decoder.head_visual_w", &d.head_visual_w, tape, &mut names),
        head_visual_b: one("decoder.head_visual_b", &d.head_visual_b, tape, &mut names),
    };
    let opt = |name: &str, t: &Option<Tensor>, tape: &mut Tape, names: &mut Vec<(String, NodeId)>| {
        t.as_ref().map(|t| {
            let id = tape.var(t.clone());
            names.push((name.to_string(), id));
            id
        })
    };
    let global_audio = opt("global_audio", &state.global_audio, tape, &mut names);
    let global_visual = opt("global_visual", &state.global_visual, tape, &mut names);
    let registers_audio = opt("registers_audio", &state.registers_audio, tape, &mut names);
    let registers_visual = opt("registers_visual", &state.registers_visual, tape, &mut names);

    let patch = state.arch.patch;
    let dim = state.arch.dim;
    let dec_dim = state.arch.dec_dim;
    let pos_audio = tape.constant(sincos_table(state.shapes.audio_grid(patch), dim)?);
    let pos_visual = tape.constant(sincos_table(state.shapes.visual_grid(patch), dim)?);
    let pos_audio_dec = tape.constant(sincos_table(state.shapes.audio_grid(patch), dec_dim)?);
    let pos_visual_dec = tape.constant(sincos_table(state.shapes.visual_grid(patch), dec_dim)?);

    Ok(ModelNodes {
        embed_audio,
        embed_visual,
        encoder_audio,
        encoder_visual,
        joint,
        decoder,
        global_audio,
        global_visual,
        registers_audio,
        registers_visual,
        pos_audio,
        pos_visual,
        pos_audio_dec,
        pos_visual_dec,
        names,
    })
}

// ── Forward passes ──────────────────────────────────────────────────

fn attention(tape: &mut Tape, x: NodeId, core: &BlockCoreNodes, heads: usize) -> Result<NodeId> {
    let dim = tape.value(x).cols();
    let dh = dim / heads;
    let q = tape.linear(x, core.wq, core.bq)?;
    let k = tape.linear(x, core.wk, core.bk)?;
    let v = tape.linear(x, core.wv, core.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_row(scaled, 1.0)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(1, &outs)?;
    tape.linear(merged, core.wo, core.bo)
}

/// Pre-norm transformer block with an explicit norm set, so the joint layer
/// can reuse one core under different norms.
pub fn block_with_norms(
    tape: &mut Tape,
    x: NodeId,
    core: &BlockCoreNodes,
    norms: &NormPairNodes,
    heads: usize,
    eps: f64,
) -> Result<NodeId> {
    let n1 = tape.layer_norm(x, norms.pre_attn.gain, norms.pre_attn.bias, eps)?;
    let att = attention(tape, n1, core, heads)?;
    let h = tape.add(x, att)?;
    let n2 = tape.layer_norm(h, norms.pre_mlp.gain, norms.pre_mlp.bias, eps)?;
    let up = tape.linear(n2, core.w_up, core.b_up)?;
    let act = tape.gelu(up);
    let down = tape.linear(act, core.w_down, core.b_down)?;
    tape.add(h, down)
}

pub fn block_forward(
    tape: &mut Tape,
    x: NodeId,
    blk: &BlockNodes,
    heads: usize,
    eps: f64,
) -> Result<NodeId> {
    block_with_norms(tape, x, &blk.core, &blk.norms, heads, eps)
}

/// Outputs of one (frame, window) forward through the encoders and the
/// three-pass joint layer. All handles index into the tape that ran the
/// forward pass.
pub struct EncodedPair {
    pub g_audio: Option<NodeId>,
    pub g_visual: Option<NodeId>,
    pub regs_audio: Option<NodeId>,
    pub regs_visual: Option<NodeId>,
    /// Patch-token outputs of the single-modality joint passes.
    pub h_audio: NodeId,
    pub h_visual: NodeId,
    /// Patch-token outputs of the concatenated third pass, feeding the decoder.
    pub joint_audio: NodeId,
    pub joint_visual: NodeId,
    pub visual_fully_unmasked: bool,
}

/// Run both encoders and the three joint passes for one sample.
pub fn encode(
    tape: &mut Tape,
    nodes: &ModelNodes,
    arch: &Architecture,
    batch_audio: &TokenBatch,
    batch_visual: &TokenBatch,
) -> Result<EncodedPair> {
    if batch_audio.modality != Modality::Audio || batch_visual.modality != Modality::Visual {
        return Err(Error::Input("encode expects (audio, visual) batches in that order".into()));
    }
    let run_encoder = |tape: &mut Tape,
                       batch: &TokenBatch,
                       emb: &PatchEmbedNodes,
                       pos: NodeId,
                       global: Option<NodeId>,
                       registers: Option<NodeId>,
                       blocks: &[BlockNodes]|
     -> Result<NodeId> {
        let tokens = embed(tape, batch, emb.w, emb.b, emb.modality, pos)?;
        let mut parts = Vec::new();
        if let Some(g) = global {
            parts.push(g);
        }
        if let Some(r) = registers {
            parts.push(r);
        }
        parts.push(tokens);
        let mut seq = if parts.len() == 1 { parts[0] } else { tape.concat(0, &parts)? };
        for blk in blocks {
            seq = block_forward(tape, seq, blk, arch.heads, arch.ln_eps)?;
        }
        Ok(seq)
    };

    let z_audio = run_encoder(
        tape,
        batch_audio,
        &nodes.embed_audio,
        nodes.pos_audio,
        nodes.global_audio,
        nodes.registers_audio,
        &nodes.encoder_audio,
    )?;
    let z_visual = run_encoder(
        tape,
        batch_visual,
        &nodes.embed_visual,
        nodes.pos_visual,
        nodes.global_visual,
        nodes.registers_visual,
        &nodes.encoder_visual,
    )?;

    let pass_audio = block_with_norms(tape, z_audio, &nodes.joint.core, &nodes.joint.norms_audio, arch.heads, arch.ln_eps)?;
    let pass_visual = block_with_norms(tape, z_visual, &nodes.joint.core, &nodes.joint.norms_visual, arch.heads, arch.ln_eps)?;
    // audio tokens first, then visual; the decoder splits at the same offset
    let cat = tape.concat(0, &[z_audio, z_visual])?;
    let pass_joint = block_with_norms(tape, cat, &nodes.joint.core, &nodes.joint.norms_joint, arch.heads, arch.ln_eps)?;

    let prefix = arch.prefix_len();
    let len_audio = prefix + batch_audio.num_kept();
    let len_visual = prefix + batch_visual.num_kept();
    let has_global = arch.use_global_token;
    let reg_range = (usize::from(has_global), usize::from(has_global) + arch.n_registers);

    let split = |tape: &mut Tape, pass: NodeId, len: usize| -> Result<(Option<NodeId>, Option<NodeId>, NodeId)> {
        let g = if has_global { Some(tape.slice(pass, 0, 0, 1)?) } else { None };
        let regs = if arch.n_registers > 0 {
            Some(tape.slice(pass, 0, reg_range.0, reg_range.1)?)
        } else {
            None
        };
        let patches = tape.slice(pass, 0, prefix, len)?;
        Ok((g, regs, patches))
    };
    let (g_audio, regs_audio, h_audio) = split(tape, pass_audio, len_audio)?;
    let (g_visual, regs_visual, h_visual) = split(tape, pass_visual, len_visual)?;

    let joint_audio = tape.slice(pass_joint, 0, prefix, len_audio)?;
    let joint_visual =
        tape.slice(pass_joint, 0, len_audio + prefix, len_audio + len_visual)?;

    Ok(EncodedPair {
        g_audio,
        g_visual,
        regs_audio,
        regs_visual,
        h_audio,
        h_visual,
        joint_audio,
        joint_visual,
        visual_fully_unmasked: batch_visual.num_masked() == 0,
    })
}

/// Joint-decoder forward: rebuild each full patch grid from the third-pass
/// tokens plus learned mask tokens, run the decoder blocks over the
/// concatenated grids, and predict the patch vector at every masked
/// position. Returns `None` for a modality with nothing masked.
pub fn decode(
    tape: &mut Tape,
    nodes: &ModelNodes,
    arch: &Architecture,
    pair: &EncodedPair,
    batch_audio: &TokenBatch,
    batch_visual: &TokenBatch,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let assemble = |tape: &mut Tape, encoded: NodeId, batch: &TokenBatch, pos_dec: NodeId, modality: NodeId| -> Result<NodeId> {
        let projected = tape.linear(encoded, nodes.decoder.proj_w, nodes.decoder.proj_b)?;
        let k = batch.num_kept();
        let m = batch.num_masked();
        let stacked = if m > 0 {
            let masks = tape.broadcast_rows(nodes.decoder.mask_token, m)?;
            tape.concat(0, &[projected, masks])?
        } else {
            projected
        };
        // row j of the full grid comes from kept slot i or mask slot k + i
        let n = batch.num_patches();
        let mut order = vec![0usize; n];
        for (i, &g) in batch.kept_indices.iter().enumerate() {
            order[g] = i;
        }
        for (i, &g) in batch.masked_indices.iter().enumerate() {
            order[g] = k + i;
        }
        let full = tape.gather_rows(stacked, order)?;
        let with_pos = tape.add(full, pos_dec)?;
        tape.add_bias(with_pos, modality)
    };

    let grid_audio = assemble(
        tape,
        pair.joint_audio,
        batch_audio,
        nodes.pos_audio_dec,
        nodes.decoder.modality_audio,
    )?;
    let grid_visual = assemble(
        tape,
        pair.joint_visual,
        batch_visual,
        nodes.pos_visual_dec,
        nodes.decoder.modality_visual,
    )?;
    let mut seq = tape.concat(0, &[grid_audio, grid_visual])?;
    for blk in &nodes.decoder.blocks {
        seq = block_forward(tape, seq, blk, arch.heads, arch.ln_eps)?;
    }
    let n_audio = batch_audio.num_patches();
    let n_visual = batch_visual.num_patches();
    let out_audio = tape.slice(seq, 0, 0, n_audio)?;
    let out_visual = tape.slice(seq, 0, n_audio, n_audio + n_visual)?;

    let predict = |tape: &mut Tape, out: NodeId, batch: &TokenBatch, w: NodeId, b: NodeId| -> Result<Option<NodeId>> {
        if batch.num_masked() == 0 {
            return Ok(None);
        }
        let rows = tape.gather_rows(out, batch.masked_indices.clone())?;
        Ok(Some(tape.linear(rows, w, b)?))
    };
    let pred_audio = predict(tape, out_audio, batch_audio, nodes.decoder.head_audio_w, nodes.decoder.head_audio_b)?;
    let pred_visual = predict(tape, out_visual, batch_visual, nodes.decoder.head_visual_w, nodes.decoder.head_visual_b)?;
    Ok((pred_audio, pred_visual))
}

/// Mean over the patch tokens of a single-modality joint pass; the pooled
/// representation the baseline architecture uses in place of a global token.
pub fn pooled_repr(tape: &mut Tape, pair: &EncodedPair, modality: Modality) -> Result<NodeId> {
    let h = match modality {
        Modality::Audio => pair.h_audio,
        Modality::Visual => pair.h_visual,
    };
    tape.mean_axis(h, 0)
}

/// Which modality's global-token sequence feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySelect {
    Audio,
    Visual,
    Both,
}

/// Classification head forward over per-timestep global tokens. `seq_audio`
/// and `seq_visual` are (T, dim) value tensors extracted from frozen
/// encoder forwards; with `Both` they are concatenated per timestep.
pub fn classify(
    tape: &mut Tape,
    head: &ClassifierHeadNodes,
    heads: usize,
    eps: f64,
    seq_audio: Option<&Tensor>,
    seq_visual: Option<&Tensor>,
    select: ModalitySelect,
) -> Result<NodeId> {
    let features = match select {
        ModalitySelect::Audio => {
            let a = seq_audio.ok_or_else(|| Error::Input("audio sequence missing".into()))?;
            tape.constant(a.clone())
        }
        ModalitySelect::Visual => {
            let v = seq_visual.ok_or_else(|| Error::Input("visual sequence missing".into()))?;
            tape.constant(v.clone())
        }
        ModalitySelect::Both => {
            let a = seq_audio.ok_or_else(|| Error::Input("audio sequence missing".into()))?;
            let v = seq_visual.ok_or_else(|| Error::Input("visual sequence missing".into()))?;
            if a.rows() != v.rows() {
                return Err(Error::Input(format!(
                    "timestep mismatch: audio {} vs visual {}",
                    a.rows(),
                    v.rows()
                )));
            }
            let an = tape.constant(a.clone());
            let vn = tape.constant(v.clone());
            tape.concat(1, &[vn, an])?
        }
    };
    let width = tape.value(head.cls).cols();
    if tape.value(features).cols() != width {
        return Err(Error::Shape {
            op: "classify",
            detail: format!(
                "feature width {} does not match head width {width}",
                tape.value(features).cols()
            ),
        });
    }
    let seq = tape.concat(0, &[head.cls, features])?;
    let mut h = seq;
    for blk in &head.blocks {
        h = block_forward(tape, h, blk, heads, eps)?;
    }
    let cls_out = tape.slice(h, 0, 0, 1)?;
    tape.linear(cls_out, head.w_out, head.b_out)
}

/// Cosine-similarity localization map between the audio global token and
/// every visual patch token, on the patch grid and bilinearly upsampled to
/// the frame resolution. Requires a fully unmasked visual pass.
pub fn localization_map(
    tape: &Tape,
    pair: &EncodedPair,
    grid: (usize, usize),
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Tensor)> {
    if !pair.visual_fully_unmasked {
        return Err(Error::Input(
            "localization requires an unmasked visual forward pass".into(),
        ));
    }
    let g_id = pair
        .g_audio
        .ok_or_else(|| Error::Config("localization requires a global audio token".into()))?;
    let g = tape.value(g_id);
    let h = tape.value(pair.h_visual);
    if h.rows() != grid.0 * grid.1 {
        return Err(Error::Shape {
            op: "localization_map",
            detail: format!("{} visual tokens do not fill grid {:?}", h.rows(), grid),
        });
    }
    let dim = g.cols();
    let g_norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if g_norm < 1e-30 {
        return Err(Error::Numeric("zero-norm global audio token".into()));
    }
    let mut cells = Vec::with_capacity(h.rows());
    for j in 0..h.rows() {
        let row = &h.data()[j * dim..(j + 1) * dim];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-30 {
            return Err(Error::Numeric(format!("zero-norm visual token {j}")));
        }
        let dot: f64 = row.iter().zip(g.data()).map(|(a, b)| a * b).sum();
        cells.push(dot / (n * g_norm));
    }
    let map = Tensor::from_vec(vec![grid.0, grid.1], cells)?;
    let up = bilinear_upsample(&map, out_h, out_w)?;
    Ok((map, up))
}

/// Bilinear upsampling with half-pixel centers. Output values are convex
/// combinations of the input, so extrema never grow.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if !map.is_2d() {
        return Err(Error::Shape {
            op: "bilinear_upsample",
            detail: format!("expected 2-d map, got {:?}", map.shape()),
        });
    }
    let (in_h, in_w) = (map.rows(), map.cols());
    let mut out = Vec::with_capacity(out_h * out_w);
    let coord = |dst: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let src = (dst as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
        let src = src.clamp(0.0, (in_n - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_n - 1);
        (lo, hi, src - lo as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, in_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, in_w);
            let v00 = map.at2(y0, x0);
            let v01 = map.at2(y0, x1);
            let v10 = map.at2(y1, x0);
            let v11 = map.at2(y1, x1);
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    Tensor::from_vec(vec![out_h, out_w], out)
}
