//! Pre-activation residual classifier and its checkpoint format.
//!
//! Stem: one 3x3 stride-1 convolution (no max-pool), sized so a 64x64 input
//! ends at an 8x8 final feature map on the standard variants. Each stage
//! after the first opens with a stride-2 block whose skip path is a 1x1
//! projection applied to the shared pre-activation; all other skips are
//! identities. The head is batch-norm, relu, global average pooling and one
//! linear layer, which is what makes class activation maps exact for this
//! family (see the `cam` module).
//!
//! All convolutions are bias-free; the only bias in the network is the
//! classifier's.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d, conv2d_backward, gap,
    gap_backward, linear, linear_backward, relu, relu_backward, BatchNormParams, BnCache, Mode,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Toy10,
    Res18,
    Res34,
}

impl Variant {
    /// (stage widths, blocks per stage) for the preset.
    pub fn plan(&self) -> (Vec<usize>, Vec<usize>) {
        match self {
            Variant::Toy10 => (vec![16, 32, 64], vec![1, 1, 1]),
            Variant::Res18 => (vec![64, 128, 256, 512], vec![2, 2, 2, 2]),
            Variant::Res34 => (vec![64, 128, 256, 512], vec![3, 4, 6, 3]),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Toy10 => "toy10",
            Variant::Res18 => "res18",
            Variant::Res34 => "res34",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "toy10" => Variant::Toy10,
            "res18" => Variant::Res18,
            "res34" => Variant::Res34,
            other => {
                return Err(Error::invalid(format!(
                    "unknown model variant {other:?}; expected toy10, res18 or res34"
                )))
            }
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub input_side: usize,
    /// Channel width of each stage; filled from the variant preset unless
    /// overridden (test nets use tiny custom stages).
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Variant::Res18, 200, 64)
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize, input_side: usize) -> Self {
        let (stage_widths, blocks_per_stage) = variant.plan();
        ModelConfig {
            variant,
            num_classes,
            input_side,
            stage_widths,
            blocks_per_stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::invalid(format!(
                "stage_widths ({:?}) and blocks_per_stage ({:?}) must be equal-length and non-empty",
                self.stage_widths, self.blocks_per_stage
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0)
            || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(Error::invalid("stage widths and block counts must be positive"));
        }
        // Each stage after the first halves the extent; the final map must
        // keep at least one pixel.
        let downsamples = self.stage_widths.len() - 1;
        if self.input_side < (1 << downsamples) {
            return Err(Error::invalid(format!(
                "input side {} too small for {} downsampling stages",
                self.input_side, downsamples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal init: std = sqrt(2 / fan_in) with fan_in = c_in * kh * kw.
    fn he(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Tensor::randn(vec![c_out, c_in, k, k], std, rng),
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Pre-activation residual block:
/// `out = conv2(relu(bn2(conv1(relu(bn1(x)))))) + skip`, where `skip` is
/// `x` itself, or a 1x1 stride-matched projection of `relu(bn1(x))` when
/// the block changes width or resolution.
#[derive(Debug, Clone)]
pub struct PreActBlock {
    pub bn1: BatchNormParams,
    pub conv1: Conv2d,
    pub bn2: BatchNormParams,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
}

pub struct BlockCache {
    t1: Tensor,
    bn1: BnCache,
    a1: Tensor,
    t2: Tensor,
    bn2: BnCache,
    a2: Tensor,
}

pub struct BlockGrads {
    pub dgamma1: Tensor,
    pub dbeta1: Tensor,
    pub dconv1: Tensor,
    pub dgamma2: Tensor,
    pub dbeta2: Tensor,
    pub dconv2: Tensor,
    pub dproj: Option<Tensor>,
}

impl PreActBlock {
    fn build(c_in: usize, c_out: usize, stride: usize, rng: &mut crate::rng::Rng) -> Self {
        let needs_proj = stride != 1 || c_in != c_out;
        PreActBlock {
            bn1: BatchNormParams::new(c_in),
            conv1: Conv2d::he(c_out, c_in, 3, stride, 1, rng),
            bn2: BatchNormParams::new(c_out),
            conv2: Conv2d::he(c_out, c_out, 3, 1, 1, rng),
            proj: needs_proj.then(|| Conv2d::he(c_out, c_in, 1, stride, 0, rng)),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let a1 = relu(&batch_norm_eval(x, &self.bn1)?);
        let a2 = relu(&batch_norm_eval(
            &conv2d(&a1, &self.conv1.weight, self.conv1.stride, self.conv1.pad)?,
            &self.bn2,
        )?);
        let mut out = conv2d(&a2, &self.conv2.weight, self.conv2.stride, self.conv2.pad)?;
        match &self.proj {
            None => out.add_assign(x),
            Some(p) => out.add_assign(&conv2d(&a1, &p.weight, p.stride, p.pad)?),
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (t1, bn1) = batch_norm_train(x, &mut self.bn1)?;
        let a1 = relu(&t1);
        let c1 = conv2d(&a1, &self.conv1.weight, self.conv1.stride, self.conv1.pad)?;
        let (t2, bn2) = batch_norm_train(&c1, &mut self.bn2)?;
        let a2 = relu(&t2);
        let mut out = conv2d(&a2, &self.conv2.weight, self.conv2.stride, self.conv2.pad)?;
        match &self.proj {
            None => out.add_assign(x),
            Some(p) => out.add_assign(&conv2d(&a1, &p.weight, p.stride, p.pad)?),
        }
        Ok((
            out,
            BlockCache {
                t1,
                bn1,
                a1,
                t2,
                bn2,
                a2,
            },
        ))
    }

    /// Returns the gradient with respect to the block input, plus parameter
    /// gradients. `x` is the forward input (needed for the identity skip).
    pub fn backward(
        &self,
        cache: &BlockCache,
        dout: &Tensor,
    ) -> Result<(Tensor, BlockGrads)> {
        let (da2, dconv2) = conv2d_backward(
            &cache.a2,
            &self.conv2.weight,
            self.conv2.stride,
            self.conv2.pad,
            dout,
        )?;
        let dt2 = relu_backward(&cache.t2, &da2);
        let (dc1, dgamma2, dbeta2) = batch_norm_backward(&dt2, &cache.bn2, &self.bn2.gamma)?;
        let (mut da1, dconv1) = conv2d_backward(
            &cache.a1,
            &self.conv1.weight,
            self.conv1.stride,
            self.conv1.pad,
            &dc1,
        )?;
        let dproj = match &self.proj {
            None => None,
            Some(p) => {
                let (da1_skip, dw) = conv2d_backward(&cache.a1, &p.weight, p.stride, p.pad, dout)?;
                da1.add_assign(&da1_skip);
                Some(dw)
            }
        };
        let dt1 = relu_backward(&cache.t1, &da1);
        let (mut dx, dgamma1, dbeta1) = batch_norm_backward(&dt1, &cache.bn1, &self.bn1.gamma)?;
        if self.proj.is_none() {
            dx.add_assign(dout);
        }
        Ok((
            dx,
            BlockGrads {
                dgamma1,
                dbeta1,
                dconv1,
                dgamma2,
                dbeta2,
                dconv2,
                dproj,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: Conv2d,
    pub stages: Vec<Vec<PreActBlock>>,
    pub final_bn: BatchNormParams,
    pub classifier: Linear,
}

/// Logits plus the spatial features they were pooled from.
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Post-activation final feature maps, shape [n, k, h, w].
    pub features: Tensor,
}

pub struct NetCache {
    input: Tensor,
    blocks: Vec<Vec<(Tensor, BlockCache)>>, // (block input, cache)
    final_t: Tensor,
    final_bn: BnCache,
    features: Tensor,
    pooled: Tensor,
}

/// Named parameter gradients, keyed exactly like `Network::named_params`.
pub struct Gradients(pub BTreeMap<String, Tensor>);

/// Builds a freshly initialized network. Weights are He-normal draws from
/// the init stream of `init_seed`, consumed in construction order (stem,
/// then each stage's blocks, then the classifier), so equal seeds give
/// bitwise-equal networks.
pub fn build_network(config: &ModelConfig, init_seed: u64) -> Result<Network> {
    config.validate()?;
    let mut rng = RngStream::new(init_seed).init_stream();
    let w0 = config.stage_widths[0];
    let stem = Conv2d::he(w0, 3, 3, 1, 1, &mut rng);
    let mut stages = Vec::with_capacity(config.stage_widths.len());
    let mut c_in = w0;
    for (si, (&width, &blocks)) in config
        .stage_widths
        .iter()
        .zip(&config.blocks_per_stage)
        .enumerate()
    {
        let mut stage = Vec::with_capacity(blocks);
        for bi in 0..blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            stage.push(PreActBlock::build(c_in, width, stride, &mut rng));
            c_in = width;
        }
        stages.push(stage);
    }
    let final_bn = BatchNormParams::new(c_in);
    let k = c_in;
    let std = (2.0 / k as f64).sqrt();
    let classifier = Linear {
        weight: Tensor::randn(vec![k, config.num_classes], std, &mut rng),
        bias: Tensor::zeros(vec![config.num_classes]),
    };
    Ok(Network {
        config: config.clone(),
        stem,
        stages,
        final_bn,
        classifier,
    })
}

impl Network {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let side = self.config.input_side;
        if x.shape().len() != 4 || x.shape()[1] != 3 || x.shape()[2] != side || x.shape()[3] != side
        {
            return Err(Error::invalid(format!(
                "input batch shape {:?} does not match [n, 3, {side}, {side}]",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut h = conv2d(x, &self.stem.weight, self.stem.stride, self.stem.pad)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward_eval(&h)?;
            }
        }
        let features = relu(&batch_norm_eval(&h, &self.final_bn)?);
        let pooled = gap(&features)?;
        let logits = linear(&pooled, &self.classifier.weight, &self.classifier.bias)?;
        Ok(ForwardOutput { logits, features })
    }

    /// Train-mode forward that keeps every intermediate needed by
    /// `backward`. Running statistics advance as a side effect.
    pub fn forward_cached(&mut self, x: &Tensor) -> Result<(ForwardOutput, NetCache)> {
        self.check_input(x)?;
        let mut h = conv2d(x, &self.stem.weight, self.stem.stride, self.stem.pad)?;
        let mut blocks = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let input = h;
                let (out, cache) = block.forward_train(&input)?;
                caches.push((input, cache));
                h = out;
            }
            blocks.push(caches);
        }
        let (final_t, final_bn) = batch_norm_train(&h, &mut self.final_bn)?;
        let features = relu(&final_t);
        let pooled = gap(&features)?;
        let logits = linear(&pooled, &self.classifier.weight, &self.classifier.bias)?;
        Ok((
            ForwardOutput {
                logits,
                features: features.clone(),
            },
            NetCache {
                input: x.clone(),
                blocks,
                final_t,
                final_bn,
                features,
                pooled,
            },
        ))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_cached(x)?.0),
        }
    }

    /// Backpropagates `dlogits` through the cached forward pass and returns
    /// gradients for every trainable parameter.
    pub fn backward(&self, cache: &NetCache, dlogits: &Tensor) -> Result<Gradients> {
        let mut grads = BTreeMap::new();
        let (dpooled, dw_cls, db_cls) =
            linear_backward(&cache.pooled, &self.classifier.weight, dlogits)?;
        grads.insert("classifier.weight".to_string(), dw_cls);
        grads.insert("classifier.bias".to_string(), db_cls);
        let dfeat = gap_backward(cache.features.shape(), &dpooled)?;
        let dfinal_t = relu_backward(&cache.final_t, &dfeat);
        let (mut d, dgamma_f, dbeta_f) =
            batch_norm_backward(&dfinal_t, &cache.final_bn, &self.final_bn.gamma)?;
        grads.insert("final_bn.gamma".to_string(), dgamma_f);
        grads.insert("final_bn.beta".to_string(), dbeta_f);
        for (si, stage) in self.stages.iter().enumerate().rev() {
            for (bi, block) in stage.iter().enumerate().rev() {
                let (_input, cache_b) = &cache.blocks[si][bi];
                let (dx, bg) = block.backward(cache_b, &d)?;
                let prefix = format!("stage{si}.block{bi}");
                grads.insert(format!("{prefix}.bn1.gamma"), bg.dgamma1);
                grads.insert(format!("{prefix}.bn1.beta"), bg.dbeta1);
                grads.insert(format!("{prefix}.conv1.weight"), bg.dconv1);
                grads.insert(format!("{prefix}.bn2.gamma"), bg.dgamma2);
                grads.insert(format!("{prefix}.bn2.beta"), bg.dbeta2);
                grads.insert(format!("{prefix}.conv2.weight"), bg.dconv2);
                if let Some(dp) = bg.dproj {
                    grads.insert(format!("{prefix}.proj.weight"), dp);
                }
                d = dx;
            }
        }
        let (_dinput, dw_stem) =
            conv2d_backward(&cache.input, &self.stem.weight, self.stem.stride, self.stem.pad, &d)?;
        grads.insert("stem.weight".to_string(), dw_stem);
        Ok(Gradients(grads))
    }

    /// Trainable parameters in a fixed traversal order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = vec![("stem.weight".into(), &self.stem.weight)];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                v.push((format!("{p}.bn1.gamma"), &b.bn1.gamma));
                v.push((format!("{p}.bn1.beta"), &b.bn1.beta));
                v.push((format!("{p}.conv1.weight"), &b.conv1.weight));
                v.push((format!("{p}.bn2.gamma"), &b.bn2.gamma));
                v.push((format!("{p}.bn2.beta"), &b.bn2.beta));
                v.push((format!("{p}.conv2.weight"), &b.conv2.weight));
                if let Some(proj) = &b.proj {
                    v.push((format!("{p}.proj.weight"), &proj.weight));
                }
            }
        }
        v.push(("final_bn.gamma".into(), &self.final_bn.gamma));
        v.push(("final_bn.beta".into(), &self.final_bn.beta));
        v.push(("classifier.weight".into(), &self.classifier.weight));
        v.push(("classifier.bias".into(), &self.classifier.bias));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> =
            vec![("stem.weight".into(), &mut self.stem.weight)];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, b) in stage.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                v.push((format!("{p}.bn1.gamma"), &mut b.bn1.gamma));
                v.push((format!("{p}.bn1.beta"), &mut b.bn1.beta));
                v.push((format!("{p}.conv1.weight"), &mut b.conv1.weight));
                v.push((format!("{p}.bn2.gamma"), &mut b.bn2.gamma));
                v.push((format!("{p}.bn2.beta"), &mut b.bn2.beta));
                v.push((format!("{p}.conv2.weight"), &mut b.conv2.weight));
                if let Some(proj) = &mut b.proj {
                    v.push((format!("{p}.proj.weight"), &mut proj.weight));
                }
            }
        }
        v.push(("final_bn.gamma".into(), &mut self.final_bn.gamma));
        v.push(("final_bn.beta".into(), &mut self.final_bn.beta));
        v.push(("classifier.weight".into(), &mut self.classifier.weight));
        v.push(("classifier.bias".into(), &mut self.classifier.bias));
        v
    }

    /// Whether a trainable parameter belongs to a normalization layer
    /// (gamma/beta); used by the optimizer's decay toggle.
    pub fn is_norm_param(name: &str) -> bool {
        name.ends_with(".gamma") || name.ends_with(".beta")
    }

    /// All persistent state: trainable parameters plus running statistics.
    pub fn named_state(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.named_params();
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                v.push((format!("{p}.bn1.running_mean"), &b.bn1.running_mean));
                v.push((format!("{p}.bn1.running_var"), &b.bn1.running_var));
                v.push((format!("{p}.bn2.running_mean"), &b.bn2.running_mean));
                v.push((format!("{p}.bn2.running_var"), &b.bn2.running_var));
            }
        }
        v.push(("final_bn.running_mean".into(), &self.final_bn.running_mean));
        v.push(("final_bn.running_var".into(), &self.final_bn.running_var));
        v
    }

    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        // Mirrors named_state; kept in one traversal so each field is
        // mutably borrowed exactly once.
        let mut v: Vec<(String, &mut Tensor)> =
            vec![("stem.weight".into(), &mut self.stem.weight)];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, b) in stage.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                v.push((format!("{p}.bn1.gamma"), &mut b.bn1.gamma));
                v.push((format!("{p}.bn1.beta"), &mut b.bn1.beta));
                v.push((format!("{p}.conv1.weight"), &mut b.conv1.weight));
                v.push((format!("{p}.bn2.gamma"), &mut b.bn2.gamma));
                v.push((format!("{p}.bn2.beta"), &mut b.bn2.beta));
                v.push((format!("{p}.conv2.weight"), &mut b.conv2.weight));
                if let Some(proj) = &mut b.proj {
                    v.push((format!("{p}.proj.weight"), &mut proj.weight));
                }
                v.push((format!("{p}.bn1.running_mean"), &mut b.bn1.running_mean));
                v.push((format!("{p}.bn1.running_var"), &mut b.bn1.running_var));
                v.push((format!("{p}.bn2.running_mean"), &mut b.bn2.running_mean));
                v.push((format!("{p}.bn2.running_var"), &mut b.bn2.running_var));
            }
        }
        v.push(("final_bn.gamma".into(), &mut self.final_bn.gamma));
        v.push(("final_bn.beta".into(), &mut self.final_bn.beta));
        v.push(("classifier.weight".into(), &mut self.classifier.weight));
        v.push(("classifier.bias".into(), &mut self.classifier.bias));
        v.push(("final_bn.running_mean".into(), &mut self.final_bn.running_mean));
        v.push(("final_bn.running_var".into(), &mut self.final_bn.running_var));
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Seed lineage carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init_seed: u64,
    /// Seed of the training run that produced the checkpoint, if any.
    pub train_seed: Option<u64>,
    pub epochs_trained: usize,
}

const CKPT_MAGIC: &[u8] = b"WSOL-CKPT-v1\n";

/// Serializes the full network state. The layout is the magic line, a JSON
/// metadata blob (config and seed lineage), then each state tensor as
/// (name, shape, little-endian f64 payload) in traversal order. Equal
/// networks produce byte-identical files.
pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &std::path::Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let meta_json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    let state = net.named_state();
    buf.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, tensor) in state {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_exact_checked(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

/// Rebuilds a network from a checkpoint, verifying the magic header and that
/// the stored tensors exactly cover the architecture in the stored config.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = bytes.as_slice();
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    read_exact_checked(&mut r, &mut magic, "magic header")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic header {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len4 = [0u8; 4];
    read_exact_checked(&mut r, &mut len4, "metadata length")?;
    let meta_len = u32::from_le_bytes(len4) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_checked(&mut r, &mut meta_bytes, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata is not valid JSON: {e}")))?;
    read_exact_checked(&mut r, &mut len4, "tensor count")?;
    let count = u32::from_le_bytes(len4) as usize;

    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        read_exact_checked(&mut r, &mut len2, "tensor name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len2) as usize];
        read_exact_checked(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut ndim = [0u8; 1];
        read_exact_checked(&mut r, &mut ndim, "tensor rank")?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            read_exact_checked(&mut r, &mut len4, "tensor dim")?;
            shape.push(u32::from_le_bytes(len4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in &mut data {
            let mut b8 = [0u8; 8];
            read_exact_checked(&mut r, &mut b8, &format!("data of {name}"))?;
            *v = f64::from_le_bytes(b8);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if stored.insert(name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }

    let mut net = build_network(&meta.model, meta.init_seed)?;
    for (name, slot) in net.named_state_mut() {
        let tensor = stored.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor {name}"))
        })?;
        if tensor.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Checkpoint(format!(
            "checkpoint contains unknown tensor {extra}"
        )));
    }
    for stage in &net.stages {
        for b in stage {
            b.bn1.validate()?;
            b.bn2.validate()?;
        }
    }
    net.final_bn.validate()?;
    Ok((net, meta))
}
