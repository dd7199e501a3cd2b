//! Teacher/student network architectures with per-layer quantizer attachment.
//!
//! The optimizer always updates full-precision latent weights; quantized
//! weights are recomputed on every forward. Teachers are plain full-precision
//! models (no quantizers). Checkpoints are flat binary files: a `SQKD` magic,
//! a format version, a JSON arch descriptor, then every parameter array in
//! declaration order as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::quant::{attach_quantizer, GradientEstimator, ParamLeaves, QuantTarget, QuantizerSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SQKD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    /// Fully-connected net; `widths` lists input, hidden, and output sizes.
    Mlp { widths: Vec<usize> },
    /// Conv(3x3, pad 1) + relu + maxpool(2) blocks, then fully-connected
    /// layers. `input` is `[C, H, W]`, `fc_widths` the hidden fc sizes.
    SmallCnn { input: [usize; 3], conv_channels: Vec<usize>, fc_widths: Vec<usize> },
}

/// Weight/activation quantizer templates cloned into each quantized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPair {
    pub weight: QuantizerSpec,
    pub activation: QuantizerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub num_classes: usize,
    /// Present iff the model is quantized; both templates required.
    #[serde(default)]
    pub quant: Option<QuantPair>,
    /// Keep the first and last layers full-precision (the convention of the
    /// quantizers this crate implements).
    #[serde(default = "default_skip")]
    pub skip_first_last: bool,
}

fn default_skip() -> bool {
    true
}

impl ModelConfig {
    pub fn mlp(widths: Vec<usize>, num_classes: usize) -> Self {
        ModelConfig { arch: Arch::Mlp { widths }, num_classes, quant: None, skip_first_last: true }
    }

    pub fn with_quant(mut self, weight: QuantizerSpec, activation: QuantizerSpec) -> Self {
        self.quant = Some(QuantPair { weight, activation });
        self
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        match &self.arch {
            Arch::Mlp { widths } => {
                if widths.len() < 3 {
                    return Err(Error::InvalidArgument(
                        "mlp needs at least one hidden layer".into(),
                    ));
                }
                if widths.iter().any(|&w| w == 0) {
                    return Err(Error::InvalidArgument("zero-width layer".into()));
                }
                if *widths.last().unwrap() != self.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "output width {} != num_classes {}",
                        widths.last().unwrap(),
                        self.num_classes
                    )));
                }
            }
            Arch::SmallCnn { input, conv_channels, fc_widths } => {
                if input.iter().any(|&d| d == 0) {
                    return Err(Error::InvalidArgument("zero-sized input".into()));
                }
                if conv_channels.is_empty() {
                    return Err(Error::InvalidArgument(
                        "small_cnn needs at least one conv block".into(),
                    ));
                }
                if conv_channels.iter().chain(fc_widths).any(|&w| w == 0) {
                    return Err(Error::InvalidArgument("zero-width layer".into()));
                }
                let blocks = conv_channels.len() as u32;
                let (h, w) = (input[1], input[2]);
                if h % (1 << blocks) != 0 || w % (1 << blocks) != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "input {h}x{w} not divisible by the {blocks} pooling stages"
                    )));
                }
            }
        }
        if let Some(pair) = &self.quant {
            let mut weight = pair.weight.clone();
            weight.target = QuantTarget::Weights;
            weight.validate()?;
            let mut act = pair.activation.clone();
            act.target = QuantTarget::Activations;
            act.validate()?;
        }
        Ok(())
    }
}

/// One layer's parameters plus its optional quantizers. The activation
/// quantizer applies to the layer's input (the previous nonlinearity's
/// output); the weight quantizer produces the weights actually used.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense {
        /// `[in, out]`
        w: Tensor,
        b: Tensor,
        relu: bool,
        wq: Option<QuantizerSpec>,
        aq: Option<QuantizerSpec>,
    },
    Conv {
        /// `[F, C, 3, 3]`, stride 1, padding 1, followed by relu + pool(2).
        w: Tensor,
        b: Tensor,
        wq: Option<QuantizerSpec>,
        aq: Option<QuantizerSpec>,
    },
}

impl Layer {
    fn weights(&self) -> (&Tensor, &Tensor) {
        match self {
            Layer::Dense { w, b, .. } | Layer::Conv { w, b, .. } => (w, b),
        }
    }

    fn quantizers(&self) -> (Option<&QuantizerSpec>, Option<&QuantizerSpec>) {
        match self {
            Layer::Dense { wq, aq, .. } | Layer::Conv { wq, aq, .. } => {
                (wq.as_ref(), aq.as_ref())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

/// Deterministic initialization: Kaiming-uniform weights (bound
/// `sqrt(6/fan_in)`) drawn from ChaCha12 keyed by `seed`, zero biases,
/// quantizer templates cloned per layer.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut init = |shape: Vec<usize>, fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).unwrap()
    };

    let mut layers = Vec::new();
    match &config.arch {
        Arch::Mlp { widths } => {
            for i in 0..widths.len() - 1 {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                layers.push(Layer::Dense {
                    w: init(vec![fan_in, fan_out], fan_in),
                    b: Tensor::zeros(&[fan_out]),
                    relu: i + 2 < widths.len(),
                    wq: None,
                    aq: None,
                });
            }
        }
        Arch::SmallCnn { input, conv_channels, fc_widths } => {
            let mut c = input[0];
            let (mut h, mut w) = (input[1], input[2]);
            for &f in conv_channels {
                let fan_in = c * 9;
                layers.push(Layer::Conv {
                    w: init(vec![f, c, 3, 3], fan_in),
                    b: Tensor::zeros(&[f]),
                    wq: None,
                    aq: None,
                });
                c = f;
                h /= 2;
                w /= 2;
            }
            let mut dims = vec![c * h * w];
            dims.extend(fc_widths);
            dims.push(config.num_classes);
            for i in 0..dims.len() - 1 {
                layers.push(Layer::Dense {
                    w: init(vec![dims[i], dims[i + 1]], dims[i]),
                    b: Tensor::zeros(&[dims[i + 1]]),
                    relu: i + 2 < dims.len(),
                    wq: None,
                    aq: None,
                });
            }
        }
    }

    if let Some(pair) = &config.quant {
        let count = layers.len();
        for (i, layer) in layers.iter_mut().enumerate() {
            if config.skip_first_last && (i == 0 || i + 1 == count) {
                continue;
            }
            let mut wq = pair.weight.clone();
            wq.target = QuantTarget::Weights;
            wq.normalize()?;
            let mut aq = pair.activation.clone();
            aq.target = QuantTarget::Activations;
            aq.normalize()?;
            match layer {
                Layer::Dense { wq: w_slot, aq: a_slot, .. }
                | Layer::Conv { wq: w_slot, aq: a_slot, .. } => {
                    *w_slot = Some(wq);
                    *a_slot = Some(aq);
                }
            }
        }
    }

    Ok(Model { config: config.clone(), layers })
}

impl Model {
    /// Visit every trainable parameter slice in canonical order (per layer:
    /// weights, bias, then each weight-quantizer and activation-quantizer
    /// parameter as an individual scalar slice). The optimizer and the tape
    /// binding both rely on this order.
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b, wq, aq, .. } | Layer::Conv { w, b, wq, aq } => {
                    f(w.data_mut());
                    f(b.data_mut());
                    for q in [wq, aq].into_iter().flatten() {
                        for v in q.params.clip.iter_mut().chain(q.params.round.iter_mut()) {
                            f(std::slice::from_mut(v));
                        }
                    }
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            let (w, b) = layer.weights();
            n += w.numel() + b.numel();
            let (wq, aq) = layer.quantizers();
            for q in [wq, aq].into_iter().flatten() {
                n += q.params.clip.len() + q.params.round.len();
            }
        }
        n
    }

    /// Register every trainable parameter on a tape for one training step.
    pub fn bind<'m>(&'m self, tape: &'m Tape) -> BoundModel<'m> {
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let (w, b) = layer.weights();
                let (wq, aq) = layer.quantizers();
                LayerBinding {
                    w: tape.leaf(w),
                    b: tape.leaf(b),
                    wq: wq.map(|q| ParamLeaves::bind(tape, q)),
                    aq: aq.map(|q| ParamLeaves::bind(tape, q)),
                }
            })
            .collect();
        BoundModel { model: self, tape, layers }
    }

    /// Quantization-aware inference on a throwaway tape.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        bound.forward(batch, &GradientEstimator::ste(), 0)
    }

    /// The same architecture with quantizers dropped and latent weights kept.
    pub fn without_quantizers(&self) -> Model {
        let mut config = self.config.clone();
        config.quant = None;
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { w, b, relu, .. } => Layer::Dense {
                    w: w.clone(),
                    b: b.clone(),
                    relu: *relu,
                    wq: None,
                    aq: None,
                },
                Layer::Conv { w, b, .. } => {
                    Layer::Conv { w: w.clone(), b: b.clone(), wq: None, aq: None }
                }
            })
            .collect();
        Model { config, layers }
    }
}

/// Copy latent full-precision weights and biases from `src` into `dst`,
/// leaving `dst`'s quantizer parameters untouched.
pub fn clone_weights(src: &Model, dst: &mut Model) -> Result<()> {
    if src.config.arch != dst.config.arch || src.config.num_classes != dst.config.num_classes {
        return Err(Error::InvalidArgument("architecture mismatch".into()));
    }
    for (s, d) in src.layers.iter().zip(&mut dst.layers) {
        let (sw, sb) = s.weights();
        let (sw, sb) = (sw.clone(), sb.clone());
        match d {
            Layer::Dense { w, b, .. } | Layer::Conv { w, b, .. } => {
                *w = sw;
                *b = sb;
            }
        }
    }
    Ok(())
}

struct LayerBinding {
    w: Tensor,
    b: Tensor,
    wq: Option<ParamLeaves>,
    aq: Option<ParamLeaves>,
}

/// A model whose parameters are registered on a tape; performs the forward
/// pass and exposes the leaves in canonical parameter order.
pub struct BoundModel<'m> {
    model: &'m Model,
    tape: &'m Tape,
    layers: Vec<LayerBinding>,
}

impl<'m> BoundModel<'m> {
    /// Leaves in the order `visit_params_mut` walks the model.
    pub fn leaves(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for binding in &self.layers {
            out.push(&binding.w);
            out.push(&binding.b);
            for q in [&binding.wq, &binding.aq].into_iter().flatten() {
                out.extend(q.clip.iter());
                out.extend(q.round.iter());
            }
        }
        out
    }

    /// Forward pass to pre-softmax logits. Quantized layers use
    /// `W_q = quantize(W_f)` and quantize their input activations.
    pub fn forward(&self, batch: &Tensor, est: &GradientEstimator, step: u64) -> Result<Tensor> {
        let tape = self.tape;
        let mut x = batch.detached();
        let mut dense_seen = false;
        for (layer, binding) in self.model.layers.iter().zip(&self.layers) {
            let (wq_spec, aq_spec) = layer.quantizers();
            if let (Some(spec), Some(leaves)) = (aq_spec, binding.aq.as_ref()) {
                x = attach_quantizer(tape, &x, spec, est, step, Some(leaves))?;
            }
            match layer {
                Layer::Dense { relu, .. } => {
                    if !dense_seen && x.shape().len() == 4 {
                        let n = x.shape()[0];
                        let d = x.numel() / n;
                        x = tape.reshape(&x, &[n, d])?;
                    }
                    dense_seen = true;
                    let w = self.effective_weights(wq_spec, binding, est, step)?;
                    x = tape.matmul(&x, &w)?;
                    x = tape.add_bias(&x, &binding.b)?;
                    if *relu {
                        x = tape.relu(&x)?;
                    }
                }
                Layer::Conv { .. } => {
                    let w = self.effective_weights(wq_spec, binding, est, step)?;
                    x = tape.conv2d(&x, &w, 1, 1)?;
                    x = tape.add_channel_bias(&x, &binding.b)?;
                    x = tape.relu(&x)?;
                    x = tape.max_pool2d(&x, 2, 2)?;
                }
            }
        }
        Ok(x)
    }

    fn effective_weights(
        &self,
        wq: Option<&QuantizerSpec>,
        binding: &LayerBinding,
        est: &GradientEstimator,
        step: u64,
    ) -> Result<Tensor> {
        match (wq, binding.wq.as_ref()) {
            (Some(spec), Some(leaves)) => {
                attach_quantizer(self.tape, &binding.w, spec, est, step, Some(leaves))
            }
            _ => Ok(binding.w.clone()),
        }
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// Write a model: magic, version, length-prefixed JSON descriptor, then every
/// parameter array in declaration order as little-endian f64.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let descriptor = serde_json::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    let mut model = model.clone();
    model.visit_params_mut(&mut |slice: &mut [f64]| {
        for v in slice.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + desc_len {
        return Err(Error::Checkpoint("truncated descriptor".into()));
    }
    let descriptor = std::str::from_utf8(&bytes[12..12 + desc_len])
        .map_err(|e| Error::Checkpoint(format!("descriptor not utf-8: {e}")))?;
    let config: ModelConfig = serde_json::from_str(descriptor)
        .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;

    let mut model = build_model(&config, 0)?;
    let payload = &bytes[12 + desc_len..];
    if payload.len() != model.param_count() * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            model.param_count() * 8,
            payload.len()
        )));
    }
    let mut offset = 0;
    model.visit_params_mut(&mut |slice: &mut [f64]| {
        for v in slice.iter_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    });
    Ok(model)
}
