//! Backbone networks: a scaled ResNet1D and a small MLP.
//!
//! The ResNet1D follows the 18-layer block layout used for motor-imagery
//! decoding: a stride-2 stem convolution (kernel 7), four stages of two
//! residual blocks each with widths `w, 2w, 4w, 8w`, a stride-2 transition
//! at the start of every stage, a 4/4 max-pool closing stages 3 and 4,
//! then ELU, global average pooling and a linear classifier. `n_blocks`
//! keeps only the first stages so tests can run at desk scale.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, conv1d_output_len, pool_output_len};
use crate::tensor::Tensor;

const STEM_KERNEL: usize = 7;
const BLOCK_KERNEL: usize = 3;
const POOL: usize = 4;
const BLOCKS_PER_STAGE: usize = 2;
const MAX_STAGES: usize = 4;
const ELU_ALPHA: f64 = 1.0;
const EVAL_CHUNK: usize = 256;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CTSM";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_electrodes: usize,
    pub n_timesteps: usize,
    pub n_classes: usize,
    pub width_base: usize,
    pub n_blocks: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_electrodes", self.n_electrodes),
            ("n_timesteps", self.n_timesteps),
            ("n_classes", self.n_classes),
            ("width_base", self.width_base),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if !(1..=MAX_STAGES).contains(&self.n_blocks) {
            return Err(Error::config(
                "model.n_blocks",
                format!("must be in 1..={MAX_STAGES}, got {}", self.n_blocks),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    MiniResNet1d(ModelConfig),
    Mlp(MlpConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv1d {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Elu,
    MaxPool1d {
        kernel: usize,
        stride: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    AdaptiveAvgPool1d {
        out_len: usize,
    },
    Flatten,
    Linear {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    stage_lengths: Vec<usize>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.params
            .push(Tensor::new(shape.to_vec(), data).expect("builder shapes are positive"));
        self.params.len() - 1
    }

    fn conv(&mut self, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Layer {
        let bound = (1.0 / (c_in * kernel) as f64).sqrt();
        let weight = self.uniform(&[c_out, c_in, kernel], bound);
        let bias = self.uniform(&[c_out], bound);
        Layer::Conv1d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    fn linear(&mut self, n_in: usize, n_out: usize) -> Layer {
        let bound = (1.0 / n_in as f64).sqrt();
        let weight = self.uniform(&[n_out, n_in], bound);
        let bias = self.uniform(&[n_out], bound);
        Layer::Linear { weight, bias }
    }

    fn residual(&mut self, c_in: usize, c_out: usize, stride: usize) -> Layer {
        let body = vec![
            self.conv(c_in, c_out, BLOCK_KERNEL, stride),
            Layer::Elu,
            self.conv(c_out, c_out, BLOCK_KERNEL, 1),
        ];
        let shortcut = if stride != 1 || c_in != c_out {
            vec![self.conv(c_in, c_out, 1, stride)]
        } else {
            Vec::new()
        };
        Layer::Residual { body, shortcut }
    }
}

fn stage_error(stage: &str, cfg: &ModelConfig, e: Error) -> Error {
    Error::config(
        "model.n_timesteps",
        format!(
            "{stage} collapses for n_timesteps={} (n_blocks={}): {e}",
            cfg.n_timesteps, cfg.n_blocks
        ),
    )
}

/// Builds the ResNet1D backbone. Fails naming the first stage whose output
/// length would drop below one.
pub fn build_mini_resnet1d(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut b = Builder::new(config.seed);
    let mut layers = Vec::new();
    let mut stage_lengths = Vec::new();

    let w = config.width_base;
    let mut len = conv1d_output_len(config.n_timesteps, STEM_KERNEL, 2, STEM_KERNEL / 2)
        .map_err(|e| stage_error("conv1 stem", config, e))?;
    layers.push(b.conv(config.n_electrodes, w, STEM_KERNEL, 2));
    stage_lengths.push(len);

    let mut channels = w;
    for stage in 1..=config.n_blocks {
        let name = format!("resblock stage {stage}");
        let width = w << (stage - 1);
        for block in 0..BLOCKS_PER_STAGE {
            let stride = if block == 0 { 2 } else { 1 };
            len = conv1d_output_len(len, BLOCK_KERNEL, stride, BLOCK_KERNEL / 2)
                .map_err(|e| stage_error(&name, config, e))?;
            layers.push(b.residual(channels, width, stride));
            channels = width;
        }
        if stage >= 3 {
            len = pool_output_len(len, POOL, POOL).map_err(|e| stage_error(&name, config, e))?;
            layers.push(Layer::MaxPool1d {
                kernel: POOL,
                stride: POOL,
            });
        }
        stage_lengths.push(len);
    }

    layers.push(Layer::Elu);
    layers.push(Layer::AdaptiveAvgPool1d { out_len: 1 });
    layers.push(Layer::Flatten);
    layers.push(b.linear(channels, config.n_classes));

    Ok(Model {
        arch: Architecture::MiniResNet1d(config.clone()),
        layers,
        params: b.params,
        stage_lengths,
    })
}

/// Linear/ELU stack ending in `n_classes` logits. Inputs of any trailing
/// shape are flattened to `in_dim` features.
pub fn build_mlp(in_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Model> {
    if in_dim == 0 || n_classes == 0 || hidden.contains(&0) {
        return Err(Error::Validation(
            "build_mlp: all dimensions must be positive".into(),
        ));
    }
    let mut b = Builder::new(seed);
    let mut layers = vec![Layer::Flatten];
    let mut prev = in_dim;
    for &h in hidden {
        layers.push(b.linear(prev, h));
        layers.push(Layer::Elu);
        prev = h;
    }
    layers.push(b.linear(prev, n_classes));
    Ok(Model {
        arch: Architecture::Mlp(MlpConfig {
            in_dim,
            hidden: hidden.to_vec(),
            n_classes,
            seed,
        }),
        layers,
        params: b.params,
        stage_lengths: Vec::new(),
    })
}

impl Model {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(Tensor::shape).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn n_classes(&self) -> usize {
        match &self.arch {
            Architecture::MiniResNet1d(c) => c.n_classes,
            Architecture::Mlp(c) => c.n_classes,
        }
    }

    /// Sequence length after the stem and after each kept stage (ResNet only).
    pub fn stage_lengths(&self) -> &[usize] {
        &self.stage_lengths
    }

    pub fn zero_parameters(&mut self) {
        for p in &mut self.params {
            p.data_mut().fill(0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match &self.arch {
            Architecture::MiniResNet1d(c) => {
                if x.shape() != [x.shape()[0], c.n_electrodes, c.n_timesteps] {
                    return Err(Error::Shape(format!(
                        "model expects [B, {}, {}], got {:?}",
                        c.n_electrodes,
                        c.n_timesteps,
                        x.shape()
                    )));
                }
            }
            Architecture::Mlp(c) => {
                if x.ndim() < 2 || x.len() / x.shape()[0] != c.in_dim {
                    return Err(Error::Shape(format!(
                        "mlp expects [B, ...] with {} features per sample, got {:?}",
                        c.in_dim,
                        x.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Records the forward pass of a batch on `tape` and returns the logits `[B, C]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        self.check_input(x)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()))
            .collect();
        let input = tape.input(x.clone());
        run_layers(&self.layers, tape, &params, input)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per sample; evaluated in chunks to bound tape size.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let n = x.shape()[0];
        let mut preds = Vec::with_capacity(n);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let logits = self.logits(&x.select_rows(&rows)?)?;
            for b in 0..rows.len() {
                let r = logits.row(b);
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                preds.push(best);
            }
        }
        Ok(preds)
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    pub fn mean_loss_and_grads(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        if labels.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, x)?;
        let (losses, grad) = ops::softmax_cross_entropy(tape.value(logits), labels)?;
        let n = labels.len() as f64;
        let seed = grad.map(|g| g / n);
        let grads = tape.backward(logits, &seed)?;
        Ok((losses.sum() / n, grads.param_grads(&self.param_shapes())))
    }

    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let u32le = |v: usize| (v as u32).to_le_bytes();
        match &self.arch {
            Architecture::MiniResNet1d(c) => {
                w.write_all(&[0u8])?;
                for v in [c.n_electrodes, c.n_timesteps, c.n_classes, c.width_base, c.n_blocks] {
                    w.write_all(&u32le(v))?;
                }
                w.write_all(&c.seed.to_le_bytes())?;
            }
            Architecture::Mlp(c) => {
                w.write_all(&[1u8])?;
                w.write_all(&u32le(c.in_dim))?;
                w.write_all(&u32le(c.hidden.len()))?;
                for &h in &c.hidden {
                    w.write_all(&u32le(h))?;
                }
                w.write_all(&u32le(c.n_classes))?;
                w.write_all(&c.seed.to_le_bytes())?;
            }
        }
        w.write_all(&u32le(self.params.len()))?;
        for p in &self.params {
            w.write_all(&u32le(p.ndim()))?;
            for &d in p.shape() {
                w.write_all(&u32le(d))?;
            }
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Model> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let [tag] = read_array::<1>(&mut r)?;
        let rd = |r: &mut R| -> Result<usize> { Ok(u32::from_le_bytes(read_array(r)?) as usize) };
        let mut model = match tag {
            0 => {
                let cfg = ModelConfig {
                    n_electrodes: rd(&mut r)?,
                    n_timesteps: rd(&mut r)?,
                    n_classes: rd(&mut r)?,
                    width_base: rd(&mut r)?,
                    n_blocks: rd(&mut r)?,
                    seed: u64::from_le_bytes(read_array(&mut r)?),
                };
                build_mini_resnet1d(&cfg).map_err(|e| Error::Format(e.to_string()))?
            }
            1 => {
                let in_dim = rd(&mut r)?;
                let n_hidden = rd(&mut r)?;
                let hidden = (0..n_hidden).map(|_| rd(&mut r)).collect::<Result<Vec<_>>>()?;
                let n_classes = rd(&mut r)?;
                let seed = u64::from_le_bytes(read_array(&mut r)?);
                build_mlp(in_dim, &hidden, n_classes, seed)
                    .map_err(|e| Error::Format(e.to_string()))?
            }
            t => return Err(Error::Format(format!("unknown architecture tag {t}"))),
        };
        let n = rd(&mut r)?;
        if n != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} tensors, architecture needs {}",
                model.params.len()
            )));
        }
        for p in &mut model.params {
            let ndim = rd(&mut r)?;
            let shape = (0..ndim).map(|_| rd(&mut r)).collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(Error::Format(format!(
                    "tensor shape {shape:?} does not match architecture {:?}",
                    p.shape()
                )));
            }
            for v in p.data_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
        }
        Ok(model)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated checkpoint".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn run_layers(layers: &[Layer], tape: &mut Tape, params: &[Var], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv1d {
                weight,
                bias,
                stride,
                padding,
            } => tape.conv1d(x, params[*weight], params[*bias], *stride, *padding)?,
            Layer::Elu => tape.elu(x, ELU_ALPHA)?,
            Layer::MaxPool1d { kernel, stride } => tape.maxpool1d(x, *kernel, *stride)?,
            Layer::Residual { body, shortcut } => {
                let main = run_layers(body, tape, params, x)?;
                let skip = run_layers(shortcut, tape, params, x)?;
                tape.add(main, skip)?
            }
            Layer::AdaptiveAvgPool1d { out_len } => tape.adaptive_avg_pool1d(x, *out_len)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::Linear { weight, bias } => tape.linear(x, params[*weight], params[*bias])?,
        };
    }
    Ok(x)
}

/// Per-sample cross-entropy of `model` on a batch; no reduction.
pub fn per_sample_losses(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if labels.is_empty() || batch.shape()[0] != labels.len() {
        return Err(Error::Validation(format!(
            "per_sample_losses: {} labels for batch {:?}",
            labels.len(),
            batch.shape()
        )));
    }
    let n = labels.len();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let chunk = if start == 0 && end == n {
            model.logits(batch)?
        } else {
            model.logits(&batch.select_rows(&rows)?)?
        };
        let (losses, _) = ops::softmax_cross_entropy(&chunk, &labels[start..end])?;
        out.extend_from_slice(losses.data());
    }
    Ok(Tensor::from_vec(out))
}
