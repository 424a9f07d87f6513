//! A small 2-D U-Net, its parameters, EMA tracking and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng;
use crate::tensor::io::{read_tnsr, write_tnsr};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CKPT0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of resolutions, bottleneck included.
    pub depth: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { in_channels: 1, num_classes: 3, base_width: 16, depth: 3, kernel: 3 }
    }
}

/// Name and `[out, in, k, k]` kernel shape of one convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(invalid!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 || self.depth > 8 {
            return Err(invalid!("in_channels and base_width must be positive, depth in 1..=8"));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    /// Inputs must be divisible by this factor in both dimensions.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Convolutions in forward order.
    pub fn convs(&self) -> Vec<ConvSpec> {
        let k = self.kernel;
        let conv = |name: String, o, i, k| ConvSpec { name, out_channels: o, in_channels: i, kernel: k };
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for l in 0..self.depth {
            let w = self.width(l);
            out.push(conv(format!("enc{l}.conv1"), w, cin, k));
            out.push(conv(format!("enc{l}.conv2"), w, w, k));
            cin = w;
        }
        for l in (0..self.depth - 1).rev() {
            let w = self.width(l);
            out.push(conv(format!("dec{l}.conv1"), w, self.width(l + 1) + w, k));
            out.push(conv(format!("dec{l}.conv2"), w, w, k));
        }
        out.push(conv("head".into(), self.num_classes, self.width(0), 1));
        out
    }

    /// Parameter names and shapes: kernel then bias for each convolution.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.convs()
            .into_iter()
            .flat_map(|c| {
                [
                    (format!("{}.weight", c.name), vec![c.out_channels, c.in_channels, c.kernel, c.kernel]),
                    (format!("{}.bias", c.name), vec![c.out_channels]),
                ]
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|c| c.out_channels * c.in_channels * c.kernel * c.kernel + c.out_channels)
            .sum()
    }

    /// Recovers the configuration that produced a weight set.
    pub fn infer(weights: &WeightSet) -> Result<UNetConfig> {
        let bad = || Error::Format("weights do not describe a U-Net".into());
        let first = weights.get("enc0.conv1.weight").ok_or_else(bad)?.shape();
        let head = weights.get("head.weight").ok_or_else(bad)?.shape();
        let depth = (0..).take_while(|l| weights.get(&format!("enc{l}.conv1.weight")).is_some()).count();
        let cfg = UNetConfig {
            in_channels: first[1],
            num_classes: head[0],
            base_width: first[0],
            depth,
            kernel: first[2],
        };
        cfg.validate()?;
        cfg.check(weights)?;
        Ok(cfg)
    }

    /// Verifies that `weights` has exactly this configuration's names and shapes.
    pub fn check(&self, weights: &WeightSet) -> Result<()> {
        let expected = self.parameter_shapes();
        if expected.len() != weights.len() {
            return Err(shape_err!("expected {} parameter tensors, found {}", expected.len(), weights.len()));
        }
        for ((name, shape), (wn, wt)) in expected.iter().zip(weights.iter()) {
            if name != wn || shape.as_slice() != wt.shape() {
                return Err(shape_err!("parameter {wn} {:?} does not match expected {name} {shape:?}", wt.shape()));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl WeightSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (n, t) in entries {
            if names.contains(&n) {
                return Err(invalid!("duplicate parameter name {n}"));
            }
            if n.len() > u16::MAX as usize {
                return Err(invalid!("parameter name too long"));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(WeightSet { names, tensors })
    }

    pub fn zeros(config: &UNetConfig) -> Self {
        let entries = config.parameter_shapes().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        WeightSet::new(entries).unwrap()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.names.iter().zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn same_layout(&self, other: &WeightSet) -> Result<()> {
        if self.names != other.names || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(shape_err!("weight sets have different layouts"));
        }
        Ok(())
    }

    /// Records every tensor on the tape, differentiable or not.
    pub fn leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad))).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tnsr(&mut w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(truncated)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            entries.push((name, read_tnsr(&mut r)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        WeightSet::new(entries).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        WeightSet::read(&fs::read(path)?[..])
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// He-uniform kernels (`U(±√(6/fan_in))`) and zero biases, one RNG stream per layer.
pub fn init_weights(config: &UNetConfig, seed: u64) -> Result<WeightSet> {
    config.validate()?;
    let mut entries = Vec::new();
    for (i, c) in config.convs().into_iter().enumerate() {
        let fan_in = (c.in_channels * c.kernel * c.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt() as f32;
        let mut r = rng::stream(seed, &[0x1417, i as u64]);
        let shape = [c.out_channels, c.in_channels, c.kernel, c.kernel];
        let kernel = Tensor::from_fn(&shape, |_| r.random_range(-bound..bound));
        entries.push((format!("{}.weight", c.name), kernel));
        entries.push((format!("{}.bias", c.name), Tensor::zeros(&[c.out_channels])));
    }
    WeightSet::new(entries)
}

/// Logits `N×C×H×W` for an `N×in×H×W` input. `params` are the tape leaves of
/// a weight set laid out as [`UNetConfig::parameter_shapes`].
pub fn unet_forward(tape: &mut Tape, config: &UNetConfig, params: &[Var], input: Var) -> Result<Var> {
    let [_, cin, h, w] = tape.value(input).dims4()?;
    let d = config.divisor();
    if h % d != 0 || w % d != 0 {
        return Err(shape_err!("input {h}×{w} is not divisible by {d}"));
    }
    if cin != config.in_channels {
        return Err(shape_err!("input has {cin} channels, model expects {}", config.in_channels));
    }
    if params.len() != 2 * config.convs().len() {
        return Err(shape_err!("{} parameter leaves for {} convolutions", params.len(), config.convs().len()));
    }
    let pad = config.kernel / 2;
    let mut p = params.chunks(2);
    let mut conv_relu = |tape: &mut Tape, x: Var| -> Result<Var> {
        let wb = p.next().unwrap();
        let y = tape.conv2d(x, wb[0], wb[1], pad)?;
        Ok(tape.relu(y))
    };
    let mut skips = Vec::new();
    let mut x = input;
    for l in 0..config.depth {
        x = conv_relu(tape, x)?;
        x = conv_relu(tape, x)?;
        if l + 1 < config.depth {
            skips.push(x);
            x = tape.downsample2x(x)?;
        }
    }
    while let Some(skip) = skips.pop() {
        let up = tape.upsample2x(x)?;
        x = tape.concat_channels(up, skip)?;
        x = conv_relu(tape, x)?;
        x = conv_relu(tape, x)?;
    }
    let head = &params[params.len() - 2..];
    tape.conv2d(x, head[0], head[1], 0)
}

/// Convenience forward pass without gradients.
pub fn predict_logits(config: &UNetConfig, weights: &WeightSet, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = weights.leaves(&mut tape, false);
    let x = tape.leaf(images.clone().with_requires_grad(false));
    let out = unet_forward(&mut tape, config, &params, x)?;
    Ok(tape.value(out).clone())
}

/// Exponential moving average of weights. The first update copies.
#[derive(Clone, Debug)]
pub struct EmaState {
    decay: f64,
    shadow: Option<WeightSet>,
    updates: u64,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(invalid!("EMA decay must lie in [0, 1), got {decay}"));
        }
        Ok(EmaState { decay, shadow: None, updates: 0 })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn shadow(&self) -> Option<&WeightSet> {
        self.shadow.as_ref()
    }

    pub fn update(&mut self, live: &WeightSet) -> Result<()> {
        match &mut self.shadow {
            None => self.shadow = Some(live.clone().without_grads()),
            Some(shadow) => {
                shadow.same_layout(live)?;
                let (d, e) = (self.decay as f32, (1.0 - self.decay) as f32);
                for (s, l) in shadow.tensors.iter_mut().zip(&live.tensors) {
                    for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
                        *a = d * *a + e * b;
                    }
                }
            }
        }
        self.updates += 1;
        Ok(())
    }
}

impl WeightSet {
    fn without_grads(mut self) -> Self {
        for t in &mut self.tensors {
            t.zero_grad();
        }
        self
    }
}
