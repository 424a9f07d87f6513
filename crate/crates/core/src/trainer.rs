//! Training loop, optimiser and evaluation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distlambda::{boundary_distance, lambda_map, LambdaMap, LambdaParams};
use crate::error::{invalid, shape_err, Error, Result};
use crate::labels::{LabelMap, SoftLabelMap};
use crate::losses::{self, LossMasks, LossTerms};
use crate::metrics::{evaluate_image, CalibrationInput, ImageMetrics, MetricsReport};
use crate::model::{init_weights, predict_logits, unet_forward, EmaState, UNetConfig, WeightSet};
use crate::rng;
use crate::synthdata::{Dataset, Sample};
use crate::tensor::kernels::softmax_channels;
use crate::tensor::{Tape, Tensor, Var};
use crate::transforms::{equivariant_forward, TransformRanges, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Cross-entropy on untransformed images.
    Baseline,
    /// Cross-entropy on one augmented view.
    Da,
    /// Augmented cross-entropy plus a constant-weight logit consistency term.
    Cr,
    /// Consistency weighted per pixel by distance to the label boundary.
    Bwcr,
    /// Spatially varying label smoothing on one augmented view.
    Svls,
    /// Cross-entropy plus a logit margin penalty on one augmented view.
    Mls,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Baseline, Method::Da, Method::Cr, Method::Bwcr, Method::Svls, Method::Mls];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Da => "da",
            Method::Cr => "cr",
            Method::Bwcr => "bwcr",
            Method::Svls => "svls",
            Method::Mls => "mls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid!("unknown method `{s}` (expected baseline, da, cr, bwcr, svls or mls)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Dataset directory written by the `synth` command.
    pub data: PathBuf,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub validation_interval: usize,
    pub ema_decay: f64,
    /// Consistency weight for `cr`.
    pub lambda: f64,
    /// Replaces the distance-based map with a constant for `bwcr`.
    pub lambda_constant: Option<f64>,
    pub svls_sigma: f64,
    pub mls_margin: f64,
    pub mls_weight: f64,
    pub model: UNetConfig,
    pub lambda_map: LambdaParams,
    pub transforms: TransformRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Bwcr,
            data: PathBuf::from("data"),
            seed: 0,
            iterations: 2000,
            batch_size: 16,
            lr_start: 1e-4,
            lr_end: 1e-7,
            validation_interval: 100,
            ema_decay: 0.999,
            lambda: 1.0,
            lambda_constant: None,
            svls_sigma: 1.0,
            mls_margin: 10.0,
            mls_weight: 0.1,
            model: UNetConfig::default(),
            lambda_map: LambdaParams::default(),
            transforms: TransformRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }

    /// Short SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.validation_interval == 0 {
            return Err(Error::Config("iterations, batch_size and validation_interval must be positive".into()));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if let Some(c) = self.lambda_constant {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("lambda_constant must be finite and non-negative, got {c}")));
            }
        }
        if self.svls_sigma < 0.0 || !(self.mls_margin > 0.0) || self.mls_weight < 0.0 {
            return Err(Error::Config("svls_sigma and mls_weight must be non-negative, mls_margin positive".into()));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.lambda_map.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.transforms.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Learning rate at iteration `t`, linear from `lr_start` to `lr_end`.
pub fn lr_schedule(t: usize, config: &TrainConfig) -> Result<f64> {
    if t >= config.iterations {
        return Err(invalid!("iteration {t} outside 0..{}", config.iterations));
    }
    if config.iterations == 1 {
        return Ok(config.lr_start);
    }
    Ok(config.lr_start + (config.lr_end - config.lr_start) * t as f64 / (config.iterations - 1) as f64)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &WeightSet) -> Self {
        let zeros = || weights.tensors().iter().map(|t| vec![0.0f32; t.numel()]).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }

    /// One bias-corrected Adam update. Non-finite gradients leave everything
    /// untouched and return an error.
    pub fn step(&mut self, weights: &mut WeightSet, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(shape_err!("gradients do not match the optimiser state"));
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {} is not finite", weights.names()[i])));
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((w, g), m), v) in weights.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
                let vn = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub ls: f64,
    pub lc: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRecord {
    pub iter: usize,
    pub dice: f64,
    pub ece: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub iterations: Vec<IterRecord>,
    pub validations: Vec<ValRecord>,
    /// Validation record whose EMA weights were kept.
    pub best: Option<ValRecord>,
}

impl TrainLog {
    pub fn write_iterations<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,ls,lc,total,lr")?;
        for r in &self.iterations {
            writeln!(w, "{},{},{},{},{}", r.iter, r.ls, r.lc, r.total, r.lr)?;
        }
        Ok(())
    }

    pub fn write_validations<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,val_dice,val_ece")?;
        for r in &self.validations {
            writeln!(w, "{},{},{}", r.iter, r.dice, r.ece)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// EMA weights at the best validation Dice.
    pub best: WeightSet,
    /// EMA weights after the last iteration.
    pub final_ema: WeightSet,
    pub log: TrainLog,
}

/// Per-sample training targets prepared once before the loop.
struct Targets {
    lambda: Vec<LambdaMap>,
    svls: Vec<SoftLabelMap>,
}

fn prepare_targets(config: &TrainConfig, train: &[Sample]) -> Result<Targets> {
    let (h, w) = (train[0].hard_label.height(), train[0].hard_label.width());
    let lambda = match (config.method, config.lambda_constant) {
        (Method::Bwcr, Some(c)) => vec![LambdaMap::constant(h, w, c); train.len()],
        (Method::Bwcr, None) => train
            .par_iter()
            .map(|s| lambda_map(&boundary_distance(&s.hard_label), &config.lambda_map))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let svls = if config.method == Method::Svls {
        train.par_iter().map(|s| losses::svls_targets(&s.hard_label, config.svls_sigma)).collect()
    } else {
        Vec::new()
    };
    Ok(Targets { lambda, svls })
}

const STREAM_ORDER: u64 = 0x0de1;
const STREAM_VIEW: u64 = 0x7e1e;

/// Training-set indices of iteration `t`: consecutive slices of a fresh
/// permutation per epoch, with each index's epoch.
fn batch_indices(seed: u64, t: usize, batch: usize, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for k in 0..batch {
        let pos = t * batch + k;
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, &[STREAM_ORDER, epoch as u64]));
            cached = Some((epoch, perm));
        }
        out.push((epoch, cached.as_ref().unwrap().1[pos % n]));
    }
    out
}

fn check_samples(config: &TrainConfig, samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid!("{what} set is empty"));
    }
    let d = config.model.divisor();
    for s in samples {
        let [c, h, w] = match s.image.shape() {
            &[c, h, w] => [c, h, w],
            other => return Err(shape_err!("{what} image has shape {other:?}")),
        };
        if c != config.model.in_channels || h % d != 0 || w % d != 0 {
            return Err(shape_err!("{what} image {c}×{h}×{w} does not fit the model (channels {}, divisor {d})", config.model.in_channels));
        }
        if s.hard_label.num_classes() != config.model.num_classes || s.hard_label.height() != h || s.hard_label.width() != w {
            return Err(shape_err!("{what} labels do not match the model's {} classes", config.model.num_classes));
        }
    }
    Ok(())
}

/// Assembles the method's loss for one batch on `tape`.
fn batch_loss(
    config: &TrainConfig,
    tape: &mut Tape,
    params: &[Var],
    images: &[Tensor],
    labels: &[LabelMap],
    views: &[(View, View)],
    lambda: &[&LambdaMap],
    svls: &[SoftLabelMap],
) -> Result<LossTerms> {
    let model = config.model;
    let net = |tape: &mut Tape, x: Var| unet_forward(tape, &model, params, x);
    let view_a: Vec<View> = views.iter().map(|v| v.0).collect();
    if config.method == Method::Baseline {
        let input = tape.leaf(Tensor::stack(images)?);
        let logits = net(tape, input)?;
        let (loss, ls) = losses::cross_entropy(tape, logits, labels, None)?;
        return losses::supervised_only(tape, loss, ls, None);
    }
    let (a, mask_a) = equivariant_forward(tape, net, images, &view_a)?;
    let sup = Some(&mask_a[..]);
    match config.method {
        Method::Da => {
            let (loss, ls) = losses::cross_entropy(tape, a, labels, sup)?;
            losses::supervised_only(tape, loss, ls, sup)
        }
        Method::Svls => {
            let (loss, ls) = losses::soft_cross_entropy(tape, a, svls, sup)?;
            losses::supervised_only(tape, loss, ls, sup)
        }
        Method::Mls => {
            let (ce, ls) = losses::cross_entropy(tape, a, labels, sup)?;
            let (pen, _) = losses::mls_penalty(tape, a, config.mls_margin, sup)?;
            let pen = tape.scale(pen, config.mls_weight as f32);
            let total = tape.add(ce, pen)?;
            let mut terms = losses::supervised_only(tape, total, ls, sup)?;
            terms.supervised = tape.scalar(ce);
            Ok(terms)
        }
        Method::Cr | Method::Bwcr => {
            let view_b: Vec<View> = views.iter().map(|v| v.1).collect();
            let net_b = |tape: &mut Tape, x: Var| unet_forward(tape, &model, params, x);
            let (b, mask_b) = equivariant_forward(tape, net_b, images, &view_b)?;
            let both: Vec<bool> = mask_a.iter().zip(&mask_b).map(|(&x, &y)| x && y).collect();
            let masks = LossMasks { supervised: sup, consistency: Some(&both) };
            if config.method == Method::Cr {
                losses::cr_total(tape, a, b, labels, config.lambda, masks)
            } else {
                losses::bwcr_total(tape, a, b, labels, lambda, masks)
            }
        }
        Method::Baseline => unreachable!(),
    }
}

/// Trains on in-memory samples.
pub fn train_on(config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(config, train, "training")?;
    check_samples(config, val, "validation")?;
    let targets = prepare_targets(config, train)?;
    let (h, w) = (train[0].hard_label.height(), train[0].hard_label.width());
    let mut weights = init_weights(&config.model, config.seed)?;
    let mut adam = AdamState::new(&weights);
    let mut ema = EmaState::new(config.ema_decay)?;
    let mut log = TrainLog::default();
    let mut best: Option<(ValRecord, WeightSet)> = None;

    for t in 0..config.iterations {
        let lr = lr_schedule(t, config)?;
        let picks = batch_indices(config.seed, t, config.batch_size, train.len());
        let views: Vec<(View, View)> = picks
            .iter()
            .map(|&(epoch, i)| {
                let mut r = rng::stream(config.seed, &[STREAM_VIEW, epoch as u64, i as u64]);
                let a = View::sample(&mut r, &config.transforms, h, w);
                let b = View::sample(&mut r, &config.transforms, h, w);
                (a, b)
            })
            .collect();
        let images: Vec<Tensor> = picks.iter().map(|&(_, i)| train[i].image.clone()).collect();
        let labels: Vec<LabelMap> = picks.iter().map(|&(_, i)| train[i].hard_label.clone()).collect();
        let lambda: Vec<&LambdaMap> = if targets.lambda.is_empty() {
            Vec::new()
        } else {
            picks.iter().map(|&(_, i)| &targets.lambda[i]).collect()
        };
        let svls: Vec<SoftLabelMap> = if targets.svls.is_empty() {
            Vec::new()
        } else {
            picks.iter().map(|&(_, i)| targets.svls[i].clone()).collect()
        };

        let mut tape = Tape::new();
        let params = weights.leaves(&mut tape, true);
        let terms = batch_loss(config, &mut tape, &params, &images, &labels, &views, &lambda, &svls)?;
        let total = tape.scalar(terms.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss became {total} at iteration {t}")));
        }
        tape.backward(terms.total)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .zip(weights.tensors())
            .map(|(&p, wt)| tape.grad(p).map_or_else(|| vec![0.0; wt.numel()], <[f32]>::to_vec))
            .collect();
        drop(tape);
        adam.step(&mut weights, &grads, lr)
            .map_err(|e| Error::NonFinite(format!("iteration {t}: {e}")))?;
        ema.update(&weights)?;
        log.iterations.push(IterRecord { iter: t, ls: terms.supervised, lc: terms.consistency, total, lr });

        if (t + 1) % config.validation_interval == 0 || t + 1 == config.iterations {
            let shadow = ema.shadow().expect("updated at least once");
            let report = evaluate_samples(&config.model, shadow, val)?;
            let agg = report.aggregate();
            let rec = ValRecord { iter: t, dice: agg.dice.mean, ece: agg.ece.mean };
            log::info!("iter {t}: loss {total:.5} val dice {:.4} val ece {:.4}", rec.dice, rec.ece);
            log.validations.push(rec);
            if best.as_ref().is_none_or(|(b, _)| rec.dice > b.dice) {
                best = Some((rec, shadow.clone()));
            }
        }
    }
    let (best_rec, best_weights) = best.expect("validated at least once");
    log.best = Some(best_rec);
    Ok(TrainOutcome { best: best_weights, final_ema: ema.shadow().unwrap().clone(), log })
}

/// Trains on the dataset named by `config.data`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = Dataset::open(&config.data)?;
    let train = ds.load_split("train")?;
    let val = ds.load_split("val")?;
    train_on(config, &train, &val)
}

/// Softmax probabilities `C×H×W` for one `1×H×W` image.
pub fn predict_probs(config: &UNetConfig, weights: &WeightSet, image: &Tensor) -> Result<Vec<f32>> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        other => return Err(shape_err!("expected a C×H×W image, got {other:?}")),
    };
    let x = image.clone().reshape(&[1, c, h, w])?;
    let z = predict_logits(config, weights, &x)?;
    Ok(softmax_channels(1, config.num_classes, h * w, z.data()))
}

/// Per-image metrics of `weights` on `samples`, without test-time transforms.
pub fn evaluate_samples(config: &UNetConfig, weights: &WeightSet, samples: &[Sample]) -> Result<MetricsReport> {
    config.check(weights)?;
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<ImageMetrics> {
            let probs = predict_probs(config, weights, &s.image)?;
            let input = CalibrationInput::new(&probs, &s.hard_label)?;
            Ok(evaluate_image(&format!("{i:04}"), &input))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { rows, ..Default::default() })
}

/// Metrics of the generator's latent soft labels used directly as predictions.
pub fn evaluate_soft_oracle(samples: &[Sample]) -> Result<MetricsReport> {
    let rows = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<ImageMetrics> {
            let input = CalibrationInput::new(s.soft_label.data(), &s.hard_label)?;
            Ok(evaluate_image(&format!("{i:04}"), &input))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { method: "oracle".into(), rows, ..Default::default() })
}

/// Evaluates a checkpoint on one split of a dataset directory.
pub fn evaluate(weights: &WeightSet, dataset: &Dataset, split: &str) -> Result<MetricsReport> {
    let config = UNetConfig::infer(weights)?;
    if config.num_classes != dataset.spec.num_classes() {
        return Err(shape_err!(
            "checkpoint predicts {} classes but the dataset has {}",
            config.num_classes,
            dataset.spec.num_classes()
        ));
    }
    let samples = dataset.load_split(split)?;
    evaluate_samples(&config, weights, &samples)
}
