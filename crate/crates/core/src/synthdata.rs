//! Synthetic segmentation scenes with controllable boundary ambiguity.
//!
//! Each scene is a set of random ellipses per foreground class. Blurring the
//! class indicators gives a soft label (partial-volume analogue); the image is
//! rendered from the soft label plus noise; the hard label is the argmax of
//! the soft label sampled through a smooth random displacement field, which
//! plays the part of annotator disagreement along boundaries. For straight
//! edges with jitter amplitude equal to the blur width, the soft label is the
//! exact probability of the hard label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::labels::{LabelMap, SoftLabelMap};
use crate::rng::{self, Rng};
use crate::tensor::{io, Tensor};
use crate::transforms::{gaussian_blur, Range};

const FOURIER_FEATURES: usize = 32;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub foreground_classes: usize,
    /// Inclusive range of ellipses drawn per foreground class.
    pub shapes_per_class: [usize; 2],
    /// Ellipse semi-axis lengths in pixels.
    pub semi_axis: Range,
    /// Intensity of background then each foreground class.
    pub contrasts: Vec<f64>,
    pub blur_sigma: Range,
    pub noise_sigma: Range,
    /// Standard deviation in pixels of each displacement component.
    pub jitter: f64,
    /// Correlation length in pixels of the displacement field.
    pub jitter_length: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            foreground_classes: 2,
            shapes_per_class: [1, 2],
            semi_axis: Range::new(6.0, 16.0),
            contrasts: vec![0.2, 0.5, 0.8],
            blur_sigma: Range::point(2.0),
            noise_sigma: Range::point(0.05),
            jitter: 2.0,
            jitter_length: 12.0,
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.foreground_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(invalid!("scene must be at least 4×4"));
        }
        if self.foreground_classes == 0 || self.foreground_classes > 254 {
            return Err(invalid!("foreground_classes must be in 1..=254"));
        }
        if self.shapes_per_class[0] > self.shapes_per_class[1] {
            return Err(invalid!("shapes_per_class min exceeds max"));
        }
        if self.contrasts.len() != self.num_classes() {
            return Err(invalid!("{} contrasts for {} classes", self.contrasts.len(), self.num_classes()));
        }
        if self.contrasts.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid!("contrasts must lie in [0, 1]"));
        }
        let mut sorted = self.contrasts.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[1] - p[0] < 0.1 - 1e-12) {
            return Err(invalid!("class contrasts must differ by at least 0.1"));
        }
        if self.semi_axis.min <= 0.0 || self.blur_sigma.min < 0.0 || self.noise_sigma.min < 0.0 {
            return Err(invalid!("semi-axes must be positive and blur/noise non-negative"));
        }
        if !(self.jitter >= 0.0) || !(self.jitter_length > 0.0) {
            return Err(invalid!("jitter must be non-negative with a positive correlation length"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serialises")
    }

    /// Short SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub hard_label: LabelMap,
    pub soft_label: SoftLabelMap,
    pub seed: u64,
    pub spec_hash: String,
}

fn crisp_scene(rng: &mut Rng, spec: &SceneSpec) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![0u8; h * w];
    for class in 1..=spec.foreground_classes {
        let count = rng.random_range(spec.shapes_per_class[0]..=spec.shapes_per_class[1]);
        for _ in 0..count {
            let cy = h as f64 * rng.random_range(0.2..0.8);
            let cx = w as f64 * rng.random_range(0.2..0.8);
            let a = spec.semi_axis.sample(rng);
            let b = spec.semi_axis.sample(rng);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let (s, c) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let u = (dx * c + dy * s) / a;
                    let v = (-dx * s + dy * c) / b;
                    if u * u + v * v <= 1.0 {
                        data[y * w + x] = class as u8;
                    }
                }
            }
        }
    }
    LabelMap::new(h, w, spec.num_classes(), data).unwrap()
}

fn soften(crisp: &LabelMap, sigma: f64) -> SoftLabelMap {
    let (h, w, c) = (crisp.height(), crisp.width(), crisp.num_classes());
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for class in 0..c {
        let ind: Vec<f32> = crisp.data().iter().map(|&l| (l as usize == class) as u8 as f32).collect();
        data.extend(gaussian_blur(h, w, &ind, sigma));
    }
    for j in 0..plane {
        let total: f64 = (0..c).map(|k| data[k * plane + j] as f64).sum();
        for k in 0..c {
            data[k * plane + j] = (data[k * plane + j] as f64 / total) as f32;
        }
    }
    SoftLabelMap::new(h, w, c, data).unwrap()
}

/// Smooth field with zero mean and per-component standard deviation
/// `amplitude`, built from random Fourier features.
struct Displacement {
    freq: Vec<[f64; 2]>,
    phase: Vec<f64>,
    weight: Vec<f64>,
}

impl Displacement {
    fn sample(rng: &mut Rng, amplitude: f64, length: f64) -> Self {
        let mut freq = Vec::with_capacity(FOURIER_FEATURES);
        let mut phase = Vec::with_capacity(FOURIER_FEATURES);
        for _ in 0..FOURIER_FEATURES {
            let wy: f64 = StandardNormal.sample(rng);
            let wx: f64 = StandardNormal.sample(rng);
            freq.push([wy / length, wx / length]);
            phase.push(rng.random_range(0.0..std::f64::consts::TAU));
        }
        let weight = vec![amplitude * (2.0 / FOURIER_FEATURES as f64).sqrt(); FOURIER_FEATURES];
        Displacement { freq, phase, weight }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        (0..self.freq.len())
            .map(|k| self.weight[k] * (self.freq[k][0] * y + self.freq[k][1] * x + self.phase[k]).cos())
            .sum()
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

fn jittered_argmax(rng: &mut Rng, soft: &SoftLabelMap, spec: &SceneSpec) -> LabelMap {
    if spec.jitter == 0.0 {
        return soft.argmax();
    }
    let (h, w, c) = (soft.height(), soft.width(), soft.num_classes());
    let plane = h * w;
    let fy = Displacement::sample(rng, spec.jitter, spec.jitter_length);
    let fx = Displacement::sample(rng, spec.jitter, spec.jitter_length);
    let mut data = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as f64 + fy.at(y as f64, x as f64), x as f64 + fx.at(y as f64, x as f64));
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..c {
                let p = bilinear(&soft.data()[k * plane..(k + 1) * plane], h, w, sy, sx);
                if p > best.1 {
                    best = (k, p);
                }
            }
            data[y * w + x] = best.0 as u8;
        }
    }
    LabelMap::new(h, w, c, data).unwrap()
}

/// Draws one scene. All randomness comes from `rng`.
pub fn generate_sample(rng: &mut Rng, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let seed: u64 = rng.random();
    let crisp = crisp_scene(rng, spec);
    let sigma = spec.blur_sigma.sample(rng);
    let soft = soften(&crisp, sigma);
    let noise_sigma = spec.noise_sigma.sample(rng);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| invalid!("noise sigma: {e}"))?;
    let (h, w, c) = (spec.height, spec.width, spec.num_classes());
    let plane = h * w;
    let pixels: Vec<f32> = (0..plane)
        .map(|j| {
            let clean: f64 = (0..c).map(|k| spec.contrasts[k] * soft.prob(k, j) as f64).sum();
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (clean + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    let hard = jittered_argmax(rng, &soft, spec);
    Ok(Sample {
        image: Tensor::new(&[1, h, w], pixels)?,
        hard_label: hard,
        soft_label: soft,
        seed,
        spec_hash: spec.hash(),
    })
}

fn sample_rng(seed: u64, split: usize, index: usize) -> Rng {
    rng::stream(seed, &[0x5717, split as u64, index as u64])
}

/// Sample `index` of `split` (0 train, 1 val, 2 test) for a dataset seed.
pub fn dataset_sample(seed: u64, split: usize, index: usize, spec: &SceneSpec) -> Result<Sample> {
    generate_sample(&mut sample_rng(seed, split, index), spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn as_array(&self) -> [usize; 3] {
        [self.train, self.val, self.test]
    }
}

fn sample_paths(dir: &Path, split: &str, index: usize) -> [PathBuf; 3] {
    let base = dir.join(split);
    ["image", "label", "soft"].map(|kind| base.join(format!("{index:04}_{kind}.tnsr")))
}

/// Fails when `dir` exists and is non-empty, unless `force` is set, in which
/// case previously generated splits and manifest are removed first.
pub fn prepare_output_dir(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(invalid!("output directory {} is not empty (use --force to overwrite)", dir.display()));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else if p.exists() {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes `train/`, `val/` and `test/` sample files, `spec.toml` and a
/// `manifest.txt` of `key=value` lines including one content hash per sample.
pub fn make_dataset(dir: &Path, seed: u64, counts: SplitCounts, spec: &SceneSpec, force: bool) -> Result<()> {
    spec.validate()?;
    if counts.as_array().iter().any(|&n| n == 0) {
        return Err(invalid!("every split needs at least one sample"));
    }
    prepare_output_dir(dir, force, &["train", "val", "test", "manifest.txt", "spec.toml"])?;
    let mut manifest = BTreeMap::new();
    for (s, (&split, &n)) in SPLITS.iter().zip(&counts.as_array()).enumerate() {
        fs::create_dir_all(dir.join(split))?;
        let hashes = (0..n)
            .into_par_iter()
            .map(|i| -> Result<String> {
                let sample = dataset_sample(seed, s, i, spec)?;
                let blobs = [
                    &sample.image,
                    &sample.hard_label.to_tensor(),
                    &sample.soft_label.to_tensor(),
                ]
                .map(|t| {
                    let mut buf = Vec::new();
                    io::write_tnsr(&mut buf, t).map(|_| buf)
                });
                let mut digest = Sha256::new();
                for (path, blob) in sample_paths(dir, split, i).iter().zip(blobs) {
                    let blob = blob?;
                    digest.update(&blob);
                    fs::write(path, blob)?;
                }
                Ok(hex::encode(digest.finalize()))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, h) in hashes.into_iter().enumerate() {
            manifest.insert(format!("sample.{split}.{i:04}"), h);
        }
    }
    let mut text = String::new();
    text.push_str("format=calibseg-synth-1\n");
    text.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("seed={seed}\nspec_hash={}\n", spec.hash()));
    text.push_str(&format!("n_train={}\nn_val={}\nn_test={}\n", counts.train, counts.val, counts.test));
    for (k, v) in &manifest {
        text.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join("spec.toml"), spec.to_toml())?;
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {} has no `=`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// A dataset directory written by [`make_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub spec: SceneSpec,
    pub seed: u64,
    pub counts: SplitCounts,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", manifest_path.display())))?;
        let m = parse_manifest(&text)?;
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}`"))) };
        let spec = SceneSpec::from_toml(&fs::read_to_string(dir.join("spec.toml"))?)
            .map_err(|e| Error::Format(format!("spec.toml: {e}")))?;
        if &spec.hash() != get("spec_hash")? {
            return Err(Error::Format("spec.toml does not match the manifest hash".into()));
        }
        Ok(Dataset {
            seed: get("seed")?.parse().map_err(|_| Error::Format("bad `seed`".into()))?,
            counts: SplitCounts { train: num("n_train")?, val: num("n_val")?, test: num("n_test")? },
            spec,
            dir,
        })
    }

    pub fn split_len(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.counts.train),
            "val" => Ok(self.counts.val),
            "test" => Ok(self.counts.test),
            _ => Err(invalid!("unknown split `{split}`")),
        }
    }

    pub fn load_sample(&self, split: &str, index: usize) -> Result<Sample> {
        if index >= self.split_len(split)? {
            return Err(invalid!("{split} has no sample {index}"));
        }
        let [img, lab, soft] = sample_paths(&self.dir, split, index);
        let image = io::load(img)?;
        let (h, w) = (self.spec.height, self.spec.width);
        if image.shape() != [1, h, w] {
            return Err(Error::Format(format!("image {index} in {split} has shape {:?}", image.shape())));
        }
        let hard_label = LabelMap::from_tensor(&io::load(lab)?, self.spec.num_classes())?;
        let soft_label = SoftLabelMap::from_tensor(&io::load(soft)?)?;
        Ok(Sample { image, hard_label, soft_label, seed: self.seed, spec_hash: self.spec.hash() })
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Sample>> {
        (0..self.split_len(split)?).map(|i| self.load_sample(split, i)).collect()
    }
}
