//! Segmentation accuracy, calibration error and significance tests.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;

use crate::error::{invalid, shape_err, Result};
use crate::labels::LabelMap;
use crate::rng::Rng;

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_TACE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Per-pixel class probabilities (`C×H×W`, row-major) with their labels.
#[derive(Clone, Copy, Debug)]
pub struct CalibrationInput<'a> {
    probs: &'a [f32],
    labels: &'a LabelMap,
}

impl<'a> CalibrationInput<'a> {
    pub fn new(probs: &'a [f32], labels: &'a LabelMap) -> Result<Self> {
        let (c, plane) = (labels.num_classes(), labels.height() * labels.width());
        if probs.len() != c * plane {
            return Err(shape_err!("{} probabilities for {c} classes × {plane} pixels", probs.len()));
        }
        for j in 0..plane {
            let mut sum = 0.0f64;
            for k in 0..c {
                let p = probs[k * plane + j];
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid!("probability {p} outside [0, 1] at pixel {j}"));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(invalid!("probabilities at pixel {j} sum to {sum}"));
            }
        }
        Ok(CalibrationInput { probs, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.height() * self.labels.width()
    }

    pub fn prob(&self, class: usize, j: usize) -> f64 {
        self.probs[class * self.num_pixels() + j] as f64
    }

    pub fn labels(&self) -> &LabelMap {
        self.labels
    }

    /// Predicted class and its probability; ties go to the lowest index.
    pub fn top(&self, j: usize) -> (usize, f64) {
        let mut best = (0, self.prob(0, j));
        for k in 1..self.num_classes() {
            let p = self.prob(k, j);
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }

    pub fn predicted_labels(&self) -> LabelMap {
        let data = (0..self.num_pixels()).map(|j| self.top(j).0 as u8).collect();
        LabelMap::new(self.labels.height(), self.labels.width(), self.num_classes(), data).unwrap()
    }
}

/// `2|P∩G| / (|P|+|G|)` for one class; two empty masks score 1.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(shape_err!("label maps {}×{} and {}×{} differ", pred.height(), pred.width(), gt.height(), gt.width()));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// One equal-width confidence bin.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReliabilityBin {
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width bins on `(0, 1]`; bin `b` holds confidences in `(b/n, (b+1)/n]`.
pub fn reliability_bins(input: &CalibrationInput<'_>, n_bins: usize) -> Vec<ReliabilityBin> {
    let mut correct = vec![0usize; n_bins];
    let mut conf = vec![0.0f64; n_bins];
    let mut count = vec![0usize; n_bins];
    let labels = input.labels().data();
    for j in 0..input.num_pixels() {
        let (k, p) = input.top(j);
        let b = ((p * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf[b] += p;
        correct[b] += (labels[j] as usize == k) as usize;
    }
    (0..n_bins)
        .map(|b| match count[b] {
            0 => ReliabilityBin::default(),
            n => ReliabilityBin { count: n, accuracy: correct[b] as f64 / n as f64, confidence: conf[b] / n as f64 },
        })
        .collect()
}

pub fn ece(input: &CalibrationInput<'_>, n_bins: usize) -> f64 {
    let total = input.num_pixels() as f64;
    reliability_bins(input, n_bins)
        .iter()
        .map(|b| b.count as f64 / total * (b.accuracy - b.confidence).abs())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tace {
    pub value: f64,
    /// Set when no prediction in any class reached the threshold.
    pub empty: bool,
}

pub fn tace(input: &CalibrationInput<'_>, n_bins: usize, threshold: f64) -> Tace {
    let labels = input.labels().data();
    let mut gaps = 0.0f64;
    let mut used = 0usize;
    let mut kept: Vec<(f64, bool)> = Vec::with_capacity(input.num_pixels());
    for k in 0..input.num_classes() {
        kept.clear();
        kept.extend(
            (0..input.num_pixels())
                .map(|j| (input.prob(k, j), labels[j] as usize == k))
                .filter(|&(p, _)| p >= threshold),
        );
        kept.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (base, rem) = (kept.len() / n_bins, kept.len() % n_bins);
        let mut start = 0;
        for b in 0..n_bins {
            let size = base + (b < rem) as usize;
            if size == 0 {
                continue;
            }
            let bin = &kept[start..start + size];
            start += size;
            let mean_p = bin.iter().map(|x| x.0).sum::<f64>() / size as f64;
            let freq = bin.iter().filter(|x| x.1).count() as f64 / size as f64;
            gaps += (freq - mean_p).abs();
            used += 1;
        }
    }
    if used == 0 {
        log::warn!("no class probability reached the TACE threshold {threshold}");
        return Tace { value: 0.0, empty: true };
    }
    Tace { value: gaps / used as f64, empty: false }
}

/// Two-sided paired sign-flip test on the mean difference `a − b`.
/// Returns `(1 + #{|t*| ≥ |t|}) / (n_resamples + 1)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], n_resamples: usize, rng: &mut Rng) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(invalid!("paired test needs equal non-empty lists, got {} and {}", a.len(), b.len()));
    }
    if n_resamples == 0 {
        return Err(invalid!("need at least one resample"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = d.iter().sum::<f64>().abs();
    let scale: f64 = d.iter().map(|x| x.abs()).sum();
    // resampled sums reorder the same terms, so compare with a rounding allowance
    let cutoff = observed - 1e-12 * scale;
    let mut hits = 0usize;
    for _ in 0..n_resamples {
        let mut s = 0.0f64;
        for chunk in d.chunks(64) {
            let bits: u64 = rng.random();
            for (i, &x) in chunk.iter().enumerate() {
                s += if bits >> i & 1 == 1 { -x } else { x };
            }
        }
        hits += (s.abs() >= cutoff) as usize;
    }
    Ok((1 + hits) as f64 / (n_resamples + 1) as f64)
}

/// Metrics for one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image: String,
    /// Dice per foreground class `1..C`.
    pub dice: Vec<f64>,
    pub ece: f64,
    pub tace: f64,
}

impl ImageMetrics {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

pub fn evaluate_image(image: &str, input: &CalibrationInput<'_>) -> ImageMetrics {
    let pred = input.predicted_labels();
    let dice = (1..input.num_classes()).map(|c| dice(&pred, input.labels(), c as u8).unwrap()).collect();
    ImageMetrics {
        image: image.to_string(),
        dice,
        ece: ece(input, DEFAULT_BINS),
        tace: tace(input, DEFAULT_BINS, DEFAULT_TACE_THRESHOLD).value,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: impl IntoIterator<Item = f64>) -> MeanStd {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub images: usize,
    pub dice_per_class: Vec<MeanStd>,
    pub dice: MeanStd,
    pub ece: MeanStd,
    pub tace: MeanStd,
}

/// Per-image rows of one evaluation with their provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn aggregate(&self) -> Aggregate {
        aggregate(self.rows.iter())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let classes = self.rows.first().map_or(0, |r| r.dice.len());
        let mut header = String::from("image,method,seed,config_hash");
        for c in 1..=classes {
            write!(header, ",dice_{c}").unwrap();
        }
        writeln!(w, "{header},dice_mean,ece,tace")?;
        for r in &self.rows {
            let mut line = format!("{},{},{},{}", r.image, self.method, self.seed, self.config_hash);
            for d in &r.dice {
                write!(line, ",{d}").unwrap();
            }
            writeln!(w, "{line},{},{},{}", r.mean_dice(), r.ece, r.tace)?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`MetricsReport::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<MetricsReport> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| crate::error::Error::Format("empty metrics file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let classes = cols.iter().filter(|c| c.starts_with("dice_") && **c != "dice_mean").count();
        if cols.len() != 4 + classes + 3 || cols[..4] != ["image", "method", "seed", "config_hash"] {
            return Err(crate::error::Error::Format(format!("unexpected metrics header `{header}`")));
        }
        let mut report = MetricsReport::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || crate::error::Error::Format(format!("malformed metrics row {}", i + 2));
            if f.len() != cols.len() {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            report.method = f[1].to_string();
            report.seed = f[2].parse().map_err(|_| bad())?;
            report.config_hash = f[3].to_string();
            report.rows.push(ImageMetrics {
                image: f[0].to_string(),
                dice: f[4..4 + classes].iter().map(|s| num(s)).collect::<Result<_>>()?,
                ece: num(f[cols.len() - 2])?,
                tace: num(f[cols.len() - 1])?,
            });
        }
        Ok(report)
    }
}

pub fn aggregate<'a>(rows: impl Iterator<Item = &'a ImageMetrics> + Clone) -> Aggregate {
    let classes = rows.clone().next().map_or(0, |r| r.dice.len());
    Aggregate {
        images: rows.clone().count(),
        dice_per_class: (0..classes).map(|c| MeanStd::of(rows.clone().map(|r| r.dice[c]))).collect(),
        dice: MeanStd::of(rows.clone().map(|r| r.mean_dice())),
        ece: MeanStd::of(rows.clone().map(|r| r.ece)),
        tace: MeanStd::of(rows.map(|r| r.tace)),
    }
}

/// Plain-text table in percent; TACE is additionally multiplied by 10.
pub fn render_table(groups: &[(String, Aggregate)]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<12} {:>6} {:>16} {:>16} {:>16}", "method", "images", "dice %", "ece %", "tace % x10").unwrap();
    let cell = |m: MeanStd, k: f64| format!("{:.2} ± {:.2}", 100.0 * k * m.mean, 100.0 * k * m.std);
    for (name, a) in groups {
        writeln!(
            out,
            "{:<12} {:>6} {:>16} {:>16} {:>16}",
            name,
            a.images,
            cell(a.dice, 1.0),
            cell(a.ece, 1.0),
            cell(a.tace, 10.0)
        )
        .unwrap();
    }
    out
}
