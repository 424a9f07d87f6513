//! Training objectives.
//!
//! Per-pixel supervised cross-entropy `L_s` and logit consistency
//! `L_c = Σ_c (z_c − z'_c)²` are combined as `L_s + λ L_c` with either a
//! scalar `λ` or a per-pixel map. Both terms are averaged over the pixels
//! their masks mark valid, so `λ` does not depend on image size. Baseline
//! calibration losses (spatially varying label smoothing, margin hinge) and
//! the binary loss-landscape generator live here too.

use std::io::Write;
use std::sync::Arc;

use crate::distlambda::LambdaMap;
use crate::error::{invalid, shape_err, Result};
use crate::labels::{LabelMap, SoftLabelMap};
use crate::tensor::{Tape, Tensor, Var};

/// Per-pixel view of an assembled loss, flattened over `N·H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelLossMaps {
    pub ls: Vec<f64>,
    pub lc: Vec<f64>,
    /// Pixels that contribute to `L_s`.
    pub supervised_mask: Vec<bool>,
    /// Pixels valid in both branches; only these contribute to `L_c`.
    pub valid_mask: Vec<bool>,
    pub total: f64,
}

/// A loss assembled on the tape together with its per-pixel maps.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Mean supervised loss.
    pub supervised: f64,
    /// Mean (unweighted) consistency loss over valid pixels.
    pub consistency: f64,
    pub maps: PixelLossMaps,
}

/// Which pixels count towards each term. `None` means all of them.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossMasks<'a> {
    pub supervised: Option<&'a [bool]>,
    pub consistency: Option<&'a [bool]>,
}

fn logit_dims(tape: &Tape, logits: Var) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = tape.value(logits).dims4()?;
    Ok((n, c, h * w))
}

fn resolve_mask(mask: Option<&[bool]>, pixels: usize) -> Result<Vec<bool>> {
    match mask {
        Some(m) if m.len() != pixels => Err(shape_err!("mask has {} entries for {pixels} pixels", m.len())),
        Some(m) => Ok(m.to_vec()),
        None => Ok(vec![true; pixels]),
    }
}

/// Per-pixel weights `λ_j · [mask_j] / |mask|`.
fn mean_weights(mask: &[bool], lambda: impl Fn(usize) -> f64) -> Arc<[f32]> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return vec![0.0f32; mask.len()].into();
    }
    let count = count as f64;
    mask.iter()
        .enumerate()
        .map(|(j, &m)| if m { (lambda(j) / count) as f32 } else { 0.0 })
        .collect()
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let (sum, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn hard_targets(labels: &[LabelMap], n: usize, c: usize, plane: usize) -> Result<Arc<[f32]>> {
    if labels.len() != n {
        return Err(shape_err!("{} label maps for a batch of {n}", labels.len()));
    }
    let mut out = Vec::with_capacity(n * c * plane);
    for l in labels {
        if l.num_classes() != c || l.height() * l.width() != plane {
            return Err(shape_err!(
                "label map {}×{} with {} classes does not match logits ({c} classes, {plane} pixels)",
                l.height(),
                l.width(),
                l.num_classes()
            ));
        }
        out.extend(l.one_hot());
    }
    Ok(out.into())
}

fn soft_targets(targets: &[SoftLabelMap], n: usize, c: usize, plane: usize) -> Result<Arc<[f32]>> {
    if targets.len() != n {
        return Err(shape_err!("{} target maps for a batch of {n}", targets.len()));
    }
    let mut out = Vec::with_capacity(n * c * plane);
    for t in targets {
        if t.num_classes() != c || t.height() * t.width() != plane {
            return Err(shape_err!("soft targets do not match logits"));
        }
        out.extend_from_slice(t.data());
    }
    Ok(out.into())
}

/// Mean pixel-wise cross-entropy against hard labels. Returns the scalar and
/// the unweighted per-pixel losses.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[LabelMap], mask: Option<&[bool]>) -> Result<(Var, Vec<f64>)> {
    let (n, c, plane) = logit_dims(tape, logits)?;
    let targets = hard_targets(labels, n, c, plane)?;
    let mask = resolve_mask(mask, n * plane)?;
    let v = tape.soft_cross_entropy(logits, targets, mean_weights(&mask, |_| 1.0))?;
    Ok((v, tape.pixel_map(v).unwrap().to_vec()))
}

/// Mean cross-entropy against soft targets, `−Σ_c t_c log σ(z)_c`.
pub fn soft_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[SoftLabelMap],
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<f64>)> {
    let (n, c, plane) = logit_dims(tape, logits)?;
    let t = soft_targets(targets, n, c, plane)?;
    let mask = resolve_mask(mask, n * plane)?;
    let v = tape.soft_cross_entropy(logits, t, mean_weights(&mask, |_| 1.0))?;
    Ok((v, tape.pixel_map(v).unwrap().to_vec()))
}

/// Mean over valid pixels of `Σ_c (z_a − z_b)²`. Gradients reach both branches.
pub fn consistency_sq(tape: &mut Tape, a: Var, b: Var, mask: Option<&[bool]>) -> Result<(Var, Vec<f64>)> {
    let (n, _, plane) = logit_dims(tape, a)?;
    let mask = resolve_mask(mask, n * plane)?;
    let v = tape.squared_diff(a, b, mean_weights(&mask, |_| 1.0))?;
    let mut map = tape.pixel_map(v).unwrap().to_vec();
    map.iter_mut().zip(&mask).filter(|(_, &m)| !m).for_each(|(v, _)| *v = 0.0);
    Ok((v, map))
}

fn combine(
    tape: &mut Tape,
    a: Var,
    b: Var,
    supervised: (Var, Vec<f64>),
    masks: LossMasks<'_>,
    lambda: impl Fn(usize) -> f64,
) -> Result<LossTerms> {
    let (n, _, plane) = logit_dims(tape, a)?;
    if tape.value(b).shape() != tape.value(a).shape() {
        return Err(shape_err!("branch shapes differ: {:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()));
    }
    let sup_mask = resolve_mask(masks.supervised, n * plane)?;
    let valid = resolve_mask(masks.consistency, n * plane)?;
    let (ls_var, ls) = supervised;
    let lc_var = tape.squared_diff(a, b, mean_weights(&valid, &lambda))?;
    let mut lc = tape.pixel_map(lc_var).unwrap().to_vec();
    lc.iter_mut().zip(&valid).filter(|(_, &m)| !m).for_each(|(v, _)| *v = 0.0);
    let total = tape.add(ls_var, lc_var)?;
    Ok(LossTerms {
        total,
        supervised: tape.scalar(ls_var),
        consistency: masked_mean(&lc, &valid),
        maps: PixelLossMaps { ls, lc, supervised_mask: sup_mask, valid_mask: valid, total: tape.scalar(total) },
    })
}

/// `mean(L_s) + λ · mean_valid(L_c)` with the supervised term on branch `a` only.
pub fn cr_total(
    tape: &mut Tape,
    a: Var,
    b: Var,
    labels: &[LabelMap],
    lambda: f64,
    masks: LossMasks<'_>,
) -> Result<LossTerms> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid!("consistency weight must be finite and non-negative, got {lambda}"));
    }
    let sup = cross_entropy(tape, a, labels, masks.supervised)?;
    combine(tape, a, b, sup, masks, |_| lambda)
}

/// `mean(L_s) + mean_valid(λ(r_j) · L_c^j)` with one weight map per sample.
pub fn bwcr_total(
    tape: &mut Tape,
    a: Var,
    b: Var,
    labels: &[LabelMap],
    lambda_maps: &[&LambdaMap],
    masks: LossMasks<'_>,
) -> Result<LossTerms> {
    let (n, _, plane) = logit_dims(tape, a)?;
    if lambda_maps.len() != n || lambda_maps.iter().any(|m| m.data.len() != plane) {
        return Err(shape_err!("lambda maps do not match a batch of {n} with {plane} pixels"));
    }
    let sup = cross_entropy(tape, a, labels, masks.supervised)?;
    combine(tape, a, b, sup, masks, |j| lambda_maps[j / plane].data[j % plane])
}

/// Extends a supervised-only loss (no second branch) into [`LossTerms`].
pub fn supervised_only(tape: &Tape, loss: Var, ls: Vec<f64>, mask: Option<&[bool]>) -> Result<LossTerms> {
    let mask = resolve_mask(mask, ls.len())?;
    Ok(LossTerms {
        total: loss,
        supervised: tape.scalar(loss),
        consistency: 0.0,
        maps: PixelLossMaps {
            lc: vec![0.0; ls.len()],
            ls,
            valid_mask: mask.clone(),
            supervised_mask: mask,
            total: tape.scalar(loss),
        },
    })
}

/// Normalised 3×3 Gaussian used for spatially varying label smoothing.
pub fn svls_kernel(sigma: f64) -> [[f64; 3]; 3] {
    if sigma <= 0.0 {
        return [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
    }
    let mut k = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let r2 = ((dy as f64 - 1.0).powi(2) + (dx as f64 - 1.0).powi(2)) / (2.0 * sigma * sigma);
            *v = (-r2).exp();
            total += *v;
        }
    }
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

/// Soft targets from a one-hot label volume blurred per class by the 3×3
/// kernel (zero outside the image) and renormalised per pixel.
pub fn svls_targets(labels: &LabelMap, sigma: f64) -> SoftLabelMap {
    let (h, w, c) = (labels.height(), labels.width(), labels.num_classes());
    let k = svls_kernel(sigma);
    let plane = h * w;
    let mut acc = vec![0.0f64; c * plane];
    for y in 0..h {
        for x in 0..w {
            for (dy, row) in k.iter().enumerate() {
                for (dx, &kv) in row.iter().enumerate() {
                    let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let cls = labels.get(yy as usize, xx as usize) as usize;
                    acc[cls * plane + y * w + x] += kv;
                }
            }
        }
    }
    let mut data = vec![0.0f32; c * plane];
    for j in 0..plane {
        let total: f64 = (0..c).map(|cls| acc[cls * plane + j]).sum();
        for cls in 0..c {
            data[cls * plane + j] = (acc[cls * plane + j] / total) as f32;
        }
    }
    SoftLabelMap::new(h, w, c, data).unwrap()
}

/// Mean over pixels of `Σ_c max(0, max_k z_k − z_c − margin)`.
pub fn mls_penalty(tape: &mut Tape, logits: Var, margin: f64, mask: Option<&[bool]>) -> Result<(Var, Vec<f64>)> {
    if !(margin > 0.0) {
        return Err(invalid!("margin must be positive, got {margin}"));
    }
    let (n, _, plane) = logit_dims(tape, logits)?;
    let mask = resolve_mask(mask, n * plane)?;
    let v = tape.margin_hinge(logits, margin as f32, mean_weights(&mask, |_| 1.0))?;
    Ok((v, tape.pixel_map(v).unwrap().to_vec()))
}

/// Binary single-pixel losses on a `z × z'` grid (label = foreground class).
#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub z: Vec<f64>,
    pub lambda: f64,
    /// Row-major `n×n`; row index is `z`, column index is `z'`.
    pub ls: Vec<f64>,
    pub lc: Vec<f64>,
    pub total: Vec<f64>,
}

/// `−log σ(z) = log(1 + e^{−z})`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn loss_landscape(z_min: f64, z_max: f64, n: usize, lambda: f64) -> Result<Landscape> {
    if n < 2 || !(z_min < z_max) {
        return Err(invalid!("landscape needs n >= 2 and z_min < z_max"));
    }
    let z: Vec<f64> = (0..n).map(|i| z_min + (z_max - z_min) * i as f64 / (n - 1) as f64).collect();
    let mut ls = Vec::with_capacity(n * n);
    let mut lc = Vec::with_capacity(n * n);
    let mut total = Vec::with_capacity(n * n);
    for &zi in &z {
        for &zp in &z {
            let s = neg_log_sigmoid(zi);
            let c = (zi - zp) * (zi - zp);
            ls.push(s);
            lc.push(c);
            total.push(s + lambda * c);
        }
    }
    Ok(Landscape { z, lambda, ls, lc, total })
}

impl Landscape {
    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Grid index `(i_z, i_z')` of the smallest total loss.
    pub fn argmin_total(&self) -> (usize, usize) {
        let (idx, _) = self
            .total
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        (idx / self.n(), idx % self.n())
    }

    pub fn tensors(&self) -> [Tensor; 3] {
        let n = self.n();
        let t = |v: &[f64]| Tensor::new(&[n, n], v.iter().map(|&x| x as f32).collect()).unwrap();
        [t(&self.ls), t(&self.lc), t(&self.total)]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "z,z_prime,ls,lc,total")?;
        let n = self.n();
        for i in 0..n {
            for k in 0..n {
                let j = i * n + k;
                writeln!(w, "{},{},{},{},{}", self.z[i], self.z[k], self.ls[j], self.lc[j], self.total[j])?;
            }
        }
        Ok(())
    }
}
