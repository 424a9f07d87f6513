//! Stochastic intensity transforms, invertible affine warps and the
//! equivariant wrapper that runs a network on a transformed view and maps its
//! logits back to the original frame.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::labels::LabelMap;
use crate::rng::{self, Rng};
use crate::tensor::kernels::WarpPlan;
use crate::tensor::{Tape, Tensor, Var};

/// Closed interval `[min, max]`, written as a two-element array in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Range { min: v, max: v }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let u: f64 = rng.random();
        self.min + (self.max - self.min) * u
    }
}

impl TryFrom<[f64; 2]> for Range {
    type Error = String;

    fn try_from(v: [f64; 2]) -> std::result::Result<Self, String> {
        if !(v[0] <= v[1]) {
            return Err(format!("range [{}, {}] has min > max", v[0], v[1]));
        }
        Ok(Range::new(v[0], v[1]))
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.min, r.max]
    }
}

/// Probability of applying each sub-transform to a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApplyProbabilities {
    pub gamma: f64,
    pub scale: f64,
    pub shift: f64,
    pub blur: f64,
    pub sharpen: f64,
    pub noise: f64,
    pub affine: f64,
}

impl ApplyProbabilities {
    pub const fn uniform(p: f64) -> Self {
        ApplyProbabilities { gamma: p, scale: p, shift: p, blur: p, sharpen: p, noise: p, affine: p }
    }

    fn all(&self) -> [f64; 7] {
        [self.gamma, self.scale, self.shift, self.blur, self.sharpen, self.noise, self.affine]
    }
}

impl Default for ApplyProbabilities {
    fn default() -> Self {
        Self::uniform(0.5)
    }
}

/// Parameter ranges for both transform families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformRanges {
    pub gamma: Range,
    pub intensity_scale: Range,
    pub intensity_shift: Range,
    pub blur_sigma: Range,
    pub sharpen_amount: Range,
    pub noise_sigma: Range,
    pub rotation_deg: Range,
    pub geometric_scale: Range,
    /// Translation as a fraction of the image side.
    pub translation: Range,
    pub probability: ApplyProbabilities,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            gamma: Range::new(0.5, 2.0),
            intensity_scale: Range::new(0.8, 1.2),
            intensity_shift: Range::new(-0.1, 0.1),
            blur_sigma: Range::new(0.25, 1.5),
            sharpen_amount: Range::new(0.1, 0.5),
            noise_sigma: Range::new(0.01, 0.1),
            rotation_deg: Range::new(-15.0, 15.0),
            geometric_scale: Range::new(0.9, 1.1),
            translation: Range::new(-0.1, 0.1),
            probability: ApplyProbabilities::default(),
        }
    }
}

impl TransformRanges {
    /// Ranges that always produce identity transforms.
    pub fn identity() -> Self {
        TransformRanges { probability: ApplyProbabilities::uniform(0.0), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("gamma", self.gamma),
            ("intensity_scale", self.intensity_scale),
            ("intensity_shift", self.intensity_shift),
            ("blur_sigma", self.blur_sigma),
            ("sharpen_amount", self.sharpen_amount),
            ("noise_sigma", self.noise_sigma),
            ("rotation_deg", self.rotation_deg),
            ("geometric_scale", self.geometric_scale),
            ("translation", self.translation),
        ];
        for (name, r) in named {
            if !(r.min <= r.max) || !r.min.is_finite() || !r.max.is_finite() {
                return Err(invalid!("{name} range [{}, {}] is invalid", r.min, r.max));
            }
        }
        if self.gamma.min < 0.25 || self.gamma.max > 4.0 {
            return Err(invalid!("gamma range must lie within [0.25, 4]"));
        }
        for (name, r) in [("blur_sigma", self.blur_sigma), ("sharpen_amount", self.sharpen_amount), ("noise_sigma", self.noise_sigma)] {
            if r.min < 0.0 {
                return Err(invalid!("{name} must be non-negative"));
            }
        }
        if self.geometric_scale.min <= 0.0 {
            return Err(invalid!("geometric scale must be positive"));
        }
        if self.probability.all().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid!("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sampled intensity transform. Disabled steps hold their identity value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityParams {
    pub gamma: f64,
    pub scale: f64,
    pub shift: f64,
    pub blur_sigma: f64,
    pub sharpen_amount: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl IntensityParams {
    pub const IDENTITY: IntensityParams = IntensityParams {
        gamma: 1.0,
        scale: 1.0,
        shift: 0.0,
        blur_sigma: 0.0,
        sharpen_amount: 0.0,
        noise_sigma: 0.0,
        noise_seed: 0,
    };

    pub fn is_identity(&self) -> bool {
        IntensityParams { noise_seed: 0, ..*self } == Self::IDENTITY
    }
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

fn draw(rng: &mut Rng, p: f64, range: Range, identity: f64) -> f64 {
    // both draws always happen so the stream position does not depend on p
    let on = rng.random::<f64>() < p;
    let v = range.sample(rng);
    if on {
        v
    } else {
        identity
    }
}

pub fn sample_intensity(rng: &mut Rng, ranges: &TransformRanges) -> IntensityParams {
    let p = &ranges.probability;
    IntensityParams {
        gamma: draw(rng, p.gamma, ranges.gamma, 1.0),
        scale: draw(rng, p.scale, ranges.intensity_scale, 1.0),
        shift: draw(rng, p.shift, ranges.intensity_shift, 0.0),
        blur_sigma: draw(rng, p.blur, ranges.blur_sigma, 0.0),
        sharpen_amount: draw(rng, p.sharpen, ranges.sharpen_amount, 0.0),
        noise_sigma: draw(rng, p.noise, ranges.noise_sigma, 0.0),
        noise_seed: rng.random(),
    }
}

/// Normalised discrete Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur of one `h×w` plane with edge replication.
pub fn gaussian_blur(h: usize, w: usize, src: &[f32], sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return src.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + clamp(x as isize + i as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[clamp(y as isize + i as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Blur width used by unsharp masking.
const SHARPEN_SIGMA: f64 = 1.0;

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(shape_err!("expected an image with trailing H×W axes, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w).max(1), h, w))
}

/// Applies gamma, scale/shift, blur, sharpen and noise in that order, then
/// clips to `[0, 1]`. Every trailing `H×W` plane is processed independently;
/// all planes share one noise stream.
pub fn apply_intensity(image: &Tensor, params: &IntensityParams) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(image)?;
    let mut out = image.clone().with_requires_grad(false);
    if params.is_identity() {
        return Ok(out);
    }
    let mut noise_rng = rng::stream(params.noise_seed, &[]);
    for p in 0..planes {
        let mut buf = out.data()[p * h * w..(p + 1) * h * w].to_vec();
        if params.gamma != 1.0 {
            let g = params.gamma as f32;
            buf.iter_mut().for_each(|v| *v = v.max(0.0).powf(g));
        }
        if params.scale != 1.0 || params.shift != 0.0 {
            let (a, b) = (params.scale as f32, params.shift as f32);
            buf.iter_mut().for_each(|v| *v = *v * a + b);
        }
        if params.blur_sigma > 0.0 {
            buf = gaussian_blur(h, w, &buf, params.blur_sigma);
        }
        if params.sharpen_amount > 0.0 {
            let blurred = gaussian_blur(h, w, &buf, SHARPEN_SIGMA);
            let a = params.sharpen_amount as f32;
            buf.iter_mut().zip(&blurred).for_each(|(v, b)| *v += a * (*v - b));
        }
        if params.noise_sigma > 0.0 {
            let s = params.noise_sigma;
            for v in buf.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut noise_rng);
                *v += (s * n) as f32;
            }
        }
        buf.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out.data_mut()[p * h * w..(p + 1) * h * w].copy_from_slice(&buf);
    }
    Ok(out)
}

/// Row-major 2×3 affine matrix acting on `(x, y)` = (column, row).
pub type Affine = [[f64; 3]; 2];

pub const IDENTITY_AFFINE: Affine = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];

fn apply_affine(m: &Affine, x: f64, y: f64) -> (f64, f64) {
    (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
}

/// Product `a·b` of affine maps (apply `b` first).
pub fn compose(a: &Affine, b: &Affine) -> Affine {
    let mut out = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
        out[r][2] += a[r][2];
    }
    out
}

/// Invertible affine warp with its inverse cached.
///
/// `forward` maps input coordinates to output coordinates; warping samples the
/// input at `inverse · p` for each output pixel `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricParams {
    forward: Affine,
    inverse: Affine,
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams { forward: IDENTITY_AFFINE, inverse: IDENTITY_AFFINE };

    /// Rotation (degrees, counter-clockwise in `(x, y)`), isotropic scale and
    /// translation in pixels, all about the centre of an `h×w` image.
    pub fn about_center(rotation_deg: f64, scale: f64, tx: f64, ty: f64, h: usize, w: usize) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(invalid!("scale must be positive, got {scale}"));
        }
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = rotation_deg.to_radians().sin_cos();
        let (sin, cos) = snap_quarter_turn(rotation_deg).unwrap_or((sin, cos));
        let (a, b, c, d) = (scale * cos, -scale * sin, scale * sin, scale * cos);
        // p' = L (p − c) + c + t
        let forward = [
            [a, b, cx + tx - (a * cx + b * cy)],
            [c, d, cy + ty - (c * cx + d * cy)],
        ];
        // p = L⁻¹ (p' − c − t) + c, with L⁻¹ = Rᵀ / s
        let (ia, ib, ic, id) = (cos / scale, sin / scale, -sin / scale, cos / scale);
        let (ox, oy) = (cx + tx, cy + ty);
        let inverse = [
            [ia, ib, cx - (ia * ox + ib * oy)],
            [ic, id, cy - (ic * ox + id * oy)],
        ];
        Ok(GeometricParams { forward, inverse })
    }

    pub fn from_matrix(forward: Affine) -> Result<Self> {
        let det = forward[0][0] * forward[1][1] - forward[0][1] * forward[1][0];
        if !(det.abs() > 1e-6) {
            return Err(invalid!("affine matrix is singular (det {det})"));
        }
        let (a, b, c, d) = (forward[1][1] / det, -forward[0][1] / det, -forward[1][0] / det, forward[0][0] / det);
        let (tx, ty) = (forward[0][2], forward[1][2]);
        let inverse = [[a, b, -(a * tx + b * ty)], [c, d, -(c * tx + d * ty)]];
        Ok(GeometricParams { forward, inverse })
    }

    pub fn forward(&self) -> &Affine {
        &self.forward
    }

    pub fn inverse_matrix(&self) -> &Affine {
        &self.inverse
    }

    /// The inverse warp.
    pub fn inverse(&self) -> GeometricParams {
        GeometricParams { forward: self.inverse, inverse: self.forward }
    }

    pub fn is_identity(&self) -> bool {
        self.forward == IDENTITY_AFFINE
    }

    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        apply_affine(&self.forward, x, y)
    }

    pub fn map_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        apply_affine(&self.inverse, x, y)
    }
}

impl Default for GeometricParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Exact sine/cosine for multiples of 90°.
fn snap_quarter_turn(deg: f64) -> Option<(f64, f64)> {
    let q = deg / 90.0;
    if q.fract() != 0.0 {
        return None;
    }
    Some(match (q as i64).rem_euclid(4) {
        0 => (0.0, 1.0),
        1 => (1.0, 0.0),
        2 => (0.0, -1.0),
        _ => (-1.0, 0.0),
    })
}

pub fn sample_geometric(rng: &mut Rng, ranges: &TransformRanges, h: usize, w: usize) -> GeometricParams {
    let on = rng.random::<f64>() < ranges.probability.affine;
    let rot = ranges.rotation_deg.sample(rng);
    let scale = ranges.geometric_scale.sample(rng);
    let tx = ranges.translation.sample(rng) * w as f64;
    let ty = ranges.translation.sample(rng) * h as f64;
    if !on || (rot == 0.0 && scale == 1.0 && tx == 0.0 && ty == 0.0) {
        return GeometricParams::IDENTITY;
    }
    GeometricParams::about_center(rot, scale, tx, ty, h, w).expect("validated ranges give a positive scale")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpMode {
    Bilinear,
    Nearest,
}

const BOUNDS_TOL: f64 = 1e-6;

/// Sampling plan for warping an `h×w` plane by `params`.
pub fn warp_plan(params: &GeometricParams, h: usize, w: usize, mode: WarpMode) -> WarpPlan {
    let n = h * w;
    let mut taps = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = params.map_inverse(x as f64, y as f64);
            let tap = match mode {
                WarpMode::Nearest => {
                    let (ix, iy) = ((sx + 0.5).floor(), (sy + 0.5).floor());
                    if ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64 {
                        let i = (iy as usize * w + ix as usize) as u32;
                        Some(([i; 4], [1.0, 0.0, 0.0, 0.0]))
                    } else {
                        None
                    }
                }
                WarpMode::Bilinear => bilinear_tap(sx, sy, h, w),
            };
            match tap {
                Some((t, wt)) => {
                    taps.push(t);
                    weights.push(wt);
                    valid.push(true);
                }
                None => {
                    taps.push([0; 4]);
                    weights.push([0.0; 4]);
                    valid.push(false);
                }
            }
        }
    }
    WarpPlan { height: h, width: w, taps, weights, valid }
}

fn bilinear_tap(sx: f64, sy: f64, h: usize, w: usize) -> Option<([u32; 4], [f32; 4])> {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    if sx < -BOUNDS_TOL || sy < -BOUNDS_TOL || sx > wf + BOUNDS_TOL || sy > hf + BOUNDS_TOL {
        return None;
    }
    let (sx, sy) = (sx.clamp(0.0, wf), sy.clamp(0.0, hf));
    let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let idx = |yy: usize, xx: usize| (yy * w + xx) as u32;
    Some((
        [idx(y0, x0), idx(y0, x1), idx(y1, x0), idx(y1, x1)],
        [
            ((1.0 - fx) * (1.0 - fy)) as f32,
            (fx * (1.0 - fy)) as f32,
            ((1.0 - fx) * fy) as f32,
            (fx * fy) as f32,
        ],
    ))
}

/// Backward-warps every trailing `H×W` plane of `image`. Returns the warped
/// tensor and the per-pixel validity mask (pixels that sampled inside the input).
pub fn warp(image: &Tensor, params: &GeometricParams, mode: WarpMode, fill: f32) -> Result<(Tensor, Vec<bool>)> {
    let (planes, h, w) = plane_dims(image)?;
    if params.is_identity() {
        return Ok((image.clone().with_requires_grad(false), vec![true; h * w]));
    }
    let plan = warp_plan(params, h, w, mode);
    let mut out = image.clone().with_requires_grad(false);
    for p in 0..planes {
        let range = p * h * w..(p + 1) * h * w;
        plan.apply(&image.data()[range.clone()], fill, &mut out.data_mut()[range]);
    }
    Ok((out, plan.valid))
}

/// Nearest-neighbour warp of a label map; pixels sampled outside become `fill`.
pub fn warp_labels(labels: &LabelMap, params: &GeometricParams, fill: u8) -> Result<LabelMap> {
    let t = labels.to_tensor();
    let (out, _) = warp(&t, params, WarpMode::Nearest, fill as f32)?;
    LabelMap::from_tensor(&out, labels.num_classes())
}

/// One stochastic view of an image: `(φ, ψ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct View {
    pub intensity: IntensityParams,
    pub geometric: GeometricParams,
}

impl View {
    pub fn sample(rng: &mut Rng, ranges: &TransformRanges, h: usize, w: usize) -> View {
        let intensity = sample_intensity(rng, ranges);
        let geometric = sample_geometric(rng, ranges, h, w);
        View { intensity, geometric }
    }

    /// Network input `S_φ(T_ψ(x))` for an image tensor with trailing `H×W` axes.
    pub fn render(&self, image: &Tensor) -> Result<Tensor> {
        let (warped, _) = warp(image, &self.geometric, WarpMode::Bilinear, 0.0)?;
        apply_intensity(&warped, &self.intensity)
    }
}

/// Logits of `net` for each image under its view, mapped back to the
/// original frame: `T_ψ⁻¹(f(S_φ(T_ψ(x))))`.
///
/// `images` are `1×H×W` tensors. Returns the `N×C×H×W` logits on the tape and
/// an `N·H·W` mask of pixels whose round trip stayed inside the image; the
/// rest hold logit 0.
pub fn equivariant_forward<F>(tape: &mut Tape, net: F, images: &[Tensor], views: &[View]) -> Result<(Var, Vec<bool>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    if images.len() != views.len() || images.is_empty() {
        return Err(invalid!("{} images but {} views", images.len(), views.len()));
    }
    let rendered = images
        .iter()
        .zip(views)
        .map(|(img, v)| v.render(img))
        .collect::<Result<Vec<_>>>()?;
    let batch = Tensor::stack(&rendered)?;
    let [_, _, h, w] = batch.dims4()?;
    let input = tape.leaf(batch);
    let logits = net(tape, input)?;
    let [n, _, lh, lw] = tape.value(logits).dims4()?;
    if (lh, lw) != (h, w) || n != images.len() {
        return Err(Error::Shape(format!("network output {:?} does not match {h}×{w} inputs", tape.value(logits).shape())));
    }
    let mut mask = Vec::with_capacity(n * h * w);
    let mut plans = Vec::with_capacity(n);
    for v in views {
        if v.geometric.is_identity() {
            mask.extend(std::iter::repeat_n(true, h * w));
            plans.push(None);
        } else {
            let plan = warp_plan(&v.geometric.inverse(), h, w, WarpMode::Bilinear);
            mask.extend_from_slice(&plan.valid);
            plans.push(Some(Arc::new(plan)));
        }
    }
    let out = tape.warp(logits, plans, 0.0)?;
    Ok((out, mask))
}
