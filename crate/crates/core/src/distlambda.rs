//! Exact Euclidean distance transforms and the boundary-weighted
//! consistency weight.
//!
//! Distances are computed with the two-pass separable lower-envelope
//! algorithm of Felzenszwalb and Huttenlocher on squared integer distances,
//! so results are exact. The weight map decays linearly from
//! `lambda_min + lambda_max` at the boundary to `lambda_min` at distance
//! `radius` and stays there.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Per-pixel distances in pixels. `f64::INFINITY` marks "no boundary".
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Per-pixel consistency weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DistanceMap {
    /// Tensor export; the infinite sentinel is stored as `f32::INFINITY`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

impl LambdaMap {
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        LambdaMap { height, width, data: vec![value; height * width] }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaParams {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Width of the boundary band in pixels.
    pub radius: f64,
}

impl Default for LambdaParams {
    fn default() -> Self {
        LambdaParams { lambda_min: 0.01, lambda_max: 1.0, radius: 10.0 }
    }
}

impl LambdaParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max) {
            return Err(invalid!("need 0 <= lambda_min <= lambda_max, got {} and {}", self.lambda_min, self.lambda_max));
        }
        if !(self.radius > 0.0) || !self.lambda_max.is_finite() {
            return Err(invalid!("radius must be positive, got {}", self.radius));
        }
        Ok(())
    }

    /// `λ(r) = λ_max · max(R − r, 0) / R + λ_min`.
    pub fn weight(&self, r: f64) -> f64 {
        if r.is_infinite() {
            return self.lambda_min;
        }
        self.lambda_max * ((self.radius - r).max(0.0) / self.radius) + self.lambda_min
    }
}

/// 1-D squared distance transform of the sampled function `f` (lower envelope
/// of parabolas rooted at finite entries).
fn lower_envelope(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `site` pixel.
pub fn squared_distance_to_sites(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(sites.len(), h * w);
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        lower_envelope(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        lower_envelope(&grid[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Squared distance from every pixel to the nearest pixel of the opposite value.
pub fn squared_edt_opposite(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let inv: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_false = squared_distance_to_sites(&inv, h, w);
    let to_true = squared_distance_to_sites(mask, h, w);
    mask.iter()
        .zip(to_false.iter().zip(&to_true))
        .map(|(&m, (&df, &dt))| if m { df } else { dt })
        .collect()
}

/// Euclidean distance from each pixel to the nearest pixel of the opposite
/// value; all `+∞` when the mask is constant.
pub fn edt_unsigned(mask: &[bool], h: usize, w: usize) -> Result<DistanceMap> {
    if mask.len() != h * w {
        return Err(shape_err!("{} mask entries for {h}×{w}", mask.len()));
    }
    let data = squared_edt_opposite(mask, h, w).into_iter().map(f64::sqrt).collect();
    Ok(DistanceMap { height: h, width: w, data })
}

/// Distance to the nearest foreground-class interface.
///
/// For each foreground class the interface sits between pixels, so a pixel
/// adjacent to it has distance 0.5: the unsigned EDT of the class indicator
/// minus one half. The result is the pixelwise minimum over foreground classes.
pub fn boundary_distance(labels: &LabelMap) -> DistanceMap {
    let (h, w) = (labels.height(), labels.width());
    let mut best = vec![f64::INFINITY; h * w];
    for class in 1..labels.num_classes() {
        let mask = labels.mask(class as u8);
        let d2 = squared_edt_opposite(&mask, h, w);
        for (b, d) in best.iter_mut().zip(d2) {
            *b = b.min(d.sqrt() - 0.5);
        }
    }
    DistanceMap { height: h, width: w, data: best }
}

pub fn lambda_map(r: &DistanceMap, params: &LambdaParams) -> Result<LambdaMap> {
    params.validate()?;
    Ok(LambdaMap {
        height: r.height,
        width: r.width,
        data: r.data.iter().map(|&d| params.weight(d)).collect(),
    })
}
