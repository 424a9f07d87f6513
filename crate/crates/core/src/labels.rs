//! Hard and soft per-pixel class targets.
//!
//! Classes are indexed from 0 with class 0 as background, so a map with
//! `num_classes = C` holds foreground classes `1..C`.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// Per-pixel hard class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if num_classes < 2 || num_classes > 255 {
            return Err(invalid!("class count must lie in 2..=255, got {num_classes}"));
        }
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err!("{} labels for a {height}×{width} map", data.len()));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(invalid!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(LabelMap { height, width, num_classes, data })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Binary indicator of `class`.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// One-hot `C×H×W` encoding.
    pub fn one_hot(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0f32; self.num_classes * plane];
        for (j, &v) in self.data.iter().enumerate() {
            out[v as usize * plane + j] = 1.0;
        }
        out
    }

    /// Stored as an `H×W` tensor of class indices.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn from_tensor(t: &Tensor, num_classes: usize) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(shape_err!("label tensor must be H×W, got {s:?}")),
        };
        let mut data = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v < 0.0 || v.fract() != 0.0 || v > 255.0 {
                return Err(invalid!("label value {v} is not a class index"));
            }
            data.push(v as u8);
        }
        Self::new(h, w, num_classes, data)
    }
}

/// Per-pixel class distributions stored as `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f32>,
}

impl SoftLabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid!("class count must be at least 2"));
        }
        if data.len() != num_classes * height * width {
            return Err(shape_err!("{} values for {num_classes}×{height}×{width}", data.len()));
        }
        Ok(SoftLabelMap { height, width, num_classes, data })
    }

    pub fn from_labels(labels: &LabelMap) -> Self {
        SoftLabelMap {
            height: labels.height,
            width: labels.width,
            num_classes: labels.num_classes,
            data: labels.one_hot(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn prob(&self, class: usize, j: usize) -> f32 {
        self.data[class * self.height * self.width + j]
    }

    /// Hard labels by per-pixel argmax, lowest class index on ties.
    pub fn argmax(&self) -> LabelMap {
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|j| {
                let mut best = 0;
                for c in 1..self.num_classes {
                    if self.data[c * plane + j] > self.data[best * plane + j] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.height, self.width, self.num_classes, data).unwrap()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.num_classes, self.height, self.width], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] => Self::new(*h, *w, *c, t.data().to_vec()),
            s => Err(shape_err!("soft label tensor must be C×H×W, got {s:?}")),
        }
    }
}
