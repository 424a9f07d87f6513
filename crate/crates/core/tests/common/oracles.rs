//! Slow, direct re-implementations used as test oracles.

use calibseg::rng::Rng;
use calibseg::LabelMap;
use rand::Rng as _;

/// Squared distance to the nearest pixel of the opposite value by exhaustive
/// search; `None` when the mask is constant.
pub fn brute_sq_edt(mask: &[bool], h: usize, w: usize) -> Vec<Option<u64>> {
    (0..h * w)
        .map(|p| {
            let (py, px) = ((p / w) as i64, (p % w) as i64);
            (0..h * w)
                .filter(|&q| mask[q] != mask[p])
                .map(|q| {
                    let (qy, qx) = ((q / w) as i64, (q % w) as i64);
                    ((py - qy) * (py - qy) + (px - qx) * (px - qx)) as u64
                })
                .min()
        })
        .collect()
}

pub fn random_mask(r: &mut Rng, h: usize, w: usize) -> Vec<bool> {
    match r.random_range(0..4) {
        // sparse speckle
        0 => (0..h * w).map(|_| r.random_bool(0.05)).collect(),
        // dense noise
        1 => (0..h * w).map(|_| r.random_bool(0.5)).collect(),
        // a filled disc
        2 => {
            let (cy, cx, rad) = (r.random_range(0.0..h as f64), r.random_range(0.0..w as f64), r.random_range(1.0..8.0));
            (0..h * w)
                .map(|i| {
                    let (y, x) = ((i / w) as f64, (i % w) as f64);
                    (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad
                })
                .collect()
        }
        // a rectangle, occasionally empty or full
        _ => {
            let (y0, y1) = (r.random_range(0..=h), r.random_range(0..=h));
            let (x0, x1) = (r.random_range(0..=w), r.random_range(0..=w));
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    y >= y0.min(y1) && y < y0.max(y1) && x >= x0.min(x1) && x < x0.max(x1)
                })
                .collect()
        }
    }
}

/// Random class probabilities (`C×H×W`, softmax of scaled normal logits)
/// and labels drawn partly from those probabilities.
pub fn random_prediction(r: &mut Rng) -> (Vec<f32>, LabelMap) {
    let c = r.random_range(2..5);
    let (h, w) = (r.random_range(4..20), r.random_range(4..20));
    let n = h * w;
    let temperature = r.random_range(0.3..6.0);
    let mut probs = vec![0.0f32; c * n];
    let mut labels = vec![0u8; n];
    for j in 0..n {
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0) * temperature).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..c {
            probs[k * n + j] = (e[k] / s) as f32;
        }
        let u: f64 = r.random();
        let mut acc = 0.0;
        labels[j] = (c - 1) as u8;
        for k in 0..c {
            acc += e[k] / s;
            if u < acc {
                labels[j] = k as u8;
                break;
            }
        }
    }
    (probs, LabelMap::new(h, w, c, labels).unwrap())
}

/// Equal-width ECE: bins `(b/n, (b+1)/n]`, confidence 0 joins the first bin.
pub fn naive_ece(probs: &[f32], labels: &LabelMap, n_bins: usize) -> f64 {
    let n = labels.height() * labels.width();
    let c = labels.num_classes();
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_bins];
    for j in 0..n {
        let mut best = 0;
        for k in 1..c {
            if probs[k * n + j] > probs[best * n + j] {
                best = k;
            }
        }
        let p = probs[best * n + j] as f64;
        let bin = (0..n_bins)
            .find(|&b| p <= (b + 1) as f64 / n_bins as f64 && (b == 0 || p > b as f64 / n_bins as f64))
            .unwrap_or(n_bins - 1);
        members[bin].push((p, labels.data()[j] as usize == best));
    }
    members
        .iter()
        .filter(|m| !m.is_empty())
        .map(|m| {
            let conf = m.iter().map(|x| x.0).sum::<f64>() / m.len() as f64;
            let acc = m.iter().filter(|x| x.1).count() as f64 / m.len() as f64;
            m.len() as f64 / n as f64 * (acc - conf).abs()
        })
        .sum()
}

/// TACE with equal-count bins per class over probabilities ≥ `threshold`;
/// leftover entries go one each to the lowest bins. Averages over non-empty
/// (class, bin) pairs; `None` when nothing passes the threshold.
pub fn naive_tace(probs: &[f32], labels: &LabelMap, n_bins: usize, threshold: f64) -> Option<f64> {
    let n = labels.height() * labels.width();
    let mut gaps = Vec::new();
    for k in 0..labels.num_classes() {
        let mut kept: Vec<(f64, f64)> = (0..n)
            .filter(|&j| probs[k * n + j] as f64 >= threshold)
            .map(|j| (probs[k * n + j] as f64, (labels.data()[j] as usize == k) as u8 as f64))
            .collect();
        kept.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let m = kept.len();
        let mut start = 0;
        for b in 0..n_bins {
            let end = start + m / n_bins + usize::from(b < m % n_bins);
            if end > start {
                let bin = &kept[start..end];
                let len = bin.len() as f64;
                let mean_p: f64 = bin.iter().map(|x| x.0).sum::<f64>() / len;
                let freq: f64 = bin.iter().map(|x| x.1).sum::<f64>() / len;
                gaps.push((freq - mean_p).abs());
            }
            start = end;
        }
    }
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}
