//! Helpers shared by the integration test targets: finite-difference
//! gradient checks here, direct metric and distance oracles in [`oracles`].
#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use calibseg::distlambda::{boundary_distance, lambda_map, LambdaParams};
use calibseg::losses::{self, LossMasks};
use calibseg::model::{init_weights, unet_forward, UNetConfig};
use calibseg::rng;
use calibseg::transforms::{warp_plan, GeometricParams, WarpMode};
use calibseg::{LabelMap, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn normal_tensor(r: &mut rng::Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = StandardNormal.sample(r);
        v * std
    })
}

/// Worst per-input relative error of [`check_each`].
pub fn check<F>(inputs: &[Tensor], eps: f32, probes: usize, r: &mut rng::Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_each(inputs, eps, probes, r, f).into_iter().fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` with central differences.
///
/// `f` builds a scalar from the leaves it is given. Up to `probes` entries of
/// every input are perturbed by `eps`; the result holds one relative error per
/// input over its probed entries.
pub fn check_each<F>(inputs: &[Tensor], eps: f32, probes: usize, r: &mut rng::Rng, f: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();

    // central differences are taken on the linear piece the tape selected,
    // so a relu input crossing zero within ±eps does not bias the oracle
    let pattern = tape.relu_pattern();
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::with_relu_pattern(pattern.clone());
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let picks: Vec<usize> = if t.numel() <= probes {
            (0..t.numel()).collect()
        } else {
            (0..probes).map(|_| r.random_range(0..t.numel())).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            minus[i].data_mut()[j] -= eps;
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            numeric.push((eval(&plus) - eval(&minus)) / step);
            analytic.push(grads[i][j] as f64);
        }
        errors.push(rel_err(&analytic, &numeric));
    }
    errors
}

/// Projects a tensor output to a scalar with fixed random weights.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Moves entries away from zero so piecewise-linear ops are not probed at a kink.
fn away_from_zero(t: &mut Tensor, gap: f32) {
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { *v - gap } else { *v + gap };
        }
    }
}

fn random_labels(r: &mut rng::Rng, n: usize, h: usize, w: usize, c: usize) -> Vec<LabelMap> {
    (0..n)
        .map(|_| {
            // blocky maps so boundary distances vary
            let (cy, cx) = (r.random_range(1..h - 1), r.random_range(1..w - 1));
            let k = r.random_range(1..c) as u8;
            let data = (0..h * w).map(|i| if i / w < cy && i % w < cx { k } else { r.random_range(0..c) as u8 * (i % 3 == 0) as u8 }).collect();
            LabelMap::new(h, w, c, data).unwrap()
        })
        .collect()
}

/// Relative error for every tensor primitive at one seed.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng::stream(seed, &[0x6d]);
    let eps = 1e-2;
    let probes = 24;
    let mut out = Vec::new();

    let x = normal_tensor(&mut r, &[2, 3, 6, 6], 1.0);
    let k = normal_tensor(&mut r, &[4, 3, 3, 3], 0.5);
    let b = normal_tensor(&mut r, &[4], 0.5);
    let pw = normal_tensor(&mut r, &[2, 4, 6, 6], 1.0);
    out.push((
        "conv2d",
        check(&[x.clone(), k, b], eps, probes, &mut r, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
            project(t, y, &pw)
        }),
    ));
    let k1 = normal_tensor(&mut r, &[2, 3, 1, 1], 0.5);
    let b1 = normal_tensor(&mut r, &[2], 0.5);
    let pw1 = normal_tensor(&mut r, &[2, 2, 6, 6], 1.0);
    out.push((
        "conv2d_1x1",
        check(&[x.clone(), k1, b1], eps, probes, &mut r, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 0).unwrap();
            project(t, y, &pw1)
        }),
    ));

    let mut xr = x.clone();
    away_from_zero(&mut xr, 3.0 * eps);
    let px = normal_tensor(&mut r, &[2, 3, 6, 6], 1.0);
    out.push(("relu", check(&[xr], eps, probes, &mut r, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, &px)
    })));
    let pd = normal_tensor(&mut r, &[2, 3, 3, 3], 1.0);
    out.push(("downsample2x", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let y = t.downsample2x(v[0]).unwrap();
        project(t, y, &pd)
    })));
    let pu = normal_tensor(&mut r, &[2, 3, 12, 12], 1.0);
    out.push(("upsample2x", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let y = t.upsample2x(v[0]).unwrap();
        project(t, y, &pu)
    })));
    let x2 = normal_tensor(&mut r, &[2, 2, 6, 6], 1.0);
    let pc = normal_tensor(&mut r, &[2, 5, 6, 6], 1.0);
    out.push(("concat_channels", check(&[x.clone(), x2], eps, probes, &mut r, |t, v| {
        let y = t.concat_channels(v[0], v[1]).unwrap();
        project(t, y, &pc)
    })));
    let ps = normal_tensor(&mut r, &[2, 2, 6, 6], 1.0);
    out.push(("slice_channels", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let y = t.slice_channels(v[0], 1, 2).unwrap();
        project(t, y, &ps)
    })));
    out.push(("softmax_channels", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let y = t.softmax_channels(v[0]).unwrap();
        project(t, y, &px)
    })));
    let geo = GeometricParams::about_center(r.random_range(-30.0..30.0), 1.1, 0.7, -0.4, 6, 6).unwrap();
    let plan = Arc::new(warp_plan(&geo, 6, 6, WarpMode::Bilinear));
    out.push(("warp", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let y = t.warp(v[0], vec![Some(plan.clone()), None], 0.0).unwrap();
        project(t, y, &px)
    })));
    let y = normal_tensor(&mut r, &[2, 3, 6, 6], 1.0);
    out.push(("add", check(&[x.clone(), y.clone()], eps, probes, &mut r, |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        project(t, s, &px)
    })));
    out.push(("mul", check(&[x.clone(), y.clone()], eps, probes, &mut r, |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        project(t, s, &px)
    })));
    out.push(("scale", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let s = t.scale(v[0], -1.7);
        project(t, s, &px)
    })));
    out.push(("sum", check(&[x.clone()], eps, probes, &mut r, |t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        t.sum(sq)
    })));

    let z = normal_tensor(&mut r, &[2, 3, 4, 4], 2.0);
    let targets: Arc<[f32]> = {
        let raw: Vec<f32> = (0..z.numel()).map(|_| r.random_range(0.0..1.0)).collect();
        let mut t = raw.clone();
        for s in 0..2 {
            for j in 0..16 {
                let tot: f32 = (0..3).map(|c| raw[(s * 3 + c) * 16 + j]).sum();
                for c in 0..3 {
                    t[(s * 3 + c) * 16 + j] /= tot;
                }
            }
        }
        t.into()
    };
    let weights: Arc<[f32]> = (0..32).map(|_| r.random_range(0.0..1.0)).collect();
    out.push(("soft_cross_entropy", check(&[z.clone()], eps, probes, &mut r, |t, v| {
        t.soft_cross_entropy(v[0], targets.clone(), weights.clone()).unwrap()
    })));
    let z2 = normal_tensor(&mut r, &[2, 3, 4, 4], 2.0);
    out.push(("squared_diff", check(&[z.clone(), z2], eps, probes, &mut r, |t, v| {
        t.squared_diff(v[0], v[1], weights.clone()).unwrap()
    })));
    // margin small enough that some hinges are active; probes avoid kinks
    let zm = hinge_safe_logits(&mut r, &[2, 3, 4, 4], 1.0, 3.0 * eps);
    out.push(("margin_hinge", check(&[zm], eps, probes, &mut r, |t, v| {
        t.margin_hinge(v[0], 1.0, weights.clone()).unwrap()
    })));
    out
}

/// Logits whose hinge arguments and top-two gaps all stay `gap` away from kinks.
fn hinge_safe_logits(r: &mut rng::Rng, shape: &[usize], margin: f32, gap: f32) -> Tensor {
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let plane = h * w;
    let mut t = Tensor::zeros(shape);
    for s in 0..n {
        for j in 0..plane {
            loop {
                let z: Vec<f32> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
                let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sorted = z.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let ok = sorted[0] - sorted[1] > 2.0 * gap
                    && z.iter().all(|&v| (max - v - margin).abs() > 2.0 * gap);
                if ok {
                    for k in 0..c {
                        t.data_mut()[(s * c + k) * plane + j] = z[k];
                    }
                    break;
                }
            }
        }
    }
    t
}

/// Relative error of every training loss at one seed.
pub fn loss_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng::stream(seed, &[0x1055]);
    let (n, c, h, w) = (2, 3, 8, 8);
    let eps = 1e-2;
    let probes = 24;
    let labels = random_labels(&mut r, n, h, w, c);
    let a = normal_tensor(&mut r, &[n, c, h, w], 1.5);
    let b = normal_tensor(&mut r, &[n, c, h, w], 1.5);
    let mask: Vec<bool> = (0..n * h * w).map(|_| r.random_range(0.0..1.0) < 0.85).collect();
    let mask2: Vec<bool> = mask.iter().map(|&m| m && r.random_range(0.0..1.0) < 0.9).collect();
    let lam: Vec<_> = labels
        .iter()
        .map(|l| lambda_map(&boundary_distance(l), &LambdaParams::default()).unwrap())
        .collect();
    let mut out = Vec::new();
    out.push(("cross_entropy", check(&[a.clone()], eps, probes, &mut r, |t, v| {
        losses::cross_entropy(t, v[0], &labels, Some(&mask)).unwrap().0
    })));
    out.push(("consistency", check(&[a.clone(), b.clone()], eps, probes, &mut r, |t, v| {
        losses::consistency_sq(t, v[0], v[1], Some(&mask2)).unwrap().0
    })));
    let masks = LossMasks { supervised: Some(&mask), consistency: Some(&mask2) };
    out.push(("cr_total", check(&[a.clone(), b.clone()], eps, probes, &mut r, |t, v| {
        losses::cr_total(t, v[0], v[1], &labels, 0.7, masks).unwrap().total
    })));
    let lam_refs: Vec<_> = lam.iter().collect();
    out.push(("bwcr_total", check(&[a.clone(), b.clone()], eps, probes, &mut r, |t, v| {
        losses::bwcr_total(t, v[0], v[1], &labels, &lam_refs, masks).unwrap().total
    })));
    let svls: Vec<_> = labels.iter().map(|l| losses::svls_targets(l, 1.0)).collect();
    out.push(("svls_cross_entropy", check(&[a.clone()], eps, probes, &mut r, |t, v| {
        losses::soft_cross_entropy(t, v[0], &svls, Some(&mask)).unwrap().0
    })));
    let zm = hinge_safe_logits(&mut r, &[n, c, h, w], 2.0, 3.0 * eps);
    out.push(("mls", check(&[zm], eps, probes, &mut r, |t, v| {
        let (ce, _) = losses::cross_entropy(t, v[0], &labels, None).unwrap();
        let (pen, _) = losses::mls_penalty(t, v[0], 2.0, None).unwrap();
        let pen = t.scale(pen, 0.1);
        t.add(ce, pen).unwrap()
    })));
    out
}

/// Relative error per parameter tensor of the two-branch boundary-weighted
/// loss through a U-Net on a 1×1×16×16 input, over a random subset of entries.
pub fn unet_errors(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng::stream(seed, &[0x0e7]);
    let cfg = UNetConfig { in_channels: 1, num_classes: 3, base_width: 2, depth: 3, kernel: 3 };
    let weights = init_weights(&cfg, seed).unwrap();
    let (h, w) = (16, 16);
    let xa = normal_tensor(&mut r, &[1, 1, h, w], 1.0);
    let xb = normal_tensor(&mut r, &[1, 1, h, w], 1.0);
    let labels = random_labels(&mut r, 1, h, w, 3);
    let lam: Vec<_> = labels
        .iter()
        .map(|l| lambda_map(&boundary_distance(l), &LambdaParams::default()).unwrap())
        .collect();
    let lam_refs: Vec<_> = lam.iter().collect();
    let mut inputs: Vec<Tensor> = weights.tensors().to_vec();
    // biases start at zero; give them values so their gradients are generic
    for t in inputs.iter_mut().filter(|t| t.rank() == 1) {
        for v in t.data_mut() {
            *v = r.random_range(-0.1..0.1);
        }
    }
    let errors = check_each(&inputs, 1e-3, 16, &mut r, |t, params| {
        let ia = t.leaf(xa.clone());
        let ib = t.leaf(xb.clone());
        let za = unet_forward(t, &cfg, params, ia).unwrap();
        let zb = unet_forward(t, &cfg, params, ib).unwrap();
        losses::bwcr_total(t, za, zb, &labels, &lam_refs, LossMasks::default()).unwrap().total
    });
    weights.names().iter().cloned().zip(errors).collect()
}
